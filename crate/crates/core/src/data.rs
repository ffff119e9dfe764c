//! Datasets, design matrices and treatment encoding shared by every fitter.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Observed outcomes, treatment codes and regressors `f(X)`.
///
/// The design matrix always carries the intercept in column 0. Treatments are
/// coded `0..k` and every level has at least one row.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    y: Array1<S>,
    t: Vec<usize>,
    f: Array2<S>,
    k: usize,
    names: Vec<String>,
}

impl<S: Scalar> Dataset<S> {
    /// Builds a dataset from covariates without the intercept column.
    pub fn new(y: Array1<S>, t: Vec<usize>, covariates: Array2<S>, k: usize) -> Result<Self> {
        let n = covariates.nrows();
        let mut f = Array2::<S>::ones((n, covariates.ncols() + 1));
        f.slice_mut(s![.., 1..]).assign(&covariates);
        let names = (1..=covariates.ncols()).map(|j| format!("x{j}")).collect();
        Self::from_design(y, t, f, k, names)
    }

    /// Builds a dataset from a full design matrix whose column 0 must be 1.
    pub fn from_design(
        y: Array1<S>,
        t: Vec<usize>,
        f: Array2<S>,
        k: usize,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = f.nrows();
        if f.ncols() == 0 {
            return Err(Error::InvalidData("design matrix has no columns".into()));
        }
        if y.len() != n || t.len() != n {
            return Err(Error::InvalidData(format!(
                "length mismatch: y={}, t={}, rows={}",
                y.len(),
                t.len(),
                n
            )));
        }
        if names.len() + 1 != f.ncols() {
            return Err(Error::InvalidData("covariate name count mismatch".into()));
        }
        if k < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 treatment levels, got {k}"
            )));
        }
        if n < k {
            return Err(Error::InvalidData(format!("n = {n} is smaller than K = {k}")));
        }
        let mut counts = vec![0usize; k];
        for &ti in &t {
            if ti >= k {
                return Err(Error::InvalidData(format!("treatment code {ti} outside 0..{k}")));
            }
            counts[ti] += 1;
        }
        if let Some(level) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidData(format!("treatment level {level} has no rows")));
        }
        if f.column(0).iter().any(|&v| v != S::one()) {
            return Err(Error::InvalidData("column 0 of the design must be 1".into()));
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    column: "outcome".into(),
                    row: i,
                });
            }
        }
        for ((i, j), v) in f.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    column: names[j - 1].clone(),
                    row: i,
                });
            }
        }
        Ok(Self { y, t, f, k, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of non-intercept regressors.
    pub fn p(&self) -> usize {
        self.f.ncols() - 1
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn y(&self) -> ArrayView1<'_, S> {
        self.y.view()
    }

    pub fn treatments(&self) -> &[usize] {
        &self.t
    }

    pub fn design(&self) -> ArrayView2<'_, S> {
        self.f.view()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &ti in &self.t {
            counts[ti] += 1;
        }
        counts
    }

    /// Indicator matrix `R^(k) = 1{T = k}`, n x K.
    pub fn indicators(&self) -> Array2<S> {
        treatment_indicators(&self.t, self.k)
    }

    /// Rows `rows`, in order. Fails if a treatment level vanishes.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let y = self.y.select(Axis(0), rows);
        let f = self.f.select(Axis(0), rows);
        let t = rows.iter().map(|&i| self.t[i]).collect();
        Self::from_design(y, t, f, self.k, self.names.clone())
    }

    /// Rows of treatment `level`, relabelled as a single-level sample.
    ///
    /// The returned tuple holds `(y, design)`; the result is not a `Dataset`
    /// because one level cannot satisfy the K >= 2 invariant.
    pub fn group(&self, level: usize) -> (Array1<S>, Array2<S>) {
        let rows: Vec<usize> = (0..self.n()).filter(|&i| self.t[i] == level).collect();
        (self.y.select(Axis(0), &rows), self.f.select(Axis(0), &rows))
    }

    pub fn with_outcome(&self, y: Array1<S>) -> Result<Self> {
        Self::from_design(y, self.t.clone(), self.f.clone(), self.k, self.names.clone())
    }
}

/// Binary n x K matrix with `R[i, k] = 1` iff `t[i] == k`.
pub fn treatment_indicators<S: Scalar>(t: &[usize], k: usize) -> Array2<S> {
    let mut r = Array2::<S>::zeros((t.len(), k));
    for (i, &ti) in t.iter().enumerate() {
        r[[i, ti]] = S::one();
    }
    r
}

/// Column means and scales used to standardize non-intercept regressors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization<S> {
    pub means: Vec<S>,
    pub scales: Vec<S>,
    pub applied: bool,
}

/// Centres every non-intercept column to mean 0 and variance 1 (divisor n).
pub fn standardize<S: Scalar>(d: &Dataset<S>) -> Result<(Dataset<S>, Standardization<S>)> {
    let n = S::from_count(d.n());
    let f = d.design();
    let mut means = Vec::with_capacity(d.p());
    let mut scales = Vec::with_capacity(d.p());
    for j in 1..=d.p() {
        let col = f.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let sd = var.sqrt();
        if !(sd > S::epsilon() * (S::one() + mean.abs())) {
            return Err(Error::ZeroVariance(d.names()[j - 1].clone()));
        }
        means.push(mean);
        scales.push(sd);
    }
    let st = Standardization {
        means,
        scales,
        applied: true,
    };
    let out = st.apply(d)?;
    Ok((out, st))
}

impl<S: Scalar> Standardization<S> {
    /// Identity transform for `p` regressors.
    pub fn identity(p: usize) -> Self {
        Self {
            means: vec![S::zero(); p],
            scales: vec![S::one(); p],
            applied: false,
        }
    }

    /// Applies stored moments to another dataset with the same columns.
    pub fn apply(&self, d: &Dataset<S>) -> Result<Dataset<S>> {
        if d.p() != self.means.len() {
            return Err(Error::InvalidArgument(format!(
                "standardization has {} columns, dataset has {}",
                self.means.len(),
                d.p()
            )));
        }
        let mut f = d.design().to_owned();
        for j in 1..f.ncols() {
            let (m, sc) = (self.means[j - 1], self.scales[j - 1]);
            f.column_mut(j).mapv_inplace(|v| (v - m) / sc);
        }
        Dataset::from_design(
            d.y().to_owned(),
            d.treatments().to_vec(),
            f,
            d.k(),
            d.names().to_vec(),
        )
    }

    /// Maps coefficients fitted on the standardized design back to raw regressors.
    pub fn destandardize_coef(&self, coef: ArrayView2<'_, S>) -> Array2<S> {
        let mut out = coef.to_owned();
        for j in 1..coef.nrows() {
            let (m, sc) = (self.means[j - 1], self.scales[j - 1]);
            for c in 0..coef.ncols() {
                let b = coef[[j, c]] / sc;
                out[[j, c]] = b;
                out[[0, c]] -= b * m;
            }
        }
        out
    }

    /// Inverse of [`destandardize_coef`](Self::destandardize_coef).
    pub fn standardize_coef(&self, coef: ArrayView2<'_, S>) -> Array2<S> {
        let mut out = coef.to_owned();
        for j in 1..coef.nrows() {
            let (m, sc) = (self.means[j - 1], self.scales[j - 1]);
            for c in 0..coef.ncols() {
                out[[j, c]] = coef[[j, c]] * sc;
                out[[0, c]] += coef[[j, c]] * m;
            }
        }
        out
    }
}

/// Column roles for CSV input.
#[derive(Debug, Clone)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatment: String,
    /// `None` selects every remaining column.
    pub covariates: Option<Vec<String>>,
}

/// Original treatment labels, indexed by internal code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentMap {
    pub labels: Vec<i64>,
}

impl TreatmentMap {
    pub fn label(&self, code: usize) -> i64 {
        self.labels[code]
    }

    pub fn code(&self, label: i64) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

fn parse_real(raw: &str, column: &str, row: usize) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        column: column.to_string(),
        row,
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            column: column.to_string(),
            row,
        });
    }
    Ok(v)
}

fn parse_label(raw: &str, column: &str, row: usize) -> Result<i64> {
    let trimmed = raw.trim();
    if let Ok(v) = trimmed.parse::<i64>() {
        return Ok(v);
    }
    let v = parse_real(trimmed, column, row)?;
    if v.fract() != 0.0 || v.abs() > 9.0e15 {
        return Err(Error::Parse {
            column: column.to_string(),
            row,
            value: raw.to_string(),
        });
    }
    Ok(v as i64)
}

/// Reads a headed CSV into a dataset, relabelling treatments to `0..K` in
/// increasing label order.
pub fn load_csv<S: Scalar, P: AsRef<Path>>(
    path: P,
    roles: &ColumnRoles,
) -> Result<(Dataset<S>, TreatmentMap)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let find = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = find(&roles.outcome)?;
    let t_col = find(&roles.treatment)?;
    let cov_names: Vec<String> = match &roles.covariates {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y_col && *i != t_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_cols = cov_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut ys = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut codes = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        ys.push(parse_real(get(y_col), &roles.outcome, row)?);
        let label = parse_label(get(t_col), &roles.treatment, row)?;
        let code = match labels.iter().position(|&l| l == label) {
            Some(c) => c,
            None => {
                labels.push(label);
                labels.len() - 1
            }
        };
        codes.push(code);
        for (&c, name) in cov_cols.iter().zip(&cov_names) {
            xs.push(parse_real(get(c), name, row)?);
        }
    }
    let n = ys.len();
    if labels.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 treatment levels, found {}",
            labels.len()
        )));
    }
    let mut sorted = labels.clone();
    sorted.sort_unstable();
    let remap: Vec<usize> = labels
        .iter()
        .map(|l| sorted.binary_search(l).expect("label present"))
        .collect();
    let codes: Vec<usize> = codes.into_iter().map(|c| remap[c]).collect();
    let labels = sorted;
    let p = cov_cols.len();
    let mut f = Array2::<S>::ones((n, p + 1));
    for i in 0..n {
        for j in 0..p {
            f[[i, j + 1]] = S::lit(xs[i * p + j]);
        }
    }
    let y = ys.into_iter().map(S::lit).collect();
    let k = labels.len();
    let d = Dataset::from_design(y, codes, f, k, cov_names)?;
    Ok((d, TreatmentMap { labels }))
}

/// Appends pairwise products of the non-intercept regressors, dropping
/// products whose fraction of nonzero entries is below `min_frequency` or whose
/// sample variance is zero.
pub fn pairwise_interactions<S: Scalar>(d: &Dataset<S>, min_frequency: f64) -> Result<Dataset<S>> {
    let n = d.n();
    let p = d.p();
    let f = d.design();
    let mut extra: Vec<Array1<S>> = Vec::new();
    let mut names = d.names().to_vec();
    for a in 1..=p {
        for b in (a + 1)..=p {
            let col: Array1<S> = &f.column(a) * &f.column(b);
            let nonzero = col.iter().filter(|v| **v != S::zero()).count();
            if (nonzero as f64) < min_frequency * n as f64 {
                continue;
            }
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                continue;
            }
            names.push(format!("{}:{}", d.names()[a - 1], d.names()[b - 1]));
            extra.push(col);
        }
    }
    let mut out = Array2::<S>::zeros((n, p + 1 + extra.len()));
    out.slice_mut(s![.., ..=p]).assign(&f);
    for (c, col) in extra.iter().enumerate() {
        out.column_mut(p + 1 + c).assign(col);
    }
    Dataset::from_design(d.y().to_owned(), d.treatments().to_vec(), out, d.k(), names)
}
