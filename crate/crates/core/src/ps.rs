//! Multi-class logistic propensity scores fitted by penalized calibration
//! (RCAL) or penalized likelihood (RML).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{LossAdapter, SolveConfig, SolveResult, Solver};
use crate::error::{Error, Result};
use crate::Scalar;

/// Differences of linear predictors beyond this magnitude (probability ratios
/// below e^-100) indicate separation or an unbounded penalized loss.
pub const SEPARATION_LIMIT: f64 = 100.0;

/// Identification constraint on the (p+1) x K coefficient matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Column `reference` fixed at zero.
    OneToZero { reference: usize },
    /// Columns sum to zero; only the intercept row is recentred explicitly.
    SumToZero,
}

impl Constraint {
    fn free_columns(&self, k: usize) -> Vec<usize> {
        match *self {
            Constraint::OneToZero { reference } => (0..k).filter(|&c| c != reference).collect(),
            Constraint::SumToZero => (0..k).collect(),
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        match *self {
            Constraint::OneToZero { reference } if reference >= k => Err(Error::InvalidArgument(format!(
                "reference column {reference} outside 0..{k}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PsMethod {
    Rcal { target: usize },
    Rml,
}

/// Fitted propensity score model.
#[derive(Debug, Clone, Serialize)]
pub struct PsModel<S> {
    /// Full (p+1) x K coefficient matrix, constrained columns included.
    pub gamma: Array2<S>,
    pub constraint: Constraint,
    pub method: PsMethod,
    pub lambda: S,
}

impl<S: Scalar> PsModel<S> {
    pub fn k(&self) -> usize {
        self.gamma.ncols()
    }

    /// Fitted probabilities, n x K.
    pub fn probs(&self, design: ArrayView2<'_, S>) -> Array2<S> {
        softmax_rows(design.dot(&self.gamma).view())
    }
}

/// `pi(k, X; gamma)` for every row of `d`.
pub fn predict_probs<S: Scalar>(model: &PsModel<S>, d: &Dataset<S>) -> Result<Array2<S>> {
    if model.gamma.nrows() != d.p() + 1 || model.k() != d.k() {
        return Err(Error::InvalidArgument(format!(
            "model is {}x{}, dataset needs {}x{}",
            model.gamma.nrows(),
            model.k(),
            d.p() + 1,
            d.k()
        )));
    }
    Ok(model.probs(d.design()))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(eta: ArrayView2<'_, S>) -> Array2<S> {
    let mut out = eta.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn check_separation<S: Scalar>(row: usize, v: S) -> Result<()> {
    if v.abs() > S::lit(SEPARATION_LIMIT) || !v.is_finite() {
        return Err(Error::Separation {
            row,
            magnitude: v.abs().as_f64(),
        });
    }
    Ok(())
}

/// Calibration loss `E~[ sum_{k != t} { R^t e^{(g_k - g_t)'f} - R^k (g_k - g_t)'f } ]`
/// for a full (p+1) x K coefficient matrix.
pub fn cal_loss<S: Scalar>(d: &Dataset<S>, gamma: &Array2<S>, t: usize) -> Result<S> {
    if t >= d.k() || gamma.ncols() != d.k() || gamma.nrows() != d.p() + 1 {
        return Err(Error::InvalidArgument("cal_loss: shape or target mismatch".into()));
    }
    cal_loss_eta(d.treatments(), d.design().dot(gamma).view(), t)
}

fn cal_loss_eta<S: Scalar>(codes: &[usize], eta: ArrayView2<'_, S>, t: usize) -> Result<S> {
    let mut total = S::zero();
    for (i, row) in eta.outer_iter().enumerate() {
        let ti = codes[i];
        for (k, &ek) in row.iter().enumerate() {
            if k == t {
                continue;
            }
            if ti != t && ti != k {
                continue;
            }
            let diff = ek - row[t];
            check_separation(i, diff)?;
            if ti == t {
                total += diff.exp();
            } else if ti == k {
                total -= diff;
            }
        }
    }
    Ok(total / S::from_count(eta.nrows()))
}

/// Average negative multinomial log-likelihood for a full coefficient matrix.
pub fn ml_loss<S: Scalar>(d: &Dataset<S>, gamma: &Array2<S>) -> Result<S> {
    if gamma.ncols() != d.k() || gamma.nrows() != d.p() + 1 {
        return Err(Error::InvalidArgument("ml_loss: shape mismatch".into()));
    }
    ml_loss_eta(d.treatments(), d.design().dot(gamma).view())
}

fn ml_loss_eta<S: Scalar>(codes: &[usize], eta: ArrayView2<'_, S>) -> Result<S> {
    let mut total = S::zero();
    for (i, row) in eta.outer_iter().enumerate() {
        let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let min = row.iter().fold(S::infinity(), |a, &v| a.min(v));
        check_separation(i, max - min)?;
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        total = total + lse - row[codes[i]];
    }
    Ok(total / S::from_count(eta.nrows()))
}

/// Expands the engine's free columns into the full n x K predictor matrix.
fn full_eta<S: Scalar>(eta: ArrayView2<'_, S>, free: &[usize], k: usize) -> Array2<S> {
    if free.len() == k {
        return eta.to_owned();
    }
    let mut out = Array2::zeros((eta.nrows(), k));
    for (c, &col) in free.iter().enumerate() {
        out.column_mut(col).assign(&eta.column(c));
    }
    out
}

fn full_coef<S: Scalar>(coef: &Array2<S>, free: &[usize], k: usize) -> Array2<S> {
    full_eta(coef.view(), free, k)
}

fn recentre_intercepts<S: Scalar>(coef: &mut Array2<S>) {
    let mean = coef.row(0).sum() / S::from_count(coef.ncols());
    coef.row_mut(0).mapv_inplace(|v| v - mean);
}

/// Engine adapter for the calibration loss of target treatment `t`.
///
/// With the one-to-zero constraint on column `t` the Fisher-scored curvature
/// is `diag(pi_k : k != t)` and the bound is `max_i max_{k != t} pi_k`. When
/// column `t` is free (sum-to-zero, or another reference column) the
/// curvature is dominated by twice its diagonal, giving `max_i 2 (1 - pi_t)`.
/// The engine itself uses the exact Hessian and this bound only to scale
/// its damping.
pub struct CalAdapter<'a, S: Scalar> {
    data: &'a Dataset<S>,
    target: usize,
    constraint: Constraint,
    free: Vec<usize>,
}

impl<'a, S: Scalar> CalAdapter<'a, S> {
    pub fn new(data: &'a Dataset<S>, target: usize, constraint: Constraint) -> Result<Self> {
        if target >= data.k() {
            return Err(Error::InvalidArgument(format!("target {target} outside 0..{}", data.k())));
        }
        constraint.validate(data.k())?;
        Ok(Self {
            data,
            target,
            constraint,
            free: constraint.free_columns(data.k()),
        })
    }

    pub fn free_columns(&self) -> &[usize] {
        &self.free
    }

    pub fn expand(&self, coef: &Array2<S>) -> Array2<S> {
        full_coef(coef, &self.free, self.data.k())
    }

    /// n x K matrix of `R^t exp(eta_k - eta_t)`, zero in column `t`.
    fn ratios(&self, eta: ArrayView2<'_, S>) -> Array2<S> {
        let t = self.target;
        let full = full_eta(eta, &self.free, self.data.k());
        let mut out = Array2::zeros(full.dim());
        for ((row, mut o), &ti) in full.outer_iter().zip(out.outer_iter_mut()).zip(self.data.treatments()) {
            if ti == t {
                for (kk, o) in o.iter_mut().enumerate() {
                    if kk != t {
                        *o = (row[kk] - row[t]).exp();
                    }
                }
            }
        }
        out
    }
}

impl<S: Scalar> LossAdapter<S> for CalAdapter<'_, S> {
    fn responses(&self) -> usize {
        self.free.len()
    }

    fn design(&self) -> ArrayView2<'_, S> {
        self.data.design()
    }

    fn loss(&self, eta: ArrayView2<'_, S>) -> Result<S> {
        let full = full_eta(eta, &self.free, self.data.k());
        cal_loss_eta(self.data.treatments(), full.view(), self.target)
    }

    fn pseudo_gradient(&self, eta: ArrayView2<'_, S>) -> Array2<S> {
        let k = self.data.k();
        let t = self.target;
        let full = full_eta(eta, &self.free, k);
        let codes = self.data.treatments();
        let mut g = Array2::zeros((eta.nrows(), k));
        for (i, (row, mut out)) in full.outer_iter().zip(g.outer_iter_mut()).enumerate() {
            let rt = if codes[i] == t { S::one() } else { S::zero() };
            let mut sum_ratio = S::zero();
            for kk in 0..k {
                if kk == t {
                    continue;
                }
                let ratio = (row[kk] - row[t]).exp();
                sum_ratio += ratio;
                let rk = if codes[i] == kk { S::one() } else { S::zero() };
                out[kk] = rt * ratio - rk;
            }
            // 1 - R^t / pi_t, with 1/pi_t = 1 + sum_{k != t} pi_k / pi_t
            out[t] = S::one() - rt * (S::one() + sum_ratio);
        }
        g.select(Axis(1), &self.free)
    }

    fn majorizer(&self, eta: ArrayView2<'_, S>) -> S {
        let full = full_eta(eta, &self.free, self.data.k());
        let probs = softmax_rows(full.view());
        let t = self.target;
        let target_free = self.free.contains(&t);
        let mut b = S::zero();
        for row in probs.outer_iter() {
            let v = if target_free {
                S::lit(2.0) * (S::one() - row[t])
            } else {
                row.iter()
                    .enumerate()
                    .filter(|(kk, _)| *kk != t)
                    .fold(S::zero(), |a, (_, &p)| a.max(p))
            };
            b = b.max(v);
        }
        b.max(S::lit(1e-12))
    }

    /// Hessian in the linear predictors: `R^t exp(eta_k - eta_t)` on each
    /// `k != t`, their sum on `t`, and minus each ratio between `k` and `t`.
    fn curvature(&self, eta: ArrayView2<'_, S>) -> Option<Array2<S>> {
        let t = self.target;
        let ratios = self.ratios(eta);
        let mut w = Array2::zeros((eta.nrows(), self.free.len()));
        for (c, &kk) in self.free.iter().enumerate() {
            if kk == t {
                w.column_mut(c).assign(&ratios.sum_axis(Axis(1)));
            } else {
                w.column_mut(c).assign(&ratios.column(kk));
            }
        }
        Some(w)
    }

    fn cross_curvature(&self, eta: ArrayView2<'_, S>) -> Vec<(usize, usize, Array1<S>)> {
        let t = self.target;
        let Some(ct) = self.free.iter().position(|&kk| kk == t) else {
            return Vec::new();
        };
        let ratios = self.ratios(eta);
        self.free
            .iter()
            .enumerate()
            .filter(|&(_, &kk)| kk != t)
            .map(|(c, &kk)| (c.min(ct), c.max(ct), ratios.column(kk).mapv(|v| -v)))
            .collect()
    }

    fn normalize(&self, coef: &mut Array2<S>) {
        if self.constraint == Constraint::SumToZero {
            recentre_intercepts(coef);
        }
    }
}

/// Engine adapter for the multinomial likelihood; bound `b = 1/2`, local
/// curvature `diag(pi) - pi pi'`.
pub struct MlAdapter<'a, S: Scalar> {
    data: &'a Dataset<S>,
    constraint: Constraint,
    free: Vec<usize>,
}

impl<'a, S: Scalar> MlAdapter<'a, S> {
    pub fn new(data: &'a Dataset<S>, constraint: Constraint) -> Result<Self> {
        constraint.validate(data.k())?;
        Ok(Self {
            data,
            constraint,
            free: constraint.free_columns(data.k()),
        })
    }

    pub fn expand(&self, coef: &Array2<S>) -> Array2<S> {
        full_coef(coef, &self.free, self.data.k())
    }

    fn free_probs(&self, eta: ArrayView2<'_, S>) -> Array2<S> {
        let full = full_eta(eta, &self.free, self.data.k());
        softmax_rows(full.view()).select(Axis(1), &self.free)
    }
}

impl<S: Scalar> LossAdapter<S> for MlAdapter<'_, S> {
    fn responses(&self) -> usize {
        self.free.len()
    }

    fn design(&self) -> ArrayView2<'_, S> {
        self.data.design()
    }

    fn loss(&self, eta: ArrayView2<'_, S>) -> Result<S> {
        let full = full_eta(eta, &self.free, self.data.k());
        ml_loss_eta(self.data.treatments(), full.view())
    }

    fn pseudo_gradient(&self, eta: ArrayView2<'_, S>) -> Array2<S> {
        let full = full_eta(eta, &self.free, self.data.k());
        let mut g = softmax_rows(full.view());
        for (i, &ti) in self.data.treatments().iter().enumerate() {
            g[[i, ti]] -= S::one();
        }
        g.select(Axis(1), &self.free)
    }

    fn majorizer(&self, _eta: ArrayView2<'_, S>) -> S {
        S::lit(0.5)
    }

    fn curvature(&self, eta: ArrayView2<'_, S>) -> Option<Array2<S>> {
        let probs = self.free_probs(eta);
        Some(probs.mapv(|v| v * (S::one() - v)))
    }

    fn cross_curvature(&self, eta: ArrayView2<'_, S>) -> Vec<(usize, usize, Array1<S>)> {
        let probs = self.free_probs(eta);
        let m = probs.ncols();
        let mut out = Vec::with_capacity(m * (m - 1) / 2);
        for c in 0..m {
            for l in c + 1..m {
                out.push((c, l, -(&probs.column(c) * &probs.column(l))));
            }
        }
        out
    }

    fn normalize(&self, coef: &mut Array2<S>) {
        if self.constraint == Constraint::SumToZero {
            recentre_intercepts(coef);
        }
    }
}

/// Fitted propensity model with its solver trace.
#[derive(Debug, Clone, Serialize)]
pub struct PsFit<S> {
    pub model: PsModel<S>,
    pub solve: SolveResult<S>,
}

/// Compresses a full coefficient matrix onto the free columns of `constraint`,
/// moving it onto the constraint surface first.
pub fn free_part<S: Scalar>(gamma: &Array2<S>, constraint: Constraint) -> Array2<S> {
    match constraint {
        Constraint::OneToZero { reference } => {
            let shift = gamma.column(reference).to_owned();
            let mut g = gamma.clone();
            for mut col in g.columns_mut() {
                col -= &shift;
            }
            let free = constraint.free_columns(gamma.ncols());
            g.select(Axis(1), &free)
        }
        Constraint::SumToZero => {
            let mean: Array1<S> = gamma.mean_axis(Axis(1)).expect("nonempty");
            let mut g = gamma.clone();
            for mut col in g.columns_mut() {
                col -= &mean;
            }
            g
        }
    }
}

/// Penalized calibration fit for target `t`, optionally warm-started from a
/// full (p+1) x K coefficient matrix.
pub fn fit_rcal_ps_from<S: Scalar>(
    d: &Dataset<S>,
    t: usize,
    lambda: S,
    constraint: Constraint,
    cfg: &SolveConfig<S>,
    init: Option<&Array2<S>>,
) -> Result<PsFit<S>> {
    let adapter = CalAdapter::new(d, t, constraint)?;
    let start = match init {
        Some(g) => free_part(g, constraint),
        None => Array2::zeros((d.p() + 1, adapter.responses())),
    };
    let cfg = SolveConfig { lambda, ..*cfg };
    let solve = Solver::new(&adapter).solve(&start, &cfg)?;
    Ok(PsFit {
        model: PsModel {
            gamma: adapter.expand(&solve.coef),
            constraint,
            method: PsMethod::Rcal { target: t },
            lambda,
        },
        solve,
    })
}

pub fn fit_rcal_ps<S: Scalar>(
    d: &Dataset<S>,
    t: usize,
    lambda: S,
    constraint: Constraint,
    cfg: &SolveConfig<S>,
) -> Result<PsFit<S>> {
    fit_rcal_ps_from(d, t, lambda, constraint, cfg, None)
}

pub fn fit_rml_ps_from<S: Scalar>(
    d: &Dataset<S>,
    lambda: S,
    constraint: Constraint,
    cfg: &SolveConfig<S>,
    init: Option<&Array2<S>>,
) -> Result<PsFit<S>> {
    let adapter = MlAdapter::new(d, constraint)?;
    let start = match init {
        Some(g) => free_part(g, constraint),
        None => Array2::zeros((d.p() + 1, adapter.responses())),
    };
    let cfg = SolveConfig { lambda, ..*cfg };
    let solve = Solver::new(&adapter).solve(&start, &cfg)?;
    Ok(PsFit {
        model: PsModel {
            gamma: adapter.expand(&solve.coef),
            constraint,
            method: PsMethod::Rml,
            lambda,
        },
        solve,
    })
}

pub fn fit_rml_ps<S: Scalar>(
    d: &Dataset<S>,
    lambda: S,
    constraint: Constraint,
    cfg: &SolveConfig<S>,
) -> Result<PsFit<S>> {
    fit_rml_ps_from(d, lambda, constraint, cfg, None)
}
