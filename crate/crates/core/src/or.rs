//! Outcome regression: weighted-likelihood copies (RWL) and the likelihood
//! baselines RMLs / RMLg, all through one weighted GLM adapter.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, CowArray, Ix1, Ix2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{LossAdapter, SolveConfig, SolveResult, Solver};
use crate::error::{Error, Result};
use crate::ps::PsModel;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    Logit,
}

impl Link {
    /// Inverse link `psi(u)`.
    pub fn mean<S: Scalar>(self, u: S) -> S {
        match self {
            Link::Identity => u,
            Link::Logit => {
                if u >= S::zero() {
                    S::one() / (S::one() + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (S::one() + e)
                }
            }
        }
    }

    /// Cumulant `Psi(u)` with `Psi' = psi`, `Psi(0) = 0` for the identity.
    pub fn cumulant<S: Scalar>(self, u: S) -> S {
        match self {
            Link::Identity => u * u / S::lit(2.0),
            Link::Logit => u.max(S::zero()) + (-u.abs()).exp().ln_1p(),
        }
    }

    /// Derivative `psi_2(u)` of the inverse link.
    pub fn variance<S: Scalar>(self, u: S) -> S {
        match self {
            Link::Identity => S::one(),
            Link::Logit => {
                let m = self.mean(u);
                m * (S::one() - m)
            }
        }
    }

    fn check_outcome<S: Scalar>(self, y: ArrayView1<'_, S>) -> Result<()> {
        if self == Link::Logit {
            if let Some(i) = y.iter().position(|&v| !(v >= S::zero() && v <= S::one())) {
                return Err(Error::InvalidArgument(format!(
                    "logit link needs outcomes in [0, 1]; row {i} has {}",
                    y[i].as_f64()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OrMethod {
    Rwl { target: usize },
    Rmls,
    Rmlg,
}

/// Fitted outcome regression. Column `c` of `coef` belongs to treatment
/// `columns[c]`: the copies `k != t` for RWL, every treatment otherwise.
#[derive(Debug, Clone, Serialize)]
pub struct OrModel<S> {
    pub method: OrMethod,
    pub coef: Array2<S>,
    pub columns: Vec<usize>,
    pub link: Link,
    /// One penalty for RWL and RMLg, one per treatment for RMLs.
    pub lambda: Vec<S>,
}

impl<S: Scalar> OrModel<S> {
    /// Fitted means `psi(f' alpha)` for every row and column.
    pub fn predict(&self, design: ArrayView2<'_, S>) -> Array2<S> {
        let link = self.link;
        design.dot(&self.coef).mapv(|u| link.mean(u))
    }

    pub fn column_of(&self, treatment: usize) -> Option<usize> {
        self.columns.iter().position(|&c| c == treatment)
    }
}

/// Loss `E~[ sum_c w_ic { -Y_i eta_ic + Psi(eta_ic) } ]` with curvature
/// `w_ic psi_2(eta_ic)`.
pub struct WeightedGlmAdapter<'a, S: Scalar> {
    design: CowArray<'a, S, Ix2>,
    y: CowArray<'a, S, Ix1>,
    weights: Array2<S>,
    link: Link,
}

impl<'a, S: Scalar> WeightedGlmAdapter<'a, S> {
    pub fn new(
        design: CowArray<'a, S, Ix2>,
        y: CowArray<'a, S, Ix1>,
        weights: Array2<S>,
        link: Link,
    ) -> Result<Self> {
        let n = design.nrows();
        if y.len() != n || weights.nrows() != n || weights.ncols() == 0 {
            return Err(Error::InvalidArgument("weighted GLM: inconsistent shapes".into()));
        }
        if weights.iter().any(|&w| !(w >= S::zero()) || !w.is_finite()) {
            return Err(Error::InvalidArgument("weighted GLM: weights must be finite and >= 0".into()));
        }
        link.check_outcome(y.view())?;
        Ok(Self {
            design,
            y,
            weights,
            link,
        })
    }

    /// RWL for target `t`: copy `k` weighted by `R^t pi_k / pi_t`, where
    /// `probs` are the fixed n x K propensities. Only rows with `T = t` carry
    /// weight, so the adapter keeps those rows and rescales the weights by
    /// `n_t / n`, leaving the loss unchanged.
    pub fn rwl(d: &Dataset<S>, t: usize, probs: ArrayView2<'_, S>, link: Link) -> Result<WeightedGlmAdapter<'static, S>> {
        let k = d.k();
        if t >= k || probs.dim() != (d.n(), k) {
            return Err(Error::InvalidArgument("rwl: target or probability shape mismatch".into()));
        }
        let cols: Vec<usize> = (0..k).filter(|&c| c != t).collect();
        let rows: Vec<usize> = (0..d.n()).filter(|&i| d.treatments()[i] == t).collect();
        if rows.is_empty() {
            return Err(Error::InvalidData(format!("treatment group {t} is empty")));
        }
        let scale = S::from_count(rows.len()) / S::from_count(d.n());
        let mut weights = Array2::zeros((rows.len(), cols.len()));
        for (r, &i) in rows.iter().enumerate() {
            for (c, &kk) in cols.iter().enumerate() {
                weights[[r, c]] = scale * probs[[i, kk]] / probs[[i, t]];
            }
        }
        let (y, f) = d.group(t);
        WeightedGlmAdapter::new(CowArray::from(f), CowArray::from(y), weights, link)
    }

    /// Unweighted GLM on the rows of group `t`.
    pub fn rmls(d: &Dataset<S>, t: usize, link: Link) -> Result<WeightedGlmAdapter<'static, S>> {
        if t >= d.k() {
            return Err(Error::InvalidArgument(format!("treatment {t} outside 0..{}", d.k())));
        }
        let (y, f) = d.group(t);
        if y.is_empty() {
            return Err(Error::InvalidData(format!("treatment group {t} is empty")));
        }
        let ones = Array2::ones((y.len(), 1));
        WeightedGlmAdapter::new(CowArray::from(f), CowArray::from(y), ones, link)
    }

    /// K GLMs, column `t` weighted by `R^t`.
    pub fn rmlg(d: &'a Dataset<S>, link: Link) -> Result<Self> {
        Self::new(CowArray::from(d.design()), CowArray::from(d.y()), d.indicators(), link)
    }

    pub fn link(&self) -> Link {
        self.link
    }
}

impl<S: Scalar> LossAdapter<S> for WeightedGlmAdapter<'_, S> {
    fn responses(&self) -> usize {
        self.weights.ncols()
    }

    fn design(&self) -> ArrayView2<'_, S> {
        self.design.view()
    }

    fn loss(&self, eta: ArrayView2<'_, S>) -> Result<S> {
        let link = self.link;
        let mut total = S::zero();
        for ((erow, wrow), &y) in eta.outer_iter().zip(self.weights.outer_iter()).zip(self.y.iter()) {
            for (&e, &w) in erow.iter().zip(wrow.iter()) {
                if w != S::zero() {
                    total += w * (link.cumulant(e) - y * e);
                }
            }
        }
        let v = total / S::from_count(eta.nrows());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss)
        }
    }

    fn pseudo_gradient(&self, eta: ArrayView2<'_, S>) -> Array2<S> {
        let link = self.link;
        let mut g = Array2::zeros(eta.raw_dim());
        for (i, (erow, mut grow)) in eta.outer_iter().zip(g.outer_iter_mut()).enumerate() {
            let y = self.y[i];
            for (c, &e) in erow.iter().enumerate() {
                let w = self.weights[[i, c]];
                if w != S::zero() {
                    grow[c] = w * (link.mean(e) - y);
                }
            }
        }
        g
    }

    fn majorizer(&self, eta: ArrayView2<'_, S>) -> S {
        let link = self.link;
        let mut b = S::zero();
        for (&e, &w) in eta.iter().zip(self.weights.iter()) {
            if w != S::zero() {
                b = b.max(w * link.variance(e));
            }
        }
        b.max(S::lit(1e-12))
    }

    fn curvature(&self, eta: ArrayView2<'_, S>) -> Option<Array2<S>> {
        let link = self.link;
        let mut w = self.weights.clone();
        Zip::from(&mut w).and(eta).for_each(|w, &e| {
            if *w != S::zero() {
                *w *= link.variance(e);
            }
        });
        Some(w)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OrFit<S> {
    pub model: OrModel<S>,
    /// One solve for RWL and RMLg, one per treatment for RMLs.
    pub solves: Vec<SolveResult<S>>,
}

fn run<S: Scalar>(adapter: &WeightedGlmAdapter<'_, S>, lambda: S, cfg: &SolveConfig<S>, init: Option<&Array2<S>>) -> Result<SolveResult<S>> {
    let start = match init {
        Some(a) => {
            if a.dim() != (adapter.design().ncols(), adapter.responses()) {
                return Err(Error::InvalidArgument("warm start has the wrong shape".into()));
            }
            a.clone()
        }
        None => Array2::zeros((adapter.design().ncols(), adapter.responses())),
    };
    Solver::new(adapter).solve(&start, &SolveConfig { lambda, ..*cfg })
}

/// RWL copies for target `t` given the propensity model fitted for `t`.
pub fn fit_rwl_from<S: Scalar>(
    d: &Dataset<S>,
    t: usize,
    ps: &PsModel<S>,
    lambda: S,
    link: Link,
    cfg: &SolveConfig<S>,
    init: Option<&Array2<S>>,
) -> Result<OrFit<S>> {
    let probs = crate::ps::predict_probs(ps, d)?;
    let adapter = WeightedGlmAdapter::rwl(d, t, probs.view(), link)?;
    let solve = run(&adapter, lambda, cfg, init)?;
    Ok(OrFit {
        model: OrModel {
            method: OrMethod::Rwl { target: t },
            coef: solve.coef.clone(),
            columns: (0..d.k()).filter(|&c| c != t).collect(),
            link,
            lambda: vec![lambda],
        },
        solves: vec![solve],
    })
}

pub fn fit_rwl<S: Scalar>(
    d: &Dataset<S>,
    t: usize,
    ps: &PsModel<S>,
    lambda: S,
    link: Link,
    cfg: &SolveConfig<S>,
) -> Result<OrFit<S>> {
    fit_rwl_from(d, t, ps, lambda, link, cfg, None)
}

/// Lasso GLM on group `t` alone; returns the (p+1)-vector of coefficients.
pub fn fit_rmls_group<S: Scalar>(
    d: &Dataset<S>,
    t: usize,
    lambda: S,
    link: Link,
    cfg: &SolveConfig<S>,
    init: Option<ArrayView1<'_, S>>,
) -> Result<(Array1<S>, SolveResult<S>)> {
    let adapter = WeightedGlmAdapter::rmls(d, t, link)?;
    let start = init.map(|a| a.to_owned().insert_axis(ndarray::Axis(1)));
    let solve = run(&adapter, lambda, cfg, start.as_ref())?;
    Ok((solve.coef.column(0).to_owned(), solve))
}

pub fn fit_rmls<S: Scalar>(d: &Dataset<S>, lambdas: &[S], link: Link, cfg: &SolveConfig<S>) -> Result<OrFit<S>> {
    if lambdas.len() != d.k() {
        return Err(Error::InvalidArgument(format!(
            "need {} per-treatment penalties, got {}",
            d.k(),
            lambdas.len()
        )));
    }
    let mut coef = Array2::zeros((d.p() + 1, d.k()));
    let mut solves = Vec::with_capacity(d.k());
    for (t, &lambda) in lambdas.iter().enumerate() {
        let (a, s) = fit_rmls_group(d, t, lambda, link, cfg, None)?;
        coef.column_mut(t).assign(&a);
        solves.push(s);
    }
    Ok(OrFit {
        model: OrModel {
            method: OrMethod::Rmls,
            coef,
            columns: (0..d.k()).collect(),
            link,
            lambda: lambdas.to_vec(),
        },
        solves,
    })
}

pub fn fit_rmlg_from<S: Scalar>(
    d: &Dataset<S>,
    lambda: S,
    link: Link,
    cfg: &SolveConfig<S>,
    init: Option<&Array2<S>>,
) -> Result<OrFit<S>> {
    let adapter = WeightedGlmAdapter::rmlg(d, link)?;
    let solve = run(&adapter, lambda, cfg, init)?;
    Ok(OrFit {
        model: OrModel {
            method: OrMethod::Rmlg,
            coef: solve.coef.clone(),
            columns: (0..d.k()).collect(),
            link,
            lambda: vec![lambda],
        },
        solves: vec![solve],
    })
}

pub fn fit_rmlg<S: Scalar>(d: &Dataset<S>, lambda: S, link: Link, cfg: &SolveConfig<S>) -> Result<OrFit<S>> {
    fit_rmlg_from(d, lambda, link, cfg, None)
}
