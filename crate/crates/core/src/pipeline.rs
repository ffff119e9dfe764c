//! End-to-end estimation per target: propensity fit, outcome fit, AIPW
//! estimate and post-fit checks, with penalties fixed or chosen by CV.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{balance_report, kkt_tolerance, verify_fit, BalanceReport, FitChecks};
use crate::engine::{SolveConfig, SolveResult};
use crate::error::{Error, Result};
use crate::estimands::{aipw_mu, EstimateMethod, EstimateReport};
use crate::or::{fit_rmlg, fit_rmls_group, fit_rwl, Link, OrMethod, OrModel};
use crate::ps::{fit_rcal_ps, fit_rml_ps, predict_probs, Constraint, PsFit, PsModel};
use crate::tuning::{cv5, CvPath, PsCriterion, PsCv, RmlgCv, RmlsCv, RwlCv, Selection};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Penalty<S> {
    Fixed { lambda: S },
    Cv { selection: Selection },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    #[default]
    OneToZero,
    SumToZero,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PipelineConfig<S> {
    pub ps_penalty: Penalty<S>,
    pub or_penalty: Penalty<S>,
    pub constraint: ConstraintKind,
    /// Reference column of the likelihood fit under one-to-zero.
    pub rml_reference: usize,
    pub link: Link,
    pub level: f64,
    pub seed: u64,
    /// Re-standardize each training fold during CV.
    pub standardize_folds: bool,
    pub solve: SolveConfig<S>,
}

impl<S: Scalar> Default for PipelineConfig<S> {
    fn default() -> Self {
        Self {
            ps_penalty: Penalty::Cv { selection: Selection::Min },
            or_penalty: Penalty::Cv { selection: Selection::Min },
            constraint: ConstraintKind::OneToZero,
            rml_reference: 0,
            link: Link::Identity,
            level: 0.95,
            seed: 0,
            standardize_folds: false,
            solve: SolveConfig::default(),
        }
    }
}

impl<S: Scalar> PipelineConfig<S> {
    fn rcal_constraint(&self, t: usize) -> Constraint {
        match self.constraint {
            ConstraintKind::OneToZero => Constraint::OneToZero { reference: t },
            ConstraintKind::SumToZero => Constraint::SumToZero,
        }
    }

    fn rml_constraint(&self) -> Constraint {
        match self.constraint {
            ConstraintKind::OneToZero => Constraint::OneToZero {
                reference: self.rml_reference,
            },
            ConstraintKind::SumToZero => Constraint::SumToZero,
        }
    }

    /// Distinct seeds per CV problem so folds differ between stages.
    fn stage_seed(&self, stage: u64, t: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stage * 1_000_003 + t as u64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetResult<S> {
    pub target: usize,
    pub method: EstimateMethod,
    pub ps: PsModel<S>,
    pub ps_solve: SolveResult<S>,
    pub ps_cv: Option<CvPath<S>>,
    pub or: OrModel<S>,
    pub or_solves: Vec<SolveResult<S>>,
    pub or_cv: Option<CvPath<S>>,
    pub estimate: EstimateReport<S>,
    pub balance: BalanceReport<S>,
    pub checks: FitChecks<S>,
}

fn choose<S: Scalar>(penalty: Penalty<S>, path: impl FnOnce() -> Result<CvPath<S>>) -> Result<(S, Option<CvPath<S>>)> {
    match penalty {
        Penalty::Fixed { lambda } => {
            if !(lambda >= S::zero()) {
                return Err(Error::InvalidArgument("lambda must be >= 0".into()));
            }
            Ok((lambda, None))
        }
        Penalty::Cv { selection } => {
            let p = path()?;
            Ok((p.selected(selection), Some(p)))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish<S: Scalar>(
    d: &Dataset<S>,
    t: usize,
    ps: &PsFit<S>,
    ps_cv: Option<CvPath<S>>,
    or: OrModel<S>,
    or_solves: Vec<SolveResult<S>>,
    or_cv: Option<CvPath<S>>,
    cfg: &PipelineConfig<S>,
) -> Result<TargetResult<S>> {
    let estimate = aipw_mu(d, &or, &ps.model, t, cfg.level)?;
    let ps_tol = kkt_tolerance(&ps.solve, cfg.solve.tol_coef);
    let or_tol = or_solves
        .iter()
        .map(|s| kkt_tolerance(s, cfg.solve.tol_coef))
        .fold(S::zero(), |a, v| a.max(v));
    let checks = verify_fit(d, &ps.model, ps_tol, &or, or_tol, &estimate)?;
    Ok(TargetResult {
        target: t,
        method: estimate.method,
        balance: balance_report(d, &ps.model, t)?,
        ps: ps.model.clone(),
        ps_solve: ps.solve.clone(),
        ps_cv,
        or,
        or_solves,
        or_cv,
        estimate,
        checks,
    })
}

/// Calibrated propensity fit for target `t` with its penalty.
pub fn rcal_ps<S: Scalar>(d: &Dataset<S>, t: usize, cfg: &PipelineConfig<S>) -> Result<(PsFit<S>, Option<CvPath<S>>)> {
    let constraint = cfg.rcal_constraint(t);
    let (lambda, path) = choose(cfg.ps_penalty, || {
        cv5(
            &PsCv {
                data: d,
                criterion: PsCriterion::Cal { target: t },
                constraint,
                cfg: cfg.solve,
                standardize_folds: cfg.standardize_folds,
            },
            cfg.stage_seed(1, t),
        )
    })?;
    Ok((fit_rcal_ps(d, t, lambda, constraint, &cfg.solve)?, path))
}

/// RCAL propensity scores followed by RWL outcome copies for target `t`.
pub fn run_rcal<S: Scalar>(d: &Dataset<S>, t: usize, cfg: &PipelineConfig<S>) -> Result<TargetResult<S>> {
    if t >= d.k() {
        return Err(Error::InvalidArgument(format!("target {t} outside 0..{}", d.k())));
    }
    let (ps, ps_cv) = rcal_ps(d, t, cfg)?;
    let probs = predict_probs(&ps.model, d)?;
    let (lambda, or_cv) = choose(cfg.or_penalty, || {
        cv5(
            &RwlCv {
                data: d,
                target: t,
                probs: probs.view(),
                link: cfg.link,
                cfg: cfg.solve,
                standardize_folds: cfg.standardize_folds,
            },
            cfg.stage_seed(2, t),
        )
    })?;
    let or = fit_rwl(d, t, &ps.model, lambda, cfg.link, &cfg.solve)?;
    finish(d, t, &ps, ps_cv, or.model, or.solves, or_cv, cfg)
}

/// Likelihood propensity fit shared by every target of the RML baselines.
pub fn rml_ps<S: Scalar>(d: &Dataset<S>, cfg: &PipelineConfig<S>) -> Result<(PsFit<S>, Option<CvPath<S>>)> {
    let constraint = cfg.rml_constraint();
    let (lambda, path) = choose(cfg.ps_penalty, || {
        cv5(
            &PsCv {
                data: d,
                criterion: PsCriterion::Ml,
                constraint,
                cfg: cfg.solve,
                standardize_folds: cfg.standardize_folds,
            },
            cfg.stage_seed(3, 0),
        )
    })?;
    Ok((fit_rml_ps(d, lambda, constraint, &cfg.solve)?, path))
}

/// RMLs estimate of `mu_t`: only the Lasso fit on group `t` is needed.
pub fn run_rmls<S: Scalar>(
    d: &Dataset<S>,
    t: usize,
    ps: &(PsFit<S>, Option<CvPath<S>>),
    cfg: &PipelineConfig<S>,
) -> Result<TargetResult<S>> {
    if t >= d.k() {
        return Err(Error::InvalidArgument(format!("target {t} outside 0..{}", d.k())));
    }
    let (lambda, or_cv) = choose(cfg.or_penalty, || {
        cv5(
            &RmlsCv {
                data: d,
                target: t,
                link: cfg.link,
                cfg: cfg.solve,
                standardize_folds: cfg.standardize_folds,
            },
            cfg.stage_seed(4, t),
        )
    })?;
    let (coef, solve) = fit_rmls_group(d, t, lambda, cfg.link, &cfg.solve, None)?;
    let or = OrModel {
        method: OrMethod::Rmls,
        coef: coef.insert_axis(ndarray::Axis(1)),
        columns: vec![t],
        link: cfg.link,
        lambda: vec![lambda],
    };
    finish(d, t, &ps.0, ps.1.clone(), or, vec![solve], or_cv, cfg)
}

/// Joint group-Lasso outcome fit, shared across targets.
pub fn rmlg_or<S: Scalar>(d: &Dataset<S>, cfg: &PipelineConfig<S>) -> Result<(crate::or::OrFit<S>, Option<CvPath<S>>)> {
    let (lambda, path) = choose(cfg.or_penalty, || {
        cv5(
            &RmlgCv {
                data: d,
                link: cfg.link,
                cfg: cfg.solve,
                standardize_folds: cfg.standardize_folds,
            },
            cfg.stage_seed(5, 0),
        )
    })?;
    Ok((fit_rmlg(d, lambda, cfg.link, &cfg.solve)?, path))
}

pub fn run_rmlg<S: Scalar>(
    d: &Dataset<S>,
    t: usize,
    ps: &(PsFit<S>, Option<CvPath<S>>),
    or: &(crate::or::OrFit<S>, Option<CvPath<S>>),
    cfg: &PipelineConfig<S>,
) -> Result<TargetResult<S>> {
    if t >= d.k() {
        return Err(Error::InvalidArgument(format!("target {t} outside 0..{}", d.k())));
    }
    finish(
        d,
        t,
        &ps.0,
        ps.1.clone(),
        or.0.model.clone(),
        or.0.solves.clone(),
        or.1.clone(),
        cfg,
    )
}

/// Runs `method` for each target, sharing the likelihood fits across targets.
pub fn run_targets<S: Scalar>(
    d: &Dataset<S>,
    method: EstimateMethod,
    targets: &[usize],
    cfg: &PipelineConfig<S>,
) -> Result<Vec<TargetResult<S>>> {
    match method {
        EstimateMethod::Rcal => targets.iter().map(|&t| run_rcal(d, t, cfg)).collect(),
        EstimateMethod::Rmls => {
            let ps = rml_ps(d, cfg)?;
            targets.iter().map(|&t| run_rmls(d, t, &ps, cfg)).collect()
        }
        EstimateMethod::Rmlg => {
            let ps = rml_ps(d, cfg)?;
            let or = rmlg_or(d, cfg)?;
            targets.iter().map(|&t| run_rmlg(d, t, &ps, &or, cfg)).collect()
        }
    }
}
