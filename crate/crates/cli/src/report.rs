//! JSON shapes written by the commands. Every document carries
//! `schema_version`; renaming, removing or adding a field requires bumping it.

use serde::Serialize;

use mcal::diagnostics::{BalanceReport, FitChecks};
use mcal::{CvPath, Scalar, SolveResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct InputInfo {
    pub path: String,
    pub n: usize,
    pub p: usize,
    pub covariates: Vec<String>,
    pub treatment_labels: Vec<i64>,
    pub group_counts: Vec<usize>,
    pub standardized: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub method: &'static str,
    pub constraint: &'static str,
    pub link: &'static str,
    pub ps_lambda: String,
    pub or_lambda: String,
    pub selection: &'static str,
    pub level: f64,
    pub seed: u64,
    pub precision: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Solve {
    pub converged: bool,
    pub outer_iters: usize,
    pub objective: f64,
    pub lambda: f64,
    pub active_rows: Vec<usize>,
    /// Penalized objective after each accepted iterate.
    pub trace: Vec<f64>,
    pub message: Option<String>,
}

impl Solve {
    pub fn from_result<S: Scalar>(s: &SolveResult<S>) -> Self {
        Self {
            converged: s.converged,
            outer_iters: s.outer_iters,
            objective: s.objective.as_f64(),
            lambda: s.lambda.as_f64(),
            active_rows: s.active_rows.clone(),
            trace: s.trace.iter().map(|v| v.as_f64()).collect(),
            message: s.message.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Cv {
    pub grid: Vec<f64>,
    pub cv_mean: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub index_min: usize,
    pub index_1se: usize,
    pub lambda_min: f64,
    pub lambda_1se: f64,
}

impl Cv {
    pub fn from_path<S: Scalar>(p: &CvPath<S>) -> Self {
        let v = |x: &[S]| x.iter().map(|v| v.as_f64()).collect();
        Self {
            grid: v(&p.grid),
            cv_mean: p.cv_mean.iter().map(|v| v.as_f64()).collect(),
            cv_se: p.cv_se.iter().map(|v| v.as_f64()).collect(),
            index_min: p.index_min,
            index_1se: p.index_1se,
            lambda_min: p.lambda_min.as_f64(),
            lambda_1se: p.lambda_1se.as_f64(),
        }
    }
}

/// One fitting stage: the penalties used, how they were chosen and the solver traces.
#[derive(Debug, Clone, Serialize)]
pub struct Stage {
    pub lambda: Vec<f64>,
    pub selected_by: &'static str,
    pub cv: Option<Cv>,
    pub solves: Vec<Solve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Balance {
    pub mascd: f64,
    pub rv: f64,
    pub weight_sum_residual: f64,
    pub max_balance_residual: f64,
    pub balance_bound: Option<f64>,
    pub standardized_differences: Vec<f64>,
}

impl Balance {
    pub fn from_report<S: Scalar>(b: &BalanceReport<S>) -> Self {
        Self {
            mascd: b.mascd.as_f64(),
            rv: b.rv.as_f64(),
            weight_sum_residual: b.weight_sum_residual.as_f64(),
            max_balance_residual: b.max_balance_residual.as_f64(),
            balance_bound: b.balance_bound.map(|v| v.as_f64()),
            standardized_differences: b.standardized_differences.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Option<f64>,
    pub passed: Option<bool>,
}

pub fn checks<S: Scalar>(c: &FitChecks<S>) -> Vec<Check> {
    c.checks
        .iter()
        .map(|c| Check {
            name: c.name.clone(),
            value: c.value.as_f64(),
            bound: c.bound.map(|v| v.as_f64()),
            passed: c.passed,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub balance: Balance,
    pub checks: Vec<Check>,
    pub all_passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttPiece {
    pub against: i64,
    pub nu: f64,
    pub u: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetEstimate {
    pub target: i64,
    pub method: &'static str,
    pub estimate: f64,
    /// Variance of the influence function; the estimate's variance is this over n.
    pub variance: f64,
    pub std_error: f64,
    pub ci: Interval,
    pub att_pieces: Vec<AttPiece>,
    pub ps: Stage,
    pub or: Stage,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct Contrast {
    pub first: i64,
    pub second: i64,
    pub difference: f64,
    pub variance: f64,
    pub std_error: f64,
    pub ci: Interval,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateDoc {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: InputInfo,
    pub settings: Settings,
    pub targets: Vec<TargetEstimate>,
    pub contrasts: Vec<Contrast>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsTarget {
    /// Absent for likelihood fits, which are shared by every target.
    pub target: Option<i64>,
    pub ps: Stage,
    pub balance: Vec<TargetBalance>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetBalance {
    pub target: i64,
    pub balance: Balance,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsDoc {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: InputInfo,
    pub settings: Settings,
    pub fits: Vec<PsTarget>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrTarget {
    pub target: i64,
    /// Treatment labels of the coefficient columns.
    pub columns: Vec<i64>,
    pub or: Stage,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrDoc {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: InputInfo,
    pub settings: Settings,
    pub fits: Vec<OrTarget>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseTarget {
    pub target: i64,
    /// Balance of the unweighted groups, with every score at the group share.
    pub unweighted: Balance,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseDoc {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: InputInfo,
    pub settings: Settings,
    pub targets: Vec<DiagnoseTarget>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvTarget {
    pub target: i64,
    pub ps: Option<Cv>,
    pub or: Option<Cv>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvDoc {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: InputInfo,
    pub settings: Settings,
    pub targets: Vec<CvTarget>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReplicate {
    pub rep: usize,
    pub method: &'static str,
    pub target: usize,
    pub estimate: f64,
    /// Estimated variance of the estimate.
    pub v_hat: f64,
    /// `(estimate - truth) / sqrt(v_hat)`.
    pub standardized: f64,
    pub covered90: bool,
    pub covered95: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimDoc {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: String,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub seed: u64,
    pub selection: &'static str,
    pub constraint: &'static str,
    pub rows: Vec<mcal::simulation::SummaryRow>,
    pub replicates: Vec<SimReplicate>,
    pub failures: Vec<mcal::simulation::Failure>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsampleRow {
    pub rep: usize,
    pub target: i64,
    pub estimate: f64,
    pub std_error: f64,
    pub ci: Interval,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsampleFailure {
    pub rep: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsampleDoc {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: InputInfo,
    pub settings: Settings,
    pub size: usize,
    pub reps: usize,
    pub estimates: Vec<SubsampleRow>,
    pub failures: Vec<SubsampleFailure>,
}
