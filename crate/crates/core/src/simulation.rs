//! Synthetic four-arm studies with known truth and a reproducible Monte
//! Carlo harness summarizing bias, spread and interval coverage.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Mutex, OnceLock};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimands::{wald_ci, EstimateMethod, EstimateReport};
use crate::pipeline::{rmlg_or, rml_ps, run_rcal, run_rmlg, run_rmls, PipelineConfig, TargetResult};

pub const K: usize = 4;
/// Regressors referenced by the generating models.
pub const MIN_P: usize = 13;
const RHO: f64 = 0.5;
const GH_NODES: usize = 61;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    C1,
    C2,
    C3,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C1" => Ok(Setting::C1),
            "C2" => Ok(Setting::C2),
            "C3" => Ok(Setting::C3),
            _ => Err(Error::InvalidArgument(format!("unknown configuration `{s}`"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Gauss-Hermite nodes and weights for the weight `exp(-x^2)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z1.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E g(X)` for `X ~ N(0, 1)` by Gauss-Hermite quadrature.
pub fn normal_expectation(g: impl Fn(f64) -> f64, nodes: usize) -> f64 {
    let (x, w) = gauss_hermite(nodes);
    let s: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * g(std::f64::consts::SQRT_2 * xi)).sum();
    s / std::f64::consts::PI.sqrt()
}

/// `W = X + ((X + 1)_+)^2`.
pub fn w_transform(x: f64) -> f64 {
    let u = (x + 1.0).max(0.0);
    x + u * u
}

/// Mean and variance of `W` for standard normal `X`.
pub fn w_moments() -> (f64, f64) {
    static MOMENTS: OnceLock<(f64, f64)> = OnceLock::new();
    *MOMENTS.get_or_init(|| {
        let m1 = normal_expectation(w_transform, GH_NODES);
        let m2 = normal_expectation(|x| w_transform(x).powi(2), GH_NODES);
        (m1, m2 - m1 * m1)
    })
}

/// Standardized transform `X^dagger`.
pub fn dagger(x: f64) -> f64 {
    let (m, v) = w_moments();
    (w_transform(x) - m) / v.sqrt()
}

/// n x p covariates with `cov(X_i, X_j) = 2^-|i-j|`, via the AR(1) recursion.
pub fn gen_covariates<R: Rng>(n: usize, p: usize, rng: &mut R) -> Array2<f64> {
    let s = (1.0 - RHO * RHO).sqrt();
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        let mut prev = 0.0;
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            let v = if j == 0 { z } else { RHO * prev + s * z };
            x[[i, j]] = v;
            prev = v;
        }
    }
    x
}

const PS_COEF: [[f64; 4]; 3] = [
    [1.0, -0.5, -0.25, 0.125],
    [-0.5, -0.25, 0.125, 1.0],
    [-0.25, 0.125, 1.0, -0.5],
];

/// Outcome regressors per arm as (index, sign), zero-based.
const OR_TERMS: [[(usize, f64); 4]; 4] = [
    [(0, 1.0), (4, -1.0), (5, -1.0), (6, 1.0)],
    [(1, 1.0), (6, -1.0), (7, -1.0), (8, 1.0)],
    [(2, 1.0), (8, -1.0), (9, -1.0), (10, 1.0)],
    [(3, 1.0), (10, -1.0), (11, -1.0), (12, 1.0)],
];

/// Covariate entering the generating models: `X_j`, or `X^dagger_j` for j < 4
/// when `transformed`.
fn regressor(row: &[f64], j: usize, transformed: bool) -> f64 {
    if transformed && j < 4 {
        dagger(row[j])
    } else {
        row[j]
    }
}

/// True treatment probabilities given one covariate row.
pub fn true_probs(setting: Setting, row: &[f64]) -> [f64; K] {
    let tr = setting == Setting::C3;
    let mut eta = [0.0; K];
    for (k, coefs) in PS_COEF.iter().enumerate() {
        eta[k + 1] = coefs.iter().enumerate().map(|(j, &c)| c * regressor(row, j, tr)).sum();
    }
    let max = eta.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let mut p = eta.map(|e| (e - max).exp());
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

/// True outcome means `E(Y | T = t, X)` for every arm.
pub fn true_means(setting: Setting, row: &[f64]) -> [f64; K] {
    let tr = setting == Setting::C2;
    let mut m = [0.0; K];
    for (t, terms) in OR_TERMS.iter().enumerate() {
        m[t] = t as f64 + terms.iter().map(|&(j, s)| s * regressor(row, j, tr)).sum::<f64>();
    }
    m
}

/// Generating stream for replication `rep`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// One simulated study.
pub fn gen_data<R: Rng>(setting: Setting, n: usize, p: usize, rng: &mut R) -> Result<Dataset<f64>> {
    if p < MIN_P || n < 2 * K {
        return Err(Error::InvalidArgument(format!(
            "simulation needs p >= {MIN_P} and n >= {}",
            2 * K
        )));
    }
    let x = gen_covariates(n, p, rng);
    let mut t = Vec::with_capacity(n);
    let mut y = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let row = row.as_slice().expect("row-major");
        let probs = true_probs(setting, row);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut ti = K - 1;
        for (k, &pk) in probs.iter().enumerate() {
            acc += pk;
            if u < acc {
                ti = k;
                break;
            }
        }
        t.push(ti);
        let z: f64 = rng.sample(StandardNormal);
        y[i] = true_means(setting, row)[ti] + z;
    }
    Dataset::new(y, t, x, K)
}

/// `mu_t = t` under every configuration: the regressors in each outcome mean
/// have mean zero.
pub fn true_mu(t: usize) -> f64 {
    t as f64
}

/// Monte Carlo values of `nu_t^(k) = E{m_t(X) pi_k(X)} / E{pi_k(X)}` with
/// delta-method standard errors, K x K, indexed `[t][k]`.
#[derive(Debug, Clone, Serialize)]
pub struct NuTruth {
    pub values: [[f64; K]; K],
    pub se: [[f64; K]; K],
    pub draws: usize,
}

pub fn true_nu(setting: Setting, draws: usize, seed: u64) -> NuTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // moments: E pi_k, E m_t pi_k, and second moments for the ratio SE
    let mut s_pi = [0.0; K];
    let mut s_pi2 = [0.0; K];
    let mut s_mp = [[0.0; K]; K];
    let mut s_mp2 = [[0.0; K]; K];
    let mut s_cross = [[0.0; K]; K];
    let mut row = [0.0; MIN_P];
    let s = (1.0 - RHO * RHO).sqrt();
    for _ in 0..draws {
        for j in 0..MIN_P {
            let z: f64 = rng.sample(StandardNormal);
            row[j] = if j == 0 { z } else { RHO * row[j - 1] + s * z };
        }
        let p = true_probs(setting, &row);
        let m = true_means(setting, &row);
        for k in 0..K {
            s_pi[k] += p[k];
            s_pi2[k] += p[k] * p[k];
            for t in 0..K {
                let a = m[t] * p[k];
                s_mp[t][k] += a;
                s_mp2[t][k] += a * a;
                s_cross[t][k] += a * p[k];
            }
        }
    }
    let nf = draws as f64;
    let mut values = [[0.0; K]; K];
    let mut se = [[0.0; K]; K];
    for t in 0..K {
        for k in 0..K {
            let ea = s_mp[t][k] / nf;
            let eb = s_pi[k] / nf;
            let r = ea / eb;
            let va = s_mp2[t][k] / nf - ea * ea;
            let vb = s_pi2[k] / nf - eb * eb;
            let cab = s_cross[t][k] / nf - ea * eb;
            values[t][k] = r;
            se[t][k] = ((va - 2.0 * r * cab + r * r * vb).max(0.0) / nf).sqrt() / eb;
        }
    }
    NuTruth { values, se, draws }
}

/// Cached `true_nu` with 10^7 draws.
pub fn cached_true_nu(setting: Setting) -> NuTruth {
    static CACHE: OnceLock<Mutex<HashMap<Setting, NuTruth>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("cache lock").get(&setting) {
        return v.clone();
    }
    let v = true_nu(setting, 10_000_000, 20_240_601);
    cache.lock().expect("cache lock").insert(setting, v.clone());
    v
}

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub setting: Setting,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<EstimateMethod>,
    pub targets: Vec<usize>,
    pub pipeline: PipelineConfig<f64>,
}

impl SimConfig {
    pub fn new(setting: Setting, n: usize, p: usize, reps: usize, seed: u64) -> Self {
        Self {
            setting,
            n,
            p,
            reps,
            seed,
            methods: vec![EstimateMethod::Rcal, EstimateMethod::Rmls, EstimateMethod::Rmlg],
            targets: (0..K).collect(),
            pipeline: PipelineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < MIN_P {
            return Err(Error::InvalidArgument(format!("p must be >= {MIN_P}")));
        }
        if self.n < 100 {
            return Err(Error::InvalidArgument("n must be >= 100".into()));
        }
        if self.reps == 0 || self.methods.is_empty() || self.targets.is_empty() {
            return Err(Error::InvalidArgument("need at least one replication, method and target".into()));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= K) {
            return Err(Error::InvalidArgument(format!("target {t} outside 0..{K}")));
        }
        Ok(())
    }
}

/// One estimate from one replication.
#[derive(Debug, Clone, Serialize)]
pub struct Replicate {
    pub rep: usize,
    pub method: EstimateMethod,
    pub target: usize,
    pub estimate: f64,
    pub v_hat: f64,
    pub covered90: bool,
    pub covered95: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: EstimateMethod,
    pub target: usize,
    pub truth: f64,
    pub bias: f64,
    pub sqrt_var: f64,
    pub sqrt_evar: f64,
    pub cov90: f64,
    pub cov95: f64,
    pub used: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub rep: usize,
    pub method: EstimateMethod,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub setting: Setting,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
    pub replicates: Vec<Replicate>,
    pub failures: Vec<Failure>,
}

impl SimSummary {
    pub fn row(&self, method: EstimateMethod, target: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.target == target)
    }

    /// Table layout: one line per (target, statistic), one column per method.
    pub fn to_table_csv(&self) -> String {
        let methods: Vec<EstimateMethod> = {
            let mut m: Vec<EstimateMethod> = Vec::new();
            for r in &self.rows {
                if !m.contains(&r.method) {
                    m.push(r.method);
                }
            }
            m
        };
        let mut targets: Vec<usize> = self.rows.iter().map(|r| r.target).collect();
        targets.sort_unstable();
        targets.dedup();
        let mut out = String::from("config,n,p,target,statistic");
        for m in &methods {
            let _ = write!(out, ",{}", method_label(*m));
        }
        out.push('\n');
        type Stat = (&'static str, fn(&SummaryRow) -> f64);
        let stats: [Stat; 5] = [
            ("Bias", |r| r.bias),
            ("sqrt(Var)", |r| r.sqrt_var),
            ("sqrt(EVar)", |r| r.sqrt_evar),
            ("Cov90", |r| r.cov90),
            ("Cov95", |r| r.cov95),
        ];
        for t in targets {
            for (name, get) in stats {
                let _ = write!(out, "{},{},{},mu{t},{name}", self.setting, self.n, self.p);
                for m in &methods {
                    match self.row(*m, t) {
                        Some(r) => {
                            let _ = write!(out, ",{:.3}", get(r));
                        }
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn method_label(m: EstimateMethod) -> &'static str {
    match m {
        EstimateMethod::Rcal => "RCAL",
        EstimateMethod::Rmls => "RMLs",
        EstimateMethod::Rmlg => "RMLg",
    }
}

fn converged(r: &TargetResult<f64>) -> bool {
    r.ps_solve.converged && r.or_solves.iter().all(|s| s.converged)
}

type RepOutcome = Vec<(EstimateMethod, std::result::Result<Vec<EstimateReport<f64>>, String>)>;

fn run_replication(cfg: &SimConfig, rep: usize) -> Result<RepOutcome> {
    let mut rng = replication_rng(cfg.seed, rep as u64);
    let d = gen_data(cfg.setting, cfg.n, cfg.p, &mut rng)?;
    let pc = PipelineConfig {
        seed: cfg.seed ^ (rep as u64).wrapping_mul(0xA24B_AED4_963E_E407),
        ..cfg.pipeline
    };
    let collect = |results: Result<Vec<TargetResult<f64>>>| match results {
        Ok(rs) => {
            if let Some(bad) = rs.iter().find(|r| !converged(r)) {
                let msg = bad
                    .ps_solve
                    .message
                    .clone()
                    .or_else(|| bad.or_solves.iter().find_map(|s| s.message.clone()))
                    .unwrap_or_else(|| "not converged".into());
                Err(format!("target {}: {msg}", bad.target))
            } else {
                Ok(rs.into_iter().map(|r| r.estimate).collect())
            }
        }
        Err(e) => Err(e.to_string()),
    };
    let needs_rml = cfg.methods.iter().any(|m| *m != EstimateMethod::Rcal);
    let rml = if needs_rml { Some(rml_ps(&d, &pc)) } else { None };
    let mut out = Vec::new();
    for &m in &cfg.methods {
        let res = match m {
            EstimateMethod::Rcal => collect(cfg.targets.iter().map(|&t| run_rcal(&d, t, &pc)).collect()),
            EstimateMethod::Rmls => match rml.as_ref().expect("rml fit") {
                Ok(ps) => collect(cfg.targets.iter().map(|&t| run_rmls(&d, t, ps, &pc)).collect()),
                Err(e) => Err(e.to_string()),
            },
            EstimateMethod::Rmlg => match rml.as_ref().expect("rml fit") {
                Ok(ps) => match rmlg_or(&d, &pc) {
                    Ok(or) => collect(cfg.targets.iter().map(|&t| run_rmlg(&d, t, ps, &or, &pc)).collect()),
                    Err(e) => Err(e.to_string()),
                },
                Err(e) => Err(e.to_string()),
            },
        };
        out.push((m, res));
    }
    Ok(out)
}

/// Runs the replications in parallel; each uses its own generator stream
/// and results are reduced in replication order.
pub fn run_monte_carlo(cfg: &SimConfig) -> Result<SimSummary> {
    cfg.validate()?;
    let outcomes: Vec<Result<RepOutcome>> = (0..cfg.reps).into_par_iter().map(|rep| run_replication(cfg, rep)).collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        for (method, res) in outcome? {
            match res {
                Ok(reports) => {
                    for r in reports {
                        let truth = true_mu(r.target);
                        let c90 = wald_ci(r.mu_hat, r.v_hat, r.n, 0.90)?;
                        let c95 = wald_ci(r.mu_hat, r.v_hat, r.n, 0.95)?;
                        replicates.push(Replicate {
                            rep,
                            method,
                            target: r.target,
                            estimate: r.mu_hat,
                            v_hat: r.v_hat / r.n as f64,
                            covered90: c90.contains(truth),
                            covered95: c95.contains(truth),
                        });
                    }
                }
                Err(reason) => failures.push(Failure { rep, method, reason }),
            }
        }
    }
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let failed = failures.iter().filter(|f| f.method == method).count();
        if failed * 20 > cfg.reps {
            return Err(Error::TooManyFailures {
                failed,
                total: cfg.reps,
            });
        }
        for &target in &cfg.targets {
            let sel: Vec<&Replicate> = replicates
                .iter()
                .filter(|r| r.method == method && r.target == target)
                .collect();
            rows.push(summarize_rows(method, target, &sel, failed));
        }
    }
    Ok(SimSummary {
        setting: cfg.setting,
        n: cfg.n,
        p: cfg.p,
        reps: cfg.reps,
        seed: cfg.seed,
        rows,
        replicates,
        failures,
    })
}

fn summarize_rows(method: EstimateMethod, target: usize, sel: &[&Replicate], failed: usize) -> SummaryRow {
    let truth = true_mu(target);
    let m = sel.len() as f64;
    let mean = sel.iter().map(|r| r.estimate).sum::<f64>() / m;
    let var = sel.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    SummaryRow {
        method,
        target,
        truth,
        bias: mean - truth,
        sqrt_var: var.sqrt(),
        sqrt_evar: (sel.iter().map(|r| r.v_hat).sum::<f64>() / m).sqrt(),
        cov90: sel.iter().filter(|r| r.covered90).count() as f64 / m,
        cov95: sel.iter().filter(|r| r.covered95).count() as f64 / m,
        used: sel.len(),
        failed,
    }
}
