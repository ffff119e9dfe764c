use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use mcal::data::{load_csv, pairwise_interactions, standardize, ColumnRoles, TreatmentMap};
use mcal::diagnostics::balance_report;
use mcal::estimands::ate_contrast;
use mcal::pipeline::{rcal_ps, rml_ps, run_targets, Penalty, PipelineConfig, TargetResult};
use mcal::simulation::{method_label, run_monte_carlo, SimConfig, K};
use mcal::{Constraint, Dataset, EstimateMethod, PsMethod, PsModel, Scalar, Standardization};

use crate::args::*;
use crate::report::{self, *};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<mcal::Error> for CliError {
    fn from(e: mcal::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub type Files = Vec<(&'static str, Vec<u8>)>;

fn json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("report serializes");
    out.push(b'\n');
    out
}

pub fn validate_data(a: &DataArgs) -> Result<(), CliError> {
    match (a.interactions, a.min_frequency) {
        (Interactions::None, Some(_)) => Err(invalid("--min-frequency requires --interactions pairwise")),
        (_, Some(f)) if !(0.0..=1.0).contains(&f) => Err(invalid("--min-frequency must lie in [0, 1]")),
        _ => Ok(()),
    }
}

pub fn validate_model(m: &ModelArgs) -> Result<(), CliError> {
    if !(m.level > 0.0 && m.level < 1.0) {
        return Err(invalid("--level must lie in (0, 1)"));
    }
    let any_cv = m.lambda == LambdaArg::Cv || m.or_lambda == Some(LambdaArg::Cv);
    if m.selection.is_some() && !any_cv {
        return Err(invalid("--selection needs a cross-validated penalty"));
    }
    Ok(())
}

struct Prepared<S> {
    data: Dataset<S>,
    map: TreatmentMap,
    scaling: Standardization<S>,
    info: InputInfo,
    targets: Vec<usize>,
}

fn resolve_targets(t: &TargetArg, map: &TreatmentMap) -> Result<Vec<usize>, CliError> {
    match t {
        TargetArg::All => Ok((0..map.labels.len()).collect()),
        TargetArg::Labels(ls) => ls
            .iter()
            .map(|&l| {
                map.code(l)
                    .ok_or_else(|| invalid(format!("treatment label {l} not present in the input")))
            })
            .collect(),
    }
}

fn load<S: Scalar>(a: &DataArgs) -> Result<(Dataset<S>, TreatmentMap), CliError> {
    let roles = ColumnRoles {
        outcome: a.outcome.clone(),
        treatment: a.treatment.clone(),
        covariates: a.covariates.clone(),
    };
    let (d, map) = load_csv::<S, _>(&a.input, &roles)?;
    let d = match a.interactions {
        Interactions::None => d,
        Interactions::Pairwise => pairwise_interactions(&d, a.min_frequency.unwrap_or(0.008))?,
    };
    Ok((d, map))
}

fn scale<S: Scalar>(d: Dataset<S>, on: bool) -> Result<(Dataset<S>, Standardization<S>), CliError> {
    if on {
        Ok(standardize(&d)?)
    } else {
        let p = d.p();
        Ok((d, Standardization::identity(p)))
    }
}

fn input_info<S: Scalar>(a: &DataArgs, d: &Dataset<S>, map: &TreatmentMap) -> InputInfo {
    InputInfo {
        path: a.input.display().to_string(),
        n: d.n(),
        p: d.p(),
        covariates: d.names().to_vec(),
        treatment_labels: map.labels.clone(),
        group_counts: d.group_counts(),
        standardized: !a.no_standardize,
    }
}

fn prepare<S: Scalar>(a: &DataArgs, targets: &TargetArg) -> Result<Prepared<S>, CliError> {
    let (d, map) = load::<S>(a)?;
    let targets = resolve_targets(targets, &map)?;
    let info = input_info(a, &d, &map);
    let (data, scaling) = scale(d, !a.no_standardize)?;
    Ok(Prepared {
        data,
        map,
        scaling,
        info,
        targets,
    })
}

fn pipeline<S: Scalar>(m: &ModelArgs) -> PipelineConfig<S> {
    let selection = m.selection.unwrap_or(SelectionArg::Min).into();
    let penalty = |l: LambdaArg| match l {
        LambdaArg::Cv => Penalty::Cv { selection },
        LambdaArg::Value(v) => Penalty::Fixed { lambda: S::lit(v) },
    };
    PipelineConfig {
        ps_penalty: penalty(m.lambda),
        or_penalty: penalty(m.or_lambda.unwrap_or(m.lambda)),
        constraint: m.constraint.into(),
        link: m.link.into(),
        level: m.level,
        seed: m.seed,
        ..PipelineConfig::default()
    }
}

fn lambda_text(l: LambdaArg) -> String {
    match l {
        LambdaArg::Cv => "cv".into(),
        LambdaArg::Value(v) => v.to_string(),
    }
}

fn selection_label(s: SelectionArg) -> &'static str {
    match s {
        SelectionArg::Min => "min",
        SelectionArg::OneSe => "1se",
    }
}

fn settings(m: &ModelArgs) -> Settings {
    Settings {
        method: match m.method {
            MethodArg::Rcal => "rcal",
            MethodArg::Rmls => "rmls",
            MethodArg::Rmlg => "rmlg",
        },
        constraint: match m.constraint {
            ConstraintArg::OneToZero => "one_to_zero",
            ConstraintArg::SumToZero => "sum_to_zero",
        },
        link: match m.link {
            LinkArg::Identity => "identity",
            LinkArg::Logit => "logit",
        },
        ps_lambda: lambda_text(m.lambda),
        or_lambda: lambda_text(m.or_lambda.unwrap_or(m.lambda)),
        selection: selection_label(m.selection.unwrap_or(SelectionArg::Min)),
        level: m.level,
        seed: m.seed,
        precision: match m.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        },
    }
}

fn selected_by(l: LambdaArg, m: &ModelArgs) -> &'static str {
    match (l, m.selection.unwrap_or(SelectionArg::Min)) {
        (LambdaArg::Value(_), _) => "fixed",
        (LambdaArg::Cv, SelectionArg::Min) => "cv_min",
        (LambdaArg::Cv, SelectionArg::OneSe) => "cv_1se",
    }
}

fn ps_stage<S: Scalar>(r: &TargetResult<S>, m: &ModelArgs) -> Stage {
    Stage {
        lambda: vec![r.ps.lambda.as_f64()],
        selected_by: selected_by(m.lambda, m),
        cv: r.ps_cv.as_ref().map(Cv::from_path),
        solves: vec![Solve::from_result(&r.ps_solve)],
    }
}

fn or_stage<S: Scalar>(r: &TargetResult<S>, m: &ModelArgs) -> Stage {
    Stage {
        lambda: r.or.lambda.iter().map(|v| v.as_f64()).collect(),
        selected_by: selected_by(m.or_lambda.unwrap_or(m.lambda), m),
        cv: r.or_cv.as_ref().map(Cv::from_path),
        solves: r.or_solves.iter().map(Solve::from_result).collect(),
    }
}

fn interval<S: Scalar>(i: &mcal::Interval<S>) -> report::Interval {
    report::Interval {
        lower: i.lower.as_f64(),
        upper: i.upper.as_f64(),
        level: i.level,
    }
}

fn diagnostics<S: Scalar>(r: &TargetResult<S>) -> Diagnostics {
    Diagnostics {
        balance: Balance::from_report(&r.balance),
        checks: report::checks(&r.checks),
        all_passed: r.checks.all_passed,
    }
}

const COEF_HEADER: &str = "target,model,column,term,coefficient\n";

/// Coefficients on the scale of the input covariates.
fn push_coefficients<S: Scalar>(
    out: &mut String,
    target: &str,
    model: &str,
    coef: ArrayView2<'_, S>,
    columns: &[i64],
    names: &[String],
    scaling: &Standardization<S>,
) {
    let raw = if scaling.applied {
        scaling.destandardize_coef(coef)
    } else {
        coef.to_owned()
    };
    for (c, label) in columns.iter().enumerate() {
        for j in 0..raw.nrows() {
            let term = if j == 0 { "(intercept)" } else { names[j - 1].as_str() };
            let _ = writeln!(out, "{target},{model},{label},{},{}", csv_field(term), raw[[j, c]].as_f64());
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reason a pipeline result cannot be reported, if any of its solves stopped short.
fn unconverged<S: Scalar>(r: &TargetResult<S>, label: i64) -> Option<String> {
    let why = |stage: &str, s: &mcal::SolveResult<S>| {
        let detail = s.message.as_deref().unwrap_or("iteration limit reached");
        format!("{stage} fit for target {label} did not converge: {detail}")
    };
    if !r.ps_solve.converged {
        return Some(why("propensity", &r.ps_solve));
    }
    r.or_solves.iter().find(|s| !s.converged).map(|s| why("outcome", s))
}

fn ensure_converged<S: Scalar>(results: &[TargetResult<S>], map: &TreatmentMap) -> Result<(), CliError> {
    match results.iter().find_map(|r| unconverged(r, map.label(r.target))) {
        Some(msg) => Err(CliError::Numerical(msg)),
        None => Ok(()),
    }
}

fn run_pipeline<S: Scalar>(a: &FitArgs) -> Result<(Prepared<S>, Vec<TargetResult<S>>), CliError> {
    let prep = prepare::<S>(&a.data, &a.target)?;
    let cfg = pipeline::<S>(&a.model);
    let results = run_targets(&prep.data, a.model.method.into(), &prep.targets, &cfg)?;
    ensure_converged(&results, &prep.map)?;
    Ok((prep, results))
}

pub fn estimate<S: Scalar>(a: &FitArgs) -> Result<Files, CliError> {
    let (prep, results) = run_pipeline::<S>(a)?;
    let label = |c: usize| prep.map.label(c);
    let n = prep.data.n() as f64;
    let mut targets = Vec::new();
    let mut coef = String::from(COEF_HEADER);
    for r in &results {
        let e = &r.estimate;
        let v = e.v_hat.as_f64();
        targets.push(TargetEstimate {
            target: label(r.target),
            method: method_label(r.method),
            estimate: e.mu_hat.as_f64(),
            variance: v,
            std_error: (v / n).sqrt(),
            ci: interval(&e.ci),
            att_pieces: e
                .nu_hat
                .iter()
                .map(|(&k, nu)| AttPiece {
                    against: label(k),
                    nu: nu.as_f64(),
                    u: e.u_hat[&k].as_f64(),
                })
                .collect(),
            ps: ps_stage(r, &a.model),
            or: or_stage(r, &a.model),
            diagnostics: diagnostics(r),
        });
        let t = label(r.target).to_string();
        push_coefficients(&mut coef, &t, "ps", r.ps.gamma.view(), &prep.map.labels, prep.data.names(), &prep.scaling);
        let cols: Vec<i64> = r.or.columns.iter().map(|&c| label(c)).collect();
        push_coefficients(&mut coef, &t, "or", r.or.coef.view(), &cols, prep.data.names(), &prep.scaling);
    }
    let mut contrasts = Vec::new();
    for (i, a_res) in results.iter().enumerate() {
        for b_res in &results[i + 1..] {
            let c = ate_contrast(&a_res.estimate, &b_res.estimate, a.model.level)?;
            let v = c.variance.as_f64();
            contrasts.push(report::Contrast {
                first: label(c.first),
                second: label(c.second),
                difference: c.diff.as_f64(),
                variance: v,
                std_error: (v / n).sqrt(),
                ci: interval(&c.ci),
            });
        }
    }
    let doc = EstimateDoc {
        schema_version: SCHEMA_VERSION,
        command: "estimate",
        input: prep.info.clone(),
        settings: settings(&a.model),
        targets,
        contrasts,
    };
    Ok(vec![("report.json", json(&doc)), ("coefficients.csv", coef.into_bytes())])
}

pub fn fit_ps<S: Scalar>(a: &FitArgs) -> Result<Files, CliError> {
    let prep = prepare::<S>(&a.data, &a.target)?;
    let cfg = pipeline::<S>(&a.model);
    let d = &prep.data;
    let label = |c: usize| prep.map.label(c);
    let stage = |fit: &mcal::ps::PsFit<S>, cv: &Option<mcal::CvPath<S>>| Stage {
        lambda: vec![fit.model.lambda.as_f64()],
        selected_by: selected_by(a.model.lambda, &a.model),
        cv: cv.as_ref().map(Cv::from_path),
        solves: vec![Solve::from_result(&fit.solve)],
    };
    let balance = |model: &PsModel<S>, t: usize| -> Result<TargetBalance, CliError> {
        Ok(TargetBalance {
            target: label(t),
            balance: Balance::from_report(&balance_report(d, model, t)?),
        })
    };
    let mut fits = Vec::new();
    let mut coef = String::from(COEF_HEADER);
    match a.model.method {
        MethodArg::Rcal => {
            for &t in &prep.targets {
                let (fit, cv) = rcal_ps(d, t, &cfg)?;
                if !fit.solve.converged {
                    return Err(CliError::Numerical(format!("propensity fit for target {} did not converge", label(t))));
                }
                push_coefficients(&mut coef, &label(t).to_string(), "ps", fit.model.gamma.view(), &prep.map.labels, d.names(), &prep.scaling);
                fits.push(PsTarget {
                    target: Some(label(t)),
                    ps: stage(&fit, &cv),
                    balance: vec![balance(&fit.model, t)?],
                });
            }
        }
        MethodArg::Rmls | MethodArg::Rmlg => {
            let (fit, cv) = rml_ps(d, &cfg)?;
            if !fit.solve.converged {
                return Err(CliError::Numerical("propensity fit did not converge".into()));
            }
            push_coefficients(&mut coef, "all", "ps", fit.model.gamma.view(), &prep.map.labels, d.names(), &prep.scaling);
            fits.push(PsTarget {
                target: None,
                ps: stage(&fit, &cv),
                balance: prep.targets.iter().map(|&t| balance(&fit.model, t)).collect::<Result<_, _>>()?,
            });
        }
    }
    let doc = PsDoc {
        schema_version: SCHEMA_VERSION,
        command: "fit-ps",
        input: prep.info.clone(),
        settings: settings(&a.model),
        fits,
    };
    Ok(vec![("ps.json", json(&doc)), ("coefficients.csv", coef.into_bytes())])
}

pub fn fit_or<S: Scalar>(a: &FitArgs) -> Result<Files, CliError> {
    let (prep, results) = run_pipeline::<S>(a)?;
    let label = |c: usize| prep.map.label(c);
    let mut coef = String::from(COEF_HEADER);
    let mut fits = Vec::new();
    for r in &results {
        let cols: Vec<i64> = r.or.columns.iter().map(|&c| label(c)).collect();
        push_coefficients(&mut coef, &label(r.target).to_string(), "or", r.or.coef.view(), &cols, prep.data.names(), &prep.scaling);
        fits.push(OrTarget {
            target: label(r.target),
            columns: cols,
            or: or_stage(r, &a.model),
        });
    }
    let doc = OrDoc {
        schema_version: SCHEMA_VERSION,
        command: "fit-or",
        input: prep.info.clone(),
        settings: settings(&a.model),
        fits,
    };
    Ok(vec![("or.json", json(&doc)), ("coefficients.csv", coef.into_bytes())])
}

/// Scores fixed at the group shares, so weighted means are group means.
fn share_model<S: Scalar>(d: &Dataset<S>) -> PsModel<S> {
    let n = S::from_count(d.n());
    let mut gamma = Array2::zeros((d.p() + 1, d.k()));
    for (k, &c) in d.group_counts().iter().enumerate() {
        gamma[[0, k]] = (S::from_count(c) / n).ln();
    }
    PsModel {
        gamma,
        constraint: Constraint::SumToZero,
        method: PsMethod::Rml,
        lambda: S::zero(),
    }
}

pub fn diagnose<S: Scalar>(a: &FitArgs) -> Result<Files, CliError> {
    let (prep, results) = run_pipeline::<S>(a)?;
    let shares = share_model(&prep.data);
    let targets = results
        .iter()
        .map(|r| {
            Ok(DiagnoseTarget {
                target: prep.map.label(r.target),
                unweighted: Balance::from_report(&balance_report(&prep.data, &shares, r.target)?),
                diagnostics: diagnostics(r),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let doc = DiagnoseDoc {
        schema_version: SCHEMA_VERSION,
        command: "diagnose",
        input: prep.info.clone(),
        settings: settings(&a.model),
        targets,
    };
    Ok(vec![("diagnostics.json", json(&doc))])
}

pub fn cv_path<S: Scalar>(a: &FitArgs) -> Result<Files, CliError> {
    let (prep, results) = run_pipeline::<S>(a)?;
    let mut csv = String::from("target,stage,index,lambda,cv_mean,cv_se,is_min,is_1se\n");
    let mut targets = Vec::new();
    for r in &results {
        let t = prep.map.label(r.target);
        let ps = r.ps_cv.as_ref().map(Cv::from_path);
        let or = r.or_cv.as_ref().map(Cv::from_path);
        for (stage, cv) in [("ps", &ps), ("or", &or)] {
            if let Some(cv) = cv {
                for (i, lambda) in cv.grid.iter().enumerate() {
                    let _ = writeln!(
                        csv,
                        "{t},{stage},{i},{lambda},{},{},{},{}",
                        cv.cv_mean[i],
                        cv.cv_se[i],
                        i == cv.index_min,
                        i == cv.index_1se
                    );
                }
            }
        }
        targets.push(CvTarget { target: t, ps, or });
    }
    let doc = CvDoc {
        schema_version: SCHEMA_VERSION,
        command: "cv-path",
        input: prep.info.clone(),
        settings: settings(&a.model),
        targets,
    };
    Ok(vec![("cv_path.json", json(&doc)), ("cv_path.csv", csv.into_bytes())])
}

pub fn validate_cv_path(a: &FitArgs) -> Result<(), CliError> {
    let m = &a.model;
    if m.lambda != LambdaArg::Cv && m.or_lambda != Some(LambdaArg::Cv) {
        return Err(invalid("cv-path needs --lambda cv or --or-lambda cv"));
    }
    Ok(())
}

pub fn sim_config(a: &SimArgs) -> Result<SimConfig, CliError> {
    let mut cfg = SimConfig::new(a.config, a.n, a.p, a.reps, a.seed);
    if let Some(ms) = &a.methods {
        let mut methods: Vec<EstimateMethod> = Vec::new();
        for &m in ms {
            if methods.contains(&m.into()) {
                return Err(invalid("duplicate method"));
            }
            methods.push(m.into());
        }
        cfg.methods = methods;
    }
    cfg.targets = match &a.target {
        TargetArg::All => (0..K).collect(),
        TargetArg::Labels(ls) => ls
            .iter()
            .map(|&l| {
                usize::try_from(l)
                    .ok()
                    .filter(|&t| t < K)
                    .ok_or_else(|| invalid(format!("target {l} outside 0..{K}")))
            })
            .collect::<Result<_, _>>()?,
    };
    let selection = a.selection.into();
    cfg.pipeline.ps_penalty = Penalty::Cv { selection };
    cfg.pipeline.or_penalty = Penalty::Cv { selection };
    cfg.pipeline.constraint = a.constraint.into();
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulate(a: &SimArgs, cfg: &SimConfig) -> Result<Files, CliError> {
    let s = run_monte_carlo(cfg)?;
    let replicates = s
        .replicates
        .iter()
        .map(|r| {
            let truth = s.row(r.method, r.target).map_or(f64::NAN, |row| row.truth);
            SimReplicate {
                rep: r.rep,
                method: method_label(r.method),
                target: r.target,
                estimate: r.estimate,
                v_hat: r.v_hat,
                standardized: (r.estimate - truth) / r.v_hat.sqrt(),
                covered90: r.covered90,
                covered95: r.covered95,
            }
        })
        .collect();
    let doc = SimDoc {
        schema_version: SCHEMA_VERSION,
        command: "simulate",
        config: s.setting.to_string(),
        n: s.n,
        p: s.p,
        reps: s.reps,
        seed: s.seed,
        selection: selection_label(a.selection),
        constraint: match a.constraint {
            ConstraintArg::OneToZero => "one_to_zero",
            ConstraintArg::SumToZero => "sum_to_zero",
        },
        rows: s.rows.clone(),
        replicates,
        failures: s.failures.clone(),
    };
    Ok(vec![("table.csv", s.to_table_csv().into_bytes()), ("replicates.json", json(&doc))])
}

pub fn subsample<S: Scalar>(a: &SubsampleArgs) -> Result<Files, CliError> {
    let (full, map) = load::<S>(&a.data)?;
    let targets = resolve_targets(&a.target, &map)?;
    if a.size < 2 * full.k() || a.size > full.n() {
        return Err(invalid(format!("--size must lie in {}..={}", 2 * full.k(), full.n())));
    }
    if a.reps == 0 {
        return Err(invalid("--reps must be positive"));
    }
    let cfg = pipeline::<S>(&a.model);
    let method: EstimateMethod = a.model.method.into();
    let runs: Vec<Result<Vec<SubsampleRow>, String>> = (0..a.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = mcal::simulation::replication_rng(a.model.seed, rep as u64);
            let mut rows = rand::seq::index::sample(&mut rng, full.n(), a.size).into_vec();
            rows.sort_unstable();
            let one = || -> Result<Vec<SubsampleRow>, String> {
                let text = |e: mcal::Error| e.to_string();
                let sub = full.subset(&rows).map_err(text)?;
                let sub = if a.data.no_standardize { sub } else { standardize(&sub).map_err(text)?.0 };
                let n = sub.n() as f64;
                let res = run_targets(&sub, method, &targets, &cfg).map_err(text)?;
                if let Some(msg) = res.iter().find_map(|r| unconverged(r, map.label(r.target))) {
                    return Err(msg);
                }
                Ok(res
                    .iter()
                    .map(|r| SubsampleRow {
                        rep,
                        target: map.label(r.target),
                        estimate: r.estimate.mu_hat.as_f64(),
                        std_error: (r.estimate.v_hat.as_f64() / n).sqrt(),
                        ci: interval(&r.estimate.ci),
                    })
                    .collect())
            };
            one()
        })
        .collect();
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in runs.into_iter().enumerate() {
        match r {
            Ok(rows) => estimates.extend(rows),
            Err(reason) => failures.push(SubsampleFailure { rep, reason }),
        }
    }
    if estimates.is_empty() {
        return Err(CliError::Numerical(format!("every subsample failed; first: {}", failures[0].reason)));
    }
    let mut csv = String::from("rep,target,estimate,std_error,lower,upper\n");
    for e in &estimates {
        let _ = writeln!(csv, "{},{},{},{},{},{}", e.rep, e.target, e.estimate, e.std_error, e.ci.lower, e.ci.upper);
    }
    let doc = SubsampleDoc {
        schema_version: SCHEMA_VERSION,
        command: "subsample",
        input: input_info(&a.data, &full, &map),
        settings: settings(&a.model),
        size: a.size,
        reps: a.reps,
        estimates,
        failures,
    };
    Ok(vec![("subsample.csv", csv.into_bytes()), ("subsample.json", json(&doc))])
}

/// Writes every file only after all results exist; each lands via rename.
pub fn write_outputs(dir: &Path, input: Option<&Path>, files: &Files) -> Result<(), CliError> {
    let io = |e: std::io::Error| invalid(format!("cannot write to {}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    if let Some(input) = input.and_then(|p| p.canonicalize().ok()) {
        for (name, _) in files {
            if dir.join(name).canonicalize().ok().as_deref() == Some(input.as_path()) {
                return Err(invalid(format!("refusing to overwrite the input file {}", input.display())));
            }
        }
    }
    for (name, bytes) in files {
        let tmp = dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, bytes).map_err(io)?;
        std::fs::rename(&tmp, dir.join(name)).map_err(io)?;
    }
    Ok(())
}
