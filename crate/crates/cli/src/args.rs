use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mcal", version, about = "Calibrated estimation of treatment means and effects")]
pub struct Cli {
    /// Worker threads (0 = all cores). MCAL_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit propensity scores and write ps.json and coefficients.csv.
    FitPs(FitArgs),
    /// Fit outcome regressions and write or.json and coefficients.csv.
    FitOr(FitArgs),
    /// Full pipeline per target; writes report.json and coefficients.csv.
    Estimate(FitArgs),
    /// Balance diagnostics and post-fit checks; writes diagnostics.json.
    Diagnose(FitArgs),
    /// Cross-validation curves; writes cv_path.json and cv_path.csv.
    CvPath(FitArgs),
    /// Monte Carlo study; writes table.csv and replicates.json.
    Simulate(SimArgs),
    /// Repeated subsampling of an input file; writes subsample.csv and subsample.json.
    Subsample(SubsampleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub outcome: String,
    #[arg(long)]
    pub treatment: String,
    /// Comma-separated covariate columns; default is every other column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = Interactions::None)]
    pub interactions: Interactions,
    /// Drop interaction columns with a smaller fraction of nonzero entries.
    #[arg(long, allow_negative_numbers = true)]
    pub min_frequency: Option<f64>,
    /// Fit on the raw covariates instead of standardizing them.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Rcal)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = ConstraintArg::OneToZero)]
    pub constraint: ConstraintArg,
    #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
    pub link: LinkArg,
    /// `cv` or a nonnegative penalty.
    #[arg(long, default_value = "cv", value_parser = parse_lambda, allow_negative_numbers = true)]
    pub lambda: LambdaArg,
    /// Outcome-stage penalty; defaults to --lambda.
    #[arg(long, value_parser = parse_lambda, allow_negative_numbers = true)]
    pub or_lambda: Option<LambdaArg>,
    /// CV rule; only meaningful when some penalty is `cv`.
    #[arg(long, value_enum)]
    pub selection: Option<SelectionArg>,
    #[arg(long, default_value_t = 0.95, allow_negative_numbers = true)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// `all` or comma-separated treatment labels.
    #[arg(long, default_value = "all", value_parser = parse_targets)]
    pub target: TargetArg,
    /// Output directory, created if missing.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SimArgs {
    #[arg(long, value_parser = parse_setting)]
    pub config: mcal::simulation::Setting,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub p: usize,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated methods; default runs all three.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<MethodArg>>,
    #[arg(long, default_value = "all", value_parser = parse_targets)]
    pub target: TargetArg,
    #[arg(long, value_enum, default_value_t = SelectionArg::Min)]
    pub selection: SelectionArg,
    #[arg(long, value_enum, default_value_t = ConstraintArg::OneToZero)]
    pub constraint: ConstraintArg,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SubsampleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "all", value_parser = parse_targets)]
    pub target: TargetArg,
    /// Rows per subsample, drawn without replacement.
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interactions {
    None,
    Pairwise,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Rcal,
    Rmls,
    Rmlg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintArg {
    OneToZero,
    SumToZero,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkArg {
    Identity,
    Logit,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionArg {
    Min,
    #[value(name = "1se")]
    OneSe,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaArg {
    Cv,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetArg {
    All,
    Labels(Vec<i64>),
}

fn parse_lambda(s: &str) -> Result<LambdaArg, String> {
    if s.eq_ignore_ascii_case("cv") {
        return Ok(LambdaArg::Cv);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(LambdaArg::Value(v)),
        _ => Err(format!("expected `cv` or a nonnegative number, got `{s}`")),
    }
}

fn parse_targets(s: &str) -> Result<TargetArg, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(TargetArg::All);
    }
    let labels = s
        .split(',')
        .map(|v| v.trim().parse::<i64>().map_err(|_| format!("bad treatment label `{v}`")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = labels.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != labels.len() {
        return Err("duplicate treatment label".into());
    }
    Ok(TargetArg::Labels(labels))
}

fn parse_setting(s: &str) -> Result<mcal::simulation::Setting, String> {
    s.parse().map_err(|e: mcal::Error| e.to_string())
}

impl From<MethodArg> for mcal::EstimateMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rcal => mcal::EstimateMethod::Rcal,
            MethodArg::Rmls => mcal::EstimateMethod::Rmls,
            MethodArg::Rmlg => mcal::EstimateMethod::Rmlg,
        }
    }
}

impl From<ConstraintArg> for mcal::pipeline::ConstraintKind {
    fn from(c: ConstraintArg) -> Self {
        match c {
            ConstraintArg::OneToZero => mcal::pipeline::ConstraintKind::OneToZero,
            ConstraintArg::SumToZero => mcal::pipeline::ConstraintKind::SumToZero,
        }
    }
}

impl From<LinkArg> for mcal::Link {
    fn from(l: LinkArg) -> Self {
        match l {
            LinkArg::Identity => mcal::Link::Identity,
            LinkArg::Logit => mcal::Link::Logit,
        }
    }
}

impl From<SelectionArg> for mcal::Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::Min => mcal::Selection::Min,
            SelectionArg::OneSe => mcal::Selection::OneSe,
        }
    }
}
