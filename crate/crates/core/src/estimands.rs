//! Augmented IPW estimates of treatment means, ATEs and ATTs with
//! influence-function variances and Wald intervals.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::or::{OrMethod, OrModel};
use crate::ps::{predict_probs, PsMethod, PsModel};
use crate::Scalar;

/// Probabilities below this are treated as an overlap failure.
pub const MIN_PROB: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    Rcal,
    Rmls,
    Rmlg,
}

impl From<OrMethod> for EstimateMethod {
    fn from(m: OrMethod) -> Self {
        match m {
            OrMethod::Rwl { .. } => EstimateMethod::Rcal,
            OrMethod::Rmls => EstimateMethod::Rmls,
            OrMethod::Rmlg => EstimateMethod::Rmlg,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Interval<S> {
    pub lower: S,
    pub upper: S,
    pub level: f64,
}

impl<S: Scalar> Interval<S> {
    pub fn contains(&self, v: S) -> bool {
        self.lower <= v && v <= self.upper
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport<S> {
    pub target: usize,
    pub method: EstimateMethod,
    pub n: usize,
    pub mu_hat: S,
    pub v_hat: S,
    pub ci: Interval<S>,
    /// ATT pieces `nu_t^(k)` for every `k != t`.
    pub nu_hat: BTreeMap<usize, S>,
    pub u_hat: BTreeMap<usize, S>,
    /// Per-observation `phi_t`.
    #[serde(skip)]
    pub influence: Array1<S>,
    /// n x K: column `t` holds `R^t Y`, column `k` holds `phi_t^(k)`.
    #[serde(skip)]
    pub components: Array2<S>,
}

/// Fitted means `m^(k)(t, X)` used for each `k != t`, as an n x K matrix
/// (column `t` holds the RML prediction or is left at zero for RWL).
fn copy_predictions<S: Scalar>(d: &Dataset<S>, or: &OrModel<S>, t: usize) -> Result<Array2<S>> {
    let pred = or.predict(d.design());
    let k = d.k();
    let mut m = Array2::zeros((d.n(), k));
    match or.method {
        OrMethod::Rwl { target } => {
            if target != t {
                return Err(Error::InvalidArgument(format!(
                    "outcome copies were fitted for treatment {target}, not {t}"
                )));
            }
            for (c, &kk) in or.columns.iter().enumerate() {
                m.column_mut(kk).assign(&pred.column(c));
            }
        }
        OrMethod::Rmls | OrMethod::Rmlg => {
            let c = or
                .column_of(t)
                .ok_or_else(|| Error::InvalidArgument(format!("no outcome model for treatment {t}")))?;
            for mut col in m.columns_mut() {
                col.assign(&pred.column(c));
            }
        }
    }
    Ok(m)
}

fn check_pairing<S: Scalar>(or: &OrModel<S>, ps: &PsModel<S>, t: usize) -> Result<()> {
    if let OrMethod::Rwl { .. } = or.method {
        if ps.method != (PsMethod::Rcal { target: t }) {
            return Err(Error::InvalidArgument(format!(
                "weighted outcome copies need the calibrated propensity fit for treatment {t}"
            )));
        }
    }
    Ok(())
}

/// n x K matrix of influence components from fitted probabilities and
/// per-copy outcome predictions `m` (column `k` used for `k != t`).
pub fn influence_components<S: Scalar>(
    d: &Dataset<S>,
    probs: &Array2<S>,
    m: &Array2<S>,
    t: usize,
) -> Result<Array2<S>> {
    let k = d.k();
    if t >= k || probs.dim() != (d.n(), k) || m.dim() != (d.n(), k) {
        return Err(Error::InvalidArgument("influence: shape or target mismatch".into()));
    }
    let y = d.y();
    let mut out = Array2::zeros((d.n(), k));
    for (i, &ti) in d.treatments().iter().enumerate() {
        let rt = ti == t;
        if rt {
            let pt = probs[[i, t]];
            if !(pt >= S::lit(MIN_PROB)) {
                return Err(Error::ExtremeWeight {
                    row: i,
                    treatment: t,
                    prob: pt.as_f64(),
                });
            }
            out[[i, t]] = y[i];
            for kk in (0..k).filter(|&kk| kk != t) {
                let w = probs[[i, kk]] / pt;
                out[[i, kk]] = w * y[i] - w * m[[i, kk]];
            }
        } else {
            out[[i, ti]] = m[[i, ti]];
        }
    }
    Ok(out)
}

/// Wald interval `estimate -/+ z sqrt(variance / n)`.
pub fn wald_ci<S: Scalar>(estimate: S, variance: S, n: usize, level: f64) -> Result<Interval<S>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    if !(variance >= S::zero()) || n == 0 {
        return Err(Error::InvalidArgument("variance must be >= 0 and n > 0".into()));
    }
    let z = S::lit(normal_quantile(0.5 + level / 2.0));
    let half = z * (variance / S::from_count(n)).sqrt();
    Ok(Interval {
        lower: estimate - half,
        upper: estimate + half,
        level,
    })
}

fn mean_and_var<S: Scalar>(v: &Array1<S>) -> (S, S) {
    let n = S::from_count(v.len());
    let mean = v.sum() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
    (mean, var)
}

/// `(nu, u)` from influence components for one `k != t`.
fn nu_parts<S: Scalar>(d: &Dataset<S>, comp: &Array2<S>, k: usize) -> (S, S) {
    let n = S::from_count(d.n());
    let rk = S::from_count(d.group_counts()[k]) / n;
    let phi = comp.column(k);
    let nu = phi.sum() / n / rk;
    let codes = d.treatments();
    let u = phi
        .iter()
        .zip(codes)
        .map(|(&v, &ti)| {
            let r = if ti == k { S::one() } else { S::zero() };
            let e = v - r * nu;
            e * e
        })
        .sum::<S>()
        / n
        / (rk * rk);
    (nu, u)
}

/// Treatment-mean estimate for `t` with its influence vector, variance,
/// interval and ATT decomposition.
pub fn aipw_mu<S: Scalar>(
    d: &Dataset<S>,
    or: &OrModel<S>,
    ps: &PsModel<S>,
    t: usize,
    level: f64,
) -> Result<EstimateReport<S>> {
    if t >= d.k() {
        return Err(Error::InvalidArgument(format!("target {t} outside 0..{}", d.k())));
    }
    check_pairing(or, ps, t)?;
    let probs = predict_probs(ps, d)?;
    let m = copy_predictions(d, or, t)?;
    let components = influence_components(d, &probs, &m, t)?;
    let influence = components.sum_axis(Axis(1));
    let (mu_hat, v_hat) = mean_and_var(&influence);
    let ci = wald_ci(mu_hat, v_hat, d.n(), level)?;
    let mut nu_hat = BTreeMap::new();
    let mut u_hat = BTreeMap::new();
    for k in (0..d.k()).filter(|&k| k != t) {
        let (nu, u) = nu_parts(d, &components, k);
        nu_hat.insert(k, nu);
        u_hat.insert(k, u);
    }
    Ok(EstimateReport {
        target: t,
        method: or.method.into(),
        n: d.n(),
        mu_hat,
        v_hat,
        ci,
        nu_hat,
        u_hat,
        influence,
        components,
    })
}

/// ATT piece `nu_t^(k) = E(Y^(t) | T = k)` and its variance estimate.
pub fn aipw_nu<S: Scalar>(
    d: &Dataset<S>,
    or: &OrModel<S>,
    ps: &PsModel<S>,
    t: usize,
    k: usize,
) -> Result<(S, S)> {
    if k == t {
        return Err(Error::InvalidArgument(
            "nu needs k != t; use group_mean for the observed group".into(),
        ));
    }
    if t >= d.k() || k >= d.k() {
        return Err(Error::InvalidArgument("treatment index out of range".into()));
    }
    check_pairing(or, ps, t)?;
    let probs = predict_probs(ps, d)?;
    let m = copy_predictions(d, or, t)?;
    let comp = influence_components(d, &probs, &m, t)?;
    Ok(nu_parts(d, &comp, k))
}

/// `E~(Y R^k) / E~(R^k)`.
pub fn group_mean<S: Scalar>(d: &Dataset<S>, k: usize) -> Result<S> {
    if k >= d.k() {
        return Err(Error::InvalidArgument("treatment index out of range".into()));
    }
    let (y, _) = d.group(k);
    Ok(y.sum() / S::from_count(y.len()))
}

#[derive(Debug, Clone, Serialize)]
pub struct Contrast<S> {
    pub first: usize,
    pub second: usize,
    pub diff: S,
    pub variance: S,
    pub ci: Interval<S>,
}

/// `mu_a - mu_b` with the empirical variance of the influence difference.
pub fn ate_contrast<S: Scalar>(a: &EstimateReport<S>, b: &EstimateReport<S>, level: f64) -> Result<Contrast<S>> {
    if a.influence.len() != b.influence.len() || a.influence.is_empty() {
        return Err(Error::InvalidArgument("influence vectors differ in length".into()));
    }
    let diff = a.mu_hat - b.mu_hat;
    let n = S::from_count(a.influence.len());
    let variance = a
        .influence
        .iter()
        .zip(b.influence.iter())
        .map(|(&x, &y)| {
            let e = (x - a.mu_hat) - (y - b.mu_hat);
            e * e
        })
        .sum::<S>()
        / n;
    Ok(Contrast {
        first: a.target,
        second: b.target,
        diff,
        variance,
        ci: wald_ci(diff, variance, a.influence.len(), level)?,
    })
}

/// Standard normal quantile (Wichura's AS241, about 16 significant digits).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
