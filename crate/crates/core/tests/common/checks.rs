//! Library fits measured against the references in the parent module. Each
//! function returns the measured discrepancy; callers decide the tolerance.

use super::*;
use mcal::diagnostics::{
    bregman_cal, bregman_ml, cal_curvature, cal_curvature_bound, k_divergence, kl_divergence,
};
use mcal::engine::{coef_gradient, zero_threshold};
use mcal::estimands::{aipw_mu, aipw_nu, group_mean};
use mcal::or::{fit_rmlg, fit_rmls, fit_rwl, WeightedGlmAdapter};
use mcal::ps::{fit_rcal_ps, fit_rml_ps, CalAdapter, MlAdapter};
use mcal::{Constraint, LossAdapter, OrMethod, OrModel, PsMethod, PsModel, SolveConfig, Solver};
use nalgebra::SymmetricEigen;
use ndarray::Axis;

pub fn loss_at<A: LossAdapter<f64>>(a: &A, coef: &Array2<f64>) -> f64 {
    a.loss(a.design().dot(coef).view()).unwrap()
}

/// Central differences of the adapter loss in every coefficient.
pub fn fd_gradient<A: LossAdapter<f64>>(a: &A, coef: &Array2<f64>) -> Array2<f64> {
    let h = 1e-5;
    let mut g = Array2::zeros(coef.dim());
    for idx in 0..coef.len() {
        let (j, c) = (idx / coef.ncols(), idx % coef.ncols());
        let mut up = coef.clone();
        up[[j, c]] += h;
        let mut down = coef.clone();
        down[[j, c]] -= h;
        g[[j, c]] = (loss_at(a, &up) - loss_at(a, &down)) / (2.0 * h);
    }
    g
}

pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    diff / b.mapv(|v| v * v).sum().sqrt().max(1e-3)
}

pub fn random_coef(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || scale * r.sample::<f64, _>(StandardNormal))
}

pub struct Instance {
    pub d: Dataset<f64>,
    pub t: usize,
    pub seed: u64,
}

/// n in 12..=50, p in 1..=5, K in 2..=4.
pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(12..=50);
    let p = r.random_range(1..=5);
    let k = r.random_range(2..=4);
    let t = r.random_range(0..k);
    Instance {
        d: random_dataset(seed, n, p, k, 0.5),
        t,
        seed,
    }
}

/// Finite-difference relative error of the analytic gradient, and the
/// largest gap between library and reference loss or gradient.
pub struct GradientCheck {
    pub fd_error: f64,
    pub reference_gap: f64,
}

pub fn check_cal(inst: &Instance, constraint: Constraint) -> GradientCheck {
    let a = CalAdapter::new(&inst.d, inst.t, constraint).unwrap();
    let coef = random_coef(inst.d.p() + 1, a.responses(), 0.3, inst.seed + 1);
    let analytic = coef_gradient(&a, &coef);
    let (value, full) = cal_loss_grad(&inst.d, &a.expand(&coef), inst.t);
    GradientCheck {
        fd_error: relative_error(&fd_gradient(&a, &coef), &analytic),
        reference_gap: (loss_at(&a, &coef) - value)
            .abs()
            .max(max_abs_diff(&analytic, &full.select(Axis(1), a.free_columns()))),
    }
}

pub fn check_ml(inst: &Instance) -> GradientCheck {
    let c = Constraint::OneToZero { reference: inst.t };
    let a = MlAdapter::new(&inst.d, c).unwrap();
    let coef = random_coef(inst.d.p() + 1, a.responses(), 0.3, inst.seed + 2);
    let analytic = coef_gradient(&a, &coef);
    let (value, g) = ml_loss_grad(&inst.d, &a.expand(&coef));
    let free: Vec<usize> = (0..inst.d.k()).filter(|&k| k != inst.t).collect();
    GradientCheck {
        fd_error: relative_error(&fd_gradient(&a, &coef), &analytic),
        reference_gap: (loss_at(&a, &coef) - value)
            .abs()
            .max(max_abs_diff(&analytic, &g.select(Axis(1), &free))),
    }
}

pub fn check_wl(inst: &Instance, link: Link) -> GradientCheck {
    let d = match link {
        Link::Identity => inst.d.clone(),
        Link::Logit => binary_outcome(&inst.d, inst.seed + 3),
    };
    let mut r = rng(inst.seed + 4);
    let w = Array2::from_shape_simple_fn((d.n(), d.k()), || r.random::<f64>() * 2.0);
    let f = d.design().to_owned();
    let y = d.y().to_owned();
    let a = WeightedGlmAdapter::new(f.view().into(), y.view().into(), w.clone(), link).unwrap();
    let coef = random_coef(d.p() + 1, d.k(), 0.5, inst.seed + 5);
    let analytic = coef_gradient(&a, &coef);
    let (value, g) = wl_loss_grad(&f, &y, &w, &coef, link);
    GradientCheck {
        fd_error: relative_error(&fd_gradient(&a, &coef), &analytic),
        reference_gap: (loss_at(&a, &coef) - value).abs().max(max_abs_diff(&analytic, &g)),
    }
}

/// CAL (one-to-zero and sum-to-zero), ML, WL identity and WL logit.
pub fn all_gradient_checks(seed: u64) -> [GradientCheck; 5] {
    let inst = instance(seed);
    [
        check_cal(&inst, Constraint::OneToZero { reference: inst.t }),
        check_cal(&inst, Constraint::SumToZero),
        check_ml(&inst),
        check_wl(&inst, Link::Identity),
        check_wl(&inst, Link::Logit),
    ]
}

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    CalReference,
    CalSumToZero,
    Ml,
    Rwl,
    Rmlg,
}

pub const KINDS: [Kind; 5] = [Kind::CalReference, Kind::CalSumToZero, Kind::Ml, Kind::Rwl, Kind::Rmlg];

fn expand(free: &Array2<f64>, cols: &[usize], k: usize) -> Array2<f64> {
    let mut full = Array2::zeros((free.nrows(), k));
    for (c, &kk) in cols.iter().enumerate() {
        full.column_mut(kk).assign(&free.column(c));
    }
    full
}

pub fn random_probs(d: &Dataset<f64>, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let gamma = Array2::from_shape_simple_fn((d.p() + 1, d.k()), || 0.4 * r.sample::<f64, _>(StandardNormal));
    PsModel {
        gamma,
        constraint: Constraint::SumToZero,
        method: PsMethod::Rml,
        lambda: 0.0,
    }
    .probs(d.design())
}

pub fn rwl_weights(d: &Dataset<f64>, probs: &Array2<f64>, t: usize) -> Array2<f64> {
    let cols: Vec<usize> = (0..d.k()).filter(|&c| c != t).collect();
    let mut w = Array2::zeros((d.n(), cols.len()));
    for i in 0..d.n() {
        if d.treatments()[i] == t {
            for (c, &kk) in cols.iter().enumerate() {
                w[[i, c]] = probs[[i, kk]] / probs[[i, t]];
            }
        }
    }
    w
}

fn cols_of(kind: Kind, t: usize, k: usize) -> Vec<usize> {
    match kind {
        Kind::CalReference => (0..k).filter(|&c| c != t).collect(),
        _ => (0..k).collect(),
    }
}

type Loss<'a> = Box<dyn Fn(&Array2<f64>) -> (f64, Array2<f64>) + 'a>;
type Engine<'a> = Box<dyn Fn(f64) -> Option<(f64, Array2<f64>)> + 'a>;

/// Engine objective minus proximal-gradient oracle objective at 0.3 lambda*,
/// both evaluated with the reference losses. Infinite if the engine did not
/// converge.
pub fn objective_gap(kind: Kind, seed: u64) -> f64 {
    let d = random_dataset(seed, 120, 4, 3, 0.5);
    let k = d.k();
    let t = (seed % 3) as usize;
    let f = d.design().to_owned();
    let y = d.y().to_owned();
    let dd = &d;
    let (loss, cols, engine): (Loss, Vec<usize>, Engine) = match kind {
        Kind::CalReference | Kind::CalSumToZero => {
            let constraint = match kind {
                Kind::CalReference => Constraint::OneToZero { reference: t },
                _ => Constraint::SumToZero,
            };
            let cols = cols_of(kind, t, k);
            let loss: Loss = Box::new(move |b| {
                let cols = cols_of(kind, t, k);
                let (v, g) = cal_loss_grad(dd, &expand(b, &cols, k), t);
                (v, g.select(Axis(1), &cols))
            });
            let engine: Engine = Box::new(move |frac| {
                let a = CalAdapter::new(dd, t, constraint).unwrap();
                let lambda = frac * zero_threshold(&a, &SolveConfig::default()).unwrap().0;
                let fit = fit_rcal_ps(dd, t, lambda, constraint, &SolveConfig::default()).unwrap();
                fit.solve
                    .converged
                    .then(|| (lambda, fit.model.gamma.select(Axis(1), &cols_of(kind, t, k))))
            });
            (loss, cols, engine)
        }
        Kind::Ml => {
            let loss: Loss = Box::new(move |b| {
                let (v, g) = ml_loss_grad(dd, &expand(b, &[1, 2], k));
                (v, g.select(Axis(1), &[1, 2]))
            });
            let engine: Engine = Box::new(move |frac| {
                let c = Constraint::OneToZero { reference: 0 };
                let a = MlAdapter::new(dd, c).unwrap();
                let lambda = frac * zero_threshold(&a, &SolveConfig::default()).unwrap().0;
                let fit = fit_rml_ps(dd, lambda, c, &SolveConfig::default()).unwrap();
                fit.solve
                    .converged
                    .then(|| (lambda, fit.model.gamma.select(Axis(1), &[1, 2])))
            });
            (loss, vec![1, 2], engine)
        }
        Kind::Rwl => {
            let probs = random_probs(dd, seed + 1000);
            let w = rwl_weights(dd, &probs, t);
            let (f2, y2) = (f.clone(), y.clone());
            let loss: Loss = Box::new(move |b| wl_loss_grad(&f2, &y2, &w, b, Link::Identity));
            let engine: Engine = Box::new(move |frac| {
                let a = WeightedGlmAdapter::rwl(dd, t, probs.view(), Link::Identity).unwrap();
                let lambda = frac * zero_threshold(&a, &SolveConfig::default()).unwrap().0;
                // weights come from arbitrary probabilities, not a fitted model
                let fit = Solver::new(&a)
                    .solve(&Array2::zeros((dd.p() + 1, dd.k() - 1)), &SolveConfig::with_lambda(lambda))
                    .unwrap();
                fit.converged.then_some((lambda, fit.coef))
            });
            (loss, (0..k).filter(|&c| c != t).collect(), engine)
        }
        Kind::Rmlg => {
            let w = d.indicators();
            let (f2, y2) = (f.clone(), y.clone());
            let loss: Loss = Box::new(move |b| wl_loss_grad(&f2, &y2, &w, b, Link::Identity));
            let engine: Engine = Box::new(move |frac| {
                let a = WeightedGlmAdapter::rmlg(dd, Link::Identity).unwrap();
                let lambda = frac * zero_threshold(&a, &SolveConfig::default()).unwrap().0;
                let fit = fit_rmlg(dd, lambda, Link::Identity, &SolveConfig::default()).unwrap();
                fit.solves[0].converged.then_some((lambda, fit.model.coef))
            });
            (loss, (0..k).collect(), engine)
        }
    };
    let Some((lambda, coef)) = engine(0.3) else {
        return f64::INFINITY;
    };
    let value = |b: &Array2<f64>| {
        let v = loss(b).0;
        v.is_finite().then_some(v)
    };
    let oracle = prox_gradient(value, |b| loss(b).1, Array2::zeros((f.ncols(), cols.len())), lambda, 200_000);
    let obj = |b: &Array2<f64>| loss(b).0 + group_penalty(b, lambda);
    obj(&coef) - obj(&oracle)
}

fn max_vec_diff(a: ndarray::ArrayView1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Unpenalized fits against normal equations, IRLS and Newton: the largest
/// coefficient difference for each comparison.
pub fn unpenalized_gaps() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let d = random_dataset(3, 200, 3, 3, 0.5);
    let fit = fit_rmls(&d, &[0.0; 3], Link::Identity, &SolveConfig::default()).unwrap();
    let mut gap = 0.0_f64;
    for t in 0..3 {
        let (y, f) = d.group(t);
        let ols = weighted_least_squares(&f, &y, &Array1::ones(y.len()));
        gap = gap.max(max_vec_diff(fit.model.coef.column(t), &ols));
    }
    out.push(("least squares per group", gap));

    let d = binary_outcome(&random_dataset(5, 300, 3, 2, 0.6), 9);
    let fit = fit_rmls(&d, &[0.0; 2], Link::Logit, &SolveConfig::default()).unwrap();
    let mut gap = 0.0_f64;
    for t in 0..2 {
        let (y, f) = d.group(t);
        gap = gap.max(max_vec_diff(fit.model.coef.column(t), &irls_logistic(&f, &y)));
    }
    out.push(("logistic per group", gap));
    // two-class likelihood propensity with reference 0 is logistic regression of R^1
    let r1 = Array1::from_iter(d.treatments().iter().map(|&t| t as f64));
    let beta = irls_logistic(&d.design().to_owned(), &r1);
    let ps = fit_rml_ps(&d, 0.0, Constraint::OneToZero { reference: 0 }, &SolveConfig::default()).unwrap();
    out.push(("two-class likelihood propensity", max_vec_diff(ps.model.gamma.column(1), &beta)));

    // Newton started at the engine's answer converges quadratically to the
    // unique minimizer, so any gap is the engine's error
    let d = random_dataset(8, 400, 3, 3, 0.3);
    let fit = fit_rml_ps(&d, 0.0, Constraint::OneToZero { reference: 0 }, &SolveConfig::default()).unwrap();
    let gap = if fit.solve.converged {
        let ml = newton(|g| ml_loss_grad(&d, g).1, fit.model.gamma.clone(), &[1, 2]);
        max_abs_diff(&fit.model.gamma, &ml)
    } else {
        f64::INFINITY
    };
    out.push(("multiclass likelihood propensity", gap));
    let mut gap = 0.0_f64;
    for t in 0..3 {
        let free: Vec<usize> = (0..3).filter(|&c| c != t).collect();
        let fit = fit_rcal_ps(&d, t, 0.0, Constraint::OneToZero { reference: t }, &SolveConfig::default()).unwrap();
        if !fit.solve.converged {
            gap = f64::INFINITY;
            continue;
        }
        let cal = newton(|g| cal_loss_grad(&d, g, t).1, fit.model.gamma.clone(), &free);
        gap = gap.max(max_abs_diff(&fit.model.gamma, &cal));
    }
    out.push(("calibrated propensity", gap));

    let d = random_dataset(13, 240, 3, 3, 0.5);
    let t = 2;
    let ps = fit_rcal_ps(&d, t, 0.05, Constraint::OneToZero { reference: t }, &SolveConfig::default()).unwrap();
    let w = rwl_weights(&d, &ps.model.probs(d.design()), t);
    let fit = fit_rwl(&d, t, &ps.model, 0.0, Link::Identity, &SolveConfig::default()).unwrap();
    let f = d.design().to_owned();
    let mut gap = 0.0_f64;
    for c in 0..2 {
        let wls = weighted_least_squares(&f, &d.y().to_owned(), &w.column(c).to_owned());
        gap = gap.max(max_vec_diff(fit.model.coef.column(c), &wls));
    }
    out.push(("weighted copies", gap));
    out
}

/// Lasso-penalized binary calibration `E~[R^t e^{b'f} - (1 - R^t) b'f]` by
/// the proximal-gradient oracle.
pub fn binary_calibration(d: &Dataset<f64>, t: usize, lambda: f64) -> Array1<f64> {
    let f = d.design().to_owned();
    let n = d.n() as f64;
    let rt = Array1::from_iter(d.treatments().iter().map(|&v| (v == t) as u8 as f64));
    let eval = |b: &Array2<f64>| {
        let eta = f.dot(&b.column(0));
        let mut v = 0.0;
        let mut g = Array1::zeros(f.nrows());
        for i in 0..f.nrows() {
            v += rt[i] * eta[i].exp() - (1.0 - rt[i]) * eta[i];
            g[i] = rt[i] * eta[i].exp() - (1.0 - rt[i]);
        }
        (v / n, f.t().dot(&g).insert_axis(Axis(1)) / n)
    };
    let b = prox_gradient(
        |b| Some(eval(b).0).filter(|v| v.is_finite()),
        |b| eval(b).1,
        Array2::zeros((f.ncols(), 1)),
        lambda,
        500_000,
    );
    b.column(0).to_owned()
}

/// Largest difference in the fitted probability of group `t` between the
/// two-class calibrated fit and the binary oracle.
pub fn binary_gap(seed: u64) -> f64 {
    let d = random_dataset(100 + seed, 120, 4, 2, 0.6);
    let t = (seed % 2) as usize;
    let c = Constraint::OneToZero { reference: t };
    let lambda = 0.2 * zero_threshold(&CalAdapter::new(&d, t, c).unwrap(), &SolveConfig::default()).unwrap().0;
    let fit = fit_rcal_ps(&d, t, lambda, c, &SolveConfig::default()).unwrap();
    if !fit.solve.converged {
        return f64::INFINITY;
    }
    let beta = binary_calibration(&d, t, lambda);
    let probs = fit.model.probs(d.design());
    let eta = d.design().dot(&beta);
    eta.iter()
        .zip(probs.column(t).iter())
        .fold(0.0_f64, |m, (&e, &p)| m.max((1.0 / (1.0 + e.exp()) - p).abs()))
}

pub fn predictors(n: usize, k: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((n, k), || scale * r.sample::<f64, _>(StandardNormal))
}

pub fn probs_of(h: &Array2<f64>) -> Array2<f64> {
    let mut out = h.clone();
    for mut row in out.outer_iter_mut() {
        let p = softmax(row.as_slice().unwrap());
        row.assign(&Array1::from(p));
    }
    out
}

/// `(R^t / pi'_t) {K(pi_t, pi'_t) + L(pi, pi')}` averaged, written out term by term.
pub fn cal_divergence_direct(t_codes: &[usize], h: &Array2<f64>, hp: &Array2<f64>, t: usize) -> f64 {
    let (p, q) = (probs_of(h), probs_of(hp));
    let mut acc = 0.0;
    for (i, &ti) in t_codes.iter().enumerate() {
        if ti != t {
            continue;
        }
        let ratio = q[[i, t]] / p[[i, t]];
        let kdiv = ratio - 1.0 - ratio.ln();
        let ldiv: f64 = (0..h.ncols()).map(|k| q[[i, k]] * (q[[i, k]] / p[[i, k]]).ln()).sum();
        acc += (kdiv + ldiv) / q[[i, t]];
    }
    acc / t_codes.len() as f64
}

/// Conditional expectation of the calibration loss given X when
/// `P(T = k | X) = pi*_k`, averaged over the rows of `h`.
fn expected_cal_loss(h: &Array2<f64>, pstar: &Array2<f64>, t: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..h.nrows() {
        for k in (0..h.ncols()).filter(|&k| k != t) {
            let diff = h[[i, k]] - h[[i, t]];
            acc += pstar[[i, t]] * diff.exp() - pstar[[i, k]] * diff;
        }
    }
    acc / h.nrows() as f64
}

fn expected_ml_loss(h: &Array2<f64>, pstar: &Array2<f64>) -> f64 {
    let p = probs_of(h);
    let mut acc = 0.0;
    for i in 0..h.nrows() {
        for k in 0..h.ncols() {
            acc -= pstar[[i, k]] * p[[i, k]].ln();
        }
    }
    acc / h.nrows() as f64
}

/// Gaps for one random pair: Bregman CAL and ML divergences against their
/// direct forms, then expected excess CAL and ML losses against K + L and L.
pub fn divergence_gaps(pair: u64) -> [f64; 4] {
    let mut r = rng(pair);
    let k = r.random_range(2..=4);
    let n = r.random_range(10..=40);
    let d = random_dataset(pair, n, 2, k, 0.5);
    let t = r.random_range(0..k);
    let h = predictors(n, k, 1.0, pair + 500);
    let hp = predictors(n, k, 1.0, pair + 900);
    let cal = bregman_cal(&d, h.view(), hp.view(), t).unwrap();
    let direct = cal_divergence_direct(d.treatments(), &h, &hp, t);
    let ml = bregman_ml(&d, h.view(), hp.view()).unwrap();
    let (p, q) = (probs_of(&h), probs_of(&hp));
    let kl: f64 = (0..n).map(|i| kl_divergence(p.row(i), q.row(i))).sum::<f64>() / n as f64;

    let mut r = rng(pair + 7);
    let k = r.random_range(2..=4);
    let t = r.random_range(0..k);
    let n = 30;
    let h = predictors(n, k, 0.8, pair + 1);
    let hstar = predictors(n, k, 0.8, pair + 2);
    let (p, ps) = (probs_of(&h), probs_of(&hstar));
    let cal_excess = expected_cal_loss(&h, &ps, t) - expected_cal_loss(&hstar, &ps, t);
    let ml_excess = expected_ml_loss(&h, &ps) - expected_ml_loss(&hstar, &ps);
    let (mut kterm, mut lterm) = (0.0, 0.0);
    for i in 0..n {
        kterm += k_divergence(p[[i, t]], ps[[i, t]]);
        lterm += kl_divergence(p.row(i), ps.row(i));
    }
    kterm /= n as f64;
    lterm /= n as f64;
    [
        (cal - direct).abs(),
        (ml - kl).abs(),
        (cal_excess - (kterm + lterm)).abs(),
        (ml_excess - lterm).abs(),
    ]
}

/// Outcome of the relative-error bounds for one case: for each bound,
/// whether its precondition held and whether the bound held.
pub struct MsreCase {
    pub calibration: Option<bool>,
    pub likelihood: Option<bool>,
}

pub fn msre_case(case: u64) -> MsreCase {
    let mut r = rng(case + 31);
    let k = r.random_range(2..=4);
    let n = 25;
    let t = r.random_range(0..k);
    let scale = r.random_range(0.1..1.5);
    let (p, ps) = (
        probs_of(&predictors(n, k, scale, case + 3)),
        probs_of(&predictors(n, k, scale, case + 4)),
    );
    let (mut msre, mut kterm, mut lterm) = (0.0, 0.0, 0.0);
    let mut ratio_min = f64::INFINITY;
    let mut b = f64::INFINITY;
    for i in 0..n {
        msre += (ps[[i, t]] / p[[i, t]] - 1.0).powi(2);
        kterm += k_divergence(p[[i, t]], ps[[i, t]]);
        lterm += kl_divergence(p.row(i), ps.row(i));
        ratio_min = ratio_min.min(p[[i, t]] / ps[[i, t]]);
        b = b.min(p[[i, t]]);
    }
    let (msre, kterm, lterm) = (msre / n as f64, kterm / n as f64, lterm / n as f64);
    let a = ratio_min.min(0.5);
    MsreCase {
        calibration: (a > 0.0).then(|| {
            msre <= 5.0 / (3.0 * a) * kterm + 1e-12 && msre <= 5.0 / (3.0 * a) * (kterm + lterm) + 1e-12
        }),
        likelihood: (b > 0.0).then(|| msre <= lterm / (2.0 * b * b) + 1e-12),
    }
}

pub fn min_eigenvalue(m: &Array2<f64>) -> f64 {
    let k = m.nrows();
    let na = DMatrix::from_fn(k, k, |i, j| m[[i, j]]);
    SymmetricEigen::new(na).eigenvalues.min()
}

/// Smallest eigenvalue of the doubled-diagonal bound minus the calibration
/// curvature at random probabilities.
pub fn domination_margin(case: u64) -> f64 {
    let mut r = rng(case);
    let k = r.random_range(2..=6);
    let t = r.random_range(0..k);
    let scale = r.random_range(0.1..4.0);
    let pi = probs_of(&predictors(1, k, scale, case + 11)).row(0).to_owned();
    min_eigenvalue(&(&cal_curvature_bound(pi.view(), t) - &cal_curvature(pi.view(), t)))
}

/// Calibrated fit at `frac` lambda*, with target `seed mod k`.
pub fn fitted_rcal(seed: u64, n: usize, p: usize, k: usize, frac: f64) -> Option<(Dataset<f64>, usize, PsModel<f64>, f64)> {
    let d = random_dataset(seed, n, p, k, 0.4);
    let t = seed as usize % k;
    let c = Constraint::OneToZero { reference: t };
    let star = zero_threshold(&CalAdapter::new(&d, t, c).unwrap(), &SolveConfig::default())
        .unwrap()
        .0;
    let fit = fit_rcal_ps(&d, t, frac * star, c, &SolveConfig::default()).unwrap();
    fit.solve.converged.then_some((d, t, fit.model, frac * star))
}

/// Classical augmented IPW with a single outcome prediction, summed directly.
pub fn classical_aipw(d: &Dataset<f64>, probs: &Array2<f64>, m: &[f64], t: usize) -> f64 {
    let y = d.y();
    let mut acc = 0.0;
    for (i, &ti) in d.treatments().iter().enumerate() {
        let r = (ti == t) as u8 as f64;
        acc += r * y[i] / probs[[i, t]] - (r / probs[[i, t]] - 1.0) * m[i];
    }
    acc / d.n() as f64
}

/// Relative gaps between the classical AIPW sum and the library estimate
/// with tied weighted copies and with a single least-squares model.
pub fn tied_copy_gaps(seed: u64) -> Option<(f64, f64)> {
    let (d, t, ps, _) = fitted_rcal(seed, 150, 4, 3, 0.3)?;
    let rmls = fit_rmls(&d, &vec![0.0; d.k()], Link::Identity, &SolveConfig::default()).unwrap();
    let alpha = rmls.model.coef.column(t).to_owned();
    let copies: Vec<usize> = (0..d.k()).filter(|&k| k != t).collect();
    let tied = OrModel {
        method: OrMethod::Rwl { target: t },
        coef: Array2::from_shape_fn((d.p() + 1, copies.len()), |(j, _)| alpha[j]),
        columns: copies,
        link: Link::Identity,
        lambda: vec![0.0],
    };
    let single = OrModel {
        method: OrMethod::Rmls,
        coef: alpha.clone().insert_axis(Axis(1)),
        columns: vec![t],
        link: Link::Identity,
        lambda: vec![0.0],
    };
    let generalized = aipw_mu(&d, &tied, &ps, t, 0.95).unwrap().mu_hat;
    let classical = aipw_mu(&d, &single, &ps, t, 0.95).unwrap().mu_hat;
    let m: Vec<f64> = d.design().dot(&alpha).to_vec();
    let direct = classical_aipw(&d, &ps.probs(d.design()), &m, t);
    let scale = 1.0 + direct.abs();
    Some(((generalized - direct).abs() / scale, (classical - direct).abs() / scale))
}

/// Structural measurements on one RCAL + RWL fit.
pub struct WeightedFitCheck {
    /// `|mu - sum_k (n_k/n) nu_k|` relative to `1 + |mu|`, with the target
    /// arm entering as its sample mean.
    pub decomposition_gap: f64,
    /// Distance of `mu` outside the range of observed target outcomes and
    /// fitted copies (0 when inside).
    pub range_excess: f64,
    pub converged: bool,
}

pub fn weighted_fit_check(seed: u64) -> Option<WeightedFitCheck> {
    let (d, t, ps, lambda) = fitted_rcal(seed, 200, 5, 3 + seed as usize % 2, 0.3)?;
    let or = fit_rwl(&d, t, &ps, 0.5 * lambda, Link::Identity, &SolveConfig::default()).unwrap();
    let report = aipw_mu(&d, &or.model, &ps, t, 0.95).unwrap();
    let n = d.n() as f64;
    let counts = d.group_counts();
    let mut recon = group_mean(&d, t).unwrap() * counts[t] as f64 / n;
    for k in (0..d.k()).filter(|&k| k != t) {
        recon += aipw_nu(&d, &or.model, &ps, t, k).unwrap().0 * counts[k] as f64 / n;
    }
    let pred = or.model.predict(d.design());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &ti) in d.treatments().iter().enumerate() {
        let v = if ti == t {
            d.y()[i]
        } else {
            pred[[i, or.model.column_of(ti).unwrap()]]
        };
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Some(WeightedFitCheck {
        decomposition_gap: (report.mu_hat - recon).abs() / (1.0 + report.mu_hat.abs()),
        range_excess: (lo - report.mu_hat).max(report.mu_hat - hi).max(0.0),
        converged: or.solves.iter().all(|s| s.converged),
    })
}

/// Largest `|sum_k gamma_jk|` over sum-to-zero calibrated and likelihood fits.
pub fn sum_to_zero_residual(seed: u64) -> f64 {
    let d = random_dataset(seed, 150, 4, 3, 0.4);
    let t = seed as usize % 3;
    let star = zero_threshold(
        &CalAdapter::new(&d, t, Constraint::SumToZero).unwrap(),
        &SolveConfig::default(),
    )
    .unwrap()
    .0;
    let cal = fit_rcal_ps(&d, t, 0.2 * star, Constraint::SumToZero, &SolveConfig::default()).unwrap();
    let star = zero_threshold(&MlAdapter::new(&d, Constraint::SumToZero).unwrap(), &SolveConfig::default())
        .unwrap()
        .0;
    let ml = fit_rml_ps(&d, 0.2 * star, Constraint::SumToZero, &SolveConfig::default()).unwrap();
    [&cal.model.gamma, &ml.model.gamma]
        .iter()
        .flat_map(|g| g.outer_iter().map(|row| row.sum().abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}
