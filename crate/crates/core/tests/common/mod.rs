//! Reference implementations shared by the integration tests. Everything in
//! this file is written directly from the loss definitions and uses none of
//! the library's fitting code; `checks` runs library fits against it.
#![allow(dead_code)]

pub mod checks;

use mcal::{Dataset, Link};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian covariates, treatments from a random multinomial logit and a
/// linear outcome. Redraws until every level appears at least twice.
pub fn random_dataset(seed: u64, n: usize, p: usize, k: usize, signal: f64) -> Dataset<f64> {
    let mut rng = rng(seed);
    let x = Array2::from_shape_simple_fn((n, p), || rng.sample::<f64, _>(StandardNormal));
    let gamma = Array2::from_shape_simple_fn((p, k), || signal * rng.sample::<f64, _>(StandardNormal));
    let beta = Array1::from_shape_simple_fn(p, || rng.sample::<f64, _>(StandardNormal));
    loop {
        let mut t = Vec::with_capacity(n);
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let eta: Vec<f64> = (0..k).map(|c| x.row(i).dot(&gamma.column(c))).collect();
            let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut ti = k - 1;
            for (c, &wc) in w.iter().enumerate() {
                if u < wc {
                    ti = c;
                    break;
                }
                u -= wc;
            }
            t.push(ti);
            y[i] = ti as f64 + x.row(i).dot(&beta) + rng.sample::<f64, _>(StandardNormal);
        }
        let mut counts = vec![0; k];
        for &ti in &t {
            counts[ti] += 1;
        }
        if counts.iter().all(|&c| c >= 2) {
            return Dataset::new(y, t, x, k).unwrap();
        }
    }
}

/// Same covariates and treatments with a binary outcome.
pub fn binary_outcome(d: &Dataset<f64>, seed: u64) -> Dataset<f64> {
    let mut rng = rng(seed);
    let y = d.y().mapv(|v| if rng.random::<f64>() < 1.0 / (1.0 + (-0.5 * v).exp()) { 1.0 } else { 0.0 });
    d.with_outcome(y).unwrap()
}

pub fn softmax(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn eta_row(d: &Dataset<f64>, gamma: &Array2<f64>, i: usize) -> Vec<f64> {
    let f = d.design();
    (0..gamma.ncols()).map(|c| f.row(i).dot(&gamma.column(c))).collect()
}

/// Calibration loss and its gradient in a full (p+1) x K matrix.
pub fn cal_loss_grad(d: &Dataset<f64>, gamma: &Array2<f64>, t: usize) -> (f64, Array2<f64>) {
    let f = d.design();
    let n = d.n() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(gamma.dim());
    for i in 0..d.n() {
        let eta = eta_row(d, gamma, i);
        let ti = d.treatments()[i];
        for k in 0..gamma.ncols() {
            if k == t {
                continue;
            }
            let diff = eta[k] - eta[t];
            let rt = (ti == t) as u8 as f64;
            let rk = (ti == k) as u8 as f64;
            loss += rt * diff.exp() - rk * diff;
            let dd = rt * diff.exp() - rk;
            for j in 0..f.ncols() {
                grad[[j, k]] += dd * f[[i, j]];
                grad[[j, t]] -= dd * f[[i, j]];
            }
        }
    }
    (loss / n, grad / n)
}

/// Negative multinomial log-likelihood and gradient, full (p+1) x K.
pub fn ml_loss_grad(d: &Dataset<f64>, gamma: &Array2<f64>) -> (f64, Array2<f64>) {
    let f = d.design();
    let n = d.n() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(gamma.dim());
    for i in 0..d.n() {
        let eta = eta_row(d, gamma, i);
        let ti = d.treatments()[i];
        let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + eta.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        loss += lse - eta[ti];
        let pi = softmax(&eta);
        for k in 0..gamma.ncols() {
            let r = (ti == k) as u8 as f64;
            for j in 0..f.ncols() {
                grad[[j, k]] += (pi[k] - r) * f[[i, j]];
            }
        }
    }
    (loss / n, grad / n)
}

/// Weighted GLM loss `E~ sum_c w_ic {Psi(eta_ic) - y_i eta_ic}` and gradient.
pub fn wl_loss_grad(
    f: &Array2<f64>,
    y: &Array1<f64>,
    w: &Array2<f64>,
    alpha: &Array2<f64>,
    link: Link,
) -> (f64, Array2<f64>) {
    let n = f.nrows() as f64;
    let eta = f.dot(alpha);
    let mut loss = 0.0;
    let mut g = Array2::zeros(eta.dim());
    for ((i, c), &e) in eta.indexed_iter() {
        let (cum, mean) = match link {
            Link::Identity => (0.5 * e * e, e),
            Link::Logit => ((1.0 + e.exp()).ln(), 1.0 / (1.0 + (-e).exp())),
        };
        loss += w[[i, c]] * (cum - y[i] * e);
        g[[i, c]] = w[[i, c]] * (mean - y[i]);
    }
    (loss / n, f.t().dot(&g) / n)
}

pub fn group_penalty(coef: &Array2<f64>, lambda: f64) -> f64 {
    lambda
        * coef
            .outer_iter()
            .skip(1)
            .map(|r| r.dot(&r).sqrt())
            .sum::<f64>()
}

fn prox(v: &Array2<f64>, thr: f64) -> Array2<f64> {
    let mut out = v.clone();
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        if j == 0 {
            continue;
        }
        let norm = row.dot(&row).sqrt();
        let scale = if norm <= thr { 0.0 } else { 1.0 - thr / norm };
        row.mapv_inplace(|x| x * scale);
    }
    out
}

/// Accelerated proximal gradient with backtracking and restarts, run until
/// the gradient mapping vanishes or rounding stops further decrease. `value` returns `None` outside the loss domain.
pub fn prox_gradient(
    value: impl Fn(&Array2<f64>) -> Option<f64>,
    grad: impl Fn(&Array2<f64>) -> Array2<f64>,
    init: Array2<f64>,
    lambda: f64,
    max_iter: usize,
) -> Array2<f64> {
    let objective = |b: &Array2<f64>| value(b).map(|v| v + group_penalty(b, lambda));
    let mut x = init.clone();
    let mut y = init;
    let mut tk = 1.0_f64;
    let mut lip = 1.0_f64;
    let mut fx = objective(&x).expect("finite start");
    for _ in 0..max_iter {
        let Some(fy) = value(&y) else {
            y = x.clone();
            tk = 1.0;
            continue;
        };
        let gy = grad(&y);
        let next = loop {
            let cand = prox(&(&y - &(&gy / lip)), lambda / lip);
            let diff = &cand - &y;
            let bound = fy + (&gy * &diff).sum() + 0.5 * lip * diff.mapv(|v| v * v).sum();
            match value(&cand) {
                Some(v) if v <= bound + 1e-14 * (1.0 + v.abs()) => break cand,
                _ => lip *= 2.0,
            }
        };
        let fnext = objective(&next).unwrap();
        // gradient mapping at y, zero exactly at a minimizer
        let mapping = lip * (&next - &y).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if mapping < 1e-10 {
            if fnext < fx {
                x = next;
            }
            break;
        }
        if fnext > fx {
            if tk == 1.0 {
                // a plain proximal step from x no longer decreases the
                // objective: x is optimal to rounding
                break;
            }
            // restart momentum from the last accepted point
            y = x.clone();
            tk = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        y = &next + &((&next - &x) * ((tk - 1.0) / t_next));
        tk = t_next;
        x = next;
        fx = fnext;
        lip *= 0.9;
    }
    x
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Weighted least squares `argmin sum_i w_i (y_i - f_i' b)^2` by the normal equations.
pub fn weighted_least_squares(f: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>) -> Array1<f64> {
    let fm = to_na(f);
    let wf = DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| w[i] * f[[i, j]]);
    let lhs = fm.transpose() * &wf;
    let rhs = wf.transpose() * DVector::from_iterator(y.len(), y.iter().cloned());
    let sol = lhs.cholesky().expect("positive definite normal equations").solve(&rhs);
    Array1::from_iter(sol.iter().cloned())
}

/// Logistic regression of `y` on `f` by iteratively reweighted least squares.
pub fn irls_logistic(f: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let mut beta = Array1::zeros(f.ncols());
    for _ in 0..100 {
        let eta = f.dot(&beta);
        let mu = eta.mapv(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.mapv(|m| m * (1.0 - m));
        let z = &eta + &((y - &mu) / &w);
        let next = weighted_least_squares(f, &z, &w);
        let change = (&next - &beta).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        beta = next;
        if change < 1e-13 {
            break;
        }
    }
    beta
}

/// Newton's method on a smooth loss over the free columns of a (p+1) x K
/// matrix, with the Hessian from central differences of the gradient.
pub fn newton(
    grad: impl Fn(&Array2<f64>) -> Array2<f64>,
    init: Array2<f64>,
    free: &[usize],
) -> Array2<f64> {
    let (p1, _) = init.dim();
    let m = free.len();
    let dim = p1 * m;
    let flat = |g: &Array2<f64>| DVector::from_iterator(dim, free.iter().flat_map(|&c| (0..p1).map(move |j| g[[j, c]])));
    let mut x = init;
    for _ in 0..100 {
        let g = flat(&grad(&x));
        if g.amax() < 1e-14 {
            break;
        }
        let h = 1e-6;
        let mut hess = DMatrix::zeros(dim, dim);
        for (a, &c) in free.iter().enumerate() {
            for j in 0..p1 {
                let mut up = x.clone();
                up[[j, c]] += h;
                let mut down = x.clone();
                down[[j, c]] -= h;
                let col = (flat(&grad(&up)) - flat(&grad(&down))) / (2.0 * h);
                hess.set_column(a * p1 + j, &col);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => panic!("Hessian not positive definite at {x:?}: {hess}"),
        };
        for (a, &c) in free.iter().enumerate() {
            for j in 0..p1 {
                x[[j, c]] -= step[a * p1 + j];
            }
        }
        if step.amax() < 1e-13 {
            break;
        }
    }
    x
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
