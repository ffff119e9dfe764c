//! Damped Newton-type block coordinate descent for group-Lasso penalized
//! multi-response losses.
//!
//! The engine minimizes `L(B) + lambda * sum_{j>=1} ||B[j, :]||_2` over a
//! `(p+1) x m` coefficient matrix `B`, where row 0 multiplies the intercept and
//! is never penalized. Each outer iteration builds a quadratic surrogate of
//! `L` at the current iterate from the adapter's pseudo-gradient and either a
//! constant majorizer bound `b` or the per-observation Hessian plus a damping
//! term, minimizes the penalized surrogate by cyclic block updates with a
//! diagonal bound on each row block, and then accepts the result or backtracks
//! along the segment back to the current iterate so that the penalized
//! objective strictly decreases. The damping grows or shrinks with the ratio
//! of actual to predicted decrease.

use std::cell::{Cell, RefCell};

use ndarray::{Array1, Array2, ArrayView, ArrayView1, ArrayView2, Axis, Dimension, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::Scalar;

/// A smooth multi-response loss expressed through its linear predictors.
///
/// Implementors see `eta = F B` (n x m) rather than `B` itself; the gradient
/// of the loss with respect to `B[j, c]` must equal the sample mean of
/// `G[:, c] * F[:, j]`, where `G` is the pseudo-gradient.
pub trait LossAdapter<S: Scalar> {
    /// Number of response columns `m`.
    fn responses(&self) -> usize;

    /// Design matrix `F`, n x (p+1), with column 0 identically 1.
    fn design(&self) -> ArrayView2<'_, S>;

    fn loss(&self, eta: ArrayView2<'_, S>) -> Result<S>;

    fn pseudo_gradient(&self, eta: ArrayView2<'_, S>) -> Array2<S>;

    /// Scalar `b > 0` dominating the (possibly Fisher-scored) per-observation
    /// curvature at `eta`.
    fn majorizer(&self, eta: ArrayView2<'_, S>) -> S;

    /// Diagonal of the per-observation curvature in the linear predictors,
    /// n x m, for a Newton-type surrogate damped by multiples of `majorizer`.
    /// `None` uses the constant `majorizer` bound instead.
    fn curvature(&self, _eta: ArrayView2<'_, S>) -> Option<Array2<S>> {
        None
    }

    /// Off-diagonal entries `(c, l, H_cl)`, `c < l`, completing `curvature`
    /// to the per-observation Hessian.
    fn cross_curvature(&self, _eta: ArrayView2<'_, S>) -> Vec<(usize, usize, Array1<S>)> {
        Vec::new()
    }

    /// Called on every accepted iterate; used to re-impose identification
    /// constraints that leave the loss unchanged.
    fn normalize(&self, _coef: &mut Array2<S>) {}
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolveConfig<S> {
    pub lambda: S,
    pub max_outer: usize,
    /// Cap on block sweeps per surrogate minimization.
    pub max_inner: usize,
    pub tol_obj: S,
    pub tol_coef: S,
    /// Convergence threshold on coefficient change within surrogate sweeps.
    pub tol_inner: S,
    pub linesearch_shrink: S,
    pub linesearch_max: usize,
}

impl<S: Scalar> SolveConfig<S> {
    pub fn with_lambda(lambda: S) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.lambda >= S::zero()) {
            return bad("lambda must be >= 0");
        }
        if !(self.tol_obj > S::zero() && self.tol_coef > S::zero() && self.tol_inner > S::zero()) {
            return bad("tolerances must be positive");
        }
        if !(self.linesearch_shrink > S::zero() && self.linesearch_shrink < S::one()) {
            return bad("linesearch_shrink must lie in (0, 1)");
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return bad("iteration caps must be positive");
        }
        Ok(())
    }
}

impl<S: Scalar> Default for SolveConfig<S> {
    fn default() -> Self {
        Self {
            lambda: S::zero(),
            max_outer: 200,
            max_inner: 1000,
            tol_obj: S::lit(1e-8),
            tol_coef: S::lit(1e-7),
            tol_inner: S::lit(1e-10),
            linesearch_shrink: S::lit(0.5),
            linesearch_max: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveResult<S> {
    pub coef: Array2<S>,
    /// Final penalized objective.
    pub objective: S,
    pub outer_iters: usize,
    pub converged: bool,
    /// Penalized rows `j >= 1` with nonzero norm.
    pub active_rows: Vec<usize>,
    /// Penalized objective after each accepted iterate, starting at the initial value.
    pub trace: Vec<S>,
    /// Largest undamped block curvature of the last surrogate.
    pub majorizer: S,
    pub lambda: S,
    pub message: Option<String>,
}

/// Group soft-threshold: `(1/denom) (1 - thr/||u||)_+ u`, in place.
fn group_shrink<S: Scalar>(u: &mut [S], denom: S, thr: S) {
    let norm = u.iter().map(|&v| v * v).sum::<S>().sqrt();
    let scale = if thr <= S::zero() {
        S::one() / denom
    } else if norm <= thr {
        S::zero()
    } else {
        (S::one() - thr / norm) / denom
    };
    for v in u.iter_mut() {
        *v *= scale;
    }
}

/// Minimizer of `sum_c (d_c b_c^2 / 2 - v_c b_c) + thr ||b||_2`, written over
/// `v`. Columns with vanishing curvature are floored at a tiny fraction of
/// the largest one.
fn weighted_group_shrink<S: Scalar>(v: &mut [S], d: ArrayView1<'_, S>, thr: S) {
    let dmax = d.iter().fold(S::zero(), |a, &x| a.max(x));
    let floor = dmax * S::lit(1e-12);
    if thr <= S::zero() {
        for (x, &dc) in v.iter_mut().zip(d.iter()) {
            *x /= dc.max(floor);
        }
        return;
    }
    let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if norm <= thr {
        v.iter_mut().for_each(|x| *x = S::zero());
        return;
    }
    let dmin = d.iter().fold(S::infinity(), |a, &x| a.min(x));
    if dmax - dmin <= dmax * S::epsilon() {
        group_shrink(v, dmax, thr);
        return;
    }
    // r = ||b|| solves sum_c v_c^2 / (d_c r + thr)^2 = 1; the left side is
    // convex and decreasing, so Newton from the lower bracket is monotone
    let mut r = (norm - thr) / dmax;
    for _ in 0..100 {
        let (mut phi, mut dphi) = (-S::one(), S::zero());
        for (&x, &dc) in v.iter().zip(d.iter()) {
            let den = dc.max(floor) * r + thr;
            phi += x * x / (den * den);
            dphi -= S::lit(2.0) * x * x * dc.max(floor) / (den * den * den);
        }
        if dphi >= S::zero() {
            break;
        }
        let step = phi / dphi;
        r -= step;
        if step.abs() <= S::lit(4.0) * S::epsilon() * r {
            break;
        }
    }
    for (x, &dc) in v.iter_mut().zip(d.iter()) {
        *x = *x * r / (dc.max(floor) * r + thr);
    }
}

/// Closed-form minimizer of `1/2 E~||z - f_j beta||^2 + (lambda/b) ||beta||_2`
/// for a single row block given the partial residual `z` (n x m).
pub fn block_update<S: Scalar>(
    z_partial: ArrayView2<'_, S>,
    fj: ArrayView1<'_, S>,
    lambda_over_b: S,
) -> Array1<S> {
    let n = S::from_count(fj.len());
    let denom = fj.dot(&fj) / n;
    let mut u: Vec<S> = z_partial.t().dot(&fj).iter().map(|&v| v / n).collect();
    group_shrink(&mut u, denom, lambda_over_b);
    Array1::from(u)
}

pub fn penalty<S: Scalar>(coef: ArrayView2<'_, S>, lambda: S) -> S {
    if lambda == S::zero() {
        return S::zero();
    }
    let sum = coef
        .outer_iter()
        .skip(1)
        .map(|row| row.dot(&row).sqrt())
        .sum::<S>();
    lambda * sum
}

fn active_rows<S: Scalar>(coef: ArrayView2<'_, S>) -> Vec<usize> {
    coef.outer_iter()
        .enumerate()
        .skip(1)
        .filter(|(_, row)| row.iter().any(|&v| v != S::zero()))
        .map(|(j, _)| j)
        .collect()
}

fn max_abs_diff<S: Scalar, D: Dimension>(a: ArrayView<'_, S, D>, b: ArrayView<'_, S, D>) -> S {
    a.iter()
        .zip(b.iter())
        .fold(S::zero(), |acc, (&x, &y)| acc.max((x - y).abs()))
}


/// Largest `(p+1)^2 m` for which per-column Gram matrices are formed.
const GRAM_LIMIT: usize = 50_000_000;
const DAMPING_START: f64 = 1e-2;
const INNER_FORCING: f64 = 1e-3;
const DAMPING_MIN: f64 = 1e-8;
const DAMPING_MAX: f64 = 1e8;
const GRAM_REUSE: f64 = 0.05;
const MAX_RESETS: usize = 5;
const MAX_PINNED: usize = 5;

type BlockGram<S> = (Array1<S>, Array2<S>);

/// Precomputed design quantities reused across solves on the same adapter.
///
/// When `(p+1)^2 m` is moderate the surrogate is minimized in coefficient
/// space through weighted Gram matrices, cached while their weights are
/// unchanged; otherwise block updates work on n-vectors directly.
pub struct Solver<'a, S: Scalar, A: LossAdapter<S>> {
    adapter: &'a A,
    /// Transposed design, (p+1) x n, rows contiguous.
    ft: Array2<S>,
    /// Elementwise square of `ft`.
    ft_sq: Array2<S>,
    n: S,
    /// `F'F / n` in the covariance form.
    gram0: Option<Array2<S>>,
    /// Per-block weighted sums and Gram matrices, when reusable.
    cache: RefCell<Vec<Option<BlockGram<S>>>>,
    /// Damping left by the previous solve, the start for the next one.
    damping: Cell<S>,
}

enum Form<S> {
    /// Working gradient `G + H (F delta)`, m x n, and the damped curvature
    /// of each Hessian entry.
    Residual { q: Array2<S>, w: Vec<Array1<S>> },
    /// Coefficient gradient `F'G/n + sum_l Gram_cl delta_l`, m x (p+1), and
    /// the damped Gram matrix of each Hessian entry.
    Covariance { u: Array2<S>, grams: Vec<Array2<S>> },
}

/// Quadratic model `G'x/n + 1/2 sum_i x_i' (H_i + damp I) x_i / n` in the
/// predictor change `x = F delta`, with `H_i` given by its entries `(c, l)`,
/// `c <= l`.
struct Surrogate<S> {
    g: Array2<S>,
    pairs: Vec<(usize, usize)>,
    /// Undamped entries over the n rows.
    w: Vec<Array1<S>>,
    damp: S,
    /// Largest undamped diagonal block curvature.
    scale: S,
    /// Diagonal bounds `sum_l |E~{H_cl f_j^2}|` on each row block, damping
    /// included, (p+1) x m.
    d: Array2<S>,
    form: Form<S>,
}

impl<S: Scalar> Surrogate<S> {
    /// Model decrease predicted for the change `x = F d` in the predictors.
    fn predicted_decrease(&self, x: ArrayView2<'_, S>, pen_change: S) -> S {
        let half = S::lit(0.5);
        let mut total = (&self.g * &x).sum() + half * self.damp * x.iter().map(|&v| v * v).sum::<S>();
        for (&(c, l), w) in self.pairs.iter().zip(&self.w) {
            let factor = if c == l { half } else { S::one() };
            let s = Zip::from(w)
                .and(x.column(c))
                .and(x.column(l))
                .fold(S::zero(), |a, &w, &xc, &xl| a + w * xc * xl);
            total += factor * s;
        }
        -(total / S::from_count(x.nrows()) + pen_change)
    }
}

impl<'a, S: Scalar, A: LossAdapter<S>> Solver<'a, S, A> {
    pub fn new(adapter: &'a A) -> Self {
        let f = adapter.design();
        let ft = f.t().as_standard_layout().into_owned();
        let ft_sq = ft.mapv(|v| v * v);
        let n = S::from_count(f.nrows());
        let p1 = f.ncols();
        let m = adapter.responses();
        let gram0 = (p1 * p1 * m <= GRAM_LIMIT).then(|| ft.dot(&f) / n);
        Self {
            adapter,
            ft,
            ft_sq,
            n,
            gram0,
            cache: RefCell::new(Vec::new()),
            damping: Cell::new(S::lit(DAMPING_START)),
        }
    }

    pub fn adapter(&self) -> &A {
        self.adapter
    }

    fn predictor(&self, coef: &Array2<S>) -> Array2<S> {
        self.adapter.design().dot(coef)
    }

    fn objective(&self, eta: ArrayView2<'_, S>, coef: ArrayView2<'_, S>, lambda: S) -> Result<S> {
        let value = self.adapter.loss(eta)? + penalty(coef, lambda);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFiniteLoss)
        }
    }

    /// `F' diag(w) F / n`. While the weights stay within a small relative
    /// distance of the cached ones, `w` is replaced by those and their matrix
    /// is reused.
    fn weighted_gram(&self, slot: usize, w: &mut Array1<S>, gram0: &Array2<S>) -> Array2<S> {
        let first = w[0];
        if w.iter().all(|&v| v == first) {
            return gram0 * first;
        }
        let mut cache = self.cache.borrow_mut();
        if cache.len() <= slot {
            cache.resize(slot + 1, None);
        }
        if let Some((key, gram)) = &cache[slot] {
            let size = key.iter().fold(S::zero(), |a, &v| a.max(v.abs()));
            if max_abs_diff(key.view(), w.view()) <= S::lit(GRAM_REUSE) * size {
                w.assign(key);
                return gram.clone();
            }
        }
        let f = self.adapter.design();
        let rows: Vec<usize> = (0..w.len()).filter(|&i| w[i] != S::zero()).collect();
        let sub = f.select(Axis(0), &rows);
        let mut scaled = sub.clone();
        for (mut row, &i) in scaled.outer_iter_mut().zip(&rows) {
            row *= w[i];
        }
        let gram = sub.t().dot(&scaled) / self.n;
        cache[slot] = Some((w.clone(), gram.clone()));
        gram
    }

    fn surrogate(&self, eta: ArrayView2<'_, S>, mu: S) -> Result<Surrogate<S>> {
        let g = self.adapter.pseudo_gradient(eta);
        let (m, nrows) = (g.ncols(), g.nrows());
        let mut pairs: Vec<(usize, usize)> = (0..m).map(|c| (c, c)).collect();
        let (mut w, damp): (Vec<Array1<S>>, S) = match self.adapter.curvature(eta) {
            Some(diag) => (
                diag.columns().into_iter().map(|c| c.to_owned()).collect(),
                mu * self.adapter.majorizer(eta),
            ),
            None => {
                let b = self.adapter.majorizer(eta);
                (vec![Array1::from_elem(nrows, b); m], S::zero())
            }
        };
        for (c, l, h) in self.adapter.cross_curvature(eta) {
            pairs.push((c, l));
            w.push(h);
        }
        if w.iter().flatten().any(|v| !v.is_finite())
            || w[..m].iter().flatten().any(|&v| v < S::zero())
            || !damp.is_finite()
        {
            return Err(Error::NonFiniteLoss);
        }
        let p1 = self.ft.nrows();
        let mut d = Array2::zeros((p1, m));
        let mut scale = S::zero();
        let mut add_block = |d: &mut Array2<S>, c: usize, l: usize, diag: ArrayView1<'_, S>| {
            for (j, &v) in diag.iter().enumerate() {
                if c == l {
                    d[[j, c]] += v;
                    scale = scale.max(v);
                } else {
                    d[[j, c]] += v.abs();
                    d[[j, l]] += v.abs();
                }
            }
        };
        let form = match &self.gram0 {
            Some(gram0) => {
                let mut grams = Vec::with_capacity(pairs.len());
                for (slot, (&(c, l), wp)) in pairs.iter().zip(w.iter_mut()).enumerate() {
                    let mut gram = self.weighted_gram(slot, wp, gram0);
                    add_block(&mut d, c, l, gram.diag());
                    if c == l && damp > S::zero() {
                        gram.scaled_add(damp, gram0);
                        for j in 0..p1 {
                            d[[j, c]] += damp * gram0[[j, j]];
                        }
                    }
                    grams.push(gram);
                }
                let u = (self.ft.dot(&g) / self.n).t().as_standard_layout().into_owned();
                Form::Covariance { u, grams }
            }
            None => {
                let mut wd = Vec::with_capacity(pairs.len());
                for (&(c, l), wp) in pairs.iter().zip(&w) {
                    let diag = self.ft_sq.dot(wp) / self.n;
                    add_block(&mut d, c, l, diag.view());
                    if c == l && damp > S::zero() {
                        let diag0 = self.ft_sq.sum_axis(Axis(1)) / self.n;
                        d.column_mut(c).scaled_add(damp, &diag0);
                        wd.push(wp + damp);
                    } else {
                        wd.push(wp.clone());
                    }
                }
                let q = g.t().as_standard_layout().into_owned();
                Form::Residual { q, w: wd }
            }
        };
        Ok(Surrogate {
            g,
            pairs,
            w,
            damp,
            scale,
            d,
            form,
        })
    }

    /// One cyclic pass over `rows`; returns the largest coefficient change.
    fn sweep(
        &self,
        rows: &[usize],
        coef: &mut Array2<S>,
        sur: &mut Surrogate<S>,
        lambda: S,
        scratch: &mut [S],
        delta: &mut [S],
    ) -> S {
        let m = coef.ncols();
        let mut biggest = S::zero();
        for &j in rows {
            let dj = sur.d.row(j);
            if dj.iter().all(|&v| v <= S::zero()) {
                continue;
            }
            let fj = self.ft.row(j);
            for c in 0..m {
                let grad = match &sur.form {
                    Form::Residual { q, .. } => q.row(c).dot(&fj) / self.n,
                    Form::Covariance { u, .. } => u[[c, j]],
                };
                scratch[c] = dj[c] * coef[[j, c]] - grad;
            }
            weighted_group_shrink(scratch, dj, if j == 0 { S::zero() } else { lambda });
            let mut moved = false;
            for c in 0..m {
                delta[c] = scratch[c] - coef[[j, c]];
                if delta[c] != S::zero() {
                    moved = true;
                    coef[[j, c]] = scratch[c];
                    biggest = biggest.max(delta[c].abs());
                }
            }
            if !moved {
                continue;
            }
            for (p, &(c, l)) in sur.pairs.iter().enumerate() {
                match &mut sur.form {
                    Form::Residual { q, w } => {
                        for (a, b) in [(c, l), (l, c)] {
                            if delta[b] != S::zero() {
                                let db = delta[b];
                                Zip::from(q.row_mut(a))
                                    .and(&w[p])
                                    .and(&fj)
                                    .for_each(|q, &w, &f| *q += db * w * f);
                            }
                            if c == l {
                                break;
                            }
                        }
                    }
                    Form::Covariance { u, grams } => {
                        for (a, b) in [(c, l), (l, c)] {
                            if delta[b] != S::zero() {
                                u.row_mut(a).scaled_add(delta[b], &grams[p].row(j));
                            }
                            if c == l {
                                break;
                            }
                        }
                    }
                }
            }
        }
        biggest
    }

    /// Minimizes the penalized surrogate starting from `coef`. Sweeps stop
    /// once the largest change falls below `tol_inner` or a small fraction of
    /// the distance already moved, so early outer iterations are inexact.
    fn minimize_surrogate(&self, coef: &Array2<S>, sur: &mut Surrogate<S>, cfg: &SolveConfig<S>, tol: S) -> Array2<S> {
        let p1 = coef.nrows();
        let mut next = coef.clone();
        let all: Vec<usize> = (0..p1).collect();
        let mut scratch = vec![S::zero(); coef.ncols()];
        let mut delta = vec![S::zero(); coef.ncols()];
        let mut sweeps = 0;
        let forcing = S::lit(INNER_FORCING);
        let done =
            |change: S, next: &Array2<S>| change < tol.max(forcing * max_abs_diff(next.view(), coef.view()));
        loop {
            let change = self.sweep(&all, &mut next, sur, cfg.lambda, &mut scratch, &mut delta);
            sweeps += 1;
            if done(change, &next) || sweeps >= cfg.max_inner {
                break;
            }
            let mut active = vec![0];
            active.extend(active_rows(next.view()));
            loop {
                let change = self.sweep(&active, &mut next, sur, cfg.lambda, &mut scratch, &mut delta);
                sweeps += 1;
                if done(change, &next) || sweeps >= cfg.max_inner {
                    break;
                }
            }
            if sweeps >= cfg.max_inner {
                break;
            }
        }
        next
    }

    pub fn solve(&self, init: &Array2<S>, cfg: &SolveConfig<S>) -> Result<SolveResult<S>> {
        cfg.validate()?;
        let f = self.adapter.design();
        let m = self.adapter.responses();
        if init.nrows() != f.ncols() || init.ncols() != m {
            return Err(Error::InvalidArgument(format!(
                "initial coefficients are {}x{}, expected {}x{}",
                init.nrows(),
                init.ncols(),
                f.ncols(),
                m
            )));
        }
        let lambda = cfg.lambda;
        let mut coef = init.clone();
        self.adapter.normalize(&mut coef);
        let mut eta = self.predictor(&coef);
        let mut obj = self.objective(eta.view(), coef.view(), lambda)?;
        let mut trace = vec![obj];
        let mut converged = false;
        let mut message = None;
        let mut b = S::one();
        let mut mu = self.damping.get();
        let mut iters = 0;
        let mut resets = 0;
        let mut pinned = 0;
        let mut inner_tol = cfg.tol_inner;

        while iters < cfg.max_outer {
            iters += 1;
            let mut sur = self.surrogate(eta.view(), mu)?;
            b = sur.scale;
            let half = self.minimize_surrogate(&coef, &mut sur, cfg, inner_tol);
            let step = max_abs_diff(half.view(), coef.view());
            let eta_half = self.predictor(&half);
            let obj_half = self.adapter.loss(eta_half.view()).map(|l| l + penalty(half.view(), lambda));
            if let Err(Error::Separation { row, magnitude }) = obj_half {
                pinned += 1;
                if pinned == MAX_PINNED {
                    // the minimizer lies beyond the representable predictors
                    message = Some(format!(
                        "separation: steps keep crossing the predictor limit (|eta| = {magnitude:.1} at row {row})"
                    ));
                    break;
                }
            } else {
                pinned = 0;
            }
            if step < cfg.tol_coef {
                // surrogate fixed point
                if let Ok(v) = obj_half {
                    if v.is_finite() && v <= obj {
                        coef = half;
                        self.adapter.normalize(&mut coef);
                        eta = self.predictor(&coef);
                        obj = self.objective(eta.view(), coef.view(), lambda)?;
                        trace.push(obj);
                    }
                }
                if self.stationary(&coef, lambda, b, cfg) {
                    converged = true;
                    break;
                }
                if resets == MAX_RESETS {
                    message = Some("iterates stalled short of the KKT tolerance".into());
                    break;
                }
                // heavy damping or a loose inner solve stalls the iterates
                resets += 1;
                mu = S::lit(DAMPING_MIN);
                inner_tol /= S::lit(100.0);
                continue;
            }

            let pred = match obj_half {
                Ok(_) => {
                    let pen_change = penalty(half.view(), lambda) - penalty(coef.view(), lambda);
                    sur.predicted_decrease((&eta_half - &eta).view(), pen_change)
                }
                Err(_) => S::zero(),
            };
            // below rounding level the objective cannot confirm a decrease,
            // so the surrogate's prediction is trusted instead
            let noise = S::lit(16.0) * S::epsilon() * (S::one() + obj.abs());
            let accepted = match obj_half {
                Ok(v) if v.is_finite() && (v < obj || (pred > S::zero() && pred < noise && v <= obj + noise)) => {
                    let rho = if pred > S::zero() { (obj - v) / pred } else { S::one() };
                    if rho > S::lit(0.75) {
                        mu = (mu / S::lit(4.0)).max(S::lit(DAMPING_MIN));
                    } else if rho < S::lit(0.25) {
                        mu = (mu * S::lit(4.0)).min(S::lit(DAMPING_MAX));
                    }
                    Some((half, eta_half, v))
                }
                _ => {
                    mu = (mu * S::lit(8.0)).min(S::lit(DAMPING_MAX));
                    self.backtrack(&coef, &eta, &half, &eta_half, obj, cfg)?
                }
            };
            let Some((mut new_coef, mut new_eta, mut new_obj)) = accepted else {
                if sur.damp > S::zero() && mu < S::lit(DAMPING_MAX) {
                    continue;
                }
                message = Some(format!(
                    "line search failed to decrease the objective after {} halvings (step {:e})",
                    cfg.linesearch_max,
                    step.as_f64()
                ));
                break;
            };
            if self.renormalize(&mut new_coef) {
                new_eta = self.predictor(&new_coef);
                new_obj = self.objective(new_eta.view(), new_coef.view(), lambda)?;
            }
            let change = max_abs_diff(new_coef.view(), coef.view());
            let rel = (obj - new_obj).abs() / (S::one() + obj.abs());
            coef = new_coef;
            eta = new_eta;
            obj = new_obj;
            trace.push(obj);
            if rel < cfg.tol_obj && change < cfg.tol_coef {
                if self.stationary(&coef, lambda, b, cfg) {
                    converged = true;
                    break;
                }
                if resets == MAX_RESETS {
                    message = Some("iterates stalled short of the KKT tolerance".into());
                    break;
                }
                resets += 1;
                mu = S::lit(DAMPING_MIN);
                inner_tol /= S::lit(100.0);
            }
        }
        if !converged && message.is_none() {
            message = Some(format!("reached max_outer = {}", cfg.max_outer));
        }
        self.damping.set(mu.max(S::lit(DAMPING_START * DAMPING_START)));
        Ok(SolveResult {
            active_rows: active_rows(coef.view()),
            coef,
            objective: obj,
            outer_iters: iters,
            converged,
            trace,
            majorizer: b,
            lambda,
            message,
        })
    }

    /// KKT check at the tolerance reported alongside the fit.
    fn stationary(&self, coef: &Array2<S>, lambda: S, b: S, cfg: &SolveConfig<S>) -> bool {
        kkt_at(self.adapter, coef, lambda).max_violation <= S::lit(100.0) * cfg.tol_coef * b
    }

    fn renormalize(&self, coef: &mut Array2<S>) -> bool {
        let before = coef.clone();
        self.adapter.normalize(coef);
        before != *coef
    }

    #[allow(clippy::type_complexity)]
    fn backtrack(
        &self,
        coef: &Array2<S>,
        eta: &Array2<S>,
        half: &Array2<S>,
        eta_half: &Array2<S>,
        obj: S,
        cfg: &SolveConfig<S>,
    ) -> Result<Option<(Array2<S>, Array2<S>, S)>> {
        let mut c = cfg.linesearch_shrink;
        for _ in 0..cfg.linesearch_max {
            let w = S::one() - c;
            let trial = coef * w + half * c;
            let trial_eta = eta * w + eta_half * c;
            if let Ok(loss) = self.adapter.loss(trial_eta.view()) {
                let v = loss + penalty(trial.view(), cfg.lambda);
                if v.is_finite() && v < obj {
                    return Ok(Some((trial, trial_eta, v)));
                }
            }
            c *= cfg.linesearch_shrink;
        }
        Ok(None)
    }
}

/// Runs the engine from `init`.
pub fn solve<S: Scalar, A: LossAdapter<S>>(
    adapter: &A,
    init: &Array2<S>,
    cfg: &SolveConfig<S>,
) -> Result<SolveResult<S>> {
    Solver::new(adapter).solve(init, cfg)
}

/// Mean of `G[:, c] * F[:, j]` for every row `j` and column `c`, i.e. the
/// loss gradient with respect to the coefficients.
pub fn coef_gradient<S: Scalar, A: LossAdapter<S>>(adapter: &A, coef: &Array2<S>) -> Array2<S> {
    let f = adapter.design();
    let eta = f.dot(coef);
    let g = adapter.pseudo_gradient(eta.view());
    let n = S::from_count(f.nrows());
    f.t().dot(&g).mapv(|v| v / n)
}

/// Stationarity report for a candidate solution.
#[derive(Debug, Clone, Serialize)]
pub struct KktReport<S> {
    /// `||E~{G f_j}||_2` for every row, intercept first.
    pub gradient_norms: Vec<S>,
    /// Per-row violation: intercept norm, `| norm - lambda |` on active rows,
    /// `(norm - lambda)_+` on zero rows.
    pub violations: Vec<S>,
    pub max_violation: S,
}

pub fn check_kkt<S: Scalar, A: LossAdapter<S>>(adapter: &A, result: &SolveResult<S>, lambda: S) -> KktReport<S> {
    kkt_at(adapter, &result.coef, lambda)
}

pub fn kkt_at<S: Scalar, A: LossAdapter<S>>(adapter: &A, coef: &Array2<S>, lambda: S) -> KktReport<S> {
    let grad = coef_gradient(adapter, coef);
    let mut gradient_norms = Vec::with_capacity(coef.nrows());
    let mut violations = Vec::with_capacity(coef.nrows());
    for (j, (grow, crow)) in grad.outer_iter().zip(coef.outer_iter()).enumerate() {
        let norm = grow.dot(&grow).sqrt();
        gradient_norms.push(norm);
        let v = if j == 0 {
            norm
        } else if crow.iter().any(|&c| c != S::zero()) {
            // stationarity on an active row forces grad = -lambda * B_j/||B_j||
            let bnorm = crow.dot(&crow).sqrt();
            grow.iter()
                .zip(crow.iter())
                .map(|(&g, &c)| {
                    let r = g + lambda * c / bnorm;
                    r * r
                })
                .sum::<S>()
                .sqrt()
                .max((norm - lambda).abs())
        } else {
            (norm - lambda).max(S::zero())
        };
        violations.push(v);
    }
    let max_violation = violations.iter().fold(S::zero(), |a, &v| a.max(v));
    KktReport {
        gradient_norms,
        violations,
        max_violation,
    }
}

/// Smallest penalty at which every penalized row is zero, together with the
/// intercept-only fit it is computed from.
pub fn zero_threshold<S: Scalar, A: LossAdapter<S>>(adapter: &A, cfg: &SolveConfig<S>) -> Result<(S, SolveResult<S>)> {
    let p1 = adapter.design().ncols();
    let init = Array2::zeros((p1, adapter.responses()));
    let big = SolveConfig {
        lambda: S::max_value(),
        ..*cfg
    };
    let mut fit = Solver::new(adapter).solve(&init, &big)?;
    fit.lambda = S::zero();
    fit.objective = adapter.loss(adapter.design().dot(&fit.coef).view())?;
    let grad = coef_gradient(adapter, &fit.coef);
    let lambda_star = grad
        .outer_iter()
        .skip(1)
        .map(|row| row.dot(&row).sqrt())
        .fold(S::zero(), |a, v| a.max(v));
    Ok((lambda_star, fit))
}

/// Euclidean norm of every coefficient row, intercept included.
pub fn row_norms<S: Scalar>(coef: ArrayView2<'_, S>) -> Array1<S> {
    coef.map_axis(Axis(1), |row| row.dot(&row).sqrt())
}
