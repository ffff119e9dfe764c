//! Penalty grids, seeded 5-fold cross-validation and lambda selection.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{standardize, Dataset};
use crate::engine::{zero_threshold, LossAdapter, SolveConfig, Solver};
use crate::error::{Error, Result};
use crate::or::{Link, WeightedGlmAdapter};
use crate::ps::{CalAdapter, Constraint, MlAdapter};
use crate::Scalar;

pub const FOLDS: usize = 5;
pub const GRID_LEN: usize = 21;
const REFOLD_ATTEMPTS: usize = 10;

/// `lambda_star * 0.01^(j/20)` for `j = 0..=20`.
pub fn lambda_grid<S: Scalar>(lambda_star: S) -> Vec<S> {
    (0..GRID_LEN)
        .map(|j| lambda_star * S::lit(0.01_f64.powf(j as f64 / 20.0)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Min,
    OneSe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsLoss {
    /// Calibration loss for target `t`, one-to-zero on column `t`.
    Cal { target: usize },
    /// Likelihood loss, one-to-zero on column `reference`.
    Ml { reference: usize },
}

/// Smallest penalty giving zero penalized rows for the one-to-zero
/// propensity fits, from the empirical class frequencies.
pub fn lambda_star_ps<S: Scalar>(d: &Dataset<S>, loss: PsLoss) -> Result<S> {
    let k = d.k();
    let n = S::from_count(d.n());
    let freq: Vec<S> = d.group_counts().into_iter().map(|c| S::from_count(c) / n).collect();
    let skip = match loss {
        PsLoss::Cal { target } => target,
        PsLoss::Ml { reference } => reference,
    };
    if skip >= k {
        return Err(Error::InvalidArgument(format!("treatment {skip} outside 0..{k}")));
    }
    let f = d.design();
    let mut best = S::zero();
    for j in 1..f.ncols() {
        let col = f.column(j);
        let mut sq = S::zero();
        for kk in (0..k).filter(|&kk| kk != skip) {
            let mut acc = S::zero();
            for (i, &ti) in d.treatments().iter().enumerate() {
                let rk = if ti == kk { S::one() } else { S::zero() };
                let g = match loss {
                    PsLoss::Cal { target } => {
                        let rt = if ti == target { S::one() } else { S::zero() };
                        rt * freq[kk] / freq[target] - rk
                    }
                    PsLoss::Ml { .. } => freq[kk] - rk,
                };
                acc += g * col[i];
            }
            let m = acc / n;
            sq += m * m;
        }
        best = best.max(sq.sqrt());
    }
    Ok(best)
}

/// Seeded fold labels in `0..FOLDS`. Fold sizes are `floor(n/5)` with the
/// remainder spread over the first folds. Every fold must hold every
/// treatment level; after 10 failed draws, a treatment-stratified split is used.
pub fn make_folds(codes: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = codes.len();
    if n < 2 * FOLDS {
        return Err(Error::Folding(format!("need at least {} rows, got {n}", 2 * FOLDS)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..REFOLD_ATTEMPTS {
        order.shuffle(&mut rng);
        let folds = deal(&order, n);
        if covers_all(codes, &folds, k) {
            return Ok(folds);
        }
    }
    let mut stratified = Vec::with_capacity(n);
    for level in 0..k {
        let mut rows: Vec<usize> = (0..n).filter(|&i| codes[i] == level).collect();
        rows.shuffle(&mut rng);
        stratified.extend(rows);
    }
    let mut folds = vec![0; n];
    for (pos, &i) in stratified.iter().enumerate() {
        folds[i] = pos % FOLDS;
    }
    if covers_all(codes, &folds, k) {
        Ok(folds)
    } else {
        Err(Error::Folding(
            "some treatment level has fewer rows than folds".into(),
        ))
    }
}

fn deal(order: &[usize], n: usize) -> Vec<usize> {
    let base = n / FOLDS;
    let extra = n % FOLDS;
    let mut folds = vec![0; n];
    let mut pos = 0;
    for s in 0..FOLDS {
        let size = base + usize::from(s < extra);
        for &i in &order[pos..pos + size] {
            folds[i] = s;
        }
        pos += size;
    }
    folds
}

fn covers_all(codes: &[usize], folds: &[usize], k: usize) -> bool {
    let mut seen = vec![[false; FOLDS]; k];
    for (&t, &s) in codes.iter().zip(folds) {
        seen[t][s] = true;
    }
    seen.iter().all(|row| row.iter().all(|&b| b))
}

/// A penalized fit that can be cross-validated on row subsets.
pub trait CvProblem<S: Scalar>: Sync {
    fn data(&self) -> &Dataset<S>;

    /// Zero-solution threshold on the full data.
    fn lambda_star(&self) -> Result<S>;

    /// Fits on `train` along `grid` (descending, warm-started) and returns
    /// the unpenalized loss on `test` at each grid point.
    fn held_out_losses(&self, train: &[usize], test: &[usize], grid: &[S]) -> Result<Vec<S>>;
}

/// Cross-validation summary over the standard grid.
#[derive(Debug, Clone, Serialize)]
pub struct CvPath<S> {
    pub grid: Vec<S>,
    /// FOLDS x grid validation losses; non-finite where a fit failed.
    pub fold_losses: Array2<S>,
    pub cv_mean: Array1<S>,
    pub cv_se: Array1<S>,
    pub index_min: usize,
    pub index_1se: usize,
    pub lambda_min: S,
    pub lambda_1se: S,
    pub folds: Vec<usize>,
}

impl<S: Scalar> CvPath<S> {
    pub fn selected(&self, rule: Selection) -> S {
        match rule {
            Selection::Min => self.lambda_min,
            Selection::OneSe => self.lambda_1se,
        }
    }

    pub fn selected_index(&self, rule: Selection) -> usize {
        match rule {
            Selection::Min => self.index_min,
            Selection::OneSe => self.index_1se,
        }
    }
}

/// Summarizes fold losses into the CV curve and the two selection rules.
pub fn summarize<S: Scalar>(grid: Vec<S>, fold_losses: Array2<S>, folds: Vec<usize>) -> Result<CvPath<S>> {
    let g = grid.len();
    if fold_losses.dim() != (FOLDS, g) || g == 0 {
        return Err(Error::InvalidArgument("fold loss matrix has the wrong shape".into()));
    }
    let nf = S::from_count(FOLDS);
    let mut cv_mean = Array1::zeros(g);
    let mut cv_se = Array1::zeros(g);
    for j in 0..g {
        let col = fold_losses.column(j);
        if col.iter().all(|v| v.is_finite()) {
            let mean = col.sum() / nf;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / (nf - S::one());
            cv_mean[j] = mean;
            cv_se[j] = (var / nf).sqrt();
        } else {
            cv_mean[j] = S::infinity();
            cv_se[j] = S::infinity();
        }
    }
    let mut index_min = 0;
    for j in 1..g {
        if cv_mean[j] < cv_mean[index_min] {
            index_min = j;
        }
    }
    if !cv_mean[index_min].is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let bound = cv_mean[index_min] + cv_se[index_min];
    let index_1se = (0..=index_min).find(|&j| cv_mean[j] <= bound).unwrap_or(index_min);
    Ok(CvPath {
        lambda_min: grid[index_min],
        lambda_1se: grid[index_1se],
        grid,
        fold_losses,
        cv_mean,
        cv_se,
        index_min,
        index_1se,
        folds,
    })
}

/// 5-fold cross-validation of `problem` over the grid anchored at its
/// full-data threshold. Deterministic for a given seed and thread count.
pub fn cv5<S: Scalar, P: CvProblem<S>>(problem: &P, seed: u64) -> Result<CvPath<S>> {
    let d = problem.data();
    let folds = make_folds(d.treatments(), d.k(), seed)?;
    let grid = lambda_grid(problem.lambda_star()?);
    let per_fold: Vec<Result<Vec<S>>> = (0..FOLDS)
        .into_par_iter()
        .map(|s| {
            let train: Vec<usize> = (0..d.n()).filter(|&i| folds[i] != s).collect();
            let test: Vec<usize> = (0..d.n()).filter(|&i| folds[i] == s).collect();
            problem.held_out_losses(&train, &test, &grid)
        })
        .collect();
    let mut fold_losses = Array2::zeros((FOLDS, grid.len()));
    for (s, losses) in per_fold.into_iter().enumerate() {
        let losses = losses?;
        for (j, v) in losses.into_iter().enumerate() {
            fold_losses[[s, j]] = v;
        }
    }
    summarize(grid, fold_losses, folds)
}

/// Fits `train` along `grid` with warm starts and scores each fit with
/// `test`. A fit that errors or does not converge ends the path; remaining
/// points score infinity.
pub fn warm_path_losses<S: Scalar, A: LossAdapter<S>, B: LossAdapter<S>>(
    train: &A,
    test: &B,
    grid: &[S],
    cfg: &SolveConfig<S>,
) -> Vec<S> {
    let solver = Solver::new(train);
    let mut coef = Array2::zeros((train.design().ncols(), train.responses()));
    let mut out = vec![S::infinity(); grid.len()];
    for (j, &lambda) in grid.iter().enumerate() {
        let fit = match solver.solve(&coef, &SolveConfig { lambda, ..*cfg }) {
            Ok(fit) if fit.converged => fit,
            _ => break,
        };
        coef = fit.coef;
        out[j] = test
            .loss(test.design().dot(&coef).view())
            .unwrap_or(S::infinity());
    }
    out
}

/// Training and held-out datasets, with training-fold standardization
/// applied to both when `standardize` is set.
pub fn split<S: Scalar>(d: &Dataset<S>, train: &[usize], test: &[usize], standardize_folds: bool) -> Result<(Dataset<S>, Dataset<S>)> {
    let tr = d.subset(train)?;
    let te = d.subset(test)?;
    if standardize_folds {
        let (tr, st) = standardize(&tr)?;
        let te = st.apply(&te)?;
        Ok((tr, te))
    } else {
        Ok((tr, te))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsCriterion {
    Cal { target: usize },
    Ml,
}

/// Cross-validation of a propensity fit with its own loss.
pub struct PsCv<'a, S: Scalar> {
    pub data: &'a Dataset<S>,
    pub criterion: PsCriterion,
    pub constraint: Constraint,
    pub cfg: SolveConfig<S>,
    pub standardize_folds: bool,
}

impl<S: Scalar> PsCv<'_, S> {
    fn threshold(&self, d: &Dataset<S>) -> Result<S> {
        match self.criterion {
            PsCriterion::Cal { target } => Ok(zero_threshold(&CalAdapter::new(d, target, self.constraint)?, &self.cfg)?.0),
            PsCriterion::Ml => Ok(zero_threshold(&MlAdapter::new(d, self.constraint)?, &self.cfg)?.0),
        }
    }
}

impl<S: Scalar> CvProblem<S> for PsCv<'_, S> {
    fn data(&self) -> &Dataset<S> {
        self.data
    }

    fn lambda_star(&self) -> Result<S> {
        self.threshold(self.data)
    }

    fn held_out_losses(&self, train: &[usize], test: &[usize], grid: &[S]) -> Result<Vec<S>> {
        let (tr, te) = split(self.data, train, test, self.standardize_folds)?;
        Ok(match self.criterion {
            PsCriterion::Cal { target } => warm_path_losses(
                &CalAdapter::new(&tr, target, self.constraint)?,
                &CalAdapter::new(&te, target, self.constraint)?,
                grid,
                &self.cfg,
            ),
            PsCriterion::Ml => warm_path_losses(
                &MlAdapter::new(&tr, self.constraint)?,
                &MlAdapter::new(&te, self.constraint)?,
                grid,
                &self.cfg,
            ),
        })
    }
}

/// Cross-validation of the weighted outcome copies for target `t`, with the
/// propensities held fixed at their full-data fit.
pub struct RwlCv<'a, S: Scalar> {
    pub data: &'a Dataset<S>,
    pub target: usize,
    /// Fitted n x K propensities on `data`.
    pub probs: ArrayView2<'a, S>,
    pub link: Link,
    pub cfg: SolveConfig<S>,
    pub standardize_folds: bool,
}

impl<S: Scalar> CvProblem<S> for RwlCv<'_, S> {
    fn data(&self) -> &Dataset<S> {
        self.data
    }

    fn lambda_star(&self) -> Result<S> {
        let a = WeightedGlmAdapter::rwl(self.data, self.target, self.probs, self.link)?;
        Ok(zero_threshold(&a, &self.cfg)?.0)
    }

    fn held_out_losses(&self, train: &[usize], test: &[usize], grid: &[S]) -> Result<Vec<S>> {
        let (tr, te) = split(self.data, train, test, self.standardize_folds)?;
        let ptr = self.probs.select(ndarray::Axis(0), train);
        let pte = self.probs.select(ndarray::Axis(0), test);
        Ok(warm_path_losses(
            &WeightedGlmAdapter::rwl(&tr, self.target, ptr.view(), self.link)?,
            &WeightedGlmAdapter::rwl(&te, self.target, pte.view(), self.link)?,
            grid,
            &self.cfg,
        ))
    }
}

/// Cross-validation of the Lasso outcome fit of one treatment group.
pub struct RmlsCv<'a, S: Scalar> {
    pub data: &'a Dataset<S>,
    pub target: usize,
    pub link: Link,
    pub cfg: SolveConfig<S>,
    pub standardize_folds: bool,
}

impl<S: Scalar> CvProblem<S> for RmlsCv<'_, S> {
    fn data(&self) -> &Dataset<S> {
        self.data
    }

    fn lambda_star(&self) -> Result<S> {
        let a = WeightedGlmAdapter::rmls(self.data, self.target, self.link)?;
        Ok(zero_threshold(&a, &self.cfg)?.0)
    }

    fn held_out_losses(&self, train: &[usize], test: &[usize], grid: &[S]) -> Result<Vec<S>> {
        let (tr, te) = split(self.data, train, test, self.standardize_folds)?;
        Ok(warm_path_losses(
            &WeightedGlmAdapter::rmls(&tr, self.target, self.link)?,
            &WeightedGlmAdapter::rmls(&te, self.target, self.link)?,
            grid,
            &self.cfg,
        ))
    }
}

/// Cross-validation of the joint group-Lasso outcome fit.
pub struct RmlgCv<'a, S: Scalar> {
    pub data: &'a Dataset<S>,
    pub link: Link,
    pub cfg: SolveConfig<S>,
    pub standardize_folds: bool,
}

impl<S: Scalar> CvProblem<S> for RmlgCv<'_, S> {
    fn data(&self) -> &Dataset<S> {
        self.data
    }

    fn lambda_star(&self) -> Result<S> {
        let a = WeightedGlmAdapter::rmlg(self.data, self.link)?;
        Ok(zero_threshold(&a, &self.cfg)?.0)
    }

    fn held_out_losses(&self, train: &[usize], test: &[usize], grid: &[S]) -> Result<Vec<S>> {
        let (tr, te) = split(self.data, train, test, self.standardize_folds)?;
        Ok(warm_path_losses(
            &WeightedGlmAdapter::rmlg(&tr, self.link)?,
            &WeightedGlmAdapter::rmlg(&te, self.link)?,
            grid,
            &self.cfg,
        ))
    }
}
