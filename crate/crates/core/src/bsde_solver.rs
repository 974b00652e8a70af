//! Backward solvers for generalized BSDEs along simulated forward ensembles.
//!
//! `solve_linear_mc` is the Feynman-Kac estimator for drivers that do not
//! depend on `y`. `solve_lsmc` runs the least-squares Monte Carlo recursion
//!
//! ```text
//! C_k = E_k[ Y_{k+1} + h(t_{k+1}, X_{k+1}, Y_{k+1}) dk_k ]
//! Y_k = C_k + f(t_k, X_k, C_k or Y_k) dt
//! ```
//!
//! with `E_k` replaced by regression on a basis in `X_k`.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_sim::{batch_simulate, map_paths, BatchOptions, Ensemble, PathBundle, TimeGrid};
use crate::geometry::ConvexDomain;
use crate::problems::ProblemInstance;

/// Scale of the automatic ridge relative to the largest squared singular value.
pub const AUTO_RIDGE_SCALE: f64 = 1e-10;
/// Pivot ratio below which an unregularized design is declared rank deficient.
pub const RANK_TOL: f64 = 1e-13;
/// Fixed-point change above which a Picard step is flagged.
pub const PICARD_TOL: f64 = 1e-10;
/// Full `Y` and residual arrays are kept only below this size.
pub const RETAIN_LIMIT_BYTES: u64 = 256 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegressionBasis {
    /// Monomials of total degree `<= max_degree` in coordinates rescaled to
    /// `[-1, 1]` over the domain's bounding box.
    Polynomial { max_degree: u32 },
    /// Indicators of `cells_per_axis^d` equal boxes covering the bounding box.
    PiecewiseConstant { cells_per_axis: u32 },
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis::Polynomial { max_degree: 3 }
    }
}

impl RegressionBasis {
    pub fn size(&self, dim: usize) -> usize {
        match *self {
            RegressionBasis::Polynomial { max_degree } => exponents(dim, max_degree).len(),
            RegressionBasis::PiecewiseConstant { cells_per_axis } => {
                (cells_per_axis as usize).pow(dim as u32)
            }
        }
    }

    pub fn featurizer(&self, domain: &ConvexDomain) -> Result<Featurizer> {
        let (lo, hi) = domain.bounding_box();
        self.featurizer_for_box(lo, hi)
    }

    /// Basis on the box `[lo, hi]`; points outside are clamped onto it.
    pub fn featurizer_for_box(&self, lo: &[f64], hi: &[f64]) -> Result<Featurizer> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidArgument(
                "feature box needs lo < hi in every coordinate".into(),
            ));
        }
        let kind = match *self {
            RegressionBasis::Polynomial { max_degree } => {
                FeatureKind::Monomials(exponents(lo.len(), max_degree))
            }
            RegressionBasis::PiecewiseConstant { cells_per_axis } => {
                if cells_per_axis == 0 {
                    return Err(Error::InvalidArgument(
                        "cells_per_axis must be positive".into(),
                    ));
                }
                FeatureKind::Cells(cells_per_axis as usize)
            }
        };
        Ok(Featurizer {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            kind,
        })
    }
}

fn exponents(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(dim: usize, budget: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=budget {
            prefix.push(e);
            rec(dim, budget - e, prefix, out);
            prefix.pop();
        }
    }
    let mut all = Vec::new();
    rec(dim, degree, &mut Vec::new(), &mut all);
    all.sort_by_key(|e| e.iter().sum::<u32>());
    all
}

#[derive(Clone, Debug)]
enum FeatureKind {
    Monomials(Vec<Vec<u32>>),
    Cells(usize),
}

/// Evaluates a basis at points of one domain.
#[derive(Clone, Debug)]
pub struct Featurizer {
    lo: Vec<f64>,
    hi: Vec<f64>,
    kind: FeatureKind,
}

impl Featurizer {
    pub fn size(&self) -> usize {
        match &self.kind {
            FeatureKind::Monomials(e) => e.len(),
            FeatureKind::Cells(c) => c.pow(self.lo.len() as u32),
        }
    }

    fn scaled(&self, i: usize, v: f64) -> f64 {
        let (lo, hi) = (self.lo[i], self.hi[i]);
        (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn evaluate(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            FeatureKind::Monomials(exps) => {
                for (o, e) in out.iter_mut().zip(exps) {
                    *o = e
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| self.scaled(i, x[i]).powi(p as i32))
                        .product();
                }
            }
            FeatureKind::Cells(c) => {
                out.fill(0.0);
                let mut index = 0;
                for (i, &v) in x.iter().enumerate() {
                    let u = 0.5 * (self.scaled(i, v) + 1.0);
                    let cell = ((u * *c as f64) as usize).min(c - 1);
                    index = index * c + cell;
                }
                out[index] = 1.0;
            }
        }
    }

    /// Design matrix with one row per point.
    pub fn design<'a>(&self, points: impl ExactSizeIterator<Item = &'a [f64]>) -> DMatrix<f64> {
        let rows = points.len();
        let p = self.size();
        let mut data = vec![0.0; rows * p];
        for (row, x) in data.chunks_exact_mut(p).zip(points) {
            self.evaluate(x, row);
        }
        DMatrix::from_row_slice(rows, p, &data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    /// `basis x targets`.
    pub coefficients: DMatrix<f64>,
    /// `paths x targets`.
    pub fitted: DMatrix<f64>,
    pub ridge_lambda: f64,
}

fn largest_eigenvalue(g: &DMatrix<f64>) -> f64 {
    let p = g.nrows();
    let mut v = DMatrix::from_element(p, 1, 1.0 / (p as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = g * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w / norm;
        if (next - lambda).abs() <= 1e-6 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// `1e-10 x sigma_max(features)^2`.
pub fn default_ridge(features: &DMatrix<f64>) -> f64 {
    AUTO_RIDGE_SCALE * largest_eigenvalue(&features.tr_mul(features))
}

/// Ridge least squares via the normal equations.
///
/// An all-ones first column is treated as the intercept and is not penalized,
/// so adding a constant to the targets shifts the fit by exactly that constant.
pub fn regress(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    ridge_lambda: f64,
) -> Result<RegressionFit> {
    regress_with(features, targets, Some(ridge_lambda))
}

/// `ridge = None` uses `default_ridge`.
fn regress_with(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    ridge: Option<f64>,
) -> Result<RegressionFit> {
    let (m, p) = features.shape();
    if targets.nrows() != m {
        return Err(Error::InvalidArgument(format!(
            "features have {m} rows but targets have {}",
            targets.nrows()
        )));
    }
    if m < p {
        return Err(Error::Precondition(format!(
            "{m} paths cannot fit {p} basis functions"
        )));
    }
    let mut gram = features.tr_mul(features);
    let ridge_lambda = ridge.unwrap_or_else(|| AUTO_RIDGE_SCALE * largest_eigenvalue(&gram));
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::InvalidArgument(
            "ridge_lambda must be finite and >= 0".into(),
        ));
    }
    let rhs = features.tr_mul(targets);
    let intercept = p > 0 && features.column(0).iter().all(|&v| v == 1.0);
    for i in usize::from(intercept)..p {
        gram[(i, i)] += ridge_lambda;
    }
    let chol = Cholesky::new(gram).ok_or(Error::RankDeficient { ratio: 0.0 })?;
    let diag = chol.l_dirty().diagonal().map(|v| v * v);
    let ratio = diag.min() / diag.max();
    if !(ratio > RANK_TOL) {
        return Err(Error::RankDeficient { ratio });
    }
    let coefficients = chol.solve(&rhs);
    let fitted = features * &coefficients;
    Ok(RegressionFit {
        coefficients,
        fitted,
        ridge_lambda,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    LinearMc,
    LsmcExplicit,
    LsmcPicard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub mode: SolverMode,
    pub picard_iterations: u32,
    /// `None` selects `1e-10 x sigma_max^2` per regression.
    pub ridge_lambda: Option<f64>,
    pub basis: RegressionBasis,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: SolverMode::LinearMc,
            picard_iterations: 3,
            ridge_lambda: None,
            basis: RegressionBasis::default(),
        }
    }
}

impl SolverConfig {
    pub fn lsmc_picard(basis: RegressionBasis) -> Self {
        Self {
            mode: SolverMode::LsmcPicard,
            basis,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.picard_iterations == 0 {
            return Err(Error::ConfigField {
                field: "solver.picard_iterations".into(),
                message: "must be >= 1".into(),
            });
        }
        if let Some(l) = self.ridge_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::ConfigField {
                    field: "solver.ridge_lambda".into(),
                    message: "must be a finite nonnegative number".into(),
                });
            }
        }
        Ok(())
    }
}

/// Values on `paths x points x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathValues {
    pub paths: usize,
    pub points: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl PathValues {
    fn zeros(paths: usize, points: usize, width: usize) -> Self {
        Self {
            paths,
            points,
            width,
            data: vec![0.0; paths * points * width],
        }
    }

    /// Wraps `data` laid out as `paths x points x width`.
    pub fn from_vec(paths: usize, points: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != paths * points * width || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not fill {paths} x {points} x {width}",
                data.len()
            )));
        }
        Ok(Self {
            paths,
            points,
            width,
            data,
        })
    }

    pub fn get(&self, path: usize, i: usize) -> &[f64] {
        let at = (path * self.points + i) * self.width;
        &self.data[at..at + self.width]
    }

    fn set(&mut self, path: usize, i: usize, v: &[f64]) {
        let at = (path * self.points + i) * self.width;
        self.data[at..at + self.width].copy_from_slice(v);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardSolution {
    pub u_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    pub paths: usize,
    /// `Y` per path and grid index, when small enough to keep.
    pub y: Option<PathValues>,
    /// `Y_{k+1} + h dk - C_k` per path and step (LSMC only, when kept).
    pub martingale_residuals: Option<PathValues>,
    /// Per-step residual summary (LSMC only).
    pub residual_stats: Vec<ResidualStats>,
    /// Sample mean of `sup_k |Y_k|^2`.
    pub sup_y_sq_mean: f64,
    /// Steps whose Picard iteration had not settled to `1e-10`.
    pub picard_unsettled_steps: usize,
}

impl BackwardSolution {
    pub fn picard_warning(&self) -> bool {
        self.picard_unsettled_steps > 0
    }
}

fn mean_and_stderr(values: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let m = values.len() / width;
    let mut mean = vec![0.0; width];
    for row in values.chunks_exact(width) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut var = vec![0.0; width];
    for row in values.chunks_exact(width) {
        for c in 0..width {
            let e = row[c] - mean[c];
            var[c] += e * e;
        }
    }
    let stderr = var
        .iter()
        .map(|v| {
            if m > 1 {
                (v / (m - 1) as f64 / m as f64).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    (mean, stderr)
}

fn retain(paths: usize, points: usize, width: usize) -> bool {
    (paths * points * width) as u64 * 8 <= RETAIN_LIMIT_BYTES
}

/// Pathwise values of the y-free representation along one trajectory:
/// returns `Y` at every grid index (backward sums).
struct LinearPath {
    y: Vec<f64>,
}

fn linear_path<'a>(
    instance: &ProblemInstance,
    grid: &TimeGrid,
    states: impl Fn(usize) -> &'a [f64],
    dk: impl Fn(usize) -> f64,
) -> LinearPath {
    let k = instance.value_dim();
    let n = grid.steps;
    let dt = grid.dt();
    let zeros = vec![0.0; k];
    let mut y = vec![0.0; (n + 1) * k];
    let mut buf = vec![0.0; k];
    instance.drivers.terminal(states(n), &mut y[n * k..]);
    for i in (0..n).rev() {
        let (head, tail) = y.split_at_mut((i + 1) * k);
        let cur = &mut head[i * k..];
        cur.copy_from_slice(&tail[..k]);
        instance
            .drivers
            .interior(grid.time(i), states(i), &zeros, &mut buf);
        for c in 0..k {
            cur[c] += buf[c] * dt;
        }
        let inc = dk(i);
        if inc != 0.0 {
            instance
                .drivers
                .boundary(grid.time(i + 1), states(i + 1), &zeros, &mut buf);
            for c in 0..k {
                cur[c] += buf[c] * inc;
            }
        }
    }
    LinearPath { y }
}

impl LinearPath {
    fn sup_sq(&self, k: usize) -> f64 {
        self.y
            .chunks_exact(k)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

fn require_y_free(instance: &ProblemInstance) -> Result<()> {
    if !instance.drivers.is_y_free() {
        return Err(Error::Precondition(format!(
            "linear-mc needs drivers independent of y, but '{}' declares a y-dependent driver",
            instance.name
        )));
    }
    Ok(())
}

fn check_ensemble(instance: &ProblemInstance, ensemble: &Ensemble) -> Result<()> {
    if ensemble.dim != instance.dim() {
        return Err(Error::GridMismatch(
            "ensemble dimension differs from the instance".into(),
        ));
    }
    if (ensemble.grid.t0 - instance.start.t).abs() > 1e-12
        || (ensemble.grid.horizon - instance.horizon).abs() > 1e-12
    {
        return Err(Error::GridMismatch(
            "ensemble grid does not span the instance's time interval".into(),
        ));
    }
    Ok(())
}

/// Feynman-Kac estimate for y-free drivers: per path
/// `g(X_N) + sum_k f(t_k, X_k) dt + sum_k h(t_{k+1}, X_{k+1}) dk_k`.
pub fn solve_linear_mc(
    instance: &ProblemInstance,
    ensemble: &Ensemble,
) -> Result<BackwardSolution> {
    require_y_free(instance)?;
    check_ensemble(instance, ensemble)?;
    let k = instance.value_dim();
    let n = ensemble.grid.steps;
    let per_path: Vec<LinearPath> = (0..ensemble.paths)
        .into_par_iter()
        .map(|j| {
            linear_path(
                instance,
                &ensemble.grid,
                |i| ensemble.state(j, i),
                |i| ensemble.dk(j, i),
            )
        })
        .collect();
    let y0: Vec<f64> = per_path
        .iter()
        .flat_map(|p| p.y[..k].iter().copied())
        .collect();
    let (u_hat, stderr) = mean_and_stderr(&y0, k);
    let sup_y_sq_mean = per_path.iter().map(|p| p.sup_sq(k)).sum::<f64>() / ensemble.paths as f64;
    let y = retain(ensemble.paths, n + 1, k).then(|| {
        let mut v = PathValues::zeros(ensemble.paths, n + 1, k);
        for (j, p) in per_path.iter().enumerate() {
            v.data[j * (n + 1) * k..(j + 1) * (n + 1) * k].copy_from_slice(&p.y);
        }
        v
    });
    Ok(BackwardSolution {
        u_hat,
        stderr,
        paths: ensemble.paths,
        y,
        martingale_residuals: None,
        residual_stats: Vec::new(),
        sup_y_sq_mean,
        picard_unsettled_steps: 0,
    })
}

/// Streaming Feynman-Kac estimate; no ensemble is stored.
pub fn linear_mc_streaming(
    instance: &ProblemInstance,
    level: Option<u32>,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<BackwardSolution> {
    require_y_free(instance)?;
    if paths == 0 {
        return Err(Error::InvalidArgument("path count must be positive".into()));
    }
    let k = instance.value_dim();
    let per_path = map_paths(instance, level, grid, paths, seed, |_, b: &PathBundle| {
        let p = linear_path(instance, grid, |i| b.state(i), |i| b.dk(i));
        (p.y[..k].to_vec(), p.sup_sq(k))
    })?;
    let y0: Vec<f64> = per_path
        .iter()
        .flat_map(|(y, _)| y.iter().copied())
        .collect();
    let (u_hat, stderr) = mean_and_stderr(&y0, k);
    Ok(BackwardSolution {
        u_hat,
        stderr,
        paths,
        y: None,
        martingale_residuals: None,
        residual_stats: Vec::new(),
        sup_y_sq_mean: per_path.iter().map(|(_, s)| s).sum::<f64>() / paths as f64,
        picard_unsettled_steps: 0,
    })
}

fn check_basis_size(basis_size: usize, paths: usize) -> Result<()> {
    if basis_size * 10 > paths {
        return Err(Error::Precondition(format!(
            "basis has {basis_size} functions but only {paths} paths; need at least 10 paths per basis function"
        )));
    }
    Ok(())
}

/// Conditional expectation of `targets` given the rows' states.
pub(crate) fn conditional_mean(
    featurizer: &Featurizer,
    states: &[&[f64]],
    targets: &DMatrix<f64>,
    ridge: Option<f64>,
) -> Result<DMatrix<f64>> {
    let m = targets.nrows();
    let identical_states = states.iter().all(|s| *s == states[0]);
    let constant_targets =
        (0..targets.ncols()).all(|c| targets.column(c).iter().all(|&v| v == targets[(0, c)]));
    if constant_targets {
        return Ok(targets.clone());
    }
    if identical_states {
        let mean = targets.row_mean();
        return Ok(DMatrix::from_fn(m, targets.ncols(), |_, c| mean[c]));
    }
    let mut design = featurizer.design(states.iter().copied());
    // empty indicator cells carry no information
    let live: Vec<usize> = (0..design.ncols())
        .filter(|&c| design.column(c).iter().any(|&v| v != 0.0))
        .collect();
    if live.len() < design.ncols() {
        design = design.select_columns(&live);
    }
    Ok(regress_with(&design, targets, ridge)?.fitted)
}

/// Least-squares Monte Carlo on a stored ensemble.
pub fn solve_lsmc(
    instance: &ProblemInstance,
    ensemble: &Ensemble,
    config: &SolverConfig,
) -> Result<BackwardSolution> {
    config.validate()?;
    check_ensemble(instance, ensemble)?;
    if config.mode == SolverMode::LinearMc {
        return Err(Error::InvalidArgument(
            "solve_lsmc needs an lsmc mode".into(),
        ));
    }
    let featurizer = config.basis.featurizer(&instance.domain)?;
    let m = ensemble.paths;
    check_basis_size(featurizer.size(), m)?;
    let k = instance.value_dim();
    let n = ensemble.grid.steps;
    let grid = ensemble.grid;
    let dt = grid.dt();
    let keep = retain(m, n + 1, k) && retain(m, n, k);
    let mut y_all = keep.then(|| PathValues::zeros(m, n + 1, k));
    let mut res_all = keep.then(|| PathValues::zeros(m, n, k));

    // Y at the current index, row per path
    let mut y: Vec<f64> = vec![0.0; m * k];
    for (j, row) in y.chunks_exact_mut(k).enumerate() {
        instance.drivers.terminal(ensemble.state(j, n), row);
    }
    // pathwise driver sums, for the standard error
    let mut pathwise = y.clone();
    let mut sup_sq: Vec<f64> = y
        .chunks_exact(k)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect();
    if let Some(all) = y_all.as_mut() {
        for j in 0..m {
            all.set(j, n, &y[j * k..(j + 1) * k]);
        }
    }
    let mut residual_stats = vec![
        ResidualStats {
            mean: vec![0.0; k],
            std: vec![0.0; k]
        };
        n
    ];
    let mut unsettled = 0;
    let mut boundary = vec![0.0; m * k];
    let mut drift = vec![0.0; m * k];

    for i in (0..n).rev() {
        let t_next = grid.time(i + 1);
        let t = grid.time(i);
        // target Y_{k+1} + h(t_{k+1}, X_{k+1}, Y_{k+1}) dk
        boundary
            .par_chunks_mut(k)
            .zip(y.par_chunks(k))
            .enumerate()
            .for_each(|(j, (h, yn))| {
                let inc = ensemble.dk(j, i);
                if inc != 0.0 {
                    instance
                        .drivers
                        .boundary(t_next, ensemble.state(j, i + 1), yn, h);
                    h.iter_mut().for_each(|v| *v *= inc);
                } else {
                    h.fill(0.0);
                }
            });
        let targets = DMatrix::from_fn(m, k, |j, c| y[j * k + c] + boundary[j * k + c]);
        let states: Vec<&[f64]> = (0..m).map(|j| ensemble.state(j, i)).collect();
        let fitted = conditional_mean(&featurizer, &states, &targets, config.ridge_lambda)?;
        let residuals = &targets - &fitted;

        let mean: Vec<f64> = (0..k)
            .map(|c| residuals.column(c).sum() / m as f64)
            .collect();
        let std = (0..k)
            .map(|c| {
                (residuals
                    .column(c)
                    .iter()
                    .map(|r| (r - mean[c]) * (r - mean[c]))
                    .sum::<f64>()
                    / m as f64)
                    .sqrt()
            })
            .collect();
        residual_stats[i] = ResidualStats { mean, std };
        if let Some(all) = res_all.as_mut() {
            for j in 0..m {
                for c in 0..k {
                    all.data[(j * n + i) * k + c] = residuals[(j, c)];
                }
            }
        }

        let picard = config.mode == SolverMode::LsmcPicard;
        let passes = if picard { config.picard_iterations } else { 1 };
        let settled: Vec<bool> = y
            .par_chunks_mut(k)
            .zip(drift.par_chunks_mut(k))
            .enumerate()
            .map(|(j, (yk, f))| {
                let x = ensemble.state(j, i);
                for c in 0..k {
                    yk[c] = fitted[(j, c)];
                }
                let (mut previous, mut change) = (0.0f64, 0.0f64);
                for _ in 0..passes {
                    instance.drivers.interior(t, x, yk, f);
                    previous = change;
                    change = 0.0;
                    for c in 0..k {
                        let next = fitted[(j, c)] + f[c] * dt;
                        change = change.max((next - yk[c]).abs());
                        yk[c] = next;
                    }
                }
                // remaining change extrapolated from the contraction of the last two passes
                let remaining = if passes > 1 && previous > 0.0 {
                    change * change / previous
                } else {
                    change
                };
                !picard || remaining <= PICARD_TOL
            })
            .collect();
        if settled.iter().any(|s| !s) {
            unsettled += 1;
        }
        for j in 0..m {
            let yk = &y[j * k..(j + 1) * k];
            for c in 0..k {
                pathwise[j * k + c] += drift[j * k + c] * dt + boundary[j * k + c];
            }
            sup_sq[j] = sup_sq[j].max(yk.iter().map(|v| v * v).sum());
            if let Some(all) = y_all.as_mut() {
                all.set(j, i, yk);
            }
        }
    }

    let (u_hat, _) = mean_and_stderr(&y, k);
    let (_, stderr) = mean_and_stderr(&pathwise, k);
    Ok(BackwardSolution {
        u_hat,
        stderr,
        paths: m,
        y: y_all,
        martingale_residuals: res_all,
        residual_stats,
        sup_y_sq_mean: sup_sq.iter().sum::<f64>() / m as f64,
        picard_unsettled_steps: unsettled,
    })
}

/// Dispatches on `config.mode`.
pub fn solve(
    instance: &ProblemInstance,
    ensemble: &Ensemble,
    config: &SolverConfig,
) -> Result<BackwardSolution> {
    match config.mode {
        SolverMode::LinearMc => solve_linear_mc(instance, ensemble),
        _ => solve_lsmc(instance, ensemble, config),
    }
}

/// Simulates and solves: `u^n(t, x)` for `level = Some(n)`, `u(t, x)` for `None`.
pub fn estimate_u_point(
    instance: &ProblemInstance,
    level: Option<u32>,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<BackwardSolution> {
    config.validate()?;
    match config.mode {
        SolverMode::LinearMc => linear_mc_streaming(instance, level, grid, paths, seed),
        _ => {
            check_basis_size(config.basis.size(instance.dim()), paths)?;
            let ensemble =
                batch_simulate(instance, level, grid, paths, seed, BatchOptions::default())?;
            solve_lsmc(instance, &ensemble, config)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub u_hat_a: Vec<f64>,
    pub u_hat_b: Vec<f64>,
    /// `u_hat_a - u_hat_b`.
    pub difference: Vec<f64>,
    pub combined_stderr: Vec<f64>,
    /// Some component has `u_hat_a > u_hat_b + 3 combined_stderr`.
    pub violation: bool,
    /// Sampled points where `g_a <= g_b`, `f_a <= f_b` or `h_a <= h_b` fails.
    pub precondition_violations: usize,
    pub precondition_samples: usize,
}

fn count_order_violations(
    a: &ProblemInstance,
    b: &ProblemInstance,
    ensemble: &Ensemble,
) -> (usize, usize) {
    let k = a.value_dim();
    let n = ensemble.grid.steps;
    let stride = (n / 16).max(1);
    let probe_y = [-1.0, 0.0, 1.0];
    let (mut bad, mut total) = (0, 0);
    let (mut va, mut vb) = (vec![0.0; k], vec![0.0; k]);
    let le = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| *p <= *q + 1e-12);
    for j in 0..ensemble.paths {
        a.drivers.terminal(ensemble.state(j, n), &mut va);
        b.drivers.terminal(ensemble.state(j, n), &mut vb);
        total += 1;
        bad += usize::from(!le(&va, &vb));
        for i in (0..n).step_by(stride) {
            let x = ensemble.state(j, i);
            for &yv in &probe_y {
                let y = vec![yv; k];
                a.drivers.interior(ensemble.grid.time(i), x, &y, &mut va);
                b.drivers.interior(ensemble.grid.time(i), x, &y, &mut vb);
                total += 1;
                bad += usize::from(!le(&va, &vb));
                if ensemble.dk(j, i) > 0.0 {
                    let xb = ensemble.state(j, i + 1);
                    a.drivers
                        .boundary(ensemble.grid.time(i + 1), xb, &y, &mut va);
                    b.drivers
                        .boundary(ensemble.grid.time(i + 1), xb, &y, &mut vb);
                    total += 1;
                    bad += usize::from(!le(&va, &vb));
                }
            }
        }
    }
    (bad, total)
}

/// Solves both instances on the same ensemble and reports their ordering.
pub fn comparison_check(
    a: &ProblemInstance,
    b: &ProblemInstance,
    ensemble: &Ensemble,
    config: &SolverConfig,
) -> Result<ComparisonReport> {
    if a.value_dim() != b.value_dim() {
        return Err(Error::InvalidArgument(
            "compared instances have different value dimensions".into(),
        ));
    }
    let sa = solve(a, ensemble, config)?;
    let sb = solve(b, ensemble, config)?;
    let difference: Vec<f64> = sa.u_hat.iter().zip(&sb.u_hat).map(|(x, y)| x - y).collect();
    let combined_stderr: Vec<f64> = sa
        .stderr
        .iter()
        .zip(&sb.stderr)
        .map(|(x, y)| x.hypot(*y))
        .collect();
    let violation = difference
        .iter()
        .zip(&combined_stderr)
        .any(|(d, s)| *d > 3.0 * s);
    let (precondition_violations, precondition_samples) = count_order_violations(a, b, ensemble);
    Ok(ComparisonReport {
        u_hat_a: sa.u_hat,
        u_hat_b: sb.u_hat,
        difference,
        combined_stderr,
        violation,
        precondition_violations,
        precondition_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{builtin, BsdeDrivers, TerminalFn};
    use crate::rng::Stream;
    use std::sync::Arc;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut s = Stream::auxiliary(seed, 1);
        DMatrix::from_fn(rows, cols, |_, _| s.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn exponent_sets() {
        assert_eq!(exponents(1, 3).len(), 4);
        assert_eq!(exponents(2, 3).len(), 10);
        assert_eq!(exponents(3, 2).len(), 10);
        assert_eq!(exponents(2, 0), vec![vec![0, 0]]);
    }

    #[test]
    fn regression_matches_svd_least_squares() {
        let x = random_matrix(200, 5, 1);
        let y = random_matrix(200, 2, 2);
        let fit = regress(&x, &y, 0.0).unwrap();
        let oracle = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        assert!((&fit.coefficients - &oracle).abs().max() < 1e-8);
        // residuals orthogonal to every column
        let residual = &y - &fit.fitted;
        assert!(x.tr_mul(&residual).abs().max() < 1e-8);
    }

    #[test]
    fn regression_reproduces_polynomials() {
        let domain = ConvexDomain::interval(0.0, 1.0).unwrap();
        let f = RegressionBasis::Polynomial { max_degree: 3 }
            .featurizer(&domain)
            .unwrap();
        let pts: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 99.0]).collect();
        let design = f.design(pts.iter().map(|p| p.as_slice()));
        let targets = DMatrix::from_fn(100, 1, |r, _| {
            let x = pts[r][0];
            2.0 - x + 3.0 * x * x * x
        });
        let fit = regress(&design, &targets, 0.0).unwrap();
        assert!((&fit.fitted - &targets).abs().max() < 1e-8);
        let constant = DMatrix::from_element(100, 1, 4.25);
        let fit = regress(&design, &constant, default_ridge(&design)).unwrap();
        assert!(fit.fitted.iter().all(|v| (v - 4.25).abs() < 1e-12));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let mut x = random_matrix(50, 3, 3);
        let col = x.column(0).clone_owned();
        x.set_column(2, &(col * 2.0));
        let y = random_matrix(50, 1, 4);
        let err = regress(&x, &y, 0.0).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
        assert!(err.to_string().contains("ridge"));
        assert!(regress(&x, &y, 1e-6).is_ok());
    }

    #[test]
    fn intercept_is_not_shrunk() {
        let domain = ConvexDomain::interval(0.0, 1.0).unwrap();
        let f = RegressionBasis::Polynomial { max_degree: 2 }
            .featurizer(&domain)
            .unwrap();
        let pts: Vec<Vec<f64>> = (0..64).map(|i| vec![(i as f64 * 0.37).fract()]).collect();
        let design = f.design(pts.iter().map(|p| p.as_slice()));
        let y = random_matrix(64, 1, 9);
        let shifted = y.add_scalar(1.0);
        let a = regress(&design, &y, 0.5).unwrap();
        let b = regress(&design, &shifted, 0.5).unwrap();
        assert!((b.fitted - a.fitted)
            .iter()
            .all(|d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cell_basis_indexes_boxes() {
        let domain = ConvexDomain::cube(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let f = RegressionBasis::PiecewiseConstant { cells_per_axis: 4 }
            .featurizer(&domain)
            .unwrap();
        let mut out = vec![0.0; 16];
        f.evaluate(&[0.1, 0.9], &mut out);
        assert_eq!(out.iter().position(|&v| v == 1.0), Some(3));
        f.evaluate(&[1.0, 1.0], &mut out);
        assert_eq!(out[15], 1.0);
        assert_eq!(out.iter().sum::<f64>(), 1.0);
    }

    fn constant_instance(c: f64) -> ProblemInstance {
        let mut inst = builtin("affine-flux-interval").unwrap();
        let g: TerminalFn = Arc::new(move |_x: &[f64], out: &mut [f64]| out[0] = c);
        inst.drivers = BsdeDrivers::terminal_only(1, g, c.abs(), 1.0);
        inst.exact_solution = None;
        inst
    }

    #[test]
    fn constant_terminal_data_is_exact() {
        let inst = constant_instance(2.5);
        let grid = TimeGrid::for_instance(&inst, 50).unwrap();
        for level in [None, Some(8)] {
            let s = linear_mc_streaming(&inst, level, &grid, 200, 1).unwrap();
            assert_eq!(s.u_hat, vec![2.5]);
            assert_eq!(s.stderr, vec![0.0]);
            let e = batch_simulate(&inst, level, &grid, 200, 1, BatchOptions::default()).unwrap();
            let l = solve_lsmc(
                &inst,
                &e,
                &SolverConfig::lsmc_picard(RegressionBasis::default()),
            )
            .unwrap();
            assert_eq!(l.u_hat, vec![2.5]);
            assert_eq!(l.stderr, vec![0.0]);
        }
    }

    #[test]
    fn lsmc_structure_and_agreement_with_linear() {
        let inst = builtin("affine-flux-interval").unwrap();
        let grid = TimeGrid::for_instance(&inst, 100).unwrap();
        let e = batch_simulate(&inst, None, &grid, 4000, 11, BatchOptions::default()).unwrap();
        let lin = solve_linear_mc(&inst, &e).unwrap();
        let explicit = SolverConfig {
            mode: SolverMode::LsmcExplicit,
            ..SolverConfig::default()
        };
        let ls = solve_lsmc(&inst, &e, &explicit).unwrap();
        let combined = lin.stderr[0].hypot(ls.stderr[0]);
        assert!(
            (lin.u_hat[0] - ls.u_hat[0]).abs() <= 3.0 * combined,
            "{lin:?} {:?}",
            ls.u_hat
        );
        // terminal condition, u_hat as the index-0 average
        let y = ls.y.as_ref().unwrap();
        let mut g = [0.0];
        let mut avg = 0.0;
        for j in 0..e.paths {
            inst.drivers.terminal(e.state(j, grid.steps), &mut g);
            assert_eq!(y.get(j, grid.steps), &g);
            avg += y.get(j, 0)[0];
        }
        assert!((avg / e.paths as f64 - ls.u_hat[0]).abs() < 1e-12);
        for stats in &ls.residual_stats {
            assert!(stats.mean[0].abs() <= 3.0 * stats.std[0] / (e.paths as f64).sqrt() + 1e-14);
        }
        // y-free: explicit and picard coincide
        let picard = solve_lsmc(
            &inst,
            &e,
            &SolverConfig::lsmc_picard(RegressionBasis::default()),
        )
        .unwrap();
        assert!((picard.u_hat[0] - ls.u_hat[0]).abs() <= 1e-12);
        assert!(!picard.picard_warning());
    }

    #[test]
    fn linear_mc_refuses_y_dependent_drivers() {
        let inst = builtin("nonlinear-manufactured-interval").unwrap();
        let grid = TimeGrid::for_instance(&inst, 10).unwrap();
        let err = linear_mc_streaming(&inst, None, &grid, 10, 0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn basis_guard() {
        let inst = builtin("nonlinear-manufactured-interval").unwrap();
        let grid = TimeGrid::for_instance(&inst, 10).unwrap();
        let cfg = SolverConfig::lsmc_picard(RegressionBasis::Polynomial { max_degree: 3 });
        assert!(matches!(
            estimate_u_point(&inst, None, &grid, 39, 0, &cfg),
            Err(Error::Precondition(_))
        ));
        assert!(estimate_u_point(&inst, None, &grid, 40, 0, &cfg).is_ok());
    }

    #[test]
    fn comparison_of_shifted_terminal_data() {
        let a = builtin("neumann-heat-interval").unwrap();
        let mut b = a.clone();
        let g = a.drivers.terminal_fn();
        b.drivers = b
            .drivers
            .with_terminal(Arc::new(move |x: &[f64], out: &mut [f64]| {
                g(x, out);
                out[0] += 1.0;
            }));
        let grid = TimeGrid::for_instance(&a, 100).unwrap();
        let e = batch_simulate(&a, None, &grid, 2000, 5, BatchOptions::default()).unwrap();
        for cfg in [
            SolverConfig::default(),
            SolverConfig::lsmc_picard(RegressionBasis::default()),
        ] {
            let r = comparison_check(&a, &b, &e, &cfg).unwrap();
            assert!(
                (r.difference[0] + 1.0).abs() < 1e-12,
                "{cfg:?} {:?}",
                r.difference
            );
            assert!(!r.violation);
            assert_eq!(r.precondition_violations, 0);
            let same = comparison_check(&a, &a, &e, &cfg).unwrap();
            assert_eq!(same.difference, vec![0.0]);
            let reversed = comparison_check(&b, &a, &e, &cfg).unwrap();
            assert!(reversed.violation);
            assert!(reversed.precondition_violations > 0);
        }
    }
}
