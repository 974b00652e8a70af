//! Path-space diagnostics: up-crossings, conditional variation and coupling
//! distances between penalized and reflected paths.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde_solver::{
    conditional_mean, solve_lsmc, Featurizer, PathValues, SolverConfig, SolverMode,
};
use crate::error::{Error, Result};
use crate::forward_sim::{
    batch_simulate, map_coupled_paths, BatchOptions, CoupledBundles, TimeGrid,
};
use crate::problems::ProblemInstance;
use crate::rng::Stream;

/// Number of completed passages from strictly below `a` to strictly above `b`.
pub fn upcrossings(path: &[f64], a: f64, b: f64) -> Result<usize> {
    if !(a < b) {
        return Err(Error::InvalidArgument(format!(
            "up-crossing levels need a < b, got a = {a}, b = {b}"
        )));
    }
    let mut below = false;
    let mut count = 0;
    for &v in path {
        if !below && v < a {
            below = true;
        } else if below && v > b {
            below = false;
            count += 1;
        }
    }
    Ok(count)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvEstimate {
    /// Maximum over the grid and its dyadic coarsenings.
    pub value: f64,
    /// `(stride, estimate)` for each partition scanned.
    pub by_stride: Vec<(usize, f64)>,
}

fn partition(points: usize, stride: usize) -> Vec<usize> {
    let last = points - 1;
    let mut idx: Vec<usize> = (0..=last).step_by(stride).collect();
    if *idx.last().unwrap() != last {
        idx.push(last);
    }
    idx
}

fn check_alignment(values: &PathValues, features: &PathValues) -> Result<()> {
    if values.paths != features.paths || values.points != features.points {
        return Err(Error::GridMismatch(format!(
            "values are {} x {} but features are {} x {}",
            values.paths, values.points, features.paths, features.points
        )));
    }
    if values.points < 2 || values.paths == 0 {
        return Err(Error::InvalidArgument(
            "conditional variation needs at least one path and two grid points".into(),
        ));
    }
    Ok(())
}

/// `sum_k mean_j |E[V_{k+1} - V_k | X_k]|` with `increment(j, from, to)` giving
/// the increment of path `j` between two grid indices.
fn cv_on_partition(
    idx: &[usize],
    paths: usize,
    features: &PathValues,
    featurizer: &Featurizer,
    ridge: Option<f64>,
    increment: impl Fn(usize, usize, usize) -> f64,
) -> Result<f64> {
    let mut total = 0.0;
    for w in idx.windows(2) {
        let targets = DMatrix::from_fn(paths, 1, |j, _| increment(j, w[0], w[1]));
        let states: Vec<&[f64]> = (0..paths).map(|j| features.get(j, w[0])).collect();
        let fitted = conditional_mean(featurizer, &states, &targets, ridge)?;
        total += fitted.iter().map(|v| v.abs()).sum::<f64>() / paths as f64;
    }
    Ok(total)
}

/// Conditional variation of the first component of `values`, conditioning on
/// `features` at the left end of each increment.
pub fn conditional_variation(
    values: &PathValues,
    features: &PathValues,
    featurizer: &Featurizer,
    ridge: Option<f64>,
) -> Result<CvEstimate> {
    check_alignment(values, features)?;
    let mut by_stride = Vec::new();
    let mut stride = 1;
    while stride < values.points {
        let idx = partition(values.points, stride);
        let cv = cv_on_partition(
            &idx,
            values.paths,
            features,
            featurizer,
            ridge,
            |j, a, b| values.get(j, b)[0] - values.get(j, a)[0],
        )?;
        by_stride.push((stride, cv));
        stride *= 2;
    }
    let value = by_stride.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    Ok(CvEstimate { value, by_stride })
}

/// Sampling noise of the estimator: the same statistic after each step's
/// increments are shuffled across paths, which removes any dependence on the
/// features. Averaged over `repetitions` shuffles of the finest grid.
pub fn cv_noise_floor(
    values: &PathValues,
    features: &PathValues,
    featurizer: &Featurizer,
    ridge: Option<f64>,
    repetitions: usize,
    seed: u64,
) -> Result<f64> {
    check_alignment(values, features)?;
    let (m, points) = (values.paths, values.points);
    let idx: Vec<usize> = (0..points).collect();
    let mut total = 0.0;
    for rep in 0..repetitions.max(1) {
        let mut stream = Stream::auxiliary(seed, rep as u64);
        let mut shuffled = vec![0.0; m * (points - 1)];
        for i in 0..points - 1 {
            let mut order: Vec<usize> = (0..m).collect();
            for a in (1..m).rev() {
                order.swap(a, stream.below(a + 1));
            }
            for (j, &src) in order.iter().enumerate() {
                shuffled[j * (points - 1) + i] = values.get(src, i + 1)[0] - values.get(src, i)[0];
            }
        }
        total += cv_on_partition(&idx, m, features, featurizer, ridge, |j, a, _| {
            shuffled[j * (points - 1) + a]
        })?;
    }
    Ok(total / repetitions.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
}

impl Summary {
    pub fn of(values: impl ExactSizeIterator<Item = f64> + Clone) -> Self {
        let m = values.len() as f64;
        let mean = values.clone().sum::<f64>() / m;
        let var = if m > 1.0 {
            values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / m).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCoupling {
    pub n: u32,
    /// `sup_t |X^n - X^ref|`.
    pub sup_distance: Summary,
    /// `sup_t |k^n - k^ref|`.
    pub k_distance: Summary,
    /// `k^n(T)`.
    pub terminal_k: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpcrossingMean {
    pub a: f64,
    pub b: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub paths: usize,
    pub levels: Vec<LevelCoupling>,
    /// `k^ref(T)` of the reflected paths.
    pub reference_terminal_k: Summary,
    /// Mean of `sup_t |X^ref|`.
    pub sup_abs: f64,
    /// Up-crossings of the reflected path's first coordinate.
    pub upcrossings: Vec<UpcrossingMean>,
    pub cv_estimate: Option<f64>,
}

struct PathCoupling {
    sup: Vec<f64>,
    k: Vec<f64>,
    terminal: Vec<f64>,
    reference_terminal: f64,
    sup_abs: f64,
    crossings: Vec<usize>,
}

fn path_coupling(c: &CoupledBundles, levels: &[(f64, f64)]) -> Result<PathCoupling> {
    let r = &c.reflected;
    let mut out = PathCoupling {
        sup: Vec::new(),
        k: Vec::new(),
        terminal: Vec::new(),
        reference_terminal: r.terminal_local_time(),
        sup_abs: r.sup_norm_sq().sqrt(),
        crossings: Vec::new(),
    };
    for (_, p) in &c.penalized {
        if p.grid != r.grid {
            return Err(Error::GridMismatch(
                "coupled bundles are on different grids".into(),
            ));
        }
        out.sup.push(p.sup_distance(r));
        out.k.push(p.sup_local_time_distance(r));
        out.terminal.push(p.terminal_local_time());
    }
    let first: Vec<f64> = r.x.iter().step_by(r.dim).copied().collect();
    for &(a, b) in levels {
        out.crossings.push(upcrossings(&first, a, b)?);
    }
    Ok(out)
}

fn assemble(
    levels: &[u32],
    per_path: &[PathCoupling],
    crossing_levels: &[(f64, f64)],
) -> DiagnosticsReport {
    let m = per_path.len();
    let level_rows = levels
        .iter()
        .enumerate()
        .map(|(i, &n)| LevelCoupling {
            n,
            sup_distance: Summary::of(per_path.iter().map(|p| p.sup[i])),
            k_distance: Summary::of(per_path.iter().map(|p| p.k[i])),
            terminal_k: Summary::of(per_path.iter().map(|p| p.terminal[i])),
        })
        .collect();
    DiagnosticsReport {
        paths: m,
        levels: level_rows,
        reference_terminal_k: Summary::of(per_path.iter().map(|p| p.reference_terminal)),
        sup_abs: per_path.iter().map(|p| p.sup_abs).sum::<f64>() / m as f64,
        upcrossings: crossing_levels
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| UpcrossingMean {
                a,
                b,
                mean: per_path.iter().map(|p| p.crossings[i] as f64).sum::<f64>() / m as f64,
            })
            .collect(),
        cv_estimate: None,
    }
}

/// Coupling distances for already simulated shared-noise bundles.
pub fn coupling_report(
    bundles: &[CoupledBundles],
    crossing_levels: &[(f64, f64)],
) -> Result<DiagnosticsReport> {
    let Some(first) = bundles.first() else {
        return Err(Error::InvalidArgument(
            "coupling report needs at least one path".into(),
        ));
    };
    let levels: Vec<u32> = first.penalized.iter().map(|(n, _)| *n).collect();
    let per_path = bundles
        .iter()
        .map(|c| {
            if c.penalized
                .iter()
                .map(|(n, _)| *n)
                .ne(levels.iter().copied())
            {
                return Err(Error::GridMismatch(
                    "coupled bundles carry different penalty levels".into(),
                ));
            }
            path_coupling(c, crossing_levels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(&levels, &per_path, crossing_levels))
}

/// Simulates `paths` coupled paths and reports without storing them.
pub fn coupling_report_streaming(
    instance: &ProblemInstance,
    levels: &[u32],
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    crossing_levels: &[(f64, f64)],
) -> Result<DiagnosticsReport> {
    if paths == 0 {
        return Err(Error::InvalidArgument("path count must be positive".into()));
    }
    let per_path = map_coupled_paths(instance, levels, grid, paths, seed, |_, c| {
        path_coupling(c, crossing_levels)
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(assemble(levels, &per_path, crossing_levels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub n: u32,
    pub cv: f64,
    pub mean_sup_abs_y: f64,
    pub criterion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub rows: Vec<TightnessRow>,
    /// Largest criterion over the schedule.
    pub max: f64,
    pub min: f64,
    /// The criterion stays finite and `max <= 1.5 min` ("criterion bounded").
    pub bounded: bool,
}

/// `cv(Y^n) + mean sup_k |Y^n_k|` for each penalty level, from LSMC solutions
/// (adapted `Y`) with the conditional variation taken given `X^n`.
pub fn tightness_criterion(
    instance: &ProblemInstance,
    levels: &[u32],
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<TightnessReport> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument(
            "tightness criterion needs a nonempty schedule".into(),
        ));
    }
    let mut cfg = *config;
    if cfg.mode == SolverMode::LinearMc {
        cfg.mode = SolverMode::LsmcExplicit;
    }
    let featurizer = cfg.basis.featurizer(&instance.domain)?;
    let rows = levels
        .iter()
        .map(|&n| {
            let ensemble = batch_simulate(
                instance,
                Some(n),
                grid,
                paths,
                seed,
                BatchOptions::default(),
            )?;
            let sol = solve_lsmc(instance, &ensemble, &cfg)?;
            let y = sol.y.ok_or(Error::MemoryBudget {
                required: (paths * (grid.steps + 1) * instance.value_dim()) as u64 * 8,
                budget: crate::bsde_solver::RETAIN_LIMIT_BYTES,
            })?;
            let d = instance.dim();
            let mut xs = Vec::with_capacity(paths * (grid.steps + 1) * d);
            for j in 0..paths {
                xs.extend(ensemble.path_states(j));
            }
            let features = PathValues::from_vec(paths, grid.steps + 1, d, xs)?;
            let cv = conditional_variation(&y, &features, &featurizer, cfg.ridge_lambda)?.value;
            let mean_sup_abs_y = (0..paths)
                .into_par_iter()
                .map(|j| {
                    (0..=grid.steps)
                        .map(|i| y.get(j, i)[0].abs())
                        .fold(0.0, f64::max)
                })
                .collect::<Vec<_>>()
                .iter()
                .sum::<f64>()
                / paths as f64;
            Ok(TightnessRow {
                n,
                cv,
                mean_sup_abs_y,
                criterion: cv + mean_sup_abs_y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max = rows
        .iter()
        .map(|r| r.criterion)
        .fold(f64::NEG_INFINITY, f64::max);
    let min = rows
        .iter()
        .map(|r| r.criterion)
        .fold(f64::INFINITY, f64::min);
    Ok(TightnessReport {
        bounded: max.is_finite() && max <= 1.5 * min,
        rows,
        max,
        min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde_solver::RegressionBasis;
    use crate::problems::{builtin, ForwardCoefficients};

    #[test]
    fn upcrossing_examples() {
        assert_eq!(upcrossings(&[0.5; 10], 0.0, 1.0).unwrap(), 0);
        let ramp: Vec<f64> = (0..=30).map(|i| -1.0 + i as f64 * 0.1).collect();
        assert_eq!(upcrossings(&ramp, 0.0, 1.0).unwrap(), 1);
        let saw: Vec<f64> = (0..7).flat_map(|_| [-0.5, 1.5]).collect();
        assert_eq!(upcrossings(&saw, 0.0, 1.0).unwrap(), 7);
        // touching the levels is not crossing them
        assert_eq!(upcrossings(&[0.0, 1.0, 0.0, 1.0], 0.0, 1.0).unwrap(), 0);
        assert!(upcrossings(&saw, 1.0, 1.0).is_err());
    }

    #[test]
    fn cv_of_identical_deterministic_paths_is_total_variation() {
        let points = 65;
        let path: Vec<f64> = (0..points)
            .map(|i| ((i as f64) / 64.0).powi(2) + 0.1 * (i as f64).sin())
            .collect();
        let tv: f64 = path.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
        let paths = 20;
        let values = PathValues::from_vec(paths, points, 1, path.repeat(paths)).unwrap();
        let features = PathValues::from_vec(paths, points, 1, path.repeat(paths)).unwrap();
        let f = RegressionBasis::default()
            .featurizer_for_box(&[-1.0], &[2.0])
            .unwrap();
        let cv = conditional_variation(&values, &features, &f, None).unwrap();
        assert!((cv.value - tv).abs() < 1e-8, "{} vs {tv}", cv.value);
        assert_eq!(cv.by_stride.len(), 7);
    }

    #[test]
    fn frozen_coupling_is_zero() {
        let mut inst = builtin("ball-2d-pure-neumann").unwrap();
        inst.coefficients = ForwardCoefficients::scaled_brownian(2, 0.0);
        let grid = TimeGrid::for_instance(&inst, 20).unwrap();
        let r = coupling_report_streaming(&inst, &[1, 4], &grid, 10, 0, &[(0.2, 0.4)]).unwrap();
        for l in &r.levels {
            assert_eq!(l.sup_distance.mean, 0.0);
            assert_eq!(l.k_distance.mean, 0.0);
        }
        assert_eq!(r.upcrossings[0].mean, 0.0);
    }

    #[test]
    fn stored_and_streaming_reports_agree() {
        let inst = builtin("affine-flux-interval").unwrap();
        let grid = TimeGrid::for_instance(&inst, 100).unwrap();
        let bundles: Vec<CoupledBundles> = (0..30)
            .map(|j| {
                crate::forward_sim::simulate_coupled(
                    &inst,
                    &[2, 8],
                    &grid,
                    &mut Stream::for_path(4, j),
                )
                .unwrap()
            })
            .collect();
        let a = coupling_report(&bundles, &[(0.3, 0.7)]).unwrap();
        let b = coupling_report_streaming(&inst, &[2, 8], &grid, 30, 4, &[(0.3, 0.7)]).unwrap();
        assert_eq!(a, b);
        assert!(a.levels[1].sup_distance.mean < a.levels[0].sup_distance.mean);
    }
}
