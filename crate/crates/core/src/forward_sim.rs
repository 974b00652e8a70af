//! Forward simulation of penalized and reflected diffusions.
//!
//! Both schemes share a diffusion substep `x~ = x + b(x) dt + sigma(x) dW`:
//!
//! * reflected (projection scheme): `x' = proj(x~)`;
//! * penalized: the penalty drift `-n delta` is applied by the implicit step
//!   `x' = proj(x~) + (x~ - proj(x~)) / (1 + 2 n dt)`, stable for any `n dt`.
//!
//! In both cases `dK = x' - x~` points along the inward normal, so the boundary
//! functional increment is `dk = <normal, dK> = |dK|`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::ProblemInstance;
use crate::rng::Stream;

/// Default cap on the memory a stored ensemble may occupy.
pub const DEFAULT_MEMORY_BUDGET: u64 = 3 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && horizon.is_finite() && t0 < horizon) {
            return Err(Error::InvalidArgument(format!(
                "time grid needs t0 < T, got [{t0}, {horizon}]"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "time grid needs at least one step".into(),
            ));
        }
        Ok(Self { t0, horizon, steps })
    }

    /// Grid from the instance's start time to its horizon.
    pub fn for_instance(instance: &ProblemInstance, steps: usize) -> Result<Self> {
        Self::new(instance.start.t, instance.horizon, steps)
    }

    /// Grid with step close to `dt` (rounded to a whole number of steps).
    pub fn with_step(instance: &ProblemInstance, dt: f64) -> Result<Self> {
        let span = instance.horizon - instance.start.t;
        Self::for_instance(instance, ((span / dt).round() as usize).max(1))
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    fn check_against(&self, instance: &ProblemInstance) -> Result<()> {
        if (self.t0 - instance.start.t).abs() > 1e-12
            || (self.horizon - instance.horizon).abs() > 1e-12
        {
            return Err(Error::GridMismatch(format!(
                "grid [{}, {}] does not span the instance's [{}, {}]",
                self.t0, self.horizon, instance.start.t, instance.horizon
            )));
        }
        Ok(())
    }
}

/// Penalty level `n` or the reflected limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    Penalized(u32),
    Reflected,
}

/// One trajectory on a uniform grid with its boundary functionals and the
/// Brownian increments that drove it.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub dim: usize,
    pub noise_dim: usize,
    /// `(steps + 1) x dim`, row per grid time.
    pub x: Vec<f64>,
    /// Cumulative push `K`, `(steps + 1) x dim`.
    pub push: Vec<f64>,
    /// Cumulative boundary functional `k`, nondecreasing, `k[0] = 0`.
    pub local_time: Vec<f64>,
    /// Brownian increments `dW`, `steps x noise_dim`.
    pub noise: Vec<f64>,
}

impl PathBundle {
    fn empty(grid: TimeGrid, scheme: Scheme, dim: usize, noise_dim: usize) -> Self {
        let n = grid.steps;
        Self {
            grid,
            scheme,
            dim,
            noise_dim,
            x: vec![0.0; (n + 1) * dim],
            push: vec![0.0; (n + 1) * dim],
            local_time: vec![0.0; n + 1],
            noise: vec![0.0; n * noise_dim],
        }
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push_at(&self, i: usize) -> &[f64] {
        &self.push[i * self.dim..(i + 1) * self.dim]
    }

    pub fn noise_at(&self, i: usize) -> &[f64] {
        &self.noise[i * self.noise_dim..(i + 1) * self.noise_dim]
    }

    /// `k(t_{i+1}) - k(t_i)`.
    pub fn dk(&self, i: usize) -> f64 {
        self.local_time[i + 1] - self.local_time[i]
    }

    /// `sum_i |K(t_{i+1}) - K(t_i)|`.
    pub fn push_variation(&self) -> f64 {
        (0..self.steps())
            .map(|i| {
                let (a, b) = (self.push_at(i), self.push_at(i + 1));
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (q - p) * (q - p))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum()
    }

    /// `sup_i |X(t_i)|^2`.
    pub fn sup_norm_sq(&self) -> f64 {
        self.x
            .chunks_exact(self.dim)
            .map(|s| s.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `sup_i |X(t_i) - other(t_i)|`.
    pub fn sup_distance(&self, other: &PathBundle) -> f64 {
        self.x
            .chunks_exact(self.dim)
            .zip(other.x.chunks_exact(other.dim))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// `sup_i |k(t_i) - other.k(t_i)|`.
    pub fn sup_local_time_distance(&self, other: &PathBundle) -> f64 {
        self.local_time
            .iter()
            .zip(&other.local_time)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn terminal_local_time(&self) -> f64 {
        self.local_time[self.steps()]
    }
}

/// Output of one penalized step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub x_next: Vec<f64>,
    pub d_push: Vec<f64>,
    pub dk: f64,
}

/// Reusable scratch for stepping one instance.
struct Stepper<'a> {
    instance: &'a ProblemInstance,
    scheme: Scheme,
    drift: Vec<f64>,
    sigma: Vec<f64>,
    pre: Vec<f64>,
    proj: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(instance: &'a ProblemInstance, scheme: Scheme) -> Self {
        let d = instance.coefficients.dim();
        let dp = instance.coefficients.noise_dim();
        Self {
            instance,
            scheme,
            drift: vec![0.0; d],
            sigma: vec![0.0; d * dp],
            pre: vec![0.0; d],
            proj: vec![0.0; d],
        }
    }

    /// Advances `x` to `next`, writing the push increment to `d_push`; returns `dk`.
    fn step(
        &mut self,
        x: &[f64],
        dw: &[f64],
        dt: f64,
        next: &mut [f64],
        d_push: &mut [f64],
    ) -> Result<f64> {
        let coef = &self.instance.coefficients;
        let (d, dp) = (coef.dim(), coef.noise_dim());
        coef.drift(x, &mut self.drift);
        coef.diffusion(x, &mut self.sigma);
        for i in 0..d {
            let mut v = x[i] + self.drift[i] * dt;
            for m in 0..dp {
                v += self.sigma[i * dp + m] * dw[m];
            }
            self.pre[i] = v;
        }
        self.instance
            .domain
            .project_into(&self.pre, &mut self.proj)?;
        let gap: f64 = self
            .pre
            .iter()
            .zip(&self.proj)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if gap == 0.0 {
            next.copy_from_slice(&self.pre);
            d_push.fill(0.0);
            return Ok(0.0);
        }
        let keep = match self.scheme {
            Scheme::Reflected => 0.0,
            Scheme::Penalized(n) => 1.0 / (1.0 + 2.0 * n as f64 * dt),
        };
        for i in 0..d {
            next[i] = self.proj[i] + (self.pre[i] - self.proj[i]) * keep;
            d_push[i] = next[i] - self.pre[i];
        }
        Ok(d_push.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// One step of the penalized scheme from `x` with Brownian increment `dw`.
pub fn step_penalized(
    instance: &ProblemInstance,
    n: u32,
    x: &[f64],
    dw: &[f64],
    dt: f64,
) -> Result<StepResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("penalty level must be >= 1".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let d = instance.dim();
    if x.len() != d || dw.len() != instance.coefficients.noise_dim() {
        return Err(Error::InvalidArgument(
            "state or noise has the wrong dimension".into(),
        ));
    }
    let mut stepper = Stepper::new(instance, Scheme::Penalized(n));
    let mut x_next = vec![0.0; d];
    let mut d_push = vec![0.0; d];
    let dk = stepper.step(x, dw, dt, &mut x_next, &mut d_push)?;
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: 0 });
    }
    Ok(StepResult { x_next, d_push, dk })
}

fn validate_scheme(scheme: Scheme) -> Result<()> {
    if scheme == Scheme::Penalized(0) {
        return Err(Error::InvalidArgument("penalty level must be >= 1".into()));
    }
    Ok(())
}

/// Draws the Brownian increments of one path into `noise` (`steps x d'`).
fn draw_noise(stream: &mut Stream, grid: &TimeGrid, noise_dim: usize, noise: &mut [f64]) {
    let scale = grid.dt().sqrt();
    for chunk in noise.chunks_exact_mut(noise_dim) {
        stream.fill_normals(chunk);
        chunk.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Integrates the scheme over `bundle.noise`, overwriting states and functionals.
fn integrate(
    instance: &ProblemInstance,
    bundle: &mut PathBundle,
    stepper: &mut Stepper<'_>,
) -> Result<()> {
    let d = bundle.dim;
    let dp = bundle.noise_dim;
    let dt = bundle.grid.dt();
    bundle.x[..d].copy_from_slice(&instance.start.x);
    bundle.push[..d].fill(0.0);
    bundle.local_time[0] = 0.0;
    let mut d_push = vec![0.0; d];
    for i in 0..bundle.grid.steps {
        let (head, tail) = bundle.x.split_at_mut((i + 1) * d);
        let x = &head[i * d..];
        let next = &mut tail[..d];
        let dk = stepper.step(
            x,
            &bundle.noise[i * dp..(i + 1) * dp],
            dt,
            next,
            &mut d_push,
        )?;
        if next.iter().any(|v| !v.is_finite()) || !dk.is_finite() {
            return Err(Error::NonFinite { step: i });
        }
        for j in 0..d {
            bundle.push[(i + 1) * d + j] = bundle.push[i * d + j] + d_push[j];
        }
        bundle.local_time[i + 1] = bundle.local_time[i] + dk;
    }
    Ok(())
}

fn simulate_from_stream(
    instance: &ProblemInstance,
    scheme: Scheme,
    grid: &TimeGrid,
    stream: &mut Stream,
) -> Result<PathBundle> {
    validate_scheme(scheme)?;
    grid.check_against(instance)?;
    let coef = &instance.coefficients;
    let mut bundle = PathBundle::empty(*grid, scheme, coef.dim(), coef.noise_dim());
    draw_noise(stream, grid, coef.noise_dim(), &mut bundle.noise);
    integrate(instance, &mut bundle, &mut Stepper::new(instance, scheme))?;
    Ok(bundle)
}

pub fn simulate_penalized(
    instance: &ProblemInstance,
    n: u32,
    grid: &TimeGrid,
    stream: &mut Stream,
) -> Result<PathBundle> {
    simulate_from_stream(instance, Scheme::Penalized(n), grid, stream)
}

pub fn simulate_reflected(
    instance: &ProblemInstance,
    grid: &TimeGrid,
    stream: &mut Stream,
) -> Result<PathBundle> {
    simulate_from_stream(instance, Scheme::Reflected, grid, stream)
}

/// Runs `scheme` with externally supplied increments (`steps x d'`).
pub fn simulate_with_noise(
    instance: &ProblemInstance,
    scheme: Scheme,
    grid: &TimeGrid,
    noise: &[f64],
) -> Result<PathBundle> {
    validate_scheme(scheme)?;
    grid.check_against(instance)?;
    let coef = &instance.coefficients;
    let mut bundle = PathBundle::empty(*grid, scheme, coef.dim(), coef.noise_dim());
    if noise.len() != bundle.noise.len() {
        return Err(Error::InvalidArgument(
            "noise array has the wrong length".into(),
        ));
    }
    bundle.noise.copy_from_slice(noise);
    integrate(instance, &mut bundle, &mut Stepper::new(instance, scheme))?;
    Ok(bundle)
}

/// Penalized bundles for each level plus the reflected bundle, all driven by
/// the same increments.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledBundles {
    pub penalized: Vec<(u32, PathBundle)>,
    pub reflected: PathBundle,
}

pub fn simulate_coupled(
    instance: &ProblemInstance,
    levels: &[u32],
    grid: &TimeGrid,
    stream: &mut Stream,
) -> Result<CoupledBundles> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument(
            "coupled simulation needs at least one penalty level".into(),
        ));
    }
    let reflected = simulate_reflected(instance, grid, stream)?;
    let penalized = levels
        .iter()
        .map(|&n| {
            Ok((
                n,
                simulate_with_noise(instance, Scheme::Penalized(n), grid, &reflected.noise)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoupledBundles {
        penalized,
        reflected,
    })
}

/// Stored states and boundary increments of many paths, time-major so that
/// one grid time across all paths is contiguous.
///
/// This is what the backward solver consumes: `X` on the grid and `dk` per
/// step. Full bundles (push, noise) are only kept by `batch_simulate_bundles`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub dim: usize,
    pub paths: usize,
    /// `(steps + 1) x paths x dim`.
    x: Vec<f64>,
    /// `steps x paths`.
    dk: Vec<f64>,
}

impl Ensemble {
    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let at = (i * self.paths + path) * self.dim;
        &self.x[at..at + self.dim]
    }

    pub fn dk(&self, path: usize, i: usize) -> f64 {
        self.dk[i * self.paths + path]
    }

    /// States of every path at grid index `i`, `paths x dim`.
    pub fn time_slice(&self, i: usize) -> &[f64] {
        &self.x[i * self.paths * self.dim..(i + 1) * self.paths * self.dim]
    }

    /// `dk` of every path over step `i`.
    pub fn dk_slice(&self, i: usize) -> &[f64] {
        &self.dk[i * self.paths..(i + 1) * self.paths]
    }

    /// One path's states, `(steps + 1) x dim`.
    pub fn path_states(&self, path: usize) -> Vec<f64> {
        (0..=self.grid.steps)
            .flat_map(|i| self.state(path, i).iter().copied())
            .collect()
    }

    /// Bytes an ensemble of this shape occupies.
    pub fn footprint(paths: usize, grid: &TimeGrid, dim: usize) -> u64 {
        let per_path = (grid.steps as u64 + 1) * dim as u64 + grid.steps as u64;
        per_path * paths as u64 * 8
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchOptions {
    pub memory_budget: u64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

fn scheme_of(level: Option<u32>) -> Scheme {
    level.map_or(Scheme::Reflected, Scheme::Penalized)
}

/// Simulates `paths` paths; path `j` uses the stream keyed by `(seed, j)`, so
/// the result does not depend on the worker count. `level = None` is the
/// reflected scheme.
pub fn batch_simulate(
    instance: &ProblemInstance,
    level: Option<u32>,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    options: BatchOptions,
) -> Result<Ensemble> {
    let scheme = scheme_of(level);
    validate_scheme(scheme)?;
    grid.check_against(instance)?;
    if paths == 0 {
        return Err(Error::InvalidArgument("path count must be positive".into()));
    }
    let d = instance.dim();
    let required = Ensemble::footprint(paths, grid, d);
    if required > options.memory_budget {
        return Err(Error::MemoryBudget {
            required,
            budget: options.memory_budget,
        });
    }
    let n = grid.steps;
    let mut x = vec![0.0; paths * (n + 1) * d];
    let mut dk = vec![0.0; paths * n];
    // paths are simulated in waves of blocks and scattered into the time-major arrays
    const BLOCK: usize = 256;
    const WAVE: usize = 64 * BLOCK;
    for wave_start in (0..paths).step_by(WAVE) {
        let wave_end = (wave_start + WAVE).min(paths);
        let blocks: Vec<Vec<PathBundle>> = (wave_start..wave_end)
            .step_by(BLOCK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map_init(
                || Stepper::new(instance, scheme),
                |stepper, start| {
                    (start..(start + BLOCK).min(wave_end))
                        .map(|j| {
                            let mut bundle = PathBundle::empty(
                                *grid,
                                scheme,
                                d,
                                instance.coefficients.noise_dim(),
                            );
                            draw_noise(
                                &mut Stream::for_path(seed, j as u64),
                                grid,
                                bundle.noise_dim,
                                &mut bundle.noise,
                            );
                            integrate(instance, &mut bundle, stepper)?;
                            Ok(bundle)
                        })
                        .collect::<Result<Vec<_>>>()
                },
            )
            .collect::<Result<Vec<_>>>()?;
        for (j, bundle) in (wave_start..wave_end).zip(blocks.iter().flatten()) {
            for i in 0..=n {
                let at = (i * paths + j) * d;
                x[at..at + d].copy_from_slice(bundle.state(i));
            }
            for i in 0..n {
                dk[i * paths + j] = bundle.dk(i);
            }
        }
    }
    Ok(Ensemble {
        grid: *grid,
        scheme,
        dim: d,
        paths,
        x,
        dk,
    })
}

/// Like `batch_simulate` but keeps every full bundle.
pub fn batch_simulate_bundles(
    instance: &ProblemInstance,
    level: Option<u32>,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    options: BatchOptions,
) -> Result<Vec<PathBundle>> {
    let scheme = scheme_of(level);
    let coef = &instance.coefficients;
    let per_path = ((grid.steps as u64 + 1) * (2 * coef.dim() as u64 + 1)
        + grid.steps as u64 * coef.noise_dim() as u64)
        * 8;
    let required = per_path * paths as u64;
    if required > options.memory_budget {
        return Err(Error::MemoryBudget {
            required,
            budget: options.memory_budget,
        });
    }
    (0..paths)
        .into_par_iter()
        .map(|j| {
            simulate_from_stream(
                instance,
                scheme,
                grid,
                &mut Stream::for_path(seed, j as u64),
            )
        })
        .collect()
}

/// Streams paths without storing them: `f(j, bundle)` is evaluated on path
/// `j` and the results are returned in path order.
pub fn map_paths<T, F>(
    instance: &ProblemInstance,
    level: Option<u32>,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &PathBundle) -> T + Sync,
{
    let scheme = scheme_of(level);
    validate_scheme(scheme)?;
    grid.check_against(instance)?;
    let coef = &instance.coefficients;
    (0..paths)
        .into_par_iter()
        .map_init(
            || {
                (
                    Stepper::new(instance, scheme),
                    PathBundle::empty(*grid, scheme, coef.dim(), coef.noise_dim()),
                )
            },
            |(stepper, scratch), j| {
                let mut stream = Stream::for_path(seed, j as u64);
                draw_noise(&mut stream, grid, scratch.noise_dim, &mut scratch.noise);
                integrate(instance, scratch, stepper)?;
                Ok(f(j, scratch))
            },
        )
        .collect()
}

/// Streams coupled paths: for path `j` all schemes in `levels` (and the
/// reflected one) share the increments keyed by `(seed, j)`.
pub fn map_coupled_paths<T, F>(
    instance: &ProblemInstance,
    levels: &[u32],
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &CoupledBundles) -> T + Sync,
{
    if levels.is_empty() {
        return Err(Error::InvalidArgument(
            "coupled simulation needs at least one penalty level".into(),
        ));
    }
    (0..paths)
        .into_par_iter()
        .map(|j| {
            let coupled = simulate_coupled(
                instance,
                levels,
                grid,
                &mut Stream::for_path(seed, j as u64),
            )?;
            Ok(f(j, &coupled))
        })
        .collect()
}

/// Writes `time,path_id,x0..x{d-1},k` rows for each bundle.
pub fn write_paths_csv<W: Write>(bundles: &[PathBundle], mut out: W) -> std::io::Result<()> {
    let Some(first) = bundles.first() else {
        return Ok(());
    };
    let mut header = String::from("time,path_id");
    for i in 0..first.dim {
        header.push_str(&format!(",x{i}"));
    }
    header.push_str(",k");
    writeln!(out, "{header}")?;
    for (id, b) in bundles.iter().enumerate() {
        for i in 0..=b.steps() {
            let mut line = format!("{:.16e},{id}", b.grid.time(i));
            for v in b.state(i) {
                line.push_str(&format!(",{v:.16e}"));
            }
            line.push_str(&format!(",{:.16e}", b.local_time[i]));
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{builtin, ForwardCoefficients};

    fn interval_instance() -> ProblemInstance {
        builtin("affine-flux-interval").unwrap()
    }

    fn frozen(mut inst: ProblemInstance) -> ProblemInstance {
        inst.coefficients = ForwardCoefficients::scaled_brownian(inst.dim(), 0.0);
        inst
    }

    /// Solves `z + 2 n dt (z - proj(z)) = x~` on the interval by bisection.
    fn implicit_penalty_oracle(pre: f64, n: f64, dt: f64) -> f64 {
        let proj = |z: f64| z.clamp(0.0, 1.0);
        let residual = |z: f64| z + 2.0 * n * dt * (z - proj(z)) - pre;
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn penalized_step_inside_is_plain_euler() {
        let inst = interval_instance();
        let s = step_penalized(&inst, 8, &[0.5], &[0.2], 0.01).unwrap();
        assert_eq!(s.x_next, vec![0.7]);
        assert_eq!(s.d_push, vec![0.0]);
        assert_eq!(s.dk, 0.0);
    }

    #[test]
    fn penalized_step_closed_form() {
        // x~ = 1.5 (start 1.0, dW = 0.5), n dt = 0.5
        let inst = interval_instance();
        let s = step_penalized(&inst, 50, &[1.0], &[0.5], 0.01).unwrap();
        assert!((s.x_next[0] - 1.25).abs() < 1e-15);
        assert!((s.d_push[0] + 0.25).abs() < 1e-15);
        assert!((s.dk - 0.25).abs() < 1e-15);
        let oracle = implicit_penalty_oracle(1.5, 50.0, 0.01);
        assert!((s.x_next[0] - oracle).abs() < 1e-12, "oracle {oracle}");
    }

    #[test]
    fn penalized_step_limit_is_projection() {
        let inst = interval_instance();
        let mut last = f64::INFINITY;
        for n in [1u32, 10, 100, 10_000, 1_000_000] {
            let s = step_penalized(&inst, n, &[0.1], &[-0.4], 0.01).unwrap();
            let gap = s.x_next[0].abs();
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 2e-5);
        assert!(step_penalized(&inst, 0, &[0.1], &[0.0], 0.01).is_err());
        assert!(step_penalized(&inst, 1, &[0.1], &[0.0], 0.0).is_err());
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let inst = frozen(builtin("ball-2d-pure-neumann").unwrap());
        let grid = TimeGrid::for_instance(&inst, 50).unwrap();
        let mut s = Stream::for_path(1, 0);
        for bundle in [
            simulate_penalized(&inst, 7, &grid, &mut s).unwrap(),
            simulate_reflected(&inst, &grid, &mut s).unwrap(),
        ] {
            for i in 0..=50 {
                assert_eq!(bundle.state(i), &inst.start.x[..]);
                assert_eq!(bundle.local_time[i], 0.0);
                assert!(bundle.push_at(i).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn bundle_invariants() {
        let inst = builtin("ball-2d-pure-neumann").unwrap();
        let grid = TimeGrid::for_instance(&inst, 400).unwrap();
        for j in 0..20 {
            let mut s = Stream::for_path(5, j);
            let c = simulate_coupled(&inst, &[2, 32], &grid, &mut s).unwrap();
            let r = &c.reflected;
            assert_eq!(r.state(0), &inst.start.x[..]);
            assert_eq!(r.local_time[0], 0.0);
            for i in 0..=grid.steps {
                assert!(inst.domain.contains(r.state(i)));
            }
            for i in 0..grid.steps {
                assert!(r.dk(i) >= 0.0);
                if r.dk(i) > 0.0 {
                    assert!(inst.domain.boundary_depth(r.state(i + 1)).abs() < 1e-12);
                }
            }
            assert!((r.push_variation() - r.terminal_local_time()).abs() < 1e-10);
            for (_, p) in &c.penalized {
                assert_eq!(p.noise, r.noise);
                for i in 0..grid.steps {
                    assert!(p.dk(i) >= 0.0);
                    if p.dk(i) > 0.0 {
                        // the pre-step point lay outside the closure
                        assert!(!inst.domain.contains(p.state(i + 1)));
                    }
                }
                assert!((p.push_variation() - p.terminal_local_time()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reflected_brownian_motion_hits_boundary() {
        let inst = builtin("affine-flux-interval").unwrap();
        let grid = TimeGrid::for_instance(&inst, 1000).unwrap();
        let hits: Vec<usize> = map_paths(&inst, None, &grid, 10_000, 3, |_, b| {
            (0..b.steps()).filter(|&i| b.dk(i) > 0.0).count()
        })
        .unwrap();
        let total: usize = hits.iter().sum();
        assert!(total > 0);
        let paths_hitting = hits.iter().filter(|&&h| h > 0).count();
        assert!(paths_hitting > 9_000, "{paths_hitting}");
    }

    #[test]
    fn deterministic_replay() {
        let inst = builtin("ball-2d-pure-neumann").unwrap();
        let grid = TimeGrid::for_instance(&inst, 100).unwrap();
        let a = simulate_penalized(&inst, 16, &grid, &mut Stream::for_path(9, 4)).unwrap();
        let b = simulate_penalized(&inst, 16, &grid, &mut Stream::for_path(9, 4)).unwrap();
        assert_eq!(a, b);
        let e1 = batch_simulate(&inst, Some(4), &grid, 8, 9, BatchOptions::default()).unwrap();
        let e2 = batch_simulate(&inst, Some(4), &grid, 8, 9, BatchOptions::default()).unwrap();
        assert_eq!(e1, e2);
        // path 4 of the batch is the stream keyed (9, 4)
        let full =
            batch_simulate_bundles(&inst, Some(16), &grid, 8, 9, BatchOptions::default()).unwrap();
        assert_eq!(full[4], a);
        let e3 = batch_simulate(&inst, Some(16), &grid, 8, 9, BatchOptions::default()).unwrap();
        assert_eq!(e3.path_states(4), a.x);
    }

    #[test]
    fn memory_budget_is_enforced() {
        let inst = interval_instance();
        let grid = TimeGrid::for_instance(&inst, 1000).unwrap();
        let err = batch_simulate(
            &inst,
            None,
            &grid,
            1000,
            0,
            BatchOptions {
                memory_budget: 1024,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::MemoryBudget { .. }));
        assert!(err.to_string().contains("streaming"));
    }

    #[test]
    fn grid_must_match_instance() {
        let inst = interval_instance();
        let grid = TimeGrid::new(0.2, 1.0, 10).unwrap();
        let mut s = Stream::for_path(0, 0);
        assert!(matches!(
            simulate_reflected(&inst, &grid, &mut s),
            Err(Error::GridMismatch(_))
        ));
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        let g = TimeGrid::new(0.0, 1.0, 3).unwrap();
        assert_eq!(g.time(3), 1.0);
    }

    #[test]
    fn path_dump_has_expected_shape() {
        let inst = builtin("ball-2d-pure-neumann").unwrap();
        let grid = TimeGrid::for_instance(&inst, 10).unwrap();
        let bundles =
            batch_simulate_bundles(&inst, None, &grid, 2, 1, BatchOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_paths_csv(&bundles, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,path_id,x0,x1,k"));
        assert_eq!(lines.count(), 22);
    }
}
