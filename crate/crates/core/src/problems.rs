//! Problem instances: forward coefficients, backward drivers, terminal data,
//! sampled assumption checks and manufactured solutions.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{ConvexDomain, SampleRegion};
use crate::rng::Stream;

/// `b(x)` written into a length-`d` buffer.
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `sigma(x)` written row-major into a `d x d'` buffer.
pub type DiffusionFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `f(t, x, y)` or `h(t, x, y)` written into a length-`k` buffer.
pub type DriverFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `g(x)` written into a length-`k` buffer.
pub type TerminalFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

pub const BUILTIN_NAMES: [&str; 5] = [
    "neumann-heat-interval",
    "affine-flux-interval",
    "ball-2d-pure-neumann",
    "nonlinear-manufactured-interval",
    "discontinuous-drift-interval",
];

/// Slack allowed on sampled inequalities that hold exactly in exact arithmetic.
pub const ASSUMPTION_SLACK: f64 = 1e-9;
/// Residual tolerance for exact solutions against their PDE and boundary condition.
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone)]
pub struct ForwardCoefficients {
    dim: usize,
    noise_dim: usize,
    drift: DriftFn,
    diffusion: DiffusionFn,
    pub bound_b: f64,
    pub bound_sigma: f64,
    pub ellipticity_alpha: f64,
}

impl fmt::Debug for ForwardCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardCoefficients")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("bound_b", &self.bound_b)
            .field("bound_sigma", &self.bound_sigma)
            .field("ellipticity_alpha", &self.ellipticity_alpha)
            .finish_non_exhaustive()
    }
}

impl ForwardCoefficients {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: DriftFn,
        diffusion: DiffusionFn,
        bound_b: f64,
        bound_sigma: f64,
        ellipticity_alpha: f64,
    ) -> Result<Self> {
        if dim == 0 || noise_dim == 0 {
            return Err(Error::InvalidArgument(
                "state and noise dimensions must be positive".into(),
            ));
        }
        for (name, v) in [
            ("bound_b", bound_b),
            ("bound_sigma", bound_sigma),
            ("ellipticity_alpha", ellipticity_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        Ok(Self {
            dim,
            noise_dim,
            drift,
            diffusion,
            bound_b,
            bound_sigma,
            ellipticity_alpha,
        })
    }

    /// `b = 0`, `sigma = scale * I`.
    pub fn scaled_brownian(dim: usize, scale: f64) -> Self {
        let diffusion: DiffusionFn = Arc::new(move |_x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = scale;
            }
        });
        Self {
            dim,
            noise_dim: dim,
            drift: Arc::new(|_x: &[f64], out: &mut [f64]| out.fill(0.0)),
            diffusion,
            bound_b: 0.0,
            bound_sigma: scale.abs(),
            ellipticity_alpha: scale * scale,
        }
    }

    pub fn brownian(dim: usize) -> Self {
        Self::scaled_brownian(dim, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn with_drift(mut self, drift: DriftFn, bound_b: f64) -> Self {
        self.drift = drift;
        self.bound_b = bound_b;
        self
    }

    /// `sigma sigma^*(x)` as a `d x d` matrix.
    pub fn covariance(&self, x: &[f64]) -> DMatrix<f64> {
        let mut s = vec![0.0; self.dim * self.noise_dim];
        self.diffusion(x, &mut s);
        let sigma = DMatrix::from_row_slice(self.dim, self.noise_dim, &s);
        &sigma * sigma.transpose()
    }

    /// `L u_i = 1/2 tr(sigma sigma^* Hess u_i) + <b, grad u_i>` for one component.
    fn generator(&self, x: &[f64], grad: &[f64], hess: &[f64]) -> f64 {
        let (d, dp) = (self.dim, self.noise_dim);
        with_scratch(d + d * dp, |buf| {
            let (b, s) = buf.split_at_mut(d);
            self.drift(x, b);
            self.diffusion(x, s);
            let mut out = 0.0;
            for i in 0..d {
                out += b[i] * grad[i];
                for j in 0..d {
                    let a_ij: f64 = (0..dp).map(|m| s[i * dp + m] * s[j * dp + m]).sum();
                    out += 0.5 * a_ij * hess[i * d + j];
                }
            }
            out
        })
    }
}

/// Runs `f` on a zeroed scratch buffer, on the stack when small.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    const STACK: usize = 64;
    if len <= STACK {
        let mut buf = [0.0f64; STACK];
        f(&mut buf[..len])
    } else {
        f(&mut vec![0.0; len])
    }
}

/// Constants of the monotonicity, Lipschitz and growth assumptions on the
/// backward data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriverConstants {
    pub mu_f: f64,
    pub beta: f64,
    pub l_h: f64,
    pub c1: f64,
    pub c2: f64,
    pub q: f64,
}

#[derive(Clone)]
pub struct BsdeDrivers {
    value_dim: usize,
    interior: DriverFn,
    boundary: DriverFn,
    terminal: TerminalFn,
    interior_uses_y: bool,
    boundary_uses_y: bool,
    pub constants: DriverConstants,
}

impl fmt::Debug for BsdeDrivers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BsdeDrivers")
            .field("value_dim", &self.value_dim)
            .field("interior_uses_y", &self.interior_uses_y)
            .field("boundary_uses_y", &self.boundary_uses_y)
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

impl BsdeDrivers {
    /// `interior_uses_y` / `boundary_uses_y` declare whether `f` / `h` depend
    /// on `y`; the linear Monte Carlo estimator refuses instances that do.
    pub fn new(
        value_dim: usize,
        interior: DriverFn,
        interior_uses_y: bool,
        boundary: DriverFn,
        boundary_uses_y: bool,
        terminal: TerminalFn,
        constants: DriverConstants,
    ) -> Result<Self> {
        if value_dim == 0 {
            return Err(Error::InvalidArgument(
                "value dimension must be positive".into(),
            ));
        }
        if constants.beta > 0.0 {
            return Err(Error::InvalidArgument("beta must be <= 0".into()));
        }
        if constants.q < 1.0 {
            return Err(Error::InvalidArgument("q must be >= 1".into()));
        }
        Ok(Self {
            value_dim,
            interior,
            boundary,
            terminal,
            interior_uses_y,
            boundary_uses_y,
            constants,
        })
    }

    /// `f = h = 0` with terminal data `g`.
    pub fn terminal_only(value_dim: usize, terminal: TerminalFn, c2: f64, q: f64) -> Self {
        let zero: DriverFn =
            Arc::new(|_t: f64, _x: &[f64], _y: &[f64], out: &mut [f64]| out.fill(0.0));
        Self {
            value_dim,
            interior: zero.clone(),
            boundary: zero,
            terminal,
            interior_uses_y: false,
            boundary_uses_y: false,
            constants: DriverConstants {
                mu_f: 0.0,
                beta: 0.0,
                l_h: 0.0,
                c1: 1.0,
                c2,
                q,
            },
        }
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn is_y_free(&self) -> bool {
        !self.interior_uses_y && !self.boundary_uses_y
    }

    pub fn interior(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.interior)(t, x, y, out)
    }

    pub fn boundary(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.boundary)(t, x, y, out)
    }

    pub fn terminal(&self, x: &[f64], out: &mut [f64]) {
        (self.terminal)(x, out)
    }

    pub fn terminal_fn(&self) -> TerminalFn {
        self.terminal.clone()
    }

    pub fn with_terminal(mut self, terminal: TerminalFn) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_interior(mut self, interior: DriverFn, uses_y: bool) -> Self {
        self.interior = interior;
        self.interior_uses_y = uses_y;
        self
    }

    pub fn with_boundary(mut self, boundary: DriverFn, uses_y: bool) -> Self {
        self.boundary = boundary;
        self.boundary_uses_y = uses_y;
        self
    }
}

/// A smooth field `u: [0,T] x R^d -> R^k` with analytic derivatives.
pub trait SmoothField: Send + Sync {
    fn value_dim(&self) -> usize;
    fn value(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn time_derivative(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Row-major `k x d`.
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Row-major `k x d x d`.
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]);
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StartPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub domain: ConvexDomain,
    pub coefficients: ForwardCoefficients,
    pub drivers: BsdeDrivers,
    pub horizon: f64,
    pub start: StartPoint,
    pub exact_solution: Option<Arc<dyn SmoothField>>,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("coefficients", &self.coefficients)
            .field("drivers", &self.drivers)
            .field("horizon", &self.horizon)
            .field("start", &self.start)
            .field("exact_solution", &self.exact_solution.is_some())
            .finish()
    }
}

impl ProblemInstance {
    pub fn new(
        name: impl Into<String>,
        domain: ConvexDomain,
        coefficients: ForwardCoefficients,
        drivers: BsdeDrivers,
        horizon: f64,
        start: StartPoint,
    ) -> Result<Self> {
        if coefficients.dim() != domain.dim() {
            return Err(Error::InvalidArgument(format!(
                "coefficients act on R^{} but the domain lives in R^{}",
                coefficients.dim(),
                domain.dim()
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        let mut instance = Self {
            name: name.into(),
            domain,
            coefficients,
            drivers,
            horizon,
            start: StartPoint {
                t: 0.0,
                x: Vec::new(),
            },
            exact_solution: None,
        };
        instance.set_start(start)?;
        Ok(instance)
    }

    pub fn with_exact_solution(mut self, u: Arc<dyn SmoothField>) -> Result<Self> {
        if u.value_dim() != self.drivers.value_dim() {
            return Err(Error::InvalidArgument(
                "exact solution has the wrong value dimension".into(),
            ));
        }
        self.exact_solution = Some(u);
        Ok(self)
    }

    pub fn set_start(&mut self, start: StartPoint) -> Result<()> {
        if start.x.len() != self.domain.dim() {
            return Err(Error::InvalidArgument(
                "start point has the wrong dimension".into(),
            ));
        }
        if !(0.0..=self.horizon).contains(&start.t) || start.t >= self.horizon {
            return Err(Error::InvalidArgument(format!(
                "start time {} must lie in [0, {})",
                start.t, self.horizon
            )));
        }
        if !self.domain.contains(&start.x) {
            return Err(Error::InvalidArgument(
                "start point must lie in the closed domain".into(),
            ));
        }
        self.start = start;
        Ok(())
    }

    pub fn set_horizon(&mut self, horizon: f64) -> Result<()> {
        if !(horizon.is_finite() && horizon > self.start.t) {
            return Err(Error::InvalidArgument(
                "horizon must exceed the start time".into(),
            ));
        }
        self.horizon = horizon;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn value_dim(&self) -> usize {
        self.drivers.value_dim()
    }

    /// Exact value at `(t, x)` when known.
    pub fn exact_value(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        self.exact_solution.as_ref().map(|u| {
            let mut out = vec![0.0; u.value_dim()];
            u.value(t, x, &mut out);
            out
        })
    }

    /// Interior residual `d_t u + L u + f(t, x, u)` of the exact solution.
    pub fn interior_residual(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let u = self.exact_solution.as_ref()?;
        let (k, d) = (u.value_dim(), self.dim());
        let mut val = vec![0.0; k];
        let mut dt = vec![0.0; k];
        let mut grad = vec![0.0; k * d];
        let mut hess = vec![0.0; k * d * d];
        u.value(t, x, &mut val);
        u.time_derivative(t, x, &mut dt);
        u.gradient(t, x, &mut grad);
        u.hessian(t, x, &mut hess);
        let mut f = vec![0.0; k];
        self.drivers.interior(t, x, &val, &mut f);
        Some(
            (0..k)
                .map(|i| {
                    dt[i]
                        + self.coefficients.generator(
                            x,
                            &grad[i * d..(i + 1) * d],
                            &hess[i * d * d..(i + 1) * d * d],
                        )
                        + f[i]
                })
                .collect(),
        )
    }

    /// Boundary residual `<grad l, grad u> + h(t, x, u)` of the exact solution.
    pub fn boundary_residual(&self, t: f64, x: &[f64]) -> Option<Result<Vec<f64>>> {
        let u = self.exact_solution.as_ref()?;
        Some((|| {
            let (k, d) = (u.value_dim(), self.dim());
            let normal = self.domain.inward_normal(x)?;
            let mut val = vec![0.0; k];
            let mut grad = vec![0.0; k * d];
            u.value(t, x, &mut val);
            u.gradient(t, x, &mut grad);
            let mut h = vec![0.0; k];
            self.drivers.boundary(t, x, &val, &mut h);
            Ok((0..k)
                .map(|i| {
                    let dn: f64 = (0..d).map(|j| normal[j] * grad[i * d + j]).sum();
                    dn + h[i]
                })
                .collect())
        })())
    }
}

// ---------------------------------------------------------------------------
// validation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Largest sampled amount by which the inequality failed (0 if never).
    pub worst_violation: f64,
    pub tolerance: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub problem: String,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    worst: f64,
    samples: usize,
    finite: bool,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            worst: 0.0,
            samples: 0,
            finite: true,
        }
    }

    /// Records `excess = lhs - rhs` of an inequality `lhs <= rhs`.
    fn record(&mut self, excess: f64) {
        self.samples += 1;
        if !excess.is_finite() {
            self.finite = false;
        } else if excess > self.worst {
            self.worst = excess;
        }
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            name: self.name.to_string(),
            passed: self.finite && self.worst <= self.tolerance,
            worst_violation: if self.finite {
                self.worst
            } else {
                f64::INFINITY
            },
            tolerance: self.tolerance,
            samples: self.samples,
        }
    }
}

fn vnorm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn vdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Samples the forward and backward assumptions (and the exact-solution
/// residuals when an exact solution is attached). Never aborts on failure.
pub fn validate_instance(
    instance: &ProblemInstance,
    sample_budget: usize,
    stream: &mut Stream,
) -> Result<ValidationReport> {
    if sample_budget < 100 {
        return Err(Error::InvalidArgument(
            "sample budget must be at least 100".into(),
        ));
    }
    let dom = &instance.domain;
    let coef = &instance.coefficients;
    let drv = &instance.drivers;
    let (d, dp, k) = (coef.dim(), coef.noise_dim(), drv.value_dim());
    let horizon = instance.horizon;
    let side = sample_budget / 4 + 1;
    let interior = dom.sample_points(sample_budget, SampleRegion::Interior, stream)?;
    let boundary = dom.sample_points(side, SampleRegion::Boundary, stream)?;
    let shell = dom.sample_points(side, SampleRegion::ExteriorShell { width: 0.5 }, stream)?;
    let everywhere: Vec<&Vec<f64>> = interior.iter().chain(&boundary).chain(&shell).collect();
    let outer: Vec<&Vec<f64>> = boundary.iter().chain(&shell).collect();
    let c = drv.constants;

    let mut checks = Vec::new();

    let mut drift_bound = Tally::new("drift bound", 0.0);
    let mut sigma_bound = Tally::new("diffusion bound", 0.0);
    let mut ellipticity = Tally::new("ellipticity", 0.0);
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * dp];
    for x in &everywhere {
        coef.drift(x, &mut b);
        drift_bound.record(vnorm(&b) - coef.bound_b);
        coef.diffusion(x, &mut s);
        let sigma = DMatrix::from_row_slice(d, dp, &s);
        let op_norm = sigma.singular_values().iter().cloned().fold(0.0, f64::max);
        sigma_bound.record(op_norm - coef.bound_sigma);
        let cov = &sigma * sigma.transpose();
        let min_eig = cov
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        ellipticity.record(coef.ellipticity_alpha - min_eig);
    }
    checks.extend([
        drift_bound.finish(),
        sigma_bound.finish(),
        ellipticity.finish(),
    ]);

    let draw_y =
        |stream: &mut Stream| -> Vec<f64> { (0..k).map(|_| 2.0 * stream.normal()).collect() };
    let mut f1 = vec![0.0; k];
    let mut f2 = vec![0.0; k];

    let mut mono_f = Tally::new("interior monotonicity", ASSUMPTION_SLACK);
    for x in &interior {
        let t = stream.uniform_in(0.0, horizon);
        let (y1, y2) = (draw_y(stream), draw_y(stream));
        drv.interior(t, x, &y1, &mut f1);
        drv.interior(t, x, &y2, &mut f2);
        let inner: f64 = (0..k).map(|i| (y2[i] - y1[i]) * (f2[i] - f1[i])).sum();
        mono_f.record(inner - c.mu_f * vdist(&y1, &y2).powi(2));
    }
    checks.push(mono_f.finish());

    let mut lip_h = Tally::new("boundary Lipschitz", ASSUMPTION_SLACK);
    let mut mono_h = Tally::new("boundary monotonicity", ASSUMPTION_SLACK);
    for (i, x) in outer.iter().enumerate() {
        let x2 = outer[stream.below(outer.len())];
        let _ = i;
        let (t1, t2) = (
            stream.uniform_in(0.0, horizon),
            stream.uniform_in(0.0, horizon),
        );
        let (y1, y2) = (draw_y(stream), draw_y(stream));
        drv.boundary(t1, x, &y1, &mut f1);
        drv.boundary(t2, x2, &y2, &mut f2);
        let rhs = c.l_h * ((t1 - t2).abs() + vdist(x, x2) + vdist(&y1, &y2));
        lip_h.record(vdist(&f1, &f2) - rhs);
        drv.boundary(t1, x, &y2, &mut f2);
        let inner: f64 = (0..k).map(|j| (y2[j] - y1[j]) * (f2[j] - f1[j])).sum();
        mono_h.record(inner - c.beta * vdist(&y1, &y2).powi(2));
    }
    checks.extend([lip_h.finish(), mono_h.finish()]);

    let mut growth = Tally::new("driver growth", ASSUMPTION_SLACK);
    let mut terminal_growth = Tally::new("terminal growth", ASSUMPTION_SLACK);
    for x in &everywhere {
        let t = stream.uniform_in(0.0, horizon);
        let y = draw_y(stream);
        drv.interior(t, x, &y, &mut f1);
        drv.boundary(t, x, &y, &mut f2);
        growth.record(vnorm(&f1) + vnorm(&f2) - c.c1 * (1.0 + vnorm(&y)));
        drv.terminal(x, &mut f1);
        terminal_growth.record(vnorm(&f1) - c.c2 * (1.0 + vnorm(x).powf(c.q)));
    }
    checks.extend([growth.finish(), terminal_growth.finish()]);

    if let Some(u) = &instance.exact_solution {
        let mut pde = Tally::new("exact solution interior residual", RESIDUAL_TOL);
        for x in &interior {
            let t = stream.uniform_in(0.0, horizon);
            let r = instance
                .interior_residual(t, x)
                .expect("exact solution present");
            pde.record(vnorm(&r));
        }
        let mut neumann = Tally::new("exact solution boundary residual", RESIDUAL_TOL);
        for x in &boundary {
            let t = stream.uniform_in(0.0, horizon);
            match instance
                .boundary_residual(t, x)
                .expect("exact solution present")
            {
                Ok(r) => neumann.record(vnorm(&r)),
                Err(_) => neumann.record(f64::INFINITY),
            }
        }
        let mut terminal = Tally::new("exact solution terminal condition", RESIDUAL_TOL);
        let mut uv = vec![0.0; k];
        for x in interior.iter().chain(&boundary) {
            u.value(horizon, x, &mut uv);
            drv.terminal(x, &mut f1);
            terminal.record(vdist(&uv, &f1));
        }
        checks.extend([pde.finish(), neumann.finish(), terminal.finish()]);
    }

    Ok(ValidationReport {
        problem: instance.name.clone(),
        checks,
    })
}

// ---------------------------------------------------------------------------
// manufactured solutions

const FD_POINTS: usize = 100;
const FD_REL_TOL: f64 = 1e-4;
const FD_SEED: u64 = 0x6d61_6e75;

/// Compares the analytic derivatives of `u` with central differences at
/// random points of `[0, T] x D`.
pub fn check_derivatives(u: &dyn SmoothField, domain: &ConvexDomain, horizon: f64) -> Result<()> {
    let mut stream = Stream::auxiliary(FD_SEED, 0);
    let (k, d) = (u.value_dim(), domain.dim());
    let points = domain.sample_points(FD_POINTS, SampleRegion::Interior, &mut stream)?;
    let mut plus = vec![0.0; k];
    let mut minus = vec![0.0; k];
    let mut dt = vec![0.0; k];
    let mut grad = vec![0.0; k * d];
    let mut grad_p = vec![0.0; k * d];
    let mut grad_m = vec![0.0; k * d];
    let mut hess = vec![0.0; k * d * d];
    let mismatch = |fd: f64, an: f64| (fd - an).abs() > FD_REL_TOL * an.abs().max(1.0);
    for x in points {
        let t = stream.uniform_in(0.0, horizon);
        let ht = 1e-5 * t.abs().max(1.0);
        u.value(t + ht, &x, &mut plus);
        u.value(t - ht, &x, &mut minus);
        u.time_derivative(t, &x, &mut dt);
        for i in 0..k {
            let fd = (plus[i] - minus[i]) / (2.0 * ht);
            if mismatch(fd, dt[i]) {
                return Err(Error::DerivativeMismatch {
                    what: "time derivative",
                    at: x.clone(),
                    analytic: dt[i],
                    finite_difference: fd,
                });
            }
        }
        u.gradient(t, &x, &mut grad);
        u.hessian(t, &x, &mut hess);
        for j in 0..d {
            let hx = 1e-5 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += hx;
            xm[j] -= hx;
            u.value(t, &xp, &mut plus);
            u.value(t, &xm, &mut minus);
            u.gradient(t, &xp, &mut grad_p);
            u.gradient(t, &xm, &mut grad_m);
            for i in 0..k {
                let fd = (plus[i] - minus[i]) / (2.0 * hx);
                if mismatch(fd, grad[i * d + j]) {
                    return Err(Error::DerivativeMismatch {
                        what: "gradient",
                        at: x.clone(),
                        analytic: grad[i * d + j],
                        finite_difference: fd,
                    });
                }
                for l in 0..d {
                    let fd = (grad_p[i * d + l] - grad_m[i * d + l]) / (2.0 * hx);
                    let an = hess[(i * d + l) * d + j];
                    if mismatch(fd, an) {
                        return Err(Error::DerivativeMismatch {
                            what: "hessian",
                            at: x.clone(),
                            analytic: an,
                            finite_difference: fd,
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Builds an instance whose exact solution is `u`:
///
/// `f(t,x,y) = -d_t u - L u + kappa (y - u)` and
/// `h(t,x,y) = -<grad l, grad u> - beta u + beta y`,
///
/// so `u` solves the interior equation and the Neumann condition, `f` is
/// monotone with constant `kappa` and `h` with constant `beta`. The remaining
/// constants (`l_h`, `c1`, `c2`, `q = 2`) are estimated by sampling.
pub fn manufacture(
    name: impl Into<String>,
    u: Arc<dyn SmoothField>,
    domain: ConvexDomain,
    coefficients: ForwardCoefficients,
    kappa: f64,
    beta: f64,
    horizon: f64,
    start: StartPoint,
) -> Result<ProblemInstance> {
    if kappa > 0.0 {
        return Err(Error::InvalidArgument("kappa must be <= 0".into()));
    }
    if beta > 0.0 {
        return Err(Error::InvalidArgument("beta must be <= 0".into()));
    }
    check_derivatives(u.as_ref(), &domain, horizon)?;
    let (k, d) = (u.value_dim(), domain.dim());

    let source_field = u.clone();
    let source_coef = coefficients.clone();
    let interior: DriverFn = Arc::new(move |t: f64, x: &[f64], y: &[f64], out: &mut [f64]| {
        let u = &source_field;
        with_scratch(k * (2 + d + d * d), |buf| {
            let (val, rest) = buf.split_at_mut(k);
            let (dt, rest) = rest.split_at_mut(k);
            let (grad, hess) = rest.split_at_mut(k * d);
            u.value(t, x, val);
            u.time_derivative(t, x, dt);
            u.gradient(t, x, grad);
            u.hessian(t, x, hess);
            for i in 0..k {
                let lu = source_coef.generator(
                    x,
                    &grad[i * d..(i + 1) * d],
                    &hess[i * d * d..(i + 1) * d * d],
                );
                out[i] = -dt[i] - lu + kappa * (y[i] - val[i]);
            }
        })
    });

    let flux_field = u.clone();
    let flux_domain = domain.clone();
    let boundary: DriverFn = Arc::new(move |t: f64, x: &[f64], y: &[f64], out: &mut [f64]| {
        let normal = flux_domain.extended_normal(x);
        with_scratch(k * (1 + d), |buf| {
            let (val, grad) = buf.split_at_mut(k);
            flux_field.value(t, x, val);
            flux_field.gradient(t, x, grad);
            for i in 0..k {
                let dn: f64 = (0..d).map(|j| normal[j] * grad[i * d + j]).sum();
                out[i] = -dn - beta * val[i] + beta * y[i];
            }
        })
    });

    let terminal_field = u.clone();
    let terminal: TerminalFn =
        Arc::new(move |x: &[f64], out: &mut [f64]| terminal_field.value(horizon, x, out));

    let provisional = DriverConstants {
        mu_f: kappa,
        beta,
        l_h: 0.0,
        c1: 0.0,
        c2: 0.0,
        q: 2.0,
    };
    let mut drivers = BsdeDrivers::new(
        k,
        interior,
        kappa != 0.0,
        boundary,
        beta != 0.0,
        terminal,
        provisional,
    )?;
    drivers.constants = sampled_constants(&drivers, &domain, horizon, provisional)?;

    ProblemInstance::new(name, domain, coefficients, drivers, horizon, start)?
        .with_exact_solution(u)
}

/// Sampled estimates of `l_h`, `c1`, `c2` with a 25% margin.
fn sampled_constants(
    drivers: &BsdeDrivers,
    domain: &ConvexDomain,
    horizon: f64,
    mut constants: DriverConstants,
) -> Result<DriverConstants> {
    let mut stream = Stream::auxiliary(FD_SEED, 1);
    let k = drivers.value_dim();
    let inner = domain.sample_points(400, SampleRegion::Interior, &mut stream)?;
    let bd = domain.sample_points(200, SampleRegion::Boundary, &mut stream)?;
    let shell =
        domain.sample_points(200, SampleRegion::ExteriorShell { width: 0.5 }, &mut stream)?;
    let outer: Vec<&Vec<f64>> = bd.iter().chain(&shell).collect();
    let mut a = vec![0.0; k];
    let mut b = vec![0.0; k];
    let (mut l_h, mut c1, mut c2) = (0.0f64, 0.0f64, 0.0f64);
    for x in &outer {
        let x2 = outer[stream.below(outer.len())];
        let (t1, t2) = (
            stream.uniform_in(0.0, horizon),
            stream.uniform_in(0.0, horizon),
        );
        let y1: Vec<f64> = (0..k).map(|_| 2.0 * stream.normal()).collect();
        let y2: Vec<f64> = (0..k).map(|_| 2.0 * stream.normal()).collect();
        drivers.boundary(t1, x, &y1, &mut a);
        drivers.boundary(t2, x2, &y2, &mut b);
        let span = (t1 - t2).abs() + vdist(x, x2) + vdist(&y1, &y2);
        if span > 0.0 {
            l_h = l_h.max(vdist(&a, &b) / span);
        }
    }
    for x in inner.iter().chain(outer.iter().copied()) {
        let t = stream.uniform_in(0.0, horizon);
        let y: Vec<f64> = (0..k).map(|_| 2.0 * stream.normal()).collect();
        drivers.interior(t, x, &y, &mut a);
        drivers.boundary(t, x, &y, &mut b);
        c1 = c1.max((vnorm(&a) + vnorm(&b)) / (1.0 + vnorm(&y)));
        drivers.terminal(x, &mut a);
        c2 = c2.max(vnorm(&a) / (1.0 + vnorm(x).powf(constants.q)));
    }
    constants.l_h = 1.25 * l_h.max(constants.beta.abs());
    constants.c1 = 1.25
        * c1.max(constants.mu_f.abs() + constants.beta.abs())
            .max(1e-12);
    constants.c2 = 1.25 * c2.max(1e-12);
    Ok(constants)
}

// ---------------------------------------------------------------------------
// closed-form fields used by the built-in problems

/// `exp(-pi^2 (T - t) / 2) cos(pi x)` on an interval: a Neumann eigenmode of
/// the heat equation with generator `1/2 d^2/dx^2`.
#[derive(Clone, Copy, Debug)]
pub struct HeatEigenmode {
    pub horizon: f64,
}

impl HeatEigenmode {
    fn decay(&self, t: f64) -> f64 {
        (-PI * PI * (self.horizon - t) / 2.0).exp()
    }
}

impl SmoothField for HeatEigenmode {
    fn value_dim(&self) -> usize {
        1
    }
    fn value(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.decay(t) * (PI * x[0]).cos();
    }
    fn time_derivative(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = PI * PI / 2.0 * self.decay(t) * (PI * x[0]).cos();
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = -PI * self.decay(t) * (PI * x[0]).sin();
    }
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = -PI * PI * self.decay(t) * (PI * x[0]).cos();
    }
}

/// `u(t, x) = <w, x> + c`.
#[derive(Clone, Debug)]
pub struct AffineField {
    pub weights: Vec<f64>,
    pub offset: f64,
}

impl SmoothField for AffineField {
    fn value_dim(&self) -> usize {
        1
    }
    fn value(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.offset + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
    fn time_derivative(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn gradient(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.weights);
    }
    fn hessian(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `u(t, x) = exp(-(T - t)) (1 + |x|^2) / 4`.
#[derive(Clone, Copy, Debug)]
pub struct DecayingQuadratic {
    pub horizon: f64,
}

impl SmoothField for DecayingQuadratic {
    fn value_dim(&self) -> usize {
        1
    }
    fn value(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        out[0] = (-(self.horizon - t)).exp() * (1.0 + r2) / 4.0;
    }
    fn time_derivative(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.value(t, x, out);
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let e = (-(self.horizon - t)).exp();
        for (o, v) in out.iter_mut().zip(x) {
            *o = e * v / 2.0;
        }
    }
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let e = (-(self.horizon - t)).exp();
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = e / 2.0;
        }
    }
}

// ---------------------------------------------------------------------------
// built-in problems

fn zero_driver() -> DriverFn {
    Arc::new(|_t: f64, _x: &[f64], _y: &[f64], out: &mut [f64]| out.fill(0.0))
}

pub fn builtin(name: &str) -> Result<ProblemInstance> {
    let horizon = 1.0;
    match name {
        "neumann-heat-interval" => {
            let mode = HeatEigenmode { horizon };
            let terminal: TerminalFn =
                Arc::new(|x: &[f64], out: &mut [f64]| out[0] = (PI * x[0]).cos());
            ProblemInstance::new(
                name,
                ConvexDomain::interval(0.0, 1.0)?,
                ForwardCoefficients::brownian(1),
                BsdeDrivers::terminal_only(1, terminal, 1.0, 1.0),
                horizon,
                StartPoint {
                    t: 0.5,
                    x: vec![0.3],
                },
            )?
            .with_exact_solution(Arc::new(mode))
        }
        "affine-flux-interval" => {
            let terminal: TerminalFn = Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0]);
            // -<grad l, grad u> for u = x on [0, 1], extended through the projection
            let flux: DriverFn = Arc::new(|_t: f64, x: &[f64], _y: &[f64], out: &mut [f64]| {
                out[0] = 2.0 * x[0].clamp(0.0, 1.0) - 1.0
            });
            let drivers = BsdeDrivers::new(
                1,
                zero_driver(),
                false,
                flux,
                false,
                terminal,
                DriverConstants {
                    mu_f: 0.0,
                    beta: 0.0,
                    l_h: 2.0,
                    c1: 1.0,
                    c2: 1.0,
                    q: 1.0,
                },
            )?;
            ProblemInstance::new(
                name,
                ConvexDomain::interval(0.0, 1.0)?,
                ForwardCoefficients::brownian(1),
                drivers,
                horizon,
                StartPoint {
                    t: 0.0,
                    x: vec![0.5],
                },
            )?
            .with_exact_solution(Arc::new(AffineField {
                weights: vec![1.0],
                offset: 0.0,
            }))
        }
        "ball-2d-pure-neumann" => {
            let terminal: TerminalFn =
                Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] + x[1] * x[1]);
            ProblemInstance::new(
                name,
                ConvexDomain::ball(vec![0.0, 0.0], 1.0)?,
                ForwardCoefficients::brownian(2),
                BsdeDrivers::terminal_only(1, terminal, 1.0, 2.0),
                horizon,
                StartPoint {
                    t: 0.0,
                    x: vec![0.5, 0.0],
                },
            )
        }
        "nonlinear-manufactured-interval" => manufacture(
            name,
            Arc::new(DecayingQuadratic { horizon }),
            ConvexDomain::interval(0.0, 1.0)?,
            ForwardCoefficients::brownian(1),
            -1.0,
            -1.0,
            horizon,
            StartPoint {
                t: 0.0,
                x: vec![0.5],
            },
        ),
        "discontinuous-drift-interval" => {
            let drift: DriftFn = Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = 0.5
                    * if x[0] > 0.5 {
                        1.0
                    } else if x[0] < 0.5 {
                        -1.0
                    } else {
                        0.0
                    }
            });
            let terminal: TerminalFn = Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]);
            ProblemInstance::new(
                name,
                ConvexDomain::interval(0.0, 1.0)?,
                ForwardCoefficients::brownian(1).with_drift(drift, 0.5),
                BsdeDrivers::terminal_only(1, terminal, 1.0, 2.0),
                horizon,
                StartPoint {
                    t: 0.0,
                    x: vec![0.5],
                },
            )
        }
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}
