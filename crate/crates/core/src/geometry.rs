//! Convex domains: projection onto the closure, distance, penalty vector and
//! inward normal field.
//!
//! The penalty vector is `delta(x) = grad dist^2(x, D) = 2 (x - proj(x))`. Outside
//! the closed domain the inward normal is extended as `-delta / |delta|`, so
//! `<normal(x), delta(x)> = -|delta(x)| <= 0` holds everywhere.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Points within this distance of the boundary count as boundary points.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// Convergence tolerance of the halfspace-intersection projection.
pub const PROJECTION_TOL: f64 = 1e-10;
pub const PROJECTION_MAX_ITER: usize = 10_000;

const CONTAINS_REL_TOL: f64 = 1e-12;

/// Serializable description of a convex domain.
///
/// Halfspaces are `<normal_i, x> <= offset_i` with unit outward normals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConvexDomainSpec {
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    HalfspaceIntersection {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
    },
}

/// Result of querying a point against the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryData {
    pub projection: Vec<f64>,
    pub distance: f64,
    pub inward_normal: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleRegion {
    Interior,
    Boundary,
    /// Points outside the closure at distance in `(0, width]`.
    ExteriorShell {
        width: f64,
    },
}

/// A validated convex domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConvexDomainSpec", into = "ConvexDomainSpec")]
pub struct ConvexDomain {
    spec: ConvexDomainSpec,
    bbox_lo: Vec<f64>,
    bbox_hi: Vec<f64>,
    anchor: Vec<f64>,
}

impl TryFrom<ConvexDomainSpec> for ConvexDomain {
    type Error = Error;

    fn try_from(spec: ConvexDomainSpec) -> Result<Self> {
        Self::new(spec)
    }
}

impl From<ConvexDomain> for ConvexDomainSpec {
    fn from(domain: ConvexDomain) -> Self {
        domain.spec
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidDomain(msg.into())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ConvexDomain {
    pub fn new(spec: ConvexDomainSpec) -> Result<Self> {
        match &spec {
            ConvexDomainSpec::Ball { center, radius } => {
                if center.is_empty() {
                    return Err(invalid("ball center has dimension 0"));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(invalid(format!(
                        "ball radius must be positive, got {radius}"
                    )));
                }
                if center.iter().any(|c| !c.is_finite()) {
                    return Err(invalid("ball center must be finite"));
                }
                let bbox_lo = center.iter().map(|c| c - radius).collect();
                let bbox_hi = center.iter().map(|c| c + radius).collect();
                Ok(Self {
                    anchor: center.clone(),
                    spec,
                    bbox_lo,
                    bbox_hi,
                })
            }
            ConvexDomainSpec::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(invalid("box corners must have equal, nonzero dimension"));
                }
                if lo
                    .iter()
                    .zip(hi)
                    .any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b))
                {
                    return Err(invalid("box requires finite lo < hi componentwise"));
                }
                let anchor = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
                Ok(Self {
                    bbox_lo: lo.clone(),
                    bbox_hi: hi.clone(),
                    anchor,
                    spec,
                })
            }
            ConvexDomainSpec::HalfspaceIntersection { normals, offsets } => {
                let (lo, hi, anchor) = validate_polytope(normals, offsets)?;
                Ok(Self {
                    spec,
                    bbox_lo: lo,
                    bbox_hi: hi,
                    anchor,
                })
            }
        }
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        Self::new(ConvexDomainSpec::Ball { center, radius })
    }

    pub fn cube(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        Self::new(ConvexDomainSpec::Box { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::cube(vec![lo], vec![hi])
    }

    pub fn halfspaces(normals: Vec<Vec<f64>>, offsets: Vec<f64>) -> Result<Self> {
        Self::new(ConvexDomainSpec::HalfspaceIntersection { normals, offsets })
    }

    pub fn spec(&self) -> &ConvexDomainSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    pub fn bounding_box(&self) -> (&[f64], &[f64]) {
        (&self.bbox_lo, &self.bbox_hi)
    }

    /// Diameter of the bounding box, an upper bound for the domain diameter.
    pub fn diameter_bound(&self) -> f64 {
        self.bbox_lo
            .iter()
            .zip(&self.bbox_hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "point has dimension {}, domain has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Membership in the closed domain.
    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.spec {
            ConvexDomainSpec::Ball { center, radius } => {
                let r = x
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                r <= radius * (1.0 + CONTAINS_REL_TOL)
            }
            ConvexDomainSpec::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (a, b))| *a <= *v && *v <= *b),
            ConvexDomainSpec::HalfspaceIntersection { normals, offsets } => normals
                .iter()
                .zip(offsets)
                .all(|(a, b)| dot(a, x) <= b + PROJECTION_TOL),
        }
    }

    /// Distance from an interior point to the boundary; zero or negative
    /// outside the open domain.
    pub fn boundary_depth(&self, x: &[f64]) -> f64 {
        match &self.spec {
            ConvexDomainSpec::Ball { center, radius } => {
                let r = x
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                radius - r
            }
            ConvexDomainSpec::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (a, b))| (v - a).min(b - v))
                .fold(f64::INFINITY, f64::min),
            ConvexDomainSpec::HalfspaceIntersection { normals, offsets } => normals
                .iter()
                .zip(offsets)
                .map(|(a, b)| b - dot(a, x))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Writes the Euclidean projection of `x` onto the closed domain to `out`.
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(x.len(), out.len());
        match &self.spec {
            ConvexDomainSpec::Ball { center, radius } => {
                let r = x
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                if r <= radius * (1.0 + CONTAINS_REL_TOL) {
                    out.copy_from_slice(x);
                } else {
                    let scale = radius / r;
                    for ((o, a), c) in out.iter_mut().zip(x).zip(center) {
                        *o = c + (a - c) * scale;
                    }
                }
                Ok(())
            }
            ConvexDomainSpec::Box { lo, hi } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = x[i].clamp(lo[i], hi[i]);
                }
                Ok(())
            }
            ConvexDomainSpec::HalfspaceIntersection { normals, offsets } => {
                if self.contains(x) {
                    out.copy_from_slice(x);
                    return Ok(());
                }
                let z = project_halfspaces(normals, offsets, x)?;
                out.copy_from_slice(&z);
                Ok(())
            }
        }
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; x.len()];
        self.project_into(x, &mut out)?;
        Ok(out)
    }

    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        let p = self.project(x)?;
        Ok(x.iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// `2 (x - proj(x))`.
    pub fn penalty_delta(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.project(x)?;
        Ok(x.iter().zip(&p).map(|(a, b)| 2.0 * (a - b)).collect())
    }

    /// Unit inward normal at a boundary point, or `-delta/|delta|` outside the
    /// closure. Deep interior points have no normal.
    pub fn inward_normal(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let p = self.project(x)?;
        let dist = x
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist > BOUNDARY_TOL {
            return Ok(p.iter().zip(x).map(|(a, b)| (a - b) / dist).collect());
        }
        let depth = self.boundary_depth(x);
        if depth > BOUNDARY_TOL {
            return Err(Error::NormalUndefined { depth });
        }
        Ok(self.boundary_normal(x))
    }

    /// Normal field defined on all of R^d: `inward_normal` where that is
    /// defined, the normal of the nearest face (radial for balls) in the
    /// interior. Used by boundary drivers that must be total functions.
    pub fn extended_normal(&self, x: &[f64]) -> Vec<f64> {
        match self.inward_normal(x) {
            Ok(n) => n,
            Err(_) => self.nearest_face_normal(x),
        }
    }

    pub fn boundary_data(&self, x: &[f64]) -> Result<BoundaryData> {
        let projection = self.project(x)?;
        let distance = x
            .iter()
            .zip(&projection)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let inward_normal = self.inward_normal(x)?;
        Ok(BoundaryData {
            projection,
            distance,
            inward_normal,
        })
    }

    /// Analytic inward normal at a point on (or within tolerance of) the
    /// boundary; active face normals are averaged at corners.
    fn boundary_normal(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut n = vec![0.0; d];
        match &self.spec {
            ConvexDomainSpec::Ball { center, .. } => {
                for ((o, c), a) in n.iter_mut().zip(center).zip(x) {
                    *o = c - a;
                }
            }
            ConvexDomainSpec::Box { lo, hi } => {
                for i in 0..d {
                    if (x[i] - lo[i]).abs() <= BOUNDARY_TOL {
                        n[i] += 1.0;
                    }
                    if (hi[i] - x[i]).abs() <= BOUNDARY_TOL {
                        n[i] -= 1.0;
                    }
                }
            }
            ConvexDomainSpec::HalfspaceIntersection { normals, offsets } => {
                for (a, b) in normals.iter().zip(offsets) {
                    if (b - dot(a, x)).abs() <= BOUNDARY_TOL {
                        for (o, ai) in n.iter_mut().zip(a) {
                            *o -= ai;
                        }
                    }
                }
            }
        }
        let len = norm(&n);
        if len == 0.0 {
            return self.nearest_face_normal(x);
        }
        n.iter_mut().for_each(|v| *v /= len);
        n
    }

    fn nearest_face_normal(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut n = vec![0.0; d];
        match &self.spec {
            ConvexDomainSpec::Ball { center, .. } => {
                for ((o, c), a) in n.iter_mut().zip(center).zip(x) {
                    *o = c - a;
                }
                let len = norm(&n);
                if len == 0.0 {
                    n[0] = 1.0;
                } else {
                    n.iter_mut().for_each(|v| *v /= len);
                }
            }
            ConvexDomainSpec::Box { lo, hi } => {
                let mut best = (f64::INFINITY, 0, 1.0);
                for i in 0..d {
                    if x[i] - lo[i] < best.0 {
                        best = (x[i] - lo[i], i, 1.0);
                    }
                    if hi[i] - x[i] < best.0 {
                        best = (hi[i] - x[i], i, -1.0);
                    }
                }
                n[best.1] = best.2;
            }
            ConvexDomainSpec::HalfspaceIntersection { normals, offsets } => {
                let (mut best, mut idx) = (f64::INFINITY, 0);
                for (i, (a, b)) in normals.iter().zip(offsets).enumerate() {
                    let gap = b - dot(a, x);
                    if gap < best {
                        best = gap;
                        idx = i;
                    }
                }
                for (o, a) in n.iter_mut().zip(&normals[idx]) {
                    *o = -a;
                }
            }
        }
        n
    }

    /// Largest `t >= 0` with `origin + t * dir` in the closure; `origin` must
    /// be interior.
    fn ray_exit(&self, origin: &[f64], dir: &[f64]) -> f64 {
        match &self.spec {
            ConvexDomainSpec::Ball { center, radius } => {
                let oc: Vec<f64> = origin.iter().zip(center).map(|(a, c)| a - c).collect();
                let a = dot(dir, dir);
                let b = dot(&oc, dir);
                let c = dot(&oc, &oc) - radius * radius;
                (-b + (b * b - a * c).max(0.0).sqrt()) / a
            }
            ConvexDomainSpec::Box { lo, hi } => {
                let mut t = f64::INFINITY;
                for i in 0..dir.len() {
                    if dir[i] > 0.0 {
                        t = t.min((hi[i] - origin[i]) / dir[i]);
                    } else if dir[i] < 0.0 {
                        t = t.min((lo[i] - origin[i]) / dir[i]);
                    }
                }
                t
            }
            ConvexDomainSpec::HalfspaceIntersection { normals, offsets } => {
                let mut t = f64::INFINITY;
                for (a, b) in normals.iter().zip(offsets) {
                    let rate = dot(a, dir);
                    if rate > 0.0 {
                        t = t.min((b - dot(a, origin)) / rate);
                    }
                }
                t
            }
        }
    }

    fn sample_interior(&self, stream: &mut Stream) -> Vec<f64> {
        loop {
            let x: Vec<f64> = self
                .bbox_lo
                .iter()
                .zip(&self.bbox_hi)
                .map(|(a, b)| stream.uniform_in(*a, *b))
                .collect();
            if self.boundary_depth(&x) > 0.0 {
                return x;
            }
        }
    }

    fn random_direction(&self, stream: &mut Stream) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.dim()).map(|_| stream.normal()).collect();
            let len = norm(&v);
            if len > 1e-12 {
                return v.into_iter().map(|a| a / len).collect();
            }
        }
    }

    fn sample_boundary(&self, stream: &mut Stream) -> Vec<f64> {
        let origin = self.sample_interior(stream);
        let dir = self.random_direction(stream);
        let t = self.ray_exit(&origin, &dir);
        origin.iter().zip(&dir).map(|(o, v)| o + t * v).collect()
    }

    pub fn sample_points(
        &self,
        count: usize,
        region: SampleRegion,
        stream: &mut Stream,
    ) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be positive".into(),
            ));
        }
        let mut points = Vec::with_capacity(count);
        match region {
            SampleRegion::Interior => {
                for _ in 0..count {
                    points.push(self.sample_interior(stream));
                }
            }
            SampleRegion::Boundary => {
                for _ in 0..count {
                    points.push(self.sample_boundary(stream));
                }
            }
            SampleRegion::ExteriorShell { width } => {
                if !(width.is_finite() && width > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "shell width must be positive, got {width}"
                    )));
                }
                while points.len() < count {
                    let p = self.sample_boundary(stream);
                    let inward = self.boundary_normal(&p);
                    // keep s well above rounding so the point is strictly outside
                    let s = width * (1e-6 + (1.0 - 1e-6) * (1.0 - stream.uniform()));
                    let x: Vec<f64> = p.iter().zip(&inward).map(|(a, n)| a - s * n).collect();
                    let dist = self.distance(&x)?;
                    if dist > 0.0 && dist <= width {
                        points.push(x);
                    }
                }
            }
        }
        Ok(points)
    }
}

/// Checks a halfspace description and returns its bounding box and an
/// interior anchor point (centroid of the vertices).
fn validate_polytope(
    normals: &[Vec<f64>],
    offsets: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if normals.is_empty() || normals.len() != offsets.len() {
        return Err(invalid("need matching, nonempty normals and offsets"));
    }
    let d = normals[0].len();
    if d == 0 || normals.iter().any(|a| a.len() != d) {
        return Err(invalid("all normals must share one nonzero dimension"));
    }
    for (i, a) in normals.iter().enumerate() {
        if (norm(a) - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("normal {i} is not a unit vector")));
        }
    }
    if offsets.iter().any(|b| !b.is_finite()) {
        return Err(invalid("offsets must be finite"));
    }
    let m = normals.len();
    let a = DMatrix::from_fn(m, d, |i, j| normals[i][j]);
    let svd = a.clone().svd(false, false);
    let min_sv = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if m < d || min_sv < 1e-9 {
        return Err(invalid("halfspaces leave an unbounded direction"));
    }
    // A pointed recession cone is {0} iff none of its candidate extreme rays
    // (null vectors of d-1 normals) satisfies A v <= 0.
    for subset in combinations(m, d - 1) {
        let mut rows = DMatrix::zeros(d, d);
        for (r, &i) in subset.iter().enumerate() {
            for j in 0..d {
                rows[(r, j)] = normals[i][j];
            }
        }
        let svd = rows.svd(false, true);
        let v_t = svd.v_t.expect("requested v_t");
        let k = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, _)| i)
            .unwrap();
        if svd.singular_values[k] > 1e-9 {
            continue;
        }
        let v: Vec<f64> = (0..d).map(|j| v_t[(k, j)]).collect();
        for sign in [1.0, -1.0] {
            if normals.iter().all(|n| sign * dot(n, &v) <= 1e-12) {
                return Err(invalid("halfspace intersection is unbounded"));
            }
        }
    }
    let mut vertices = Vec::new();
    for subset in combinations(m, d) {
        let sys = DMatrix::from_fn(d, d, |r, j| normals[subset[r]][j]);
        let rhs = DVector::from_fn(d, |r, _| offsets[subset[r]]);
        if let Some(v) = sys.lu().solve(&rhs) {
            let v: Vec<f64> = v.iter().cloned().collect();
            if v.iter().all(|c| c.is_finite())
                && normals
                    .iter()
                    .zip(offsets)
                    .all(|(n, b)| dot(n, &v) <= b + 1e-9)
            {
                vertices.push(v);
            }
        }
    }
    if vertices.is_empty() {
        return Err(invalid("halfspace intersection is empty"));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut anchor = vec![0.0; d];
    for v in &vertices {
        for j in 0..d {
            lo[j] = lo[j].min(v[j]);
            hi[j] = hi[j].max(v[j]);
            anchor[j] += v[j] / vertices.len() as f64;
        }
    }
    let slack = normals
        .iter()
        .zip(offsets)
        .map(|(n, b)| b - dot(n, &anchor))
        .fold(f64::INFINITY, f64::min);
    if slack <= 1e-9 {
        return Err(invalid("halfspace intersection has empty interior"));
    }
    Ok((lo, hi, anchor))
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

/// Dykstra's alternating projections onto the halfspaces, followed by an
/// exact solve on the detected active set.
fn project_halfspaces(normals: &[Vec<f64>], offsets: &[f64], x0: &[f64]) -> Result<Vec<f64>> {
    let d = x0.len();
    let m = normals.len();
    let mut x = x0.to_vec();
    let mut corrections = vec![vec![0.0; d]; m];
    let mut y = vec![0.0; d];
    let mut prev = vec![0.0; d];
    let mut converged = false;
    let mut change = f64::INFINITY;
    for _ in 0..PROJECTION_MAX_ITER {
        prev.copy_from_slice(&x);
        for (i, (a, b)) in normals.iter().zip(offsets).enumerate() {
            for j in 0..d {
                y[j] = x[j] + corrections[i][j];
            }
            let excess = dot(a, &y) - b;
            for j in 0..d {
                x[j] = if excess > 0.0 {
                    y[j] - excess * a[j]
                } else {
                    y[j]
                };
                corrections[i][j] = y[j] - x[j];
            }
        }
        change = x
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let violation = normals
            .iter()
            .zip(offsets)
            .map(|(a, b)| dot(a, &x) - b)
            .fold(f64::NEG_INFINITY, f64::max);
        if change < PROJECTION_TOL && violation < PROJECTION_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ProjectionDiverged {
            iterations: PROJECTION_MAX_ITER,
            change,
        });
    }
    Ok(polish_active_set(normals, offsets, x0, x))
}

/// Solves `min |z - x0|` subject to equality on the constraints active at the
/// Dykstra iterate; accepted only when it satisfies the KKT conditions.
fn polish_active_set(
    normals: &[Vec<f64>],
    offsets: &[f64],
    x0: &[f64],
    approx: Vec<f64>,
) -> Vec<f64> {
    let d = x0.len();
    let active: Vec<usize> = (0..normals.len())
        .filter(|&i| dot(&normals[i], &approx) >= offsets[i] - 1e-7)
        .collect();
    if active.is_empty() || active.len() > d {
        return approx;
    }
    let k = active.len();
    let a = DMatrix::from_fn(k, d, |r, j| normals[active[r]][j]);
    let x = DVector::from_column_slice(x0);
    let rhs = &a * &x - DVector::from_fn(k, |r, _| offsets[active[r]]);
    let gram = &a * a.transpose();
    let Some(lambda) = gram.lu().solve(&rhs) else {
        return approx;
    };
    if lambda.iter().any(|l| *l < -1e-12) {
        return approx;
    }
    let z = x - a.transpose() * lambda;
    let z: Vec<f64> = z.iter().cloned().collect();
    let feasible = normals
        .iter()
        .zip(offsets)
        .all(|(n, b)| dot(n, &z) <= b + 1e-12 * (1.0 + b.abs()));
    let close = z
        .iter()
        .zip(&approx)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
        < 1e-6;
    if feasible && close {
        z
    } else {
        approx
    }
}

/// Worst cases found by `property_suite`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertySuiteReport {
    pub pairs: usize,
    /// `max <z - x, delta(x)>` over `z` in the closure.
    pub variational_max: f64,
    /// `max |delta(x) - delta(y)| / |x - y|`.
    pub penalty_lipschitz_max: f64,
    /// `max |proj(proj(x)) - proj(x)|`.
    pub idempotence_max: f64,
    /// `max |proj(x) - proj(y)| / |x - y|`.
    pub projection_lipschitz_max: f64,
}

impl PropertySuiteReport {
    pub fn passed(&self) -> bool {
        self.variational_max <= 1e-12
            && self.penalty_lipschitz_max <= 4.0
            && self.idempotence_max <= 1e-12
            && self.projection_lipschitz_max <= 1.0 + 1e-9
    }
}

/// Checks the projection and penalty on `pairs` random pairs drawn from a box
/// three times the size of the bounding box, with `z` sampled in the domain.
pub fn property_suite(
    domain: &ConvexDomain,
    pairs: usize,
    stream: &mut Stream,
) -> Result<PropertySuiteReport> {
    let (lo, hi) = domain.bounding_box();
    let d = domain.dim();
    let inside = domain.sample_points(pairs, SampleRegion::Interior, stream)?;
    let mut report = PropertySuiteReport {
        pairs,
        variational_max: f64::NEG_INFINITY,
        penalty_lipschitz_max: 0.0,
        idempotence_max: 0.0,
        projection_lipschitz_max: 0.0,
    };
    let norm = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    for (i, z) in inside.iter().enumerate() {
        let x: Vec<f64> = (0..d)
            .map(|j| {
                let w = hi[j] - lo[j];
                stream.uniform_in(lo[j] - w, hi[j] + w)
            })
            .collect();
        // alternate far pairs with nearby ones
        let y: Vec<f64> = if i % 2 == 0 {
            (0..d)
                .map(|j| {
                    let w = hi[j] - lo[j];
                    stream.uniform_in(lo[j] - w, hi[j] + w)
                })
                .collect()
        } else {
            x.iter().map(|v| v + 0.05 * stream.normal()).collect()
        };
        let px = domain.project(&x)?;
        let py = domain.project(&y)?;
        let dx = domain.penalty_delta(&x)?;
        let dy = domain.penalty_delta(&y)?;
        let inner: f64 = z
            .iter()
            .zip(&x)
            .zip(&dx)
            .map(|((zv, xv), dv)| (zv - xv) * dv)
            .sum();
        report.variational_max = report.variational_max.max(inner);
        let gap = norm(&x, &y);
        if gap > 0.0 {
            report.penalty_lipschitz_max = report.penalty_lipschitz_max.max(norm(&dx, &dy) / gap);
            report.projection_lipschitz_max =
                report.projection_lipschitz_max.max(norm(&px, &py) / gap);
        }
        report.idempotence_max = report.idempotence_max.max(norm(&domain.project(&px)?, &px));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const S2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn triangle() -> ConvexDomain {
        ConvexDomain::halfspaces(
            vec![vec![-1.0, 0.0], vec![0.0, -1.0], vec![S2, S2]],
            vec![0.0, 0.0, S2],
        )
        .unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn ball_radial_projection() {
        let d = ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(d.project(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(d.penalty_delta(&[2.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(d.distance(&[2.0, 0.0]).unwrap(), 1.0);
        assert_eq!(d.distance(&[0.3, -0.2]).unwrap(), 0.0);
        assert_eq!(d.inward_normal(&[2.0, 0.0]).unwrap(), vec![-1.0, 0.0]);
        assert!(close(
            &d.inward_normal(&[0.0, -1.0]).unwrap(),
            &[0.0, 1.0],
            1e-15
        ));
    }

    #[test]
    fn interval_cases() {
        let d = ConvexDomain::interval(0.0, 1.0).unwrap();
        assert_eq!(d.project(&[0.4]).unwrap(), vec![0.4]);
        assert_eq!(d.penalty_delta(&[1.25]).unwrap(), vec![0.5]);
        assert_eq!(d.inward_normal(&[0.0]).unwrap(), vec![1.0]);
        assert_eq!(d.inward_normal(&[1.0]).unwrap(), vec![-1.0]);
        assert_eq!(d.inward_normal(&[-3.0]).unwrap(), vec![1.0]);
        assert!(matches!(
            d.inward_normal(&[0.5]),
            Err(Error::NormalUndefined { .. })
        ));
    }

    #[test]
    fn box_corner_normal_is_averaged() {
        let d = ConvexDomain::cube(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let n = d.inward_normal(&[0.0, 0.0]).unwrap();
        assert!(close(&n, &[S2, S2], 1e-15));
        assert!((norm(&n) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_projection() {
        let t = triangle();
        let p = t.project(&[1.0, 1.0]).unwrap();
        assert!(close(&p, &[0.5, 0.5], 1e-14), "{p:?}");
        assert!((t.distance(&[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-14);
        let q = t.project(&[-1.0, -2.0]).unwrap();
        assert!(close(&q, &[0.0, 0.0], 1e-14));
        let r = t.project(&[0.3, -0.5]).unwrap();
        assert!(close(&r, &[0.3, 0.0], 1e-14));
        let n = t.inward_normal(&[0.5, 0.5]).unwrap();
        assert!(close(&n, &[-S2, -S2], 1e-12));
    }

    #[test]
    fn polytope_validation_rejects_bad_input() {
        // open strip
        assert!(
            ConvexDomain::halfspaces(vec![vec![0.0, 1.0], vec![0.0, -1.0]], vec![1.0, 1.0])
                .is_err()
        );
        // wedge, unbounded along +x
        assert!(
            ConvexDomain::halfspaces(vec![vec![-S2, S2], vec![-S2, -S2]], vec![0.0, 0.0]).is_err()
        );
        // empty
        assert!(ConvexDomain::halfspaces(vec![vec![1.0], vec![-1.0]], vec![-1.0, -1.0]).is_err());
        // not unit
        assert!(ConvexDomain::halfspaces(vec![vec![2.0], vec![-1.0]], vec![1.0, 1.0]).is_err());
        let seg = ConvexDomain::halfspaces(vec![vec![1.0], vec![-1.0]], vec![1.0, 0.5]).unwrap();
        assert_eq!(seg.bounding_box(), (&[-0.5][..], &[1.0][..]));
    }

    #[test]
    fn invalid_ball_and_box() {
        assert!(ConvexDomain::ball(vec![0.0], 0.0).is_err());
        assert!(ConvexDomain::cube(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(ConvexDomain::cube(vec![0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn sampling_regions() {
        let mut s = Stream::auxiliary(3, 0);
        for dom in [
            ConvexDomain::ball(vec![0.5, -0.5], 2.0).unwrap(),
            ConvexDomain::cube(vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]).unwrap(),
            triangle(),
        ] {
            for p in dom
                .sample_points(200, SampleRegion::Interior, &mut s)
                .unwrap()
            {
                assert!(dom.contains(&p));
                assert!(dom.boundary_depth(&p) > 0.0);
            }
            for p in dom
                .sample_points(200, SampleRegion::Boundary, &mut s)
                .unwrap()
            {
                assert!(dom.distance(&p).unwrap() < 1e-9);
                assert!(dom.boundary_depth(&p).abs() < 1e-9);
            }
            for p in dom
                .sample_points(200, SampleRegion::ExteriorShell { width: 0.25 }, &mut s)
                .unwrap()
            {
                let dist = dom.distance(&p).unwrap();
                assert!(dist > 0.0 && dist <= 0.25, "{dist}");
            }
        }
        let dom = triangle();
        assert!(dom
            .sample_points(0, SampleRegion::Interior, &mut s)
            .is_err());
    }

    #[test]
    fn spec_round_trips_through_serde() {
        let t = triangle();
        let json = serde_json::to_string(&t).unwrap();
        let back: ConvexDomain = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"kind":"ball","center":[0.0],"radius":-1.0}"#;
        assert!(serde_json::from_str::<ConvexDomain>(bad).is_err());
    }

    #[test]
    fn property_suite_passes_on_each_variant() {
        let mut s = Stream::auxiliary(8, 0);
        for dom in [
            ConvexDomain::interval(0.0, 1.0).unwrap(),
            ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap(),
            ConvexDomain::cube(vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 1.0]).unwrap(),
            triangle(),
        ] {
            let r = property_suite(&dom, 2000, &mut s).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn projection_is_idempotent_on_each_variant() {
        let mut s = Stream::auxiliary(4, 0);
        for dom in [
            ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap(),
            ConvexDomain::cube(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            triangle(),
        ] {
            for _ in 0..500 {
                let x: Vec<f64> = (0..2).map(|_| s.uniform_in(-3.0, 3.0)).collect();
                let p = dom.project(&x).unwrap();
                assert_eq!(dom.project(&p).unwrap(), p);
            }
        }
    }
}
