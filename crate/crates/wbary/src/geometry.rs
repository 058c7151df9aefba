//! Closed-form Riemannian geometry for the three supported compact manifolds:
//! an axis-aligned Euclidean box, a flat torus, and a round sphere.
//!
//! Points on the box and torus live in chart coordinates (`n` numbers); points
//! on the sphere live in embedding coordinates (`n + 1` numbers with norm equal
//! to the radius). All operations are pure and cheap enough to call inside
//! solver loops. Cost throughout the crate means `c(x, y) = d(x, y)^2 / 2`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the sphere point-norm and tangency invariants.
pub const POINT_TOL: f64 = 1e-12;
/// A sphere pair is treated as antipodal (cut locus) when `d > pi*r - CUT_TOL`.
pub const SPHERE_CUT_TOL: f64 = 1e-8;
/// A torus coordinate difference is a cut-locus tie when it sits within this
/// distance of the half period.
pub const TORUS_TIE_TOL: f64 = 1e-12;

/// Which compact manifold, plus its shape parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldKind {
    /// Flat `R^n` restricted to an axis-aligned box; geodesics ignore the
    /// boundary, so interpolants must be kept inside by the caller.
    EuclideanBox { bounds: Vec<[f64; 2]> },
    /// Flat torus with the given periods per axis.
    FlatTorus { periods: Vec<f64> },
    /// Round sphere of dimension `dim` embedded in `R^{dim+1}`.
    Sphere { radius: f64 },
}

/// A manifold description: kind, intrinsic dimension, and derived curvature
/// data (Ricci lower bound, diameter, total volume).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ManifoldSpecRepr", into = "ManifoldSpecRepr")]
pub struct ManifoldSpec {
    kind: ManifoldKind,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifoldSpecRepr {
    kind: String,
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    periods: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bounds: Option<Vec<[f64; 2]>>,
}

impl TryFrom<ManifoldSpecRepr> for ManifoldSpec {
    type Error = Error;
    fn try_from(r: ManifoldSpecRepr) -> Result<Self> {
        match r.kind.as_str() {
            "sphere" => ManifoldSpec::sphere(
                r.dim,
                r.radius
                    .ok_or_else(|| Error::InvalidInput("sphere spec needs \"radius\"".into()))?,
            ),
            "torus" => ManifoldSpec::torus(
                r.periods
                    .ok_or_else(|| Error::InvalidInput("torus spec needs \"periods\"".into()))?,
            ),
            "box" => ManifoldSpec::euclidean_box(
                r.bounds
                    .ok_or_else(|| Error::InvalidInput("box spec needs \"bounds\"".into()))?,
            ),
            other => Err(Error::InvalidInput(format!("unknown manifold kind {other:?}"))),
        }
    }
}

impl From<ManifoldSpec> for ManifoldSpecRepr {
    fn from(s: ManifoldSpec) -> Self {
        let dim = s.dim;
        match s.kind {
            ManifoldKind::Sphere { radius } => ManifoldSpecRepr {
                kind: "sphere".into(),
                dim,
                radius: Some(radius),
                periods: None,
                bounds: None,
            },
            ManifoldKind::FlatTorus { periods } => ManifoldSpecRepr {
                kind: "torus".into(),
                dim,
                radius: None,
                periods: Some(periods),
                bounds: None,
            },
            ManifoldKind::EuclideanBox { bounds } => ManifoldSpecRepr {
                kind: "box".into(),
                dim,
                radius: None,
                periods: None,
                bounds: Some(bounds),
            },
        }
    }
}

/// A point on a manifold. Chart coordinates for box/torus, embedding
/// coordinates for the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Self {
        Point { coords }
    }
}

/// A tangent vector `vec` attached at `base`, in the same coordinates as the
/// point (so ambient coordinates on the sphere, where it must be orthogonal to
/// the base point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tangent {
    pub base: Point,
    pub vec: Vec<f64>,
}

/// Hessians of the cost `c(x, y) = d^2(x, y)/2` in geodesic-aligned
/// orthonormal frames: `dxx` is the Hessian of `c(., y)` at `x`, and `dxy_neg`
/// is the negated mixed Hessian, with the first frame axis along the geodesic
/// from `x` to `y` at both endpoints.
#[derive(Debug, Clone)]
pub struct CostHessians {
    pub dxx: DMatrix<f64>,
    pub dxy_neg: DMatrix<f64>,
}

/// Comparison coefficient `S_K(d)`: `sin(sqrt(K) d)/(sqrt(K) d)` for `K > 0`,
/// `1` for `K = 0`, `sinh(sqrt(-K) d)/(sqrt(-K) d)` for `K < 0`. The `d = 0`
/// limit is `1` in all cases.
pub fn s_coeff(k: f64, d: f64) -> f64 {
    if d == 0.0 || k == 0.0 {
        return 1.0;
    }
    let s = k.abs().sqrt() * d;
    if k > 0.0 {
        s.sin() / s
    } else {
        s.sinh() / s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gamma function at integer or half-integer arguments, used for sphere
/// surface areas.
fn gamma_half(twice: u64) -> f64 {
    // gamma(twice / 2)
    if twice % 2 == 0 {
        let mut g = 1.0;
        for i in 1..(twice / 2) {
            g *= i as f64;
        }
        g
    } else {
        let mut g = std::f64::consts::PI.sqrt();
        let mut x = 0.5;
        while (2.0 * x) as u64 + 1 < twice {
            g *= x;
            x += 1.0;
        }
        g
    }
}

impl ManifoldSpec {
    pub fn euclidean_box(bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidInput("box needs at least one axis".into()));
        }
        for b in &bounds {
            if !(b[1] - b[0] > 0.0) || !b[0].is_finite() || !b[1].is_finite() {
                return Err(Error::InvalidInput(format!("bad box bounds {b:?}")));
            }
        }
        let dim = bounds.len();
        Ok(ManifoldSpec { kind: ManifoldKind::EuclideanBox { bounds }, dim })
    }

    pub fn torus(periods: Vec<f64>) -> Result<Self> {
        if periods.is_empty() {
            return Err(Error::InvalidInput("torus needs at least one axis".into()));
        }
        for &p in &periods {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::InvalidInput(format!("bad torus period {p}")));
            }
        }
        let dim = periods.len();
        Ok(ManifoldSpec { kind: ManifoldKind::FlatTorus { periods }, dim })
    }

    pub fn sphere(dim: usize, radius: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("sphere dimension must be positive".into()));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidInput(format!("bad sphere radius {radius}")));
        }
        Ok(ManifoldSpec { kind: ManifoldKind::Sphere { radius }, dim })
    }

    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    /// Intrinsic dimension `n`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of coordinates a point carries (`n`, or `n + 1` on the sphere).
    pub fn ambient_dim(&self) -> usize {
        match self.kind {
            ManifoldKind::Sphere { .. } => self.dim + 1,
            _ => self.dim,
        }
    }

    pub fn is_flat(&self) -> bool {
        !matches!(self.kind, ManifoldKind::Sphere { .. })
    }

    /// Lower bound `K` for the Ricci curvature: `(n-1)/r^2` on the sphere,
    /// `0` on the flat manifolds.
    pub fn ricci_lower_bound(&self) -> f64 {
        match self.kind {
            ManifoldKind::Sphere { radius } => (self.dim as f64 - 1.0) / (radius * radius),
            _ => 0.0,
        }
    }

    pub fn diameter(&self) -> f64 {
        match &self.kind {
            ManifoldKind::EuclideanBox { bounds } => {
                bounds.iter().map(|b| (b[1] - b[0]).powi(2)).sum::<f64>().sqrt()
            }
            ManifoldKind::FlatTorus { periods } => {
                periods.iter().map(|p| (p / 2.0).powi(2)).sum::<f64>().sqrt()
            }
            ManifoldKind::Sphere { radius } => std::f64::consts::PI * radius,
        }
    }

    /// Total Riemannian volume.
    pub fn volume(&self) -> f64 {
        match &self.kind {
            ManifoldKind::EuclideanBox { bounds } => {
                bounds.iter().map(|b| b[1] - b[0]).product()
            }
            ManifoldKind::FlatTorus { periods } => periods.iter().product(),
            ManifoldKind::Sphere { radius } => {
                // surface area of S^n: 2 pi^{(n+1)/2} / gamma((n+1)/2) * r^n
                let n = self.dim as f64;
                let twice = (self.dim + 1) as u64;
                2.0 * std::f64::consts::PI.powf((n + 1.0) / 2.0) / gamma_half(twice)
                    * radius.powi(self.dim as i32)
            }
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        let name = match self.kind {
            ManifoldKind::EuclideanBox { .. } => "box",
            ManifoldKind::FlatTorus { .. } => "torus",
            ManifoldKind::Sphere { .. } => "sphere",
        };
        Error::InvalidPoint { manifold: format!("{name}(dim {})", self.dim), reason: reason.into() }
    }

    pub fn validate_point(&self, p: &Point) -> Result<()> {
        if p.coords.len() != self.ambient_dim() {
            return Err(self.invalid(format!(
                "expected {} coordinates, got {}",
                self.ambient_dim(),
                p.coords.len()
            )));
        }
        if p.coords.iter().any(|c| !c.is_finite()) {
            return Err(self.invalid("non-finite coordinate"));
        }
        match &self.kind {
            ManifoldKind::EuclideanBox { bounds } => {
                for (c, b) in p.coords.iter().zip(bounds) {
                    if *c < b[0] - 1e-9 || *c > b[1] + 1e-9 {
                        return Err(self.invalid(format!("coordinate {c} outside {b:?}")));
                    }
                }
            }
            ManifoldKind::FlatTorus { .. } => {}
            ManifoldKind::Sphere { radius } => {
                let r = norm(&p.coords);
                if (r - radius).abs() > POINT_TOL * radius.max(1.0) {
                    return Err(self.invalid(format!("norm {r} != radius {radius}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate_tangent(&self, t: &Tangent) -> Result<()> {
        self.validate_point(&t.base)?;
        if t.vec.len() != self.ambient_dim() {
            return Err(self.invalid("tangent vector has wrong length"));
        }
        if let ManifoldKind::Sphere { radius } = self.kind {
            let ip = dot(&t.vec, &t.base.coords);
            if ip.abs() > POINT_TOL * radius.max(1.0) * (1.0 + norm(&t.vec)) {
                return Err(self.invalid(format!("tangent not orthogonal to base ({ip:.3e})")));
            }
        }
        Ok(())
    }

    /// Wraps torus coordinates into `[0, period)`; other manifolds pass
    /// through unchanged.
    pub fn canonicalize(&self, p: &Point) -> Point {
        match &self.kind {
            ManifoldKind::FlatTorus { periods } => Point::new(
                p.coords
                    .iter()
                    .zip(periods)
                    .map(|(c, p)| {
                        let w = c.rem_euclid(*p);
                        if w >= *p {
                            0.0
                        } else {
                            w
                        }
                    })
                    .collect(),
            ),
            _ => p.clone(),
        }
    }

    /// Geodesic distance.
    pub fn distance(&self, p: &Point, q: &Point) -> Result<f64> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        Ok(match &self.kind {
            ManifoldKind::EuclideanBox { .. } => {
                p.coords.iter().zip(&q.coords).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            }
            ManifoldKind::FlatTorus { periods } => p
                .coords
                .iter()
                .zip(&q.coords)
                .zip(periods)
                .map(|((a, b), per)| {
                    let d = (a - b).rem_euclid(*per);
                    d.min(per - d).powi(2)
                })
                .sum::<f64>()
                .sqrt(),
            ManifoldKind::Sphere { radius } => {
                let theta = self.sphere_angle(p, q);
                radius * theta
            }
        })
    }

    /// Robust central angle between two sphere points.
    fn sphere_angle(&self, p: &Point, q: &Point) -> f64 {
        let ManifoldKind::Sphere { radius } = self.kind else { unreachable!() };
        let mut dm = 0.0;
        let mut dp = 0.0;
        for (a, b) in p.coords.iter().zip(&q.coords) {
            dm += (a / radius - b / radius).powi(2);
            dp += (a / radius + b / radius).powi(2);
        }
        2.0 * (dm.sqrt() / 2.0).atan2(dp.sqrt() / 2.0)
    }

    /// Riemannian logarithm: the tangent vector at `p` whose exponential is
    /// `q`. Errors on the cut locus (sphere antipodes, torus half-period
    /// ties).
    pub fn log_map(&self, p: &Point, q: &Point) -> Result<Tangent> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        let vec = match &self.kind {
            ManifoldKind::EuclideanBox { .. } => {
                q.coords.iter().zip(&p.coords).map(|(b, a)| b - a).collect()
            }
            ManifoldKind::FlatTorus { periods } => {
                let mut v = Vec::with_capacity(self.dim);
                for ((a, b), per) in p.coords.iter().zip(&q.coords).zip(periods) {
                    let fwd = (b - a).rem_euclid(*per);
                    let bwd = per - fwd;
                    if (fwd - bwd).abs() <= TORUS_TIE_TOL && fwd > 0.25 * per {
                        return Err(Error::CutLocus(format!(
                            "torus shift tie at half period {per}"
                        )));
                    }
                    v.push(if fwd <= bwd { fwd } else { -bwd });
                }
                v
            }
            ManifoldKind::Sphere { radius } => {
                let d = radius * self.sphere_angle(p, q);
                if d > std::f64::consts::PI * radius - SPHERE_CUT_TOL {
                    return Err(Error::CutLocus(format!(
                        "sphere pair at distance {d:.12} is antipodal"
                    )));
                }
                let theta = d / radius;
                if theta == 0.0 {
                    vec![0.0; self.ambient_dim()]
                } else {
                    // direction = normalized component of q orthogonal to p
                    let c = dot(&p.coords, &q.coords) / (radius * radius);
                    let mut w: Vec<f64> = q
                        .coords
                        .iter()
                        .zip(&p.coords)
                        .map(|(b, a)| b / radius - c * a / radius)
                        .collect();
                    let wn = norm(&w);
                    for x in &mut w {
                        *x *= d / wn;
                    }
                    w
                }
            }
        };
        Ok(Tangent { base: p.clone(), vec })
    }

    /// Riemannian exponential. Defined for every tangent vector.
    pub fn exp_map(&self, t: &Tangent) -> Result<Point> {
        self.validate_tangent(t)?;
        Ok(match &self.kind {
            ManifoldKind::EuclideanBox { .. } => {
                Point::new(t.base.coords.iter().zip(&t.vec).map(|(a, v)| a + v).collect())
            }
            ManifoldKind::FlatTorus { .. } => self.canonicalize(&Point::new(
                t.base.coords.iter().zip(&t.vec).map(|(a, v)| a + v).collect(),
            )),
            ManifoldKind::Sphere { radius } => {
                let nv = norm(&t.vec);
                if nv == 0.0 {
                    t.base.clone()
                } else {
                    let theta = nv / radius;
                    let (s, c) = theta.sin_cos();
                    Point::new(
                        t.base
                            .coords
                            .iter()
                            .zip(&t.vec)
                            .map(|(a, v)| a * c + v / nv * radius * s)
                            .collect(),
                    )
                }
            }
        })
    }

    /// Transport cost `c(p, q) = d(p, q)^2 / 2`.
    pub fn cost(&self, p: &Point, q: &Point) -> Result<f64> {
        Ok(0.5 * self.distance(p, q)?.powi(2))
    }

    /// A deterministic orthonormal basis of the tangent space at `p`, as the
    /// columns of an `ambient_dim x dim` matrix. Built by Gram-Schmidt over
    /// the coordinate axes.
    pub fn tangent_frame(&self, p: &Point) -> Result<DMatrix<f64>> {
        self.validate_point(p)?;
        if self.is_flat() {
            return Ok(DMatrix::identity(self.dim, self.dim));
        }
        let ManifoldKind::Sphere { radius } = self.kind else { unreachable!() };
        let amb = self.ambient_dim();
        let u: Vec<f64> = p.coords.iter().map(|c| c / radius).collect();
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(self.dim);
        for axis in 0..amb {
            if cols.len() == self.dim {
                break;
            }
            let mut v = vec![0.0; amb];
            v[axis] = 1.0;
            // project out the normal direction and previous columns
            let pu = dot(&v, &u);
            for (x, uu) in v.iter_mut().zip(&u) {
                *x -= pu * uu;
            }
            for col in &cols {
                let pc = dot(&v, col);
                for (x, cc) in v.iter_mut().zip(col) {
                    *x -= pc * cc;
                }
            }
            let nv = norm(&v);
            if nv > 1e-8 {
                for x in &mut v {
                    *x /= nv;
                }
                cols.push(v);
            }
        }
        debug_assert_eq!(cols.len(), self.dim);
        Ok(DMatrix::from_fn(amb, self.dim, |i, j| cols[j][i]))
    }

    /// Orthonormal tangent frame at `p` whose first column is the unit vector
    /// along `first` (which must be tangent at `p` and nonzero).
    pub fn tangent_frame_with_first(&self, p: &Point, first: &[f64]) -> Result<DMatrix<f64>> {
        let amb = self.ambient_dim();
        let nf = norm(first);
        if nf == 0.0 {
            return Err(Error::InvalidInput("zero direction for frame".into()));
        }
        let e1: Vec<f64> = first.iter().map(|x| x / nf).collect();
        if self.is_flat() {
            let mut cols = vec![e1];
            for axis in 0..amb {
                if cols.len() == self.dim {
                    break;
                }
                let mut v = vec![0.0; amb];
                v[axis] = 1.0;
                for col in &cols {
                    let pc = dot(&v, col);
                    for (x, cc) in v.iter_mut().zip(col) {
                        *x -= pc * cc;
                    }
                }
                let nv = norm(&v);
                if nv > 1e-8 {
                    for x in &mut v {
                        *x /= nv;
                    }
                    cols.push(v);
                }
            }
            return Ok(DMatrix::from_fn(amb, self.dim, |i, j| cols[j][i]));
        }
        let ManifoldKind::Sphere { radius } = self.kind else { unreachable!() };
        self.validate_point(p)?;
        let u: Vec<f64> = p.coords.iter().map(|c| c / radius).collect();
        let mut cols = vec![e1];
        for axis in 0..amb {
            if cols.len() == self.dim {
                break;
            }
            let mut v = vec![0.0; amb];
            v[axis] = 1.0;
            let pu = dot(&v, &u);
            for (x, uu) in v.iter_mut().zip(&u) {
                *x -= pu * uu;
            }
            for col in &cols {
                let pc = dot(&v, col);
                for (x, cc) in v.iter_mut().zip(col) {
                    *x -= pc * cc;
                }
            }
            let nv = norm(&v);
            if nv > 1e-8 {
                for x in &mut v {
                    *x /= nv;
                }
                cols.push(v);
            }
        }
        debug_assert_eq!(cols.len(), self.dim);
        Ok(DMatrix::from_fn(amb, self.dim, |i, j| cols[j][i]))
    }

    /// Closed-form cost Hessians in geodesic-aligned frames (first axis along
    /// the geodesic from `p` to `q`). Flat manifolds return identities.
    pub fn cost_hessians(&self, p: &Point, q: &Point) -> Result<CostHessians> {
        let n = self.dim;
        if self.is_flat() {
            // check the cut locus on the torus even though the result is flat
            self.log_map(p, q)?;
            return Ok(CostHessians {
                dxx: DMatrix::identity(n, n),
                dxy_neg: DMatrix::identity(n, n),
            });
        }
        let ManifoldKind::Sphere { radius } = self.kind else { unreachable!() };
        let d = self.distance(p, q)?;
        if d > std::f64::consts::PI * radius - SPHERE_CUT_TOL {
            return Err(Error::CutLocus("sphere cost Hessian at antipode".into()));
        }
        let theta = d / radius;
        let (radial_xx, trans_xx, trans_xy) = if theta < 1e-7 {
            (1.0, 1.0, 1.0)
        } else {
            (1.0, theta * theta.cos() / theta.sin(), theta / theta.sin())
        };
        let mut dxx = DMatrix::identity(n, n);
        let mut dxy = DMatrix::identity(n, n);
        dxx[(0, 0)] = radial_xx;
        dxy[(0, 0)] = 1.0;
        for i in 1..n {
            dxx[(i, i)] = trans_xx;
            dxy[(i, i)] = trans_xy;
        }
        Ok(CostHessians { dxx, dxy_neg: dxy })
    }

    /// Hessian at `z` of `w -> c(x, w)`, expressed in the provided orthonormal
    /// frame at `z` (an `ambient_dim x dim` matrix of columns).
    pub fn hessian_dzz_in_frame(
        &self,
        z: &Point,
        x: &Point,
        frame: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = self.dim;
        if self.is_flat() {
            self.log_map(z, x)?;
            return Ok(DMatrix::identity(n, n));
        }
        let ManifoldKind::Sphere { radius } = self.kind else { unreachable!() };
        let lg = self.log_map(z, x)?;
        let d = norm(&lg.vec);
        if d < 1e-12 {
            return Ok(DMatrix::identity(n, n));
        }
        let theta = d / radius;
        let trans = if theta < 1e-7 { 1.0 } else { theta * theta.cos() / theta.sin() };
        // frame coordinates of the unit geodesic direction
        let mut a = nalgebra::DVector::zeros(n);
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..self.ambient_dim() {
                s += frame[(i, j)] * lg.vec[i] / d;
            }
            a[j] = s;
        }
        let mut m = DMatrix::identity(n, n) * trans;
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += (1.0 - trans) * a[i] * a[j];
            }
        }
        Ok(m)
    }

    /// `det(-D2_{yz} c(y, z))` for the mixed cost Hessian, which is
    /// frame-independent in orthonormal frames: `1` on flat manifolds and
    /// `(theta / sin theta)^{n-1}` on the sphere.
    pub fn mixed_hessian_det(&self, y: &Point, z: &Point) -> Result<f64> {
        if self.is_flat() {
            self.log_map(y, z)?;
            return Ok(1.0);
        }
        let ManifoldKind::Sphere { radius } = self.kind else { unreachable!() };
        let d = self.distance(y, z)?;
        if d > std::f64::consts::PI * radius - SPHERE_CUT_TOL {
            return Err(Error::CutLocus("mixed Hessian at antipode".into()));
        }
        let theta = d / radius;
        if theta < 1e-9 {
            return Ok(1.0);
        }
        Ok((theta / theta.sin()).powi(self.dim as i32 - 1))
    }

    /// Finite-difference Hessian of `w -> c(exp_p(w), q)` at `w = 0` in the
    /// given frame. Cross-validation path for `cost_hessians`.
    pub fn cost_hessian_dxx_fd(
        &self,
        p: &Point,
        q: &Point,
        frame: &DMatrix<f64>,
        step: f64,
    ) -> Result<DMatrix<f64>> {
        let n = self.dim;
        let f = |w: &[f64]| -> Result<f64> {
            let mut vec = vec![0.0; self.ambient_dim()];
            for (j, wj) in w.iter().enumerate() {
                for i in 0..self.ambient_dim() {
                    vec[i] += frame[(i, j)] * wj;
                }
            }
            let pt = self.exp_map(&self.project_tangent(p, vec))?;
            self.cost(&pt, q)
        };
        let mut h = DMatrix::zeros(n, n);
        let f0 = f(&vec![0.0; n])?;
        for i in 0..n {
            for j in i..n {
                let mut wpp = vec![0.0; n];
                let mut wpm = vec![0.0; n];
                let mut wmp = vec![0.0; n];
                let mut wmm = vec![0.0; n];
                wpp[i] += step;
                wpp[j] += step;
                wpm[i] += step;
                wpm[j] -= step;
                wmp[i] -= step;
                wmp[j] += step;
                wmm[i] -= step;
                wmm[j] -= step;
                let v = if i == j {
                    let mut wp = vec![0.0; n];
                    let mut wm = vec![0.0; n];
                    wp[i] = step;
                    wm[i] = -step;
                    (f(&wp)? - 2.0 * f0 + f(&wm)?) / (step * step)
                } else {
                    (f(&wpp)? - f(&wpm)? - f(&wmp)? + f(&wmm)?) / (4.0 * step * step)
                };
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok(h)
    }

    /// Finite-difference negated mixed Hessian of the cost in the given
    /// frames at `p` and `q`.
    pub fn cost_hessian_dxy_neg_fd(
        &self,
        p: &Point,
        q: &Point,
        frame_p: &DMatrix<f64>,
        frame_q: &DMatrix<f64>,
        step: f64,
    ) -> Result<DMatrix<f64>> {
        let n = self.dim;
        let g = |a: f64, i: usize, b: f64, j: usize| -> Result<f64> {
            let mut vp = vec![0.0; self.ambient_dim()];
            let mut vq = vec![0.0; self.ambient_dim()];
            for t in 0..self.ambient_dim() {
                vp[t] = frame_p[(t, i)] * a;
                vq[t] = frame_q[(t, j)] * b;
            }
            let pp = self.exp_map(&self.project_tangent(p, vp))?;
            let qq = self.exp_map(&self.project_tangent(q, vq))?;
            self.cost(&pp, &qq)
        };
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = (g(step, i, step, j)? - g(step, i, -step, j)? - g(-step, i, step, j)?
                    + g(-step, i, -step, j)?)
                    / (4.0 * step * step);
                h[(i, j)] = -v;
            }
        }
        Ok(h)
    }

    /// Builds a tangent at `p`, re-projecting onto the tangent space on the
    /// sphere to absorb rounding in frame arithmetic.
    pub fn project_tangent(&self, p: &Point, mut vec: Vec<f64>) -> Tangent {
        if let ManifoldKind::Sphere { radius } = self.kind {
            let ip = dot(&vec, &p.coords) / (radius * radius);
            for (v, c) in vec.iter_mut().zip(&p.coords) {
                *v -= ip * c;
            }
        }
        Tangent { base: p.clone(), vec }
    }

    /// The matched geodesic frame at `q` for `cost_hessians(p, q)`: first
    /// column continues the geodesic from `p` through `q`, transverse columns
    /// are the parallel transports of the transverse frame at `p` (which on
    /// the sphere are the same ambient vectors).
    pub fn matched_frame_at_target(
        &self,
        p: &Point,
        q: &Point,
        frame_p: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        if self.is_flat() {
            return Ok(frame_p.clone());
        }
        let n = self.dim;
        let amb = self.ambient_dim();
        let back = self.log_map(q, p)?;
        let d = norm(&back.vec);
        if d == 0.0 {
            return Ok(frame_p.clone());
        }
        let mut m = DMatrix::zeros(amb, n);
        for i in 0..amb {
            m[(i, 0)] = -back.vec[i] / d;
        }
        for j in 1..n {
            for i in 0..amb {
                m[(i, j)] = frame_p[(i, j)];
            }
        }
        Ok(m)
    }

    /// A uniformly distributed random point (used by tests and seeded
    /// initializers).
    pub fn random_point<R: Rng>(&self, rng: &mut R) -> Point {
        match &self.kind {
            ManifoldKind::EuclideanBox { bounds } => Point::new(
                bounds.iter().map(|b| b[0] + rng.gen::<f64>() * (b[1] - b[0])).collect(),
            ),
            ManifoldKind::FlatTorus { periods } => {
                Point::new(periods.iter().map(|p| rng.gen::<f64>() * p).collect())
            }
            ManifoldKind::Sphere { radius } => {
                let amb = self.ambient_dim();
                loop {
                    let v: Vec<f64> = (0..amb)
                        .map(|_| {
                            // Box-Muller
                            let u1: f64 = rng.gen::<f64>().max(1e-300);
                            let u2: f64 = rng.gen();
                            (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos()
                        })
                        .collect();
                    let nv = norm(&v);
                    if nv > 1e-9 {
                        return Point::new(v.iter().map(|x| x / nv * radius).collect());
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere() -> ManifoldSpec {
        ManifoldSpec::sphere(2, 1.0).unwrap()
    }

    fn north() -> Point {
        Point::new(vec![0.0, 0.0, 1.0])
    }

    fn south() -> Point {
        Point::new(vec![0.0, 0.0, -1.0])
    }

    #[test]
    fn euclidean_distance_is_pythagoras() {
        let m = ManifoldSpec::euclidean_box(vec![[0.0, 5.0], [0.0, 5.0]]).unwrap();
        let d = m.distance(&Point::new(vec![0.0, 0.0]), &Point::new(vec![3.0, 4.0])).unwrap();
        assert_relative_eq!(d, 5.0, max_relative = 1e-15);
    }

    #[test]
    fn torus_distance_wraps() {
        let m = ManifoldSpec::torus(vec![1.0, 1.0]).unwrap();
        let d = m.distance(&Point::new(vec![0.9, 0.0]), &Point::new(vec![0.1, 0.0])).unwrap();
        assert_relative_eq!(d, 0.2, epsilon = 1e-14);
    }

    #[test]
    fn sphere_antipodal_distance_is_pi_r() {
        let m = unit_sphere();
        let d = m.distance(&north(), &south()).unwrap();
        assert_relative_eq!(d, std::f64::consts::PI, epsilon = 1e-14);
    }

    #[test]
    fn log_map_flat_is_subtraction() {
        let m = ManifoldSpec::euclidean_box(vec![[-5.0, 5.0], [-5.0, 5.0]]).unwrap();
        let t = m.log_map(&Point::new(vec![0.0, 0.0]), &Point::new(vec![1.0, 2.0])).unwrap();
        assert_eq!(t.vec, vec![1.0, 2.0]);
    }

    #[test]
    fn log_map_sphere_quarter_circle() {
        let m = unit_sphere();
        let q = Point::new(vec![1.0, 0.0, 0.0]);
        let t = m.log_map(&north(), &q).unwrap();
        assert_relative_eq!(norm(&t.vec), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        // points along longitude 0: tangent is the +x direction at the pole
        assert_relative_eq!(t.vec[0], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert!(t.vec[1].abs() < 1e-12 && t.vec[2].abs() < 1e-12);
    }

    #[test]
    fn log_map_torus_tie_is_cut_locus() {
        let m = ManifoldSpec::torus(vec![1.0]).unwrap();
        let e = m.log_map(&Point::new(vec![0.1]), &Point::new(vec![0.6]));
        assert!(matches!(e, Err(Error::CutLocus(_))));
    }

    #[test]
    fn exp_map_examples() {
        let m = ManifoldSpec::euclidean_box(vec![[-5.0, 5.0], [-5.0, 5.0]]).unwrap();
        let p = m
            .exp_map(&Tangent { base: Point::new(vec![0.0, 0.0]), vec: vec![1.0, 1.0] })
            .unwrap();
        assert_eq!(p.coords, vec![1.0, 1.0]);

        let s = unit_sphere();
        let t = Tangent { base: north(), vec: vec![std::f64::consts::PI, 0.0, 0.0] };
        let anti = s.exp_map(&t).unwrap();
        assert!(s.distance(&anti, &south()).unwrap() < 1e-12);

        let tor = ManifoldSpec::torus(vec![1.0]).unwrap();
        let w = tor.exp_map(&Tangent { base: Point::new(vec![0.9]), vec: vec![0.3] }).unwrap();
        assert_relative_eq!(w.coords[0], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn cost_examples() {
        let m = ManifoldSpec::euclidean_box(vec![[0.0, 5.0], [0.0, 5.0]]).unwrap();
        let c = m.cost(&Point::new(vec![0.0, 0.0]), &Point::new(vec![3.0, 4.0])).unwrap();
        assert_relative_eq!(c, 12.5, max_relative = 1e-15);
        let p = Point::new(vec![1.0, 1.0]);
        assert_eq!(m.cost(&p, &p).unwrap(), 0.0);
        let s = unit_sphere();
        assert_relative_eq!(
            s.cost(&north(), &south()).unwrap(),
            std::f64::consts::PI.powi(2) / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn s_coeff_examples() {
        assert_eq!(s_coeff(0.0, 0.7), 1.0);
        assert_relative_eq!(
            s_coeff(1.0, std::f64::consts::FRAC_PI_2),
            2.0 / std::f64::consts::PI,
            epsilon = 1e-15
        );
        assert_relative_eq!(s_coeff(-1.0, 1.0), 1.0_f64.sinh(), epsilon = 1e-15);
        assert_eq!(s_coeff(1.0, 0.0), 1.0);
    }

    #[test]
    fn flat_hessians_are_identity() {
        let m = ManifoldSpec::torus(vec![1.0, 1.0]).unwrap();
        let h = m
            .cost_hessians(&Point::new(vec![0.1, 0.2]), &Point::new(vec![0.4, 0.3]))
            .unwrap();
        assert_eq!(h.dxx, DMatrix::identity(2, 2));
        assert_eq!(h.dxy_neg, DMatrix::identity(2, 2));
    }

    #[test]
    fn sphere_hessian_at_quarter_circle() {
        let m = unit_sphere();
        let q = Point::new(vec![1.0, 0.0, 0.0]);
        let h = m.cost_hessians(&north(), &q).unwrap();
        // transverse dxx eigenvalue (pi/2) cot(pi/2) = 0
        assert!(h.dxx[(1, 1)].abs() < 1e-12);
        assert_relative_eq!(h.dxx[(0, 0)], 1.0, epsilon = 1e-12);
        // transverse dxy eigenvalue (pi/2)/sin(pi/2) = pi/2
        assert_relative_eq!(h.dxy_neg[(1, 1)], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        // det equality instance of the expansion bound at d = pi/2, n = 2
        let det = h.dxy_neg.determinant();
        let bound = s_coeff(1.0, std::f64::consts::FRAC_PI_2).powi(-1);
        assert_relative_eq!(det, bound, epsilon = 1e-12);
    }

    fn manifolds() -> Vec<ManifoldSpec> {
        vec![
            ManifoldSpec::euclidean_box(vec![[0.0, 1.0], [0.0, 2.0]]).unwrap(),
            ManifoldSpec::torus(vec![1.0, 1.5]).unwrap(),
            unit_sphere(),
            ManifoldSpec::sphere(2, 0.7).unwrap(),
            ManifoldSpec::torus(vec![1.0]).unwrap(),
        ]
    }

    #[test]
    fn exp_log_round_trip_many_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let specs = manifolds();
        let mut checked = 0usize;
        while checked < 10_000 {
            let m = &specs[rng.gen_range(0..specs.len())];
            let p = m.random_point(&mut rng);
            let q = m.random_point(&mut rng);
            let Ok(t) = m.log_map(&p, &q) else { continue };
            let back = m.exp_map(&t).unwrap();
            assert!(
                m.distance(&back, &q).unwrap() <= 1e-10,
                "round trip failed on {:?}",
                m.kind()
            );
            assert_relative_eq!(norm(&t.vec), m.distance(&p, &q).unwrap(), epsilon = 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn hessians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = manifolds();
        let mut checked = 0usize;
        while checked < 60 {
            let m = &specs[rng.gen_range(0..specs.len())];
            let p = m.random_point(&mut rng);
            let q = m.random_point(&mut rng);
            let Ok(d) = m.distance(&p, &q) else { continue };
            if d < 0.1 || d > m.diameter() - 0.1 {
                continue;
            }
            let Ok(closed) = m.cost_hessians(&p, &q) else { continue };
            let dir = m.log_map(&p, &q).unwrap().vec;
            let frame_p = m.tangent_frame_with_first(&p, &dir).unwrap();
            let frame_q = m.matched_frame_at_target(&p, &q, &frame_p).unwrap();
            let fd_xx = m.cost_hessian_dxx_fd(&p, &q, &frame_p, 1e-4).unwrap();
            let fd_xy = m.cost_hessian_dxy_neg_fd(&p, &q, &frame_p, &frame_q, 1e-4).unwrap();
            let scale = 1.0 + d * d;
            for i in 0..m.dim() {
                for j in 0..m.dim() {
                    assert!(
                        (closed.dxx[(i, j)] - fd_xx[(i, j)]).abs() <= 1e-5 * scale,
                        "dxx mismatch at ({i},{j}): {} vs {} on {:?}",
                        closed.dxx[(i, j)],
                        fd_xx[(i, j)],
                        m.kind()
                    );
                    assert!(
                        (closed.dxy_neg[(i, j)] - fd_xy[(i, j)]).abs() <= 1e-5 * scale,
                        "dxy mismatch at ({i},{j}): {} vs {} on {:?}",
                        closed.dxy_neg[(i, j)],
                        fd_xy[(i, j)],
                        m.kind()
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn expansion_determinant_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let specs = manifolds();
        for _ in 0..5_000 {
            let m = &specs[rng.gen_range(0..specs.len())];
            let p = m.random_point(&mut rng);
            let q = m.random_point(&mut rng);
            let Ok(h) = m.cost_hessians(&p, &q) else { continue };
            let d = m.distance(&p, &q).unwrap();
            let bound = s_coeff(m.ricci_lower_bound(), d).powi(-(m.dim() as i32) + 1);
            assert!(
                h.dxy_neg.determinant() >= bound - 1e-9,
                "det bound violated at d = {d} on {:?}",
                m.kind()
            );
        }
    }

    #[test]
    fn hessian_trace_bound_at_nonnegative_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let specs = manifolds();
        for _ in 0..5_000 {
            let m = &specs[rng.gen_range(0..specs.len())];
            let p = m.random_point(&mut rng);
            let q = m.random_point(&mut rng);
            let Ok(h) = m.cost_hessians(&p, &q) else { continue };
            assert!(h.dxx.trace() <= m.dim() as f64 + 1e-9);
        }
    }

    #[test]
    fn manifold_spec_json_round_trip() {
        let specs = manifolds();
        for m in specs {
            let s = serde_json::to_string(&m).unwrap();
            let back: ManifoldSpec = serde_json::from_str(&s).unwrap();
            assert_eq!(m, back);
        }
        let parsed: ManifoldSpec =
            serde_json::from_str(r#"{"kind":"sphere","dim":2,"radius":1.0}"#).unwrap();
        assert_eq!(parsed, ManifoldSpec::sphere(2, 1.0).unwrap());
    }

    #[test]
    fn invalid_points_are_rejected() {
        let s = unit_sphere();
        assert!(s.distance(&Point::new(vec![0.0, 0.0, 1.1]), &north()).is_err());
        let b = ManifoldSpec::euclidean_box(vec![[0.0, 1.0]]).unwrap();
        assert!(b.validate_point(&Point::new(vec![2.0])).is_err());
        assert!(b.validate_point(&Point::new(vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn sphere_volume_closed_forms() {
        assert_relative_eq!(
            unit_sphere().volume(),
            4.0 * std::f64::consts::PI,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            ManifoldSpec::sphere(1, 2.0).unwrap().volume(),
            4.0 * std::f64::consts::PI,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            ManifoldSpec::sphere(3, 1.0).unwrap().volume(),
            2.0 * std::f64::consts::PI.powi(2),
            epsilon = 1e-12
        );
    }
}
