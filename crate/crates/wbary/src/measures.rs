//! Probability measures as the solvers see them: weighted atom clouds
//! ([`DiscreteMeasure`]) and per-cell densities against a reference measure on
//! a fixed mesh ([`MeshDensity`]).
//!
//! Meshes are uniform grids on the box and torus and a latitude-longitude
//! grid with exact band areas on the 2-sphere, so that volume identities hold
//! to machine precision rather than quadrature accuracy.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ManifoldKind, ManifoldSpec, Point};

/// Total-mass tolerance for discrete measures.
pub const MASS_TOL: f64 = 1e-12;
/// Total-mass tolerance for mesh densities.
pub const DENSITY_MASS_TOL: f64 = 1e-6;

/// A weighted atom of a discrete measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: Point,
    pub mass: f64,
}

/// A finitely supported probability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub atoms: Vec<Atom>,
}

impl DiscreteMeasure {
    /// Validates masses (positive, summing to one) and point coordinates.
    pub fn new(spec: &ManifoldSpec, atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidInput("measure needs at least one atom".into()));
        }
        let mut total = 0.0;
        for a in &atoms {
            if !(a.mass > 0.0) {
                return Err(Error::InvalidInput(format!("non-positive atom mass {}", a.mass)));
            }
            spec.validate_point(&a.point)?;
            total += a.mass;
        }
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!("atom masses sum to {total}, not 1")));
        }
        Ok(DiscreteMeasure { atoms })
    }

    /// Builds a measure from points and unnormalized weights, normalizing the
    /// total mass to one.
    pub fn from_weighted_points(
        spec: &ManifoldSpec,
        points: Vec<Point>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::InvalidInput("points/weights length mismatch".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("weights sum to zero".into()));
        }
        let atoms = points
            .into_iter()
            .zip(weights)
            .filter(|(_, w)| *w > 0.0)
            .map(|(point, w)| Atom { point, mass: w / total })
            .collect();
        DiscreteMeasure::new(spec, atoms)
    }

    pub fn dirac(spec: &ManifoldSpec, point: Point) -> Result<Self> {
        DiscreteMeasure::new(spec, vec![Atom { point, mass: 1.0 }])
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.mass).collect()
    }

    pub fn points(&self) -> Vec<Point> {
        self.atoms.iter().map(|a| a.point.clone()).collect()
    }
}

/// Reference measure `d nu = e^{-V} d vol` through a closed-form potential
/// tag; `Zero` is the Riemannian volume itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "V", rename_all = "lowercase")]
pub enum ReferenceMeasure {
    Zero,
    Gaussian { center: Vec<f64>, variance: f64 },
    /// Potential tabulated per mesh cell; carries no derivatives.
    Custom { values: Vec<f64> },
}

impl ReferenceMeasure {
    /// Potential value at a point; `Custom` needs the cell index instead.
    pub fn potential_at(&self, spec: &ManifoldSpec, p: &Point) -> Result<f64> {
        match self {
            ReferenceMeasure::Zero => Ok(0.0),
            ReferenceMeasure::Gaussian { center, variance } => {
                if matches!(spec.kind(), ManifoldKind::Sphere { .. }) {
                    return Err(Error::Unsupported(
                        "gaussian reference potentials are flat-manifold only".into(),
                    ));
                }
                if !(*variance > 0.0) {
                    return Err(Error::InvalidInput("gaussian variance must be positive".into()));
                }
                let d = spec.distance(p, &Point::new(center.clone()))?;
                Ok(d * d / (2.0 * variance))
            }
            ReferenceMeasure::Custom { .. } => Err(Error::Unsupported(
                "tabulated potentials are evaluated per cell, not per point".into(),
            )),
        }
    }
}

/// One mesh cell: its center and its reference-measure mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub center: Point,
    pub volume: f64,
}

/// A fixed partition of the manifold with per-cell reference masses.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub spec: ManifoldSpec,
    pub resolution: usize,
    pub reference: ReferenceMeasure,
    pub cells: Vec<Cell>,
}

/// Uniform grid (box/torus) or latitude-longitude grid with exact band areas
/// (2-sphere), with the Riemannian volume as the reference.
pub fn build_mesh(spec: &ManifoldSpec, resolution: usize) -> Result<Mesh> {
    build_mesh_with_reference(spec, resolution, &ReferenceMeasure::Zero)
}

/// As [`build_mesh`], with cell masses weighted by `e^{-V}` at cell centers.
pub fn build_mesh_with_reference(
    spec: &ManifoldSpec,
    resolution: usize,
    reference: &ReferenceMeasure,
) -> Result<Mesh> {
    if resolution < 2 {
        return Err(Error::InvalidInput(format!("mesh resolution {resolution} < 2")));
    }
    let mut cells = Vec::new();
    match spec.kind() {
        ManifoldKind::EuclideanBox { bounds } => {
            let n = spec.dim();
            let total = resolution.pow(n as u32);
            for flat in 0..total {
                let mut idx = flat;
                let mut center = Vec::with_capacity(n);
                let mut vol = 1.0;
                for b in bounds {
                    let h = (b[1] - b[0]) / resolution as f64;
                    let i = idx % resolution;
                    idx /= resolution;
                    center.push(b[0] + (i as f64 + 0.5) * h);
                    vol *= h;
                }
                cells.push(Cell { center: Point::new(center), volume: vol });
            }
        }
        ManifoldKind::FlatTorus { periods } => {
            let n = spec.dim();
            let total = resolution.pow(n as u32);
            for flat in 0..total {
                let mut idx = flat;
                let mut center = Vec::with_capacity(n);
                let mut vol = 1.0;
                for p in periods {
                    let h = p / resolution as f64;
                    let i = idx % resolution;
                    idx /= resolution;
                    center.push((i as f64 + 0.5) * h);
                    vol *= h;
                }
                cells.push(Cell { center: Point::new(center), volume: vol });
            }
        }
        ManifoldKind::Sphere { radius } => {
            if spec.dim() != 2 {
                return Err(Error::Unsupported("sphere meshes are 2-dimensional only".into()));
            }
            let bands = resolution;
            let longs = 2 * resolution;
            let dphi = std::f64::consts::PI / bands as f64;
            let dlong = 2.0 * std::f64::consts::PI / longs as f64;
            for b in 0..bands {
                let phi_bot = -std::f64::consts::FRAC_PI_2 + b as f64 * dphi;
                let phi_top = phi_bot + dphi;
                let band_area = radius * radius * dlong * (phi_top.sin() - phi_bot.sin());
                let phi_c = 0.5 * (phi_bot + phi_top);
                for l in 0..longs {
                    let lam = (l as f64 + 0.5) * dlong;
                    let center = Point::new(vec![
                        radius * phi_c.cos() * lam.cos(),
                        radius * phi_c.cos() * lam.sin(),
                        radius * phi_c.sin(),
                    ]);
                    cells.push(Cell { center, volume: band_area });
                }
            }
        }
    }
    match reference {
        ReferenceMeasure::Zero => {}
        ReferenceMeasure::Gaussian { .. } => {
            for c in &mut cells {
                let v = reference.potential_at(spec, &c.center)?;
                c.volume *= (-v).exp();
            }
        }
        ReferenceMeasure::Custom { values } => {
            if values.len() != cells.len() {
                return Err(Error::InvalidInput(format!(
                    "tabulated potential has {} values for {} cells",
                    values.len(),
                    cells.len()
                )));
            }
            for (c, v) in cells.iter_mut().zip(values) {
                if !v.is_finite() {
                    return Err(Error::InvalidInput("non-finite tabulated potential".into()));
                }
                c.volume *= (-v).exp();
            }
        }
    }
    Ok(Mesh { spec: spec.clone(), resolution, reference: reference.clone(), cells })
}

impl Mesh {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Total reference mass (the Riemannian volume when the reference is the
    /// volume measure).
    pub fn total_volume(&self) -> f64 {
        self.cells.iter().map(|c| c.volume).sum()
    }

    /// Index of the cell containing `p`, or `None` outside the mesh (box
    /// boundary overshoot).
    pub fn cell_index_of(&self, p: &Point) -> Option<usize> {
        let r = self.resolution;
        match self.spec.kind() {
            ManifoldKind::EuclideanBox { bounds } => {
                let mut flat = 0usize;
                let mut stride = 1usize;
                for (c, b) in p.coords.iter().zip(bounds) {
                    if *c < b[0] - 1e-9 || *c > b[1] + 1e-9 {
                        return None;
                    }
                    let h = (b[1] - b[0]) / r as f64;
                    let i = (((c - b[0]) / h).floor() as isize).clamp(0, r as isize - 1) as usize;
                    flat += i * stride;
                    stride *= r;
                }
                Some(flat)
            }
            ManifoldKind::FlatTorus { periods } => {
                let p = self.spec.canonicalize(p);
                let mut flat = 0usize;
                let mut stride = 1usize;
                for (c, per) in p.coords.iter().zip(periods) {
                    let h = per / r as f64;
                    let i = ((c / h).floor() as isize).clamp(0, r as isize - 1) as usize;
                    flat += i * stride;
                    stride *= r;
                }
                Some(flat)
            }
            ManifoldKind::Sphere { radius } => {
                let z = (p.coords[2] / radius).clamp(-1.0, 1.0);
                let phi = z.asin();
                let dphi = std::f64::consts::PI / r as f64;
                let band = (((phi + std::f64::consts::FRAC_PI_2) / dphi).floor() as isize)
                    .clamp(0, r as isize - 1) as usize;
                let lam = p.coords[1].atan2(p.coords[0]).rem_euclid(2.0 * std::f64::consts::PI);
                let longs = 2 * r;
                let dlong = 2.0 * std::f64::consts::PI / longs as f64;
                let l =
                    ((lam / dlong).floor() as isize).clamp(0, longs as isize - 1) as usize;
                Some(band * longs + l)
            }
        }
    }

    /// Upper bound on the metric diameter of any cell.
    pub fn cell_diameter(&self) -> f64 {
        let r = self.resolution as f64;
        match self.spec.kind() {
            ManifoldKind::EuclideanBox { bounds } => {
                bounds.iter().map(|b| ((b[1] - b[0]) / r).powi(2)).sum::<f64>().sqrt()
            }
            ManifoldKind::FlatTorus { periods } => {
                periods.iter().map(|p| (p / r).powi(2)).sum::<f64>().sqrt()
            }
            ManifoldKind::Sphere { radius } => {
                let dphi = std::f64::consts::PI / r;
                let dlong = std::f64::consts::PI / r;
                radius * (dphi.powi(2) + dlong.powi(2)).sqrt()
            }
        }
    }

    /// Indices of the cell plus one ring of index neighbors (wrapping on the
    /// torus and in sphere longitude).
    pub fn ring_neighbors(&self, idx: usize) -> Vec<usize> {
        let r = self.resolution;
        match self.spec.kind() {
            ManifoldKind::EuclideanBox { .. } | ManifoldKind::FlatTorus { .. } => {
                let n = self.spec.dim();
                let wrap = matches!(self.spec.kind(), ManifoldKind::FlatTorus { .. });
                let mut multi = vec![0usize; n];
                let mut rem = idx;
                for m in multi.iter_mut() {
                    *m = rem % r;
                    rem /= r;
                }
                let mut out = Vec::new();
                let offsets = 3usize.pow(n as u32);
                'outer: for o in 0..offsets {
                    let mut flat = 0usize;
                    let mut stride = 1usize;
                    let mut oo = o;
                    for m in &multi {
                        let delta = (oo % 3) as isize - 1;
                        oo /= 3;
                        let raw = *m as isize + delta;
                        let i = if wrap {
                            raw.rem_euclid(r as isize) as usize
                        } else if raw < 0 || raw >= r as isize {
                            continue 'outer;
                        } else {
                            raw as usize
                        };
                        flat += i * stride;
                        stride *= r;
                    }
                    out.push(flat);
                }
                out.sort_unstable();
                out.dedup();
                out
            }
            ManifoldKind::Sphere { .. } => {
                let longs = 2 * r;
                let band = idx / longs;
                let l = idx % longs;
                let mut out = Vec::new();
                for db in -1isize..=1 {
                    let b = band as isize + db;
                    if b < 0 || b >= r as isize {
                        continue;
                    }
                    for dl in -1isize..=1 {
                        let ll = (l as isize + dl).rem_euclid(longs as isize) as usize;
                        out.push(b as usize * longs + ll);
                    }
                }
                out.sort_unstable();
                out.dedup();
                out
            }
        }
    }

    /// A point sampled uniformly (w.r.t. the cell's area element) inside the
    /// given cell.
    pub fn sample_point_in_cell<R: Rng>(&self, idx: usize, rng: &mut R) -> Point {
        let r = self.resolution;
        match self.spec.kind() {
            ManifoldKind::EuclideanBox { bounds } => {
                let mut rem = idx;
                let mut coords = Vec::with_capacity(self.spec.dim());
                for b in bounds {
                    let h = (b[1] - b[0]) / r as f64;
                    let i = rem % r;
                    rem /= r;
                    coords.push(b[0] + (i as f64 + rng.gen::<f64>()) * h);
                }
                Point::new(coords)
            }
            ManifoldKind::FlatTorus { periods } => {
                let mut rem = idx;
                let mut coords = Vec::with_capacity(self.spec.dim());
                for p in periods {
                    let h = p / r as f64;
                    let i = rem % r;
                    rem /= r;
                    coords.push((i as f64 + rng.gen::<f64>()) * h);
                }
                Point::new(coords)
            }
            ManifoldKind::Sphere { radius } => {
                let longs = 2 * r;
                let band = idx / longs;
                let l = idx % longs;
                let dphi = std::f64::consts::PI / r as f64;
                let phi_bot = -std::f64::consts::FRAC_PI_2 + band as f64 * dphi;
                let phi_top = phi_bot + dphi;
                // uniform in sin(phi) is uniform in band area
                let s = phi_bot.sin() + rng.gen::<f64>() * (phi_top.sin() - phi_bot.sin());
                let phi = s.clamp(-1.0, 1.0).asin();
                let dlong = 2.0 * std::f64::consts::PI / longs as f64;
                let lam = (l as f64 + rng.gen::<f64>()) * dlong;
                Point::new(vec![
                    radius * phi.cos() * lam.cos(),
                    radius * phi.cos() * lam.sin(),
                    radius * phi.sin(),
                ])
            }
        }
    }
}

/// A density per cell against the mesh's reference measure.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDensity {
    pub mesh: Arc<Mesh>,
    pub values: Vec<f64>,
}

impl MeshDensity {
    /// Validates nonnegativity and unit total mass.
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.len() {
            return Err(Error::InvalidInput(format!(
                "{} density values for {} cells",
                values.len(),
                mesh.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("densities must be finite and nonnegative".into()));
        }
        let total: f64 =
            values.iter().zip(&mesh.cells).map(|(v, c)| v * c.volume).sum();
        if (total - 1.0).abs() > DENSITY_MASS_TOL {
            return Err(Error::InvalidInput(format!("density integrates to {total}, not 1")));
        }
        Ok(MeshDensity { mesh, values })
    }

    /// Builds a density proportional to `values`, normalized to unit mass.
    pub fn normalized(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        let total: f64 = values.iter().zip(&mesh.cells).map(|(v, c)| v * c.volume).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("cannot normalize a zero density".into()));
        }
        MeshDensity::new(mesh, values.into_iter().map(|v| v / total).collect())
    }

    /// Essential supremum of the density: the maximum cell value.
    pub fn ess_sup(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// One atom per cell at the cell center with the cell's mass; zero-mass
    /// cells are dropped and the result renormalized.
    pub fn to_discrete(&self) -> Result<DiscreteMeasure> {
        let mut atoms = Vec::new();
        for (v, c) in self.values.iter().zip(&self.mesh.cells) {
            let mass = v * c.volume;
            if mass > 0.0 {
                atoms.push(Atom { point: c.center.clone(), mass });
            }
        }
        let total: f64 = atoms.iter().map(|a| a.mass).sum();
        for a in &mut atoms {
            a.mass /= total;
        }
        DiscreteMeasure::new(&self.mesh.spec, atoms)
    }

    /// Mass of the cell with the given index.
    pub fn cell_mass(&self, idx: usize) -> f64 {
        self.values[idx] * self.mesh.cells[idx].volume
    }
}

/// Normalized restriction of the reference measure to a cell selection:
/// density `1/nu(selection)` on selected cells and zero elsewhere.
pub fn uniform_on_set(mesh: &Arc<Mesh>, indicator: &[bool]) -> Result<MeshDensity> {
    if indicator.len() != mesh.len() {
        return Err(Error::InvalidInput("indicator length != cell count".into()));
    }
    let mass: f64 = mesh
        .cells
        .iter()
        .zip(indicator)
        .filter(|(_, sel)| **sel)
        .map(|(c, _)| c.volume)
        .sum();
    if !(mass > 0.0) {
        return Err(Error::EmptySet);
    }
    let values =
        indicator.iter().map(|sel| if *sel { 1.0 / mass } else { 0.0 }).collect();
    MeshDensity::new(Arc::clone(mesh), values)
}

/// Bins a discrete measure onto mesh cells: cell value = assigned mass /
/// reference mass of the cell. Errors if an atom lies outside every cell.
pub fn bin_to_mesh(dm: &DiscreteMeasure, mesh: &Arc<Mesh>) -> Result<MeshDensity> {
    let mut values = vec![0.0; mesh.len()];
    for a in &dm.atoms {
        let idx = mesh.cell_index_of(&a.point).ok_or_else(|| {
            Error::InvalidInput(format!("atom at {:?} outside the mesh", a.point.coords))
        })?;
        values[idx] += a.mass;
    }
    for (v, c) in values.iter_mut().zip(&mesh.cells) {
        *v /= c.volume;
    }
    MeshDensity::new(Arc::clone(mesh), values)
}
