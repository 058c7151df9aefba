//! Wasserstein barycenters of finitely supported families of measures.
//!
//! Two independent routes are provided and cross-checked in tests: a
//! free-support fixed-point iteration (each support atom must be the
//! Riemannian mean of its transported images) and a brute-force multi-marginal
//! linear program over the product of supports, whose optimal coupling is
//! pushed forward through the barycenter map.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ManifoldSpec, Point};
use crate::karcher::{bc_map, karcher_mean, WeightedConfig};
use crate::measures::{Atom, DiscreteMeasure, MeshDensity};
use crate::ot::{
    conditional_targets, lp::solve_lp, network_simplex::NetworkSimplex,
    solve_exact, solve_exact_warm, DualPotentials, TransportPlan,
};

/// Product-of-support-sizes cap for the multi-marginal program.
pub const MULTIMARGINAL_TUPLE_LIMIT: usize = 1_000_000;

/// One measure entering the family: either already discrete or a mesh
/// density (the absolutely continuous case).
#[derive(Debug, Clone)]
pub enum MeasureInput {
    Discrete(DiscreteMeasure),
    Density(MeshDensity),
}

impl MeasureInput {
    pub fn is_absolutely_continuous(&self) -> bool {
        matches!(self, MeasureInput::Density(_))
    }

    pub fn to_discrete(&self) -> Result<DiscreteMeasure> {
        match self {
            MeasureInput::Discrete(d) => Ok(d.clone()),
            MeasureInput::Density(md) => md.to_discrete(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OmegaEntry {
    pub weight: f64,
    pub measure: MeasureInput,
}

/// A weighted family of measures on one manifold.
#[derive(Debug, Clone)]
pub struct OmegaSpec {
    pub manifold: ManifoldSpec,
    pub entries: Vec<OmegaEntry>,
}

impl OmegaSpec {
    pub fn new(manifold: ManifoldSpec, entries: Vec<OmegaEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty family".into()));
        }
        if entries.iter().any(|e| !(e.weight > 0.0)) {
            return Err(Error::InvalidInput("entry weights must be positive".into()));
        }
        let total: f64 = entries.iter().map(|e| e.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("entry weights sum to {total}, not 1")));
        }
        Ok(OmegaSpec { manifold, entries })
    }

    /// Whether any entry is flagged absolutely continuous (required for the
    /// uniqueness guarantee).
    pub fn has_absolutely_continuous(&self) -> bool {
        self.entries.iter().any(|e| e.measure.is_absolutely_continuous())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }
}

/// A computed barycenter with its transport plans, per-atom stationarity
/// residuals, and the functional trace of the iteration.
#[derive(Debug, Clone)]
pub struct BarycenterResult {
    pub measure: DiscreteMeasure,
    /// One plan per entry, from the barycenter to that entry.
    pub plans: Vec<TransportPlan>,
    /// Kantorovich duals per entry (present for the fixed-point route).
    pub duals: Option<Vec<DualPotentials>>,
    /// Per-atom norm of the weighted mean of logs of transported images.
    pub first_order_residuals: Vec<f64>,
    /// Weighted-sum-of-squared-`W2` functional per iteration.
    pub convergence: Vec<f64>,
    pub iterations: usize,
    /// Set when no entry is absolutely continuous, so uniqueness of the
    /// barycenter is not guaranteed.
    pub uniqueness_warning: bool,
}

impl BarycenterResult {
    /// `sum_i lambda_i W2^2(barycenter, mu_i)` at the solution.
    pub fn functional_value(&self, weights: &[f64]) -> f64 {
        self.plans
            .iter()
            .zip(weights)
            .map(|(p, w)| w * 2.0 * p.transport_cost)
            .sum()
    }
}

/// Options for [`solve_fixed_point`].
#[derive(Debug, Clone)]
pub struct FixedPointOptions {
    pub support_size: usize,
    /// Explicit initial support; otherwise sampled i.i.d. from the
    /// highest-weight absolutely continuous entry under `seed`.
    pub init: Option<Vec<Point>>,
    pub seed: u64,
    /// Stationarity target for the per-atom residuals; defaults to
    /// `1e-6 * diameter`.
    pub tol: Option<f64>,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { support_size: 64, init: None, seed: 0, tol: None, max_iter: 2000 }
    }
}

/// The per-atom target mixture `lambda_x`: every entry's conditional row,
/// weighted by the entry weight.
fn atom_mixture(plans: &[TransportPlan], weights: &[f64], atom: usize) -> Result<WeightedConfig> {
    let mut points = Vec::new();
    let mut w = Vec::new();
    for (plan, lam) in plans.iter().zip(weights) {
        let cond = conditional_targets(plan, atom)?;
        for a in cond.atoms {
            points.push(a.point);
            w.push(lam * a.mass);
        }
    }
    Ok(WeightedConfig { points, weights: w })
}

fn residual_of_mixture(spec: &ManifoldSpec, cfg: &WeightedConfig, at: &Point) -> Result<f64> {
    let mut g = vec![0.0; spec.ambient_dim()];
    for (p, w) in cfg.points.iter().zip(&cfg.weights) {
        if *w > 0.0 {
            let t = spec.log_map(at, p)?;
            for (gi, vi) in g.iter_mut().zip(&t.vec) {
                *gi += w * vi;
            }
        }
    }
    Ok(g.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn sample_support(
    omega: &OmegaSpec,
    discretized: &[DiscreteMeasure],
    size: usize,
    seed: u64,
) -> Vec<Point> {
    // highest-weight absolutely continuous entry, else highest-weight entry
    let pick = omega
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.measure.is_absolutely_continuous())
        .max_by(|a, b| a.1.weight.partial_cmp(&b.1.weight).expect("finite weights"))
        .map(|(i, _)| i)
        .unwrap_or_else(|| {
            omega
                .entries
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.weight.partial_cmp(&b.1.weight).expect("finite weights"))
                .map(|(i, _)| i)
                .expect("nonempty family")
        });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::with_capacity(size);
    match &omega.entries[pick].measure {
        MeasureInput::Density(md) => {
            let masses: Vec<f64> = (0..md.values.len()).map(|i| md.cell_mass(i)).collect();
            let cum: Vec<f64> = masses
                .iter()
                .scan(0.0, |acc, m| {
                    *acc += m;
                    Some(*acc)
                })
                .collect();
            let total = *cum.last().expect("nonempty mesh");
            for _ in 0..size {
                let u = rng.gen::<f64>() * total;
                let cell = cum.partition_point(|c| *c < u).min(masses.len() - 1);
                support.push(md.mesh.sample_point_in_cell(cell, &mut rng));
            }
        }
        MeasureInput::Discrete(_) => {
            let dm = &discretized[pick];
            let cum: Vec<f64> = dm
                .atoms
                .iter()
                .scan(0.0, |acc, a| {
                    *acc += a.mass;
                    Some(*acc)
                })
                .collect();
            for _ in 0..size {
                let u = rng.gen::<f64>();
                let i = cum.partition_point(|c| *c < u).min(dm.atoms.len() - 1);
                support.push(dm.atoms[i].point.clone());
            }
        }
    }
    support
}

/// Free-support fixed-point iteration: alternate exact transport from the
/// current barycenter (uniform weights on `support_size` atoms) to every
/// entry with a Karcher-mean update of each atom against its transported
/// images. Stops when every atom's first-order residual is within tolerance;
/// the returned plans, residuals, and support are mutually consistent.
pub fn solve_fixed_point(omega: &OmegaSpec, opts: &FixedPointOptions) -> Result<BarycenterResult> {
    let spec = &omega.manifold;
    let weights = omega.weights();
    let discretized: Vec<DiscreteMeasure> = omega
        .entries
        .iter()
        .map(|e| e.measure.to_discrete())
        .collect::<Result<_>>()?;
    let uniqueness_warning = !omega.has_absolutely_continuous();

    if omega.entries.len() == 1 {
        // the family's only measure is its own barycenter; the identity
        // coupling is optimal since c(x, x) = 0
        let m = discretized.into_iter().next().expect("one entry");
        let n = m.len();
        let coupling = DMatrix::from_fn(n, n, |i, j| if i == j { m.atoms[i].mass } else { 0.0 });
        let plan = TransportPlan {
            source: m.clone(),
            target: m.clone(),
            coupling,
            transport_cost: 0.0,
        };
        let duals = DualPotentials { u: vec![0.0; n], uc: vec![0.0; n] };
        return Ok(BarycenterResult {
            measure: m,
            plans: vec![plan],
            duals: Some(vec![duals]),
            first_order_residuals: vec![0.0; n],
            convergence: vec![0.0],
            iterations: 0,
            uniqueness_warning,
        });
    }

    if opts.support_size == 0 {
        return Err(Error::InvalidInput("support size must be at least 1".into()));
    }
    let tol = opts.tol.unwrap_or(1e-6 * spec.diameter());
    let karcher_tol = (0.05 * tol).min(1e-9 * spec.diameter());
    let mut support = match &opts.init {
        Some(pts) => {
            for p in pts {
                spec.validate_point(p)?;
            }
            pts.clone()
        }
        None => sample_support(omega, &discretized, opts.support_size, opts.seed),
    };
    let s = support.len();
    let uniform = vec![1.0 / s as f64; s];

    let mut warm: Vec<Option<NetworkSimplex>> = vec![None; discretized.len()];
    let mut convergence = Vec::new();
    let mut last_value = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let bar = DiscreteMeasure::from_weighted_points(spec, support.clone(), uniform.clone())?;
        let solved: Vec<(TransportPlan, DualPotentials)> = warm
            .par_iter_mut()
            .zip(discretized.par_iter())
            .map(|(w, target)| solve_exact_warm(spec, &bar, target, w))
            .collect::<Result<_>>()?;
        let plans: Vec<TransportPlan> = solved.iter().map(|(p, _)| p.clone()).collect();
        let value: f64 =
            plans.iter().zip(&weights).map(|(p, w)| w * 2.0 * p.transport_cost).sum();
        convergence.push(value);

        let mixtures: Vec<WeightedConfig> = (0..s)
            .into_par_iter()
            .map(|i| atom_mixture(&plans, &weights, i))
            .collect::<Result<_>>()?;
        let residuals: Vec<f64> = mixtures
            .par_iter()
            .zip(support.par_iter())
            .map(|(cfg, at)| residual_of_mixture(spec, cfg, at))
            .collect::<Result<_>>()?;
        let max_residual = residuals.iter().cloned().fold(0.0, f64::max);
        if max_residual <= tol {
            let duals = solved.iter().map(|(_, d)| d.clone()).collect();
            return Ok(BarycenterResult {
                measure: bar,
                plans,
                duals: Some(duals),
                first_order_residuals: residuals,
                convergence,
                iterations: iter,
                uniqueness_warning,
            });
        }
        if last_value - value < 1e-12 && iter > 0 {
            return Err(Error::NoConvergence { iterations: iter, residual: max_residual });
        }
        last_value = value;

        support = mixtures
            .par_iter()
            .zip(support.par_iter())
            .map(|(cfg, at)| karcher_mean(spec, cfg, at, karcher_tol, 200).map(|o| o.point))
            .collect::<Result<_>>()?;
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual: f64::NAN })
}

/// Brute-force multi-marginal oracle: solves the linear program over the
/// product of supports with per-tuple cost `min_z sum_i lambda_i d^2(x_i, z)`
/// evaluated through the barycenter map, then pushes the optimal coupling
/// forward through that map.
pub fn solve_multimarginal(omega: &OmegaSpec) -> Result<BarycenterResult> {
    let spec = &omega.manifold;
    let weights = omega.weights();
    let marginals: Vec<DiscreteMeasure> = omega
        .entries
        .iter()
        .map(|e| e.measure.to_discrete())
        .collect::<Result<_>>()?;
    let uniqueness_warning = !omega.has_absolutely_continuous();
    let m = marginals.len();
    let sizes: Vec<usize> = marginals.iter().map(|d| d.len()).collect();
    let tuples: usize = sizes.iter().try_fold(1usize, |acc, s| {
        let next = acc.checked_mul(*s)?;
        (next <= MULTIMARGINAL_TUPLE_LIMIT).then_some(next)
    })
    .ok_or_else(|| {
        Error::SizeLimit(format!(
            "product of support sizes {sizes:?} exceeds {MULTIMARGINAL_TUPLE_LIMIT}"
        ))
    })?;

    let tuple_indices = |t: usize| -> Vec<usize> {
        let mut idx = Vec::with_capacity(m);
        let mut rem = t;
        for s in &sizes {
            idx.push(rem % s);
            rem /= s;
        }
        idx
    };

    let karcher_tol = 1e-11 * spec.diameter();
    let evaluated: Vec<(Point, f64)> = (0..tuples)
        .into_par_iter()
        .map(|t| {
            let idx = tuple_indices(t);
            let points: Vec<Point> = idx
                .iter()
                .zip(&marginals)
                .map(|(&a, marg)| marg.atoms[a].point.clone())
                .collect();
            let cfg = WeightedConfig::new(spec, points.clone(), weights.clone())?;
            let z = bc_map(spec, &cfg, karcher_tol, 500)?;
            let mut cost = 0.0;
            for (p, w) in points.iter().zip(&weights) {
                cost += w * spec.distance(p, &z)?.powi(2);
            }
            Ok((z, cost))
        })
        .collect::<Result<_>>()?;

    // equality-form LP: rows are (marginal, atom) pairs
    let rows: usize = sizes.iter().sum();
    let row_offset: Vec<usize> = sizes
        .iter()
        .scan(0usize, |acc, s| {
            let r = *acc;
            *acc += s;
            Some(r)
        })
        .collect();
    let mut a = DMatrix::zeros(rows, tuples);
    for t in 0..tuples {
        for (i, &ai) in tuple_indices(t).iter().enumerate() {
            a[(row_offset[i] + ai, t)] = 1.0;
        }
    }
    let mut b = DVector::zeros(rows);
    for (i, marg) in marginals.iter().enumerate() {
        for (j, atom) in marg.atoms.iter().enumerate() {
            b[row_offset[i] + j] = atom.mass;
        }
    }
    let c = DVector::from_fn(tuples, |t, _| evaluated[t].1);
    let sol = solve_lp(&a, &b, &c)?;
    // optimality certificate: dual feasibility and strong duality
    let scale = 1.0 + c.amax();
    if sol.dual_infeasibility > 1e-9 * scale {
        return Err(Error::NoConvergence { iterations: 0, residual: sol.dual_infeasibility });
    }
    let dual_obj: f64 = sol.duals.iter().zip(b.iter()).map(|(y, b)| y * b).sum();
    if (dual_obj - sol.objective).abs() > 1e-9 * (1.0 + sol.objective.abs()) {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: (dual_obj - sol.objective).abs(),
        });
    }

    // push the optimal coupling forward through the barycenter map
    let kept: Vec<(usize, f64)> = sol
        .x
        .iter()
        .enumerate()
        .filter(|(_, x)| **x > 1e-14)
        .map(|(t, x)| (t, *x))
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidInput("multi-marginal plan is empty".into()));
    }
    let total: f64 = kept.iter().map(|(_, x)| x).sum();
    let atoms: Vec<Atom> = kept
        .iter()
        .map(|(t, x)| Atom { point: evaluated[*t].0.clone(), mass: x / total })
        .collect();
    let measure = DiscreteMeasure::new(spec, atoms)?;

    // induced pairwise couplings from the tuple plan
    let mut plans = Vec::with_capacity(m);
    for (i, marg) in marginals.iter().enumerate() {
        let mut coupling = DMatrix::zeros(kept.len(), marg.len());
        let mut cost = 0.0;
        for (row, (t, x)) in kept.iter().enumerate() {
            let ai = tuple_indices(*t)[i];
            let mass = x / total;
            coupling[(row, ai)] += mass;
            cost += mass * spec.cost(&measure.atoms[row].point, &marg.atoms[ai].point)?;
        }
        let plan = TransportPlan {
            source: measure.clone(),
            target: marg.clone(),
            coupling,
            transport_cost: cost,
        };
        plan.validate(1e-8)?;
        plans.push(plan);
    }

    let residuals: Vec<f64> = (0..measure.len())
        .map(|i| {
            let cfg = atom_mixture(&plans, &weights, i)?;
            residual_of_mixture(spec, &cfg, &measure.atoms[i].point)
        })
        .collect::<Result<_>>()?;
    let value: f64 = plans.iter().zip(&weights).map(|(p, w)| w * 2.0 * p.transport_cost).sum();

    Ok(BarycenterResult {
        measure,
        plans,
        duals: None,
        first_order_residuals: residuals,
        convergence: vec![value],
        iterations: 0,
        uniqueness_warning,
    })
}

/// Replaces every density entry by its cell-center atomization, resampled to
/// the requested mesh resolution. Returns the discretized family and the
/// per-entry `W2` discretization radius (half the cell diameter per binning
/// stage; zero for entries that were already discrete).
pub fn approximate_omega(omega: &OmegaSpec, resolution: usize) -> Result<(OmegaSpec, Vec<f64>)> {
    let mut entries = Vec::with_capacity(omega.entries.len());
    let mut radii = Vec::with_capacity(omega.entries.len());
    for e in &omega.entries {
        match &e.measure {
            MeasureInput::Discrete(d) => {
                entries.push(OmegaEntry {
                    weight: e.weight,
                    measure: MeasureInput::Discrete(d.clone()),
                });
                radii.push(0.0);
            }
            MeasureInput::Density(md) => {
                if md.mesh.resolution == resolution {
                    radii.push(0.5 * md.mesh.cell_diameter());
                    entries.push(OmegaEntry {
                        weight: e.weight,
                        measure: MeasureInput::Discrete(md.to_discrete()?),
                    });
                } else {
                    let mesh = Arc::new(crate::measures::build_mesh_with_reference(
                        &omega.manifold,
                        resolution,
                        &md.mesh.reference,
                    )?);
                    let rebinned =
                        crate::measures::bin_to_mesh(&md.to_discrete()?, &mesh)?;
                    radii.push(0.5 * (md.mesh.cell_diameter() + mesh.cell_diameter()));
                    entries.push(OmegaEntry {
                        weight: e.weight,
                        measure: MeasureInput::Discrete(rebinned.to_discrete()?),
                    });
                }
            }
        }
    }
    Ok((OmegaSpec { manifold: omega.manifold.clone(), entries }, radii))
}

/// First- and second-order balance diagnostics for a computed barycenter.
#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub first_order_residuals: Vec<f64>,
    pub max_first_order: f64,
    /// Largest finite-difference Hessian eigenvalue of the weighted dual
    /// potential sum over the support (flat manifolds only).
    pub second_order_max_eigenvalue: Option<f64>,
    pub second_order_step: Option<f64>,
}

/// Recomputes the first-order residuals from the result's plans and, on flat
/// manifolds, finite-differences the Hessian of
/// `phi(y) = sum_i lambda_i max_z (-c(y, z) + uc_i(z))` at each support atom
/// with the given step.
pub fn balance_certificate(
    omega: &OmegaSpec,
    result: &BarycenterResult,
    second_order_step: Option<f64>,
) -> Result<BalanceReport> {
    let spec = &omega.manifold;
    let weights = omega.weights();
    let first_order_residuals: Vec<f64> = (0..result.measure.len())
        .map(|i| {
            let cfg = atom_mixture(&result.plans, &weights, i)?;
            residual_of_mixture(spec, &cfg, &result.measure.atoms[i].point)
        })
        .collect::<Result<_>>()?;
    let max_first_order = first_order_residuals.iter().cloned().fold(0.0, f64::max);

    let mut second_order_max_eigenvalue = None;
    let mut used_step = None;
    if let Some(h) = second_order_step {
        if spec.is_flat() {
            // duals per entry, re-solved when the result route did not keep them
            let duals: Vec<DualPotentials> = match &result.duals {
                Some(d) => d.clone(),
                None => {
                    let mut out = Vec::new();
                    for e in &omega.entries {
                        let target = e.measure.to_discrete()?;
                        out.push(solve_exact(spec, &result.measure, &target)?.1);
                    }
                    out
                }
            };
            let targets: Vec<DiscreteMeasure> = omega
                .entries
                .iter()
                .map(|e| e.measure.to_discrete())
                .collect::<Result<_>>()?;
            // phi by c-transform extension of each entry's target potential
            let phi = |y: &Point| -> Result<f64> {
                let mut total = 0.0;
                for ((target, d), lam) in targets.iter().zip(&duals).zip(&weights) {
                    let mut best = f64::NEG_INFINITY;
                    for (atom, uc) in target.atoms.iter().zip(&d.uc) {
                        best = best.max(uc - spec.cost(y, &atom.point)?);
                    }
                    total += lam * best;
                }
                Ok(total)
            };
            let n = spec.dim();
            let mut max_eig = f64::NEG_INFINITY;
            for atom in &result.measure.atoms {
                let x = &atom.point;
                let shift = |da: f64, ia: usize, db: f64, ib: usize| -> Result<f64> {
                    let mut v = vec![0.0; n];
                    v[ia] += da;
                    v[ib] += db;
                    let p = spec.exp_map(&spec.project_tangent(x, v))?;
                    phi(&p)
                };
                let f0 = phi(x)?;
                let mut hess = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in i..n {
                        let v = if i == j {
                            (shift(h, i, 0.0, i)? - 2.0 * f0 + shift(-h, i, 0.0, i)?) / (h * h)
                        } else {
                            (shift(h, i, h, j)? - shift(h, i, -h, j)? - shift(-h, i, h, j)?
                                + shift(-h, i, -h, j)?)
                                / (4.0 * h * h)
                        };
                        hess[(i, j)] = v;
                        hess[(j, i)] = v;
                    }
                }
                let eig = hess.symmetric_eigen();
                max_eig = max_eig.max(eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
            second_order_max_eigenvalue = Some(max_eig);
            used_step = Some(h);
        }
    }
    Ok(BalanceReport {
        first_order_residuals,
        max_first_order,
        second_order_max_eigenvalue,
        second_order_step: used_step,
    })
}

/// Rounds a measure's masses to multiples of `1/s` (largest remainder),
/// returning the `W2` distance between the measure and its rounding. This is
/// the support-discretization radius of a uniform-weight approximation.
pub fn uniform_quantization_radius(
    spec: &ManifoldSpec,
    measure: &DiscreteMeasure,
    s: usize,
) -> Result<f64> {

    let mut counts: Vec<usize> =
        measure.atoms.iter().map(|a| (a.mass * s as f64).floor() as usize).collect();
    let mut remainders: Vec<(f64, usize)> = measure
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| (a.mass * s as f64 - counts[i] as f64, i))
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    let missing = s - counts.iter().sum::<usize>();
    for (_, i) in remainders.iter().take(missing) {
        counts[*i] += 1;
    }
    let mut pts = Vec::new();
    let mut w = Vec::new();
    for (a, cnt) in measure.atoms.iter().zip(&counts) {
        if *cnt > 0 {
            pts.push(a.point.clone());
            w.push(*cnt as f64 / s as f64);
        }
    }
    let rounded = DiscreteMeasure::from_weighted_points(spec, pts, w)?;
    crate::ot::w2(spec, measure, &rounded, crate::ot::OtMethod::Exact)
}
