//! Discrete optimal transport between two measures: an exact network-simplex
//! solver with primal-dual certificates, an entropic log-domain solver, the
//! `W2` distance, and conditional decompositions of plans.
//!
//! The internal cost convention is `c = d^2/2` everywhere; `w2` converts back
//! with the factor of two under the square root.

pub mod entropic;
pub mod lp;
pub mod network_simplex;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::ManifoldSpec;
#[cfg(test)]
use crate::geometry::Point;
use crate::measures::{Atom, DiscreteMeasure};
use network_simplex::NetworkSimplex;

/// Documented per-side atom limit of the exact solver.
pub const EXACT_SIZE_LIMIT: usize = 2000;
/// Relative primal-dual gap required of every exact solve.
pub const EXACT_GAP_TOL: f64 = 1e-9;
/// Marginal accuracy required of every exact solve.
pub const EXACT_MARGINAL_TOL: f64 = 1e-10;

/// A coupling between two discrete measures with its transport cost.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub source: DiscreteMeasure,
    pub target: DiscreteMeasure,
    /// Dense coupling, rows = source atoms, columns = target atoms.
    pub coupling: DMatrix<f64>,
    /// `sum_ij coupling_ij c(x_i, y_j)` with `c = d^2/2`.
    pub transport_cost: f64,
}

/// Kantorovich potentials: `u` per source atom, `uc` per target atom, gauge
/// `u[0] = 0`, feasible `u_i + uc_j <= c_ij` within solver tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct DualPotentials {
    pub u: Vec<f64>,
    pub uc: Vec<f64>,
}

/// Sparse-triplet export form of a plan.
#[derive(Debug, Clone, Serialize)]
pub struct PlanExport {
    pub cost: f64,
    pub coupling: Vec<(usize, usize, f64)>,
    pub duals: DualPotentials,
}

impl TransportPlan {
    /// Validates marginals (within `tol`) and nonnegativity.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let m = self.source.len();
        let k = self.target.len();
        if self.coupling.nrows() != m || self.coupling.ncols() != k {
            return Err(Error::InvalidInput("coupling shape mismatch".into()));
        }
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..k {
                let x = self.coupling[(i, j)];
                if x < -1e-12 {
                    return Err(Error::InvalidInput(format!("negative coupling entry {x}")));
                }
                row += x;
            }
            if (row - self.source.atoms[i].mass).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "row {i} sums to {row}, expected {}",
                    self.source.atoms[i].mass
                )));
            }
        }
        for j in 0..k {
            let col: f64 = (0..m).map(|i| self.coupling[(i, j)]).sum();
            if (col - self.target.atoms[j].mass).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "column {j} sums to {col}, expected {}",
                    self.target.atoms[j].mass
                )));
            }
        }
        Ok(())
    }

    /// For each source atom, the target index of its single coupling entry,
    /// or `None` for split rows.
    pub fn map_like_rows(&self) -> Vec<Option<usize>> {
        (0..self.source.len())
            .map(|i| {
                let mut hit = None;
                for j in 0..self.target.len() {
                    if self.coupling[(i, j)] > 1e-12 {
                        if hit.is_some() {
                            return None;
                        }
                        hit = Some(j);
                    }
                }
                hit
            })
            .collect()
    }

    pub fn to_export(&self, duals: &DualPotentials) -> PlanExport {
        let mut coupling = Vec::new();
        for i in 0..self.source.len() {
            for j in 0..self.target.len() {
                let x = self.coupling[(i, j)];
                if x > 0.0 {
                    coupling.push((i, j, x));
                }
            }
        }
        PlanExport { cost: self.transport_cost, coupling, duals: duals.clone() }
    }
}

/// Row `i` of the coupling, renormalized to a probability measure on the
/// target atoms.
pub fn conditional_targets(plan: &TransportPlan, i: usize) -> Result<DiscreteMeasure> {
    let k = plan.target.len();
    let row_mass: f64 = (0..k).map(|j| plan.coupling[(i, j)]).sum();
    if !(row_mass > 0.0) {
        return Err(Error::InvalidInput(format!("zero coupling row {i}")));
    }
    let mut atoms = Vec::new();
    for j in 0..k {
        let x = plan.coupling[(i, j)];
        if x > 0.0 {
            atoms.push(Atom { point: plan.target.atoms[j].point.clone(), mass: x / row_mass });
        }
    }
    // bypass manifold re-validation; target atoms were validated on input
    let total: f64 = atoms.iter().map(|a| a.mass).sum();
    for a in &mut atoms {
        a.mass /= total;
    }
    Ok(DiscreteMeasure { atoms })
}

/// Half-squared-distance cost matrix, row-major.
pub fn cost_matrix(spec: &ManifoldSpec, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<Vec<f64>> {
    let m = mu.len();
    let k = nu.len();
    let mut c = vec![0.0; m * k];
    for (i, ai) in mu.atoms.iter().enumerate() {
        for (j, bj) in nu.atoms.iter().enumerate() {
            c[i * k + j] = spec.cost(&ai.point, &bj.point)?;
        }
    }
    Ok(c)
}

fn extract_exact(
    solver: &NetworkSimplex,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    costs: &[f64],
) -> Result<(TransportPlan, DualPotentials)> {
    let m = mu.len();
    let k = nu.len();
    let flat = solver.coupling();
    let coupling = DMatrix::from_fn(m, k, |i, j| flat[i * k + j]);
    let transport_cost: f64 = flat.iter().zip(costs).map(|(x, c)| x * c).sum();
    let (u, uc) = solver.duals();
    let plan =
        TransportPlan { source: mu.clone(), target: nu.clone(), coupling, transport_cost };
    plan.validate(EXACT_MARGINAL_TOL)?;
    // strong duality certificate
    let dual_value: f64 = u.iter().zip(mu.atoms.iter()).map(|(u, a)| u * a.mass).sum::<f64>()
        + uc.iter().zip(nu.atoms.iter()).map(|(v, b)| v * b.mass).sum::<f64>();
    let gap = (transport_cost - dual_value).abs();
    if gap > EXACT_GAP_TOL * (1.0 + transport_cost.abs()) {
        return Err(Error::NoConvergence { iterations: solver.pivot_count(), residual: gap });
    }
    Ok((plan, DualPotentials { u, uc }))
}

/// Exact optimal transport via network simplex, with marginal and
/// primal-dual-gap certificates checked before returning.
pub fn solve_exact(
    spec: &ManifoldSpec,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<(TransportPlan, DualPotentials)> {
    let mut warm = None;
    solve_exact_warm(spec, mu, nu, &mut warm)
}

/// As [`solve_exact`], reusing the basis in `warm` when the atom counts and
/// masses still match (atom positions may have moved). On return `warm`
/// holds the optimal basis for the next call.
pub fn solve_exact_warm(
    spec: &ManifoldSpec,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    warm: &mut Option<NetworkSimplex>,
) -> Result<(TransportPlan, DualPotentials)> {
    if mu.len() > EXACT_SIZE_LIMIT || nu.len() > EXACT_SIZE_LIMIT {
        return Err(Error::SizeLimit(format!(
            "exact solver limited to {EXACT_SIZE_LIMIT} atoms per side ({} x {})",
            mu.len(),
            nu.len()
        )));
    }
    let costs = cost_matrix(spec, mu, nu)?;
    let reusable = warm.is_some();
    if !reusable {
        *warm = Some(NetworkSimplex::new(mu.masses(), nu.masses())?);
    }
    let solver = warm.as_mut().expect("just set");
    solver.set_costs(costs.clone())?;
    solver.solve()?;
    extract_exact(solver, mu, nu, &costs)
}

/// Entropically regularized transport through log-domain Sinkhorn.
pub fn solve_entropic(
    spec: &ManifoldSpec,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    epsilon: f64,
    max_iter: usize,
    marginal_tol: f64,
) -> Result<(TransportPlan, DualPotentials)> {
    let costs = cost_matrix(spec, mu, nu)?;
    let out = entropic::sinkhorn_log(
        &mu.masses(),
        &nu.masses(),
        &costs,
        epsilon,
        max_iter,
        marginal_tol,
    )?;
    let m = mu.len();
    let k = nu.len();
    let coupling = DMatrix::from_fn(m, k, |i, j| out.coupling[i * k + j]);
    let plan = TransportPlan {
        source: mu.clone(),
        target: nu.clone(),
        coupling,
        transport_cost: out.cost,
    };
    plan.validate(marginal_tol.max(1e-8))?;
    Ok((plan, DualPotentials { u: out.f, uc: out.g }))
}

/// Method selector for [`w2`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OtMethod {
    Exact,
    Entropic { epsilon: f64, max_iter: usize, marginal_tol: f64 },
}

/// Wasserstein distance `sqrt(2 * transport_cost)`.
pub fn w2(
    spec: &ManifoldSpec,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    method: OtMethod,
) -> Result<f64> {
    let cost = match method {
        OtMethod::Exact => solve_exact(spec, mu, nu)?.0.transport_cost,
        OtMethod::Entropic { epsilon, max_iter, marginal_tol } => {
            solve_entropic(spec, mu, nu, epsilon, max_iter, marginal_tol)?.0.transport_cost
        }
    };
    Ok((2.0 * cost.max(0.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Atom;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn torus2() -> ManifoldSpec {
        ManifoldSpec::torus(vec![1.0, 1.0]).unwrap()
    }

    fn uniform_random(spec: &ManifoldSpec, n: usize, rng: &mut ChaCha8Rng) -> DiscreteMeasure {
        let pts: Vec<Point> = (0..n).map(|_| spec.random_point(rng)).collect();
        DiscreteMeasure::from_weighted_points(spec, pts, vec![1.0; n]).unwrap()
    }

    fn weighted_random(spec: &ManifoldSpec, n: usize, rng: &mut ChaCha8Rng) -> DiscreteMeasure {
        let pts: Vec<Point> = (0..n).map(|_| spec.random_point(rng)).collect();
        let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.gen::<f64>()).collect();
        DiscreteMeasure::from_weighted_points(spec, pts, w).unwrap()
    }

    /// Brute-force transportation oracle: enumerates spanning-tree bases of
    /// the bipartite graph and keeps the cheapest feasible one.
    fn brute_force_cost(a: &[f64], b: &[f64], costs: &[f64]) -> f64 {
        let m = a.len();
        let k = b.len();
        let edges = m * k;
        let basis_size = m + k - 1;
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << edges) {
            if mask.count_ones() as usize != basis_size {
                continue;
            }
            // peel leaves to solve tree flows
            let mut deg = vec![0usize; m + k];
            let mut inc: Vec<Vec<usize>> = vec![Vec::new(); m + k];
            for e in 0..edges {
                if mask & (1 << e) != 0 {
                    let (i, j) = (e / k, e % k);
                    deg[i] += 1;
                    deg[m + j] += 1;
                    inc[i].push(e);
                    inc[m + j].push(e);
                }
            }
            let mut supply: Vec<f64> = a.iter().cloned().chain(b.iter().map(|x| -x)).collect();
            let mut used = vec![false; edges];
            let mut flows = vec![0.0; edges];
            let mut ok = true;
            let mut removed = 0;
            let mut queue: Vec<usize> =
                (0..m + k).filter(|&v| deg[v] == 1).collect();
            while let Some(v) = queue.pop() {
                if deg[v] != 1 {
                    continue;
                }
                let &e = inc[v]
                    .iter()
                    .find(|&&e| !used[e])
                    .expect("leaf has an unused edge");
                used[e] = true;
                removed += 1;
                let (i, j) = (e / k, e % k);
                let other = if v == i { m + j } else { i };
                // flow from source i to target j carries +supply if v is the source
                let f = if v < m { supply[v] } else { -supply[v] };
                flows[e] = f;
                if f < -1e-12 {
                    ok = false;
                    break;
                }
                supply[v] = 0.0;
                if other < m {
                    supply[other] -= f;
                } else {
                    supply[other] += f;
                }
                deg[v] -= 1;
                deg[other] -= 1;
                if deg[other] == 1 {
                    queue.push(other);
                }
            }
            if !ok || removed != basis_size {
                continue; // not a spanning tree or infeasible
            }
            if supply.iter().any(|s| s.abs() > 1e-9) {
                continue;
            }
            let cost: f64 = flows.iter().zip(costs).map(|(f, c)| f * c).sum();
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn dirac_pair_costs_half_squared_distance() {
        let spec = torus2();
        let mu = DiscreteMeasure::dirac(&spec, Point::new(vec![0.1, 0.1])).unwrap();
        let nu = DiscreteMeasure::dirac(&spec, Point::new(vec![0.4, 0.1])).unwrap();
        let (plan, _) = solve_exact(&spec, &mu, &nu).unwrap();
        assert_relative_eq!(plan.transport_cost, 0.5 * 0.3 * 0.3, epsilon = 1e-12);
        assert_relative_eq!(plan.coupling[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_measures_have_zero_cost() {
        let spec = torus2();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = weighted_random(&spec, 6, &mut rng);
        let (plan, duals) = solve_exact(&spec, &mu, &mu).unwrap();
        assert!(plan.transport_cost.abs() < 1e-12);
        // duality certificate at zero cost
        let dual: f64 = duals
            .u
            .iter()
            .zip(&mu.atoms)
            .map(|(u, a)| u * a.mass)
            .sum::<f64>()
            + duals.uc.iter().zip(&mu.atoms).map(|(v, a)| v * a.mass).sum::<f64>();
        assert!(dual.abs() < 1e-12);
    }

    #[test]
    fn two_by_two_derived_instance() {
        // enumerate both extreme couplings: diagonal cost 0, anti-diagonal 1
        let spec = ManifoldSpec::euclidean_box(vec![[0.0, 2.0]]).unwrap();
        let mu = DiscreteMeasure::new(
            &spec,
            vec![
                Atom { point: Point::new(vec![0.0]), mass: 0.5 },
                Atom { point: Point::new(vec![1.0]), mass: 0.5 },
            ],
        )
        .unwrap();
        let (plan, _) = solve_exact(&spec, &mu, &mu).unwrap();
        assert!(plan.transport_cost.abs() < 1e-15);
        assert_relative_eq!(plan.coupling[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(plan.coupling[(1, 1)], 0.5, epsilon = 1e-12);
        assert!(plan.coupling[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn w2_matches_brute_force_vertex_enumeration() {
        let spec = torus2();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..25 {
            let mu = weighted_random(&spec, 3, &mut rng);
            let nu = weighted_random(&spec, 3, &mut rng);
            let costs = cost_matrix(&spec, &mu, &nu).unwrap();
            let oracle = brute_force_cost(&mu.masses(), &nu.masses(), &costs);
            let solved = solve_exact(&spec, &mu, &nu).unwrap().0.transport_cost;
            assert_relative_eq!(solved, oracle, epsilon = 1e-10);
            let d = w2(&spec, &mu, &nu, OtMethod::Exact).unwrap();
            assert_relative_eq!(d, (2.0 * oracle).sqrt(), epsilon = 1e-10);
        }
    }

    #[test]
    fn w2_metric_axioms_sampled() {
        let spec = torus2();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = weighted_random(&spec, 4, &mut rng);
            let b = weighted_random(&spec, 4, &mut rng);
            let c = weighted_random(&spec, 4, &mut rng);
            let dab = w2(&spec, &a, &b, OtMethod::Exact).unwrap();
            let dba = w2(&spec, &b, &a, OtMethod::Exact).unwrap();
            assert_relative_eq!(dab, dba, epsilon = 1e-12);
            let dac = w2(&spec, &a, &c, OtMethod::Exact).unwrap();
            let dcb = w2(&spec, &c, &b, OtMethod::Exact).unwrap();
            assert!(dab <= dac + dcb + 1e-9);
            assert!(w2(&spec, &a, &a, OtMethod::Exact).unwrap() < 1e-9);
        }
    }

    #[test]
    fn dual_feasibility_and_slackness() {
        let spec = torus2();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = weighted_random(&spec, 7, &mut rng);
        let nu = weighted_random(&spec, 5, &mut rng);
        let costs = cost_matrix(&spec, &mu, &nu).unwrap();
        let (plan, duals) = solve_exact(&spec, &mu, &nu).unwrap();
        assert_eq!(duals.u[0], 0.0);
        for i in 0..7 {
            for j in 0..5 {
                let slack = costs[i * 5 + j] - duals.u[i] - duals.uc[j];
                assert!(slack >= -1e-9);
                if plan.coupling[(i, j)] > 1e-12 {
                    assert!(slack.abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn entropic_cost_approaches_exact_as_epsilon_shrinks() {
        let spec = torus2();
        let mu = DiscreteMeasure::dirac(&spec, Point::new(vec![0.1, 0.2])).unwrap();
        let nu = DiscreteMeasure::dirac(&spec, Point::new(vec![0.35, 0.2])).unwrap();
        let exact = solve_exact(&spec, &mu, &nu).unwrap().0.transport_cost;
        let gap_at = |eps: f64| {
            let (plan, _) = solve_entropic(&spec, &mu, &nu, eps, 5000, 1e-10).unwrap();
            (plan.transport_cost - exact).abs()
        };
        // single-atom pair has a unique coupling; cost matches at every epsilon
        assert!(gap_at(1e-1) < 1e-9);
        assert!(gap_at(1e-2) < 1e-9);
    }

    #[test]
    fn entropic_gap_is_monotone_and_bounded() {
        let spec = torus2();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = uniform_random(&spec, 6, &mut rng);
        let nu = uniform_random(&spec, 6, &mut rng);
        let exact = solve_exact(&spec, &mu, &nu).unwrap().0.transport_cost;
        let cost_at = |eps: f64| {
            solve_entropic(&spec, &mu, &nu, eps, 50000, 1e-8).unwrap().0.transport_cost
        };
        let c1 = cost_at(1e-1);
        let c2 = cost_at(1e-2);
        assert!(c1 >= exact - 1e-9);
        assert!(c2 >= exact - 1e-9);
        assert!(c2 <= c1 + 1e-9, "entropic bias should shrink with epsilon");
        // self-transport entropic bias bound
        let d2 = spec.diameter().powi(2);
        let eps = 1e-2 * d2;
        let (self_plan, _) = solve_entropic(&spec, &mu, &mu, eps, 20000, 1e-8).unwrap();
        assert!(self_plan.transport_cost <= eps * (6.0_f64).ln());
    }

    #[test]
    fn entropic_plan_is_symmetric_under_swap() {
        let spec = torus2();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mu = uniform_random(&spec, 5, &mut rng);
        let nu = uniform_random(&spec, 4, &mut rng);
        let (p1, _) = solve_entropic(&spec, &mu, &nu, 5e-2, 50000, 1e-13).unwrap();
        let (p2, _) = solve_entropic(&spec, &nu, &mu, 5e-2, 50000, 1e-13).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert!((p1.coupling[(i, j)] - p2.coupling[(j, i)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conditional_rows_renormalize() {
        let spec = torus2();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mu = weighted_random(&spec, 4, &mut rng);
        let nu = weighted_random(&spec, 6, &mut rng);
        let (plan, _) = solve_exact(&spec, &mu, &nu).unwrap();
        for i in 0..4 {
            let cond = conditional_targets(&plan, i).unwrap();
            let total: f64 = cond.atoms.iter().map(|a| a.mass).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
        // map-like plan conditional is a Dirac
        let d1 = DiscreteMeasure::dirac(&spec, Point::new(vec![0.2, 0.2])).unwrap();
        let d2 = DiscreteMeasure::dirac(&spec, Point::new(vec![0.6, 0.6])).unwrap();
        let (plan, _) = solve_exact(&spec, &d1, &d2).unwrap();
        let cond = conditional_targets(&plan, 0).unwrap();
        assert_eq!(cond.len(), 1);
    }

    #[test]
    fn uniform_instances_are_mostly_map_like() {
        let spec = torus2();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut total_rows = 0usize;
        let mut map_like = 0usize;
        for _ in 0..50 {
            let mu = uniform_random(&spec, 10, &mut rng);
            let nu = uniform_random(&spec, 10, &mut rng);
            let (plan, _) = solve_exact(&spec, &mu, &nu).unwrap();
            for r in plan.map_like_rows() {
                total_rows += 1;
                if r.is_some() {
                    map_like += 1;
                }
            }
        }
        assert!(
            map_like as f64 >= 0.9 * total_rows as f64,
            "{map_like}/{total_rows} map-like rows"
        );
    }

    #[test]
    fn size_limit_is_enforced() {
        let spec = ManifoldSpec::euclidean_box(vec![[0.0, 1.0]]).unwrap();
        let pts: Vec<Point> =
            (0..2001).map(|i| Point::new(vec![i as f64 / 2001.0])).collect();
        let mu = DiscreteMeasure::from_weighted_points(&spec, pts, vec![1.0; 2001]).unwrap();
        let nu = DiscreteMeasure::dirac(&spec, Point::new(vec![0.5])).unwrap();
        assert!(matches!(solve_exact(&spec, &mu, &nu), Err(Error::SizeLimit(_))));
    }
}
