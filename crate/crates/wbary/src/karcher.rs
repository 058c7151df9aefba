//! Riemannian barycenters of weighted point configurations: damped gradient
//! iteration for the Karcher mean, a multi-start wrapper that surfaces
//! non-uniqueness instead of tie-breaking it, and the Lipschitz inverse of
//! the barycenter map in its first argument.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{ManifoldSpec, Point};
use crate::measures::DiscreteMeasure;

/// Weighted points whose barycenter is sought.
#[derive(Debug, Clone)]
pub struct WeightedConfig {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl WeightedConfig {
    pub fn new(spec: &ManifoldSpec, points: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::InvalidInput("config needs matching points and weights".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        for p in &points {
            spec.validate_point(p)?;
        }
        Ok(WeightedConfig { points, weights })
    }

    pub fn from_measure(m: &DiscreteMeasure) -> Self {
        WeightedConfig {
            points: m.atoms.iter().map(|a| a.point.clone()).collect(),
            weights: m.atoms.iter().map(|a| a.mass).collect(),
        }
    }

    /// `1/2 sum_i w_i d^2(z, x_i)`.
    pub fn objective(&self, spec: &ManifoldSpec, z: &Point) -> Result<f64> {
        let mut f = 0.0;
        for (p, w) in self.points.iter().zip(&self.weights) {
            if *w > 0.0 {
                f += w * spec.cost(z, p)?;
            }
        }
        Ok(f)
    }

    /// `sum_i w_i log_z(x_i)` (the negated objective gradient), in ambient
    /// coordinates at `z`.
    fn mean_log(&self, spec: &ManifoldSpec, z: &Point) -> Result<Vec<f64>> {
        let mut g = vec![0.0; spec.ambient_dim()];
        for (p, w) in self.points.iter().zip(&self.weights) {
            if *w > 0.0 {
                let t = spec.log_map(z, p)?;
                for (gi, vi) in g.iter_mut().zip(&t.vec) {
                    *gi += w * vi;
                }
            }
        }
        Ok(g)
    }
}

/// A converged Karcher iteration: the mean, its gradient-norm residual, the
/// objective value there, and the iteration count.
#[derive(Debug, Clone)]
pub struct KarcherOutput {
    pub point: Point,
    pub residual: f64,
    pub value: f64,
    pub iterations: usize,
}

/// Damped gradient iteration `z <- exp_z(step * sum_i w_i log_z(x_i))` from
/// the given start. The unit step is exact in flat space; the step halves on
/// non-descent and on cut-locus hits (erroring only when damping retries are
/// exhausted or the start itself sees a cut locus).
pub fn karcher_mean(
    spec: &ManifoldSpec,
    cfg: &WeightedConfig,
    init: &Point,
    tol: f64,
    max_iter: usize,
) -> Result<KarcherOutput> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let mut z = spec.canonicalize(init);
    let mut value = cfg.objective(spec, &z)?;
    let mut grad = cfg.mean_log(spec, &z)?; // errors at the start are the caller's problem
    for iter in 0..max_iter {
        let gnorm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm <= tol {
            return Ok(KarcherOutput { point: z, residual: gnorm, value, iterations: iter });
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = spec.exp_map(
                &spec.project_tangent(&z, grad.iter().map(|g| g * step).collect()),
            )?;
            match (cfg.objective(spec, &cand), cfg.mean_log(spec, &cand)) {
                (Ok(v), Ok(g)) if v <= value + 1e-15 => {
                    accepted = Some((cand, v, g));
                    break;
                }
                _ => step *= 0.5, // non-descent or cut locus: damp and retry
            }
        }
        let Some((cand, v, g)) = accepted else {
            return Err(Error::CutLocus(
                "karcher step kept hitting the cut locus or failing to descend".into(),
            ));
        };
        z = cand;
        value = v;
        grad = g;
    }
    let gnorm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    if gnorm <= tol {
        return Ok(KarcherOutput { point: z, residual: gnorm, value, iterations: max_iter });
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: gnorm })
}

/// Default gradient tolerance: `1e-9 * diameter`.
pub fn default_tol(spec: &ManifoldSpec) -> f64 {
    1e-9 * spec.diameter()
}

pub const DEFAULT_MAX_ITER: usize = 200;

/// Barycenter of a weighted configuration by multi-start Karcher iteration:
/// one start per input point plus the highest-weight point, with small
/// deterministic perturbations substituted for starts that sit on a cut
/// locus. Distinct minimizers with equal objective value are reported as
/// [`Error::AmbiguousBarycenter`] rather than tie-broken.
pub fn bc_map(
    spec: &ManifoldSpec,
    cfg: &WeightedConfig,
    tol: f64,
    max_iter: usize,
) -> Result<Point> {
    let mut starts: Vec<Point> = cfg
        .points
        .iter()
        .zip(&cfg.weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(p, _)| p.clone())
        .collect();
    let heaviest = cfg
        .weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite weights"))
        .map(|(i, _)| i)
        .expect("nonempty config");
    starts.push(cfg.points[heaviest].clone());

    let mut results: Vec<KarcherOutput> = Vec::new();
    let mut last_err = None;
    for start in &starts {
        match karcher_mean(spec, cfg, start, tol, max_iter) {
            Ok(out) => results.push(out),
            Err(Error::CutLocus(_)) => {
                // replace the start with perturbations along a frame
                let delta = 1e-3 * spec.diameter();
                let Ok(frame) = spec.tangent_frame(start) else { continue };
                for col in 0..spec.dim() {
                    for sign in [1.0, -1.0] {
                        let vec: Vec<f64> =
                            (0..spec.ambient_dim()).map(|i| frame[(i, col)] * delta * sign).collect();
                        let Ok(p) = spec.exp_map(&spec.project_tangent(start, vec)) else {
                            continue;
                        };
                        match karcher_mean(spec, cfg, &p, tol, max_iter) {
                            Ok(out) => results.push(out),
                            Err(e) => last_err = Some(e),
                        }
                    }
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    if results.is_empty() {
        return Err(last_err.unwrap_or(Error::NoConvergence { iterations: 0, residual: f64::NAN }));
    }
    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.partial_cmp(&b.1.value).expect("finite values"))
        .map(|(i, _)| i)
        .expect("nonempty results");
    let best_val = results[best].value;
    let best_pt = results[best].point.clone();
    for (i, r) in results.iter().enumerate() {
        if i == best {
            continue;
        }
        if (r.value - best_val).abs() <= tol {
            let sep = spec.distance(&r.point, &best_pt)?;
            if sep > 10.0 * tol {
                return Err(Error::AmbiguousBarycenter { separation: sep });
            }
        }
    }
    Ok(best_pt)
}

/// The inverse of `y -> bc(w_1 delta_y + sum_{i>=2} w_i delta_{x_i})` on its
/// image: `G(z) = exp_z(-(1/w_1) sum_{i>=2} w_i log_z(x_i))`.
pub fn lipschitz_inverse(
    spec: &ManifoldSpec,
    weights: &[f64],
    others: &[Point],
    z: &Point,
) -> Result<Point> {
    if weights.len() != others.len() + 1 {
        return Err(Error::InvalidInput("weights must cover the moving point and the others".into()));
    }
    let w1 = weights[0];
    if !(w1 > 0.0) {
        return Err(Error::InvalidInput("the moving point's weight must be positive".into()));
    }
    let mut v = vec![0.0; spec.ambient_dim()];
    for (x, w) in others.iter().zip(&weights[1..]) {
        if *w > 0.0 {
            let t = spec.log_map(z, x)?;
            for (vi, ti) in v.iter_mut().zip(&t.vec) {
                *vi -= w / w1 * ti;
            }
        }
    }
    spec.exp_map(&spec.project_tangent(z, v))
}

/// Sampled estimate of the local Lipschitz constant of the inverse map over
/// a geodesic ball: `max d(G(z), G(z')) / d(z, z')` over seeded pairs.
pub fn empirical_lipschitz(
    spec: &ManifoldSpec,
    weights: &[f64],
    others: &[Point],
    center: &Point,
    sample_radius: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    let sample = |rng: &mut ChaCha8Rng, spec: &ManifoldSpec| -> Result<Point> {
        let amb = spec.ambient_dim();
        let dir: Vec<f64> = (0..amb)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let t = spec.project_tangent(center, dir);
        let n = t.vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Ok(center.clone());
        }
        let r = sample_radius * rng.gen::<f64>().powf(1.0 / spec.dim() as f64);
        spec.exp_map(&spec.project_tangent(center, t.vec.iter().map(|x| x / n * r).collect()))
    };
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < trials && attempts < 20 * trials + 100 {
        attempts += 1;
        let z1 = sample(&mut rng, spec)?;
        let z2 = sample(&mut rng, spec)?;
        let dz = spec.distance(&z1, &z2)?;
        if dz < 1e-9 {
            continue;
        }
        let (Ok(g1), Ok(g2)) = (
            lipschitz_inverse(spec, weights, others, &z1),
            lipschitz_inverse(spec, weights, others, &z2),
        ) else {
            continue;
        };
        best = best.max(spec.distance(&g1, &g2)? / dz);
        done += 1;
    }
    if done == 0 {
        return Err(Error::Inconclusive("no valid sample pairs for the Lipschitz estimate".into()));
    }
    Ok(best)
}
