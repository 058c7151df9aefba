//! Log-domain Sinkhorn iteration for entropically regularized transport.
//!
//! Potentials are updated through log-sum-exp, so the iteration does not
//! underflow even for regularization strengths far below the squared scale of
//! the cost matrix.

use crate::error::{Error, Result};

pub struct SinkhornOutput {
    /// Row-major `m x k` coupling.
    pub coupling: Vec<f64>,
    /// Source potential, gauge `f[0] = 0`.
    pub f: Vec<f64>,
    /// Target potential.
    pub g: Vec<f64>,
    /// `sum coupling * cost`.
    pub cost: f64,
    pub iterations: usize,
    /// Final L1 marginal violation.
    pub residual: f64,
}

fn logsumexp(acc: &[f64]) -> f64 {
    let m = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + acc.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Runs Sinkhorn until the L1 marginal violation of the implied coupling
/// drops below `marginal_tol`.
pub fn sinkhorn_log(
    a: &[f64],
    b: &[f64],
    costs: &[f64],
    epsilon: f64,
    max_iter: usize,
    marginal_tol: f64,
) -> Result<SinkhornOutput> {
    let m = a.len();
    let k = b.len();
    if costs.len() != m * k {
        return Err(Error::InvalidInput("cost matrix size mismatch".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; k];
    let mut buf = vec![0.0; m.max(k)];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..m {
            for (j, slot) in buf[..k].iter_mut().enumerate() {
                *slot = (g[j] - costs[i * k + j]) / epsilon + log_b[j];
            }
            f[i] = -epsilon * logsumexp(&buf[..k]);
        }
        for j in 0..k {
            for (i, slot) in buf[..m].iter_mut().enumerate() {
                *slot = (f[i] - costs[i * k + j]) / epsilon + log_a[i];
            }
            g[j] = -epsilon * logsumexp(&buf[..m]);
        }
        // column marginals are exact right after the g update; measure rows
        let mut row_violation = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..k {
                row += ((f[i] + g[j] - costs[i * k + j]) / epsilon + log_a[i] + log_b[j])
                    .exp();
            }
            row_violation += (row - a[i]).abs();
        }
        residual = row_violation;
        if residual <= marginal_tol {
            break;
        }
    }
    if residual > marginal_tol {
        return Err(Error::NoConvergence { iterations, residual });
    }
    let mut coupling = vec![0.0; m * k];
    let mut cost = 0.0;
    for i in 0..m {
        for j in 0..k {
            let p =
                ((f[i] + g[j] - costs[i * k + j]) / epsilon + log_a[i] + log_b[j]).exp();
            coupling[i * k + j] = p;
            cost += p * costs[i * k + j];
        }
    }
    let gauge = f[0];
    for x in &mut f {
        *x -= gauge;
    }
    for x in &mut g {
        *x += gauge;
    }
    Ok(SinkhornOutput { coupling, f, g, cost, iterations, residual })
}
