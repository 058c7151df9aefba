//! Two-phase revised simplex for small dense equality-form linear programs
//! `min c'x  s.t.  Ax = b, x >= 0`, with Bland's rule for finite termination
//! and dual values for optimality certificates.
//!
//! Used for the multi-marginal transport program, whose constraint matrix is
//! not a network flow for three or more marginals. Sized for problems with at
//! most a few dozen rows; the column count may be large (one per support
//! tuple) since pricing scans columns lazily.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub struct LpSolution {
    pub x: Vec<f64>,
    pub duals: Vec<f64>,
    pub objective: f64,
    /// max over columns of `y'A_j - c_j` (dual infeasibility; <= tol at
    /// optimality).
    pub dual_infeasibility: f64,
}

struct Tableau<'a> {
    a: &'a DMatrix<f64>,
    rows: usize,
    cols: usize,
    basis: Vec<usize>, // variable index per row; >= cols means artificial
}

impl<'a> Tableau<'a> {
    fn column(&self, var: usize) -> DVector<f64> {
        if var < self.cols {
            self.a.column(var).into_owned()
        } else {
            let mut e = DVector::zeros(self.rows);
            e[var - self.cols] = 1.0;
            e
        }
    }

    fn basis_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.rows, self.rows);
        for (r, &v) in self.basis.iter().enumerate() {
            b.set_column(r, &self.column(v));
        }
        b
    }
}

fn run_phase(
    t: &mut Tableau,
    costs: impl Fn(usize) -> f64,
    b: &DVector<f64>,
    allow_enter: impl Fn(usize) -> bool,
    tol: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let max_iters = 50_000;
    for _ in 0..max_iters {
        let bm = t.basis_matrix();
        let lu = bm.clone().lu();
        let xb = lu
            .solve(b)
            .ok_or_else(|| Error::InvalidInput("singular LP basis".into()))?;
        let cb = DVector::from_fn(t.rows, |r, _| costs(t.basis[r]));
        let y = bm
            .transpose()
            .lu()
            .solve(&cb)
            .ok_or_else(|| Error::InvalidInput("singular LP basis".into()))?;
        // Bland: first nonbasic column with negative reduced cost
        let mut entering = None;
        for j in 0..t.cols {
            if t.basis.contains(&j) || !allow_enter(j) {
                continue;
            }
            let red = costs(j) - y.dot(&t.a.column(j));
            if red < -tol {
                entering = Some(j);
                break;
            }
        }
        let Some(enter) = entering else {
            return Ok((xb, y));
        };
        let d = lu
            .solve(&t.column(enter))
            .ok_or_else(|| Error::InvalidInput("singular LP basis".into()))?;
        // ratio test; Bland tie-break on the smallest basis variable index
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..t.rows {
            if d[r] > tol {
                let ratio = xb[r].max(0.0) / d[r];
                match leave {
                    None => leave = Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - 1e-12
                            || ((ratio - lratio).abs() <= 1e-12
                                && t.basis[r] < t.basis[lr])
                        {
                            leave = Some((r, ratio));
                        }
                    }
                }
            }
        }
        let Some((leave_row, _)) = leave else {
            return Err(Error::InvalidInput("unbounded LP".into()));
        };
        t.basis[leave_row] = enter;
    }
    Err(Error::NoConvergence { iterations: max_iters, residual: f64::NAN })
}

/// Solves `min c'x, Ax = b, x >= 0`. Redundant rows are tolerated (artificial
/// variables stuck at zero remain in the basis).
pub fn solve_lp(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> Result<LpSolution> {
    let rows = a.nrows();
    let cols = a.ncols();
    if b.len() != rows || c.len() != cols {
        return Err(Error::InvalidInput("LP dimension mismatch".into()));
    }
    // sign-normalize so artificials start feasible
    let mut a = a.clone();
    let mut b = b.clone();
    for r in 0..rows {
        if b[r] < 0.0 {
            b[r] = -b[r];
            for j in 0..cols {
                a[(r, j)] = -a[(r, j)];
            }
        }
    }
    let scale = 1.0 + c.amax();
    let tol = 1e-10 * scale;

    let mut t = Tableau { a: &a, rows, cols, basis: (cols..cols + rows).collect() };
    // phase 1: minimize the artificial mass
    let phase1_cost = |v: usize| if v >= cols { 1.0 } else { 0.0 };
    let (xb, _) = run_phase(&mut t, phase1_cost, &b, |_| true, 1e-10)?;
    let art_mass: f64 = t
        .basis
        .iter()
        .zip(xb.iter())
        .filter(|(v, _)| **v >= cols)
        .map(|(_, x)| x.max(0.0))
        .sum();
    if art_mass > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "infeasible LP (artificial mass {art_mass:.3e})"
        )));
    }
    // phase 2: real objective; artificials may stay basic at zero but must
    // not re-enter
    let phase2_cost = |v: usize| if v >= cols { 0.0 } else { c[v] };
    let (xb, y) = run_phase(&mut t, phase2_cost, &b, |v| v < cols, tol)?;

    let mut x = vec![0.0; cols];
    for (r, &v) in t.basis.iter().enumerate() {
        if v < cols {
            x[v] = xb[r].max(0.0);
        }
    }
    let objective: f64 = x.iter().zip(c.iter()).map(|(x, c)| x * c).sum();
    let mut dual_infeasibility = 0.0_f64;
    for j in 0..cols {
        dual_infeasibility = dual_infeasibility.max(y.dot(&a.column(j)) - c[j]);
    }
    Ok(LpSolution { x, duals: y.iter().cloned().collect(), objective, dual_infeasibility })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_transportation_instance() {
        // 2x2 transportation: marginals (.5,.5)/(.5,.5), costs favor diagonal
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 1.0, 0.0, 0.0, // row sums
                0.0, 0.0, 1.0, 1.0, //
                1.0, 0.0, 1.0, 0.0, // col sums
                0.0, 1.0, 0.0, 1.0,
            ],
        );
        let b = DVector::from_row_slice(&[0.5, 0.5, 0.5, 0.5]);
        let c = DVector::from_row_slice(&[0.0, 1.0, 1.0, 0.0]);
        let sol = solve_lp(&a, &b, &c).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-10);
        assert!((sol.x[3] - 0.5).abs() < 1e-10);
        assert!(sol.objective.abs() < 1e-10);
        assert!(sol.dual_infeasibility <= 1e-9);
        // strong duality
        let dual_obj: f64 = sol.duals.iter().zip(b.iter()).map(|(y, b)| y * b).sum();
        assert!((dual_obj - sol.objective).abs() < 1e-9);
    }

    #[test]
    fn degenerate_redundant_rows() {
        // duplicated constraint row
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let b = DVector::from_row_slice(&[1.0, 1.0, 0.0]);
        let c = DVector::from_row_slice(&[1.0, 2.0]);
        let sol = solve_lp(&a, &b, &c).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-9);
        assert!((sol.x[1] - 0.5).abs() < 1e-9);
    }
}
