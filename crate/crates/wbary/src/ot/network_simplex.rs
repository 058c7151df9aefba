//! Network simplex for the dense transportation problem
//! `min sum c_ij x_ij  s.t.  sum_j x_ij = a_i, sum_i x_ij = b_j, x >= 0`.
//!
//! The basis is a spanning tree over sources, targets, and an artificial root
//! (big-M arcs), stored as parent pointers with per-node flows on the parent
//! arcs. Entering arcs are found by a deterministic block search; the leaving
//! arc uses the asymmetric tie-break that keeps the tree strongly feasible,
//! which rules out cycling under degeneracy. Re-solving after a cost change
//! reuses the current tree, which makes repeated solves over slowly moving
//! supports cheap.

use crate::error::{Error, Result};

const NO_NODE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct NetworkSimplex {
    m: usize,
    k: usize,
    costs: Vec<f64>, // row-major m*k
    a: Vec<f64>,
    b: Vec<f64>,
    big_m: f64,

    // spanning tree over nodes 0..m (sources), m..m+k (targets), m+k (root)
    parent: Vec<usize>,
    // arc to parent: real arc id i*k + j, or artificial id m*k + node
    pred_arc: Vec<usize>,
    // +1 when the parent arc is directed node -> parent
    pred_dir: Vec<i8>,
    depth: Vec<usize>,
    tree_flow: Vec<f64>, // flow on the parent arc of each node
    potential: Vec<f64>,

    next_arc: usize,
    pivots: usize,
}

impl NetworkSimplex {
    /// Sets up the all-artificial starting basis. Supplies and demands must
    /// be positive and have equal totals (within 1e-9); demands are rescaled
    /// to match exactly.
    pub fn new(a: Vec<f64>, mut b: Vec<f64>) -> Result<Self> {
        let m = a.len();
        let k = b.len();
        if m == 0 || k == 0 {
            return Err(Error::InvalidInput("empty marginal".into()));
        }
        if a.iter().chain(b.iter()).any(|x| !(*x > 0.0)) {
            return Err(Error::InvalidInput("marginal masses must be positive".into()));
        }
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        if (sa - sb).abs() > 1e-9 * sa.max(sb) {
            return Err(Error::InvalidInput(format!(
                "unbalanced marginals: {sa} vs {sb}"
            )));
        }
        for x in &mut b {
            *x *= sa / sb;
        }
        let nodes = m + k + 1;
        let root = m + k;
        let mut s = NetworkSimplex {
            m,
            k,
            costs: vec![0.0; m * k],
            a,
            b,
            big_m: 1.0,
            parent: vec![root; nodes],
            pred_arc: vec![0; nodes],
            pred_dir: vec![0; nodes],
            depth: vec![1; nodes],
            tree_flow: vec![0.0; nodes],
            potential: vec![0.0; nodes],
            next_arc: 0,
            pivots: 0,
        };
        s.parent[root] = NO_NODE;
        s.depth[root] = 0;
        for i in 0..m {
            s.pred_arc[i] = m * k + i;
            s.pred_dir[i] = 1; // source -> root
            s.tree_flow[i] = s.a[i];
        }
        for j in 0..k {
            let node = m + j;
            s.pred_arc[node] = m * k + node;
            s.pred_dir[node] = -1; // root -> target
            s.tree_flow[node] = s.b[j];
        }
        Ok(s)
    }

    /// Replaces the cost matrix (row-major, `m*k`), keeping the current
    /// basis as the warm start.
    pub fn set_costs(&mut self, costs: Vec<f64>) -> Result<()> {
        if costs.len() != self.m * self.k {
            return Err(Error::InvalidInput("cost matrix size mismatch".into()));
        }
        let maxc = costs.iter().cloned().fold(0.0, |acc: f64, c| acc.max(c.abs()));
        self.big_m = 1.0 + (self.m + self.k) as f64 * maxc.max(1.0);
        self.costs = costs;
        Ok(())
    }

    fn arc_cost(&self, arc: usize) -> f64 {
        if arc < self.m * self.k {
            self.costs[arc]
        } else {
            self.big_m
        }
    }

    fn recompute_potentials(&mut self) {
        let nodes = self.m + self.k + 1;
        let root = self.m + self.k;
        // children lists
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for v in 0..nodes {
            if v != root {
                children[self.parent[v]].push(v);
            }
        }
        self.potential[root] = 0.0;
        let mut stack = vec![root];
        while let Some(u) = stack.pop() {
            for &v in &children[u] {
                let c = self.arc_cost(self.pred_arc[v]);
                // reduced cost c - pi[tail] + pi[head] = 0 on tree arcs
                self.potential[v] = if self.pred_dir[v] == 1 {
                    c + self.potential[u] // arc v -> u
                } else {
                    self.potential[u] - c // arc u -> v
                };
                stack.push(v);
            }
        }
    }

    fn reduced(&self, i: usize, j: usize) -> f64 {
        // arc i -> (m + j)
        self.costs[i * self.k + j] - self.potential[i] + self.potential[self.m + j]
    }

    /// Pivots to optimality. Returns the number of pivots performed.
    pub fn solve(&mut self) -> Result<usize> {
        let arcs = self.m * self.k;
        let block = (arcs as f64).sqrt().ceil() as usize;
        let block = block.max(10).min(arcs);
        let maxc = self.costs.iter().cloned().fold(0.0, |acc: f64, c| acc.max(c.abs()));
        let tol = 1e-12 * (1.0 + maxc);
        let max_pivots = 1000 * (self.m + self.k) + 100_000;
        let start_pivots = self.pivots;
        self.recompute_potentials();
        loop {
            // deterministic block search for the entering arc
            let mut entering: Option<(usize, f64)> = None;
            let mut scanned = 0;
            while scanned < arcs {
                let end = (self.next_arc + block).min(self.next_arc + (arcs - scanned));
                let mut best: Option<(usize, f64)> = None;
                for raw in self.next_arc..end {
                    let arc = raw % arcs;
                    let r = self.reduced(arc / self.k, arc % self.k);
                    if r < -tol {
                        match best {
                            Some((_, br)) if br <= r => {}
                            _ => best = Some((arc, r)),
                        }
                    }
                }
                scanned += end - self.next_arc;
                self.next_arc = end % arcs;
                if best.is_some() {
                    entering = best;
                    break;
                }
            }
            let Some((arc, _)) = entering else {
                break; // optimal
            };
            self.pivot(arc)?;
            if self.pivots - start_pivots > max_pivots {
                return Err(Error::NoConvergence {
                    iterations: self.pivots - start_pivots,
                    residual: f64::NAN,
                });
            }
        }
        // artificial arcs must be empty at optimality (the problem is
        // always feasible)
        let root = self.m + self.k;
        for v in 0..root {
            if self.pred_arc[v] >= arcs && self.tree_flow[v] > 1e-9 {
                return Err(Error::NoConvergence {
                    iterations: self.pivots,
                    residual: self.tree_flow[v],
                });
            }
        }
        Ok(self.pivots - start_pivots)
    }

    fn pivot(&mut self, arc: usize) -> Result<()> {
        let s = arc / self.k;
        let t = self.m + arc % self.k;
        // find the join of s and t
        let (mut x, mut y) = (s, t);
        while self.depth[x] > self.depth[y] {
            x = self.parent[x];
        }
        while self.depth[y] > self.depth[x] {
            y = self.parent[y];
        }
        while x != y {
            x = self.parent[x];
            y = self.parent[y];
        }
        let join = x;

        // delta = min flow over arcs whose flow decreases when pushing along
        // the cycle join -> s -> t -> join. Tail path uses strict improvement
        // and head path non-strict, which keeps the tree strongly feasible.
        let mut delta = f64::INFINITY;
        let mut leaving: Option<(usize, bool)> = None; // (node, on_tail_path)
        let mut v = s;
        while v != join {
            // cycle traverses tail-path arcs from parent to child
            if self.pred_dir[v] == 1 {
                // arc v -> parent opposes the cycle: flow decreases
                if self.tree_flow[v] < delta {
                    delta = self.tree_flow[v];
                    leaving = Some((v, true));
                }
            }
            v = self.parent[v];
        }
        let mut v = t;
        while v != join {
            // cycle traverses head-path arcs from child to parent
            if self.pred_dir[v] == -1 {
                if self.tree_flow[v] <= delta {
                    delta = self.tree_flow[v];
                    leaving = Some((v, false));
                }
            }
            v = self.parent[v];
        }
        let Some((leave_node, in_tail)) = leaving else {
            return Err(Error::NoConvergence { iterations: self.pivots, residual: f64::NAN });
        };

        // apply the flow change around the cycle
        let mut v = s;
        while v != join {
            if self.pred_dir[v] == 1 {
                self.tree_flow[v] -= delta;
            } else {
                self.tree_flow[v] += delta;
            }
            v = self.parent[v];
        }
        let mut v = t;
        while v != join {
            if self.pred_dir[v] == -1 {
                self.tree_flow[v] -= delta;
            } else {
                self.tree_flow[v] += delta;
            }
            v = self.parent[v];
        }

        // re-hang the subtree cut off by the leaving arc: reverse the parent
        // chain from the entering endpoint inside that subtree up to the
        // leaving arc, then hang it from the other entering endpoint
        let sub_root = if in_tail { s } else { t };
        let other = if in_tail { t } else { s };
        let mut path = Vec::new();
        {
            let mut v = sub_root;
            loop {
                path.push((v, self.pred_arc[v], self.pred_dir[v], self.tree_flow[v]));
                if v == leave_node {
                    break;
                }
                v = self.parent[v];
            }
        }
        self.parent[sub_root] = other;
        self.pred_arc[sub_root] = arc;
        self.pred_dir[sub_root] = if in_tail { 1 } else { -1 };
        self.tree_flow[sub_root] = delta;
        for w in path.windows(2) {
            let (child, arc_c, dir_c, flow_c) = w[0];
            let (par, ..) = w[1];
            self.parent[par] = child;
            self.pred_arc[par] = arc_c;
            self.pred_dir[par] = -dir_c;
            self.tree_flow[par] = flow_c;
        }

        // depths and potentials of the re-hung subtree are stale; rebuild
        // them globally (O(nodes))
        self.rebuild_depths();
        self.recompute_potentials();
        self.pivots += 1;
        Ok(())
    }

    fn rebuild_depths(&mut self) {
        let nodes = self.m + self.k + 1;
        let root = self.m + self.k;
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for v in 0..nodes {
            if v != root {
                children[self.parent[v]].push(v);
            }
        }
        self.depth[root] = 0;
        let mut stack = vec![root];
        let mut seen = 1usize;
        while let Some(u) = stack.pop() {
            for &v in &children[u] {
                self.depth[v] = self.depth[u] + 1;
                seen += 1;
                stack.push(v);
            }
        }
        debug_assert_eq!(seen, nodes, "basis lost tree structure");
    }

    /// Dense optimal coupling (row-major `m x k`).
    pub fn coupling(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.m * self.k];
        let root = self.m + self.k;
        for v in 0..root {
            let arc = self.pred_arc[v];
            if arc < self.m * self.k {
                x[arc] = self.tree_flow[v].max(0.0);
            }
        }
        x
    }

    pub fn objective(&self) -> f64 {
        self.coupling().iter().zip(&self.costs).map(|(x, c)| x * c).sum()
    }

    /// Kantorovich duals `(u, v)` with `u[0] = 0`, satisfying
    /// `u_i + v_j <= c_ij` (up to the pivot tolerance) and complementary
    /// slackness on the support.
    pub fn duals(&self) -> (Vec<f64>, Vec<f64>) {
        let gauge = self.potential[0];
        let u: Vec<f64> = (0..self.m).map(|i| self.potential[i] - gauge).collect();
        let v: Vec<f64> =
            (0..self.k).map(|j| gauge - self.potential[self.m + j]).collect();
        (u, v)
    }

    pub fn pivot_count(&self) -> usize {
        self.pivots
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_diagonal() {
        let mut s = NetworkSimplex::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        s.set_costs(vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        s.solve().unwrap();
        let x = s.coupling();
        assert!((x[0] - 0.5).abs() < 1e-12);
        assert!((x[3] - 0.5).abs() < 1e-12);
        assert!(s.objective().abs() < 1e-12);
    }

    #[test]
    fn duals_certify_optimality() {
        let a = vec![0.2, 0.3, 0.5];
        let b = vec![0.4, 0.1, 0.25, 0.25];
        let costs: Vec<f64> =
            (0..12).map(|i| ((i * 7919 + 13) % 101) as f64 / 17.0).collect();
        let mut s = NetworkSimplex::new(a.clone(), b.clone()).unwrap();
        s.set_costs(costs.clone()).unwrap();
        s.solve().unwrap();
        let x = s.coupling();
        let (u, v) = s.duals();
        // feasibility and complementary slackness
        for i in 0..3 {
            for j in 0..4 {
                assert!(u[i] + v[j] <= costs[i * 4 + j] + 1e-9);
                if x[i * 4 + j] > 1e-12 {
                    assert!((u[i] + v[j] - costs[i * 4 + j]).abs() < 1e-9);
                }
            }
        }
        let primal = s.objective();
        let dual: f64 = u.iter().zip(&a).map(|(u, a)| u * a).sum::<f64>()
            + v.iter().zip(&b).map(|(v, b)| v * b).sum::<f64>();
        assert!((primal - dual).abs() <= 1e-9 * (1.0 + primal.abs()));
        // marginals
        for i in 0..3 {
            let row: f64 = (0..4).map(|j| x[i * 4 + j]).sum();
            assert!((row - a[i]).abs() < 1e-10);
        }
        for j in 0..4 {
            let col: f64 = (0..3).map(|i| x[i * 4 + j]).sum();
            assert!((col - b[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn warm_start_after_cost_change() {
        let a = vec![0.25; 4];
        let b = vec![0.25; 4];
        let mut s = NetworkSimplex::new(a, b).unwrap();
        let costs: Vec<f64> = (0..16).map(|i| ((i * 31 + 7) % 23) as f64).collect();
        s.set_costs(costs).unwrap();
        s.solve().unwrap();
        let first_obj = s.objective();
        // perturb costs slightly; warm solve should need few pivots
        let costs2: Vec<f64> =
            (0..16).map(|i| ((i * 31 + 7) % 23) as f64 + 0.001 * (i as f64)).collect();
        s.set_costs(costs2.clone()).unwrap();
        let pivots = s.solve().unwrap();
        assert!(pivots <= 8, "warm start took {pivots} pivots");
        // re-solve cold to compare
        let mut cold = NetworkSimplex::new(vec![0.25; 4], vec![0.25; 4]).unwrap();
        cold.set_costs(costs2).unwrap();
        cold.solve().unwrap();
        assert!((s.objective() - cold.objective()).abs() < 1e-12);
        assert!(first_obj <= s.objective() + 1.0);
    }
}
