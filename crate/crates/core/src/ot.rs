//! Exact Wasserstein-1 distance between finite discrete distributions.
//!
//! The solver is a primal transportation simplex (a network simplex
//! specialised to the complete bipartite graph). It starts from a
//! north-west-corner basis, prices with row/column potentials and pivots
//! along the unique cycle that the entering cell closes in the basis tree.
//! The final potentials are returned with the plan and double as an
//! optimality certificate.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Result, WfcError};

/// Largest support accepted by [`wasserstein1_exact`] on either side.
pub const MAX_SUPPORT: usize = 256;

/// Total masses within this distance of 1 are renormalized; anything further is rejected.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Tolerance of the dual-feasibility certificate.
pub const CERTIFICATE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    masses: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() {
            return Err(WfcError::dist("empty support"));
        }
        if let Some(bad) = masses.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(WfcError::dist(format!("mass {bad} is negative or non-finite")));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(WfcError::dist(format!("masses sum to {total}, not 1")));
        }
        let masses = if total == 1.0 {
            masses
        } else {
            masses.into_iter().map(|m| m / total).collect()
        };
        Ok(DiscreteDistribution { masses })
    }

    /// Normalize arbitrary nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(WfcError::dist(format!("weights sum to {total}")));
        }
        DiscreteDistribution::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        DiscreteDistribution::from_weights(&vec![1.0; k])
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn support_size(&self) -> usize {
        self.masses.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(WfcError::dist(format!("cost entry {bad} is negative or non-finite")));
        }
        Ok(CostMatrix { entries })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn dim(&self) -> (usize, usize) {
        self.entries.dim()
    }

    /// Smallest and largest off-diagonal entries (diagonal excluded for square costs).
    pub fn off_diagonal_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for ((i, j), &c) in self.entries.indexed_iter() {
            if i != j {
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
        (lo, hi)
    }
}

/// An optimal coupling together with the dual potentials certifying it.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub objective: f64,
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
}

impl TransportPlan {
    /// Largest violation of `u_i + v_j <= M_ij` together with the largest
    /// violation of `u_i + v_j = M_ij` on cells carrying mass.
    pub fn certificate_gap(&self, cost: &CostMatrix) -> (f64, f64) {
        let mut infeasible = 0.0_f64;
        let mut slack = 0.0_f64;
        for ((i, j), &c) in cost.entries().indexed_iter() {
            let reduced = c - self.row_potentials[i] - self.col_potentials[j];
            infeasible = infeasible.max(-reduced);
            if self.plan[[i, j]] > 0.0 {
                slack = slack.max(reduced.abs());
            }
        }
        (infeasible, slack)
    }

    /// Largest absolute deviation of the plan's row/column sums from `p`/`q`.
    pub fn marginal_error(&self, p: &DiscreteDistribution, q: &DiscreteDistribution) -> f64 {
        let rows = self
            .plan
            .rows()
            .into_iter()
            .zip(p.masses())
            .map(|(r, m)| (r.sum() - m).abs());
        let cols = self
            .plan
            .columns()
            .into_iter()
            .zip(q.masses())
            .map(|(c, m)| (c.sum() - m).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Exact W1 between `p` and `q` under `cost`.
pub fn wasserstein1_exact(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    cost: &CostMatrix,
) -> Result<(f64, TransportPlan)> {
    let (m, n) = (p.support_size(), q.support_size());
    if cost.dim() != (m, n) {
        return Err(WfcError::dist(format!(
            "cost is {:?} but supports are ({m}, {n})",
            cost.dim()
        )));
    }
    if m > MAX_SUPPORT || n > MAX_SUPPORT {
        return Err(WfcError::config(format!(
            "supports ({m}, {n}) exceed the {MAX_SUPPORT}-point limit"
        )));
    }
    let plan = TransportSimplex::new(p.masses(), q.masses(), cost.entries()).solve()?;
    if cfg!(debug_assertions) {
        let (infeasible, slack) = plan.certificate_gap(cost);
        debug_assert!(
            infeasible <= CERTIFICATE_TOLERANCE && slack <= CERTIFICATE_TOLERANCE,
            "dual certificate failed: infeasibility {infeasible}, slack {slack}"
        );
    }
    Ok((plan.objective, plan))
}

/// `0.5 * sum_i |p_i - q_i|`.
pub fn total_variation(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.support_size() != q.support_size() {
        return Err(WfcError::dist(format!(
            "support sizes differ: {} vs {}",
            p.support_size(),
            q.support_size()
        )));
    }
    Ok(0.5 * p.masses().iter().zip(q.masses()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn check_pnorm(pnorm: f64) -> Result<()> {
    if !(pnorm >= 1.0 && pnorm.is_finite()) {
        return Err(WfcError::config(format!("ground norm p must be finite and >= 1, got {pnorm}")));
    }
    Ok(())
}

/// Distance between two distinct one-hot vectors under the p-norm: `2^(1/p)`.
pub fn onehot_distance(pnorm: f64) -> f64 {
    2f64.powf(1.0 / pnorm)
}

/// Closed form of W1 under the one-hot ground metric: `2^(1/p) * TV(p, q)`.
pub fn w1_onehot_closed_form(p: &DiscreteDistribution, q: &DiscreteDistribution, pnorm: f64) -> Result<f64> {
    check_pnorm(pnorm)?;
    Ok(onehot_distance(pnorm) * total_variation(p, q)?)
}

/// `k x k` cost with zero diagonal and `2^(1/p)` elsewhere.
pub fn onehot_cost(k: usize, pnorm: f64) -> Result<CostMatrix> {
    if k < 2 {
        return Err(WfcError::config(format!("one-hot cost needs k >= 2, got {k}")));
    }
    check_pnorm(pnorm)?;
    let off = onehot_distance(pnorm);
    CostMatrix::new(Array2::from_shape_fn((k, k), |(i, j)| if i == j { 0.0 } else { off }))
}

/// Ground metric on pairs `(u, w)` of one-hot coded variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PairMetric {
    /// p-norm of the concatenated one-hot codes: 0, `2^(1/p)` if one
    /// coordinate differs, `4^(1/p)` if both do.
    #[default]
    Concatenated,
    /// One-hot over the product space itself: 0 or `2^(1/p)`.
    Flat,
}

/// Cost on the flattened `ku x kw` pair space. Pairs are ordered with `u`
/// varying fastest, i.e. index `w * ku + u`.
pub fn pair_cost(ku: usize, kw: usize, pnorm: f64, metric: PairMetric) -> Result<CostMatrix> {
    check_pnorm(pnorm)?;
    if ku == 0 || kw == 0 {
        return Err(WfcError::config("pair space needs nonempty factors"));
    }
    let one = onehot_distance(pnorm);
    let two = 4f64.powf(1.0 / pnorm);
    let k = ku * kw;
    CostMatrix::new(Array2::from_shape_fn((k, k), |(a, b)| {
        let (ua, wa) = (a % ku, a / ku);
        let (ub, wb) = (b % ku, b / ku);
        match ((ua != ub) as u8 + (wa != wb) as u8, metric) {
            (0, _) => 0.0,
            (1, _) | (2, PairMetric::Flat) => one,
            _ => two,
        }
    }))
}

/// p-norm distance between two real vectors.
pub fn pnorm_distance(a: &[f64], b: &[f64], pnorm: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs().powf(pnorm))
        .sum::<f64>()
        .powf(1.0 / pnorm)
}

struct TransportSimplex<'a> {
    supply: &'a [f64],
    demand: &'a [f64],
    cost: &'a Array2<f64>,
    flow: Array2<f64>,
    basic: Array2<bool>,
    basis: Vec<(usize, usize)>,
}

const DEGENERATE_STREAK_FOR_BLAND: usize = 50;

impl<'a> TransportSimplex<'a> {
    fn new(supply: &'a [f64], demand: &'a [f64], cost: &'a Array2<f64>) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let mut flow = Array2::zeros((m, n));
        let mut basic = Array2::from_elem((m, n), false);
        let mut basis = Vec::with_capacity(m + n - 1);
        let mut rem_s = supply.to_vec();
        let mut rem_d = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = if i == m - 1 && j == n - 1 {
                // last cell absorbs the rounding residue of both marginals
                rem_s[i].max(rem_d[j]).max(0.0)
            } else {
                rem_s[i].min(rem_d[j]).max(0.0)
            };
            flow[[i, j]] = x;
            basic[[i, j]] = true;
            basis.push((i, j));
            rem_s[i] -= x;
            rem_d[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || rem_s[i] <= rem_d[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        TransportSimplex {
            supply,
            demand,
            cost,
            flow,
            basic,
            basis,
        }
    }

    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.supply.len(), self.demand.len());
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m + n];
        for &(i, j) in &self.basis {
            adj[i].push(m + j);
            adj[m + j].push(i);
        }
        let mut pot = vec![f64::NAN; m + n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &next in &adj[node] {
                if pot[next].is_nan() {
                    let c = if node < m {
                        self.cost[[node, next - m]]
                    } else {
                        self.cost[[next, node - m]]
                    };
                    pot[next] = c - pot[node];
                    queue.push_back(next);
                }
            }
        }
        let v = pot.split_off(m);
        (pot, v)
    }

    /// Tree path from column node `j` to row node `i`, as basis cells in order
    /// starting from row `i`.
    fn cycle_path(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        let (m, n) = (self.supply.len(), self.demand.len());
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m + n];
        for &(r, c) in &self.basis {
            adj[r].push(m + c);
            adj[m + c].push(r);
        }
        let start = m + j;
        let mut parent = vec![usize::MAX; m + n];
        parent[start] = start;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == i {
                break;
            }
            for &next in &adj[node] {
                if parent[next] == usize::MAX {
                    parent[next] = node;
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = i;
        while node != start {
            let prev = parent[node];
            let cell = if node < m { (node, prev - m) } else { (prev, node - m) };
            path.push(cell);
            node = prev;
        }
        path
    }

    fn solve(mut self) -> Result<TransportPlan> {
        let (m, n) = (self.supply.len(), self.demand.len());
        let scale = self.cost.iter().fold(1.0_f64, |a, &c| a.max(c));
        let tol = 1e-12 * scale;
        let max_iter = 200 * (m + n) * (m + n) + 1000;
        let mut degenerate_streak = 0usize;
        for _ in 0..max_iter {
            let (u, v) = self.potentials();
            let bland = degenerate_streak >= DEGENERATE_STREAK_FOR_BLAND;
            let mut entering: Option<(usize, usize)> = None;
            let mut best = -tol;
            'scan: for i in 0..m {
                for j in 0..n {
                    if self.basic[[i, j]] {
                        continue;
                    }
                    let r = self.cost[[i, j]] - u[i] - v[j];
                    if r < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = r;
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                let objective = self
                    .flow
                    .iter()
                    .zip(self.cost.iter())
                    .map(|(f, c)| f * c)
                    .sum();
                return Ok(TransportPlan {
                    plan: self.flow,
                    objective,
                    row_potentials: u,
                    col_potentials: v,
                });
            };

            let path = self.cycle_path(ei, ej);
            // Cells at even positions lose flow, odd positions gain it.
            let mut theta = f64::INFINITY;
            let mut leave_pos = 0;
            for (k, &(r, c)) in path.iter().enumerate().step_by(2) {
                let f = self.flow[[r, c]];
                let better = f < theta || (bland && f == theta && (r, c) < path[leave_pos]);
                if better {
                    theta = f;
                    leave_pos = k;
                }
            }
            if theta > 0.0 {
                degenerate_streak = 0;
            } else {
                degenerate_streak += 1;
            }
            for (k, &(r, c)) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[[r, c]] -= theta;
                } else {
                    self.flow[[r, c]] += theta;
                }
            }
            let leaving = path[leave_pos];
            self.flow[leaving] = 0.0;
            self.flow[[ei, ej]] = theta;
            self.basic[leaving] = false;
            self.basic[[ei, ej]] = true;
            let slot = self.basis.iter().position(|&c| c == leaving).expect("leaving cell is basic");
            self.basis[slot] = (ei, ej);
        }
        Err(WfcError::Numeric(format!(
            "transport simplex did not converge within {max_iter} pivots"
        )))
    }
}
