//! Discrete optimal transport between two weighted point sets.
//!
//! [`emd_exact`] runs successive shortest augmenting paths on the bipartite
//! transportation graph, with Dijkstra on reduced costs. Every augmentation
//! moves the largest admissible mass along the path, so each one empties a
//! supply, fills a demand or cancels an edge's flow, and flows stay sums of
//! the input masses. [`certify`] checks a plan independently: Bellman-Ford
//! on the residual graph yields dual potentials, and the plan is optimal
//! when they are dual feasible and tight on its support.
//!
//! [`emd_sinkhorn`] solves the entropic problem in the log domain with
//! ε-scaling and rounds the result onto the feasible set.

use crate::error::{MetricError, Result};

/// Tolerance on marginal sums.
pub const MARGINAL_TOL: f64 = 1e-9;

/// Column-marginal L1 residual at which Sinkhorn stops.
pub const SINKHORN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    /// `cost[i][j]`, m × k.
    pub cost: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub flow: Vec<Vec<f64>>,
    pub cost: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl TransportProblem {
    pub fn new(fx: Vec<f64>, fy: Vec<f64>, cost: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { fx, fy, cost };
        p.validate()?;
        Ok(p)
    }

    /// Costs are pairwise Euclidean distances between `xs` and `ys`.
    pub fn euclidean(fx: Vec<f64>, fy: Vec<f64>, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Self> {
        let cost = xs.iter().map(|x| ys.iter().map(|y| euclidean(x, y)).collect()).collect();
        Self::new(fx, fy, cost)
    }

    pub fn rows(&self) -> usize {
        self.fx.len()
    }

    pub fn cols(&self) -> usize {
        self.fy.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, k) = (self.rows(), self.cols());
        if m == 0 || k == 0 {
            return Err(MetricError::Input("transport needs nonempty marginals".into()));
        }
        if self.cost.len() != m || self.cost.iter().any(|r| r.len() != k) {
            return Err(MetricError::Input(format!("cost matrix must be {m}×{k}")));
        }
        if self.cost.iter().flatten().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(MetricError::Input("costs must be finite and ≥ 0".into()));
        }
        for (name, f) in [("source", &self.fx), ("target", &self.fy)] {
            if f.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(MetricError::Feasibility(format!("{name} marginal has a negative or non-finite mass")));
            }
            let s: f64 = f.iter().sum();
            if (s - 1.0).abs() > MARGINAL_TOL {
                return Err(MetricError::Feasibility(format!("{name} marginal sums to {s}, not 1")));
            }
        }
        let (sx, sy) = (self.fx.iter().sum::<f64>(), self.fy.iter().sum::<f64>());
        if (sx - sy).abs() > MARGINAL_TOL {
            return Err(MetricError::Feasibility(format!("marginal sums differ: {sx} vs {sy}")));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let cost = (0..self.cols())
            .map(|j| (0..self.rows()).map(|i| self.cost[i][j]).collect())
            .collect();
        Self {
            fx: self.fy.clone(),
            fy: self.fx.clone(),
            cost,
        }
    }

    pub fn plan_cost(&self, flow: &[Vec<f64>]) -> f64 {
        flow.iter()
            .zip(&self.cost)
            .map(|(f, c)| f.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

impl TransportPlan {
    /// Largest absolute deviation of a row or column sum from its marginal.
    pub fn marginal_residual(&self, prob: &TransportProblem) -> f64 {
        let rows = self
            .flow
            .iter()
            .zip(&prob.fx)
            .map(|(r, &a)| (r.iter().sum::<f64>() - a).abs());
        let cols = prob
            .fy
            .iter()
            .enumerate()
            .map(|(j, &b)| (self.flow.iter().map(|r| r[j]).sum::<f64>() - b).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Exact minimum-cost plan.
pub fn emd_exact(prob: &TransportProblem) -> Result<TransportPlan> {
    prob.validate()?;
    let (m, k) = (prob.rows(), prob.cols());
    let n = m + k;
    let c = &prob.cost;
    let mut supply = prob.fx.clone();
    let mut demand = prob.fy.clone();
    let mut flow = vec![vec![0.0; k]; m];
    // Node potentials: sources 0..m, sinks m..m+k.
    let mut pot = vec![0.0; n];
    let cap = 64 * n * n + 64;
    let mut rounds = 0;
    while supply.iter().any(|&s| s > 0.0) && demand.iter().any(|&d| d > 0.0) {
        rounds += 1;
        if rounds > cap {
            return Err(MetricError::Convergence {
                iters: rounds,
                residual: supply.iter().sum(),
            });
        }
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<usize>> = vec![None; n];
        let mut done = vec![false; n];
        for (i, &s) in supply.iter().enumerate() {
            if s > 0.0 {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = None;
            for v in 0..n {
                if !done[v] && dist[v].is_finite() && u.map_or(true, |w: usize| dist[v] < dist[w]) {
                    u = Some(v);
                }
            }
            let Some(u) = u else { break };
            done[u] = true;
            let mut relax = |v: usize, rc: f64, dist: &mut [f64]| {
                let nd = dist[u] + rc.max(0.0);
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = Some(u);
                }
            };
            if u < m {
                for j in 0..k {
                    relax(m + j, c[u][j] + pot[u] - pot[m + j], &mut dist);
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[i][j] > 0.0 {
                        relax(i, -c[i][j] + pot[u] - pot[i], &mut dist);
                    }
                }
            }
        }
        let t = (0..k)
            .filter(|&j| demand[j] > 0.0)
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]))
            .map(|j| m + j)
            .expect("some sink has demand");
        let dt = dist[t];
        for v in 0..n {
            pot[v] += dist[v].min(dt);
        }
        // Walk back to the source the path starts from.
        let mut path = Vec::new();
        let mut v = t;
        while let Some(u) = prev[v] {
            path.push((u, v));
            v = u;
        }
        let s = v;
        let mut delta = supply[s].min(demand[t - m]);
        for &(u, v) in &path {
            if u >= m {
                delta = delta.min(flow[v][u - m]);
            }
        }
        for &(u, v) in &path {
            if u < m {
                flow[u][v - m] += delta;
            } else {
                let f = &mut flow[v][u - m];
                *f = if *f == delta { 0.0 } else { *f - delta };
            }
        }
        supply[s] = if supply[s] == delta { 0.0 } else { supply[s] - delta };
        let d = &mut demand[t - m];
        *d = if *d == delta { 0.0 } else { *d - delta };
    }
    let cost = prob.plan_cost(&flow);
    Ok(TransportPlan { flow, cost })
}

/// Dual potentials for a plan, `u_i + v_j ≤ C_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Largest `u_i + v_j − C_ij` over all cells (dual infeasibility).
    pub max_violation: f64,
    /// Largest `|C_ij − u_i − v_j|` over cells carrying flow.
    pub max_support_slack: f64,
    pub primal: f64,
    /// `Σ f_x·u + Σ f_y·v`.
    pub dual: f64,
    /// False when Bellman-Ford kept improving, i.e. the residual graph has a
    /// negative cycle and the plan is not optimal.
    pub settled: bool,
}

impl DualCertificate {
    pub fn holds(&self, tol: f64) -> bool {
        self.settled
            && self.max_violation <= tol
            && self.max_support_slack <= tol
            && (self.primal - self.dual).abs() <= tol
    }
}

/// Bellman-Ford from a virtual root joined to every node at cost 0.
/// Residual edges: `i → j` at `C_ij` always, `j → i` at `−C_ij` where the
/// plan has flow.
pub fn certify(prob: &TransportProblem, plan: &TransportPlan) -> Result<DualCertificate> {
    prob.validate()?;
    let (m, k) = (prob.rows(), prob.cols());
    if plan.flow.len() != m || plan.flow.iter().any(|r| r.len() != k) {
        return Err(MetricError::Input(format!("plan must be {m}×{k}")));
    }
    let c = &prob.cost;
    let scale = 1.0 + c.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let tiny = 1e-13 * scale;
    let mut d = vec![0.0f64; m + k];
    let mut settled = false;
    for _ in 0..=(m + k) {
        let mut changed = false;
        for i in 0..m {
            for j in 0..k {
                if d[i] + c[i][j] < d[m + j] - tiny {
                    d[m + j] = d[i] + c[i][j];
                    changed = true;
                }
                if plan.flow[i][j] > 0.0 && d[m + j] - c[i][j] < d[i] - tiny {
                    d[i] = d[m + j] - c[i][j];
                    changed = true;
                }
            }
        }
        if !changed {
            settled = true;
            break;
        }
    }
    let u: Vec<f64> = d[..m].iter().map(|x| -x).collect();
    let v: Vec<f64> = d[m..].to_vec();
    let (mut max_violation, mut max_support_slack) = (0.0f64, 0.0f64);
    for i in 0..m {
        for j in 0..k {
            let gap = u[i] + v[j] - c[i][j];
            max_violation = max_violation.max(gap);
            if plan.flow[i][j] > 0.0 {
                max_support_slack = max_support_slack.max(gap.abs());
            }
        }
    }
    let dual = prob.fx.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        + prob.fy.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    Ok(DualCertificate {
        u,
        v,
        max_violation,
        max_support_slack,
        primal: prob.plan_cost(&plan.flow),
        dual,
        settled,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornPlan {
    pub plan: TransportPlan,
    pub iterations: usize,
    /// Marginal residual of the returned plan.
    pub residual: f64,
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + it.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Entropic plan at regularization `epsilon`.
///
/// ε is annealed from the largest cost down to `epsilon` by halving, warm
/// starting each stage. The final stage runs until the column residual is
/// at most [`SINKHORN_TOL`]; the plan is then rounded onto the feasible set.
pub fn emd_sinkhorn(prob: &TransportProblem, epsilon: f64, max_iters: usize) -> Result<SinkhornPlan> {
    prob.validate()?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(MetricError::Input(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (m, k) = (prob.rows(), prob.cols());
    let c = &prob.cost;
    let la: Vec<f64> = prob.fx.iter().map(|a| a.ln()).collect();
    let lb: Vec<f64> = prob.fy.iter().map(|b| b.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; k];
    let cmax = c.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let mut eps = cmax.max(epsilon);
    let mut iterations = 0;
    let col_residual = |f: &[f64], g: &[f64], eps: f64| -> f64 {
        (0..k)
            .map(|j| ((0..m).map(|i| ((f[i] + g[j] - c[i][j]) / eps).exp()).sum::<f64>() - prob.fy[j]).abs())
            .sum()
    };
    loop {
        let last = eps == epsilon;
        let tol = if last { SINKHORN_TOL } else { 1e-4 };
        loop {
            if iterations == max_iters {
                return Err(MetricError::Convergence {
                    iters: iterations,
                    residual: col_residual(&f, &g, eps),
                });
            }
            for j in 0..k {
                g[j] = eps * (lb[j] - log_sum_exp((0..m).map(|i| (f[i] - c[i][j]) / eps)));
            }
            for i in 0..m {
                f[i] = eps * (la[i] - log_sum_exp((0..k).map(|j| (g[j] - c[i][j]) / eps)));
            }
            iterations += 1;
            if col_residual(&f, &g, eps) <= tol {
                break;
            }
        }
        if last {
            break;
        }
        eps = (eps / 2.0).max(epsilon);
    }
    let mut flow: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..k).map(|j| ((f[i] + g[j] - c[i][j]) / eps).exp()).collect())
        .collect();
    round_to_feasible(&mut flow, &prob.fx, &prob.fy);
    let plan = TransportPlan {
        cost: prob.plan_cost(&flow),
        flow,
    };
    Ok(SinkhornPlan {
        residual: plan.marginal_residual(prob),
        plan,
        iterations,
    })
}

/// Scales rows and columns down to their marginals, then spreads the
/// missing mass as a rank-one correction.
fn round_to_feasible(flow: &mut [Vec<f64>], a: &[f64], b: &[f64]) {
    for (row, &ai) in flow.iter_mut().zip(a) {
        let s: f64 = row.iter().sum();
        if s > ai {
            let x = ai / s;
            row.iter_mut().for_each(|v| *v *= x);
        }
    }
    for (j, &bj) in b.iter().enumerate() {
        let s: f64 = flow.iter().map(|r| r[j]).sum();
        if s > bj {
            let y = bj / s;
            flow.iter_mut().for_each(|r| r[j] *= y);
        }
    }
    let er: Vec<f64> = flow.iter().zip(a).map(|(r, &ai)| ai - r.iter().sum::<f64>()).collect();
    let ec: Vec<f64> = b
        .iter()
        .enumerate()
        .map(|(j, &bj)| bj - flow.iter().map(|r| r[j]).sum::<f64>())
        .collect();
    let total: f64 = ec.iter().sum();
    if total > 0.0 {
        for (row, &ri) in flow.iter_mut().zip(&er) {
            for (v, &cj) in row.iter_mut().zip(&ec) {
                *v += ri * cj / total;
            }
        }
    }
}
