//! Entropic optimal transport between two discrete marginals.
//!
//! [`sinkhorn`] runs in the log domain so small regularisation survives;
//! [`SinkhornMethod::Scaling`] is the plain matrix-scaling fast path.
//! [`exact_ot_oracle`] solves the unregularised problem exactly on small
//! instances with the transportation simplex.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};

pub const DEFAULT_EPSILON_OT: f64 = 0.1;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 10_000;
/// Below this ε the scaling kernel is liable to underflow.
pub const SCALING_MIN_EPSILON: f64 = 0.05;
/// Largest `n·m` accepted by [`exact_ot_oracle`].
pub const ORACLE_MAX_CELLS: usize = 64;

const SIMPLEX_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportProblem {
    #[serde(with = "crate::camera_graph::matrix_serde")]
    pub cost: Array2<f64>,
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    pub epsilon_ot: f64,
    #[serde(default)]
    pub lambda_marginal: f64,
}

impl TransportProblem {
    /// Problem with the default ε and no marginal penalty.
    pub fn new(cost: Array2<f64>, p: Array1<f64>, q: Array1<f64>) -> Self {
        Self { cost, p, q, epsilon_ot: DEFAULT_EPSILON_OT, lambda_marginal: 0.0 }
    }

    /// Uniform marginals over the rows and columns of `cost`.
    pub fn uniform(cost: Array2<f64>) -> Self {
        let (n, m) = cost.dim();
        Self::new(cost, Array1::from_elem(n, 1.0 / n as f64), Array1::from_elem(m, 1.0 / m as f64))
    }

    pub fn with_epsilon(mut self, epsilon_ot: f64) -> Self {
        self.epsilon_ot = epsilon_ot;
        self
    }

    pub fn with_lambda(mut self, lambda_marginal: f64) -> Self {
        self.lambda_marginal = lambda_marginal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.cost.dim();
        if n == 0 || m == 0 {
            return Err(Error::InvalidMarginals("empty cost matrix".into()));
        }
        if self.p.len() != n || self.q.len() != m {
            return Err(Error::InvalidMarginals(format!(
                "cost is {n}x{m} but marginals have lengths {} and {}",
                self.p.len(),
                self.q.len()
            )));
        }
        check_simplex(self.p.view(), "p")?;
        check_simplex(self.q.view(), "q")?;
        if self.cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput("cost entries must be finite and nonnegative".into()));
        }
        if !(self.epsilon_ot > 0.0 && self.epsilon_ot.is_finite()) {
            return Err(invalid_param(format!("epsilon_ot must be positive, got {}", self.epsilon_ot)));
        }
        if !(self.lambda_marginal >= 0.0 && self.lambda_marginal.is_finite()) {
            return Err(invalid_param(format!("lambda_marginal must be nonnegative, got {}", self.lambda_marginal)));
        }
        Ok(())
    }

    /// `λ·KL(p‖q)`; zero without evaluating the divergence when λ = 0.
    fn marginal_penalty(&self) -> Result<f64> {
        if self.lambda_marginal == 0.0 {
            Ok(0.0)
        } else {
            Ok(self.lambda_marginal * marginal_kl(self.p.view(), self.q.view())?)
        }
    }
}

fn check_simplex(v: ArrayView1<f64>, name: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidMarginals(format!("{name} has a negative or non-finite entry")));
    }
    let s = v.sum();
    if (s - 1.0).abs() > SIMPLEX_SUM_TOL {
        return Err(Error::InvalidMarginals(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    #[serde(with = "crate::camera_graph::matrix_serde")]
    pub coupling: Array2<f64>,
    /// `⟨T,D⟩ + ε Σ T(log T − 1) + λ KL(p‖q)`.
    pub objective: f64,
    /// `⟨T,D⟩`.
    pub transport_cost: f64,
    /// `⟨T,D⟩ + ε Σ T(log T − 1)`, the regularised cost without the marginal term.
    pub entropic_cost: f64,
    pub iterations_used: usize,
    /// Larger of the two marginal L1 residuals.
    pub marginal_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinkhornMethod {
    #[default]
    Log,
    Scaling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub method: SinkhornMethod,
    /// Starting column potential `g` (log domain) or `ε log v` (scaling).
    /// Any finite start reaches the same optimum.
    pub initial_potential: Option<Array1<f64>>,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iters: DEFAULT_MAX_ITERS, method: SinkhornMethod::Log, initial_potential: None }
    }
}

/// Log-domain Sinkhorn to marginal tolerance `tol`.
pub fn sinkhorn(problem: &TransportProblem, tol: f64, max_iters: usize) -> Result<TransportPlan> {
    sinkhorn_with(problem, &SinkhornOptions { tol, max_iters, ..SinkhornOptions::default() })
}

pub fn sinkhorn_with(problem: &TransportProblem, opts: &SinkhornOptions) -> Result<TransportPlan> {
    problem.validate()?;
    if !(opts.tol > 0.0) {
        return Err(invalid_param(format!("tol must be positive, got {}", opts.tol)));
    }
    if opts.max_iters == 0 {
        return Err(invalid_param("max_iters must be at least 1"));
    }
    let m = problem.q.len();
    let g0 = match &opts.initial_potential {
        Some(g) if g.len() != m => return Err(invalid_param("initial potential has the wrong length")),
        Some(g) if g.iter().any(|x| !x.is_finite()) => return Err(invalid_param("initial potential must be finite")),
        Some(g) => g.clone(),
        None => Array1::zeros(m),
    };
    let (coupling, iterations_used, marginal_residual) = match opts.method {
        SinkhornMethod::Log => log_sinkhorn(problem, g0, opts.tol, opts.max_iters)?,
        SinkhornMethod::Scaling => scaling_sinkhorn(problem, g0, opts.tol, opts.max_iters)?,
    };
    let transport_cost = (&coupling * &problem.cost).sum();
    let entropy_term: f64 = coupling.iter().map(|&t| if t > 0.0 { t * (t.ln() - 1.0) } else { 0.0 }).sum();
    let entropic_cost = transport_cost + problem.epsilon_ot * entropy_term;
    let objective = entropic_cost + problem.marginal_penalty()?;
    Ok(TransportPlan { coupling, objective, transport_cost, entropic_cost, iterations_used, marginal_residual })
}

fn residuals(t: &Array2<f64>, p: &Array1<f64>, q: &Array1<f64>) -> f64 {
    let rows = (&t.sum_axis(Axis(1)) - p).mapv(f64::abs).sum();
    let cols = (&t.sum_axis(Axis(0)) - q).mapv(f64::abs).sum();
    rows.max(cols)
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_sinkhorn(pr: &TransportProblem, mut g: Array1<f64>, tol: f64, max_iters: usize) -> Result<(Array2<f64>, usize, f64)> {
    let (n, m) = pr.cost.dim();
    let eps = pr.epsilon_ot;
    let d = &pr.cost;
    let log_p = pr.p.mapv(f64::ln);
    let log_q = pr.q.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let plan = |f: &Array1<f64>, g: &Array1<f64>| {
        Array2::from_shape_fn((n, m), |(i, j)| {
            let x = (f[i] + g[j] - d[[i, j]]) / eps;
            if x == f64::NEG_INFINITY { 0.0 } else { x.exp() }
        })
    };
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        for i in 0..n {
            f[i] = if pr.p[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * (log_p[i] - log_sum_exp((0..m).map(|j| (g[j] - d[[i, j]]) / eps)))
            };
        }
        for j in 0..m {
            g[j] = if pr.q[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * (log_q[j] - log_sum_exp((0..n).map(|i| (f[i] - d[[i, j]]) / eps)))
            };
        }
        let t = plan(&f, &g);
        residual = residuals(&t, &pr.p, &pr.q);
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok((t, it, residual));
        }
    }
    Err(Error::ConvergenceFailure { iterations: max_iters, residual })
}

fn scaling_sinkhorn(pr: &TransportProblem, g0: Array1<f64>, tol: f64, max_iters: usize) -> Result<(Array2<f64>, usize, f64)> {
    let eps = pr.epsilon_ot;
    let k = pr.cost.mapv(|c| (-c / eps).exp());
    let underflow = || Error::NumericUnderflow(format!("Gibbs kernel underflows at epsilon={eps}; use the log-domain solver"));
    let mut v = g0.mapv(|g| (g / eps).exp());
    if v.iter().any(|x| *x == 0.0 || !x.is_finite()) {
        return Err(underflow());
    }
    let mut u;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        let kv = k.dot(&v);
        if kv.iter().zip(&pr.p).any(|(s, p)| *p > 0.0 && *s == 0.0) {
            return Err(underflow());
        }
        u = Array1::from_shape_fn(pr.p.len(), |i| if pr.p[i] == 0.0 { 0.0 } else { pr.p[i] / kv[i] });
        let ktu = k.t().dot(&u);
        if ktu.iter().zip(&pr.q).any(|(s, q)| *q > 0.0 && *s == 0.0) {
            return Err(underflow());
        }
        v = Array1::from_shape_fn(pr.q.len(), |j| if pr.q[j] == 0.0 { 0.0 } else { pr.q[j] / ktu[j] });
        let mut t = k.clone();
        for ((i, j), x) in t.indexed_iter_mut() {
            *x *= u[i] * v[j];
        }
        residual = residuals(&t, &pr.p, &pr.q);
        if !residual.is_finite() {
            return Err(underflow());
        }
        if residual <= tol {
            return Ok((t, it, residual));
        }
    }
    Err(Error::ConvergenceFailure { iterations: max_iters, residual })
}

/// `Σ p_i log(p_i / q_i)` with `0 log 0 = 0`.
/// Headerless numeric CSV into a matrix; every row must have the same width.
pub fn read_matrix_csv<R: std::io::Read>(r: R) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
    let (mut data, mut rows, mut cols) = (Vec::new(), 0usize, None);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Format(format!("row {rows} has {} columns, expected {}", rec.len(), cols.unwrap_or(0))));
        }
        for f in rec.iter() {
            data.push(f.parse::<f64>().map_err(|_| Error::Format(format!("row {rows}: not a number: {f:?}")))?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| Error::Format(e.to_string()))
}

/// A marginal stored as one CSV row or one CSV column.
pub fn read_vector_csv<R: std::io::Read>(r: R) -> Result<Array1<f64>> {
    let m = read_matrix_csv(r)?;
    if m.nrows() > 1 && m.ncols() > 1 {
        return Err(Error::Format(format!("expected a single row or column, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.into_iter().collect())
}

pub fn marginal_kl(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidMarginals(format!("lengths differ: {} vs {}", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi < 0.0 || qi < 0.0 || !pi.is_finite() || !qi.is_finite() {
            return Err(Error::InvalidMarginals(format!("entry {i} is negative or non-finite")));
        }
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::InvalidMarginals(format!("q vanishes at {i} where p = {pi}")));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// Exact `min ⟨T,D⟩` over the transportation polytope, for `n·m ≤ 64`.
pub fn exact_ot_oracle(problem: &TransportProblem) -> Result<f64> {
    exact_ot_plan(problem).map(|t| (&t * &problem.cost).sum())
}

/// Optimal vertex coupling behind [`exact_ot_oracle`].
pub fn exact_ot_plan(problem: &TransportProblem) -> Result<Array2<f64>> {
    problem.validate()?;
    let (n, m) = problem.cost.dim();
    if n * m > ORACLE_MAX_CELLS {
        return Err(Error::SizeLimit(n * m));
    }
    if n == 2 && m == 2 {
        return Ok(two_by_two(problem));
    }
    TransportSimplex::new(problem).solve()
}

/// `T = [[t, p₁−t], [q₁−t, 1−p₁−q₁+t]]` is linear in `t`, so an endpoint is optimal.
fn two_by_two(pr: &TransportProblem) -> Array2<f64> {
    let (p1, q1) = (pr.p[0], pr.q[0]);
    let lo = (p1 + q1 - 1.0).max(0.0);
    let hi = p1.min(q1);
    let at = |t: f64| ndarray::array![[t, p1 - t], [q1 - t, pr.p[1] - q1 + t]];
    let (a, b) = (at(lo), at(hi));
    if (&a * &pr.cost).sum() <= (&b * &pr.cost).sum() { a } else { b }
}

/// Transportation simplex (MODI) over a spanning-tree basis of `n + m − 1` cells.
struct TransportSimplex<'a> {
    pr: &'a TransportProblem,
    flow: Array2<f64>,
    basic: Array2<bool>,
}

const PIVOT_LIMIT: usize = 100_000;
const REDUCED_COST_TOL: f64 = 1e-12;

impl<'a> TransportSimplex<'a> {
    /// North-west corner start. When a row and a column are exhausted at once
    /// only the row index advances, leaving a degenerate basic zero so the
    /// basis stays a spanning tree.
    fn new(pr: &'a TransportProblem) -> Self {
        let (n, m) = pr.cost.dim();
        let mut flow = Array2::zeros((n, m));
        let mut basic = Array2::from_elem((n, m), false);
        let mut supply = pr.p.to_vec();
        let mut demand = pr.q.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]);
            flow[[i, j]] = x;
            basic[[i, j]] = true;
            supply[i] -= x;
            demand[j] -= x;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if i == n - 1 || (j < m - 1 && supply[i] > demand[j]) {
                j += 1;
            } else {
                i += 1;
            }
        }
        Self { pr, flow, basic }
    }

    /// Row and column potentials with `u_i + v_j = c_ij` on basic cells.
    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = self.flow.dim();
        let mut u = vec![f64::NAN; n];
        let mut v = vec![f64::NAN; m];
        u[0] = 0.0;
        let mut stack = vec![(true, 0usize)];
        while let Some((is_row, k)) = stack.pop() {
            if is_row {
                for j in 0..m {
                    if self.basic[[k, j]] && v[j].is_nan() {
                        v[j] = self.pr.cost[[k, j]] - u[k];
                        stack.push((false, j));
                    }
                }
            } else {
                for i in 0..n {
                    if self.basic[[i, k]] && u[i].is_nan() {
                        u[i] = self.pr.cost[[i, k]] - v[k];
                        stack.push((true, i));
                    }
                }
            }
        }
        (u, v)
    }

    /// Cells on the tree path from row `i0` to column `j0`, starting at the row.
    fn tree_path(&self, i0: usize, j0: usize) -> Vec<(usize, usize)> {
        let (n, m) = self.flow.dim();
        // Nodes 0..n are rows, n..n+m columns.
        let mut parent = vec![usize::MAX; n + m];
        parent[i0] = i0;
        let mut stack = vec![i0];
        while let Some(node) = stack.pop() {
            if node < n {
                for j in 0..m {
                    if self.basic[[node, j]] && parent[n + j] == usize::MAX {
                        parent[n + j] = node;
                        stack.push(n + j);
                    }
                }
            } else {
                for i in 0..n {
                    if self.basic[[i, node - n]] && parent[i] == usize::MAX {
                        parent[i] = node;
                        stack.push(i);
                    }
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = n + j0;
        while node != i0 {
            let prev = parent[node];
            cells.push(if node < n { (node, prev - n) } else { (prev, node - n) });
            node = prev;
        }
        cells.reverse();
        cells
    }

    fn solve(mut self) -> Result<Array2<f64>> {
        let (n, m) = self.flow.dim();
        for _ in 0..PIVOT_LIMIT {
            let (u, v) = self.potentials();
            // Bland's rule: first improving cell in row-major order.
            let entering = (0..n)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .find(|&(i, j)| !self.basic[[i, j]] && self.pr.cost[[i, j]] - u[i] - v[j] < -REDUCED_COST_TOL);
            let Some((ei, ej)) = entering else {
                self.flow.mapv_inplace(|x| x.max(0.0));
                return Ok(self.flow);
            };
            // Cycle: entering (+), then the tree path from column ej back to row ei.
            // The path from ei to ej alternates row→col edges; reversed it starts at ej.
            let mut path = self.tree_path(ei, ej);
            path.reverse();
            // path[0] touches column ej: it is a donor (−), then signs alternate.
            let (mut theta, mut leave) = (f64::INFINITY, usize::MAX);
            for (k, &(i, j)) in path.iter().enumerate() {
                if k % 2 == 0 && (self.flow[[i, j]] < theta || (self.flow[[i, j]] == theta && (i, j) < path[leave])) {
                    theta = self.flow[[i, j]];
                    leave = k;
                }
            }
            self.flow[[ei, ej]] += theta;
            for (k, &(i, j)) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[[i, j]] -= theta;
                } else {
                    self.flow[[i, j]] += theta;
                }
            }
            let (li, lj) = path[leave];
            self.flow[[li, lj]] = 0.0;
            self.basic[[li, lj]] = false;
            self.basic[[ei, ej]] = true;
        }
        Err(Error::ConvergenceFailure { iterations: PIVOT_LIMIT, residual: f64::NAN })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn singleton() {
        let pr = TransportProblem::new(array![[2.5]], array![1.0], array![1.0]);
        let plan = sinkhorn(&pr, 1e-9, 10).unwrap();
        assert_abs_diff_eq!(plan.coupling[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.transport_cost, 2.5, epsilon = 1e-12);
        assert_eq!(exact_ot_oracle(&pr).unwrap(), 2.5);
    }

    #[test]
    fn constant_cost_gives_independence_coupling() {
        let pr = TransportProblem::new(Array2::from_elem((3, 2), 0.7), array![0.2, 0.3, 0.5], array![0.6, 0.4]);
        for method in [SinkhornMethod::Log, SinkhornMethod::Scaling] {
            let opts = SinkhornOptions { tol: 1e-12, method, ..Default::default() };
            let plan = sinkhorn_with(&pr, &opts).unwrap();
            for ((i, j), t) in plan.coupling.indexed_iter() {
                assert_abs_diff_eq!(*t, pr.p[i] * pr.q[j], epsilon = 1e-12);
            }
        }
        let pr = TransportProblem::new(Array2::from_elem((2, 2), 1.0), array![0.3, 0.7], array![0.9, 0.1]);
        assert_abs_diff_eq!(exact_ot_oracle(&pr).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_by_two_swap_cost() {
        let pr = TransportProblem::uniform(array![[0.0, 1.0], [1.0, 0.0]]).with_epsilon(0.01);
        assert_eq!(exact_ot_oracle(&pr).unwrap(), 0.0);
        let plan = sinkhorn(&pr, 1e-10, 10_000).unwrap();
        assert!(plan.transport_cost < 1e-20);
        assert_abs_diff_eq!(plan.coupling[[0, 0]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn small_epsilon_needs_log_domain() {
        let pr = TransportProblem::uniform(array![[0.0, 10.0], [10.0, 0.0], [5.0, 5.0]]).with_epsilon(0.001);
        let opts = SinkhornOptions { method: SinkhornMethod::Scaling, ..Default::default() };
        assert!(matches!(sinkhorn_with(&pr, &opts), Err(Error::NumericUnderflow(_))));
        let plan = sinkhorn(&pr, 1e-6, 10_000).unwrap();
        assert!(plan.marginal_residual <= 1e-6);
    }

    #[test]
    fn csv_matrices() {
        let m = read_matrix_csv("0, 1\n2,3\n".as_bytes()).unwrap();
        assert_eq!(m, ndarray::array![[0.0, 1.0], [2.0, 3.0]]);
        assert_eq!(read_vector_csv("0.5\n0.5\n".as_bytes()).unwrap().to_vec(), vec![0.5, 0.5]);
        assert!(read_matrix_csv("1,2\n3\n".as_bytes()).is_err());
        assert!(read_vector_csv("1,2\n3,4\n".as_bytes()).is_err());
    }

    #[test]
    fn non_convergence_reports_residual() {
        let pr = TransportProblem::new(array![[0.0, 1.0], [1.0, 0.0]], array![0.9, 0.1], array![0.2, 0.8]).with_epsilon(0.01);
        match sinkhorn(&pr, 1e-14, 1) {
            Err(Error::ConvergenceFailure { iterations: 1, residual }) => assert!(residual > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(marginal_kl(array![0.3, 0.7].view(), array![0.3, 0.7].view()).unwrap(), 0.0);
        assert_abs_diff_eq!(marginal_kl(array![1.0, 0.0].view(), array![0.5, 0.5].view()).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let v = marginal_kl(array![0.5, 0.5].view(), array![0.9, 0.1].view()).unwrap();
        assert_abs_diff_eq!(v, 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.51083, epsilon = 1e-5);
        assert!(matches!(marginal_kl(array![0.5, 0.5].view(), array![1.0, 0.0].view()), Err(Error::InvalidMarginals(_))));
    }

    #[test]
    fn marginal_penalty_enters_objective_only() {
        let base = TransportProblem::new(array![[0.0, 1.0], [1.0, 0.0]], array![0.5, 0.5], array![0.9, 0.1]);
        let a = sinkhorn(&base, 1e-10, 10_000).unwrap();
        let b = sinkhorn(&base.clone().with_lambda(2.0), 1e-10, 10_000).unwrap();
        assert_eq!(a.coupling, b.coupling);
        assert_abs_diff_eq!(b.objective - a.objective, 2.0 * 0.5108256237659907, epsilon = 1e-12);
    }

    #[test]
    fn oracle_size_limit_and_degenerate_start() {
        let pr = TransportProblem::uniform(Array2::zeros((9, 8)));
        assert!(matches!(exact_ot_oracle(&pr), Err(Error::SizeLimit(72))));
        // Equal supplies and demands force degenerate basic zeros in the start.
        let cost = array![[3.0, 1.0, 2.0], [1.0, 3.0, 2.0], [2.0, 2.0, 0.0]];
        let pr = TransportProblem::uniform(cost);
        assert_abs_diff_eq!(exact_ot_oracle(&pr).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_marginals() {
        let pr = TransportProblem::new(array![[1.0, 0.0]], array![1.0], array![0.5, 0.6]);
        assert!(matches!(sinkhorn(&pr, 1e-6, 10), Err(Error::InvalidMarginals(_))));
    }
}
