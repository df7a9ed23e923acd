//! SE(2) factor graph over a pose chain, solved by Levenberg-Marquardt on banded normal equations.

use crate::geom::{normalize_angle, PoseSE2};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("covariance conditioning: {0}")]
    Covariance(String),
    #[error("factor references unknown node {0}")]
    UnknownNode(usize),
    #[error("node {0} is not connected to node 0 through between factors")]
    Disconnected(usize),
    #[error("non-finite cost at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("normal equations are not positive definite")]
    Singular,
    #[error("graph has no nodes")]
    Empty,
    #[error("{0}")]
    Config(String),
    #[error("{file}: {reason}")]
    Io { file: String, reason: String },
}

/// Prior covariance: 1 m² per axis and (5°)² in yaw.
pub fn default_prior_cov() -> Matrix3<f64> {
    Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, 5f64.to_radians().powi(2)))
}

/// Smallest eigenvalue a registration covariance may carry, in m².
pub const REGISTRATION_COV_FLOOR: f64 = 0.25 * 0.25;

/// Clamp the eigenvalues of a symmetric 2×2 covariance to at least `floor`.
pub fn floor_covariance(cov: &Matrix2<f64>, floor: f64) -> Result<Matrix2<f64>, GraphError> {
    check_symmetric(cov.as_slice(), 2)?;
    let eig = cov.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    Ok(&eig.eigenvectors * Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn check_symmetric(m: &[f64], n: usize) -> Result<(), GraphError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GraphError::Covariance("non-finite entry".into()));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    for i in 0..n {
        for j in 0..i {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-9 * scale {
                return Err(GraphError::Covariance("matrix is not symmetric".into()));
            }
        }
    }
    Ok(())
}

/// Σ^{−1/2} of a symmetric positive-definite matrix via its eigendecomposition.
pub fn inverse_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, GraphError> {
    let n = cov.nrows();
    if cov.ncols() != n || n == 0 {
        return Err(GraphError::Covariance("covariance must be square".into()));
    }
    // nalgebra storage is column-major; symmetry makes the layout irrelevant
    check_symmetric(cov.as_slice(), n)?;
    let eig = cov.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max.max(1e-300)) {
        return Err(GraphError::Covariance(format!("covariance is singular or indefinite (smallest eigenvalue {min:e})")));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    /// Absolute pose measurement on one node.
    Prior { node: usize, meas: PoseSE2 },
    /// Relative pose `from⁻¹ ∘ to`.
    Between { from: usize, to: usize, meas: PoseSE2 },
    /// Planar position of one node; yaw is unconstrained.
    Registration { node: usize, xy: [f64; 2] },
}

/// A measurement with its covariance and the whitening matrix Σ^{−1/2}.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub cov: DMatrix<f64>,
    whiten: DMatrix<f64>,
}

impl Factor {
    pub fn prior(node: usize, meas: PoseSE2, cov: Matrix3<f64>) -> Result<Self, GraphError> {
        Self::with_cov(FactorKind::Prior { node, meas }, DMatrix::from_column_slice(3, 3, cov.as_slice()))
    }

    pub fn between(from: usize, to: usize, meas: PoseSE2, cov: Matrix3<f64>) -> Result<Self, GraphError> {
        Self::with_cov(FactorKind::Between { from, to, meas }, DMatrix::from_column_slice(3, 3, cov.as_slice()))
    }

    /// Registration unary; the covariance is floored at [`REGISTRATION_COV_FLOOR`].
    pub fn registration(node: usize, xy: [f64; 2], cov: Matrix2<f64>) -> Result<Self, GraphError> {
        let c = floor_covariance(&cov, REGISTRATION_COV_FLOOR)?;
        Self::with_cov(FactorKind::Registration { node, xy }, DMatrix::from_column_slice(2, 2, c.as_slice()))
    }

    fn with_cov(kind: FactorKind, cov: DMatrix<f64>) -> Result<Self, GraphError> {
        let whiten = inverse_sqrt(&cov)?;
        Ok(Self { kind, cov, whiten })
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            FactorKind::Registration { .. } => 2,
            _ => 3,
        }
    }

    pub fn nodes(&self) -> Vec<usize> {
        match self.kind {
            FactorKind::Prior { node, .. } | FactorKind::Registration { node, .. } => vec![node],
            FactorKind::Between { from, to, .. } => vec![from, to],
        }
    }

    pub fn whitening(&self) -> &DMatrix<f64> {
        &self.whiten
    }

    fn check(&self, nodes: &[PoseSE2]) -> Result<(), GraphError> {
        match self.nodes().into_iter().find(|&n| n >= nodes.len()) {
            Some(n) => Err(GraphError::UnknownNode(n)),
            None => Ok(()),
        }
    }

    /// Unwhitened residual in local coordinates.
    pub fn raw_residual(&self, nodes: &[PoseSE2]) -> Result<DVector<f64>, GraphError> {
        self.check(nodes)?;
        Ok(match &self.kind {
            FactorKind::Prior { node, meas } => local(&meas.between(&nodes[*node])),
            FactorKind::Between { from, to, meas } => local(&meas.between(&nodes[*from].between(&nodes[*to]))),
            FactorKind::Registration { node, xy } => DVector::from_vec(vec![nodes[*node].x - xy[0], nodes[*node].y - xy[1]]),
        })
    }

    /// Whitened residual Σ^{−1/2}·r.
    pub fn residual(&self, nodes: &[PoseSE2]) -> Result<DVector<f64>, GraphError> {
        Ok(&self.whiten * self.raw_residual(nodes)?)
    }

    /// Unwhitened Jacobians of the raw residual, one `dim × 3` block per referenced node,
    /// with respect to additive `(x, y, yaw)` increments.
    pub fn raw_jacobians(&self, nodes: &[PoseSE2]) -> Result<Vec<DMatrix<f64>>, GraphError> {
        self.check(nodes)?;
        Ok(match &self.kind {
            FactorKind::Prior { meas, .. } => {
                let rm = rot_t(meas.yaw);
                let mut j = DMatrix::zeros(3, 3);
                j.view_mut((0, 0), (2, 2)).copy_from(&rm);
                j[(2, 2)] = 1.0;
                vec![j]
            }
            FactorKind::Between { from, to, meas } => {
                let (a, b) = (nodes[*from], nodes[*to]);
                let rm = rot_t(meas.yaw);
                let ra = rot_t(a.yaw);
                let dt = nalgebra::Vector2::new(b.x - a.x, b.y - a.y);
                let (s, c) = a.yaw.sin_cos();
                let dra = Matrix2::new(-s, c, -c, -s);
                let mut ja = DMatrix::zeros(3, 3);
                ja.view_mut((0, 0), (2, 2)).copy_from(&(-rm * ra));
                ja.view_mut((0, 2), (2, 1)).copy_from(&(rm * dra * dt));
                ja[(2, 2)] = -1.0;
                let mut jb = DMatrix::zeros(3, 3);
                jb.view_mut((0, 0), (2, 2)).copy_from(&(rm * ra));
                jb[(2, 2)] = 1.0;
                vec![ja, jb]
            }
            FactorKind::Registration { .. } => {
                let mut j = DMatrix::zeros(2, 3);
                j[(0, 0)] = 1.0;
                j[(1, 1)] = 1.0;
                vec![j]
            }
        })
    }
}

fn local(p: &PoseSE2) -> DVector<f64> {
    DVector::from_vec(vec![p.x, p.y, normalize_angle(p.yaw)])
}

/// Rᵀ(θ).
fn rot_t(yaw: f64) -> Matrix2<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix2::new(c, s, -s, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub lambda0: f64,
    pub max_iterations: usize,
    pub rel_cost_tol: f64,
    pub step_tol: f64,
    /// Damping beyond which a solve stops trying.
    pub lambda_max: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { lambda0: 1e-4, max_iterations: 100, rel_cost_tol: 1e-9, step_tol: 1e-9, lambda_max: 1e12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    ZeroCost,
    CostDecrease,
    StepNorm,
    MaxIterations,
    DampingLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub termination: Termination,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<PoseSE2>,
    pub factors: Vec<Factor>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, p: PoseSE2) -> usize {
        self.nodes.push(p);
        self.nodes.len() - 1
    }

    pub fn add_factor(&mut self, f: Factor) -> Result<(), GraphError> {
        f.check(&self.nodes)?;
        self.factors.push(f);
        Ok(())
    }

    /// Replace every prior factor with `f`.
    pub fn set_prior(&mut self, f: Factor) -> Result<(), GraphError> {
        if !matches!(f.kind, FactorKind::Prior { .. }) {
            return Err(GraphError::Config("set_prior expects a prior factor".into()));
        }
        f.check(&self.nodes)?;
        self.factors.retain(|g| !matches!(g.kind, FactorKind::Prior { .. }));
        self.factors.push(f);
        Ok(())
    }

    /// Sum of squared whitened residuals.
    pub fn cost(&self) -> Result<f64, GraphError> {
        cost_at(&self.factors, &self.nodes)
    }

    /// First node not reachable from node 0 through between factors.
    pub fn check_connected(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut adj = vec![Vec::new(); n];
        for f in &self.factors {
            if let FactorKind::Between { from, to, .. } = f.kind {
                adj[from].push(to);
                adj[to].push(from);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(GraphError::Disconnected(i)),
            None => Ok(()),
        }
    }

    /// Optimize the node estimates in place.
    pub fn solve(&mut self, cfg: &LmConfig) -> Result<SolveReport, GraphError> {
        let (nodes, report) = solve_lm(self, &self.nodes, cfg)?;
        self.nodes = nodes;
        Ok(report)
    }

    /// Append a node reached by the between factor in `factors` that starts at an existing node,
    /// initialized by composing that node's estimate with the measurement, then re-solve.
    pub fn marginal_update(&mut self, factors: Vec<Factor>, cfg: &LmConfig) -> Result<SolveReport, GraphError> {
        let new = self.nodes.len();
        let init = factors
            .iter()
            .find_map(|f| match f.kind {
                FactorKind::Between { from, to, meas } if to == new && from < new => Some(self.nodes[from].compose(&meas)),
                FactorKind::Between { from, to, meas } if from == new && to < new => Some(self.nodes[to].compose(&meas.inverse())),
                _ => None,
            })
            .ok_or(GraphError::Disconnected(new))?;
        self.nodes.push(init);
        for f in &factors {
            if let Err(e) = f.check(&self.nodes) {
                self.nodes.pop();
                return Err(e);
            }
        }
        self.factors.extend(factors);
        self.solve(cfg)
    }

    /// Marginal (x, y) covariance of every node from the undamped information matrix.
    pub fn marginal_covariances(&self) -> Result<Vec<Matrix2<f64>>, GraphError> {
        let chol = self.information_factor()?;
        Ok((0..self.nodes.len()).map(|k| xy_block(&chol, k)).collect())
    }

    /// Marginal (x, y) covariance of node `k` alone.
    pub fn marginal_covariance(&self, k: usize) -> Result<Matrix2<f64>, GraphError> {
        if k >= self.nodes.len() {
            return Err(GraphError::UnknownNode(k));
        }
        Ok(xy_block(&self.information_factor()?, k))
    }

    fn information_factor(&self) -> Result<Band, GraphError> {
        let (h, _) = normal_equations(&self.factors, &self.nodes)?;
        h.cholesky().ok_or(GraphError::Singular)
    }
}

fn xy_block(chol: &Band, k: usize) -> Matrix2<f64> {
    let mut cols = [[0.0; 2]; 2];
    let mut e = vec![0.0; chol.n];
    for (a, col) in cols.iter_mut().enumerate() {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[3 * k + a] = 1.0;
        let x = chol.solve(&e);
        *col = [x[3 * k], x[3 * k + 1]];
    }
    let c = Matrix2::new(cols[0][0], cols[1][0], cols[0][1], cols[1][1]);
    (c + c.transpose()) * 0.5
}

fn cost_at(factors: &[Factor], nodes: &[PoseSE2]) -> Result<f64, GraphError> {
    let mut c = 0.0;
    for f in factors {
        c += f.residual(nodes)?.norm_squared();
    }
    Ok(c)
}

/// Symmetric band matrix stored by rows: entry (i, j) with i − kb ≤ j ≤ i at `i·(kb+1) + (i − j)`.
#[derive(Debug, Clone)]
pub(crate) struct Band {
    n: usize,
    kb: usize,
    data: Vec<f64>,
}

impl Band {
    fn zeros(n: usize, kb: usize) -> Self {
        Self { n, kb, data: vec![0.0; n * (kb + 1)] }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.kb {
            0.0
        } else {
            self.data[i * (self.kb + 1) + (i - j)]
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.kb);
        self.data[i * (self.kb + 1) + (i - j)] += v;
    }

    /// In-place Cholesky; the band of L keeps the band of the input.
    fn cholesky(mut self) -> Option<Self> {
        let (n, kb) = (self.n, self.kb);
        let w = kb + 1;
        for j in 0..n {
            let lo = j.saturating_sub(kb);
            let mut s = self.data[j * w];
            for k in lo..j {
                let l = self.data[j * w + (j - k)];
                s -= l * l;
            }
            if !(s > 0.0 && s.is_finite()) {
                return None;
            }
            let d = s.sqrt();
            self.data[j * w] = d;
            for i in j + 1..(j + kb + 1).min(n) {
                let lo = i.saturating_sub(kb);
                let mut s = self.data[i * w + (i - j)];
                for k in lo..j {
                    s -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                self.data[i * w + (i - j)] = s / d;
            }
        }
        Some(self)
    }

    /// Solve L·Lᵀ·x = b for a factor produced by [`Band::cholesky`].
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kb) = (self.n, self.kb);
        let w = kb + 1;
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(kb);
            let mut s = y[i];
            for k in lo..i {
                s -= self.data[i * w + (i - k)] * y[k];
            }
            y[i] = s / self.data[i * w];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + kb + 1).min(n) {
                s -= self.data[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.data[i * w];
        }
        y
    }
}

fn half_bandwidth(factors: &[Factor]) -> usize {
    let gap = factors
        .iter()
        .filter_map(|f| match f.kind {
            FactorKind::Between { from, to, .. } => Some(from.abs_diff(to)),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    3 * (gap + 1) - 1
}

/// Gauss-Newton information matrix JᵀJ and gradient Jᵀr of the whitened system.
fn normal_equations(factors: &[Factor], nodes: &[PoseSE2]) -> Result<(Band, Vec<f64>), GraphError> {
    let n = nodes.len() * 3;
    let mut h = Band::zeros(n, half_bandwidth(factors).min(n.saturating_sub(1)));
    let mut g = vec![0.0; n];
    for f in factors {
        let r = f.residual(nodes)?;
        let blocks: Vec<DMatrix<f64>> = f.raw_jacobians(nodes)?.into_iter().map(|j| f.whitening() * j).collect();
        let ids = f.nodes();
        for (a, ja) in ids.iter().zip(&blocks) {
            let jr = ja.transpose() * &r;
            for p in 0..3 {
                g[3 * a + p] += jr[p];
            }
            for (b, jb) in ids.iter().zip(&blocks) {
                if b > a {
                    continue;
                }
                let hab = ja.transpose() * jb;
                for p in 0..3 {
                    for q in 0..3 {
                        let (i, j) = (3 * a + p, 3 * b + q);
                        // the diagonal block is visited once; keep its lower triangle
                        if a == b && j > i {
                            continue;
                        }
                        h.add(i, j, hab[(p, q)]);
                    }
                }
            }
        }
    }
    Ok((h, g))
}

impl Band {
    fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }
}

/// Levenberg-Marquardt from `initial`: Marquardt-scaled damping λ·diag(H); λ ÷10 on an accepted step, ×10 on a rejected one.
pub fn solve_lm(graph: &PoseGraph, initial: &[PoseSE2], cfg: &LmConfig) -> Result<(Vec<PoseSE2>, SolveReport), GraphError> {
    if initial.len() != graph.nodes.len() {
        return Err(GraphError::Config(format!("{} initial poses for {} nodes", initial.len(), graph.nodes.len())));
    }
    if initial.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.yaw.is_finite())) {
        return Err(GraphError::Config("initial estimate is not finite".into()));
    }
    graph.check_connected()?;
    let mut x = initial.to_vec();
    let mut cost = cost_at(&graph.factors, &x)?;
    if !cost.is_finite() {
        return Err(GraphError::Divergence { iteration: 0 });
    }
    let initial_cost = cost;
    let mut accepted = vec![cost];
    let mut lambda = cfg.lambda0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut linearized: Option<(Band, Vec<f64>)> = None;
    while iterations < cfg.max_iterations {
        if cost == 0.0 {
            termination = Termination::ZeroCost;
            break;
        }
        let (h, g) = match linearized.take() {
            Some(s) => s,
            None => normal_equations(&graph.factors, &x)?,
        };
        let mut damped = h.clone();
        for i in 0..damped.n {
            let d = h.get(i, i).max(1e-12);
            damped.add(i, i, lambda * d);
        }
        let Some(chol) = damped.cholesky() else {
            iterations += 1;
            lambda *= 10.0;
            linearized = Some((h, g));
            if lambda > cfg.lambda_max {
                termination = Termination::DampingLimit;
                break;
            }
            continue;
        };
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let delta = chol.solve(&neg_g);
        let step = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !step.is_finite() {
            return Err(GraphError::Divergence { iteration: iterations + 1 });
        }
        // a step below tolerance is not taken and does not count as an iteration
        if step < cfg.step_tol {
            termination = Termination::StepNorm;
            break;
        }
        iterations += 1;
        let trial: Vec<PoseSE2> = x.iter().enumerate().map(|(k, p)| PoseSE2::new(p.x + delta[3 * k], p.y + delta[3 * k + 1], p.yaw + delta[3 * k + 2])).collect();
        let trial_cost = cost_at(&graph.factors, &trial)?;
        if !trial_cost.is_finite() {
            return Err(GraphError::Divergence { iteration: iterations });
        }
        if trial_cost <= cost {
            let rel = (cost - trial_cost) / cost;
            x = trial;
            cost = trial_cost;
            accepted.push(cost);
            lambda = (lambda / 10.0).max(1e-15);
            if rel < cfg.rel_cost_tol {
                termination = Termination::CostDecrease;
                break;
            }
        } else {
            lambda *= 10.0;
            linearized = Some((h, g));
            if lambda > cfg.lambda_max {
                termination = Termination::DampingLimit;
                break;
            }
        }
    }
    Ok((x, SolveReport { iterations, initial_cost, final_cost: cost, accepted_costs: accepted, termination }))
}

/// One row of an exported trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub cov_xx: f64,
    pub cov_xy: f64,
    pub cov_yy: f64,
}

impl TrajectoryRow {
    pub fn new(t: f64, p: &PoseSE2, cov: &Matrix2<f64>) -> Self {
        Self { t, x: p.x, y: p.y, yaw: p.yaw, cov_xx: cov[(0, 0)], cov_xy: cov[(0, 1)], cov_yy: cov[(1, 1)] }
    }
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<(), GraphError> {
    let io = |e: csv::Error| GraphError::Io { file: path.display().to_string(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| GraphError::Io { file: path.display().to_string(), reason: e.to_string() })
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>, GraphError> {
    let io = |e: csv::Error| GraphError::Io { file: path.display().to_string(), reason: e.to_string() };
    csv::Reader::from_path(path).map_err(io)?.deserialize().collect::<Result<_, _>>().map_err(io)
}

/// Dense information matrix, for tests and diagnostics.
pub fn information_matrix(graph: &PoseGraph) -> Result<DMatrix<f64>, GraphError> {
    Ok(normal_equations(&graph.factors, &graph.nodes)?.0.to_dense())
}
