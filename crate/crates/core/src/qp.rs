//! Small dense strictly convex quadratic programs.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 u' H u + f' u  +  sum_soft w_i s_i^2
//!     subject to  offset_i + gradient_i' u        >= 0   (hard rows)
//!                 offset_i + gradient_i' u + s_i  >= 0   (soft rows)
//! ```
//!
//! Soft rows are handled by augmenting the decision vector with one slack
//! per soft row, which keeps the augmented problem strictly convex. The
//! augmented problem is solved with a dual active-set method (Goldfarb and
//! Idnani), which starts from the unconstrained minimizer and needs no
//! feasible starting point. When the hard rows admit no solution, every hard
//! row is softened with a large weight and the problem is solved again, giving
//! the least-infeasible control.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Default weight applied to hard rows when the problem must be softened.
pub const DEFAULT_FALLBACK_WEIGHT: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("hessian is not symmetric positive definite")]
    NonConvex,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("active-set iteration limit ({0}) exceeded")]
    IterationLimit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowKind {
    Hard,
    Soft { slack_weight: f64 },
}

/// One linear inequality `offset + gradient . u >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub offset: f64,
    pub gradient: DVector<f64>,
    pub kind: RowKind,
}

impl ConstraintRow {
    pub fn hard(offset: f64, gradient: DVector<f64>) -> Self {
        Self {
            offset,
            gradient,
            kind: RowKind::Hard,
        }
    }

    pub fn soft(offset: f64, gradient: DVector<f64>, slack_weight: f64) -> Self {
        Self {
            offset,
            gradient,
            kind: RowKind::Soft { slack_weight },
        }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self.kind, RowKind::Hard)
    }

    /// `offset + gradient . u`
    pub fn value(&self, u: &DVector<f64>) -> f64 {
        self.offset + self.gradient.dot(u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub dim: usize,
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub rows: Vec<ConstraintRow>,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        Self {
            dim: linear.len(),
            hessian,
            linear,
            rows: Vec::new(),
        }
    }

    /// Objective `min sum ||u - target||^2` scaled to the `1/2 u'Hu + f'u` form.
    pub fn least_distance(target: &DVector<f64>) -> Self {
        let n = target.len();
        Self::new(DMatrix::identity(n, n) * 2.0, target * -2.0)
    }

    pub fn push(&mut self, row: ConstraintRow) {
        self.rows.push(row);
    }

    /// Copy of the problem with every hard row turned into a soft row of the given weight.
    pub fn softened(&self, weight: f64) -> Self {
        let mut p = self.clone();
        for row in &mut p.rows {
            if row.is_hard() {
                row.kind = RowKind::Soft {
                    slack_weight: weight,
                };
            }
        }
        p
    }

    fn validate(&self, max_dim: usize) -> Result<(), QpError> {
        if self.dim == 0 || self.dim > max_dim {
            return Err(QpError::DimensionMismatch(format!(
                "dim {} outside 1..={max_dim}",
                self.dim
            )));
        }
        if self.hessian.nrows() != self.dim || self.hessian.ncols() != self.dim {
            return Err(QpError::DimensionMismatch(format!(
                "hessian is {}x{}, expected {}x{}",
                self.hessian.nrows(),
                self.hessian.ncols(),
                self.dim,
                self.dim
            )));
        }
        if self.linear.len() != self.dim {
            return Err(QpError::DimensionMismatch(format!(
                "linear term has length {}, expected {}",
                self.linear.len(),
                self.dim
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.gradient.len() != self.dim {
                return Err(QpError::DimensionMismatch(format!(
                    "row {i} gradient has length {}, expected {}",
                    row.gradient.len(),
                    self.dim
                )));
            }
            if let RowKind::Soft { slack_weight } = row.kind {
                if !(slack_weight > 0.0) {
                    return Err(QpError::DimensionMismatch(format!(
                        "row {i} has non-positive slack weight {slack_weight}"
                    )));
                }
            }
        }
        let scale = self.hessian.amax().max(f64::MIN_POSITIVE);
        if (&self.hessian - self.hessian.transpose()).amax() > 1e-12 * scale {
            return Err(QpError::NonConvex);
        }
        if self.hessian.iter().any(|v| !v.is_finite())
            || self.linear.iter().any(|v| !v.is_finite())
            || self
                .rows
                .iter()
                .any(|r| !r.offset.is_finite() || r.gradient.iter().any(|v| !v.is_finite()))
        {
            return Err(QpError::DimensionMismatch("non-finite problem data".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// True when every hard row holds; false for least-infeasible solutions.
    pub feasible: bool,
    /// `max(0, -(offset + gradient . u))` per row.
    pub slacks: Vec<f64>,
    /// Rows in the final working set, ascending.
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
}

impl QpSolution {
    pub fn total_slack(&self) -> f64 {
        self.slacks.iter().sum()
    }

    pub fn slack_norm_sq(&self) -> f64 {
        self.slacks.iter().map(|s| s * s).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub max_dim: usize,
    pub fallback_weight: f64,
    pub max_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_dim: 64,
            fallback_weight: DEFAULT_FALLBACK_WEIGHT,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings }
    }

    pub fn solve(&self, p: &QpProblem) -> Result<QpSolution, QpError> {
        p.validate(self.settings.max_dim)?;
        if Cholesky::new(p.hessian.clone()).is_none() {
            return Err(QpError::NonConvex);
        }
        let (u, active, feasible) = match self.solve_augmented(p)? {
            Some((u, active)) => (u, active, true),
            None => {
                let soft = p.softened(self.settings.fallback_weight);
                match self.solve_augmented(&soft)? {
                    Some((u, active)) => (u, active, false),
                    // an all-soft problem is always feasible
                    None => return Err(QpError::IterationLimit(self.settings.max_iterations)),
                }
            }
        };
        let slacks = p.rows.iter().map(|r| (-r.value(&u)).max(0.0)).collect();
        let mut sol = QpSolution {
            u,
            feasible,
            slacks,
            active_set: active,
            kkt_residual: 0.0,
        };
        sol.kkt_residual = self.verify_kkt(p, &sol)?;
        Ok(sol)
    }

    /// Solves the slack-augmented problem; `None` when the hard rows are infeasible.
    fn solve_augmented(
        &self,
        p: &QpProblem,
    ) -> Result<Option<(DVector<f64>, Vec<usize>)>, QpError> {
        let n_soft = p.rows.iter().filter(|r| !r.is_hard()).count();
        let n = p.dim + n_soft;
        let m = p.rows.len();

        let mut hess = DMatrix::zeros(n, n);
        hess.view_mut((0, 0), (p.dim, p.dim)).copy_from(&p.hessian);
        let mut lin = DVector::zeros(n);
        lin.rows_mut(0, p.dim).copy_from(&p.linear);
        // normals as columns; constraint j reads normal_j . x >= rhs_j
        let mut normals = DMatrix::zeros(n, m);
        let mut rhs = DVector::zeros(m);
        let mut slot = p.dim;
        for (j, row) in p.rows.iter().enumerate() {
            normals
                .view_mut((0, j), (p.dim, 1))
                .copy_from(&row.gradient);
            rhs[j] = -row.offset;
            if let RowKind::Soft { slack_weight } = row.kind {
                hess[(slot, slot)] = 2.0 * slack_weight;
                normals[(slot, j)] = 1.0;
                slot += 1;
            }
        }

        let chol = Cholesky::new(hess.clone()).ok_or(QpError::NonConvex)?;
        let x = dual_active_set(&chol, &lin, &normals, &rhs, self.settings.max_iterations)?;
        Ok(x.map(|(x, mut active)| {
            active.sort_unstable();
            let x = polish(&hess, &lin, &normals, &rhs, &active).unwrap_or(x);
            (x.rows(0, p.dim).into_owned(), active)
        }))
    }

    /// Largest violation among stationarity, primal feasibility, dual
    /// feasibility and complementary slackness, recomputed from `s.u` alone.
    ///
    /// Solutions flagged infeasible are checked against the softened problem.
    /// Stationarity and complementarity are measured relative to `1 + ` the
    /// largest multiplier, so heavily weighted slacks do not amplify
    /// round-off in `u`.
    pub fn verify_kkt(&self, p: &QpProblem, s: &QpSolution) -> Result<f64, QpError> {
        if s.u.len() != p.dim || p.hessian.nrows() != p.dim || p.linear.len() != p.dim {
            return Err(QpError::DimensionMismatch(format!(
                "solution has length {}, problem dim {}",
                s.u.len(),
                p.dim
            )));
        }
        if p.rows.iter().any(|r| r.gradient.len() != p.dim) {
            return Err(QpError::DimensionMismatch("row gradient length".into()));
        }
        let softened;
        let q = if s.feasible {
            p
        } else {
            softened = p.softened(self.settings.fallback_weight);
            &softened
        };
        let u = &s.u;
        let mut grad = &q.hessian * u + &q.linear;
        let mut primal: f64 = 0.0;
        let mut tight = Vec::new();
        let mut mult_scale: f64 = 0.0;
        for row in &q.rows {
            let v = row.value(u);
            match row.kind {
                RowKind::Soft { slack_weight } => {
                    let slack = (-v).max(0.0);
                    mult_scale = mult_scale.max(2.0 * slack_weight * slack);
                    grad -= &row.gradient * (2.0 * slack_weight * slack);
                }
                RowKind::Hard => {
                    primal = primal.max(-v);
                    if v <= 1e-7 * (1.0 + row.offset.abs()) {
                        tight.push((row, v));
                    }
                }
            }
        }
        let mut stationarity = grad.amax();
        let mut dual: f64 = 0.0;
        let mut complementarity: f64 = 0.0;
        if !tight.is_empty() {
            let g = DMatrix::from_columns(
                &tight
                    .iter()
                    .map(|(r, _)| r.gradient.clone())
                    .collect::<Vec<_>>(),
            );
            let svd = g.clone().svd(true, true);
            let lambda = svd
                .solve(&grad, 1e-12 * svd.singular_values.max().max(1.0))
                .unwrap_or_else(|_| DVector::zeros(tight.len()));
            stationarity = (&grad - &g * &lambda).amax();
            for (l, (_, v)) in lambda.iter().zip(&tight) {
                mult_scale = mult_scale.max(l.abs());
                dual = dual.max(-l);
                complementarity = complementarity.max((l * v).abs());
            }
        }
        let scale = 1.0 + mult_scale;
        Ok((stationarity / scale)
            .max(primal)
            .max(dual)
            .max(complementarity / scale))
    }
}

pub fn solve(p: &QpProblem) -> Result<QpSolution, QpError> {
    QpSolver::default().solve(p)
}

pub fn verify_kkt(p: &QpProblem, s: &QpSolution) -> Result<f64, QpError> {
    QpSolver::default().verify_kkt(p, s)
}

/// Re-solves the equality-constrained KKT system of the final working set in
/// one factorization, removing the round-off accumulated over the iteration.
/// Returns `None` if the system is singular or the result leaves the
/// primal or dual feasible region.
fn polish(
    hess: &DMatrix<f64>,
    lin: &DVector<f64>,
    normals: &DMatrix<f64>,
    rhs: &DVector<f64>,
    active: &[usize],
) -> Option<DVector<f64>> {
    let (n, k) = (lin.len(), active.len());
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(hess);
    let mut b = DVector::zeros(n + k);
    b.rows_mut(0, n).copy_from(&(-lin));
    for (c, &j) in active.iter().enumerate() {
        let col = normals.column(j);
        kkt.view_mut((0, n + c), (n, 1)).copy_from(&(-col));
        kkt.view_mut((n + c, 0), (1, n)).copy_from(&col.transpose());
        b[n + c] = rhs[j];
    }
    let sol = kkt.full_piv_lu().solve(&b)?;
    if sol.iter().any(|v| !v.is_finite()) || sol.rows(n, k).iter().any(|&l| l < -1e-9) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let feasible = (0..normals.ncols())
        .all(|j| normals.column(j).dot(&x) - rhs[j] >= -1e-9 * (1.0 + rhs[j].abs()));
    feasible.then_some(x)
}

/// Goldfarb-Idnani dual active-set iteration for `min 1/2 x'Hx + f'x`
/// subject to `N' x >= b`. Returns `None` if the constraints are infeasible.
fn dual_active_set(
    chol: &Cholesky<f64, Dyn>,
    lin: &DVector<f64>,
    normals: &DMatrix<f64>,
    rhs: &DVector<f64>,
    max_iterations: usize,
) -> Result<Option<(DVector<f64>, Vec<usize>)>, QpError> {
    let m = normals.ncols();
    let mut x = -chol.solve(lin);
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let tol: Vec<f64> = rhs.iter().map(|b| 1e-9 * (1.0 + b.abs())).collect();
    let mut iterations = 0;

    loop {
        // most violated inactive constraint, smallest index on ties
        let mut entering = None;
        let mut worst = 0.0;
        for j in 0..m {
            if active.contains(&j) {
                continue;
            }
            let s = normals.column(j).dot(&x) - rhs[j];
            if s < -tol[j] && s < worst {
                worst = s;
                entering = Some(j);
            }
        }
        let Some(p) = entering else {
            return Ok(Some((x, active)));
        };
        let np = normals.column(p).into_owned();
        let mut lambda_p = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(QpError::IterationLimit(max_iterations));
            }
            let d = chol.solve(&np);
            let (z, r) = if active.is_empty() {
                (d.clone(), DVector::zeros(0))
            } else {
                let n_act = DMatrix::from_columns(
                    &active
                        .iter()
                        .map(|&j| normals.column(j).into_owned())
                        .collect::<Vec<_>>(),
                );
                let hinv_n = chol.solve(&n_act);
                let gram = n_act.transpose() * &hinv_n;
                let r = match Cholesky::new(gram.clone()) {
                    Some(c) => c.solve(&(n_act.transpose() * &d)),
                    None => gram
                        .lu()
                        .solve(&(n_act.transpose() * &d))
                        .unwrap_or_else(|| DVector::zeros(active.len())),
                };
                (d.clone() - hinv_n * &r, r)
            };

            // partial step limit from dual feasibility of the working set
            let mut t1 = f64::INFINITY;
            let mut leaving = None;
            for (k, (&rk, &lk)) in r.iter().zip(&lambda).enumerate() {
                if rk > 1e-14 {
                    let t = lk / rk;
                    let better = t < t1
                        || (t == t1 && leaving.is_some_and(|l: usize| active[k] < active[l]));
                    if better {
                        t1 = t;
                        leaving = Some(k);
                    }
                }
            }

            // a full working set leaves no primal direction
            let zn = if active.len() >= x.len() {
                0.0
            } else {
                z.dot(&np)
            };
            let sp = np.dot(&x) - rhs[p];
            let t2 = if zn > 1e-10 * np.dot(&d).max(f64::MIN_POSITIVE) {
                -sp / zn
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Ok(None);
            }

            let t = t1.min(t2);
            if t2.is_finite() {
                x += &z * t;
            }
            for (lk, rk) in lambda.iter_mut().zip(r.iter()) {
                *lk = (*lk - t * rk).max(0.0);
            }
            lambda_p += t;

            if t2 <= t1 {
                active.push(p);
                lambda.push(lambda_p);
                break;
            }
            let k = leaving.expect("finite partial step has a leaving constraint");
            active.remove(k);
            lambda.remove(k);
        }
    }
}
