//! Two agents in perpendicular corridors crossing one intersection.
//!
//! Each agent is a single integrator `x_i' = v_i` with `x_i < 0` before the
//! intersection and a desired speed `v0_i > 0`. The pair barrier is
//! `h = x1^2 + x2^2 - r^2` with the first-order constraint
//! `2 x . v + lambda h >= 0`. Every policy is written in the closed form of
//! its per-agent QP, so the closed loop is a piecewise-smooth vector field
//! over `(x1, x2)`, extended by the filter states `(w1, w2)` for PCCA.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::io::{self, Write};

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorridorError {
    #[error("singular state: {0}")]
    SingularState(String),
    #[error("not an equilibrium (field norm {0:e})")]
    NotAnEquilibrium(f64),
    #[error("trajectory leaves the both-active branch at t = {0}")]
    BranchViolation(f64),
    #[error("no conserved quantity is known for {0}")]
    NoInvariant(Policy1d),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy1d {
    Centralized,
    DecentralizedFollower,
    DecentralizedReciprocal,
    Ccs,
    Pcca,
}

impl Policy1d {
    pub const ALL: [Policy1d; 5] = [
        Policy1d::DecentralizedReciprocal,
        Policy1d::DecentralizedFollower,
        Policy1d::Ccs,
        Policy1d::Centralized,
        Policy1d::Pcca,
    ];

    pub fn state_dim(self) -> usize {
        if self == Policy1d::Pcca {
            4
        } else {
            2
        }
    }

    /// Fraction of `lambda h` each decentralized host takes on.
    fn share(self) -> f64 {
        match self {
            Policy1d::DecentralizedReciprocal => 0.5,
            _ => 1.0,
        }
    }

    fn is_decentralized(self) -> bool {
        matches!(
            self,
            Policy1d::DecentralizedFollower | Policy1d::DecentralizedReciprocal
        )
    }
}

impl fmt::Display for Policy1d {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy1d::Centralized => "Centralized",
            Policy1d::DecentralizedFollower => "DF",
            Policy1d::DecentralizedReciprocal => "DR",
            Policy1d::Ccs => "CCS",
            Policy1d::Pcca => "PCCA",
        })
    }
}

impl std::str::FromStr for Policy1d {
    type Err = CorridorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Centralized" => Ok(Policy1d::Centralized),
            "DF" => Ok(Policy1d::DecentralizedFollower),
            "DR" => Ok(Policy1d::DecentralizedReciprocal),
            "CCS" => Ok(Policy1d::Ccs),
            "PCCA" => Ok(Policy1d::Pcca),
            _ => Err(CorridorError::InvalidParams(format!(
                "unknown policy `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Corridor1dState {
    /// Signed distances to the intersection.
    pub pos: [f64; 2],
    /// PCCA filter states; `filter[i]` estimates agent `i`'s unexplained speed.
    pub filter: [f64; 2],
    pub t: f64,
}

impl Corridor1dState {
    pub fn new(x1: f64, x2: f64) -> Self {
        Self {
            pos: [x1, x2],
            filter: [0.0; 2],
            t: 0.0,
        }
    }

    pub fn with_filter(mut self, w1: f64, w2: f64) -> Self {
        self.filter = [w1, w2];
        self
    }

    pub fn barrier(&self, r: f64) -> f64 {
        self.pos[0] * self.pos[0] + self.pos[1] * self.pos[1] - r * r
    }

    fn vector(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![self.pos[0], self.pos[1]];
        if dim == 4 {
            v.extend(self.filter);
        }
        v
    }

    fn from_vector(v: &[f64], t: f64) -> Self {
        Self {
            pos: [v[0], v[1]],
            filter: if v.len() == 4 { [v[2], v[3]] } else { [0.0; 2] },
            t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corridor1dParams {
    pub policy: Policy1d,
    pub v0: [f64; 2],
    pub r: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Slack weight for the decentralized policies; `None` keeps the hard form.
    pub slack_weight: Option<f64>,
    pub dt: f64,
    pub t_max: f64,
}

impl Default for Corridor1dParams {
    fn default() -> Self {
        Self {
            policy: Policy1d::DecentralizedReciprocal,
            v0: [2.0, 2.0],
            r: 4.0,
            lambda: 1.0,
            tau: 0.2,
            slack_weight: None,
            dt: 0.005,
            t_max: 20.0,
        }
    }
}

impl Corridor1dParams {
    pub fn validate(&self) -> Result<(), CorridorError> {
        let checks = [
            ("v01", self.v0[0]),
            ("v02", self.v0[1]),
            ("r", self.r),
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("dt", self.dt),
            ("t_max", self.t_max),
        ];
        for (k, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CorridorError::InvalidParams(format!(
                    "`{k}` must be positive, got {v}"
                )));
            }
        }
        if let Some(m) = self.slack_weight {
            if !(m > 0.0 && m.is_finite()) {
                return Err(CorridorError::InvalidParams(format!(
                    "`slack_weight` must be positive, got {m}"
                )));
            }
        }
        if self.t_max < self.dt {
            return Err(CorridorError::InvalidParams(
                "`t_max` must be at least `dt`".into(),
            ));
        }
        Ok(())
    }

    pub fn with_policy(self, policy: Policy1d) -> Self {
        Self { policy, ..self }
    }
}

/// Speed of one decentralized agent; the other agent enters only through `h`.
pub fn dr_velocity_1d(
    x: f64,
    other: f64,
    v0: f64,
    p: &Corridor1dParams,
) -> Result<f64, CorridorError> {
    let h = x * x + other * other - p.r * p.r;
    let c = p.policy.share() * p.lambda * h;
    if c + 2.0 * x * v0 >= 0.0 {
        return Ok(v0);
    }
    match p.slack_weight {
        None => {
            if x.abs() < SINGULAR_TOL {
                return Err(CorridorError::SingularState(format!(
                    "agent at x = {x} with an active constraint"
                )));
            }
            Ok(-c / (2.0 * x))
        }
        Some(m) => Ok((v0 / m - 2.0 * x * c) / (1.0 / m + 4.0 * x * x)),
    }
}

fn norm_sq_checked(x: &[f64; 2]) -> Result<f64, CorridorError> {
    let s = x[0] * x[0] + x[1] * x[1];
    if s < SINGULAR_TOL {
        Err(CorridorError::SingularState(
            "both agents at the intersection".into(),
        ))
    } else {
        Ok(s)
    }
}

/// Which agents currently have their own constraint active.
pub fn active_branches(s: &Corridor1dState, p: &Corridor1dParams) -> [bool; 2] {
    let x = s.pos;
    let v0 = p.v0;
    let h = s.barrier(p.r);
    let s2 = x[0] * x[0] + x[1] * x[1];
    match p.policy {
        Policy1d::DecentralizedFollower | Policy1d::DecentralizedReciprocal => {
            let c = p.policy.share() * p.lambda * h;
            [c + 2.0 * x[0] * v0[0] < 0.0, c + 2.0 * x[1] * v0[1] < 0.0]
        }
        Policy1d::Centralized => {
            let mu = p.lambda * h + 2.0 * (x[0] * v0[0] + x[1] * v0[1]);
            [mu < 0.0; 2]
        }
        Policy1d::Ccs => [0, 1].map(|i| x[i] * x[i] * p.lambda * h + 2.0 * v0[i] * x[i] * s2 < 0.0),
        Policy1d::Pcca => {
            let w = s.filter;
            [
                p.lambda * h + 2.0 * x[0] * v0[0] + 2.0 * x[1] * w[1] < 0.0,
                p.lambda * h + 2.0 * x[1] * v0[1] + 2.0 * x[0] * w[0] < 0.0,
            ]
        }
    }
}

/// Time derivative of `(x1, x2, w1, w2)`; the filter entries are zero for
/// every policy but PCCA.
pub fn closed_loop_field(
    s: &Corridor1dState,
    p: &Corridor1dParams,
) -> Result<[f64; 4], CorridorError> {
    let x = s.pos;
    let v0 = p.v0;
    let h = s.barrier(p.r);
    let active = active_branches(s, p);
    match p.policy {
        Policy1d::DecentralizedFollower | Policy1d::DecentralizedReciprocal => Ok([
            dr_velocity_1d(x[0], x[1], v0[0], p)?,
            dr_velocity_1d(x[1], x[0], v0[1], p)?,
            0.0,
            0.0,
        ]),
        Policy1d::Centralized => {
            if !active[0] {
                return Ok([v0[0], v0[1], 0.0, 0.0]);
            }
            let s2 = norm_sq_checked(&x)?;
            let mu = p.lambda * h + 2.0 * (x[0] * v0[0] + x[1] * v0[1]);
            Ok([
                v0[0] - mu * x[0] / (2.0 * s2),
                v0[1] - mu * x[1] / (2.0 * s2),
                0.0,
                0.0,
            ])
        }
        Policy1d::Ccs => {
            let mut v = [v0[0], v0[1], 0.0, 0.0];
            for i in 0..2 {
                if active[i] {
                    let s2 = norm_sq_checked(&x)?;
                    v[i] = -p.lambda * h * x[i] / (2.0 * s2);
                }
            }
            Ok(v)
        }
        Policy1d::Pcca => {
            let w = s.filter;
            // host i solves for (own, other) speeds
            let mut own = [v0[0], v0[1]];
            let mut other = [0.0, 0.0];
            for i in 0..2 {
                if active[i] {
                    let j = 1 - i;
                    let s2 = norm_sq_checked(&x)?;
                    let mu = p.lambda * h + 2.0 * x[i] * v0[i] + 2.0 * x[j] * w[j];
                    own[i] = v0[i] - mu * x[i] / (2.0 * s2);
                    other[i] = -mu * x[j] / (2.0 * s2);
                }
            }
            // filter[j] tracks agent j's applied speed minus host i's virtual one
            Ok([
                own[0],
                own[1],
                (-w[0] + own[0] - other[1]) / p.tau,
                (-w[1] + own[1] - other[0]) / p.tau,
            ])
        }
    }
}

fn rk4_step(
    s: &Corridor1dState,
    p: &Corridor1dParams,
    dt: f64,
) -> Result<Corridor1dState, CorridorError> {
    let add = |s: &Corridor1dState, k: &[f64; 4], c: f64| Corridor1dState {
        pos: [s.pos[0] + c * k[0], s.pos[1] + c * k[1]],
        filter: [s.filter[0] + c * k[2], s.filter[1] + c * k[3]],
        t: s.t + c,
    };
    let k1 = closed_loop_field(s, p)?;
    let k2 = closed_loop_field(&add(s, &k1, 0.5 * dt), p)?;
    let k3 = closed_loop_field(&add(s, &k2, 0.5 * dt), p)?;
    let k4 = closed_loop_field(&add(s, &k3, dt), p)?;
    let inc: [f64; 4] = std::array::from_fn(|i| (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0);
    let mut next = add(s, &inc, dt);
    next.t = s.t + dt;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run1d {
    /// Sampled states, present only when recording was requested.
    pub trajectory: Vec<Corridor1dState>,
    pub clear_time: [Option<f64>; 2],
    /// Per-agent delay against the unimpeded crossing time, capped at `t_max`.
    pub extra_time: [f64; 2],
    pub t_ext: f64,
    /// Neither agent cleared before `t_max`.
    pub gridlocked: bool,
}

fn integrate(
    initial: &Corridor1dState,
    p: &Corridor1dParams,
    record: bool,
    stop_when_clear: bool,
) -> Result<Run1d, CorridorError> {
    p.validate()?;
    let mut s = *initial;
    let mut traj = Vec::new();
    if record {
        traj.push(s);
    }
    let mut clear = [None, None];
    let n = (p.t_max / p.dt).round() as usize;
    for _ in 0..n {
        let next = rk4_step(&s, p, p.dt)?;
        for i in 0..2 {
            if clear[i].is_none() && next.pos[i] >= 0.0 {
                let frac = if s.pos[i] >= 0.0 {
                    0.0
                } else {
                    -s.pos[i] / (next.pos[i] - s.pos[i])
                };
                clear[i] = Some(s.t + frac * p.dt);
            }
        }
        s = next;
        if record {
            traj.push(s);
        }
        if stop_when_clear && clear.iter().all(Option::is_some) {
            break;
        }
    }
    let extra_time: [f64; 2] = std::array::from_fn(|i| {
        let t = clear[i].map_or(p.t_max, |t: f64| t.min(p.t_max));
        t - initial.pos[i].abs() / p.v0[i]
    });
    Ok(Run1d {
        trajectory: traj,
        clear_time: clear,
        extra_time,
        t_ext: extra_time[0] + extra_time[1],
        gridlocked: clear.iter().all(Option::is_none),
    })
}

/// Fixed-step RK4 run from `initial` until both agents clear or `t_max`.
/// Clearing times are linearly interpolated at the zero crossing.
pub fn simulate_1d(
    initial: &Corridor1dState,
    p: &Corridor1dParams,
) -> Result<Run1d, CorridorError> {
    if !(initial.pos[0] < 0.0 && initial.pos[1] < 0.0) {
        return Err(CorridorError::InvalidParams(
            "both agents must start before the intersection".into(),
        ));
    }
    integrate(initial, p, true, true)
}

/// Like [`simulate_1d`] but always runs to `t_max` and records every step.
pub fn trajectory_1d(
    initial: &Corridor1dState,
    p: &Corridor1dParams,
) -> Result<Vec<Corridor1dState>, CorridorError> {
    Ok(integrate(initial, p, true, false)?.trajectory)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquilibriumKind {
    Arc,
    Point,
    ArcPlusAxes,
    Curve1DIn4D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    Stable,
    Unstable,
    DegenerateZero,
}

impl fmt::Display for Stability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::DegenerateZero => "stable-degenerate",
        })
    }
}

const EIG_TOL: f64 = 1e-7;

pub fn classify(eigenvalues: &[Complex<f64>]) -> Stability {
    if eigenvalues.iter().any(|e| e.re > EIG_TOL) {
        Stability::Unstable
    } else if eigenvalues.iter().any(|e| e.norm() <= EIG_TOL) {
        Stability::DegenerateZero
    } else {
        Stability::Stable
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub jacobian: DMatrix<f64>,
    pub analytic: DMatrix<f64>,
    pub eigenvalues: Vec<Complex<f64>>,
}

impl Linearization {
    pub fn max_jacobian_mismatch(&self) -> f64 {
        (&self.jacobian - &self.analytic).amax()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub policy: Policy1d,
    pub kind: EquilibriumKind,
    pub points: Vec<Corridor1dState>,
    pub linearizations: Vec<Linearization>,
    pub stability: Stability,
}

impl EquilibriumReport {
    /// Eigenvalues at the first representative point, sorted by real part.
    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        let mut e = self.linearizations[0].eigenvalues.clone();
        e.sort_by(|a, b| b.re.total_cmp(&a.re));
        e
    }
}

/// Points on the arc `h = 0` with both agents before the intersection.
fn arc_points(r: f64, n: usize) -> Vec<Corridor1dState> {
    (0..n)
        .map(|k| {
            let theta = std::f64::consts::PI + FRAC_PI_2 * (k as f64 + 0.5) / n as f64;
            Corridor1dState::new(r * theta.cos(), r * theta.sin())
        })
        .collect()
}

/// The single equilibrium of the centralized field.
pub fn centralized_equilibrium(p: &Corridor1dParams) -> Corridor1dState {
    let n = p.v0[0].hypot(p.v0[1]);
    Corridor1dState::new(-p.v0[0] * p.r / n, -p.v0[1] * p.r / n)
}

/// Point of the PCCA equilibrium curve with position ratio `mu = x1 / x2`.
pub fn pcca_equilibrium(mu: f64, p: &Corridor1dParams) -> Corridor1dState {
    let x2 = -p.r / (1.0 + mu * mu).sqrt();
    let x1 = mu * x2;
    Corridor1dState::new(x1, x2).with_filter(x1 * p.v0[1] / x2, x2 * p.v0[0] / x1)
}

/// Analytic equilibrium sets with a linearization at each sample point.
/// Decentralized policies are analysed in their hard-constraint form.
pub fn equilibria(p: &Corridor1dParams) -> Result<EquilibriumReport, CorridorError> {
    p.validate()?;
    let p = Corridor1dParams {
        slack_weight: None,
        ..*p
    };
    let (kind, points) = match p.policy {
        Policy1d::DecentralizedFollower | Policy1d::DecentralizedReciprocal => {
            (EquilibriumKind::Arc, arc_points(p.r, 8))
        }
        Policy1d::Ccs => (EquilibriumKind::ArcPlusAxes, arc_points(p.r, 8)),
        Policy1d::Centralized => (EquilibriumKind::Point, vec![centralized_equilibrium(&p)]),
        Policy1d::Pcca => (
            EquilibriumKind::Curve1DIn4D,
            [1.0, 0.5, 0.7, 0.85, 1.2, 1.5, 2.0, 3.0]
                .iter()
                .map(|&mu| pcca_equilibrium(mu, &p))
                .collect(),
        ),
    };
    let linearizations = points
        .iter()
        .map(|pt| linearize(pt, &p))
        .collect::<Result<Vec<_>, _>>()?;
    let stability = linearizations
        .iter()
        .map(|l| classify(&l.eigenvalues))
        .max_by_key(|s| match s {
            Stability::Stable => 0,
            Stability::DegenerateZero => 1,
            Stability::Unstable => 2,
        })
        .unwrap_or(Stability::Stable);
    Ok(EquilibriumReport {
        policy: p.policy,
        kind,
        points,
        linearizations,
        stability,
    })
}

fn field_vector(v: &[f64], p: &Corridor1dParams) -> Result<Vec<f64>, CorridorError> {
    let f = closed_loop_field(&Corridor1dState::from_vector(v, 0.0), p)?;
    Ok(f[..v.len()].to_vec())
}

/// Central-difference Jacobian of the closed-loop field.
pub fn finite_difference_jacobian(
    point: &Corridor1dState,
    p: &Corridor1dParams,
) -> Result<DMatrix<f64>, CorridorError> {
    let dim = p.policy.state_dim();
    let x = point.vector(dim);
    let mut jac = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let step = 1e-6 * x[k].abs().max(1.0);
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[k] += step;
        minus[k] -= step;
        let fp = field_vector(&plus, p)?;
        let fm = field_vector(&minus, p)?;
        for i in 0..dim {
            jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Closed-form Jacobian of the both-active branch at an equilibrium.
pub fn analytic_jacobian(
    point: &Corridor1dState,
    p: &Corridor1dParams,
) -> Result<DMatrix<f64>, CorridorError> {
    let [x1, x2] = point.pos;
    let s2 = norm_sq_checked(&point.pos)?;
    let h = point.barrier(p.r);
    let l = p.lambda;
    let [v1, v2] = p.v0;
    Ok(match p.policy {
        Policy1d::DecentralizedFollower | Policy1d::DecentralizedReciprocal => {
            let a = p.policy.share() * l;
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    -a + a * h / (2.0 * x1 * x1),
                    -a * x2 / x1,
                    -a * x1 / x2,
                    -a + a * h / (2.0 * x2 * x2),
                ],
            )
        }
        Policy1d::Centralized => DMatrix::from_row_slice(
            2,
            2,
            &[
                (-l * x1 * x1 - x2 * v2) / s2,
                (-l * x1 * x2 + x2 * v1) / s2,
                (-l * x1 * x2 + x1 * v2) / s2,
                (-l * x2 * x2 - x1 * v1) / s2,
            ],
        ),
        Policy1d::Ccs => {
            let x = nalgebra::Vector2::new(x1, x2);
            let xxt = x * x.transpose();
            let j = -xxt * (l / s2) - nalgebra::Matrix2::identity() * (l * h / (2.0 * s2))
                + xxt * (l * h / (s2 * s2));
            DMatrix::from_iterator(2, 2, j.iter().copied())
        }
        Policy1d::Pcca => {
            let [w1, w2] = point.filter;
            let t = p.tau;
            let de = [v2 - w2, v1 - w1, -x2, -x1];
            let mut j = DMatrix::zeros(4, 4);
            j[(0, 0)] = (-l * x1 * x1 - w2 * x2) / s2;
            j[(0, 1)] = (-l * x1 * x2 + v1 * x2) / s2;
            j[(0, 3)] = -x1 * x2 / s2;
            j[(1, 0)] = (-l * x1 * x2 + v2 * x1) / s2;
            j[(1, 1)] = (-l * x2 * x2 - w1 * x1) / s2;
            j[(1, 2)] = -x1 * x2 / s2;
            for k in 0..4 {
                j[(2, k)] = x2 * de[k] / (t * s2);
                j[(3, k)] = x1 * de[k] / (t * s2);
            }
            j
        }
    })
}

/// Jacobians (finite-difference and closed-form) plus eigenvalues at an
/// equilibrium point.
pub fn linearize(
    point: &Corridor1dState,
    p: &Corridor1dParams,
) -> Result<Linearization, CorridorError> {
    let dim = p.policy.state_dim();
    let f = field_vector(&point.vector(dim), p)?;
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm >= 1e-8 {
        return Err(CorridorError::NotAnEquilibrium(norm));
    }
    let jacobian = finite_difference_jacobian(point, p)?;
    let analytic = analytic_jacobian(point, p)?;
    let eigenvalues = jacobian.complex_eigenvalues().iter().copied().collect();
    Ok(Linearization {
        jacobian,
        analytic,
        eigenvalues,
    })
}

/// Closed-form eigenvalues at the centralized equilibrium.
pub fn centralized_eigenvalues(p: &Corridor1dParams) -> [f64; 2] {
    [-p.lambda, p.v0[0].hypot(p.v0[1]) / p.r]
}

/// Closed-form eigenvalues at the PCCA equilibrium with ratio `mu`.
pub fn pcca_eigenvalues(mu: f64, p: &Corridor1dParams) -> [f64; 4] {
    let first = (p.v0[0] + mu.powi(3) * p.v0[1]) / (p.r * mu * (1.0 + mu * mu).sqrt());
    [first, -p.lambda, 0.0, -1.0 / p.tau]
}

/// Quantity conserved on the both-active branch: `x1^2 - x2^2` for the
/// decentralized and centralized fields, `ln(-x1) - ln(-x2)` for CCS.
pub fn invariant_value(policy: Policy1d, s: &Corridor1dState) -> Result<f64, CorridorError> {
    let [x1, x2] = s.pos;
    match policy {
        Policy1d::Ccs => Ok((-x1).ln() - (-x2).ln()),
        Policy1d::Pcca => Err(CorridorError::NoInvariant(policy)),
        _ => Ok(x1 * x1 - x2 * x2),
    }
}

/// Largest deviation of the invariant from its initial value.
pub fn conserved_quantity(
    traj: &[Corridor1dState],
    p: &Corridor1dParams,
) -> Result<f64, CorridorError> {
    let Some(first) = traj.first() else {
        return Ok(0.0);
    };
    let g0 = invariant_value(p.policy, first)?;
    let mut drift: f64 = 0.0;
    for s in traj {
        if active_branches(s, p) != [true, true]
            || (p.policy == Policy1d::Ccs && !(s.pos[0] < 0.0 && s.pos[1] < 0.0))
        {
            return Err(CorridorError::BranchViolation(s.t));
        }
        drift = drift.max((invariant_value(p.policy, s)? - g0).abs());
    }
    Ok(drift)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub x1_start: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub n_x2: usize,
    pub v02_min: f64,
    pub v02_max: f64,
    pub n_v02: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            x1_start: -10.0,
            x2_min: -11.0,
            x2_max: -8.0,
            n_x2: 301,
            v02_min: 1.0,
            v02_max: 3.0,
            n_v02: 201,
        }
    }
}

impl SweepGrid {
    fn axis(min: f64, max: f64, n: usize, k: usize) -> f64 {
        if n == 1 {
            min
        } else {
            min + (max - min) * k as f64 / (n - 1) as f64
        }
    }

    pub fn x2(&self, k: usize) -> f64 {
        Self::axis(self.x2_min, self.x2_max, self.n_x2, k)
    }

    pub fn v02(&self, k: usize) -> f64 {
        Self::axis(self.v02_min, self.v02_max, self.n_v02, k)
    }

    pub fn len(&self) -> usize {
        self.n_x2 * self.n_v02
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<(), CorridorError> {
        if self.n_x2 == 0 || self.n_v02 == 0 {
            return Err(CorridorError::InvalidParams(
                "sweep grid must be non-empty".into(),
            ));
        }
        if !(self.x1_start < 0.0 && self.x2_max < 0.0 && self.v02_min > 0.0) {
            return Err(CorridorError::InvalidParams(
                "sweep starts must lie before the intersection with positive speeds".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub policy: Policy1d,
    pub grid: SweepGrid,
    pub params: Corridor1dParams,
    /// Row-major over `(x2_0 index, v02 index)`.
    pub t_ext: Vec<f64>,
    pub gridlocked: Vec<bool>,
}

impl SweepResult {
    pub fn gridlock_fraction(&self) -> f64 {
        self.gridlocked.iter().filter(|&&g| g).count() as f64 / self.gridlocked.len() as f64
    }

    pub fn gridlock_count(&self) -> usize {
        self.gridlocked.iter().filter(|&&g| g).count()
    }

    /// Little-endian: `u32 rows, u32 cols, f64 x2_min, f64 x2_max, f64 v02_min,
    /// f64 v02_max`, then `rows * cols` row-major `f64` extra times.
    pub fn write_grid<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.grid.n_x2 as u32).to_le_bytes())?;
        w.write_all(&(self.grid.n_v02 as u32).to_le_bytes())?;
        for v in [
            self.grid.x2_min,
            self.grid.x2_max,
            self.grid.v02_min,
            self.grid.v02_max,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.t_ext {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x2_0,v02,t_ext,gridlocked")?;
        for i in 0..self.grid.n_x2 {
            for j in 0..self.grid.n_v02 {
                let k = i * self.grid.n_v02 + j;
                writeln!(
                    w,
                    "{},{},{},{}",
                    self.grid.x2(i),
                    self.grid.v02(j),
                    self.t_ext[k],
                    u8::from(self.gridlocked[k])
                )?;
            }
        }
        Ok(())
    }
}

/// Decoded binary grid file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub rows: usize,
    pub cols: usize,
    pub x2_range: (f64, f64),
    pub v02_range: (f64, f64),
    pub values: Vec<f64>,
}

pub fn read_grid(bytes: &[u8]) -> Result<GridFile, CorridorError> {
    let bad = || CorridorError::InvalidParams("truncated grid file".into());
    let u32_at = |o: usize| {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    let f64_at = |o: usize| {
        bytes
            .get(o..o + 8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    };
    let rows = u32_at(0).ok_or_else(bad)?;
    let cols = u32_at(4).ok_or_else(bad)?;
    let meta: Vec<f64> = (0..4)
        .map(|k| f64_at(8 + 8 * k))
        .collect::<Option<_>>()
        .ok_or_else(bad)?;
    let values: Vec<f64> = (0..rows * cols)
        .map(|k| f64_at(40 + 8 * k))
        .collect::<Option<_>>()
        .ok_or_else(bad)?;
    if bytes.len() != 40 + 8 * rows * cols {
        return Err(bad());
    }
    Ok(GridFile {
        rows,
        cols,
        x2_range: (meta[0], meta[1]),
        v02_range: (meta[2], meta[3]),
        values,
    })
}

/// Extra crossing time over the `(x2(0), v02)` grid with `x1(0)` and `v01`
/// fixed and the filter states starting at zero.
pub fn sweep(p: &Corridor1dParams, grid: &SweepGrid) -> Result<SweepResult, CorridorError> {
    p.validate()?;
    grid.validate()?;
    let cells: Vec<Run1d> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / grid.n_v02, k % grid.n_v02);
            let cell = Corridor1dParams {
                v0: [p.v0[0], grid.v02(j)],
                ..*p
            };
            integrate(
                &Corridor1dState::new(grid.x1_start, grid.x2(i)),
                &cell,
                false,
                true,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(SweepResult {
        policy: p.policy,
        grid: *grid,
        params: *p,
        t_ext: cells.iter().map(|c| c.t_ext).collect(),
        gridlocked: cells.iter().map(|c| c.gridlocked).collect(),
    })
}

/// Parameters used for the extra-time sweep of a policy: the decentralized
/// policies run with the given slack weight.
pub fn sweep_params(
    base: &Corridor1dParams,
    policy: Policy1d,
    slack_weight: f64,
) -> Corridor1dParams {
    Corridor1dParams {
        policy,
        slack_weight: policy.is_decentralized().then_some(slack_weight),
        ..*base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(policy: Policy1d) -> Corridor1dParams {
        Corridor1dParams {
            policy,
            ..Corridor1dParams::default()
        }
    }

    #[test]
    fn dr_speed_examples() {
        let p = params(Policy1d::DecentralizedReciprocal);
        assert_eq!(dr_velocity_1d(-10.0, -10.0, 2.0, &p).unwrap(), 2.0);
        let v = dr_velocity_1d(-3.0, -3.0, 2.0, &p).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-12);
        let x2 = (16.0f64 - 9.0).sqrt();
        assert!(dr_velocity_1d(-3.0, -x2, 2.0, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn df_doubles_bandwidth() {
        let df = params(Policy1d::DecentralizedFollower);
        let dr2 = Corridor1dParams {
            lambda: 2.0,
            ..params(Policy1d::DecentralizedReciprocal)
        };
        for (x, o) in [(-3.0, -3.0), (-2.0, -5.0), (-0.5, -3.9)] {
            assert_eq!(
                dr_velocity_1d(x, o, 2.0, &df).unwrap(),
                dr_velocity_1d(x, o, 2.0, &dr2).unwrap()
            );
        }
    }

    #[test]
    fn unslacked_singularity_reported() {
        let p = params(Policy1d::DecentralizedReciprocal);
        let s = Corridor1dState::new(0.0, -2.0);
        assert!(matches!(
            closed_loop_field(&s, &p),
            Err(CorridorError::SingularState(_))
        ));
        let slack = Corridor1dParams {
            slack_weight: Some(1e6),
            ..p
        };
        assert!(closed_loop_field(&s, &slack).is_ok());
        let c = params(Policy1d::Centralized);
        assert!(matches!(
            closed_loop_field(&Corridor1dState::new(0.0, 0.0), &c),
            Err(CorridorError::SingularState(_))
        ));
    }

    #[test]
    fn centralized_equilibrium_is_rest() {
        let p = params(Policy1d::Centralized);
        let e = Corridor1dState::new(
            -2.0 * std::f64::consts::SQRT_2,
            -2.0 * std::f64::consts::SQRT_2,
        );
        assert_eq!(
            centralized_equilibrium(&p).pos.map(|v| (v * 1e6).round()),
            e.pos.map(|v| (v * 1e6).round())
        );
        let f = closed_loop_field(&e, &p).unwrap();
        assert!(f[0].abs() < 1e-12 && f[1].abs() < 1e-12);
    }

    #[test]
    fn dr_barrier_rate() {
        let p = params(Policy1d::DecentralizedReciprocal);
        for (x1, x2) in [(-3.0, -4.0), (-2.0, -3.6), (-3.9, -1.0)] {
            let s = Corridor1dState::new(x1, x2);
            assert_eq!(active_branches(&s, &p), [true, true]);
            let f = closed_loop_field(&s, &p).unwrap();
            let hdot = 2.0 * x1 * f[0] + 2.0 * x2 * f[1];
            assert!((hdot + p.lambda * s.barrier(p.r)).abs() < 1e-12);
        }
    }

    #[test]
    fn ccs_field_is_radial() {
        let p = params(Policy1d::Ccs);
        let s = Corridor1dState::new(-3.0, -2.0);
        assert_eq!(active_branches(&s, &p), [true, true]);
        let f = closed_loop_field(&s, &p).unwrap();
        assert!((f[0] * s.pos[1] - f[1] * s.pos[0]).abs() < 1e-12);
    }

    #[test]
    fn pcca_both_active_matches_coupled_form() {
        let p = Corridor1dParams {
            v0: [2.0, 1.5],
            ..params(Policy1d::Pcca)
        };
        let s = Corridor1dState::new(-3.0, -2.5).with_filter(0.4, -0.3);
        assert_eq!(active_branches(&s, &p), [true, true]);
        let f = closed_loop_field(&s, &p).unwrap();
        let [x1, x2] = s.pos;
        let [w1, w2] = s.filter;
        let [a, b] = p.v0;
        let n = x1 * x1 + x2 * x2;
        let h = s.barrier(p.r);
        let l = p.lambda;
        let e = x2 * a + x1 * b - x2 * w1 - x1 * w2;
        let want = [
            -l * h * x1 / (2.0 * n) + (x2 * a - x1 * w2) * x2 / n,
            -l * h * x2 / (2.0 * n) - (x2 * w1 - x1 * b) * x1 / n,
            x2 * e / (n * p.tau),
            x1 * e / (n * p.tau),
        ];
        for k in 0..4 {
            assert!(
                (f[k] - want[k]).abs() < 1e-12,
                "{k}: {} vs {}",
                f[k],
                want[k]
            );
        }
    }

    #[test]
    fn pcca_equilibrium_example() {
        let p = params(Policy1d::Pcca);
        let e = pcca_equilibrium(1.0, &p);
        assert!((e.pos[0] + 2.828427).abs() < 1e-6 && (e.pos[1] + 2.828427).abs() < 1e-6);
        assert!((e.filter[0] - 2.0).abs() < 1e-12 && (e.filter[1] - 2.0).abs() < 1e-12);
        let f = closed_loop_field(&e, &p).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-12), "{f:?}");
    }

    #[test]
    fn eigenvalue_examples() {
        let c = equilibria(&params(Policy1d::Centralized)).unwrap();
        let e = c.eigenvalues();
        assert!(
            (e[0].re - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6
                && (e[1].re + 1.0).abs() < 1e-6
        );
        assert_eq!(c.stability, Stability::Unstable);

        let dr = equilibria(&params(Policy1d::DecentralizedReciprocal)).unwrap();
        assert_eq!(dr.kind, EquilibriumKind::Arc);
        assert_eq!(dr.stability, Stability::DegenerateZero);
        for l in &dr.linearizations {
            let mut e: Vec<f64> = l.eigenvalues.iter().map(|c| c.re).collect();
            e.sort_by(f64::total_cmp);
            assert!((e[0] + 1.0).abs() < 1e-6 && e[1].abs() < 1e-6, "{e:?}");
        }

        let pc = equilibria(&params(Policy1d::Pcca)).unwrap();
        let mut e: Vec<f64> = pc.linearizations[0]
            .eigenvalues
            .iter()
            .map(|c| c.re)
            .collect();
        e.sort_by(|a, b| b.total_cmp(a));
        let want = [std::f64::consts::FRAC_1_SQRT_2, 0.0, -1.0, -5.0];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{e:?}");
        }
        assert_eq!(pc.stability, Stability::Unstable);
    }

    #[test]
    fn linearize_rejects_non_equilibrium() {
        let p = params(Policy1d::Centralized);
        assert!(matches!(
            linearize(&Corridor1dState::new(-5.0, -6.0), &p),
            Err(CorridorError::NotAnEquilibrium(_))
        ));
    }

    #[test]
    fn unimpeded_agent_has_no_extra_time() {
        let p = params(Policy1d::Centralized);
        let run = simulate_1d(
            &Corridor1dState::new(-10.0, -1e6),
            &Corridor1dParams { t_max: 20.0, ..p },
        )
        .unwrap();
        assert!(run.extra_time[0].abs() < 1e-9, "{:?}", run.extra_time);
        assert!(run.clear_time[1].is_none());
    }

    #[test]
    fn symmetric_dr_start_gridlocks() {
        let p = Corridor1dParams {
            slack_weight: Some(1e6),
            ..params(Policy1d::DecentralizedReciprocal)
        };
        let run = simulate_1d(&Corridor1dState::new(-10.0, -10.0), &p).unwrap();
        assert!(run.gridlocked);
        assert!((run.extra_time[0] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn grid_file_round_trip() {
        let grid = SweepGrid {
            n_x2: 4,
            n_v02: 3,
            ..SweepGrid::default()
        };
        let r = sweep(&params(Policy1d::Centralized), &grid).unwrap();
        let mut bytes = Vec::new();
        r.write_grid(&mut bytes).unwrap();
        let g = read_grid(&bytes).unwrap();
        assert_eq!((g.rows, g.cols), (4, 3));
        assert_eq!(g.values, r.t_ext);
        assert_eq!(g.x2_range, (-11.0, -8.0));
        assert!(read_grid(&bytes[..bytes.len() - 1]).is_err());
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("x2_0,v02,t_ext,gridlocked\n-11,1,"));
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn grid_axes_hit_exact_midpoints() {
        let g = SweepGrid::default();
        assert_eq!(g.x2(100), -10.0);
        assert_eq!(g.v02(100), 2.0);
        assert_eq!(g.x2(300), -8.0);
    }
}
