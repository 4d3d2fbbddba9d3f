//! Double-integrator agents, distance barriers and the LQR baseline.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::ConstraintRow;

pub type Vec2 = Vector2<f64>;

/// Default weight on the squared slack of arena rows.
pub const DEFAULT_ARENA_WEIGHT: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("agents {0} and {1} are coincident")]
    CoincidentAgents(usize, usize),
    #[error("LQR weights must be positive (q = {q}, r = {r})")]
    NonPositiveWeights { q: f64, r: f64 },
    #[error("invalid barrier parameters: {0}")]
    InvalidBarrier(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: Vec2,
    pub vel: Vec2,
}

impl AgentState {
    pub fn new(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        Self {
            pos: Vec2::new(px, py),
            vel: Vec2::new(vx, vy),
        }
    }

    pub fn at_rest(pos: Vec2) -> Self {
        Self {
            pos,
            vel: Vec2::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos
            .iter()
            .chain(self.vel.iter())
            .all(|v| v.is_finite())
    }
}

/// Gains of the second-order barrier `hddot + l1 hdot + l0 h >= 0`, with the
/// protected center-to-center distance `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierParams {
    r: f64,
    l0: f64,
    l1: f64,
    lambda1: f64,
    lambda2: f64,
}

impl BarrierParams {
    pub fn new(r: f64, l0: f64, l1: f64) -> Result<Self, ModelError> {
        if !(r.is_finite() && r >= 0.0) {
            return Err(ModelError::InvalidBarrier(format!(
                "radius {r} must be non-negative"
            )));
        }
        if !(l0 > 0.0 && l1 > 0.0) {
            return Err(ModelError::InvalidBarrier(format!(
                "l0 = {l0}, l1 = {l1} must be positive"
            )));
        }
        let disc = l1 * l1 - 4.0 * l0;
        if disc < 0.0 {
            return Err(ModelError::InvalidBarrier(format!(
                "l1^2 >= 4 l0 required for real roots (l0 = {l0}, l1 = {l1})"
            )));
        }
        let root = disc.sqrt();
        Ok(Self {
            r,
            l0,
            l1,
            lambda1: 0.5 * (l1 + root),
            lambda2: 0.5 * (l1 - root),
        })
    }

    pub fn with_radius(self, r: f64) -> Result<Self, ModelError> {
        Self::new(r, self.l0, self.l1)
    }

    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn l0(&self) -> f64 {
        self.l0
    }
    pub fn l1(&self) -> f64 {
        self.l1
    }
    /// Larger root magnitude of `s^2 + l1 s + l0`.
    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }
    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }
}

/// Terms of `F_ij = a + b . (u_i - u_j) >= 0` for one ordered pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConstraintTerms {
    pub a: f64,
    pub b: Vec2,
    pub h: f64,
    pub hdot: f64,
}

impl PairConstraintTerms {
    /// Realized barrier margin for the given pair of controls.
    pub fn margin(&self, ui: &Vec2, uj: &Vec2) -> f64 {
        self.a + self.b.dot(&(ui - uj))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqrGain {
    pub kp: f64,
    pub kv: f64,
}

/// Exact zero-order-hold step of the double integrator.
pub fn step_agent(s: &AgentState, u: &Vec2, dt: f64) -> Result<AgentState, ModelError> {
    if !(dt > 0.0 && dt.is_finite()) || !s.is_finite() || !u.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    Ok(AgentState {
        pos: s.pos + s.vel * dt + u * (0.5 * dt * dt),
        vel: s.vel + u * dt,
    })
}

pub fn pair_constraint(
    si: &AgentState,
    sj: &AgentState,
    bp: &BarrierParams,
) -> Result<PairConstraintTerms, ModelError> {
    if !si.is_finite() || !sj.is_finite() {
        return Err(ModelError::NonFiniteInput);
    }
    let xi = si.pos - sj.pos;
    if xi.norm() < 1e-9 {
        return Err(ModelError::CoincidentAgents(0, 1));
    }
    let v = si.vel - sj.vel;
    let h = xi.norm_squared() - bp.r * bp.r;
    let hdot = 2.0 * xi.dot(&v);
    let a = 2.0 * v.norm_squared() + bp.l1 * hdot + bp.l0 * h;
    Ok(PairConstraintTerms {
        a,
        b: 2.0 * xi,
        h,
        hdot,
    })
}

/// Offset and gradient of the arena barrier `h_w = (R0 - r0)^2 - |pos|^2`
/// for the agent's own acceleration.
pub fn arena_terms(
    s: &AgentState,
    arena_radius: f64,
    agent_radius: f64,
    bp: &BarrierParams,
) -> (f64, Vec2) {
    let rin = arena_radius - agent_radius;
    let h = rin * rin - s.pos.norm_squared();
    let hdot = -2.0 * s.pos.dot(&s.vel);
    // hddot = -2 |v|^2 - 2 pos . u
    let offset = -2.0 * s.vel.norm_squared() + bp.l1 * hdot + bp.l0 * h;
    (offset, -2.0 * s.pos)
}

/// Soft arena row over a single agent's 2-vector acceleration.
pub fn arena_constraint(
    s: &AgentState,
    arena_radius: f64,
    agent_radius: f64,
    bp: &BarrierParams,
    slack_weight: f64,
) -> ConstraintRow {
    let (offset, g) = arena_terms(s, arena_radius, agent_radius, bp);
    ConstraintRow::soft(
        offset,
        DVector::from_column_slice(g.as_slice()),
        slack_weight,
    )
}

/// Per-axis LQR gain for the double integrator with `Q = q I`, `R = r I`,
/// from the closed-form solution of the continuous algebraic Riccati equation.
pub fn lqr_gain(q: f64, r: f64) -> Result<LqrGain, ModelError> {
    if !(q > 0.0 && r > 0.0) || !q.is_finite() || !r.is_finite() {
        return Err(ModelError::NonPositiveWeights { q, r });
    }
    let p12 = (q * r).sqrt();
    let p22 = (r * (2.0 * p12 + q)).sqrt();
    Ok(LqrGain {
        kp: p12 / r,
        kv: p22 / r,
    })
}

pub fn baseline_control(s: &AgentState, goal: &Vec2, g: &LqrGain, accel_cap: Option<f64>) -> Vec2 {
    let u = -(s.pos - goal) * g.kp - s.vel * g.kv;
    match accel_cap {
        Some(cap) if u.norm() > cap => u * (cap / u.norm()),
        _ => u,
    }
}
