//! Fixed-step closed-loop simulation of a team of agents under one policy.

use std::collections::VecDeque;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    lqr_gain, pair_constraint, step_agent, AgentState, BarrierParams, ModelError, Vec2,
};
use crate::montecarlo::Scenario;
use crate::policies::{Arena, PolicyError, PolicyRunner, PolicySpec, Scene};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub t_max: f64,
    pub l0: f64,
    pub l1: f64,
    /// Added to the pair radius `2 r0` inside the constraints only.
    pub radius_margin: f64,
    pub arena_radius: f64,
    pub agent_radius: f64,
    pub arena_weight: f64,
    pub conv_pos_tol: f64,
    pub conv_vel_tol: f64,
    pub lqr_q: f64,
    pub lqr_r: f64,
    pub accel_cap: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            t_max: 100.0,
            l0: 6.0,
            l1: 5.0,
            radius_margin: 0.0,
            arena_radius: 11.0,
            agent_radius: 2.0,
            arena_weight: crate::model::DEFAULT_ARENA_WEIGHT,
            conv_pos_tol: 0.1,
            conv_vel_tol: 0.1,
            lqr_q: 0.2,
            lqr_r: 1.0,
            accel_cap: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad =
            |key: &str, v: f64| SimError::InvalidConfig(format!("`{key}` = {v} is out of range"));
        let positive = [
            ("dt", self.dt),
            ("t_max", self.t_max),
            ("agent_radius", self.agent_radius),
            ("arena_radius", self.arena_radius),
            ("arena_weight", self.arena_weight),
            ("conv_pos_tol", self.conv_pos_tol),
            ("conv_vel_tol", self.conv_vel_tol),
            ("lqr_q", self.lqr_q),
            ("lqr_r", self.lqr_r),
            ("l0", self.l0),
            ("l1", self.l1),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, v));
            }
        }
        if !(self.radius_margin >= 0.0 && self.radius_margin.is_finite()) {
            return Err(bad("radius_margin", self.radius_margin));
        }
        if self.t_max < self.dt {
            return Err(bad("t_max", self.t_max));
        }
        if self.arena_radius <= self.agent_radius {
            return Err(bad("arena_radius", self.arena_radius));
        }
        if let Some(cap) = self.accel_cap {
            if !(cap > 0.0) {
                return Err(bad("accel_cap", cap));
            }
        }
        self.barrier()?;
        Ok(())
    }

    /// Pair radius `2 r0` plus the margin.
    pub fn constraint_radius(&self) -> f64 {
        2.0 * self.agent_radius + self.radius_margin
    }

    pub fn barrier(&self) -> Result<BarrierParams, SimError> {
        BarrierParams::new(self.constraint_radius(), self.l0, self.l1)
            .map_err(|e| SimError::InvalidConfig(format!("`l0`/`l1`: {e}")))
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt).round() as usize
    }

    fn arena(&self) -> Arena {
        Arena {
            radius: self.arena_radius,
            agent_radius: self.agent_radius,
            slack_weight: self.arena_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub converged: bool,
    pub convergence_time: Option<f64>,
    /// Minimum of `|xi_ij|^2 - (2 r0)^2`; `None` for single-agent trials.
    pub h_min: Option<f64>,
    pub gridlocked: bool,
    pub any_infeasible: bool,
    pub infeasible_steps: usize,
    pub steps: usize,
}

pub fn convergence_check(states: &[AgentState], goals: &[Vec2], cfg: &SimConfig) -> bool {
    assert_eq!(
        states.len(),
        goals.len(),
        "states and goals differ in length"
    );
    states
        .iter()
        .zip(goals)
        .all(|(s, g)| (s.pos - g).norm() < cfg.conv_pos_tol && s.vel.norm() < cfg.conv_vel_tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub agent: usize,
    pub state: AgentState,
    pub control: Vec2,
    pub feasible: bool,
}

/// Bounded per-step record; the oldest rows are dropped once full.
#[derive(Debug, Clone)]
pub struct Trace {
    rows: VecDeque<TraceRow>,
    capacity: usize,
}

impl Trace {
    pub fn new(capacity: usize) -> Self {
        Self {
            rows: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, row: TraceRow) {
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,agent,px,py,vx,vy,ux,uy,feasible")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                r.agent,
                r.state.pos.x,
                r.state.pos.y,
                r.state.vel.x,
                r.state.vel.y,
                r.control.x,
                r.control.y,
                u8::from(r.feasible)
            )?;
        }
        Ok(())
    }
}

fn physical_h_min(states: &[AgentState], r: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let h = (states[i].pos - states[j].pos).norm_squared() - r * r;
            best = Some(best.map_or(h, |b: f64| b.min(h)));
        }
    }
    best
}

fn check_scenario(sc: &Scenario) -> Result<(), SimError> {
    if sc.starts.is_empty() || sc.starts.len() != sc.goals.len() || sc.starts.len() != sc.n_agents {
        return Err(SimError::InvalidScenario(format!(
            "{} agents, {} starts, {} goals",
            sc.n_agents,
            sc.starts.len(),
            sc.goals.len()
        )));
    }
    if sc
        .starts
        .iter()
        .chain(&sc.goals)
        .any(|p| !p.iter().all(|v| v.is_finite()))
    {
        return Err(SimError::InvalidScenario("non-finite start or goal".into()));
    }
    Ok(())
}

pub fn run_trial(
    sc: &Scenario,
    policy: PolicySpec,
    cfg: &SimConfig,
) -> Result<TrialMetrics, SimError> {
    run_trial_traced(sc, policy, cfg, None)
}

/// Synchronous loop: baselines, policy step, exact ZOH update, metrics.
/// The run stops at the first step where every agent has converged.
pub fn run_trial_traced(
    sc: &Scenario,
    policy: PolicySpec,
    cfg: &SimConfig,
    mut trace: Option<&mut Trace>,
) -> Result<TrialMetrics, SimError> {
    cfg.validate()?;
    check_scenario(sc)?;
    let bp = cfg.barrier()?;
    let gains = lqr_gain(cfg.lqr_q, cfg.lqr_r)?;
    let n = sc.n_agents;
    let mut runner = PolicyRunner::new(policy, n)?;
    let mut states: Vec<AgentState> = sc.starts.iter().map(|p| AgentState::at_rest(*p)).collect();
    let mut observed = vec![Vec2::zeros(); n];
    let physical_r = 2.0 * cfg.agent_radius;
    let mut h_min = physical_h_min(&states, physical_r);
    let mut metrics = TrialMetrics {
        converged: false,
        convergence_time: None,
        h_min,
        gridlocked: false,
        any_infeasible: false,
        infeasible_steps: 0,
        steps: 0,
    };
    if convergence_check(&states, &sc.goals, cfg) {
        metrics.converged = true;
        metrics.convergence_time = Some(0.0);
        return Ok(metrics);
    }

    for k in 0..cfg.n_steps() {
        let t = k as f64 * cfg.dt;
        let scene = Scene {
            states: &states,
            goals: &sc.goals,
            gains,
            bp,
            arena: Some(cfg.arena()),
            accel_cap: cfg.accel_cap,
        };
        let out = runner.step(&scene, &observed, cfg.dt)?;
        if !out.all_feasible() {
            metrics.any_infeasible = true;
            metrics.infeasible_steps += 1;
        }
        if let Some(tr) = trace.as_deref_mut() {
            for (i, s) in states.iter().enumerate() {
                tr.push(TraceRow {
                    t,
                    agent: i,
                    state: *s,
                    control: out.controls[i],
                    feasible: out.feasible[i],
                });
            }
        }
        for (s, u) in states.iter_mut().zip(&out.controls) {
            *s = step_agent(s, u, cfg.dt)?;
        }
        for i in 0..n {
            for j in i + 1..n {
                // surfaces coincident agents with their indices
                pair_constraint(&states[i], &states[j], &bp)
                    .map_err(|_| ModelError::CoincidentAgents(i, j))?;
            }
        }
        observed = out.controls;
        if let Some(h) = physical_h_min(&states, physical_r) {
            h_min = Some(h_min.map_or(h, |b| b.min(h)));
        }
        metrics.steps = k + 1;
        if convergence_check(&states, &sc.goals, cfg) {
            metrics.converged = true;
            metrics.convergence_time = Some((k + 1) as f64 * cfg.dt);
            break;
        }
    }
    metrics.h_min = h_min;
    metrics.gridlocked = !metrics.converged;
    Ok(metrics)
}
