//! The five collision-avoidance controllers.
//!
//! Every policy turns the same local geometry (pairwise barrier terms and the
//! agents' LQR baselines) into one or more QPs:
//!
//! - `Centralized`: one QP over all agents' accelerations.
//! - `DF` / `DR`: one 2-variable QP per host, which takes full / half of every
//!   pairwise constraint with its own acceleration only.
//! - `CCS`: per host, a QP over everyone's virtual accelerations with unknown
//!   baselines set to zero and the host baseline scaled by `rho`.
//! - `PCCA`: like CCS without `rho`, plus a fed-back estimate `w_hat` of the
//!   gap between the virtual and observed accelerations of the other agents.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Rotation2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    arena_terms, baseline_control, pair_constraint, AgentState, BarrierParams, LqrGain, ModelError,
    PairConstraintTerms, Vec2,
};
use crate::qp::{self, ConstraintRow, QpError, QpProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("state is outside the admissible set (pair {0}, {1})")]
    NotInAdmissibleSet(usize, usize),
    #[error("input length mismatch: {0}")]
    Length(String),
    #[error("invalid policy: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoopBreaker {
    UnitDelay,
    LowPassFilter { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Centralized,
    DecentralizedFollower,
    DecentralizedReciprocal,
    Ccs { rho: f64 },
    Pcca { loop_breaker: LoopBreaker },
}

impl PolicySpec {
    pub fn validate(&self) -> Result<(), PolicyError> {
        match *self {
            PolicySpec::Ccs { rho } if !(rho > 0.0) => Err(PolicyError::InvalidSpec(format!(
                "rho must be positive, got {rho}"
            ))),
            PolicySpec::Pcca {
                loop_breaker: LoopBreaker::LowPassFilter { tau },
            } if !(tau > 0.0) => Err(PolicyError::InvalidSpec(format!(
                "tau must be positive, got {tau}"
            ))),
            _ => Ok(()),
        }
    }

    /// The six variants compared in the Monte-Carlo study.
    pub fn study_set() -> Vec<PolicySpec> {
        vec![
            PolicySpec::Centralized,
            PolicySpec::DecentralizedFollower,
            PolicySpec::DecentralizedReciprocal,
            PolicySpec::Ccs { rho: 2.0 },
            PolicySpec::Pcca {
                loop_breaker: LoopBreaker::UnitDelay,
            },
            PolicySpec::Pcca {
                loop_breaker: LoopBreaker::LowPassFilter { tau: 0.2 },
            },
        ]
    }
}

/// Short labels: `Centralized`, `DF`, `DR`, `CCS_2`, `PCCA`, `PCCA_0.2`.
impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Centralized => write!(f, "Centralized"),
            PolicySpec::DecentralizedFollower => write!(f, "DF"),
            PolicySpec::DecentralizedReciprocal => write!(f, "DR"),
            PolicySpec::Ccs { rho } => write!(f, "CCS_{rho}"),
            PolicySpec::Pcca {
                loop_breaker: LoopBreaker::UnitDelay,
            } => write!(f, "PCCA"),
            PolicySpec::Pcca {
                loop_breaker: LoopBreaker::LowPassFilter { tau },
            } => write!(f, "PCCA_{tau}"),
        }
    }
}

/// Parses the labels produced by `Display`, case-insensitively. `CCS` alone
/// means `rho = 2`.
impl FromStr for PolicySpec {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once('_') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let num = |a: &str| {
            a.parse::<f64>()
                .map_err(|_| PolicyError::InvalidSpec(format!("bad parameter in `{s}`")))
        };
        let spec = match (name, arg) {
            ("centralized", None) => PolicySpec::Centralized,
            ("df", None) => PolicySpec::DecentralizedFollower,
            ("dr", None) => PolicySpec::DecentralizedReciprocal,
            ("ccs", None) => PolicySpec::Ccs { rho: 2.0 },
            ("ccs", Some(a)) => PolicySpec::Ccs { rho: num(a)? },
            ("pcca", None) => PolicySpec::Pcca {
                loop_breaker: LoopBreaker::UnitDelay,
            },
            ("pcca", Some(a)) => PolicySpec::Pcca {
                loop_breaker: LoopBreaker::LowPassFilter { tau: num(a)? },
            },
            _ => return Err(PolicyError::InvalidSpec(format!("unknown policy `{s}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Static circular boundary enforced through soft rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub radius: f64,
    pub agent_radius: f64,
    pub slack_weight: f64,
}

/// Everything a policy needs at one sampling instant.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub states: &'a [AgentState],
    pub goals: &'a [Vec2],
    pub gains: LqrGain,
    pub bp: BarrierParams,
    pub arena: Option<Arena>,
    pub accel_cap: Option<f64>,
}

impl Scene<'_> {
    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    pub fn baseline(&self) -> Vec<Vec2> {
        self.states
            .iter()
            .zip(self.goals)
            .map(|(s, g)| baseline_control(s, g, &self.gains, self.accel_cap))
            .collect()
    }

    fn check(&self) -> Result<(), PolicyError> {
        if self.states.is_empty() || self.states.len() != self.goals.len() {
            return Err(PolicyError::Length(format!(
                "{} states, {} goals",
                self.states.len(),
                self.goals.len()
            )));
        }
        Ok(())
    }

    /// Arena offset and gradient for agent `i`, if an arena is configured.
    fn arena_row(&self, i: usize) -> Option<(f64, Vec2, f64)> {
        self.arena.map(|a| {
            let (o, g) = arena_terms(&self.states[i], a.radius, a.agent_radius, &self.bp);
            (o, g, a.slack_weight)
        })
    }
}

/// Pairwise barrier terms for all unordered pairs.
#[derive(Debug, Clone)]
pub struct PairTable {
    n: usize,
    terms: Vec<PairConstraintTerms>,
}

impl PairTable {
    pub fn new(states: &[AgentState], bp: &BarrierParams) -> Result<Self, ModelError> {
        let n = states.len();
        let mut terms = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let t = pair_constraint(&states[i], &states[j], bp).map_err(|e| match e {
                    ModelError::CoincidentAgents(..) => ModelError::CoincidentAgents(i, j),
                    e => e,
                })?;
                terms.push(t);
            }
        }
        Ok(Self { n, terms })
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    /// Terms oriented from `i` to `j`: `b` multiplies `u_i - u_j`.
    pub fn get(&self, i: usize, j: usize) -> PairConstraintTerms {
        if i < j {
            self.terms[self.index(i, j)]
        } else {
            let mut t = self.terms[self.index(j, i)];
            t.b = -t.b;
            t
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| (i + 1..self.n).map(move |j| (i, j)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMargin {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStepOutput {
    pub controls: Vec<Vec2>,
    pub feasible: Vec<bool>,
    /// Realized `F_ij` under the applied controls, for `i < j`.
    pub constraint_margins: Vec<PairMargin>,
}

impl PolicyStepOutput {
    fn new(controls: Vec<Vec2>, feasible: Vec<bool>, pairs: &PairTable) -> Self {
        let constraint_margins = pairs
            .pairs()
            .map(|(i, j)| PairMargin {
                i,
                j,
                value: pairs.get(i, j).margin(&controls[i], &controls[j]),
            })
            .collect();
        Self {
            controls,
            feasible,
            constraint_margins,
        }
    }

    pub fn all_feasible(&self) -> bool {
        self.feasible.iter().all(|&f| f)
    }

    pub fn margin(&self, i: usize, j: usize) -> Option<f64> {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.constraint_margins
            .iter()
            .find(|m| m.i == i && m.j == j)
            .map(|m| m.value)
    }

    pub fn min_margin(&self) -> Option<f64> {
        self.constraint_margins
            .iter()
            .map(|m| m.value)
            .reduce(f64::min)
    }
}

/// Row over the stacked `2n` vector with the given 2-blocks.
fn stacked_row(n: usize, offset: f64, blocks: &[(usize, Vec2)]) -> (f64, DVector<f64>) {
    let mut g = DVector::zeros(2 * n);
    for (k, b) in blocks {
        g[2 * k] += b.x;
        g[2 * k + 1] += b.y;
    }
    (offset, g)
}

fn stack(vs: &[Vec2]) -> DVector<f64> {
    DVector::from_iterator(2 * vs.len(), vs.iter().flat_map(|v| [v.x, v.y]))
}

fn block(u: &DVector<f64>, k: usize) -> Vec2 {
    Vec2::new(u[2 * k], u[2 * k + 1])
}

/// One QP over every agent's acceleration: `min sum |u_i - u0_i|^2` subject
/// to `a_ij + b_ij (u_i - u_j) >= 0` for all pairs.
pub fn centralized_step(scene: &Scene) -> Result<PolicyStepOutput, PolicyError> {
    scene.check()?;
    let n = scene.n_agents();
    let pairs = PairTable::new(scene.states, &scene.bp)?;
    let u0 = scene.baseline();
    let mut p = QpProblem::least_distance(&stack(&u0));
    for (i, j) in pairs.pairs() {
        let t = pairs.get(i, j);
        let (o, g) = stacked_row(n, t.a, &[(i, t.b), (j, -t.b)]);
        p.push(ConstraintRow::hard(o, g));
    }
    for i in 0..n {
        if let Some((o, g, w)) = scene.arena_row(i) {
            let (o, g) = stacked_row(n, o, &[(i, g)]);
            p.push(ConstraintRow::soft(o, g, w));
        }
    }
    let sol = qp::solve(&p)?;
    let controls = (0..n).map(|i| block(&sol.u, i)).collect();
    Ok(PolicyStepOutput::new(
        controls,
        vec![sol.feasible; n],
        &pairs,
    ))
}

/// Per-host QP with the host's own acceleration only; `share` is the
/// fraction of `a_ij` the host takes responsibility for.
fn decentralized_step(scene: &Scene, share: f64) -> Result<PolicyStepOutput, PolicyError> {
    scene.check()?;
    let n = scene.n_agents();
    let pairs = PairTable::new(scene.states, &scene.bp)?;
    let u0 = scene.baseline();
    let mut controls = Vec::with_capacity(n);
    let mut feasible = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = QpProblem::least_distance(&stack(&u0[i..=i]));
        for j in (0..n).filter(|&j| j != i) {
            let t = pairs.get(i, j);
            let (o, g) = stacked_row(1, share * t.a, &[(0, t.b)]);
            p.push(ConstraintRow::hard(o, g));
        }
        if let Some((o, g, w)) = scene.arena_row(i) {
            let (o, g) = stacked_row(1, o, &[(0, g)]);
            p.push(ConstraintRow::soft(o, g, w));
        }
        let sol = qp::solve(&p)?;
        controls.push(block(&sol.u, 0));
        feasible.push(sol.feasible);
    }
    Ok(PolicyStepOutput::new(controls, feasible, &pairs))
}

/// Decentralized Follower: `a_ij + b_ij u_i >= 0`.
pub fn df_step(scene: &Scene) -> Result<PolicyStepOutput, PolicyError> {
    decentralized_step(scene, 1.0)
}

/// Decentralized Reciprocal: `a_ij / 2 + b_ij u_i >= 0`.
pub fn dr_step(scene: &Scene) -> Result<PolicyStepOutput, PolicyError> {
    decentralized_step(scene, 0.5)
}

/// Builds host `i`'s co-optimization QP over the stacked virtual controls
/// `u_i1 .. u_in`.
///
/// `host_shift` is added to the host's block inside every host row and arena
/// row; `others_shift[j]` is added to block `j` inside rows involving agent `j`.
fn cooperative_qp(
    scene: &Scene,
    pairs: &PairTable,
    host: usize,
    objective_target: &[Vec2],
    host_shift: Vec2,
    others_shift: &[Vec2],
) -> QpProblem {
    let n = scene.n_agents();
    let shift = |k: usize| {
        if k == host {
            host_shift
        } else {
            others_shift[k]
        }
    };
    let mut p = QpProblem::least_distance(&stack(objective_target));
    for j in (0..n).filter(|&j| j != host) {
        let t = pairs.get(host, j);
        let offset = t.a + t.b.dot(&(shift(host) - shift(j)));
        let (o, g) = stacked_row(n, offset, &[(host, t.b), (j, -t.b)]);
        p.push(ConstraintRow::hard(o, g));
    }
    for (j, k) in pairs.pairs().filter(|&(j, k)| j != host && k != host) {
        let t = pairs.get(j, k);
        let offset = t.a + t.b.dot(&(shift(j) - shift(k)));
        let (o, g) = stacked_row(n, offset, &[(j, t.b), (k, -t.b)]);
        p.push(ConstraintRow::hard(o, g));
    }
    for k in 0..n {
        if let Some((o, g, w)) = scene.arena_row(k) {
            let (o, g) = stacked_row(n, o + g.dot(&shift(k)), &[(k, g)]);
            p.push(ConstraintRow::soft(o, g, w));
        }
    }
    p
}

/// Complete Control Set. The host solves for deviations from its baseline
/// and zero-baseline virtual controls for everyone else; host rows carry
/// `rho b_ij u0_i`. The applied control is `u_ii* + u0_i`.
pub fn ccs_step(scene: &Scene, rho: f64) -> Result<PolicyStepOutput, PolicyError> {
    scene.check()?;
    if !(rho > 0.0) {
        return Err(PolicyError::InvalidSpec(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let n = scene.n_agents();
    let pairs = PairTable::new(scene.states, &scene.bp)?;
    let u0 = scene.baseline();
    let zeros = vec![Vec2::zeros(); n];
    let mut controls = Vec::with_capacity(n);
    let mut feasible = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = cooperative_qp(scene, &pairs, i, &zeros, u0[i] * rho, &zeros);
        // the arena sees the host's true acceleration, not the rho-scaled one
        if scene.arena.is_some() {
            let n_pairs = p.rows.len() - n;
            let arena_row = &mut p.rows[n_pairs + i];
            let g = Vec2::new(arena_row.gradient[2 * i], arena_row.gradient[2 * i + 1]);
            arena_row.offset -= g.dot(&(u0[i] * (rho - 1.0)));
        }
        let sol = qp::solve(&p)?;
        controls.push(block(&sol.u, i) + u0[i]);
        feasible.push(sol.feasible);
    }
    Ok(PolicyStepOutput::new(controls, feasible, &pairs))
}

/// Per-host state of the PCCA disturbance estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct PccaMemory {
    /// `w_hat[i][j]`: host `i`'s estimate of the gap between agent `j`'s
    /// applied acceleration and host `i`'s virtual one. Zero on the diagonal.
    pub w_hat: Vec<Vec<Vec2>>,
    /// Virtual controls `u*_ij` from the previous step; `None` before the first.
    pub u_prev: Option<Vec<Vec<Vec2>>>,
}

impl PccaMemory {
    pub fn new(n: usize) -> Self {
        Self {
            w_hat: vec![vec![Vec2::zeros(); n]; n],
            u_prev: None,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.w_hat.len()
    }

    /// Folds last step's observed accelerations into `w_hat`.
    fn correct(&mut self, observed: &[Vec2], breaker: LoopBreaker, dt: f64) {
        let Some(prev) = &self.u_prev else { return };
        let gain = match breaker {
            LoopBreaker::UnitDelay => 1.0,
            LoopBreaker::LowPassFilter { tau } => 1.0 - (-dt / tau).exp(),
        };
        let n = self.n_agents();
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let innovation = observed[j] - prev[i][j] - self.w_hat[i][j];
                self.w_hat[i][j] += innovation * gain;
            }
        }
    }

    pub fn rotated(&self, rot: &Rotation2<f64>) -> Self {
        let r = |m: &Vec<Vec<Vec2>>| {
            m.iter()
                .map(|row| row.iter().map(|v| rot * v).collect())
                .collect()
        };
        Self {
            w_hat: r(&self.w_hat),
            u_prev: self.u_prev.as_ref().map(r),
        }
    }
}

/// Predictor-Corrector for Collision Avoidance.
///
/// `observed` are the accelerations every agent applied at the previous
/// step. They are first folded into the estimate `w_hat_ij = u_j - u*_ij`
/// (unit delay, or a first-order filter with exact discretization), then each
/// host solves its co-optimization QP and applies `u_ii*`.
pub fn pcca_step(
    scene: &Scene,
    mem: &PccaMemory,
    observed: &[Vec2],
    breaker: LoopBreaker,
    dt: f64,
) -> Result<(PolicyStepOutput, PccaMemory), PolicyError> {
    scene.check()?;
    let n = scene.n_agents();
    if mem.n_agents() != n || observed.len() != n {
        return Err(PolicyError::Length(format!(
            "{n} agents, memory for {}, {} observed accelerations",
            mem.n_agents(),
            observed.len()
        )));
    }
    if let LoopBreaker::LowPassFilter { tau } = breaker {
        if !(tau > 0.0 && dt > 0.0) {
            return Err(PolicyError::InvalidSpec(format!("tau = {tau}, dt = {dt}")));
        }
    }
    let pairs = PairTable::new(scene.states, &scene.bp)?;
    let u0 = scene.baseline();
    let mut next = mem.clone();
    next.correct(observed, breaker, dt);

    let mut controls = Vec::with_capacity(n);
    let mut feasible = Vec::with_capacity(n);
    let mut virtuals = Vec::with_capacity(n);
    for i in 0..n {
        let mut target = vec![Vec2::zeros(); n];
        target[i] = u0[i];
        let p = cooperative_qp(scene, &pairs, i, &target, Vec2::zeros(), &next.w_hat[i]);
        let sol = qp::solve(&p)?;
        let row: Vec<Vec2> = (0..n).map(|j| block(&sol.u, j)).collect();
        controls.push(row[i]);
        feasible.push(sol.feasible);
        virtuals.push(row);
    }
    next.u_prev = Some(virtuals);
    Ok((PolicyStepOutput::new(controls, feasible, &pairs), next))
}

/// Stateful wrapper that dispatches a [`PolicySpec`] step by step.
#[derive(Debug, Clone)]
pub struct PolicyRunner {
    spec: PolicySpec,
    memory: Option<PccaMemory>,
}

impl PolicyRunner {
    pub fn new(spec: PolicySpec, n_agents: usize) -> Result<Self, PolicyError> {
        spec.validate()?;
        let memory = matches!(spec, PolicySpec::Pcca { .. }).then(|| PccaMemory::new(n_agents));
        Ok(Self { spec, memory })
    }

    pub fn spec(&self) -> PolicySpec {
        self.spec
    }

    pub fn memory(&self) -> Option<&PccaMemory> {
        self.memory.as_ref()
    }

    /// `observed` are last step's applied accelerations (only PCCA uses them).
    pub fn step(
        &mut self,
        scene: &Scene,
        observed: &[Vec2],
        dt: f64,
    ) -> Result<PolicyStepOutput, PolicyError> {
        match self.spec {
            PolicySpec::Centralized => centralized_step(scene),
            PolicySpec::DecentralizedFollower => df_step(scene),
            PolicySpec::DecentralizedReciprocal => dr_step(scene),
            PolicySpec::Ccs { rho } => ccs_step(scene, rho),
            PolicySpec::Pcca { loop_breaker } => {
                let mem = self.memory.as_ref().expect("PCCA runner keeps memory");
                let (out, next) = pcca_step(scene, mem, observed, loop_breaker, dt)?;
                self.memory = Some(next);
                Ok(out)
            }
        }
    }
}

/// True when every pair satisfies `h >= 0` and `lambda1 h + hdot >= 0`.
pub fn in_admissible_set(states: &[AgentState], bp: &BarrierParams) -> Result<bool, PolicyError> {
    Ok(first_inadmissible_pair(states, bp)?.is_none())
}

fn first_inadmissible_pair(
    states: &[AgentState],
    bp: &BarrierParams,
) -> Result<Option<(usize, usize)>, PolicyError> {
    let pairs = PairTable::new(states, bp)?;
    for (i, j) in pairs.pairs() {
        let t = pairs.get(i, j);
        let tol = 1e-12 * (1.0 + bp.r() * bp.r());
        if t.h < -tol || bp.lambda1() * t.h + t.hdot < -tol {
            return Ok(Some((i, j)));
        }
    }
    Ok(None)
}

/// Constructive feasible point for the centralized constraint set:
/// `u_1 = 0`, `u_l = lambda1 (v_1 - v_l)`, so that `u_i - u_j = -lambda1 v_ij`
/// for every pair and `F_ij >= 2 |v_ij|^2`.
pub fn feasible_point(states: &[AgentState], bp: &BarrierParams) -> Result<Vec<Vec2>, PolicyError> {
    if states.is_empty() {
        return Err(PolicyError::Length("no agents".into()));
    }
    if let Some((i, j)) = first_inadmissible_pair(states, bp)? {
        return Err(PolicyError::NotInAdmissibleSet(i, j));
    }
    let v1 = states[0].vel;
    Ok(states.iter().map(|s| (v1 - s.vel) * bp.lambda1()).collect())
}
