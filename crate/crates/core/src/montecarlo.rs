//! Random scenario generation, batch execution and summary statistics.
//!
//! Child seeds are derived from the master seed with a SplitMix64 finalizer:
//! `seed_k = mix64(master + (k + 1) * 0x9E3779B97F4A7C15)`. Each trial draws
//! its points from its own ChaCha8 stream, so changing one trial's seed never
//! affects another trial.

use std::fmt::Write as _;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Vec2;
use crate::policies::PolicySpec;
use crate::sim::{run_trial, SimConfig, TrialMetrics};

pub const MAX_ATTEMPTS_PER_POINT: usize = 100_000;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("rejection sampling gave up after {attempts} attempts (trial seed {seed:#x})")]
    RejectionLimit { seed: u64, attempts: usize },
    #[error("invalid batch input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_agents: usize,
    pub starts: Vec<Vec2>,
    pub goals: Vec<Vec2>,
    pub seed: u64,
}

impl Scenario {
    /// Reflection across the x-axis.
    pub fn mirrored(&self) -> Self {
        let flip = |p: &Vec2| Vec2::new(p.x, -p.y);
        Self {
            n_agents: self.n_agents,
            starts: self.starts.iter().map(flip).collect(),
            goals: self.goals.iter().map(flip).collect(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub arena_radius: f64,
    pub agent_radius: f64,
    /// Also keep starts clear of other agents' goals.
    pub cross_kind_check: bool,
}

impl SamplingConfig {
    pub fn from_sim(cfg: &SimConfig) -> Self {
        Self {
            arena_radius: cfg.arena_radius,
            agent_radius: cfg.agent_radius,
            cross_kind_check: false,
        }
    }

    fn sample_radius(&self) -> f64 {
        self.arena_radius - self.agent_radius
    }
}

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(master_seed: u64, index: u64) -> u64 {
    mix64(master_seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Uniform point in the disk of the given radius (inverse CDF in the radius).
pub fn sample_disk<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vec2 {
    let rho = radius * rng.random::<f64>().sqrt();
    let theta = std::f64::consts::TAU * rng.random::<f64>();
    Vec2::new(rho * theta.cos(), rho * theta.sin())
}

fn sample_points<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    cfg: &SamplingConfig,
    avoid: &[Vec2],
    seed: u64,
) -> Result<Vec<Vec2>, MonteCarloError> {
    let min_sq = (2.0 * cfg.agent_radius).powi(2);
    let mut pts: Vec<Vec2> = Vec::with_capacity(n);
    for k in 0..n {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS_PER_POINT {
                return Err(MonteCarloError::RejectionLimit {
                    seed,
                    attempts: MAX_ATTEMPTS_PER_POINT,
                });
            }
            let p = sample_disk(rng, cfg.sample_radius());
            let clear_same = pts.iter().all(|q| (p - q).norm_squared() >= min_sq);
            let clear_other = avoid
                .iter()
                .enumerate()
                .all(|(j, q)| j == k || (p - q).norm_squared() >= min_sq);
            if clear_same && clear_other {
                pts.push(p);
                break;
            }
        }
    }
    Ok(pts)
}

pub fn sample_scenario(
    n_agents: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Scenario, MonteCarloError> {
    if n_agents == 0 {
        return Err(MonteCarloError::InvalidInput(
            "n_agents must be positive".into(),
        ));
    }
    if !(cfg.agent_radius > 0.0 && cfg.sample_radius() > 0.0) {
        return Err(MonteCarloError::InvalidInput(
            "arena must be larger than the agents".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goals = sample_points(&mut rng, n_agents, cfg, &[], seed)?;
    let avoid = if cfg.cross_kind_check {
        goals.as_slice()
    } else {
        &[]
    };
    let starts = sample_points(&mut rng, n_agents, cfg, avoid, seed)?;
    Ok(Scenario {
        n_agents,
        starts,
        goals,
        seed,
    })
}

pub fn sample_scenarios(
    n_trials: usize,
    n_agents: usize,
    cfg: &SamplingConfig,
    master_seed: u64,
) -> Result<Vec<Scenario>, MonteCarloError> {
    (0..n_trials as u64)
        .map(|k| sample_scenario(n_agents, cfg, child_seed(master_seed, k)))
        .collect()
}

/// Outcome of one (scenario, policy) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOutcome {
    Completed(TrialMetrics),
    Failed(String),
}

impl CellOutcome {
    pub fn metrics(&self) -> Option<&TrialMetrics> {
        match self {
            CellOutcome::Completed(m) => Some(m),
            CellOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: PolicySpec,
    pub label: String,
    pub radius_margin: f64,
    pub n_trials: usize,
    pub n_converged: usize,
    pub conv_time_min: Option<f64>,
    pub conv_time_max: Option<f64>,
    pub conv_time_mean: Option<f64>,
    pub h_min: Option<f64>,
    pub gridlock_count: usize,
    pub infeasible_count: usize,
    pub infeasible_steps: usize,
    pub failed_count: usize,
}

impl PolicySummary {
    /// Sequential reduce over the trials in index order. Time statistics skip
    /// gridlocked trials; counts and `h_min` use every completed trial.
    pub fn from_cells(policy: PolicySpec, radius_margin: f64, cells: &[CellOutcome]) -> Self {
        let mut s = Self {
            policy,
            label: policy.to_string(),
            radius_margin,
            n_trials: cells.len(),
            n_converged: 0,
            conv_time_min: None,
            conv_time_max: None,
            conv_time_mean: None,
            h_min: None,
            gridlock_count: 0,
            infeasible_count: 0,
            infeasible_steps: 0,
            failed_count: 0,
        };
        let mut sum = 0.0;
        for cell in cells {
            let Some(m) = cell.metrics() else {
                s.failed_count += 1;
                continue;
            };
            if let Some(h) = m.h_min {
                s.h_min = Some(s.h_min.map_or(h, |b: f64| b.min(h)));
            }
            if m.gridlocked {
                s.gridlock_count += 1;
            }
            if m.any_infeasible {
                s.infeasible_count += 1;
            }
            s.infeasible_steps += m.infeasible_steps;
            if let (true, Some(t)) = (m.converged, m.convergence_time) {
                s.n_converged += 1;
                sum += t;
                s.conv_time_min = Some(s.conv_time_min.map_or(t, |b: f64| b.min(t)));
                s.conv_time_max = Some(s.conv_time_max.map_or(t, |b: f64| b.max(t)));
            }
        }
        if s.n_converged > 0 {
            s.conv_time_mean = Some(sum / s.n_converged as f64);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub policies: Vec<PolicySummary>,
    /// `cells[p][k]` is policy `p` on scenario `k`.
    pub cells: Vec<Vec<CellOutcome>>,
}

impl BatchSummary {
    pub fn policy(&self, spec: PolicySpec) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == spec)
    }

    pub fn cells_for(&self, spec: PolicySpec) -> Option<&[CellOutcome]> {
        let idx = self.policies.iter().position(|p| p.policy == spec)?;
        Some(&self.cells[idx])
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "trial,policy,converged,conv_time,h_min,gridlock,infeasible"
        )?;
        for (p, cells) in self.policies.iter().zip(&self.cells) {
            for (k, cell) in cells.iter().enumerate() {
                match cell {
                    CellOutcome::Completed(m) => writeln!(
                        w,
                        "{k},{},{},{},{},{},{}",
                        p.label,
                        u8::from(m.converged),
                        m.convergence_time
                            .map(|t| t.to_string())
                            .unwrap_or_default(),
                        m.h_min
                            .map(|h| h.to_string())
                            .unwrap_or_else(|| "NA".into()),
                        u8::from(m.gridlocked),
                        u8::from(m.any_infeasible)
                    )?,
                    CellOutcome::Failed(_) => writeln!(w, "{k},{},error,,,,", p.label)?,
                }
            }
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), MonteCarloError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Plain-text table with one row per policy.
    pub fn format_table(&self, title: &str) -> String {
        let fmt = |v: Option<f64>, prec: usize| {
            v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
        };
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>11} {:>7}",
            "policy", "t_min", "t_max", "t_mean", "h_min", "gridlock", "infeasible", "margin"
        );
        for p in &self.policies {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>11} {:>7.4}",
                p.label,
                fmt(p.conv_time_min, 2),
                fmt(p.conv_time_max, 2),
                fmt(p.conv_time_mean, 2),
                fmt(p.h_min, 3),
                p.gridlock_count,
                p.infeasible_count,
                p.radius_margin
            );
        }
        out
    }
}

fn run_cells(scenarios: &[Scenario], policy: PolicySpec, cfg: &SimConfig) -> Vec<CellOutcome> {
    scenarios
        .par_iter()
        .map(|sc| match run_trial(sc, policy, cfg) {
            Ok(m) => CellOutcome::Completed(m),
            Err(e) => CellOutcome::Failed(e.to_string()),
        })
        .collect()
}

fn check_inputs(scenarios: &[Scenario], policies: &[PolicySpec]) -> Result<(), MonteCarloError> {
    if scenarios.is_empty() || policies.is_empty() {
        return Err(MonteCarloError::InvalidInput(
            "need at least one scenario and one policy".into(),
        ));
    }
    Ok(())
}

/// Runs every (scenario, policy) pair in parallel; a failed trial is recorded
/// in its cell and does not abort the batch.
pub fn run_batch(
    scenarios: &[Scenario],
    policies: &[PolicySpec],
    cfg: &SimConfig,
) -> Result<BatchSummary, MonteCarloError> {
    check_inputs(scenarios, policies)?;
    let mut summary = BatchSummary {
        policies: Vec::new(),
        cells: Vec::new(),
    };
    for &p in policies {
        let cells = run_cells(scenarios, p, cfg);
        summary
            .policies
            .push(PolicySummary::from_cells(p, cfg.radius_margin, &cells));
        summary.cells.push(cells);
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// `r^2 = (2 r0)^2 - min(0, h_min)`
    #[default]
    Squared,
    /// `r = 2 r0 + |min(0, h_min)|`
    Distance,
}

/// Extra pair radius derived from a prior worst-case barrier value.
pub fn radius_margin(h_min: Option<f64>, agent_radius: f64, mode: MarginMode) -> f64 {
    let deficit = -h_min.unwrap_or(0.0).min(0.0);
    let base = 2.0 * agent_radius;
    match mode {
        MarginMode::Squared => (base * base + deficit).sqrt() - base,
        MarginMode::Distance => deficit,
    }
}

/// Reruns each policy with its own radius margin taken from `prior`.
pub fn margin_rerun(
    prior: &BatchSummary,
    scenarios: &[Scenario],
    policies: &[PolicySpec],
    cfg: &SimConfig,
    mode: MarginMode,
) -> Result<BatchSummary, MonteCarloError> {
    check_inputs(scenarios, policies)?;
    let mut summary = BatchSummary {
        policies: Vec::new(),
        cells: Vec::new(),
    };
    for &p in policies {
        let prior_p = prior.policy(p).ok_or_else(|| {
            MonteCarloError::InvalidInput(format!("policy {p} missing from the prior batch"))
        })?;
        let margin = radius_margin(prior_p.h_min, cfg.agent_radius, mode);
        let run_cfg = SimConfig {
            radius_margin: cfg.radius_margin + margin,
            ..*cfg
        };
        let cells = run_cells(scenarios, p, &run_cfg);
        summary
            .policies
            .push(PolicySummary::from_cells(p, run_cfg.radius_margin, &cells));
        summary.cells.push(cells);
    }
    Ok(summary)
}
