//! TOML run configuration with one section per experiment.

use std::fs;
use std::path::Path;

use cbfswarm::intersection1d::{Corridor1dParams, Policy1d, SweepGrid};
use cbfswarm::montecarlo::{MarginMode, SamplingConfig};
use cbfswarm::sim::SimConfig;
use cbfswarm::PolicySpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub master_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { master_seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSection {
    pub n_trials: usize,
    pub n_agents: usize,
    pub policies: Vec<String>,
    pub margin_rerun: bool,
    pub margin_mode: MarginMode,
    pub cross_kind_check: bool,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            n_trials: 100,
            n_agents: 5,
            policies: PolicySpec::study_set()
                .iter()
                .map(ToString::to_string)
                .collect(),
            margin_rerun: true,
            margin_mode: MarginMode::Squared,
            cross_kind_check: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorSection {
    pub v01: f64,
    pub v02: f64,
    pub r: f64,
    pub lambda: f64,
    pub tau: f64,
    pub dt: f64,
    pub t_max: f64,
    /// Slack weight of the decentralized policies in the sweep.
    pub slack_weight: f64,
}

impl Default for CorridorSection {
    fn default() -> Self {
        let p = Corridor1dParams::default();
        Self {
            v01: p.v0[0],
            v02: p.v0[1],
            r: p.r,
            lambda: p.lambda,
            tau: p.tau,
            dt: p.dt,
            t_max: p.t_max,
            slack_weight: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep1dSection {
    pub policies: Vec<String>,
    pub grid: SweepGrid,
}

impl Default for Sweep1dSection {
    fn default() -> Self {
        Self {
            policies: ["DR", "Centralized", "PCCA", "CCS"]
                .map(String::from)
                .to_vec(),
            grid: SweepGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub policies: Vec<String>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            policies: Policy1d::ALL.iter().map(ToString::to_string).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialSection {
    /// Index into the scenario list drawn from the master seed.
    pub index: usize,
    pub n_agents: usize,
    pub policies: Vec<String>,
}

impl Default for TrialSection {
    fn default() -> Self {
        Self {
            index: 0,
            n_agents: 5,
            policies: PolicySpec::study_set()
                .iter()
                .map(ToString::to_string)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub sim: SimConfig,
    pub montecarlo: MonteCarloSection,
    pub corridor: CorridorSection,
    pub sweep1d: Sweep1dSection,
    pub analyze: AnalyzeSection,
    pub trial: TrialSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim
            .validate()
            .map_err(|e| invalid(&sim_key(&e.to_string()), e.to_string()))?;
        let mc = &self.montecarlo;
        if mc.n_trials == 0 {
            return Err(invalid("montecarlo.n_trials", "must be at least 1"));
        }
        if mc.n_agents == 0 {
            return Err(invalid("montecarlo.n_agents", "must be at least 1"));
        }
        if self.trial.n_agents == 0 {
            return Err(invalid("trial.n_agents", "must be at least 1"));
        }
        parse_specs("montecarlo.policies", &mc.policies)?;
        parse_specs("trial.policies", &self.trial.policies)?;
        parse_1d("sweep1d.policies", &self.sweep1d.policies)?;
        parse_1d("analyze.policies", &self.analyze.policies)?;
        let c = &self.corridor;
        for (key, v) in [
            ("corridor.v01", c.v01),
            ("corridor.v02", c.v02),
            ("corridor.r", c.r),
            ("corridor.lambda", c.lambda),
            ("corridor.tau", c.tau),
            ("corridor.dt", c.dt),
            ("corridor.t_max", c.t_max),
            ("corridor.slack_weight", c.slack_weight),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be positive, got {v}")));
            }
        }
        if c.t_max < c.dt {
            return Err(invalid("corridor.t_max", "must be at least `dt`"));
        }
        let g = &self.sweep1d.grid;
        if g.n_x2 == 0 || g.n_v02 == 0 {
            return Err(invalid("sweep1d.grid", "needs at least one point per axis"));
        }
        if !(g.x1_start < 0.0 && g.x2_max < 0.0 && g.x2_min <= g.x2_max) {
            return Err(invalid(
                "sweep1d.grid",
                "start positions must be negative with x2_min <= x2_max",
            ));
        }
        if !(g.v02_min > 0.0 && g.v02_min <= g.v02_max) {
            return Err(invalid(
                "sweep1d.grid",
                "speeds must be positive with v02_min <= v02_max",
            ));
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            cross_kind_check: self.montecarlo.cross_kind_check,
            ..SamplingConfig::from_sim(&self.sim)
        }
    }

    pub fn corridor_params(&self, policy: Policy1d) -> Corridor1dParams {
        let c = &self.corridor;
        Corridor1dParams {
            policy,
            v0: [c.v01, c.v02],
            r: c.r,
            lambda: c.lambda,
            tau: c.tau,
            slack_weight: None,
            dt: c.dt,
            t_max: c.t_max,
        }
    }
}

/// Prefixes the key named in a simulation validation message with its section.
fn sim_key(msg: &str) -> String {
    let key = msg.split('`').nth(1).unwrap_or("?");
    format!("sim.{key}")
}

pub fn parse_specs(key: &str, labels: &[String]) -> Result<Vec<PolicySpec>, ConfigError> {
    if labels.is_empty() {
        return Err(invalid(key, "must list at least one policy"));
    }
    labels
        .iter()
        .map(|s| s.parse().map_err(|e| invalid(key, format!("{e}"))))
        .collect()
}

pub fn parse_1d(key: &str, labels: &[String]) -> Result<Vec<Policy1d>, ConfigError> {
    if labels.is_empty() {
        return Err(invalid(key, "must list at least one policy"));
    }
    labels
        .iter()
        .map(|s| s.parse().map_err(|e| invalid(key, format!("{e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "[run]\nmaster_seed = 7\n[sim]\ndt = 0.025\naccel_cap = 3.5\n[montecarlo]\nn_trials = 3\npolicies = [\"DR\", \"PCCA_0.1\"]\nmargin_mode = \"distance\"\n[sweep1d.grid]\nn_x2 = 5\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.run.master_seed, 7);
        assert_eq!(cfg.sim.accel_cap, Some(3.5));
        assert_eq!(cfg.sweep1d.grid.n_x2, 5);
        assert_eq!(cfg.sweep1d.grid.n_v02, 201);
        assert_eq!(Config::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let msg = |t: &str| Config::parse(t).unwrap_err().to_string();
        assert!(msg("[sim]\nagent_radius = -1.0\n").contains("agent_radius"));
        assert!(msg("[corridor]\nr = 0.0\n").contains("corridor.r"));
        assert!(msg("[montecarlo]\npolicies = [\"nope\"]\n").contains("montecarlo.policies"));
        assert!(msg("[sim]\nradius = 1.0\n").contains("radius"));
    }
}
