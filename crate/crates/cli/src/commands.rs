use std::fmt::Write as _;
use std::io;

use cbfswarm::intersection1d::{equilibria, sweep, sweep_params, Policy1d, SweepResult};
use cbfswarm::montecarlo::{
    child_seed, margin_rerun, run_batch, sample_scenario, sample_scenarios, Scenario,
};
use cbfswarm::sim::{run_trial_traced, Trace, TrialMetrics};
use serde::Serialize;
use thiserror::Error;

use crate::config::{parse_1d, parse_specs, Config, ConfigError};
use crate::manifest::OutDir;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Run(String),
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn bytes(f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn json<T: Serialize>(value: &T) -> io::Result<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(io::Error::other)
}

pub fn montecarlo(cfg: &Config, out: &mut OutDir) -> Result<String, CliError> {
    let mc = &cfg.montecarlo;
    let policies = parse_specs("montecarlo.policies", &mc.policies)?;
    let scenarios = sample_scenarios(
        mc.n_trials,
        mc.n_agents,
        &cfg.sampling(),
        cfg.run.master_seed,
    )
    .map_err(run_err)?;
    let prior = run_batch(&scenarios, &policies, &cfg.sim).map_err(run_err)?;
    out.write("trials.csv", &bytes(|w| prior.write_csv(w))?)?;
    out.write("summary.json", &json(&prior)?)?;
    let mut tables = prior.format_table(&format!("{} trials, {} agents", mc.n_trials, mc.n_agents));
    if mc.margin_rerun {
        let rerun = margin_rerun(&prior, &scenarios, &policies, &cfg.sim, mc.margin_mode)
            .map_err(run_err)?;
        out.write("margin_trials.csv", &bytes(|w| rerun.write_csv(w))?)?;
        out.write("margin_summary.json", &json(&rerun)?)?;
        tables.push('\n');
        tables.push_str(&rerun.format_table("rerun with radius margin from h_min"));
    }
    out.write("tables.txt", tables.as_bytes())?;
    Ok(tables)
}

#[derive(Serialize)]
struct SweepRow {
    policy: String,
    cells: usize,
    gridlock_count: usize,
    gridlock_fraction: f64,
    lambda: f64,
    tau: f64,
    slack_weight: Option<f64>,
}

pub fn sweep1d(cfg: &Config, out: &mut OutDir) -> Result<String, CliError> {
    let grid = cfg.sweep1d.grid;
    let mut rows = Vec::new();
    let mut table = format!(
        "{}x{} grid, x1(0) = {}\n",
        grid.n_x2, grid.n_v02, grid.x1_start
    );
    let _ = writeln!(
        table,
        "{:<12} {:>9} {:>10} {:>7} {:>6}",
        "policy", "gridlock", "fraction", "lambda", "tau"
    );
    for policy in parse_1d("sweep1d.policies", &cfg.sweep1d.policies)? {
        let p = sweep_params(
            &cfg.corridor_params(policy),
            policy,
            cfg.corridor.slack_weight,
        );
        let res: SweepResult = sweep(&p, &grid).map_err(run_err)?;
        out.write(
            &format!("sweep_{policy}.bin"),
            &bytes(|w| res.write_grid(w))?,
        )?;
        out.write(
            &format!("sweep_{policy}.csv"),
            &bytes(|w| res.write_csv(w))?,
        )?;
        let _ = writeln!(
            table,
            "{:<12} {:>9} {:>9.3}% {:>7} {:>6}",
            policy.to_string(),
            res.gridlock_count(),
            100.0 * res.gridlock_fraction(),
            p.lambda,
            p.tau
        );
        rows.push(SweepRow {
            policy: policy.to_string(),
            cells: grid.len(),
            gridlock_count: res.gridlock_count(),
            gridlock_fraction: res.gridlock_fraction(),
            lambda: p.lambda,
            tau: p.tau,
            slack_weight: p.slack_weight,
        });
    }
    out.write("sweep_summary.json", &json(&rows)?)?;
    out.write("sweep_summary.txt", table.as_bytes())?;
    Ok(table)
}

#[derive(Serialize)]
struct PointRow {
    state: Vec<f64>,
    eigenvalues: Vec<[f64; 2]>,
    jacobian_mismatch: f64,
}

#[derive(Serialize)]
struct EquilibriumRow {
    policy: String,
    kind: String,
    stability: String,
    points: Vec<PointRow>,
}

fn format_eigs(e: &[[f64; 2]]) -> String {
    let one = |[re, im]: [f64; 2]| {
        let re = if re.abs() < 1e-9 { 0.0 } else { re };
        if im.abs() < 1e-9 {
            format!("{re:.4}")
        } else {
            format!("{re:.4}{im:+.4}i")
        }
    };
    format!(
        "{{{}}}",
        e.iter().copied().map(one).collect::<Vec<_>>().join(", ")
    )
}

pub fn analyze(cfg: &Config, out: &mut OutDir) -> Result<String, CliError> {
    let mut rows = Vec::new();
    let mut table = format!(
        "v0 = ({}, {}), r = {}, lambda = {}, tau = {}\n",
        cfg.corridor.v01, cfg.corridor.v02, cfg.corridor.r, cfg.corridor.lambda, cfg.corridor.tau
    );
    let _ = writeln!(
        table,
        "{:<12} {:<14} {:<18} eigenvalues",
        "policy", "equilibria", "stability"
    );
    for policy in parse_1d("analyze.policies", &cfg.analyze.policies)? {
        let report = equilibria(&cfg.corridor_params(policy)).map_err(run_err)?;
        let points: Vec<PointRow> = report
            .points
            .iter()
            .zip(&report.linearizations)
            .map(|(s, l)| {
                let mut state = s.pos.to_vec();
                if policy == Policy1d::Pcca {
                    state.extend(s.filter);
                }
                let mut eig: Vec<[f64; 2]> = l.eigenvalues.iter().map(|c| [c.re, c.im]).collect();
                eig.sort_by(|a, b| b[0].total_cmp(&a[0]));
                PointRow {
                    state,
                    eigenvalues: eig,
                    jacobian_mismatch: l.max_jacobian_mismatch(),
                }
            })
            .collect();
        let kind = format!("{:?}", report.kind);
        let _ = writeln!(
            table,
            "{:<12} {:<14} {:<18} {}",
            policy.to_string(),
            kind,
            report.stability.to_string(),
            format_eigs(&points[0].eigenvalues)
        );
        rows.push(EquilibriumRow {
            policy: policy.to_string(),
            kind,
            stability: report.stability.to_string(),
            points,
        });
    }
    out.write("equilibria.json", &json(&rows)?)?;
    out.write("equilibria.txt", table.as_bytes())?;
    Ok(table)
}

#[derive(Serialize)]
struct TrialRow {
    policy: String,
    metrics: Option<TrialMetrics>,
    error: Option<String>,
}

#[derive(Serialize)]
struct TrialReport<'a> {
    scenario: &'a Scenario,
    results: Vec<TrialRow>,
}

pub fn trial(cfg: &Config, out: &mut OutDir) -> Result<String, CliError> {
    let t = &cfg.trial;
    let seed = child_seed(cfg.run.master_seed, t.index as u64);
    let scenario = sample_scenario(t.n_agents, &cfg.sampling(), seed).map_err(run_err)?;
    let mut results = Vec::new();
    let mut table = format!(
        "trial {} (seed {seed:#x}), {} agents\n",
        t.index, t.n_agents
    );
    for policy in parse_specs("trial.policies", &t.policies)? {
        let mut trace = Trace::new(cfg.sim.n_steps() * t.n_agents + t.n_agents);
        let res = run_trial_traced(&scenario, policy, &cfg.sim, Some(&mut trace));
        out.write(
            &format!("trace_{policy}.csv"),
            &bytes(|w| trace.write_csv(w))?,
        )?;
        let row = match res {
            Ok(m) => {
                let _ = writeln!(
                    table,
                    "{:<12} converged {:<5} time {:>7} h_min {:>9} infeasible steps {}",
                    policy.to_string(),
                    m.converged,
                    m.convergence_time.map_or("-".into(), |x| format!("{x:.2}")),
                    m.h_min.map_or("-".into(), |x| format!("{x:.4}")),
                    m.infeasible_steps
                );
                TrialRow {
                    policy: policy.to_string(),
                    metrics: Some(m),
                    error: None,
                }
            }
            Err(e) => {
                let _ = writeln!(table, "{:<12} error: {e}", policy.to_string());
                TrialRow {
                    policy: policy.to_string(),
                    metrics: None,
                    error: Some(e.to_string()),
                }
            }
        };
        results.push(row);
    }
    out.write(
        "trial_summary.json",
        &json(&TrialReport {
            scenario: &scenario,
            results,
        })?,
    )?;
    Ok(table)
}
