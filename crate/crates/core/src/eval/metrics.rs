//! Closed-loop benchmark metrics: route completion (RC), infraction score
//! (IS), and driving score DS = RC x IS.

use crate::config::{EvalConfig, MicroworldConfig};
use crate::microworld::episode::{run_episode, DrivingPolicy, EpisodeLog, EpisodeOptions};
use crate::microworld::infractions::{InfractionEvent, InfractionKind};
use crate::microworld::scenario::Scenario;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub fn penalty(kind: InfractionKind, cfg: &EvalConfig) -> f64 {
    match kind {
        InfractionKind::CollisionPedestrian => cfg.penalty_collision_pedestrian,
        InfractionKind::CollisionVehicle => cfg.penalty_collision_vehicle,
        InfractionKind::RedLightViolation => cfg.penalty_red_light,
        // deviation terminates the route and is charged through RC
        InfractionKind::RouteDeviation => 1.0,
    }
}

/// Product of per-infraction penalty factors.
pub fn infraction_score(events: &[InfractionEvent], cfg: &EvalConfig) -> f64 {
    events.iter().map(|e| penalty(e.kind, cfg)).product()
}

/// Independent penalty-product replay over a persisted episode log (the
/// oracle the harness value is checked against).
pub fn infraction_score_from_log(log: &EpisodeLog, cfg: &EvalConfig) -> f64 {
    let mut score = 1.0;
    for step in &log.steps {
        for event in &step.infractions {
            score *= penalty(event.kind, cfg);
        }
    }
    score
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteResult {
    pub route: String,
    pub rc: f64,
    pub is_score: f64,
    pub ds: f64,
    pub infractions: BTreeMap<String, usize>,
    pub steps: usize,
}

/// Score one finished episode: RC is the completed route fraction, IS the
/// penalty product, DS their product exactly.
pub fn score_route(log: &EpisodeLog, cfg: &EvalConfig) -> RouteResult {
    let rc = log.final_progress.clamp(0.0, 1.0);
    let is_score = infraction_score(&log.infractions(), cfg);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in log.infractions() {
        *counts.entry(format!("{:?}", e.kind)).or_insert(0) += 1;
    }
    RouteResult {
        route: log.header.scenario.clone(),
        rc,
        is_score,
        ds: rc * is_score,
        infractions: counts,
        steps: log.steps.len(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunAggregate {
    pub rc: f64,
    pub is_score: f64,
    pub ds: f64,
    pub routes: Vec<RouteResult>,
}

/// Aggregate a run: RC and IS average over routes; DS = RC x IS exactly.
pub fn aggregate_run(routes: Vec<RouteResult>) -> RunAggregate {
    let n = routes.len() as f64;
    let rc = routes.iter().map(|r| r.rc).sum::<f64>() / n;
    let is_score = routes.iter().map(|r| r.is_score).sum::<f64>() / n;
    RunAggregate {
        rc,
        is_score,
        ds: rc * is_score,
        routes,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rc: f64,
    pub rc_std: f64,
    pub is_score: f64,
    pub is_std: f64,
    pub ds: f64,
    pub ds_std: f64,
    pub runs: Vec<RunAggregate>,
    pub penalties: BTreeMap<String, f64>,
    pub config_hash: String,
    pub checkpoint_hash: String,
    /// Diffusion sampler invocations observed during evaluation (online
    /// planning mode must keep this at zero).
    pub sampler_invocations: u64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_runs(
        runs: Vec<RunAggregate>,
        ecfg: &EvalConfig,
        config_hash: String,
        checkpoint_hash: String,
        sampler_invocations: u64,
    ) -> MetricsReport {
        let (rc, rc_std) = mean_std(&runs.iter().map(|r| r.rc).collect::<Vec<_>>());
        let (is_score, is_std) = mean_std(&runs.iter().map(|r| r.is_score).collect::<Vec<_>>());
        let (_, ds_std) = mean_std(&runs.iter().map(|r| r.ds).collect::<Vec<_>>());
        MetricsReport {
            rc,
            rc_std,
            is_score,
            is_std,
            ds: rc * is_score,
            ds_std,
            runs,
            penalties: BTreeMap::from([
                ("collision_pedestrian".into(), ecfg.penalty_collision_pedestrian),
                ("collision_vehicle".into(), ecfg.penalty_collision_vehicle),
                ("red_light".into(), ecfg.penalty_red_light),
            ]),
            config_hash,
            checkpoint_hash,
            sampler_invocations,
        }
    }

    /// Human-readable table plus the machine-readable JSON record.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "DS {:.4} +- {:.4} | RC {:.4} +- {:.4} | IS {:.4} +- {:.4} ({} runs)\n",
            self.ds,
            self.ds_std,
            self.rc,
            self.rc_std,
            self.is_score,
            self.is_std,
            self.runs.len()
        ));
        s.push_str(&format!(
            "penalties: {:?} | sampler invocations: {}\n",
            self.penalties, self.sampler_invocations
        ));
        for (i, run) in self.runs.iter().enumerate() {
            s.push_str(&format!(
                "  run {i}: DS {:.4} RC {:.4} IS {:.4}\n",
                run.ds, run.rc, run.is_score
            ));
            for r in &run.routes {
                s.push_str(&format!(
                    "    {}: rc {:.3} is {:.3} ds {:.3} {:?}\n",
                    r.route, r.rc, r.is_score, r.ds, r.infractions
                ));
            }
        }
        s
    }
}

/// Drive every route with a fresh policy per run and aggregate.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop<P, F>(
    mut make_policy: F,
    scenarios: &[Scenario],
    mcfg: &MicroworldConfig,
    ecfg: &EvalConfig,
    config_hash: &str,
    checkpoint_hash: &str,
    sampler_counter: impl Fn() -> u64,
    log_dir: Option<&Path>,
) -> MetricsReport
where
    P: DrivingPolicy,
    F: FnMut(usize) -> P,
{
    let mut runs = Vec::new();
    for run_idx in 0..ecfg.runs {
        let mut policy = make_policy(run_idx);
        let mut routes = Vec::new();
        for scenario in scenarios {
            let opts = EpisodeOptions {
                max_steps: ecfg.max_steps,
                config_hash: config_hash.to_string(),
                record: false,
                flag_advances: true,
            };
            let outcome = run_episode(scenario, mcfg, &mut policy, &opts);
            if let Some(dir) = log_dir {
                let _ = std::fs::create_dir_all(dir);
                let path = dir.join(format!("run{run_idx}_{}.jsonl", scenario.name));
                outcome.log.write_jsonl(&path).expect("write episode log");
            }
            routes.push(score_route(&outcome.log, ecfg));
        }
        runs.push(aggregate_run(routes));
    }
    MetricsReport::from_runs(
        runs,
        ecfg,
        config_hash.to_string(),
        checkpoint_hash.to_string(),
        sampler_counter(),
    )
}
