//! Ablation arms: config deltas that bypass modules or skip stages, trained
//! and evaluated under the same protocol as the baseline.

use super::agent::ModelAgent;
use super::metrics::{run_closed_loop, MetricsReport};
use super::proxy::ProxyNets;
use super::study::{long_horizon_study, prepare_study_scenarios, RolloutMode};
use crate::config::RunConfig;
use crate::training::{load_stack, train_all, Dataset, StackOptions, TrainError, TrainPlan};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    WoWorldGenerator,
    WoActionQueries,
    WoVisualPretraining,
    WoStage2,
    WoStage3,
    WoMultiviewFusion,
    WorldQueries(usize),
}

impl Arm {
    pub fn parse(name: &str) -> Result<Arm, String> {
        match name {
            "baseline" => Ok(Arm::Baseline),
            "wo-world-generator" => Ok(Arm::WoWorldGenerator),
            "wo-action-queries" => Ok(Arm::WoActionQueries),
            "wo-visual-pretraining" => Ok(Arm::WoVisualPretraining),
            "wo-stage2" => Ok(Arm::WoStage2),
            "wo-stage3" => Ok(Arm::WoStage3),
            "wo-multiview-fusion" => Ok(Arm::WoMultiviewFusion),
            other => {
                if let Some(n) = other.strip_prefix("world-queries-") {
                    n.parse::<usize>()
                        .map(Arm::WorldQueries)
                        .map_err(|_| format!("invalid world-query count in {other:?}"))
                } else {
                    Err(format!(
                        "unknown arm {other:?}; expected one of baseline, wo-world-generator, \
                         wo-action-queries, wo-visual-pretraining, wo-stage2, wo-stage3, \
                         wo-multiview-fusion, world-queries-N"
                    ))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Arm::Baseline => "baseline".into(),
            Arm::WoWorldGenerator => "wo-world-generator".into(),
            Arm::WoActionQueries => "wo-action-queries".into(),
            Arm::WoVisualPretraining => "wo-visual-pretraining".into(),
            Arm::WoStage2 => "wo-stage2".into(),
            Arm::WoStage3 => "wo-stage3".into(),
            Arm::WoMultiviewFusion => "wo-multiview-fusion".into(),
            Arm::WorldQueries(n) => format!("world-queries-{n}"),
        }
    }

    /// Structural switches this arm applies to the stack.
    pub fn stack_options(&self) -> StackOptions {
        let mut opts = StackOptions::default();
        match self {
            Arm::WoWorldGenerator => opts.world_generator = false,
            Arm::WoActionQueries => opts.action_queries = false,
            Arm::WoMultiviewFusion => opts.multiview_fusion = false,
            Arm::WorldQueries(n) => opts.world_queries = Some(*n),
            _ => {}
        }
        opts
    }

    /// Stage plan; skipped stages hand their budget to the survivor so the
    /// total iteration count stays controlled.
    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            skip_stage1: matches!(self, Arm::WoVisualPretraining),
            skip_stage2: matches!(self, Arm::WoStage2),
            skip_stage3: matches!(self, Arm::WoStage3),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub metrics: MetricsReport,
    /// Proxy FID/FVD at one clip horizon, for arms that keep the generator.
    pub fid_proxy: Option<f64>,
    pub fvd_proxy: Option<f64>,
}

/// Train and evaluate each arm at desk scale; emits DS/RC/IS rows plus
/// generation-quality rows where a generator exists.
pub fn ablation_suite(
    ds: &Dataset,
    cfg: &RunConfig,
    arms: &[Arm],
    out_dir: &Path,
    with_generation_metrics: bool,
) -> Result<Vec<ArmReport>, TrainError> {
    let mut reports = Vec::new();
    for arm in arms {
        let arm_dir = out_dir.join(arm.name());
        std::fs::create_dir_all(&arm_dir)?;
        let opts = arm.stack_options();
        let plan = arm.train_plan();
        let artifacts = train_all(ds, cfg, &opts, &plan, &arm_dir)?;
        let (stack, _ckpt) = load_stack(cfg, &opts, &artifacts.final_ckpt)?;
        if let Some(g) = &stack.generator {
            g.reset_sampler_counter();
        }
        let metrics = run_closed_loop(
            |_| ModelAgent::new(&stack),
            &ds.eval_scenarios,
            &cfg.microworld,
            &cfg.eval,
            &cfg.hash(),
            &artifacts.final_hash,
            || stack.generator.as_ref().map(|g| g.sampler_invocations()).unwrap_or(0),
            None,
        );
        let (fid_proxy, fvd_proxy) = if with_generation_metrics && stack.generator.is_some() {
            let clip = cfg.generator.clip_frames;
            let scenarios = prepare_study_scenarios(cfg, cfg.eval.study_scenarios, clip);
            let mut rng = crate::rng::derive_rng(cfg.seed, "ablate:proxy");
            let proxy = ProxyNets::new(&cfg.eval, cfg.microworld.raster_size, &mut rng);
            let out = long_horizon_study(
                &stack,
                &scenarios,
                &[clip],
                &proxy,
                RolloutMode::Autoregressive,
                cfg.seed,
                1,
            );
            (
                Some(out.reports[0].fid_proxy),
                Some(out.reports[0].fvd_proxy),
            )
        } else {
            (None, None)
        };
        reports.push(ArmReport {
            arm: arm.name(),
            metrics,
            fid_proxy,
            fvd_proxy,
        });
    }
    Ok(reports)
}
