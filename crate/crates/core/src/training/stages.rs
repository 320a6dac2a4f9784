//! The three-stage curriculum: perception pretraining, single-step joint
//! fine-tuning, and multi-step long-horizon training with a frozen generator.

use super::checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, StageTag, SCHEMA_VERSION};
use super::data::{label_to_targets, Dataset};
use crate::config::RunConfig;
use crate::control::{waypoints_to_controls, PidState};
use crate::generator::WorldGenerator;
use crate::lm::{LanguagePlanner, PlanOutput, SequenceContext, WorldEmbedding};
use crate::nn::{AdamW, ParamSet, Tensor};
use crate::rng::derive_rng;
use crate::vision::{pretrain_losses, PerceptionHeads, VisionEncoder};
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Structural switches for ablation arms; the unmodified stack is all-on.
#[derive(Debug, Clone)]
pub struct StackOptions {
    pub world_generator: bool,
    pub action_queries: bool,
    pub multiview_fusion: bool,
    pub world_queries: Option<usize>,
}

impl Default for StackOptions {
    fn default() -> Self {
        StackOptions {
            world_generator: true,
            action_queries: true,
            multiview_fusion: true,
            world_queries: None,
        }
    }
}

/// The assembled model bundle.
pub struct DrivingStack {
    pub cfg: RunConfig,
    pub opts: StackOptions,
    pub vision: VisionEncoder,
    pub planner: LanguagePlanner,
    pub generator: Option<WorldGenerator>,
}

impl DrivingStack {
    /// Deterministic construction from the config seed.
    pub fn new(cfg: &RunConfig, opts: &StackOptions) -> DrivingStack {
        let mut cfg = cfg.clone();
        if let Some(q) = opts.world_queries {
            cfg.lm.world_queries = q;
        }
        if !opts.world_generator {
            cfg.lm.world_queries = 0;
        }
        let mut rng_v = derive_rng(cfg.seed, "init:vision");
        let vision = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng_v);
        let mut rng_l = derive_rng(cfg.seed, "init:lm");
        let planner = LanguagePlanner::new(&cfg.lm, cfg.vision.d, &mut rng_l);
        let generator = if opts.world_generator {
            let mut rng_g = derive_rng(cfg.seed, "init:gen");
            Some(WorldGenerator::new(
                &cfg.generator,
                cfg.microworld.raster_size,
                cfg.lm.d_lm,
                opts.multiview_fusion,
                &mut rng_g,
            ))
        } else {
            None
        };
        DrivingStack {
            cfg,
            opts: opts.clone(),
            vision,
            planner,
            generator,
        }
    }

    pub fn all_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.extend(&self.vision.params);
        ps.extend(&self.planner.params);
        if let Some(g) = &self.generator {
            ps.extend(&g.params);
        }
        ps
    }

    pub fn module_hashes(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("vision".to_string(), self.vision.params.content_hash());
        m.insert("lm".to_string(), self.planner.params.content_hash());
        if let Some(g) = &self.generator {
            m.insert("gen".to_string(), g.params.content_hash());
        }
        m
    }

    fn to_checkpoint(
        &self,
        stage: StageTag,
        parent_hash: Option<String>,
        frozen: Vec<String>,
        arm: &str,
        include: &[&str],
    ) -> Checkpoint {
        let all = self.all_params();
        let mut params = BTreeMap::new();
        for (name, entry) in all.snapshot() {
            if include.iter().any(|p| name.starts_with(p)) {
                params.insert(name, entry);
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                schema_version: SCHEMA_VERSION,
                stage,
                config_hash: self.cfg.hash(),
                parent_hash,
                vocab_version: self.planner.vocab.version,
                frozen,
                module_hashes: self.module_hashes(),
                arm: arm.to_string(),
            },
            params,
        }
    }

    /// Load every module whose prefix appears in both stack and checkpoint.
    pub fn load_modules(&self, ckpt: &Checkpoint, prefixes: &[&str]) -> Result<(), CheckpointError> {
        let all = self.all_params();
        for prefix in prefixes {
            let subset = all.subset(prefix);
            if subset.is_empty() || !ckpt.has_module(prefix) {
                continue;
            }
            subset
                .load_snapshot(&ckpt.params)
                .map_err(CheckpointError::Corrupt)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRecord {
    pub stage: u8,
    pub iter: usize,
    pub components: BTreeMap<String, f64>,
    pub total: f64,
}

pub fn write_loss_stream(path: &Path, records: &[LossRecord]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct Stage3Stats {
    /// Generated-clip training steps (one diffusion loss per rollout step).
    pub clip_loss_steps: usize,
    /// Context clips sampled to feed subsequent steps.
    pub context_clips_sampled: usize,
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub checkpoint_hash: String,
    pub losses: Vec<LossRecord>,
    pub stage3_stats: Stage3Stats,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config mismatch: {0}")]
    Config(String),
}

fn check_parent(
    ckpt: &Checkpoint,
    expected: &[StageTag],
    cfg: &RunConfig,
) -> Result<(), TrainError> {
    if !expected.contains(&ckpt.header.stage) {
        return Err(TrainError::Checkpoint(CheckpointError::Lineage(format!(
            "expected a {:?} parent, found {}",
            expected, ckpt.header.stage
        ))));
    }
    // the vision tower must be shape-compatible
    if ckpt.header.vocab_version != crate::microworld::Vocabulary::build().version {
        return Err(TrainError::Config("vocabulary version mismatch".into()));
    }
    let _ = cfg;
    Ok(())
}

/// Stage 1: pretrain the vision encoder on single-frame perception tasks.
/// Heads are attached for training and stripped from the checkpoint; the
/// encoder is tagged frozen for later stages.
pub fn run_stage1(ds: &Dataset, cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng_v = derive_rng(cfg.seed, "init:vision");
    let vision = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng_v);
    let mut rng_h = derive_rng(cfg.seed, "init:heads");
    let heads = PerceptionHeads::new(&cfg.vision, &mut rng_h);
    let mut params = ParamSet::new();
    params.extend(&vision.params);
    params.extend(&heads.params);
    let mut opt = AdamW::new(cfg.training.lr, cfg.training.weight_decay);
    let tuples = stage1_train_tuples(ds);
    let mut rng = derive_rng(cfg.seed, "stage1:batch");
    let mut losses = Vec::new();
    let tcfg = &cfg.training;
    for iter in 0..tcfg.stage1_iters {
        let mut total = Tensor::scalar(0.0);
        let mut comp = BTreeMap::from([
            ("det".to_string(), 0.0),
            ("wp".to_string(), 0.0),
            ("light".to_string(), 0.0),
        ]);
        for _ in 0..tcfg.batch_size {
            let (e, s) = tuples[rng.gen_range(0..tuples.len())];
            let frame = ds.frame(e, s);
            let tokens = vision.forward(&frame);
            let targets = label_to_targets(ds.label(e, s));
            let (det, wp, light) = pretrain_losses(&tokens, &targets, &heads, &cfg.vision);
            *comp.get_mut("det").unwrap() += det.item();
            *comp.get_mut("wp").unwrap() += wp.item();
            *comp.get_mut("light").unwrap() += light.item();
            total = total.add(
                &det.scale(tcfg.w_det)
                    .add(&wp.scale(tcfg.w_wp_stage1))
                    .add(&light.scale(tcfg.w_light)),
            );
        }
        let loss = total.scale(1.0 / tcfg.batch_size as f64);
        let grads = loss.backward();
        opt.step(&params, &grads);
        for v in comp.values_mut() {
            *v /= tcfg.batch_size as f64;
        }
        losses.push(LossRecord {
            stage: 1,
            iter,
            total: loss.item(),
            components: comp,
        });
    }
    // strip heads, tag the encoder frozen
    let stack_like = Checkpoint {
        header: CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            stage: StageTag::Stage1,
            config_hash: cfg.hash(),
            parent_hash: None,
            vocab_version: crate::microworld::Vocabulary::build().version,
            frozen: vec!["vision.".to_string()],
            module_hashes: BTreeMap::from([(
                "vision".to_string(),
                vision.params.content_hash(),
            )]),
            arm: "baseline".to_string(),
        },
        params: vision.params.snapshot(),
    };
    let path = out_dir.join("stage1.ckpt");
    let hash = stack_like.save(&path)?;
    write_loss_stream(&out_dir.join("stage1_losses.jsonl"), &losses)?;
    Ok(TrainOutcome {
        checkpoint_path: path,
        checkpoint_hash: hash,
        losses,
        stage3_stats: Stage3Stats::default(),
    })
}

/// Tuples from all but the last episode (the held-out perception split).
fn stage1_train_tuples(ds: &Dataset) -> Vec<(usize, usize)> {
    let held_out = ds.episodes.len().saturating_sub(1);
    ds.tuples()
        .into_iter()
        .filter(|(e, _)| *e != held_out || ds.episodes.len() == 1)
        .collect()
}

/// Traffic-light accuracy of a (vision, heads) pair on the held-out episode.
pub fn traffic_light_accuracy(
    vision: &VisionEncoder,
    heads: &PerceptionHeads,
    ds: &Dataset,
) -> f64 {
    let e = ds.episodes.len() - 1;
    let mut correct = 0;
    let mut count = 0;
    for s in 0..ds.episodes[e].steps.len() {
        let frame = ds.frame(e, s);
        let tokens = crate::nn::no_grad(|| vision.forward(&frame));
        let logits = heads.light_logits(&tokens);
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == ds.label(e, s).light as usize {
            correct += 1;
        }
        count += 1;
    }
    correct as f64 / count as f64
}

/// Per-tuple planner losses shared by Stages 2 and 3.
struct TupleLosses {
    wp: Tensor,
    flag: Tensor,
    dm: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn planner_losses(
    stack: &DrivingStack,
    ctx: &SequenceContext,
    label_wps: &[[f64; 2]; 4],
    label_flag: f64,
    frame: &crate::microworld::render::MultiViewFrame,
    clip_target: Option<&crate::generator::GeneratedClip>,
    rng_noise: &mut rand_chacha::ChaCha12Rng,
) -> (TupleLosses, PlanOutput) {
    let out = stack.planner.forward_lm_full(ctx).expect("context fits");
    let (wps, flag_logit) = if stack.opts.action_queries {
        stack.planner.predict_actions(&out.action)
    } else {
        stack.planner.predict_actions_noquery(&out.last_context)
    };
    let target: Vec<f64> = label_wps.iter().flatten().copied().collect();
    let wp_loss = wps.sub(&Tensor::new(target, &[4, 2])).abs().mean_all();
    let flag_loss = flag_logit.bce_with_logits(&Tensor::new(vec![label_flag], &[1]));
    let dm = match (&stack.generator, clip_target, &out.world) {
        (Some(gen), Some(clip), Some(world)) => {
            let cond = gen.fuse_multiview(
                frame,
                Some(&WorldEmbedding {
                    vectors: world.clone(),
                }),
            );
            Some(gen.diffusion_loss(clip, &cond, rng_noise))
        }
        _ => None,
    };
    let w = wps.data();
    let plan = PlanOutput {
        waypoints: [[w[0], w[1]], [w[2], w[3]], [w[4], w[5]], [w[6], w[7]]],
        completed: 1.0 / (1.0 + (-flag_logit.data()[0]).exp()),
    };
    (
        TupleLosses {
            wp: wp_loss,
            flag: flag_loss,
            dm,
        },
        plan,
    )
}

/// Stage 2: jointly fine-tune the planner and generator on single-step
/// tuples with the vision encoder frozen.
pub fn run_stage2(
    ds: &Dataset,
    cfg: &RunConfig,
    opts: &StackOptions,
    stage1_ckpt: &Path,
    out_dir: &Path,
    iters_override: Option<usize>,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let parent = Checkpoint::load(stage1_ckpt)?;
    check_parent(&parent, &[StageTag::Stage1], cfg)?;
    let parent_hash = Checkpoint::file_hash(stage1_ckpt)?;
    let stack = DrivingStack::new(cfg, opts);
    stack.load_modules(&parent, &["vision."])?;
    stack.vision.params.set_trainable(false);

    let mut trainable = ParamSet::new();
    trainable.extend(&stack.planner.params);
    if let Some(g) = &stack.generator {
        trainable.extend(&g.params);
    }
    let mut opt = AdamW::new(cfg.training.lr, cfg.training.weight_decay);
    let tuples = ds.tuples();
    let mut rng = derive_rng(cfg.seed, "stage2:batch");
    let mut rng_noise = derive_rng(cfg.seed, "stage2:noise");
    let iters = iters_override.unwrap_or(cfg.training.stage2_iters);
    let tcfg = &cfg.training;
    let mut losses = Vec::new();
    for iter in 0..iters {
        let mut total = Tensor::scalar(0.0);
        let mut comp = BTreeMap::from([
            ("wp".to_string(), 0.0),
            ("flag".to_string(), 0.0),
            ("dm".to_string(), 0.0),
        ]);
        for _ in 0..tcfg.batch_size {
            let (e, s) = tuples[rng.gen_range(0..tuples.len())];
            let frame = ds.frame(e, s);
            let label = ds.label(e, s);
            let tokens = stack.vision.forward(&frame);
            let feat = stack.planner.compress_frame(&tokens);
            let mut ctx = SequenceContext::new(stack.cfg.lm.t_max);
            ctx.set_instruction(stack.planner.tokenize_instruction(&label.instruction));
            ctx.push_frame(feat);
            ctx.prev_control = label.prev_control;
            let clip_target = stack.generator.as_ref().map(|_| ds.clip_target(e, s));
            let (tl, _) = planner_losses(
                &stack,
                &ctx,
                &label.waypoints,
                label.flag,
                &frame,
                clip_target.as_ref(),
                &mut rng_noise,
            );
            *comp.get_mut("wp").unwrap() += tl.wp.item();
            *comp.get_mut("flag").unwrap() += tl.flag.item();
            let mut tuple_total = tl.wp.scale(tcfg.w_wp).add(&tl.flag.scale(tcfg.w_flag));
            if let Some(dm) = tl.dm {
                *comp.get_mut("dm").unwrap() += dm.item();
                tuple_total = tuple_total.add(&dm.scale(tcfg.w_dm));
            }
            total = total.add(&tuple_total);
        }
        let loss = total.scale(1.0 / tcfg.batch_size as f64);
        let grads = loss.backward();
        opt.step(&trainable, &grads);
        for v in comp.values_mut() {
            *v /= tcfg.batch_size as f64;
        }
        losses.push(LossRecord {
            stage: 2,
            iter,
            total: loss.item(),
            components: comp,
        });
    }
    let ckpt = stack.to_checkpoint(
        StageTag::Stage2,
        Some(parent_hash),
        vec!["vision.".to_string()],
        "baseline",
        &["vision.", "lm.", "gen."],
    );
    let path = out_dir.join("stage2.ckpt");
    let hash = ckpt.save(&path)?;
    write_loss_stream(&out_dir.join("stage2_losses.jsonl"), &losses)?;
    Ok(TrainOutcome {
        checkpoint_path: path,
        checkpoint_hash: hash,
        losses,
        stage3_stats: Stage3Stats::default(),
    })
}

/// Stage 3: multi-step long-horizon training. Generated clips feed the next
/// step's observation; the generator and encoder are frozen while gradients
/// still propagate into the planner through all three losses.
pub fn run_stage3(
    ds: &Dataset,
    cfg: &RunConfig,
    opts: &StackOptions,
    parent_ckpt: &Path,
    out_dir: &Path,
    iters_override: Option<usize>,
    allow_stage1_parent: bool,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let parent = Checkpoint::load(parent_ckpt)?;
    let expected: &[StageTag] = if allow_stage1_parent {
        &[StageTag::Stage1, StageTag::Stage2]
    } else {
        &[StageTag::Stage2]
    };
    check_parent(&parent, expected, cfg)?;
    let parent_hash = Checkpoint::file_hash(parent_ckpt)?;
    let stack = DrivingStack::new(cfg, opts);
    stack.load_modules(&parent, &["vision.", "lm.", "gen."])?;
    stack.vision.params.set_trainable(false);
    if let Some(g) = &stack.generator {
        g.params.set_trainable(false);
    }
    let depth = cfg.training.rollout_depth;
    assert!(
        (2..=3).contains(&depth),
        "stage-3 rollout depth must be 2 or 3"
    );
    let stride_frames = cfg.generator.clip_frames;
    let mut trainable = ParamSet::new();
    trainable.extend(&stack.planner.params);
    let mut opt = AdamW::new(cfg.training.lr, cfg.training.weight_decay);
    let mut rng = derive_rng(cfg.seed, "stage3:batch");
    let mut rng_noise = derive_rng(cfg.seed, "stage3:noise");
    let mut rng_context = derive_rng(cfg.seed, "stage3:context");
    let iters = iters_override.unwrap_or(cfg.training.stage3_iters);
    let tcfg = &cfg.training;
    let mut losses = Vec::new();
    let mut stats = Stage3Stats::default();
    // episodes long enough for the full rollout window
    let episodes: Vec<usize> = (0..ds.episodes.len())
        .filter(|&e| ds.episodes[e].steps.len() > (depth - 1) * stride_frames)
        .collect();
    assert!(!episodes.is_empty(), "no episode long enough for stage 3");
    for iter in 0..iters {
        let e = episodes[rng.gen_range(0..episodes.len())];
        let max_t0 = ds.episodes[e].steps.len() - 1 - (depth - 1) * stride_frames;
        let t0 = rng.gen_range(0..=max_t0);
        let mut ctx = SequenceContext::new(stack.cfg.lm.t_max);
        let mut pid = PidState::new(cfg.control.clone());
        let mut obs_frame = ds.frame(e, t0);
        let mut total = Tensor::scalar(0.0);
        let mut comp = BTreeMap::from([
            ("wp".to_string(), 0.0),
            ("flag".to_string(), 0.0),
            ("dm".to_string(), 0.0),
        ]);
        for k in 0..depth {
            let step_idx = t0 + k * stride_frames;
            let label = ds.label(e, step_idx);
            let tokens = stack.vision.forward(&obs_frame);
            let feat = stack.planner.compress_frame(&tokens);
            ctx.set_instruction(stack.planner.tokenize_instruction(&label.instruction));
            if k == 0 {
                ctx.prev_control = label.prev_control;
            }
            ctx.push_frame(feat);
            let clip_target = stack.generator.as_ref().map(|_| ds.clip_target(e, step_idx));
            let (tl, plan) = planner_losses(
                &stack,
                &ctx,
                &label.waypoints,
                label.flag,
                &obs_frame,
                clip_target.as_ref(),
                &mut rng_noise,
            );
            *comp.get_mut("wp").unwrap() += tl.wp.item();
            *comp.get_mut("flag").unwrap() += tl.flag.item();
            let mut step_total = tl.wp.scale(tcfg.w_wp).add(&tl.flag.scale(tcfg.w_flag));
            if let Some(dm) = &tl.dm {
                *comp.get_mut("dm").unwrap() += dm.item();
                step_total = step_total.add(&dm.scale(tcfg.w_dm));
                stats.clip_loss_steps += 1;
            }
            total = total.add(&step_total);
            if k + 1 < depth {
                // generated video becomes the next observation; the
                // predicted control becomes the next action input
                if let Some(gen) = &stack.generator {
                    let out = stack.planner.forward_lm_full(&ctx).expect("context fits");
                    let world = out.world.map(|v| WorldEmbedding { vectors: v.detach() });
                    let clip = gen.sample_clip_with_stride(
                        &obs_frame,
                        world.as_ref(),
                        &mut rng_context,
                        tcfg.stage3_context_stride,
                    );
                    stats.context_clips_sampled += 1;
                    obs_frame = clip.last_frame(obs_frame.timestamp + stride_frames as f64 * 0.1);
                } else {
                    obs_frame = ds.frame(e, step_idx + stride_frames);
                }
                let (control, next_pid) =
                    waypoints_to_controls(&plan, label.ego[3], &pid, cfg.microworld.dt);
                pid = next_pid;
                ctx.prev_control = control;
            }
        }
        let loss = total.scale(1.0 / depth as f64);
        let grads = loss.backward();
        opt.step(&trainable, &grads);
        for v in comp.values_mut() {
            *v /= depth as f64;
        }
        losses.push(LossRecord {
            stage: 3,
            iter,
            total: loss.item(),
            components: comp,
        });
    }
    let mut frozen = vec!["vision.".to_string()];
    if stack.generator.is_some() {
        frozen.push("gen.".to_string());
    }
    let ckpt = stack.to_checkpoint(
        StageTag::Stage3,
        Some(parent_hash),
        frozen,
        "baseline",
        &["vision.", "lm.", "gen."],
    );
    let path = out_dir.join("stage3.ckpt");
    let hash = ckpt.save(&path)?;
    write_loss_stream(&out_dir.join("stage3_losses.jsonl"), &losses)?;
    Ok(TrainOutcome {
        checkpoint_path: path,
        checkpoint_hash: hash,
        losses,
        stage3_stats: stats,
    })
}

/// Which stages run, honoring the controlled-iteration ablation arms.
#[derive(Debug, Clone, Default)]
pub struct TrainPlan {
    /// Skip perception pretraining (random frozen encoder).
    pub skip_stage1: bool,
    /// Skip single-step fine-tuning; Stage 3 trains from the Stage-1
    /// checkpoint with the combined budget.
    pub skip_stage2: bool,
    /// Skip long-horizon training; Stage 2 absorbs the combined budget.
    pub skip_stage3: bool,
}

pub struct TrainedArtifacts {
    pub stage1: TrainOutcome,
    pub stage2: Option<TrainOutcome>,
    pub stage3: Option<TrainOutcome>,
    pub final_ckpt: PathBuf,
    pub final_hash: String,
}

/// Execute the configured curriculum in order.
pub fn train_all(
    ds: &Dataset,
    cfg: &RunConfig,
    opts: &StackOptions,
    plan: &TrainPlan,
    out_dir: &Path,
) -> Result<TrainedArtifacts, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let stage1 = if plan.skip_stage1 {
        save_untrained_stage1(cfg, out_dir)?
    } else {
        run_stage1(ds, cfg, out_dir)?
    };
    let mut final_ckpt = stage1.checkpoint_path.clone();
    let mut final_hash = stage1.checkpoint_hash.clone();

    let stage2 = if plan.skip_stage2 {
        None
    } else {
        let iters = if plan.skip_stage3 {
            Some(cfg.training.stage2_iters + cfg.training.stage3_iters)
        } else {
            None
        };
        let out = run_stage2(ds, cfg, opts, &stage1.checkpoint_path, out_dir, iters)?;
        final_ckpt = out.checkpoint_path.clone();
        final_hash = out.checkpoint_hash.clone();
        Some(out)
    };

    let stage3 = if plan.skip_stage3 {
        None
    } else {
        let (parent, allow_stage1, iters) = match &stage2 {
            Some(s2) => (s2.checkpoint_path.clone(), false, None),
            None => (
                stage1.checkpoint_path.clone(),
                true,
                Some(cfg.training.stage2_iters + cfg.training.stage3_iters),
            ),
        };
        let out = run_stage3(ds, cfg, opts, &parent, out_dir, iters, allow_stage1)?;
        final_ckpt = out.checkpoint_path.clone();
        final_hash = out.checkpoint_hash.clone();
        Some(out)
    };

    Ok(TrainedArtifacts {
        stage1,
        stage2,
        stage3,
        final_ckpt,
        final_hash,
    })
}

/// "w/o visual pre-training": a random, frozen encoder checkpoint.
fn save_untrained_stage1(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let mut rng_v = derive_rng(cfg.seed, "init:vision");
    let vision = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng_v);
    let ckpt = Checkpoint {
        header: CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            stage: StageTag::Stage1,
            config_hash: cfg.hash(),
            parent_hash: None,
            vocab_version: crate::microworld::Vocabulary::build().version,
            frozen: vec!["vision.".to_string()],
            module_hashes: BTreeMap::from([(
                "vision".to_string(),
                vision.params.content_hash(),
            )]),
            arm: "wo_visual_pretraining".to_string(),
        },
        params: vision.params.snapshot(),
    };
    let path = out_dir.join("stage1.ckpt");
    let hash = ckpt.save(&path)?;
    Ok(TrainOutcome {
        checkpoint_path: path,
        checkpoint_hash: hash,
        losses: Vec::new(),
        stage3_stats: Stage3Stats::default(),
    })
}

/// Rebuild a stack from a final checkpoint (inference entry point).
pub fn load_stack(
    cfg: &RunConfig,
    opts: &StackOptions,
    ckpt_path: &Path,
) -> Result<(DrivingStack, Checkpoint), TrainError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let stack = DrivingStack::new(cfg, opts);
    stack.load_modules(&ckpt, &["vision.", "lm.", "gen."])?;
    for prefix in &ckpt.header.frozen {
        stack.all_params().subset(prefix).set_trainable(false);
    }
    Ok((stack, ckpt))
}
