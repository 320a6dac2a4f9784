//! The planning "brain": Q-Former frame compression, sequence assembly with
//! a bounded frame history, a small causal transformer, and heads decoding
//! waypoints, an instruction-completion flag, and world-conditioning
//! embeddings.
//!
//! Sequence order is fixed: instruction tokens, frame features oldest to
//! newest, the previous control embedding, action queries, then world
//! queries. Under the causal mask, world-query outputs may depend on action
//! queries but never the reverse.

use crate::config::LmConfig;
use crate::control::ControlCommand;
use crate::microworld::instructions::Vocabulary;
use crate::nn::{
    CrossAttentionBlock, Embedding, LayerNorm, Linear, Mlp, ParamSet, Tensor, TransformerBlock,
    Var,
};
use crate::rng::randn_vec;
use crate::vision::VisionTokenSet;
use rand_chacha::ChaCha12Rng;
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

/// Planner output: 4 future waypoints in the ego frame at t + {0.2, 0.4,
/// 0.6, 0.8} s and an instruction-completion probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOutput {
    pub waypoints: [[f64; 2]; 4],
    pub completed: f64,
}

/// Compressed per-frame feature: exactly 8 adapter-projected vectors.
#[derive(Clone)]
pub struct FrameFeature {
    pub vectors: Tensor, // [qformer_queries, d_lm]
}

/// Post-LM world-query outputs conditioning the video generator.
#[derive(Clone)]
pub struct WorldEmbedding {
    pub vectors: Tensor, // [world_queries, d_lm]
}

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("sequence length {len} exceeds the context budget {budget}")]
    ContextOverflow { len: usize, budget: usize },
}

/// Post-transformer features at the query positions.
pub struct LmOutputs {
    pub action: Tensor,
    pub world: Option<Tensor>,
    /// Feature at the final context position (the control embedding).
    pub last_context: Tensor,
}

/// Episode-local rolling context: instruction, frame history ring buffer of
/// capacity `t_max` (oldest evicted first), and the last control command.
#[derive(Clone)]
pub struct SequenceContext {
    pub instruction_tokens: Vec<usize>,
    frames: VecDeque<FrameFeature>,
    t_max: usize,
    pub prev_control: ControlCommand,
}

impl SequenceContext {
    pub fn new(t_max: usize) -> SequenceContext {
        assert!(t_max >= 1);
        SequenceContext {
            instruction_tokens: Vec::new(),
            frames: VecDeque::new(),
            t_max,
            prev_control: ControlCommand::coast(),
        }
    }

    pub fn set_instruction(&mut self, tokens: Vec<usize>) {
        self.instruction_tokens = tokens;
    }

    /// Append a frame, evicting the oldest when over capacity.
    pub fn push_frame(&mut self, feature: FrameFeature) {
        self.frames.push_back(feature);
        while self.frames.len() > self.t_max {
            self.frames.pop_front();
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameFeature> {
        self.frames.iter()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn clear_frames(&mut self) {
        self.frames.clear();
        self.prev_control = ControlCommand::coast();
    }
}

pub struct LanguagePlanner {
    pub cfg: LmConfig,
    pub vocab: Vocabulary,
    // Q-Former + adapter
    qf_queries: Arc<Var>,
    qf_blocks: Vec<CrossAttentionBlock>,
    adapter: Mlp,
    // sequence pieces
    token_embed: Embedding,
    control_embed: Linear,
    action_queries: Arc<Var>,
    world_queries: Option<Arc<Var>>,
    pos_embed: Arc<Var>,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    // decoding heads
    wp_head: Mlp,
    flag_head: Linear,
    /// Waypoint head for the no-action-query ablation (reads the last
    /// context position instead of learnable queries).
    wp_head_noquery: Mlp,
    pub params: ParamSet,
}

impl LanguagePlanner {
    pub fn new(cfg: &LmConfig, vision_d: usize, rng: &mut ChaCha12Rng) -> LanguagePlanner {
        let vocab = Vocabulary::build();
        let mut ps = ParamSet::new();
        let d = cfg.d_lm;
        let qf_queries = ps.add(Var::new(
            "lm.qformer.queries",
            randn_vec(rng, cfg.qformer_queries * vision_d)
                .into_iter()
                .map(|x| 0.02 * x)
                .collect::<Vec<_>>(),
            &[cfg.qformer_queries, vision_d],
        ));
        let qf_blocks = (0..cfg.qformer_layers)
            .map(|i| {
                CrossAttentionBlock::new(
                    &mut ps,
                    rng,
                    &format!("lm.qformer.block{i}"),
                    vision_d,
                    vision_d,
                    cfg.heads.min(vision_d / 8).max(1),
                )
            })
            .collect();
        let adapter = Mlp::new(&mut ps, rng, "lm.adapter", vision_d, d, d);
        let token_embed = Embedding::new(&mut ps, rng, "lm.token_embed", vocab.len(), d);
        let control_embed = Linear::new(&mut ps, rng, "lm.control_embed", 3, d, true);
        let action_queries = ps.add(Var::new(
            "lm.action_queries",
            randn_vec(rng, cfg.action_queries * d)
                .into_iter()
                .map(|x| 0.02 * x)
                .collect::<Vec<_>>(),
            &[cfg.action_queries, d],
        ));
        let world_queries = if cfg.world_queries > 0 {
            Some(ps.add(Var::new(
                "lm.world_queries",
                randn_vec(rng, cfg.world_queries * d)
                    .into_iter()
                    .map(|x| 0.02 * x)
                    .collect::<Vec<_>>(),
                &[cfg.world_queries, d],
            )))
        } else {
            None
        };
        let max_len = cfg.max_instruction_tokens
            + cfg.qformer_queries * cfg.t_max
            + 1
            + cfg.action_queries
            + cfg.world_queries;
        let pos_embed = ps.add(Var::new(
            "lm.pos_embed",
            randn_vec(rng, max_len * d).into_iter().map(|x| 0.02 * x).collect::<Vec<_>>(),
            &[max_len, d],
        ));
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&mut ps, rng, &format!("lm.block{i}"), d, cfg.heads))
            .collect();
        let ln_f = LayerNorm::new(&mut ps, "lm.ln_f", d);
        let wp_head = Mlp::new(&mut ps, rng, "lm.wp_head", d, d, 2);
        let flag_head = Linear::new(&mut ps, rng, "lm.flag_head", d, 1, true);
        let wp_head_noquery = Mlp::new(&mut ps, rng, "lm.wp_head_noquery", d, d, 2 * cfg.action_queries);
        LanguagePlanner {
            cfg: cfg.clone(),
            vocab,
            qf_queries,
            qf_blocks,
            adapter,
            token_embed,
            control_embed,
            action_queries,
            world_queries,
            pos_embed,
            blocks,
            ln_f,
            wp_head,
            flag_head,
            wp_head_noquery,
            params: ps,
        }
    }

    /// Deterministic instruction tokenization over the fixed vocabulary.
    pub fn tokenize_instruction(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text)
    }

    /// Q-Former compression: 8 learnable queries attend over the full vision
    /// token set; a 2-layer adapter projects to the LM width.
    pub fn compress_frame(&self, tokens: &VisionTokenSet) -> FrameFeature {
        let all = tokens.all();
        let (l, dv) = (all.shape()[0], all.shape()[1]);
        let cond = all.reshape(&[1, l, dv]);
        let q = self.cfg.qformer_queries;
        let mut x = self.qf_queries.value().reshape(&[1, q, dv]);
        for blk in &self.qf_blocks {
            x = blk.forward(&x, &cond);
        }
        FrameFeature {
            vectors: self.adapter.forward(&x.reshape(&[q, dv])),
        }
    }

    fn context_budget(&self) -> usize {
        self.pos_embed.shape()[0]
    }

    /// Run the causal transformer over the assembled sequence and return the
    /// action-query and world-query output features.
    pub fn forward_lm(
        &self,
        ctx: &SequenceContext,
    ) -> Result<(Tensor, Option<Tensor>), LmError> {
        let out = self.forward_lm_full(ctx)?;
        Ok((out.action, out.world))
    }

    /// As [`forward_lm`](Self::forward_lm) but also exposing the feature at
    /// the last context position (used by the no-action-query ablation).
    pub fn forward_lm_full(&self, ctx: &SequenceContext) -> Result<LmOutputs, LmError> {
        let d = self.cfg.d_lm;
        let mut parts: Vec<Tensor> = Vec::new();
        parts.push(self.token_embed.forward(&ctx.instruction_tokens));
        for f in ctx.frames() {
            assert_eq!(
                f.vectors.shape(),
                &[self.cfg.qformer_queries, d],
                "frame feature must carry exactly {} vectors",
                self.cfg.qformer_queries
            );
            parts.push(f.vectors.clone());
        }
        let c = ctx.prev_control;
        parts.push(
            self.control_embed
                .forward(&Tensor::new(vec![c.throttle, c.brake, c.steer], &[1, 3])),
        );
        parts.push(self.action_queries.value());
        if let Some(wq) = &self.world_queries {
            parts.push(wq.value());
        }
        let x = Tensor::concat(&parts, 0);
        let len = x.shape()[0];
        if len > self.context_budget() {
            return Err(LmError::ContextOverflow {
                len,
                budget: self.context_budget(),
            });
        }
        let pos = self.pos_embed.value().narrow(0, 0, len);
        let mut h = x.add(&pos).reshape(&[1, len, d]);
        let mask = crate::nn::causal_mask(len);
        for blk in &self.blocks {
            h = blk.forward(&h, Some(&mask));
        }
        let h = self.ln_f.forward(&h.reshape(&[len, d]));
        let n_world = self.world_queries.as_ref().map(|_| self.cfg.world_queries);
        let world_start = len - n_world.unwrap_or(0);
        let action_start = world_start - self.cfg.action_queries;
        Ok(LmOutputs {
            action: h.narrow(0, action_start, self.cfg.action_queries),
            world: n_world.map(|nw| h.narrow(0, world_start, nw)),
            last_context: h.narrow(0, action_start - 1, 1),
        })
    }

    /// Decode action features into waypoints and the completion probability.
    pub fn predict_actions(&self, action_features: &Tensor) -> (Tensor, Tensor) {
        let wps = self.wp_head.forward(action_features); // [N_a, 2]
        let pooled = action_features.mean_axis(0).reshape(&[1, self.cfg.d_lm]);
        let flag_logit = self.flag_head.forward(&pooled).reshape(&[1]);
        (wps, flag_logit)
    }

    /// Ablation-path decoding from the last context feature instead of
    /// learnable action queries.
    pub fn predict_actions_noquery(&self, last_feature: &Tensor) -> (Tensor, Tensor) {
        let flat = self.wp_head_noquery.forward(last_feature); // [1, 2*N_a]
        let wps = flat.reshape(&[self.cfg.action_queries, 2]);
        let flag_logit = self.flag_head.forward(last_feature).reshape(&[1]);
        (wps, flag_logit)
    }

    /// Full inference step: frame history context -> plan + world embedding.
    pub fn plan(
        &self,
        ctx: &SequenceContext,
        use_action_queries: bool,
    ) -> Result<(PlanOutput, Option<WorldEmbedding>, Tensor), LmError> {
        let out = self.forward_lm_full(ctx)?;
        let world = out.world;
        let (wps, flag_logit) = if use_action_queries {
            self.predict_actions(&out.action)
        } else {
            self.predict_actions_noquery(&out.last_context)
        };
        let w = wps.data();
        let plan = PlanOutput {
            waypoints: [
                [w[0], w[1]],
                [w[2], w[3]],
                [w[4], w[5]],
                [w[6], w[7]],
            ],
            completed: sigmoid(flag_logit.data()[0]),
        };
        let world_embedding = world.map(|vectors| WorldEmbedding { vectors });
        Ok((plan, world_embedding, flag_logit))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::nn::gradcheck_loss;
    use crate::rng::derive_rng;

    fn planner() -> LanguagePlanner {
        let cfg = RunConfig::micro();
        let mut rng = derive_rng(0, "lm-test");
        LanguagePlanner::new(&cfg.lm, cfg.vision.d, &mut rng)
    }

    fn random_frame(planner: &LanguagePlanner, seed: u64) -> FrameFeature {
        let mut rng = derive_rng(seed, "lm-frame");
        FrameFeature {
            vectors: Tensor::new(
                randn_vec(&mut rng, planner.cfg.qformer_queries * planner.cfg.d_lm),
                &[planner.cfg.qformer_queries, planner.cfg.d_lm],
            ),
        }
    }

    fn ctx_with_frames(planner: &LanguagePlanner, seeds: &[u64]) -> SequenceContext {
        let mut ctx = SequenceContext::new(planner.cfg.t_max);
        ctx.set_instruction(planner.tokenize_instruction("follow the lane"));
        for &s in seeds {
            ctx.push_frame(random_frame(planner, s));
        }
        ctx
    }

    #[test]
    fn output_shapes_match_query_counts() {
        let p = planner();
        let ctx = ctx_with_frames(&p, &[1, 2]);
        let (action, world) = p.forward_lm(&ctx).unwrap();
        assert_eq!(action.shape(), &[p.cfg.action_queries, p.cfg.d_lm]);
        assert_eq!(
            world.unwrap().shape(),
            &[p.cfg.world_queries, p.cfg.d_lm]
        );
    }

    #[test]
    fn tokenizer_is_deterministic_and_roundtrips() {
        let p = planner();
        assert_eq!(
            p.tokenize_instruction("turn left"),
            p.tokenize_instruction("turn left")
        );
        assert_eq!(
            p.tokenize_instruction(""),
            vec![p.vocab.bos_id(), p.vocab.eos_id()]
        );
        for s in crate::microworld::instructions::all_sentences() {
            assert_eq!(p.vocab.detokenize(&p.tokenize_instruction(&s)), s);
        }
    }

    #[test]
    fn compress_frame_emits_exactly_eight_vectors() {
        let cfg = RunConfig::micro();
        let mut rng = derive_rng(1, "lm-qf");
        let p = LanguagePlanner::new(&cfg.lm, cfg.vision.d, &mut rng);
        let n_tokens = cfg.vision.bev_h * cfg.vision.bev_w + 5;
        let tokens = crate::vision::VisionTokenSet {
            bev: Tensor::new(
                randn_vec(&mut rng, cfg.vision.bev_h * cfg.vision.bev_w * cfg.vision.d),
                &[cfg.vision.bev_h * cfg.vision.bev_w, cfg.vision.d],
            ),
            waypoint: Tensor::new(randn_vec(&mut rng, 4 * cfg.vision.d), &[4, cfg.vision.d]),
            light: Tensor::new(randn_vec(&mut rng, cfg.vision.d), &[1, cfg.vision.d]),
        };
        assert_eq!(tokens.token_count(), n_tokens);
        let feature = p.compress_frame(&tokens);
        assert_eq!(feature.vectors.shape(), &[8, cfg.lm.d_lm]);
        // compression ratio: many tokens in, 8 out
        assert!(n_tokens > 8 * 4, "compression must be substantial");
    }

    #[test]
    fn qformer_gradients_reach_every_bev_token() {
        let cfg = RunConfig::micro();
        let mut rng = derive_rng(2, "lm-qf-grad");
        let p = LanguagePlanner::new(&cfg.lm, cfg.vision.d, &mut rng);
        let n_bev = cfg.vision.bev_h * cfg.vision.bev_w;
        let bev = Tensor::leaf_grad(
            randn_vec(&mut rng, n_bev * cfg.vision.d),
            &[n_bev, cfg.vision.d],
        );
        let tokens = crate::vision::VisionTokenSet {
            bev: bev.clone(),
            waypoint: Tensor::new(randn_vec(&mut rng, 4 * cfg.vision.d), &[4, cfg.vision.d]),
            light: Tensor::new(randn_vec(&mut rng, cfg.vision.d), &[1, cfg.vision.d]),
        };
        let f = p.compress_frame(&tokens).vectors;
        let loss = f.mul(&f).mean_all();
        let grads = loss.backward();
        let g = grads.wrt(&bev).expect("no gradient reached the BEV tokens");
        let dead_rows: Vec<usize> = (0..n_bev)
            .filter(|r| {
                g[r * cfg.vision.d..(r + 1) * cfg.vision.d]
                    .iter()
                    .all(|&v| v == 0.0)
            })
            .collect();
        assert!(dead_rows.is_empty(), "dead attention paths: rows {dead_rows:?}");
    }

    #[test]
    fn world_queries_cannot_influence_action_features() {
        let p = planner();
        let ctx = ctx_with_frames(&p, &[3]);
        let (action_before, world_before) = p.forward_lm(&ctx).unwrap();
        // perturb only world-query parameters
        let wq = p.params.get("lm.world_queries").unwrap();
        let bumped: Vec<f64> = wq.value().data().iter().map(|v| v + 0.5).collect();
        wq.set_data(bumped);
        let (action_after, world_after) = p.forward_lm(&ctx).unwrap();
        assert_eq!(
            action_before.data(),
            action_after.data(),
            "action features must not depend on world queries (causal order)"
        );
        assert_ne!(world_before.unwrap().data(), world_after.unwrap().data());
    }

    #[test]
    fn ring_buffer_eviction_equals_explicit_truncation() {
        let p = planner();
        let t_max = p.cfg.t_max;
        // push t_max + 2 frames; the buffer must equal the last t_max
        let seeds: Vec<u64> = (0..t_max as u64 + 2).collect();
        let ctx_full = ctx_with_frames(&p, &seeds);
        let ctx_truncated = ctx_with_frames(&p, &seeds[2..]);
        assert_eq!(ctx_full.frame_count(), t_max);
        let (a1, w1) = p.forward_lm(&ctx_full).unwrap();
        let (a2, w2) = p.forward_lm(&ctx_truncated).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(w1.unwrap().data(), w2.unwrap().data());
    }

    #[test]
    fn t_max_one_depends_only_on_latest_frame() {
        let cfg = {
            let mut c = RunConfig::micro();
            c.lm.t_max = 1;
            c
        };
        let mut rng = derive_rng(4, "lm-tmax1");
        let p = LanguagePlanner::new(&cfg.lm, cfg.vision.d, &mut rng);
        let mut ctx_a = SequenceContext::new(1);
        ctx_a.set_instruction(p.tokenize_instruction("follow the lane"));
        let mut ctx_b = ctx_a.clone();
        // different older frames, same final frame
        ctx_a.push_frame(random_frame(&p, 10));
        ctx_a.push_frame(random_frame(&p, 99));
        ctx_b.push_frame(random_frame(&p, 20));
        ctx_b.push_frame(random_frame(&p, 99));
        let (a, _) = p.forward_lm(&ctx_a).unwrap();
        let (b, _) = p.forward_lm(&ctx_b).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reversed_history_changes_outputs() {
        let p = planner();
        let (a, _) = p.forward_lm(&ctx_with_frames(&p, &[5, 6])).unwrap();
        let (b, _) = p.forward_lm(&ctx_with_frames(&p, &[6, 5])).unwrap();
        assert_ne!(a.data(), b.data(), "temporal order must matter");
    }

    #[test]
    fn zeroed_action_head_gives_origin_waypoints_and_half_flag() {
        let p = planner();
        for name in ["lm.wp_head.fc1.w", "lm.wp_head.fc1.b", "lm.wp_head.fc2.w", "lm.wp_head.fc2.b"] {
            let v = p.params.get(name).unwrap();
            v.set_data(vec![0.0; v.numel()]);
        }
        for name in ["lm.flag_head.w", "lm.flag_head.b"] {
            let v = p.params.get(name).unwrap();
            v.set_data(vec![0.0; v.numel()]);
        }
        let ctx = ctx_with_frames(&p, &[7]);
        let (plan, world, _) = p.plan(&ctx, true).unwrap();
        assert_eq!(plan.waypoints, [[0.0, 0.0]; 4]);
        assert_eq!(plan.completed, 0.5);
        assert!(world.is_some());
    }

    #[test]
    fn context_overflow_is_reported() {
        let p = planner();
        let mut ctx = ctx_with_frames(&p, &[1]);
        ctx.set_instruction(vec![p.vocab.bos_id(); 200]);
        assert!(matches!(
            p.forward_lm(&ctx),
            Err(LmError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn no_world_query_configuration_skips_world_features() {
        let mut cfg = RunConfig::micro();
        cfg.lm.world_queries = 0;
        let mut rng = derive_rng(5, "lm-nowq");
        let p = LanguagePlanner::new(&cfg.lm, cfg.vision.d, &mut rng);
        let mut ctx = SequenceContext::new(p.cfg.t_max);
        ctx.set_instruction(p.tokenize_instruction("follow the lane"));
        ctx.push_frame(random_frame(&p, 1));
        let (action, world) = p.forward_lm(&ctx).unwrap();
        assert_eq!(action.shape()[0], p.cfg.action_queries);
        assert!(world.is_none());
    }

    #[test]
    fn action_head_jacobian_matches_finite_differences() {
        let p = planner();
        let ctx = ctx_with_frames(&p, &[8, 9]);
        let vars = [
            p.params.get("lm.wp_head.fc1.w").unwrap().as_ref(),
            p.params.get("lm.wp_head.fc2.w").unwrap().as_ref(),
            p.params.get("lm.action_queries").unwrap().as_ref(),
        ];
        let mut rng = derive_rng(6, "lm-grad");
        let report = gradcheck_loss(
            &vars,
            5,
            &mut rng,
            || {
                let (action, _) = p.forward_lm(&ctx).unwrap();
                let (wps, flag) = p.predict_actions(&action);
                wps.abs().mean_all().add(&flag.sigmoid().mean_all())
            },
            1e-5,
        );
        assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
    }
}
