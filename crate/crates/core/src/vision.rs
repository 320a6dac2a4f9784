//! Per-frame perception: multi-view encoding, BEV query decoding, and the
//! Stage-1 perception heads.
//!
//! Each view passes a small residual backbone (overall stride 8), is
//! flattened to tokens, tagged with view-id and cell-position embeddings,
//! and fused by a transformer encoder. Learned BEV positional encodings,
//! four waypoint queries, and one traffic-light query then cross-attend to
//! the fused tokens, producing the fixed token set consumed by the planner.

use crate::config::{MicroworldConfig, VisionConfig};
use crate::microworld::expert::expert_waypoints;
use crate::microworld::render::MultiViewFrame;
use crate::microworld::world::{AgentKind, LightState, WorldState};
use crate::nn::{CrossAttentionBlock, Linear, Mlp, ParamSet, Tensor, TransformerBlock, Var};
use crate::rng::randn_vec;
use crate::util::wrap_angle;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

/// H*W BEV tokens + 4 waypoint tokens + 1 traffic-light token.
pub struct VisionTokenSet {
    pub bev: Tensor,
    pub waypoint: Tensor,
    pub light: Tensor,
}

impl VisionTokenSet {
    pub fn token_count(&self) -> usize {
        self.bev.shape()[0] + self.waypoint.shape()[0] + self.light.shape()[0]
    }

    /// All tokens stacked: [H*W + 4 + 1, d].
    pub fn all(&self) -> Tensor {
        Tensor::concat(&[self.bev.clone(), self.waypoint.clone(), self.light.clone()], 0)
    }

    pub fn all_finite(&self) -> bool {
        self.bev.data().iter().all(|v| v.is_finite())
            && self.waypoint.data().iter().all(|v| v.is_finite())
            && self.light.data().iter().all(|v| v.is_finite())
    }
}

/// Traffic light class for the recognition head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightClass {
    Red,
    Green,
    None,
}

impl LightClass {
    pub fn index(self) -> usize {
        match self {
            LightClass::Red => 0,
            LightClass::Green => 1,
            LightClass::None => 2,
        }
    }
}

/// One ground-truth box in the ego BEV frame.
#[derive(Debug, Clone, Copy)]
pub struct BevBox {
    pub kind: AgentKind,
    /// Center (x forward, y left), meters.
    pub center: [f64; 2],
    /// Half extents (length, width), meters.
    pub extent: [f64; 2],
    /// Yaw relative to the ego heading.
    pub yaw: f64,
}

#[derive(Debug, Clone)]
pub struct PerceptionTargets {
    pub boxes: Vec<BevBox>,
    pub light: LightClass,
    pub expert_waypoints: [[f64; 2]; 4],
}

/// Ground-truth perception targets for a world state.
pub fn targets_from_state(
    state: &WorldState,
    mcfg: &MicroworldConfig,
    vcfg: &VisionConfig,
) -> PerceptionTargets {
    let mut boxes = Vec::new();
    for agent in state.agents() {
        let local = state.ego.to_local(agent.pose.pos);
        if local.x.abs() < vcfg.bev_range && local.y.abs() < vcfg.bev_range {
            boxes.push(BevBox {
                kind: agent.kind,
                center: [local.x, local.y],
                extent: [agent.half_len, agent.half_wid],
                yaw: wrap_angle(agent.pose.heading - state.ego.heading),
            });
        }
    }
    let s_ego = state.route_arclen();
    let mut light = LightClass::None;
    let mut best = f64::INFINITY;
    for l in &state.def.lights {
        let ahead = l.stop_s - s_ego;
        if ahead > -2.0 && ahead < 25.0 && ahead < best {
            best = ahead;
            light = match l.state_at(state.clock) {
                LightState::Red => LightClass::Red,
                LightState::Green => LightClass::Green,
            };
        }
    }
    PerceptionTargets {
        boxes,
        light,
        expert_waypoints: expert_waypoints(state, mcfg),
    }
}

struct ConvStage {
    down_w: Arc<Var>,
    down_b: Arc<Var>,
    res1_w: Arc<Var>,
    res1_b: Arc<Var>,
    res2_w: Arc<Var>,
    res2_b: Arc<Var>,
}

impl ConvStage {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> ConvStage {
        let conv_init = |rng: &mut ChaCha12Rng, ci: usize, co: usize| {
            let std = 1.0 / ((ci * 9) as f64).sqrt();
            randn_vec(rng, co * ci * 9)
                .into_iter()
                .map(|x| x * std)
                .collect::<Vec<f64>>()
        };
        ConvStage {
            down_w: ps.add(Var::new(
                format!("{name}.down.w"),
                conv_init(rng, c_in, c_out),
                &[c_out, c_in, 3, 3],
            )),
            down_b: ps.add(Var::new(format!("{name}.down.b"), vec![0.0; c_out], &[c_out])),
            res1_w: ps.add(Var::new(
                format!("{name}.res1.w"),
                conv_init(rng, c_out, c_out),
                &[c_out, c_out, 3, 3],
            )),
            res1_b: ps.add(Var::new(format!("{name}.res1.b"), vec![0.0; c_out], &[c_out])),
            res2_w: ps.add(Var::new(
                format!("{name}.res2.w"),
                conv_init(rng, c_out, c_out),
                &[c_out, c_out, 3, 3],
            )),
            res2_b: ps.add(Var::new(format!("{name}.res2.b"), vec![0.0; c_out], &[c_out])),
        }
    }

    fn forward(&self, x: &Tensor, stride: usize) -> Tensor {
        let down = x
            .conv2d(&self.down_w.value(), Some(&self.down_b.value()), stride, 1)
            .silu();
        let h = down
            .conv2d(&self.res1_w.value(), Some(&self.res1_b.value()), 1, 1)
            .silu()
            .conv2d(&self.res2_w.value(), Some(&self.res2_b.value()), 1, 1);
        down.add(&h).silu()
    }
}

pub struct VisionEncoder {
    pub cfg: VisionConfig,
    raster_size: usize,
    stages: Vec<ConvStage>,
    proj: Linear,
    view_embed: Arc<Var>,
    cell_embed: Arc<Var>,
    fusion: Vec<TransformerBlock>,
    bev_queries: Arc<Var>,
    wp_queries: Arc<Var>,
    light_query: Arc<Var>,
    decoder: Vec<CrossAttentionBlock>,
    pub params: ParamSet,
}

impl VisionEncoder {
    pub fn new(cfg: &VisionConfig, raster_size: usize, rng: &mut ChaCha12Rng) -> VisionEncoder {
        assert_eq!(cfg.backbone_channels.len(), 4, "backbone has 4 stages");
        assert_eq!(raster_size % 8, 0, "raster size must divide the stride 8");
        let mut ps = ParamSet::new();
        let ch = &cfg.backbone_channels;
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in ch.iter().enumerate() {
            stages.push(ConvStage::new(&mut ps, rng, &format!("vision.stage{i}"), c_in, c_out));
            c_in = c_out;
        }
        let cells = (raster_size / 8) * (raster_size / 8);
        let d = cfg.d;
        let proj = Linear::new(&mut ps, rng, "vision.proj", *ch.last().unwrap(), d, true);
        let view_embed = ps.add(Var::new(
            "vision.view_embed",
            randn_vec(rng, 3 * d).into_iter().map(|x| 0.02 * x).collect::<Vec<_>>(),
            &[3, d],
        ));
        let cell_embed = ps.add(Var::new(
            "vision.cell_embed",
            randn_vec(rng, cells * d).into_iter().map(|x| 0.02 * x).collect::<Vec<_>>(),
            &[cells, d],
        ));
        let fusion = (0..cfg.fusion_layers)
            .map(|i| {
                TransformerBlock::new(&mut ps, rng, &format!("vision.fusion{i}"), d, cfg.fusion_heads)
            })
            .collect();
        let bev_queries = ps.add(Var::new(
            "vision.bev_queries",
            randn_vec(rng, cfg.bev_h * cfg.bev_w * d)
                .into_iter()
                .map(|x| 0.02 * x)
                .collect::<Vec<_>>(),
            &[cfg.bev_h * cfg.bev_w, d],
        ));
        let wp_queries = ps.add(Var::new(
            "vision.wp_queries",
            randn_vec(rng, 4 * d).into_iter().map(|x| 0.02 * x).collect::<Vec<_>>(),
            &[4, d],
        ));
        let light_query = ps.add(Var::new(
            "vision.light_query",
            randn_vec(rng, d).into_iter().map(|x| 0.02 * x).collect::<Vec<_>>(),
            &[1, d],
        ));
        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                CrossAttentionBlock::new(
                    &mut ps,
                    rng,
                    &format!("vision.decoder{i}"),
                    d,
                    d,
                    cfg.fusion_heads,
                )
            })
            .collect();
        VisionEncoder {
            cfg: cfg.clone(),
            raster_size,
            stages,
            proj,
            view_embed,
            cell_embed,
            fusion,
            bev_queries,
            wp_queries,
            light_query,
            decoder,
            params: ps,
        }
    }

    /// Feature-map cells per view at the configured raster size.
    pub fn cells_per_view(&self) -> usize {
        (self.raster_size / 8) * (self.raster_size / 8)
    }

    fn backbone(&self, img: &Tensor) -> Tensor {
        // [1,3,h,w] -> [cells, c_last]
        let mut x = img.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            x = stage.forward(&x, stride);
        }
        let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        x.reshape(&[c, hw]).transpose2()
    }

    /// Per-view image tensors [1,3,h,w] with explicit view ids -> fused
    /// tokens [3*cells, d]. View ids index the view-id embedding, letting
    /// tests permute views together with their embeddings.
    pub fn encode_views_with_ids(&self, images: &[Tensor], ids: &[usize]) -> Tensor {
        assert_eq!(images.len(), 3, "exactly 3 views");
        assert_eq!(ids.len(), 3);
        for img in images {
            assert_eq!(
                img.shape(),
                &[1, 3, self.raster_size, self.raster_size],
                "view resolution mismatch"
            );
        }
        let view_embed = self.view_embed.value();
        let cell_embed = self.cell_embed.value();
        let mut per_view = Vec::new();
        for (img, &id) in images.iter().zip(ids) {
            let feats = self.proj.forward(&self.backbone(img));
            let cells = feats.shape()[0];
            let ve = view_embed.index_select0(&vec![id; cells]);
            per_view.push(feats.add(&cell_embed).add(&ve));
        }
        let tokens = Tensor::concat(&per_view, 0);
        let l = tokens.shape()[0];
        let mut x = tokens.reshape(&[1, l, self.cfg.d]);
        for blk in &self.fusion {
            x = blk.forward(&x, None);
        }
        x.reshape(&[l, self.cfg.d])
    }

    /// Multi-view frame -> fused tokens [3*cells, d].
    pub fn encode_views(&self, frame: &MultiViewFrame) -> Tensor {
        let images: Vec<Tensor> = frame
            .images
            .iter()
            .map(|img| Tensor::new(img.to_chw(), &[1, 3, img.h, img.w]))
            .collect();
        self.encode_views_with_ids(&images, &[0, 1, 2])
    }

    /// Fused tokens -> the fixed vision token set.
    pub fn decode_bev(&self, fused: &Tensor) -> VisionTokenSet {
        let queries = Tensor::concat(
            &[
                self.bev_queries.value(),
                self.wp_queries.value(),
                self.light_query.value(),
            ],
            0,
        );
        let lq = queries.shape()[0];
        let mut x = queries.reshape(&[1, lq, self.cfg.d]);
        let cond = fused.reshape(&[1, fused.shape()[0], self.cfg.d]);
        for blk in &self.decoder {
            x = blk.forward(&x, &cond);
        }
        let x = x.reshape(&[lq, self.cfg.d]);
        let n_bev = self.cfg.bev_h * self.cfg.bev_w;
        VisionTokenSet {
            bev: x.narrow(0, 0, n_bev),
            waypoint: x.narrow(0, n_bev, 4),
            light: x.narrow(0, n_bev + 4, 1),
        }
    }

    pub fn forward(&self, frame: &MultiViewFrame) -> VisionTokenSet {
        self.decode_bev(&self.encode_views(frame))
    }
}

/// Detection head output layout per BEV cell.
pub const DET_FIELDS: usize = 8; // [objectness, class, dx, dy, log_l, log_w, sin, cos]

/// Stage-1 perception heads; discarded from Stage-2+ checkpoints.
pub struct PerceptionHeads {
    det: Linear,
    wp: Mlp,
    light: Linear,
    pub params: ParamSet,
}

impl PerceptionHeads {
    pub fn new(cfg: &VisionConfig, rng: &mut ChaCha12Rng) -> PerceptionHeads {
        let mut ps = ParamSet::new();
        let det = Linear::new(&mut ps, rng, "heads.det", cfg.d, DET_FIELDS, true);
        let wp = Mlp::new(&mut ps, rng, "heads.wp", cfg.d, cfg.d, 2);
        let light = Linear::new(&mut ps, rng, "heads.light", cfg.d, 3, true);
        PerceptionHeads {
            det,
            wp,
            light,
            params: ps,
        }
    }

    pub fn waypoints(&self, tokens: &VisionTokenSet) -> Tensor {
        self.wp.forward(&tokens.waypoint)
    }

    pub fn light_logits(&self, tokens: &VisionTokenSet) -> Tensor {
        self.light.forward(&tokens.light)
    }

    pub fn det_grid(&self, tokens: &VisionTokenSet) -> Tensor {
        self.det.forward(&tokens.bev)
    }
}

/// Greedy center matching: each box claims the BEV cell containing its
/// center; on conflict the box nearer the cell center wins.
pub fn match_boxes_to_cells(boxes: &[BevBox], cfg: &VisionConfig) -> Vec<Option<usize>> {
    let (h, w, range) = (cfg.bev_h, cfg.bev_w, cfg.bev_range);
    let mut assignment: Vec<Option<usize>> = vec![None; h * w];
    let mut claim_dist = vec![f64::INFINITY; h * w];
    for (bi, b) in boxes.iter().enumerate() {
        let cell = 2.0 * range / h as f64;
        let row = ((range - b.center[0]) / cell).floor();
        let col = ((range - b.center[1]) / cell).floor();
        if row < 0.0 || col < 0.0 || row >= h as f64 || col >= w as f64 {
            continue;
        }
        let idx = row as usize * w + col as usize;
        let cx = range - (row + 0.5) * cell;
        let cy = range - (col + 0.5) * cell;
        let d = (b.center[0] - cx).hypot(b.center[1] - cy);
        if d < claim_dist[idx] {
            claim_dist[idx] = d;
            assignment[idx] = Some(bi);
        }
    }
    assignment
}

/// The three Stage-1 losses: (detection, waypoint l1, traffic light ce).
pub fn pretrain_losses(
    tokens: &VisionTokenSet,
    targets: &PerceptionTargets,
    heads: &PerceptionHeads,
    cfg: &VisionConfig,
) -> (Tensor, Tensor, Tensor) {
    // detection: objectness BCE over every cell + class/box terms on matches
    let grid = heads.det_grid(tokens); // [H*W, 8]
    let n_cells = grid.shape()[0];
    let assignment = match_boxes_to_cells(&targets.boxes, cfg);
    let mut obj_target = vec![0.0; n_cells];
    for (i, a) in assignment.iter().enumerate() {
        if a.is_some() {
            obj_target[i] = 1.0;
        }
    }
    let obj_logits = grid.narrow(1, 0, 1).reshape(&[n_cells]);
    let mut loss_det = obj_logits.bce_with_logits(&Tensor::new(obj_target, &[n_cells]));
    let matched: Vec<(usize, &BevBox)> = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|bi| (i, &targets.boxes[bi])))
        .collect();
    if !matched.is_empty() {
        let cell = 2.0 * cfg.bev_range / cfg.bev_h as f64;
        let rows: Vec<usize> = matched.iter().map(|(i, _)| *i).collect();
        let picked = grid.index_select0(&rows); // [M, 8]
        let m = matched.len();
        let class_logits = picked.narrow(1, 1, 1).reshape(&[m]);
        let class_target: Vec<f64> = matched
            .iter()
            .map(|(_, b)| if b.kind == AgentKind::Vehicle { 1.0 } else { 0.0 })
            .collect();
        let loss_class = class_logits.bce_with_logits(&Tensor::new(class_target, &[m]));
        let mut reg_target = Vec::with_capacity(m * 6);
        for (i, b) in &matched {
            let row = (i / cfg.bev_w) as f64;
            let col = (i % cfg.bev_w) as f64;
            let cx = cfg.bev_range - (row + 0.5) * cell;
            let cy = cfg.bev_range - (col + 0.5) * cell;
            reg_target.extend_from_slice(&[
                (b.center[0] - cx) / cell,
                (b.center[1] - cy) / cell,
                b.extent[0].ln(),
                b.extent[1].ln(),
                b.yaw.sin(),
                b.yaw.cos(),
            ]);
        }
        let reg = picked.narrow(1, 2, 6);
        let loss_reg = reg.sub(&Tensor::new(reg_target, &[m, 6])).abs().mean_all();
        loss_det = loss_det.add(&loss_class).add(&loss_reg);
    }

    // waypoint l1: mean absolute error over the 4 predicted waypoints
    let wp_pred = heads.waypoints(tokens); // [4, 2]
    let wp_target: Vec<f64> = targets.expert_waypoints.iter().flatten().copied().collect();
    let loss_wp = wp_pred.sub(&Tensor::new(wp_target, &[4, 2])).abs().mean_all();

    // traffic light cross-entropy over {red, green, none}
    let loss_light = heads
        .light_logits(tokens)
        .cross_entropy_logits(&[targets.light.index()]);

    (loss_det, loss_wp, loss_light)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::microworld::geometry::{Polyline, Pose, Vec2};
    use crate::microworld::render::render_views;
    use crate::microworld::world::{Road, SegmentInfo, SegmentKind, WorldDef, WorldState};
    use crate::nn::gradcheck_loss;
    use crate::rng::derive_rng;
    use std::sync::Arc;

    fn micro() -> RunConfig {
        RunConfig::micro()
    }

    fn test_state() -> WorldState {
        let pts: Vec<Vec2> = (0..30).map(|i| Vec2::new(i as f64 * 2.0, 0.0)).collect();
        let route = Polyline::new(pts.clone());
        let end_s = route.total_len();
        let def = Arc::new(WorldDef {
            roads: vec![Road {
                points: pts,
                width: 8.0,
            }],
            route,
            agents: vec![],
            lights: vec![],
            segments: vec![SegmentInfo {
                end_s,
                kind: SegmentKind::Straight,
            }],
        });
        WorldState::new(def, Pose::new(6.0, 0.0, 0.0), 4.0)
    }

    #[test]
    fn fused_token_count_matches_stride_arithmetic() {
        let cfg = micro();
        let mut rng = derive_rng(0, "vision-test");
        let enc = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng);
        let frame = render_views(&test_state(), &cfg.microworld);
        let fused = enc.encode_views(&frame);
        let cells = (cfg.microworld.raster_size / 8) * (cfg.microworld.raster_size / 8);
        assert_eq!(fused.shape(), &[3 * cells, cfg.vision.d]);
    }

    #[test]
    fn desk_config_yields_192_fused_tokens() {
        let cfg = RunConfig::default();
        let mut rng = derive_rng(0, "vision-desk");
        let enc = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng);
        assert_eq!(3 * enc.cells_per_view(), 192);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = micro();
        let mut rng = derive_rng(1, "vision-det");
        let enc = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng);
        let frame = render_views(&test_state(), &cfg.microworld);
        let a = enc.encode_views(&frame);
        let b = enc.encode_views(&frame);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn view_permutation_with_matching_ids_is_invariant() {
        let cfg = micro();
        let mut rng = derive_rng(2, "vision-perm");
        let enc = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng);
        let frame = render_views(&test_state(), &cfg.microworld);
        let imgs: Vec<Tensor> = frame
            .images
            .iter()
            .map(|img| Tensor::new(img.to_chw(), &[1, 3, img.h, img.w]))
            .collect();
        let base = enc.decode_bev(&enc.encode_views_with_ids(&imgs, &[0, 1, 2]));
        let permuted_imgs = vec![imgs[2].clone(), imgs[0].clone(), imgs[1].clone()];
        let permuted = enc.decode_bev(&enc.encode_views_with_ids(&permuted_imgs, &[2, 0, 1]));
        for (a, b) in base.bev.data().iter().zip(permuted.bev.data()) {
            assert!((a - b).abs() < 1e-9, "BEV output changed under view permutation");
        }
    }

    #[test]
    fn token_set_counts_hold_for_any_grid() {
        let cfg = micro();
        let mut rng = derive_rng(3, "vision-count");
        let enc = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng);
        let frame = render_views(&test_state(), &cfg.microworld);
        let tokens = enc.forward(&frame);
        assert_eq!(
            tokens.token_count(),
            cfg.vision.bev_h * cfg.vision.bev_w + 4 + 1
        );
        assert!(tokens.all_finite());
    }

    #[test]
    fn zeroed_fused_tokens_give_frame_independent_output() {
        let cfg = micro();
        let mut rng = derive_rng(4, "vision-zero");
        let enc = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng);
        let cells = 3 * enc.cells_per_view();
        let zeros = Tensor::zeros(&[cells, cfg.vision.d]);
        let a = enc.decode_bev(&zeros);
        let b = enc.decode_bev(&zeros);
        assert_eq!(a.all().data(), b.all().data());
    }

    #[test]
    fn perfect_waypoints_and_uniform_light_logits() {
        let cfg = micro();
        let mut rng = derive_rng(5, "vision-loss");
        let enc = VisionEncoder::new(&cfg.vision, cfg.microworld.raster_size, &mut rng);
        let heads = PerceptionHeads::new(&cfg.vision, &mut rng);
        let state = test_state();
        let frame = render_views(&state, &cfg.microworld);
        let tokens = enc.forward(&frame);
        let mut targets = targets_from_state(&state, &cfg.microworld, &cfg.vision);

        // force the waypoint head output to equal the target -> loss_wp = 0
        let pred = heads.waypoints(&tokens);
        targets.expert_waypoints = [
            [pred.data()[0], pred.data()[1]],
            [pred.data()[2], pred.data()[3]],
            [pred.data()[4], pred.data()[5]],
            [pred.data()[6], pred.data()[7]],
        ];
        let (_, loss_wp, _) = pretrain_losses(&tokens, &targets, &heads, &cfg.vision);
        assert!(loss_wp.item() < 1e-12);

        // zero light head -> uniform logits -> ce = ln 3
        heads.light.w.set_data(vec![0.0; cfg.vision.d * 3]);
        heads.light.b.as_ref().unwrap().set_data(vec![0.0; 3]);
        let (_, _, loss_light) = pretrain_losses(&tokens, &targets, &heads, &cfg.vision);
        assert!((loss_light.item() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_matches_brute_force_matcher() {
        let cfg = micro();
        let vcfg = &cfg.vision;
        // brute-force matcher: for every cell find the box whose center lies
        // inside and is nearest to the cell center
        let boxes = vec![
            BevBox {
                kind: AgentKind::Vehicle,
                center: [3.0, 1.0],
                extent: [2.0, 1.0],
                yaw: 0.3,
            },
            BevBox {
                kind: AgentKind::Pedestrian,
                center: [-2.0, -4.0],
                extent: [0.35, 0.35],
                yaw: 0.0,
            },
            BevBox {
                kind: AgentKind::Vehicle,
                center: [3.2, 1.2],
                extent: [2.0, 1.0],
                yaw: 0.0,
            },
        ];
        let fast = match_boxes_to_cells(&boxes, vcfg);
        let cell = 2.0 * vcfg.bev_range / vcfg.bev_h as f64;
        for i in 0..vcfg.bev_h * vcfg.bev_w {
            let row = (i / vcfg.bev_w) as f64;
            let col = (i % vcfg.bev_w) as f64;
            let cx = vcfg.bev_range - (row + 0.5) * cell;
            let cy = vcfg.bev_range - (col + 0.5) * cell;
            let mut best: Option<usize> = None;
            let mut best_d = f64::INFINITY;
            for (bi, b) in boxes.iter().enumerate() {
                let inside = (b.center[0] - cx).abs() <= cell / 2.0
                    && (b.center[1] - cy).abs() <= cell / 2.0;
                let d = (b.center[0] - cx).hypot(b.center[1] - cy);
                if inside && d < best_d {
                    best_d = d;
                    best = Some(bi);
                }
            }
            assert_eq!(fast[i], best, "cell {i}");
        }

        // empty targets reduce to the background-only objectness term
        let mut rng = derive_rng(6, "vision-det");
        let enc = VisionEncoder::new(vcfg, cfg.microworld.raster_size, &mut rng);
        let heads = PerceptionHeads::new(vcfg, &mut rng);
        let frame = render_views(&test_state(), &cfg.microworld);
        let tokens = enc.forward(&frame);
        let empty = PerceptionTargets {
            boxes: vec![],
            light: LightClass::None,
            expert_waypoints: [[0.0; 2]; 4],
        };
        let (loss_det, _, _) = pretrain_losses(&tokens, &empty, &heads, vcfg);
        let grid = heads.det_grid(&tokens);
        let n = grid.shape()[0];
        let obj = grid.narrow(1, 0, 1).reshape(&[n]);
        let expected = obj.bce_with_logits(&Tensor::zeros(&[n])).item();
        assert!((loss_det.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn bev_decoder_gradients_match_finite_differences() {
        let mut cfg = micro();
        cfg.vision.bev_h = 3;
        cfg.vision.bev_w = 3;
        cfg.vision.d = 16;
        cfg.vision.backbone_channels = vec![4, 6, 8, 8];
        cfg.vision.fusion_heads = 2;
        let mut rng = derive_rng(7, "vision-grad");
        let enc = VisionEncoder::new(&cfg.vision, 16, &mut rng);
        let heads = PerceptionHeads::new(&cfg.vision, &mut rng);
        let fused = Tensor::new(
            randn_vec(&mut rng, 3 * 4 * cfg.vision.d),
            &[12, cfg.vision.d],
        );
        let targets = PerceptionTargets {
            boxes: vec![BevBox {
                kind: AgentKind::Vehicle,
                center: [2.0, 0.5],
                extent: [2.0, 1.0],
                yaw: 0.1,
            }],
            light: LightClass::Red,
            expert_waypoints: [[1.0, 0.0], [2.0, 0.0], [3.0, 0.1], [4.0, 0.2]],
        };
        let vars = [
            enc.params.get("vision.bev_queries").unwrap().as_ref(),
            enc.params.get("vision.decoder0.attn.wq.w").unwrap().as_ref(),
            heads.params.get("heads.det.w").unwrap().as_ref(),
        ];
        let mut check_rng = derive_rng(8, "vision-grad-coords");
        let report = gradcheck_loss(
            &vars,
            6,
            &mut check_rng,
            || {
                let tokens = enc.decode_bev(&fused);
                let (d, w, l) = pretrain_losses(&tokens, &targets, &heads, &cfg.vision);
                d.add(&w).add(&l)
            },
            1e-5,
        );
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {}",
            report.max_rel_err
        );
    }
}
