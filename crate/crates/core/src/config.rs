//! Layered run configuration: defaults -> file -> command-line overrides.
//!
//! Every field has a default, unknown keys are rejected, and the effective
//! config hash is stamped into all outputs.

use crate::util::sha256_hex;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MicroworldConfig {
    /// Square raster side (pixels) for each camera view.
    pub raster_size: usize,
    /// Forward extent of a view in meters; lateral extent is the same.
    pub view_range: f64,
    /// Rear margin of the raster behind the camera origin, meters.
    pub view_rear_margin: f64,
    /// Yaw offsets of the side cameras in degrees (left positive).
    pub side_yaw_deg: f64,
    /// Simulation step, seconds (10 Hz).
    pub dt: f64,
    pub wheelbase: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub max_brake: f64,
    /// Exponential speed decay with zero pedal input, 1/s.
    pub friction: f64,
    /// Max steering wheel angle in radians at steer = 1.
    pub max_steer: f64,
    /// Lateral route-deviation tolerance, meters.
    pub deviation_tolerance: f64,
    /// Expert cruise speed, m/s.
    pub cruise_speed: f64,
    pub ego_half_len: f64,
    pub ego_half_wid: f64,
}

impl Default for MicroworldConfig {
    fn default() -> Self {
        MicroworldConfig {
            raster_size: 64,
            view_range: 28.0,
            view_rear_margin: 4.0,
            side_yaw_deg: 60.0,
            dt: 0.1,
            wheelbase: 2.5,
            max_speed: 10.0,
            max_accel: 4.0,
            max_brake: 8.0,
            friction: 0.1,
            max_steer: 0.6,
            deviation_tolerance: 3.0,
            cruise_speed: 5.0,
            ego_half_len: 2.0,
            ego_half_wid: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    /// Feature width of vision tokens.
    pub d: usize,
    /// BEV grid side; the decoder emits bev_h * bev_w + 4 + 1 tokens.
    pub bev_h: usize,
    pub bev_w: usize,
    /// BEV half-range in meters (grid covers +-bev_range around the ego).
    pub bev_range: f64,
    /// Backbone channel widths; three of the four stages stride by 2 for an
    /// overall stride of 8.
    pub backbone_channels: Vec<usize>,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub decoder_layers: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            d: 128,
            bev_h: 20,
            bev_w: 20,
            bev_range: 20.0,
            backbone_channels: vec![32, 64, 96, 128],
            fusion_layers: 2,
            fusion_heads: 4,
            decoder_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    /// Q-Former learnable queries per frame.
    pub qformer_queries: usize,
    pub qformer_layers: usize,
    /// Learnable action queries (one per predicted waypoint).
    pub action_queries: usize,
    /// Learnable world queries conditioning the generator.
    pub world_queries: usize,
    /// Frame-history ring-buffer capacity.
    pub t_max: usize,
    /// Instruction token budget (BOS/EOS included).
    pub max_instruction_tokens: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_lm: 256,
            layers: 4,
            heads: 4,
            qformer_queries: 8,
            qformer_layers: 2,
            action_queries: 4,
            world_queries: 64,
            t_max: 8,
            max_instruction_tokens: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Conditioning feature width (appearance tokens and fused embeddings).
    pub d_cond: usize,
    /// Appearance encoder channel widths (stride 2 each).
    pub appearance_channels: Vec<usize>,
    /// U-Net resolution widths, top to bottom.
    pub unet_channels: Vec<usize>,
    pub unet_heads: usize,
    /// Generated clip length in frames.
    pub clip_frames: usize,
    /// Diffusion steps.
    pub t_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_cond: 128,
            appearance_channels: vec![32, 64, 128],
            unet_channels: vec![64, 128, 128],
            unet_heads: 4,
            clip_frames: 8,
            t_diff: 100,
            // Linear schedule scaled so that alpha_bar at t_diff is ~0 and
            // the terminal forward-noising distribution matches N(0,1).
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            kp: 0.5,
            ki: 0.05,
            kd: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub longitudinal: PidGains,
    pub lateral: PidGains,
    pub integral_clamp: f64,
    /// Which waypoint the lateral controller aims at (0-based).
    pub lookahead_index: usize,
    /// Seconds between consecutive waypoints.
    pub waypoint_dt: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            longitudinal: PidGains {
                kp: 0.5,
                ki: 0.05,
                kd: 0.1,
            },
            lateral: PidGains {
                kp: 1.0,
                ki: 0.0,
                kd: 0.2,
            },
            integral_clamp: 2.0,
            lookahead_index: 1,
            waypoint_dt: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Stage-3 autoregressive rollout depth (2 or 3).
    pub rollout_depth: usize,
    /// Sampler timestep stride when generating Stage-3 context clips
    /// (1 = full ancestral sampling).
    pub stage3_context_stride: usize,
    /// Stage-1 loss weights: detection, waypoint, traffic light.
    pub w_det: f64,
    pub w_wp_stage1: f64,
    pub w_light: f64,
    /// Stage-2/3 loss weights: waypoint, completion flag, diffusion.
    pub w_wp: f64,
    pub w_flag: f64,
    pub w_dm: f64,
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            stage1_iters: 2000,
            stage2_iters: 2000,
            stage3_iters: 1000,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            rollout_depth: 2,
            stage3_context_stride: 1,
            w_det: 1.0,
            w_wp_stage1: 1.0,
            w_light: 1.0,
            w_wp: 1.0,
            w_flag: 0.5,
            w_dm: 1.0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluation runs (distinct seeds) aggregated into mean +- std.
    pub runs: usize,
    pub max_steps: usize,
    pub penalty_collision_pedestrian: f64,
    pub penalty_collision_vehicle: f64,
    pub penalty_red_light: f64,
    /// Fréchet proxy feature dimension.
    pub feature_dim: usize,
    /// Long-horizon study horizons in frames.
    pub horizons: Vec<usize>,
    /// Scenario count for generation-quality studies.
    pub study_scenarios: usize,
    pub bootstrap_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            runs: 3,
            max_steps: 400,
            penalty_collision_pedestrian: 0.5,
            penalty_collision_vehicle: 0.6,
            penalty_red_light: 0.7,
            feature_dim: 32,
            horizons: vec![8, 16, 24, 32, 64, 128],
            study_scenarios: 20,
            bootstrap_samples: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenarios to generate for the training split.
    pub train_scenarios: usize,
    /// Held-out evaluation routes.
    pub eval_scenarios: usize,
    /// Steps per collected episode.
    pub steps_per_episode: usize,
    /// Fraction of training episodes that start laterally offset from the
    /// route so the expert demonstrates recovery steering.
    pub perturb_fraction: f64,
    /// Training episodes spawn anywhere in [0, this fraction] of the route
    /// so every segment kind is represented in short episodes.
    pub start_fraction_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub microworld: MicroworldConfig,
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub generator: GeneratorConfig,
    pub control: ControlConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            microworld: MicroworldConfig::default(),
            vision: VisionConfig::default(),
            lm: LmConfig::default(),
            generator: GeneratorConfig::default(),
            control: ControlConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig {
                train_scenarios: 100,
                eval_scenarios: 10,
                steps_per_episode: 50,
                perturb_fraction: 0.3,
                start_fraction_max: 0.6,
            },
        }
    }
}

impl RunConfig {
    /// Reduced widths for fast tests and the acceptance harness. Token-count
    /// contracts (8 Q-Former queries, 4 waypoints, 3 views, 8 clip frames)
    /// and the curriculum structure are unchanged; only capacity shrinks.
    pub fn micro() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.microworld.raster_size = 16;
        cfg.microworld.view_range = 20.0;
        cfg.microworld.view_rear_margin = 3.0;
        cfg.vision.d = 24;
        cfg.vision.bev_h = 6;
        cfg.vision.bev_w = 6;
        cfg.vision.bev_range = 16.0;
        cfg.vision.backbone_channels = vec![6, 12, 18, 24];
        cfg.vision.fusion_layers = 1;
        cfg.vision.fusion_heads = 2;
        cfg.vision.decoder_layers = 1;
        cfg.lm.d_lm = 48;
        cfg.lm.layers = 2;
        cfg.lm.heads = 2;
        cfg.lm.qformer_layers = 1;
        cfg.lm.world_queries = 16;
        cfg.generator.d_cond = 12;
        cfg.generator.appearance_channels = vec![4, 8, 12];
        cfg.generator.unet_channels = vec![6, 12, 12];
        cfg.generator.unet_heads = 2;
        cfg.generator.t_diff = 15;
        cfg.generator.beta_start = 8e-3;
        cfg.generator.beta_end = 0.65;
        cfg.training.batch_size = 2;
        cfg.training.lr = 3e-4;
        cfg.training.stage3_context_stride = 5;
        cfg.eval.feature_dim = 16;
        cfg.eval.study_scenarios = 20;
        cfg.data.train_scenarios = 30;
        cfg.data.eval_scenarios = 10;
        cfg.data.steps_per_episode = 40;
        cfg
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()).map_err(|e| ConfigError::Io(e.to_string()))
    }

    /// Hash of the effective configuration (stamped into outputs).
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io error: {0}")]
    Io(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_hash_stability() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = "nonsense_key = 3\n";
        assert!(toml::from_str::<RunConfig>(bad).is_err());
        let nested = "[lm]\nbogus = 1\n";
        assert!(toml::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let partial = "[training]\nstage1_iters = 7\n";
        let cfg: RunConfig = toml::from_str(partial).unwrap();
        assert_eq!(cfg.training.stage1_iters, 7);
        assert_eq!(cfg.training.stage2_iters, RunConfig::default().training.stage2_iters);
    }
}
