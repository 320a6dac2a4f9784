//! Long-horizon generation study: autoregressive vs teacher-forced rollouts
//! scored with proxy FID/FVD against ground-truth simulator clips.

use super::agent::ModelAgent;
use super::frechet::frechet_feature_distance;
use super::proxy::ProxyNets;
use crate::config::RunConfig;
use crate::microworld::episode::{run_episode, EpisodeOptions, ExpertPolicy};
use crate::microworld::render::MultiViewFrame;
use crate::microworld::scenario::{generate_scenario, Scenario, ScenarioGenOptions};
use crate::nn::Tensor;
use crate::rng::derive_rng;
use crate::training::DrivingStack;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenQualityReport {
    pub horizon: usize,
    pub fid_proxy: f64,
    pub fvd_proxy: f64,
    pub samples: usize,
    pub proxy_hash: String,
    pub regularized: bool,
}

/// Ground truth for one study scenario: the conditioning frame plus the
/// expert-driven future frames.
pub struct StudyScenario {
    pub scenario: Scenario,
    pub init_frame: MultiViewFrame,
    pub real_frames: Vec<MultiViewFrame>,
    pub instruction: String,
}

/// Run the expert over fresh scenarios and record `max_horizon` future
/// frames per scenario.
pub fn prepare_study_scenarios(
    cfg: &RunConfig,
    count: usize,
    max_horizon: usize,
) -> Vec<StudyScenario> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let scenario = generate_scenario(
            cfg.seed.wrapping_mul(30_011).wrapping_add(i as u64),
            &format!("study_{i:03}"),
            &ScenarioGenOptions::default(),
        );
        let mut policy = ExpertPolicy {
            cfg: cfg.microworld.clone(),
        };
        let opts = EpisodeOptions {
            max_steps: max_horizon + 1,
            config_hash: cfg.hash(),
            record: true,
            flag_advances: false,
        };
        let outcome = run_episode(&scenario, &cfg.microworld, &mut policy, &opts);
        assert!(
            outcome.frames.len() > max_horizon,
            "study scenario {i} ended early ({} frames)",
            outcome.frames.len()
        );
        let instruction = scenario.segments[0].instruction.clone();
        out.push(StudyScenario {
            init_frame: outcome.frames[0].clone(),
            real_frames: outcome.frames[1..=max_horizon].to_vec(),
            scenario,
            instruction,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Generated clips feed the next step (error accumulation).
    Autoregressive,
    /// Ground-truth frames replace generated ones as conditioning.
    TeacherForced,
}

/// Generate `horizon` future frames for one scenario. Prefix-consistent:
/// the first `k` clips are identical for any longer horizon.
pub fn generated_video(
    stack: &DrivingStack,
    study: &StudyScenario,
    horizon: usize,
    mode: RolloutMode,
    seed: u64,
    sample_stride: usize,
) -> Vec<MultiViewFrame> {
    let gen = stack
        .generator
        .as_ref()
        .expect("generation study needs the world generator");
    let clip_frames = stack.cfg.generator.clip_frames;
    assert_eq!(horizon % clip_frames, 0, "horizon must be whole clips");
    let steps = horizon / clip_frames;
    let mut agent = ModelAgent::new(stack);
    let mut rng = derive_rng(seed, &format!("study:{}:{:?}", study.scenario.name, mode));
    let mut frames = Vec::with_capacity(horizon);
    let mut conditioning = study.init_frame.clone();
    for k in 0..steps {
        // the planner sees the conditioning frame and emits the world state
        let _plan = agent.plan_step(&conditioning, &study.instruction);
        let world = agent.world_embedding();
        let clip = gen.sample_clip_with_stride(&conditioning, world.as_ref(), &mut rng, sample_stride);
        for t in 0..clip.frames {
            frames.push(MultiViewFrame {
                images: [
                    clip.frame_image(0, t),
                    clip.frame_image(1, t),
                    clip.frame_image(2, t),
                ],
                timestamp: ((k * clip_frames) + t + 1) as f64 * 0.1,
            });
        }
        conditioning = match mode {
            RolloutMode::Autoregressive => clip.last_frame(((k + 1) * clip_frames) as f64 * 0.1),
            RolloutMode::TeacherForced => study.real_frames[(k + 1) * clip_frames - 1].clone(),
        };
    }
    frames
}

/// Per-frame trunk features cached for slicing across horizons.
fn frame_features(proxy: &ProxyNets, frames: &[MultiViewFrame]) -> Vec<[Vec<f64>; 3]> {
    frames
        .iter()
        .map(|f| {
            [
                proxy.image_features(&f.images[0]),
                proxy.image_features(&f.images[1]),
                proxy.image_features(&f.images[2]),
            ]
        })
        .collect()
}

/// Video feature for a view over a horizon window: temporal mean of image
/// features through the video projection.
fn video_feature_from_frames(proxy: &ProxyNets, feats: &[[Vec<f64>; 3]], view: usize) -> Vec<f64> {
    let d = proxy.feature_dim;
    let mut mean = vec![0.0; d];
    for f in feats {
        for (m, v) in mean.iter_mut().zip(&f[view]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= feats.len() as f64;
    }
    crate::nn::no_grad(|| {
        proxy
            .video_proj_forward(&Tensor::new(mean, &[1, d]))
            .data()
            .to_vec()
    })
}

/// Video features grouped per scenario (3 views each) for paired bootstrap.
pub struct HorizonFeatures {
    pub gen_by_scenario: Vec<[Vec<f64>; 3]>,
    pub real_by_scenario: Vec<[Vec<f64>; 3]>,
}

pub struct StudyOutput {
    pub reports: Vec<GenQualityReport>,
    pub features: BTreeMap<usize, HorizonFeatures>,
}

/// Evaluate generation quality at each horizon.
pub fn long_horizon_study(
    stack: &DrivingStack,
    scenarios: &[StudyScenario],
    horizons: &[usize],
    proxy: &ProxyNets,
    mode: RolloutMode,
    seed: u64,
    sample_stride: usize,
) -> StudyOutput {
    let max_h = *horizons.iter().max().expect("at least one horizon");
    // one max-horizon rollout per scenario; shorter horizons are prefixes
    let mut gen_feats_per_scenario = Vec::new();
    let mut real_feats_per_scenario = Vec::new();
    for study in scenarios {
        let gen_frames = generated_video(stack, study, max_h, mode, seed, sample_stride);
        gen_feats_per_scenario.push(frame_features(proxy, &gen_frames));
        real_feats_per_scenario.push(frame_features(proxy, &study.real_frames[..max_h]));
    }
    let mut reports = Vec::new();
    let mut features = BTreeMap::new();
    for &h in horizons {
        let mut gen_imgs = Vec::new();
        let mut real_imgs = Vec::new();
        let mut gen_vids = Vec::new();
        let mut real_vids = Vec::new();
        for (gf, rf) in gen_feats_per_scenario.iter().zip(&real_feats_per_scenario) {
            for frame in &gf[..h] {
                for view in frame {
                    gen_imgs.push(view.clone());
                }
            }
            for frame in &rf[..h] {
                for view in frame {
                    real_imgs.push(view.clone());
                }
            }
            gen_vids.push([
                video_feature_from_frames(proxy, &gf[..h], 0),
                video_feature_from_frames(proxy, &gf[..h], 1),
                video_feature_from_frames(proxy, &gf[..h], 2),
            ]);
            real_vids.push([
                video_feature_from_frames(proxy, &rf[..h], 0),
                video_feature_from_frames(proxy, &rf[..h], 1),
                video_feature_from_frames(proxy, &rf[..h], 2),
            ]);
        }
        let flat = |v: &Vec<[Vec<f64>; 3]>| -> Vec<Vec<f64>> {
            v.iter().flat_map(|s| s.iter().cloned()).collect()
        };
        let (fid, reg1) = frechet_feature_distance(&real_imgs, &gen_imgs);
        let (fvd, reg2) = frechet_feature_distance(&flat(&real_vids), &flat(&gen_vids));
        reports.push(GenQualityReport {
            horizon: h,
            fid_proxy: fid,
            fvd_proxy: fvd,
            samples: scenarios.len(),
            proxy_hash: proxy.content_hash(),
            regularized: reg1 || reg2,
        });
        features.insert(
            h,
            HorizonFeatures {
                gen_by_scenario: gen_vids,
                real_by_scenario: real_vids,
            },
        );
    }
    StudyOutput { reports, features }
}

/// Paired bootstrap over scenarios: fraction of resamples where
/// FVD(h_long) - FVD(h_short) > 0.
pub fn paired_bootstrap_fvd_gap(
    short: &HorizonFeatures,
    long: &HorizonFeatures,
    iters: usize,
    seed: u64,
) -> f64 {
    use rand::Rng;
    let n = short.gen_by_scenario.len();
    assert_eq!(n, long.gen_by_scenario.len());
    let mut rng = derive_rng(seed, "bootstrap:fvd-gap");
    let mut positive = 0usize;
    for _ in 0..iters {
        let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let gather = |set: &[[Vec<f64>; 3]]| -> Vec<Vec<f64>> {
            picks
                .iter()
                .flat_map(|&i| set[i].iter().cloned())
                .collect()
        };
        let (fvd_s, _) =
            frechet_feature_distance(&gather(&short.real_by_scenario), &gather(&short.gen_by_scenario));
        let (fvd_l, _) =
            frechet_feature_distance(&gather(&long.real_by_scenario), &gather(&long.gen_by_scenario));
        if fvd_l > fvd_s {
            positive += 1;
        }
    }
    positive as f64 / iters as f64
}
