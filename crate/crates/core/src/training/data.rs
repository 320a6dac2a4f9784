//! Expert dataset collection, on-disk layout, and loading.
//!
//! An episode stores `steps + clip_frames` rendered multi-view frames (u8
//! RGB) plus per-step labels; the extra frames supply the future-clip
//! diffusion targets. Waypoint labels are future ego positions from the
//! recorded expert trajectory, so replaying the expert reproduces them
//! exactly.

use crate::config::RunConfig;
use crate::control::ControlCommand;
use crate::generator::GeneratedClip;
use crate::microworld::episode::{run_episode, EpisodeOptions, ExpertPolicy};
use crate::microworld::expert::expert_policy;
use crate::microworld::render::{Image, MultiViewFrame};
use crate::microworld::scenario::{generate_scenario, Scenario, ScenarioGenOptions};
use crate::rng::derive_rng;
use crate::util::sha256_hex;
use crate::vision::{targets_from_state, LightClass};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabeledBox {
    /// 0 = vehicle, 1 = pedestrian.
    pub kind: u8,
    pub center: [f64; 2],
    pub extent: [f64; 2],
    pub yaw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepLabel {
    pub instruction: String,
    pub misleading: bool,
    /// Expert feasibility signal for this instruction at this state.
    pub infeasible: bool,
    pub waypoints: [[f64; 2]; 4],
    pub flag: f64,
    /// LightClass index: 0 red, 1 green, 2 none.
    pub light: u8,
    pub boxes: Vec<LabeledBox>,
    pub prev_control: ControlCommand,
    /// Ego pose and speed (x, y, heading, speed) for replay oracles.
    pub ego: [f64; 4],
}

/// One recorded frame: three u8 RGB rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredFrame {
    pub h: usize,
    pub w: usize,
    pub views: [Vec<u8>; 3],
}

impl StoredFrame {
    pub fn from_frame(frame: &MultiViewFrame) -> StoredFrame {
        StoredFrame {
            h: frame.images[0].h,
            w: frame.images[0].w,
            views: [
                frame.images[0].to_rgb8(),
                frame.images[1].to_rgb8(),
                frame.images[2].to_rgb8(),
            ],
        }
    }

    pub fn to_frame(&self, timestamp: f64) -> MultiViewFrame {
        MultiViewFrame {
            images: [
                Image::from_rgb8(&self.views[0], self.h, self.w),
                Image::from_rgb8(&self.views[1], self.h, self.w),
                Image::from_rgb8(&self.views[2], self.h, self.w),
            ],
            timestamp,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub scenario_name: String,
    pub frames: Vec<StoredFrame>,
    pub steps: Vec<StepLabel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub tuple_count: usize,
    pub vocab_version: u32,
    pub clip_frames: usize,
    pub episodes: Vec<EpisodeMeta>,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub name: String,
    pub steps: usize,
    pub frames: usize,
}

pub struct Dataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<EpisodeData>,
    pub train_scenarios: Vec<Scenario>,
    pub eval_scenarios: Vec<Scenario>,
}

impl Dataset {
    /// Run the expert over scripted scenarios and assemble the dataset.
    pub fn collect(cfg: &RunConfig) -> Dataset {
        let clip_frames = cfg.generator.clip_frames;
        let mut perturb_rng = derive_rng(cfg.seed, "collect:perturb");
        let mut episodes = Vec::new();
        let mut train_scenarios = Vec::new();
        for i in 0..cfg.data.train_scenarios {
            let mut opts = ScenarioGenOptions {
                start_fraction_max: cfg.data.start_fraction_max,
                ..ScenarioGenOptions::default()
            };
            if perturb_rng.gen::<f64>() < cfg.data.perturb_fraction {
                opts.perturb_offset = 1.5;
            }
            let scenario = generate_scenario(
                cfg.seed.wrapping_mul(10_007).wrapping_add(i as u64),
                &format!("train_{i:03}"),
                &opts,
            );
            let episode = collect_episode(&scenario, cfg, cfg.data.steps_per_episode, clip_frames);
            train_scenarios.push(scenario);
            episodes.push(episode);
        }
        let eval_scenarios: Vec<Scenario> = (0..cfg.data.eval_scenarios)
            .map(|i| {
                generate_scenario(
                    cfg.seed.wrapping_mul(20_011).wrapping_add(i as u64),
                    &format!("eval_{i:03}"),
                    &ScenarioGenOptions::eval_routes(),
                )
            })
            .collect();
        let tuple_count = episodes.iter().map(|e| e.steps.len()).sum();
        let mut ds = Dataset {
            meta: DatasetMeta {
                version: 1,
                config_hash: cfg.hash(),
                seed: cfg.seed,
                tuple_count,
                vocab_version: crate::microworld::Vocabulary::build().version,
                clip_frames,
                episodes: episodes
                    .iter()
                    .map(|e| EpisodeMeta {
                        name: e.scenario_name.clone(),
                        steps: e.steps.len(),
                        frames: e.frames.len(),
                    })
                    .collect(),
                checksum: String::new(),
            },
            episodes,
            train_scenarios,
            eval_scenarios,
        };
        ds.meta.checksum = ds.content_checksum();
        ds
    }

    /// Deterministic checksum over labels and frame bytes.
    pub fn content_checksum(&self) -> String {
        let mut bytes = Vec::new();
        for ep in &self.episodes {
            bytes.extend_from_slice(ep.scenario_name.as_bytes());
            for s in &ep.steps {
                bytes.extend_from_slice(serde_json::to_string(s).unwrap().as_bytes());
            }
            for f in &ep.frames {
                for v in &f.views {
                    bytes.extend_from_slice(v);
                }
            }
        }
        sha256_hex(&bytes)
    }

    pub fn tuple_count(&self) -> usize {
        self.meta.tuple_count
    }

    /// Frame at (episode, step) as f64 images.
    pub fn frame(&self, ep: usize, step: usize) -> MultiViewFrame {
        self.episodes[ep].frames[step].to_frame(step as f64 * 0.1)
    }

    pub fn label(&self, ep: usize, step: usize) -> &StepLabel {
        &self.episodes[ep].steps[step]
    }

    /// Ground-truth future clip for the tuple: frames step+1 ..= step+clip.
    pub fn clip_target(&self, ep: usize, step: usize) -> GeneratedClip {
        let clip = self.meta.clip_frames;
        let frames: Vec<MultiViewFrame> = (1..=clip)
            .map(|k| self.frame(ep, step + k))
            .collect();
        GeneratedClip::from_frames(&frames)
    }

    /// Flat (episode, step) index pairs for sampling.
    pub fn tuples(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.tuple_count());
        for (e, ep) in self.episodes.iter().enumerate() {
            for s in 0..ep.steps.len() {
                out.push((e, s));
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir.join("scenarios"))?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.meta)?,
        )?;
        crate::microworld::Vocabulary::build().save(&dir.join("vocab.json"))?;
        for s in &self.train_scenarios {
            s.save(&dir.join("scenarios").join(format!("{}.toml", s.name)))?;
        }
        for s in &self.eval_scenarios {
            s.save(&dir.join("scenarios").join(format!("{}.toml", s.name)))?;
        }
        for (i, ep) in self.episodes.iter().enumerate() {
            let ep_dir = dir.join(format!("episodes/ep{i:03}"));
            std::fs::create_dir_all(ep_dir.join("frames"))?;
            let mut steps_file = std::fs::File::create(ep_dir.join("steps.jsonl"))?;
            for s in &ep.steps {
                writeln!(steps_file, "{}", serde_json::to_string(s)?)?;
            }
            for (t, frame) in ep.frames.iter().enumerate() {
                for v in 0..3 {
                    let img: image::RgbImage = image::ImageBuffer::from_raw(
                        frame.w as u32,
                        frame.h as u32,
                        frame.views[v].clone(),
                    )
                    .expect("frame buffer size");
                    img.save_with_format(
                        ep_dir.join(format!("frames/s{t:03}_v{v}.png")),
                        image::ImageFormat::Png,
                    )
                    .map_err(|e| std::io::Error::other(e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> std::io::Result<Dataset> {
        let meta: DatasetMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut episodes = Vec::new();
        for (i, em) in meta.episodes.iter().enumerate() {
            let ep_dir = dir.join(format!("episodes/ep{i:03}"));
            let steps: Vec<StepLabel> = std::fs::read_to_string(ep_dir.join("steps.jsonl"))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
                .collect::<Result<_, _>>()?;
            let mut frames = Vec::new();
            for t in 0..em.frames {
                let mut views = Vec::new();
                for v in 0..3 {
                    let img = image::open(ep_dir.join(format!("frames/s{t:03}_v{v}.png")))
                        .map_err(|e| std::io::Error::other(e.to_string()))?
                        .to_rgb8();
                    views.push(img.into_raw());
                }
                let (h, w) = frame_dims(&views[0]);
                frames.push(StoredFrame {
                    h,
                    w,
                    views: [views[0].clone(), views[1].clone(), views[2].clone()],
                });
            }
            episodes.push(EpisodeData {
                scenario_name: em.name.clone(),
                frames,
                steps,
            });
        }
        let mut train_scenarios = Vec::new();
        let mut eval_scenarios = Vec::new();
        let mut names: Vec<String> = std::fs::read_dir(dir.join("scenarios"))?
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            let s = Scenario::load(&dir.join("scenarios").join(&name))?;
            if name.starts_with("eval") {
                eval_scenarios.push(s);
            } else {
                train_scenarios.push(s);
            }
        }
        Ok(Dataset {
            meta,
            episodes,
            train_scenarios,
            eval_scenarios,
        })
    }
}

fn frame_dims(view: &[u8]) -> (usize, usize) {
    let px = view.len() / 3;
    let side = (px as f64).sqrt() as usize;
    assert_eq!(side * side, px, "frames must be square");
    (side, side)
}

fn collect_episode(
    scenario: &Scenario,
    cfg: &RunConfig,
    steps: usize,
    clip_frames: usize,
) -> EpisodeData {
    let mcfg = &cfg.microworld;
    let mut policy = ExpertPolicy { cfg: mcfg.clone() };
    let opts = EpisodeOptions {
        max_steps: steps + clip_frames,
        config_hash: cfg.hash(),
        record: true,
        flag_advances: false,
    };
    let outcome = run_episode(scenario, mcfg, &mut policy, &opts);
    let recorded = outcome.states.len();
    let usable = steps.min(recorded.saturating_sub(clip_frames));
    let script = scenario.script();
    let mut labels = Vec::with_capacity(usable);
    for t in 0..usable {
        let state = &outcome.states[t];
        let idx = outcome.instruction_indices[t];
        let scripted = &script[idx];
        let targets = targets_from_state(state, mcfg, &cfg.vision);
        // waypoint labels: recorded future ego positions in the frame of t
        let mut waypoints = [[0.0; 2]; 4];
        for (k, dt_steps) in [2usize, 4, 6, 8].iter().enumerate() {
            let future = &outcome.states[(t + dt_steps).min(recorded - 1)];
            let local = state.ego.to_local(future.ego.pos);
            waypoints[k] = [local.x, local.y];
        }
        let infeasible = expert_policy(state, scripted, mcfg).is_err();
        let flag = if crate::microworld::expert::instruction_completed(state, scripted) {
            1.0
        } else {
            0.0
        };
        let prev_control = if t == 0 {
            ControlCommand::coast()
        } else {
            outcome.log.steps[t - 1].control
        };
        labels.push(StepLabel {
            instruction: scripted.instruction.text.clone(),
            misleading: scripted.instruction.misleading,
            infeasible,
            waypoints,
            flag,
            light: light_index(targets.light),
            boxes: targets
                .boxes
                .iter()
                .map(|b| LabeledBox {
                    kind: match b.kind {
                        crate::microworld::world::AgentKind::Vehicle => 0,
                        crate::microworld::world::AgentKind::Pedestrian => 1,
                    },
                    center: b.center,
                    extent: b.extent,
                    yaw: b.yaw,
                })
                .collect(),
            prev_control,
            ego: [
                state.ego.pos.x,
                state.ego.pos.y,
                state.ego.heading,
                state.ego_speed,
            ],
        });
    }
    EpisodeData {
        scenario_name: scenario.name.clone(),
        frames: outcome
            .frames
            .iter()
            .take(usable + clip_frames)
            .map(StoredFrame::from_frame)
            .collect(),
        steps: labels,
    }
}

fn light_index(l: LightClass) -> u8 {
    l.index() as u8
}

/// Turn a stored label's boxes back into perception targets.
pub fn label_to_targets(label: &StepLabel) -> crate::vision::PerceptionTargets {
    crate::vision::PerceptionTargets {
        boxes: label
            .boxes
            .iter()
            .map(|b| crate::vision::BevBox {
                kind: if b.kind == 0 {
                    crate::microworld::world::AgentKind::Vehicle
                } else {
                    crate::microworld::world::AgentKind::Pedestrian
                },
                center: b.center,
                extent: b.extent,
                yaw: b.yaw,
            })
            .collect(),
        light: match label.light {
            0 => LightClass::Red,
            1 => LightClass::Green,
            _ => LightClass::None,
        },
        expert_waypoints: label.waypoints,
    }
}
