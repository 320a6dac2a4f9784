//! Scenario files and the procedural scenario generator.
//!
//! A scenario is human-readable TOML: road polylines, the route, segment
//! metadata with the instruction script, scripted agents, light schedules,
//! and the seed. Junction segments render side stubs so turn instructions
//! are visually ambiguous without language.

use super::expert::ScriptedInstruction;
use super::geometry::{Polyline, Pose, Vec2};
use super::instructions::{phrases, Instruction, InstructionKind};
use super::world::{
    AgentKind, AgentScript, LightSpec, Road, SegmentInfo, SegmentKind, WorldDef, WorldState,
};
use crate::config::MicroworldConfig;
use crate::rng::derive_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSegment {
    pub end_s: f64,
    pub kind: SegmentKind,
    pub instruction: String,
    pub misleading: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub start_offset: f64,
    /// Route arc length where the ego spawns (mid-route data episodes).
    #[serde(default)]
    pub start_s: f64,
    pub start_speed: f64,
    pub roads: Vec<Road>,
    pub route: Vec<Vec2>,
    pub segments: Vec<ScenarioSegment>,
    pub agents: Vec<AgentScript>,
    pub lights: Vec<LightSpec>,
}

impl Scenario {
    pub fn world_def(&self) -> Arc<WorldDef> {
        Arc::new(WorldDef {
            roads: self.roads.clone(),
            route: Polyline::new(self.route.clone()),
            agents: self.agents.clone(),
            lights: self.lights.clone(),
            segments: self
                .segments
                .iter()
                .map(|s| SegmentInfo {
                    end_s: s.end_s,
                    kind: s.kind,
                })
                .collect(),
        })
    }

    pub fn initial_state(&self, _cfg: &MicroworldConfig) -> WorldState {
        let def = self.world_def();
        let heading = def.route.heading_at(self.start_s);
        let left = Vec2::new(-heading.sin(), heading.cos());
        let pos = def
            .route
            .point_at(self.start_s)
            .add(left.scale(self.start_offset));
        WorldState::new(def, Pose { pos, heading }, self.start_speed)
    }

    /// The instruction script, one entry per segment.
    pub fn script(&self) -> Vec<ScriptedInstruction> {
        self.segments
            .iter()
            .map(|s| ScriptedInstruction {
                instruction: Instruction::new(s.instruction.clone(), s.misleading),
                end_s: s.end_s,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, toml::to_string_pretty(self).expect("scenario serializes"))
    }

    pub fn load(path: &Path) -> std::io::Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| std::io::Error::other(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioGenOptions {
    pub min_segments: usize,
    pub max_segments: usize,
    pub misleading_prob: f64,
    pub agent_prob: f64,
    pub light_prob: f64,
    /// Lateral spawn offset magnitude for recovery episodes (0 = on route).
    pub perturb_offset: f64,
    /// Spawn the ego anywhere in [0, fraction] of the route arc length so
    /// short data episodes cover every segment kind.
    pub start_fraction_max: f64,
    /// Benchmark-route style: a short opening straight followed by a
    /// guaranteed curve, so non-steering baselines deviate early.
    pub eval_style: bool,
}

impl Default for ScenarioGenOptions {
    fn default() -> Self {
        ScenarioGenOptions {
            min_segments: 3,
            max_segments: 5,
            misleading_prob: 0.25,
            agent_prob: 0.6,
            light_prob: 0.5,
            perturb_offset: 0.0,
            start_fraction_max: 0.0,
            eval_style: false,
        }
    }
}

impl ScenarioGenOptions {
    pub fn eval_routes() -> ScenarioGenOptions {
        ScenarioGenOptions {
            min_segments: 3,
            max_segments: 4,
            misleading_prob: 0.25,
            agent_prob: 0.5,
            light_prob: 0.5,
            perturb_offset: 0.0,
            start_fraction_max: 0.0,
            eval_style: true,
        }
    }
}

const ROAD_WIDTH: f64 = 8.0;
const STUB_LEN: f64 = 10.0;

/// Deterministically generate a scenario from a seed.
pub fn generate_scenario(seed: u64, name: &str, opts: &ScenarioGenOptions) -> Scenario {
    let mut rng = derive_rng(seed, &format!("scenario:{name}"));
    let n_segments = rng.gen_range(opts.min_segments..=opts.max_segments);

    let mut route: Vec<Vec2> = vec![Vec2::zero()];
    let mut heading: f64 = 0.0;
    let mut cursor = Vec2::zero();
    let mut arclen = 0.0;
    let mut segments: Vec<(SegmentKind, f64)> = Vec::new(); // (kind, end_s)
    let mut stubs: Vec<Road> = Vec::new();
    let mut lights: Vec<LightSpec> = Vec::new();
    let mut had_light = false;

    for i in 0..n_segments {
        let kind = if i == 0 {
            SegmentKind::Straight
        } else if opts.eval_style && i == 1 {
            if rng.gen::<bool>() {
                SegmentKind::CurveLeft
            } else {
                SegmentKind::CurveRight
            }
        } else {
            match rng.gen_range(0..4) {
                0 => SegmentKind::CurveLeft,
                1 => SegmentKind::CurveRight,
                2 if !had_light && rng.gen::<f64>() < opts.light_prob => SegmentKind::LightStraight,
                _ => SegmentKind::Straight,
            }
        };
        match kind {
            SegmentKind::Straight | SegmentKind::LightStraight => {
                let len = if opts.eval_style && i == 0 {
                    rng.gen_range(8.0..12.0)
                } else {
                    rng.gen_range(14.0..22.0)
                };
                let dir = Vec2::new(heading.cos(), heading.sin());
                if kind == SegmentKind::LightStraight {
                    had_light = true;
                    let s_line = arclen + 0.6 * len;
                    let line_pos = cursor.add(dir.scale(0.6 * len));
                    let left = Vec2::new(-heading.sin(), heading.cos());
                    lights.push(LightSpec {
                        pos: line_pos.add(left.scale(-3.5)),
                        stop_a: line_pos.add(left.scale(-ROAD_WIDTH / 2.0)),
                        stop_b: line_pos.add(left.scale(ROAD_WIDTH / 2.0)),
                        stop_s: s_line,
                        green_dur: 4.0,
                        red_dur: 4.0,
                        phase_offset: rng.gen_range(0.0..8.0),
                    });
                }
                let steps = (len / 2.0).ceil() as usize;
                for k in 1..=steps {
                    route.push(cursor.add(dir.scale(len * k as f64 / steps as f64)));
                }
                cursor = cursor.add(dir.scale(len));
                arclen += len;
            }
            SegmentKind::CurveLeft | SegmentKind::CurveRight => {
                let radius = rng.gen_range(9.0..12.0);
                let sign = if kind == SegmentKind::CurveLeft { 1.0 } else { -1.0 };
                // junction stubs: continue straight and branch opposite the turn
                let dir = Vec2::new(heading.cos(), heading.sin());
                stubs.push(Road {
                    points: vec![cursor, cursor.add(dir.scale(STUB_LEN + radius))],
                    width: ROAD_WIDTH,
                });
                let opposite = dir.rotate(-sign * std::f64::consts::FRAC_PI_2);
                stubs.push(Road {
                    points: vec![cursor, cursor.add(opposite.scale(STUB_LEN + radius))],
                    width: ROAD_WIDTH,
                });
                let center = cursor.add(Vec2::new(-heading.sin(), heading.cos()).scale(sign * radius));
                let arc = std::f64::consts::FRAC_PI_2;
                let steps = ((radius * arc) / 1.5).ceil() as usize;
                let start_angle = (cursor.sub(center)).angle();
                for k in 1..=steps {
                    let a = start_angle + sign * arc * k as f64 / steps as f64;
                    route.push(center.add(Vec2::new(a.cos(), a.sin()).scale(radius)));
                }
                heading = crate::util::wrap_angle(heading + sign * arc);
                cursor = *route.last().unwrap();
                arclen += radius * arc;
            }
        }
        segments.push((kind, arclen));
    }

    // instruction script: truthful per segment kind, with occasional
    // misleading swaps on straight segments
    let mut scenario_segments = Vec::new();
    for (idx, (kind, end_s)) in segments.iter().enumerate() {
        let truthful_kind = match kind {
            SegmentKind::Straight => InstructionKind::FollowLane,
            SegmentKind::CurveLeft => InstructionKind::TurnLeft,
            SegmentKind::CurveRight => InstructionKind::TurnRight,
            SegmentKind::LightStraight => InstructionKind::StopAtLight,
        };
        let start_s = if idx == 0 { 0.0 } else { segments[idx - 1].1 };
        let mut chosen = truthful_kind;
        let mut misleading = false;
        if *kind == SegmentKind::Straight && idx > 0 && rng.gen::<f64>() < opts.misleading_prob {
            let candidates = misleading_candidates(&segments, start_s, *end_s, &lights);
            if !candidates.is_empty() {
                chosen = candidates[rng.gen_range(0..candidates.len())];
                misleading = true;
            }
        }
        let options = phrases(chosen);
        let text = options[rng.gen_range(0..options.len())];
        scenario_segments.push(ScenarioSegment {
            end_s: *end_s,
            kind: *kind,
            instruction: text.to_string(),
            misleading,
        });
    }

    // scripted agents around the route
    let route_pl = Polyline::new(route.clone());
    let mut agents = Vec::new();
    if rng.gen::<f64>() < opts.agent_prob {
        // parked vehicle on the left edge of a straight stretch ahead
        let s = rng.gen_range(0.35..0.7) * route_pl.total_len();
        let h = route_pl.heading_at(s);
        let left = Vec2::new(-h.sin(), h.cos());
        let pos = route_pl.point_at(s).add(left.scale(3.0));
        agents.push(AgentScript {
            kind: AgentKind::Vehicle,
            path: vec![pos, pos.add(Vec2::new(h.cos(), h.sin()).scale(0.01))],
            speed: 0.0,
            start_time: 0.0,
        });
    }
    if rng.gen::<f64>() < opts.agent_prob {
        // pedestrian crossing the road ahead of the ego's arrival
        let s = rng.gen_range(0.3..0.6) * route_pl.total_len();
        let h = route_pl.heading_at(s);
        let left = Vec2::new(-h.sin(), h.cos());
        let anchor = route_pl.point_at(s);
        let start_time = (s / 5.0 - 4.0).max(0.0);
        agents.push(AgentScript {
            kind: AgentKind::Pedestrian,
            path: vec![anchor.add(left.scale(7.0)), anchor.add(left.scale(-7.0))],
            speed: 1.0,
            start_time,
        });
    }

    let mut roads = vec![Road {
        points: route.clone(),
        width: ROAD_WIDTH,
    }];
    roads.extend(stubs);

    let start_offset = if opts.perturb_offset > 0.0 {
        rng.gen_range(-opts.perturb_offset..opts.perturb_offset)
    } else {
        0.0
    };
    let start_s = if opts.start_fraction_max > 0.0 {
        rng.gen_range(0.0..opts.start_fraction_max) * arclen
    } else {
        0.0
    };

    Scenario {
        name: name.to_string(),
        seed,
        start_offset,
        start_s,
        start_speed: 3.0,
        roads,
        route,
        segments: scenario_segments,
        agents,
        lights,
    }
}

/// Instruction kinds that are genuinely infeasible over [start_s, end_s + 5]
/// (usable as misleading cues on this stretch).
fn misleading_candidates(
    segments: &[(SegmentKind, f64)],
    start_s: f64,
    end_s: f64,
    lights: &[LightSpec],
) -> Vec<InstructionKind> {
    let horizon_end = end_s + 5.0;
    let mut out = vec![
        InstructionKind::ChangeLaneLeft,
        InstructionKind::ChangeLaneRight,
    ];
    let kind_in_horizon = |want: SegmentKind| {
        let mut seg_start = 0.0;
        for (kind, seg_end) in segments {
            if *seg_end > start_s - 1.0 && seg_start < horizon_end && *kind == want {
                return true;
            }
            seg_start = *seg_end;
        }
        false
    };
    if !kind_in_horizon(SegmentKind::CurveLeft) {
        out.push(InstructionKind::TurnLeft);
    }
    if !kind_in_horizon(SegmentKind::CurveRight) {
        out.push(InstructionKind::TurnRight);
    }
    if !lights
        .iter()
        .any(|l| l.stop_s > start_s - 2.0 && l.stop_s < horizon_end)
    {
        out.push(InstructionKind::StopAtLight);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::expert::{expert_policy, ExpertError};

    #[test]
    fn generation_is_deterministic() {
        let opts = ScenarioGenOptions::default();
        let a = generate_scenario(42, "t", &opts);
        let b = generate_scenario(42, "t", &opts);
        assert_eq!(toml::to_string(&a).unwrap(), toml::to_string(&b).unwrap());
        let c = generate_scenario(43, "t", &opts);
        assert_ne!(toml::to_string(&a).unwrap(), toml::to_string(&c).unwrap());
    }

    #[test]
    fn toml_roundtrip() {
        let s = generate_scenario(7, "rt", &ScenarioGenOptions::default());
        let text = toml::to_string_pretty(&s).unwrap();
        let back: Scenario = toml::from_str(&text).unwrap();
        assert_eq!(toml::to_string_pretty(&back).unwrap(), text);
    }

    #[test]
    fn misleading_instructions_are_infeasible_for_the_expert() {
        let cfg = MicroworldConfig::default();
        let mut found = 0;
        for seed in 0..60 {
            let s = generate_scenario(seed, "m", &ScenarioGenOptions::default());
            let state = s.initial_state(&cfg);
            for scripted in s.script() {
                if scripted.instruction.misleading {
                    found += 1;
                    // move the ego to the segment start before asking
                    let mut probe = state.clone();
                    let seg_idx = s
                        .segments
                        .iter()
                        .position(|x| x.end_s == scripted.end_s)
                        .unwrap();
                    let start_s = if seg_idx == 0 {
                        0.0
                    } else {
                        s.segments[seg_idx - 1].end_s
                    };
                    let def = s.world_def();
                    probe.ego.pos = def.route.point_at(start_s + 0.5);
                    probe.ego.heading = def.route.heading_at(start_s + 0.5);
                    probe.route_progress = (start_s + 0.5) / def.route.total_len();
                    assert!(
                        matches!(
                            expert_policy(&probe, &scripted, &cfg),
                            Err(ExpertError::InfeasibleInstruction(_))
                        ),
                        "misleading instruction {:?} was feasible",
                        scripted.instruction.text
                    );
                }
            }
        }
        assert!(found > 0, "no misleading instructions generated in 60 seeds");
    }

    #[test]
    fn truthful_instructions_are_feasible_at_segment_start() {
        let cfg = MicroworldConfig::default();
        for seed in 0..20 {
            let s = generate_scenario(seed, "f", &ScenarioGenOptions::default());
            let def = s.world_def();
            for (idx, scripted) in s.script().iter().enumerate() {
                if scripted.instruction.misleading {
                    continue;
                }
                let start_s = if idx == 0 { 0.0 } else { s.segments[idx - 1].end_s };
                let mut probe = s.initial_state(&cfg);
                probe.ego.pos = def.route.point_at(start_s + 0.5);
                probe.ego.heading = def.route.heading_at(start_s + 0.5);
                probe.route_progress = (start_s + 0.5) / def.route.total_len();
                assert!(
                    expert_policy(&probe, scripted, &cfg).is_ok(),
                    "truthful {:?} infeasible in seed {seed}",
                    scripted.instruction.text
                );
            }
        }
    }
}
