//! World state and deterministic dynamics.
//!
//! Scripted agents and traffic lights are pure functions of the clock, so a
//! state snapshot plus the immutable scenario definition fully determines the
//! episode; stepping the ego is the only integration.

use super::geometry::{Obb, Polyline, Pose, Vec2};
use crate::config::MicroworldConfig;
use crate::control::ControlCommand;
use crate::util::wrap_angle;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
}

/// Scripted agent: follows its path at constant speed once started, then
/// holds at the path end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentScript {
    pub kind: AgentKind,
    pub path: Vec<Vec2>,
    pub speed: f64,
    pub start_time: f64,
}

impl AgentScript {
    pub fn half_extents(&self) -> (f64, f64) {
        match self.kind {
            AgentKind::Vehicle => (2.0, 1.0),
            AgentKind::Pedestrian => (0.35, 0.35),
        }
    }

    pub fn state_at(&self, clock: f64) -> AgentState {
        let pl = Polyline::new(self.path.clone());
        let s = (self.speed * (clock - self.start_time).max(0.0)).min(pl.total_len());
        let pos = pl.point_at(s);
        let heading = pl.heading_at(s.min(pl.total_len() - 1e-9).max(0.0));
        let moving = s > 0.0 && s < pl.total_len();
        let (half_len, half_wid) = self.half_extents();
        AgentState {
            kind: self.kind,
            pose: Pose { pos, heading },
            speed: if moving { self.speed } else { 0.0 },
            half_len,
            half_wid,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AgentState {
    pub kind: AgentKind,
    pub pose: Pose,
    pub speed: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl AgentState {
    pub fn footprint(&self) -> Obb {
        Obb {
            center: self.pose.pos,
            half_len: self.half_len,
            half_wid: self.half_wid,
            yaw: self.pose.heading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightState {
    Red,
    Green,
}

/// Traffic light with a periodic schedule and a stop line across the route.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LightSpec {
    pub pos: Vec2,
    pub stop_a: Vec2,
    pub stop_b: Vec2,
    /// Arc length of the stop line along the route.
    pub stop_s: f64,
    pub green_dur: f64,
    pub red_dur: f64,
    pub phase_offset: f64,
}

impl LightSpec {
    pub fn state_at(&self, clock: f64) -> LightState {
        let period = self.green_dur + self.red_dur;
        let phase = (clock + self.phase_offset).rem_euclid(period);
        if phase < self.green_dur {
            LightState::Green
        } else {
            LightState::Red
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Road {
    pub points: Vec<Vec2>,
    pub width: f64,
}

/// Route segment classes used to script instructions and check feasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Straight,
    CurveLeft,
    CurveRight,
    LightStraight,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentInfo {
    /// Route arc length at which the segment ends.
    pub end_s: f64,
    pub kind: SegmentKind,
}

/// Immutable scenario-derived definition shared by all states of an episode.
#[derive(Debug, Clone)]
pub struct WorldDef {
    pub roads: Vec<Road>,
    pub route: Polyline,
    pub agents: Vec<AgentScript>,
    pub lights: Vec<LightSpec>,
    pub segments: Vec<SegmentInfo>,
}

/// Snapshot of the world at one timestep.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub ego: Pose,
    pub ego_speed: f64,
    pub clock: f64,
    /// Monotone fraction of route arc length completed, in [0, 1].
    pub route_progress: f64,
    pub def: Arc<WorldDef>,
}

/// Which control fields were clamped into range by the integrator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClampReport {
    pub throttle: bool,
    pub brake: bool,
    pub steer: bool,
}

impl WorldState {
    pub fn new(def: Arc<WorldDef>, ego: Pose, ego_speed: f64) -> WorldState {
        let (s, _) = def.route.project(ego.pos);
        let progress = s / def.route.total_len();
        WorldState {
            ego,
            ego_speed,
            clock: 0.0,
            route_progress: progress,
            def,
        }
    }

    pub fn agents(&self) -> Vec<AgentState> {
        self.def
            .agents
            .iter()
            .map(|a| a.state_at(self.clock))
            .collect()
    }

    pub fn lights(&self) -> Vec<(Vec2, LightState)> {
        self.def
            .lights
            .iter()
            .map(|l| (l.pos, l.state_at(self.clock)))
            .collect()
    }

    pub fn ego_footprint(&self, cfg: &MicroworldConfig) -> Obb {
        Obb {
            center: self.ego.pos,
            half_len: cfg.ego_half_len,
            half_wid: cfg.ego_half_wid,
            yaw: self.ego.heading,
        }
    }

    /// Ego arc length along the route, meters.
    pub fn route_arclen(&self) -> f64 {
        self.route_progress * self.def.route.total_len()
    }

    /// Signed-magnitude lateral distance from the route.
    pub fn lateral_deviation(&self) -> f64 {
        let (_, d) = self.def.route.project(self.ego.pos);
        d
    }
}

/// Advance the world by `dt` under `control` (kinematic bicycle ego model).
///
/// Out-of-range control fields are clamped and reported. Scripted agents and
/// lights advance implicitly through the clock. `route_progress` is the
/// monotone arc-length fraction of the nearest route point.
pub fn step_dynamics(
    state: &WorldState,
    control: &ControlCommand,
    dt: f64,
    cfg: &MicroworldConfig,
) -> (WorldState, ClampReport) {
    assert!(dt > 0.0, "dt must be positive");
    let mut report = ClampReport::default();
    let throttle = clamp_report(control.throttle, 0.0, 1.0, &mut report.throttle);
    let brake = clamp_report(control.brake, 0.0, 1.0, &mut report.brake);
    let steer = clamp_report(control.steer, -1.0, 1.0, &mut report.steer);

    let v = state.ego_speed;
    let delta = steer * cfg.max_steer;
    // Position and heading advance with the current speed, then the speed
    // integrates pedal forces and friction.
    let (sh, ch) = state.ego.heading.sin_cos();
    let pos = Vec2::new(state.ego.pos.x + v * ch * dt, state.ego.pos.y + v * sh * dt);
    let heading = wrap_angle(state.ego.heading + v / cfg.wheelbase * delta.tan() * dt);
    let accel = throttle * cfg.max_accel - brake * cfg.max_brake - cfg.friction * v;
    let speed = (v + accel * dt).clamp(0.0, cfg.max_speed);

    let (s, _) = state.def.route.project(pos);
    let progress = (s / state.def.route.total_len()).max(state.route_progress);

    (
        WorldState {
            ego: Pose { pos, heading },
            ego_speed: speed,
            clock: state.clock + dt,
            route_progress: progress.min(1.0),
            def: state.def.clone(),
        },
        report,
    )
}

fn clamp_report(v: f64, lo: f64, hi: f64, flag: &mut bool) -> f64 {
    if v < lo || v > hi {
        *flag = true;
    }
    v.clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn straight_world() -> Arc<WorldDef> {
        let pts: Vec<Vec2> = (0..60).map(|i| Vec2::new(i as f64 * 2.0, 0.0)).collect();
        let route = Polyline::new(pts.clone());
        let end_s = route.total_len();
        Arc::new(WorldDef {
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
        })
    }

    #[test]
    fn full_brake_from_rest_stays_put() {
        let cfg = MicroworldConfig::default();
        let state = WorldState::new(straight_world(), Pose::new(0.0, 0.0, 0.0), 0.0);
        let control = ControlCommand {
            throttle: 0.0,
            brake: 1.0,
            steer: 0.0,
        };
        let (next, report) = step_dynamics(&state, &control, 0.1, &cfg);
        assert_eq!(next.ego.pos, Vec2::new(0.0, 0.0));
        assert_eq!(next.ego_speed, 0.0);
        assert_eq!(report, ClampReport::default());
    }

    #[test]
    fn straight_line_advance_is_exact() {
        let cfg = MicroworldConfig::default();
        let state = WorldState::new(straight_world(), Pose::new(0.0, 0.0, 0.0), 5.0);
        let control = ControlCommand {
            throttle: 0.0,
            brake: 0.0,
            steer: 0.0,
        };
        let (next, _) = step_dynamics(&state, &control, 0.1, &cfg);
        assert_eq!(next.ego.pos.x, 0.5, "x advances by exactly v*dt");
        assert_eq!(next.ego.pos.y, 0.0);
    }

    #[test]
    fn constant_steer_closes_a_circle() {
        // Friction off so speed stays constant; analytic turn radius
        // R = L / tan(delta); heading returns after 2*pi*R / v seconds.
        let mut cfg = MicroworldConfig::default();
        cfg.friction = 0.0;
        let steer = 0.5;
        let v = 5.0;
        let delta = steer * cfg.max_steer;
        let radius = cfg.wheelbase / delta.tan();
        let period = std::f64::consts::TAU * radius / v;
        let steps = (period / cfg.dt).round() as usize;
        let mut state = WorldState::new(straight_world(), Pose::new(0.0, 0.0, 0.0), v);
        let control = ControlCommand {
            throttle: 0.0,
            brake: 0.0,
            steer,
        };
        let start_heading = state.ego.heading;
        for _ in 0..steps {
            state = step_dynamics(&state, &control, cfg.dt, &cfg).0;
        }
        let dh = crate::util::wrap_angle(state.ego.heading - start_heading);
        // tolerance covers the rounding of period/dt to whole steps
        let rate = v / cfg.wheelbase * delta.tan();
        let tol = rate * cfg.dt;
        assert!(dh.abs() <= tol + 1e-9, "heading residual {dh} (tol {tol})");
    }

    #[test]
    fn coasting_speed_never_increases() {
        let cfg = MicroworldConfig::default();
        let mut state = WorldState::new(straight_world(), Pose::new(0.0, 0.0, 0.0), 7.0);
        let control = ControlCommand {
            throttle: 0.0,
            brake: 0.0,
            steer: 0.1,
        };
        let mut prev = state.ego_speed;
        for _ in 0..100 {
            state = step_dynamics(&state, &control, cfg.dt, &cfg).0;
            assert!(state.ego_speed <= prev + 1e-12);
            prev = state.ego_speed;
        }
    }

    #[test]
    fn route_progress_is_monotone_and_bounded() {
        let cfg = MicroworldConfig::default();
        let mut state = WorldState::new(straight_world(), Pose::new(10.0, 0.0, 0.0), 5.0);
        // drive backwards: progress must not decrease
        state.ego.heading = std::f64::consts::PI;
        let control = ControlCommand {
            throttle: 0.3,
            brake: 0.0,
            steer: 0.0,
        };
        let initial = state.route_progress;
        for _ in 0..50 {
            state = step_dynamics(&state, &control, cfg.dt, &cfg).0;
            assert!(state.route_progress >= initial);
            assert!((0.0..=1.0).contains(&state.route_progress));
        }
    }

    #[test]
    fn out_of_range_controls_are_clamped_and_reported() {
        let cfg = MicroworldConfig::default();
        let state = WorldState::new(straight_world(), Pose::new(0.0, 0.0, 0.0), 1.0);
        let control = ControlCommand {
            throttle: 1.7,
            brake: -0.2,
            steer: 2.0,
        };
        let (next, report) = step_dynamics(&state, &control, 0.1, &cfg);
        assert!(report.throttle && report.brake && report.steer);
        assert!(next.ego_speed <= cfg.max_speed);
    }

    #[test]
    fn lights_follow_schedule() {
        let light = LightSpec {
            pos: Vec2::new(0.0, 0.0),
            stop_a: Vec2::new(0.0, -3.0),
            stop_b: Vec2::new(0.0, 3.0),
            stop_s: 0.0,
            green_dur: 4.0,
            red_dur: 4.0,
            phase_offset: 0.0,
        };
        assert_eq!(light.state_at(0.0), LightState::Green);
        assert_eq!(light.state_at(3.9), LightState::Green);
        assert_eq!(light.state_at(4.1), LightState::Red);
        assert_eq!(light.state_at(8.1), LightState::Green);
    }

    #[test]
    fn scripted_agent_holds_at_path_end() {
        let script = AgentScript {
            kind: AgentKind::Pedestrian,
            path: vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 10.0)],
            speed: 1.0,
            start_time: 2.0,
        };
        assert_eq!(script.state_at(0.0).pose.pos, Vec2::new(0.0, 0.0));
        let mid = script.state_at(7.0);
        assert!((mid.pose.pos.y - 5.0).abs() < 1e-12);
        assert_eq!(mid.speed, 1.0);
        let end = script.state_at(100.0);
        assert_eq!(end.pose.pos, Vec2::new(0.0, 10.0));
        assert_eq!(end.speed, 0.0);
    }
}
