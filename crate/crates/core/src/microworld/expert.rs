//! Expert driving policy: the stateless control law that generates
//! demonstrations and imitation labels.
//!
//! The law is a pure function of the world state, so an 8-step internal
//! rollout reproduces the exact trajectory the expert will drive, and
//! recorded waypoint labels replay with zero tracking error.

use super::instructions::{Instruction, InstructionKind};
use super::world::{step_dynamics, SegmentKind, WorldState};
use crate::config::MicroworldConfig;
use crate::control::ControlCommand;
use crate::util::wrap_angle;
use thiserror::Error;

/// Comfortable deceleration used for braking envelopes, m/s^2.
const BRAKE_DECEL: f64 = 3.0;
/// Stop this far before a red-light stop line, meters.
const STOP_MARGIN: f64 = 2.0;
/// Look for red lights and obstacles this far ahead along the route.
const ATTENTION_RANGE: f64 = 25.0;

/// An instruction bound to its route context (where it ends).
#[derive(Debug, Clone)]
pub struct ScriptedInstruction {
    pub instruction: Instruction,
    /// Route arc length at which the instruction's segment ends.
    pub end_s: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("instruction infeasible from the current state: {0}")]
    InfeasibleInstruction(String),
}

/// Target speed respecting curves, red lights, and obstacles ahead.
fn target_speed(state: &WorldState, cfg: &MicroworldConfig) -> f64 {
    let route = &state.def.route;
    let s_ego = state.route_arclen();
    let mut v_t = cfg.cruise_speed;

    // slow into curvature ahead
    let bend = wrap_angle(route.heading_at(s_ego + 6.0) - route.heading_at(s_ego)).abs();
    v_t /= 1.0 + 1.2 * bend;

    // braking envelope for governing red lights
    for light in &state.def.lights {
        if light.stop_s <= s_ego || light.stop_s - s_ego > ATTENTION_RANGE {
            continue;
        }
        if light.state_at(state.clock) == super::world::LightState::Red {
            let gap = (light.stop_s - s_ego - STOP_MARGIN).max(0.0);
            v_t = v_t.min((2.0 * BRAKE_DECEL * gap).sqrt());
        }
    }

    // braking envelope for agents threatening the route corridor ahead
    for agent in state.agents() {
        let (s_a, lat) = route.project(agent.pose.pos);
        if s_a <= s_ego - 1.0 || s_a - s_ego > ATTENTION_RANGE {
            continue;
        }
        let threat = match agent.kind {
            super::world::AgentKind::Vehicle => lat <= 2.2,
            super::world::AgentKind::Pedestrian => {
                if agent.speed == 0.0 {
                    lat <= 2.0
                } else {
                    // yield to any crossing pedestrian unless it is already
                    // clear of the lane and walking away from it
                    let theta = route.heading_at(s_a);
                    let left = crate::microworld::geometry::Vec2::new(-theta.sin(), theta.cos());
                    let lat_signed = agent.pose.pos.sub(route.point_at(s_a)).dot(left);
                    let vel_n = agent.pose.heading.cos() * left.x
                        + agent.pose.heading.sin() * left.y;
                    let receding = lat_signed * vel_n > 0.0;
                    lat <= 7.0 && !(receding && lat > 2.5)
                }
            }
        };
        if !threat {
            continue;
        }
        let gap = (s_a - s_ego - cfg.ego_half_len - agent.half_len - 2.5).max(0.0);
        v_t = v_t.min((2.0 * BRAKE_DECEL * gap).sqrt());
    }
    v_t
}

/// Stateless expert control law: pure pursuit on the route plus a
/// proportional speed loop onto the braking-envelope target.
pub fn expert_control(state: &WorldState, cfg: &MicroworldConfig) -> ControlCommand {
    let route = &state.def.route;
    let s_ego = state.route_arclen();
    let v = state.ego_speed;

    let lookahead = 2.5 + 0.5 * v;
    let target = route.point_at(s_ego + lookahead);
    let local = state.ego.to_local(target);
    let alpha = local.y.atan2(local.x.max(0.2));
    let delta = (2.0 * cfg.wheelbase * alpha.sin() / lookahead).atan();
    let steer = (delta / cfg.max_steer).clamp(-1.0, 1.0);

    let v_t = target_speed(state, cfg);
    let err = v_t - v;
    let feedforward = cfg.friction * v_t / cfg.max_accel;
    let u = 0.6 * err + feedforward;
    if u >= 0.0 {
        ControlCommand {
            throttle: u.min(1.0),
            brake: 0.0,
            steer,
        }
    } else {
        ControlCommand {
            throttle: 0.0,
            brake: (-u * 0.9).min(1.0),
            steer,
        }
    }
}

/// Simulate the expert from `state` for `steps` ticks and return every pose.
pub fn expert_rollout(state: &WorldState, steps: usize, cfg: &MicroworldConfig) -> Vec<WorldState> {
    let mut states = Vec::with_capacity(steps);
    let mut cur = state.clone();
    for _ in 0..steps {
        let control = expert_control(&cur, cfg);
        cur = step_dynamics(&cur, &control, cfg.dt, cfg).0;
        states.push(cur.clone());
    }
    states
}

fn feasible(state: &WorldState, kind: InstructionKind, end_s: f64) -> Result<(), ExpertError> {
    let s_ego = state.route_arclen();
    let horizon_end = end_s + 5.0;
    let segment_in_horizon = |want: SegmentKind| {
        let mut start = 0.0;
        for seg in &state.def.segments {
            let overlaps = seg.end_s > s_ego - 1.0 && start < horizon_end;
            if overlaps && seg.kind == want {
                return true;
            }
            start = seg.end_s;
        }
        false
    };
    match kind {
        InstructionKind::FollowLane => Ok(()),
        InstructionKind::TurnLeft => {
            if segment_in_horizon(SegmentKind::CurveLeft) {
                Ok(())
            } else {
                Err(ExpertError::InfeasibleInstruction(
                    "no left turn ahead".into(),
                ))
            }
        }
        InstructionKind::TurnRight => {
            if segment_in_horizon(SegmentKind::CurveRight) {
                Ok(())
            } else {
                Err(ExpertError::InfeasibleInstruction(
                    "no right turn ahead".into(),
                ))
            }
        }
        InstructionKind::StopAtLight => {
            let found = state
                .def
                .lights
                .iter()
                .any(|l| l.stop_s > s_ego - 2.0 && l.stop_s < horizon_end);
            if found {
                Ok(())
            } else {
                Err(ExpertError::InfeasibleInstruction("no light ahead".into()))
            }
        }
        InstructionKind::ChangeLaneLeft | InstructionKind::ChangeLaneRight => Err(
            ExpertError::InfeasibleInstruction("single-lane road".into()),
        ),
    }
}

/// Expert waypoints and completion for the given instruction.
///
/// Waypoints are the ego positions at t + {0.2, 0.4, 0.6, 0.8} s of the
/// expert's own future trajectory, expressed in the current ego frame.
/// Errors when the instruction is infeasible from this state (the source of
/// the misleading-instruction cases); behavior labels then fall back to
/// lane following.
pub fn expert_policy(
    state: &WorldState,
    scripted: &ScriptedInstruction,
    cfg: &MicroworldConfig,
) -> Result<([[f64; 2]; 4], bool), ExpertError> {
    feasible(state, scripted.instruction.kind(), scripted.end_s)?;
    Ok((expert_waypoints(state, cfg), instruction_completed(state, scripted)))
}

/// The waypoint half of [`expert_policy`], independent of any instruction.
pub fn expert_waypoints(state: &WorldState, cfg: &MicroworldConfig) -> [[f64; 2]; 4] {
    let rollout = expert_rollout(state, 8, cfg);
    let mut wps = [[0.0; 2]; 4];
    for (k, idx) in [1usize, 3, 5, 7].iter().enumerate() {
        let p = state.ego.to_local(rollout[*idx].ego.pos);
        wps[k] = [p.x, p.y];
    }
    wps
}

/// Terminal condition: the instruction's segment has been traversed (a 2 m
/// window before the boundary, so the flag is learnable from more than a
/// single frame).
pub fn instruction_completed(state: &WorldState, scripted: &ScriptedInstruction) -> bool {
    state.route_arclen() >= scripted.end_s - 2.0
}
