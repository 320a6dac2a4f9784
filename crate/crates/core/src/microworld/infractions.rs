//! Infraction detection between consecutive world states.

use super::geometry::segments_intersect;
use super::world::{AgentKind, LightState, WorldState};
use crate::config::MicroworldConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InfractionKind {
    CollisionVehicle,
    CollisionPedestrian,
    RedLightViolation,
    RouteDeviation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub timestamp: f64,
}

/// Detect infractions on the transition `prev` -> `next`.
///
/// Collisions and deviations fire on the rising edge only, so a sustained
/// contact or excursion produces one event. Red-light violations fire when
/// the ego's motion segment crosses a stop line governed by a red light.
pub fn detect_infractions(
    prev: &WorldState,
    next: &WorldState,
    cfg: &MicroworldConfig,
) -> Vec<InfractionEvent> {
    let mut events = Vec::new();
    let t = next.clock;

    let ego_prev = prev.ego_footprint(cfg);
    let ego_next = next.ego_footprint(cfg);
    let agents_prev = prev.agents();
    for (agent_prev, agent_next) in agents_prev.iter().zip(next.agents()) {
        let was = ego_prev.overlaps(&agent_prev.footprint());
        let is = ego_next.overlaps(&agent_next.footprint());
        if is && !was {
            events.push(InfractionEvent {
                kind: match agent_next.kind {
                    AgentKind::Vehicle => InfractionKind::CollisionVehicle,
                    AgentKind::Pedestrian => InfractionKind::CollisionPedestrian,
                },
                timestamp: t,
            });
        }
    }

    for light in &next.def.lights {
        if light.state_at(prev.clock) == LightState::Red
            && segments_intersect(prev.ego.pos, next.ego.pos, light.stop_a, light.stop_b)
        {
            events.push(InfractionEvent {
                kind: InfractionKind::RedLightViolation,
                timestamp: t,
            });
        }
    }

    let was_off = prev.lateral_deviation() > cfg.deviation_tolerance;
    let is_off = next.lateral_deviation() > cfg.deviation_tolerance;
    if is_off && !was_off {
        events.push(InfractionEvent {
            kind: InfractionKind::RouteDeviation,
            timestamp: t,
        });
    }

    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::geometry::{Polyline, Pose, Vec2};
    use crate::microworld::world::{
        AgentScript, LightSpec, Road, SegmentInfo, SegmentKind, WorldDef, WorldState,
    };
    use std::sync::Arc;

    fn def(agents: Vec<AgentScript>, lights: Vec<LightSpec>) -> Arc<WorldDef> {
        let pts: Vec<Vec2> = (0..50).map(|i| Vec2::new(i as f64 * 2.0, 0.0)).collect();
        let route = Polyline::new(pts.clone());
        let end_s = route.total_len();
        Arc::new(WorldDef {
            roads: vec![Road {
                points: pts,
                width: 8.0,
            }],
            route,
            agents,
            lights,
            segments: vec![SegmentInfo {
                end_s,
                kind: SegmentKind::Straight,
            }],
        })
    }

    #[test]
    fn clean_transition_yields_no_events() {
        let cfg = MicroworldConfig::default();
        let d = def(vec![], vec![]);
        let prev = WorldState::new(d.clone(), Pose::new(0.0, 0.0, 0.0), 5.0);
        let mut next = WorldState::new(d, Pose::new(0.5, 0.0, 0.0), 5.0);
        next.clock = 0.1;
        assert!(detect_infractions(&prev, &next, &cfg).is_empty());
    }

    #[test]
    fn footprint_overlap_fires_collision_once() {
        let cfg = MicroworldConfig::default();
        let parked = AgentScript {
            kind: AgentKind::Vehicle,
            path: vec![Vec2::new(10.0, 0.0), Vec2::new(10.01, 0.0)],
            speed: 0.0,
            start_time: 0.0,
        };
        let d = def(vec![parked], vec![]);
        let prev = WorldState::new(d.clone(), Pose::new(4.0, 0.0, 0.0), 5.0);
        let mut hit = WorldState::new(d.clone(), Pose::new(7.0, 0.0, 0.0), 5.0);
        hit.clock = 0.1;
        let events = detect_infractions(&prev, &hit, &cfg);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, InfractionKind::CollisionVehicle);
        // still overlapping next step: no repeat event
        let mut still = WorldState::new(d, Pose::new(7.5, 0.0, 0.0), 5.0);
        still.clock = 0.2;
        assert!(detect_infractions(&hit, &still, &cfg).is_empty());
    }

    #[test]
    fn oriented_overlap_matches_brute_force_sampling() {
        // SAT result must agree with dense point sampling of one box inside
        // the other (polygon-intersection oracle).
        let cfg = MicroworldConfig::default();
        for (dx, dy, yaw) in [
            (3.0, 0.5, 0.4),
            (4.5, 1.5, 1.2),
            (2.0, 2.5, 0.0),
            (5.0, 0.0, 0.0),
        ] {
            let agent = AgentScript {
                kind: AgentKind::Vehicle,
                path: vec![Vec2::new(10.0 + dx, dy), Vec2::new(10.01 + dx, dy)],
                speed: 0.0,
                start_time: 0.0,
            };
            let d = def(vec![agent], vec![]);
            let mut state = WorldState::new(d, Pose::new(10.0, 0.0, yaw), 0.0);
            state.clock = 0.1;
            let ego = state.ego_footprint(&cfg);
            let other = state.agents()[0].footprint();
            let sat = ego.overlaps(&other);
            // brute force: sample a grid of points in each box
            let mut brute = false;
            for box_pair in [(&ego, &other), (&other, &ego)] {
                let (a, b) = box_pair;
                for i in 0..40 {
                    for j in 0..40 {
                        let lx = (i as f64 / 39.0 - 0.5) * 2.0 * a.half_len;
                        let ly = (j as f64 / 39.0 - 0.5) * 2.0 * a.half_wid;
                        let p = a.center.add(Vec2::new(lx, ly).rotate(a.yaw));
                        if b.contains(p) {
                            brute = true;
                        }
                    }
                }
            }
            assert_eq!(sat, brute, "SAT vs sampling at dx={dx} dy={dy} yaw={yaw}");
        }
    }

    #[test]
    fn crossing_stop_line_on_red_is_violation() {
        let cfg = MicroworldConfig::default();
        let light = LightSpec {
            pos: Vec2::new(10.0, -4.0),
            stop_a: Vec2::new(10.0, -4.0),
            stop_b: Vec2::new(10.0, 4.0),
            stop_s: 10.0,
            green_dur: 0.0,
            red_dur: 100.0,
            phase_offset: 0.0,
        };
        let d = def(vec![], vec![light]);
        let prev = WorldState::new(d.clone(), Pose::new(9.95, 0.0, 0.0), 5.0);
        // one centimeter past the line
        let mut next = WorldState::new(d.clone(), Pose::new(10.01, 0.0, 0.0), 5.0);
        next.clock = 0.1;
        let events = detect_infractions(&prev, &next, &cfg);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, InfractionKind::RedLightViolation);
        // same crossing under green is clean
        let green = LightSpec {
            green_dur: 100.0,
            red_dur: 0.1,
            ..d.lights[0].clone()
        };
        let d2 = def(vec![], vec![green]);
        let prev2 = WorldState::new(d2.clone(), Pose::new(9.95, 0.0, 0.0), 5.0);
        let mut next2 = WorldState::new(d2, Pose::new(10.01, 0.0, 0.0), 5.0);
        next2.clock = 0.1;
        assert!(detect_infractions(&prev2, &next2, &cfg).is_empty());
    }

    #[test]
    fn deviation_fires_on_rising_edge() {
        let cfg = MicroworldConfig::default();
        let d = def(vec![], vec![]);
        let prev = WorldState::new(d.clone(), Pose::new(5.0, 2.0, 0.0), 5.0);
        let mut next = WorldState::new(d.clone(), Pose::new(5.0, 3.5, 0.0), 5.0);
        next.clock = 0.1;
        let events = detect_infractions(&prev, &next, &cfg);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, InfractionKind::RouteDeviation);
        let mut farther = WorldState::new(d, Pose::new(5.0, 4.5, 0.0), 5.0);
        farther.clock = 0.2;
        assert!(detect_infractions(&next, &farther, &cfg).is_empty());
    }
}
