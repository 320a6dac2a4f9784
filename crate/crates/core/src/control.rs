//! Waypoints to low-level controls via two independent PID controllers:
//! one regulating longitudinal velocity, one regulating lateral heading.

use crate::config::ControlConfig;
use crate::lm::PlanOutput;
use serde::{Deserialize, Serialize};

/// Low-level vehicle command. Throttle and brake are mutually exclusive by
/// post-processing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub throttle: f64,
    pub brake: f64,
    pub steer: f64,
}

impl ControlCommand {
    pub fn stop() -> ControlCommand {
        ControlCommand {
            throttle: 0.0,
            brake: 1.0,
            steer: 0.0,
        }
    }

    pub fn coast() -> ControlCommand {
        ControlCommand {
            throttle: 0.0,
            brake: 0.0,
            steer: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PidChannel {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

/// State of both PID controllers plus their gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub cfg: ControlConfig,
    pub longitudinal: PidChannel,
    pub lateral: PidChannel,
}

impl PidState {
    pub fn new(cfg: ControlConfig) -> PidState {
        PidState {
            cfg,
            longitudinal: PidChannel::default(),
            lateral: PidChannel::default(),
        }
    }

    pub fn reset(&mut self) {
        self.longitudinal = PidChannel::default();
        self.lateral = PidChannel::default();
    }
}

fn pid_update(
    channel: &mut PidChannel,
    gains: &crate::config::PidGains,
    clamp: f64,
    error: f64,
    dt: f64,
) -> f64 {
    channel.integral = (channel.integral + error * dt).clamp(-clamp, clamp);
    let derivative = match channel.prev_error {
        Some(prev) => (error - prev) / dt,
        None => 0.0,
    };
    channel.prev_error = Some(error);
    gains.kp * error + gains.ki * channel.integral + gains.kd * derivative
}

/// Throttle feedforward per m/s of target speed (drag compensation so the
/// zero-error operating point is a constant bias, not zero pedal).
pub const SPEED_FEEDFORWARD: f64 = 0.025;

/// Convert a predicted plan into a control command.
///
/// The longitudinal controller tracks a target speed derived from mean
/// waypoint spacing over the waypoint interval; the lateral controller tracks
/// the heading angle to the lookahead waypoint. Negative longitudinal output
/// maps to brake. Degenerate all-zero waypoints request a full stop.
pub fn waypoints_to_controls(
    plan: &PlanOutput,
    speed: f64,
    pid: &PidState,
    dt: f64,
) -> (ControlCommand, PidState) {
    assert!(dt > 0.0, "dt must be positive");
    let mut next = pid.clone();
    let wps = &plan.waypoints;
    assert_eq!(wps.len(), 4, "plan must carry 4 waypoints");

    let mut spacing = 0.0;
    let mut prev = [0.0, 0.0];
    for wp in wps {
        spacing += ((wp[0] - prev[0]).powi(2) + (wp[1] - prev[1]).powi(2)).sqrt();
        prev = *wp;
    }
    spacing /= wps.len() as f64;
    let target_speed = spacing / next.cfg.waypoint_dt;

    let e_lon = target_speed - speed;
    let u_lon = pid_update(
        &mut next.longitudinal,
        &next.cfg.longitudinal,
        next.cfg.integral_clamp,
        e_lon,
        dt,
    ) + SPEED_FEEDFORWARD * target_speed;

    let look = wps[next.cfg.lookahead_index.min(wps.len() - 1)];
    let heading_err = if look[0] == 0.0 && look[1] == 0.0 {
        0.0
    } else {
        look[1].atan2(look[0])
    };
    let u_lat = pid_update(
        &mut next.lateral,
        &next.cfg.lateral,
        next.cfg.integral_clamp,
        heading_err,
        dt,
    );

    let command = ControlCommand {
        throttle: if u_lon >= 0.0 { u_lon.min(1.0) } else { 0.0 },
        brake: if u_lon < 0.0 { (-u_lon).min(1.0) } else { 0.0 },
        steer: u_lat.clamp(-1.0, 1.0),
    };
    (command, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ControlConfig;
    use crate::lm::PlanOutput;

    fn plan(wps: [[f64; 2]; 4]) -> PlanOutput {
        PlanOutput {
            waypoints: wps,
            completed: 0.0,
        }
    }

    #[test]
    fn zero_waypoints_request_stop() {
        let pid = PidState::new(ControlConfig::default());
        let (cmd, _) = waypoints_to_controls(&plan([[0.0, 0.0]; 4]), 4.0, &pid, 0.1);
        assert!(cmd.brake > 0.0, "brake {}", cmd.brake);
        assert_eq!(cmd.throttle, 0.0);
        assert_eq!(cmd.steer, 0.0);
    }

    #[test]
    fn straight_at_implied_speed_is_feedforward_only() {
        // waypoints 1 m apart over 0.2 s imply 5 m/s; at 5 m/s with fresh
        // PID state the longitudinal output is exactly the feedforward bias.
        let pid = PidState::new(ControlConfig::default());
        let wps = [[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]];
        let (cmd, _) = waypoints_to_controls(&plan(wps), 5.0, &pid, 0.1);
        assert_eq!(cmd.steer, 0.0);
        let expected = SPEED_FEEDFORWARD * 5.0;
        assert!((cmd.throttle - expected).abs() < 1e-12, "{}", cmd.throttle);
        assert_eq!(cmd.brake, 0.0);
    }

    #[test]
    fn left_curve_steers_left() {
        let pid = PidState::new(ControlConfig::default());
        let wps = [[1.0, 0.2], [2.0, 0.7], [2.8, 1.4], [3.5, 2.3]];
        let (cmd, _) = waypoints_to_controls(&plan(wps), 5.0, &pid, 0.1);
        assert!(cmd.steer > 0.0, "left curve must steer positive (left)");
        let mirrored = [[1.0, -0.2], [2.0, -0.7], [2.8, -1.4], [3.5, -2.3]];
        let (cmd2, _) = waypoints_to_controls(&plan(mirrored), 5.0, &pid, 0.1);
        assert!(cmd2.steer < 0.0);
        assert_eq!(cmd.steer, -cmd2.steer, "steering is symmetric");
    }

    #[test]
    fn throttle_and_brake_never_coexist() {
        let mut pid = PidState::new(ControlConfig::default());
        let mut speed = 0.0;
        for i in 0..200 {
            let target = if i % 3 == 0 { 0.0 } else { (i % 7) as f64 };
            let d = target * 0.2;
            let wps = [[d, 0.1], [2.0 * d, -0.1], [3.0 * d, 0.2], [4.0 * d, 0.0]];
            let (cmd, next) = waypoints_to_controls(&plan(wps), speed, &pid, 0.1);
            pid = next;
            assert!(cmd.throttle * cmd.brake == 0.0);
            assert!((0.0..=1.0).contains(&cmd.throttle));
            assert!((0.0..=1.0).contains(&cmd.brake));
            assert!((-1.0..=1.0).contains(&cmd.steer));
            speed = (speed + cmd.throttle - cmd.brake).clamp(0.0, 10.0);
        }
    }

    #[test]
    fn zero_error_fixed_point_holds_integral() {
        let mut pid = PidState::new(ControlConfig::default());
        let wps = [[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]];
        // run one step to set prev_error, then confirm stationarity
        let (_, next) = waypoints_to_controls(&plan(wps), 5.0, &pid, 0.1);
        pid = next;
        let integral = pid.longitudinal.integral;
        for _ in 0..10 {
            let (cmd, next) = waypoints_to_controls(&plan(wps), 5.0, &pid, 0.1);
            pid = next;
            assert_eq!(pid.longitudinal.integral, integral, "integral drifted");
            assert_eq!(pid.longitudinal.prev_error, Some(0.0));
            assert_eq!(cmd.steer, 0.0);
        }
    }

    #[test]
    fn integral_respects_windup_clamp() {
        let mut pid = PidState::new(ControlConfig::default());
        let wps = [[2.0, 0.0], [4.0, 0.0], [6.0, 0.0], [8.0, 0.0]]; // 10 m/s target
        for _ in 0..500 {
            let (_, next) = waypoints_to_controls(&plan(wps), 0.0, &pid, 0.1);
            pid = next;
        }
        assert!(pid.longitudinal.integral.abs() <= pid.cfg.integral_clamp + 1e-12);
    }
}
