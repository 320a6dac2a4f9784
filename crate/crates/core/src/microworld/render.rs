//! Multi-view rasterized "cameras".
//!
//! Each view is a deterministic top-down raster in the frame of the ego plus
//! a fixed per-view yaw offset: front is centered on the heading, left/right
//! are rotated by the configured offsets. Entities draw in class-distinct
//! palette colors; identical states render to bit-identical frames.

use super::geometry::{point_segment_distance, Vec2};
use super::world::{AgentKind, LightState, WorldState};
use crate::config::MicroworldConfig;

/// Row-major h*w*3 image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(h: usize, w: usize, color: [f64; 3]) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&color);
        }
        Image { h, w, data }
    }

    pub fn get(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.w + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, r: usize, c: usize, color: [f64; 3]) {
        let i = (r * self.w + c) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Channels-first copy [3, h, w] for the neural stack.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = vec![0.0; 3 * self.h * self.w];
        for r in 0..self.h {
            for c in 0..self.w {
                for ch in 0..3 {
                    out[ch * self.h * self.w + r * self.w + c] = self.data[(r * self.w + c) * 3 + ch];
                }
            }
        }
        out
    }

    pub fn from_chw(data: &[f64], h: usize, w: usize) -> Image {
        assert_eq!(data.len(), 3 * h * w);
        let mut img = Image::filled(h, w, [0.0; 3]);
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    img.data[(r * w + c) * 3 + ch] = data[ch * h * w + r * w + c].clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(bytes: &[u8], h: usize, w: usize) -> Image {
        assert_eq!(bytes.len(), h * w * 3);
        Image {
            h,
            w,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }
}

/// Synchronized left/front/right rasters at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewFrame {
    /// View order: [left, front, right].
    pub images: [Image; 3],
    pub timestamp: f64,
}

impl MultiViewFrame {
    pub fn views(&self) -> usize {
        3
    }
}

pub mod palette {
    pub const BACKGROUND: [f64; 3] = [0.10, 0.10, 0.12];
    pub const ROAD: [f64; 3] = [0.35, 0.35, 0.35];
    pub const STOP_LINE: [f64; 3] = [0.85, 0.85, 0.85];
    pub const VEHICLE: [f64; 3] = [0.90, 0.20, 0.20];
    pub const PEDESTRIAN: [f64; 3] = [0.95, 0.85, 0.20];
    pub const LIGHT_RED: [f64; 3] = [1.00, 0.05, 0.05];
    pub const LIGHT_GREEN: [f64; 3] = [0.05, 1.00, 0.05];

    pub const ALL: [[f64; 3]; 7] = [
        BACKGROUND, ROAD, STOP_LINE, VEHICLE, PEDESTRIAN, LIGHT_RED, LIGHT_GREEN,
    ];
}

/// Yaw offsets for [left, front, right] in radians.
pub fn view_yaws(cfg: &MicroworldConfig) -> [f64; 3] {
    let side = cfg.side_yaw_deg.to_radians();
    [side, 0.0, -side]
}

/// World coordinates of the center of pixel (r, c) in view `view_idx`.
pub fn pixel_to_world(
    state: &WorldState,
    cfg: &MicroworldConfig,
    view_idx: usize,
    r: usize,
    c: usize,
) -> Vec2 {
    let n = cfg.raster_size as f64;
    let scale = cfg.view_range / n;
    let yaw = state.ego.heading + view_yaws(cfg)[view_idx];
    let forward = (n - (r as f64 + 0.5)) * scale - cfg.view_rear_margin;
    let lateral = (n / 2.0 - (c as f64 + 0.5)) * scale;
    state
        .ego
        .pos
        .add(Vec2::new(forward, lateral).rotate(yaw))
}

/// Render the three camera views of `state`.
pub fn render_views(state: &WorldState, cfg: &MicroworldConfig) -> MultiViewFrame {
    let n = cfg.raster_size;
    let scale = cfg.view_range / n as f64;
    // minimum draw radius guaranteeing at least one covered pixel center
    let min_radius = 0.75 * scale;
    let agents = state.agents();
    let lights = state.lights();

    let render_one = |view_idx: usize| -> Image {
        let mut img = Image::filled(n, n, palette::BACKGROUND);
        for r in 0..n {
            for c in 0..n {
                let p = pixel_to_world(state, cfg, view_idx, r, c);
                let mut color = palette::BACKGROUND;
                for road in &state.def.roads {
                    let mut on_road = false;
                    for seg in road.points.windows(2) {
                        if point_segment_distance(p, seg[0], seg[1]) <= road.width / 2.0 {
                            on_road = true;
                            break;
                        }
                    }
                    if on_road {
                        color = palette::ROAD;
                        break;
                    }
                }
                for light in &state.def.lights {
                    if point_segment_distance(p, light.stop_a, light.stop_b)
                        <= 0.3f64.max(min_radius)
                    {
                        color = palette::STOP_LINE;
                    }
                }
                for agent in &agents {
                    let hit = agent.footprint().contains(p)
                        || p.dist(agent.pose.pos) <= min_radius.max(match agent.kind {
                            AgentKind::Pedestrian => 0.35,
                            AgentKind::Vehicle => 0.0,
                        });
                    if hit {
                        color = match agent.kind {
                            AgentKind::Vehicle => palette::VEHICLE,
                            AgentKind::Pedestrian => palette::PEDESTRIAN,
                        };
                    }
                }
                for (pos, light_state) in &lights {
                    if p.dist(*pos) <= 0.8f64.max(min_radius) {
                        color = match light_state {
                            LightState::Red => palette::LIGHT_RED,
                            LightState::Green => palette::LIGHT_GREEN,
                        };
                    }
                }
                img.set(r, c, color);
            }
        }
        img
    };

    MultiViewFrame {
        images: [render_one(0), render_one(1), render_one(2)],
        timestamp: state.clock,
    }
}

/// Count pixels matching `color` exactly.
pub fn count_color(img: &Image, color: [f64; 3]) -> usize {
    let mut count = 0;
    for r in 0..img.h {
        for c in 0..img.w {
            if img.get(r, c) == color {
                count += 1;
            }
        }
    }
    count
}

/// Whether an agent at `pos` lies inside the raster window of a view
/// (the geometric visibility oracle used by tests).
pub fn in_view_window(
    state: &WorldState,
    cfg: &MicroworldConfig,
    view_idx: usize,
    pos: Vec2,
    margin: f64,
) -> bool {
    let yaw = state.ego.heading + view_yaws(cfg)[view_idx];
    let local = pos.sub(state.ego.pos).rotate(-yaw);
    let forward_lo = -cfg.view_rear_margin + margin;
    let forward_hi = cfg.view_range - cfg.view_rear_margin - margin;
    let lat = cfg.view_range / 2.0 - margin;
    local.x >= forward_lo && local.x <= forward_hi && local.y.abs() <= lat
}
