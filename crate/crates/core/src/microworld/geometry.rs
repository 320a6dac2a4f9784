//! 2D geometry primitives: vectors, poses, polylines, oriented boxes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Vec2 {
        Vec2 { x, y }
    }

    pub fn zero() -> Vec2 {
        Vec2 { x: 0.0, y: 0.0 }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, c: f64) -> Vec2 {
        Vec2::new(c * self.x, c * self.y)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// Position plus heading in world coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Pose {
        Pose {
            pos: Vec2::new(x, y),
            heading,
        }
    }

    /// World point expressed in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        p.sub(self.pos).rotate(-self.heading)
    }

    /// Local point (x forward, y left) expressed in world coordinates.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading).add(self.pos)
    }
}

/// Distance from point `p` to segment `a`-`b`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a.add(ab.scale(t)))
}

/// Proper or touching intersection of segments `a1`-`a2` and `b1`-`b2`.
pub fn segments_intersect(a1: Vec2, a2: Vec2, b1: Vec2, b2: Vec2) -> bool {
    let d1 = b2.sub(b1).cross(a1.sub(b1));
    let d2 = b2.sub(b1).cross(a2.sub(b1));
    let d3 = a2.sub(a1).cross(b1.sub(a1));
    let d4 = a2.sub(a1).cross(b2.sub(a1));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |d: f64, p: Vec2, q: Vec2, r: Vec2| {
        d == 0.0
            && r.x >= p.x.min(q.x)
            && r.x <= p.x.max(q.x)
            && r.y >= p.y.min(q.y)
            && r.y <= p.y.max(q.y)
    };
    on(d1, b1, b2, a1) || on(d2, b1, b2, a2) || on(d3, a1, a2, b1) || on(d4, a1, a2, b2)
}

/// Oriented bounding box (footprints of vehicles and pedestrians).
#[derive(Debug, Clone, Copy)]
pub struct Obb {
    pub center: Vec2,
    pub half_len: f64,
    pub half_wid: f64,
    pub yaw: f64,
}

impl Obb {
    pub fn corners(&self) -> [Vec2; 4] {
        let axis_l = Vec2::new(self.yaw.cos(), self.yaw.sin());
        let axis_w = Vec2::new(-self.yaw.sin(), self.yaw.cos());
        let l = axis_l.scale(self.half_len);
        let w = axis_w.scale(self.half_wid);
        [
            self.center.add(l).add(w),
            self.center.add(l).sub(w),
            self.center.sub(l).sub(w),
            self.center.sub(l).add(w),
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let local = p.sub(self.center).rotate(-self.yaw);
        local.x.abs() <= self.half_len && local.y.abs() <= self.half_wid
    }

    /// Separating-axis overlap test between two oriented boxes.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let axes = [
            Vec2::new(self.yaw.cos(), self.yaw.sin()),
            Vec2::new(-self.yaw.sin(), self.yaw.cos()),
            Vec2::new(other.yaw.cos(), other.yaw.sin()),
            Vec2::new(-other.yaw.sin(), other.yaw.cos()),
        ];
        let ca = self.corners();
        let cb = other.corners();
        for axis in axes {
            let proj = |cs: &[Vec2; 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for c in cs {
                    let d = c.dot(axis);
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
                (lo, hi)
            };
            let (alo, ahi) = proj(&ca);
            let (blo, bhi) = proj(&cb);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
        true
    }
}

/// Polyline with precomputed cumulative arc lengths.
#[derive(Debug, Clone)]
pub struct Polyline {
    pub points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Polyline {
        assert!(points.len() >= 2, "polyline needs at least 2 points");
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in points.windows(2) {
            acc += w[0].dist(w[1]);
            cum.push(acc);
        }
        Polyline { points, cum }
    }

    pub fn total_len(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point at arc length `s` (clamped to the ends).
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.total_len());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        };
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        self.points[i].add(self.points[i + 1].sub(self.points[i]).scale(t))
    }

    /// Tangent heading at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total_len());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        };
        self.points[i + 1].sub(self.points[i]).angle()
    }

    /// Project a point: returns (arc length of closest point, lateral distance).
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = b.sub(a);
            let len2 = ab.dot(ab);
            let t = if len2 > 0.0 {
                (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = a.add(ab.scale(t));
            let d = p.dist(q);
            if d < best.1 {
                best = (self.cum[i] + ab.norm() * t, d);
            }
        }
        best
    }
}
