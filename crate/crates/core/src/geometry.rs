//! Planar SE(2) poses, oriented boxes, rotated IoU and ray casting.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-pi, pi]`. Angles already in range are returned
/// unchanged, bit for bit.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Planar pose: position in meters, heading in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
    #[serde(rename = "yaw_rad")]
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// World point expressed in this pose's frame.
    pub fn to_local(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p.0 - self.x, p.1 - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Point in this pose's frame expressed in the world frame.
    pub fn to_world(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * p.0 - s * p.1, self.y + s * p.0 + c * p.1)
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Rigid map `p -> R(theta) p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub cos: f64,
    pub sin: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            cos: 1.0,
            sin: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    /// Maps ego-frame coordinates to source-frame coordinates. Composed from
    /// the relative heading and offset so equal poses give the exact identity.
    pub fn ego_to_src(src: &Pose, ego: &Pose) -> Self {
        let (s, c) = (ego.yaw - src.yaw).sin_cos();
        let (ss, cs) = src.yaw.sin_cos();
        let (dx, dy) = (ego.x - src.x, ego.y - src.y);
        Self {
            cos: c,
            sin: s,
            tx: cs * dx + ss * dy,
            ty: -ss * dx + cs * dy,
        }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (self.cos * p.0 - self.sin * p.1 + self.tx, self.sin * p.0 + self.cos * p.1 + self.ty)
    }
}

/// Oriented BEV box. `l` runs along the heading, `w` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    #[serde(rename = "cx_m")]
    pub cx: f64,
    #[serde(rename = "cy_m")]
    pub cy: f64,
    #[serde(rename = "w_m")]
    pub w: f64,
    #[serde(rename = "l_m")]
    pub l: f64,
    #[serde(rename = "yaw_rad")]
    pub yaw: f64,
    pub score: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            l,
            yaw: normalize_angle(yaw),
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Counter-clockwise corners.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)].map(|(x, y)| (self.cx + c * x - s * y, self.cy + s * x + c * y))
    }

    /// The same box seen from `frame` (world -> frame-local).
    pub fn to_frame(&self, frame: &Pose) -> Self {
        let (cx, cy) = frame.to_local((self.cx, self.cy));
        Self {
            cx,
            cy,
            yaw: normalize_angle(self.yaw - frame.yaw),
            ..*self
        }
    }

    /// Distance along the ray `origin + t * dir` (unit `dir`) to the box
    /// boundary, or `None` if the ray misses. An origin inside the box hits at 0.
    pub fn ray_hit(&self, origin: (f64, f64), dir: (f64, f64)) -> Option<f64> {
        let (s, c) = self.yaw.sin_cos();
        let (ox, oy) = (origin.0 - self.cx, origin.1 - self.cy);
        let o = (c * ox + s * oy, -s * ox + c * oy);
        let d = (c * dir.0 + s * dir.1, -s * dir.0 + c * dir.1);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for (oc, dc, half) in [(o.0, d.0, self.l / 2.0), (o.1, d.1, self.w / 2.0)] {
            if dc.abs() < 1e-15 {
                if oc.abs() > half {
                    return None;
                }
                continue;
            }
            let (a, b) = ((-half - oc) / dc, (half - oc) / dc);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        if t0 > t1 || t1 < 0.0 {
            return None;
        }
        Some(t0.max(0.0))
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
}

/// Sutherland-Hodgman: clips `subject` against the convex CCW polygon `clip`.
pub fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (cross(a, b, p), cross(a, b, q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let r = a.l.hypot(a.w) / 2.0 + b.l.hypot(b.w) / 2.0;
    if (a.cx - b.cx).hypot(a.cy - b.cy) > r {
        return 0.0;
    }
    polygon_area(&clip_polygon(&a.corners(), &b.corners())).max(0.0)
}

/// Rotated BEV intersection-over-union.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
