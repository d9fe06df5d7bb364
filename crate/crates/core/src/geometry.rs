//! Point-cloud and box geometry: range cropping, origin shifts, BEV corners
//! and rotated-box IoU by convex polygon clipping.

use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Axis-aligned LiDAR range in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range3D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Range3D {
    pub fn new(x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> Result<Self> {
        let r = Self {
            x_min: x[0],
            x_max: x[1],
            y_min: y[0],
            y_max: y[1],
            z_min: z[0],
            z_max: z[1],
        };
        r.validate()?;
        Ok(r)
    }

    /// Parses `x_min,x_max,y_min,y_max,z_min,z_max`.
    pub fn parse(text: &str) -> Result<Self> {
        let v: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Config(format!("range '{text}': {e}")))?;
        if v.len() != 6 {
            return Err(Error::Config(format!("range '{text}' needs 6 values")));
        }
        Self::new([v[0], v[1]], [v[2], v[3]], [v[4], v[5]])
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [
            (self.x_min, self.x_max),
            (self.y_min, self.y_max),
            (self.z_min, self.z_max),
        ]
        .iter()
        .all(|&(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid range {self:?}: need min < max on every axis")))
        }
    }

    /// Half-open containment `min <= v < max` on every axis.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (self.x_min..self.x_max).contains(&p[0])
            && (self.y_min..self.y_max).contains(&p[1])
            && (self.z_min..self.z_max).contains(&p[2])
    }

    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.x_max - self.x_min,
            self.y_max - self.y_min,
            self.z_max - self.z_min,
        ]
    }

    /// Overlap of two ranges, if non-empty.
    pub fn intersect(&self, other: &Range3D) -> Option<Range3D> {
        let r = Range3D {
            x_min: self.x_min.max(other.x_min),
            x_max: self.x_max.min(other.x_max),
            y_min: self.y_min.max(other.y_min),
            y_max: self.y_max.min(other.y_max),
            z_min: self.z_min.max(other.z_min),
            z_max: self.z_max.min(other.z_max),
        };
        r.validate().ok().map(|_| r)
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max
        )
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Oriented 3D box in the LiDAR frame. `class_id` indexes the common label space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    /// A ground-truth box (score 1) with validated dimensions and normalized yaw.
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, class_id: usize) -> Result<Self> {
        if !dims.iter().all(|&d| d.is_finite() && d > 0.0) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::Contract(format!(
                "box needs finite center and positive dims, got {center:?} {dims:?}"
            )));
        }
        if !yaw.is_finite() {
            return Err(Error::Contract("box yaw is not finite".into()));
        }
        Ok(Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: dims[0],
            w: dims[1],
            h: dims[2],
            yaw: normalize_yaw(yaw),
            class_id,
            score: 1.0,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_bounds(&self) -> (f64, f64) {
        (self.cz - self.h / 2.0, self.cz + self.h / 2.0)
    }

    /// Whether `p` lies inside the box (closed).
    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.cx, p[1] - self.cy);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let eps = 1e-9;
        lx.abs() <= self.l / 2.0 + eps
            && ly.abs() <= self.w / 2.0 + eps
            && (p[2] - self.cz).abs() <= self.h / 2.0 + eps
    }
}

/// LiDAR points with per-point intensity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
}

impl PointCloud {
    pub fn new(xyz: Vec<[f64; 3]>, intensity: Vec<f64>) -> Result<Self> {
        if xyz.len() != intensity.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} intensities",
                xyz.len(),
                intensity.len()
            )));
        }
        if !xyz.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Contract("point coordinates must be finite".into()));
        }
        Ok(Self { xyz, intensity })
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn push(&mut self, p: [f64; 3], intensity: f64) {
        self.xyz.push(p);
        self.intensity.push(intensity);
    }
}

/// Keeps points inside `r` (half-open) and boxes whose center lies in `r`.
pub fn crop_to_range(pc: &PointCloud, boxes: &[Box3D], r: &Range3D) -> (PointCloud, Vec<Box3D>) {
    let mut out = PointCloud::default();
    for (p, &i) in pc.xyz.iter().zip(&pc.intensity) {
        if r.contains(*p) {
            out.push(*p, i);
        }
    }
    let kept = boxes.iter().filter(|b| r.contains(b.center())).copied().collect();
    (out, kept)
}

/// Adds `dz` to the z coordinate of every point and box center.
pub fn shift_origin(pc: &PointCloud, boxes: &[Box3D], dz: f64) -> (PointCloud, Vec<Box3D>) {
    let xyz = pc.xyz.iter().map(|p| [p[0], p[1], p[2] + dz]).collect();
    let shifted = boxes
        .iter()
        .map(|b| Box3D { cz: b.cz + dz, ..*b })
        .collect();
    (
        PointCloud {
            xyz,
            intensity: pc.intensity.clone(),
        },
        shifted,
    )
}

/// Corners of the box footprint, counter-clockwise.
pub fn box_corners_bev(b: &Box3D) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(lx, ly)| {
        [b.cx + c * lx - s * ly, b.cy + s * lx + c * ly]
    })
}

/// Signed area by the shoelace formula (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc / 2.0
}

fn edge_side(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Clips `subject` to the inside of the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut poly = subject.to_vec();
    for i in 0..clip.len() {
        if poly.len() < 3 {
            return Vec::new();
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut poly);
        for j in 0..input.len() {
            let (s, e) = (input[j], input[(j + 1) % input.len()]);
            let (ds, de) = (edge_side(a, b, s), edge_side(a, b, e));
            let (s_in, e_in) = (ds >= 0.0, de >= 0.0);
            if s_in != e_in {
                let t = ds / (ds - de);
                poly.push([s[0] + (e[0] - s[0]) * t, s[1] + (e[1] - s[1]) * t]);
            }
            if e_in {
                poly.push(e);
            }
        }
    }
    if poly.len() < 3 {
        Vec::new()
    } else {
        poly
    }
}

const DEGENERATE_AREA: f64 = 1e-12;

/// Intersection area of two box footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let (pa, pb) = (box_corners_bev(a), box_corners_bev(b));
    polygon_area(&clip_convex(&pa, &pb)).max(0.0)
}

/// BEV IoU plus a flag raised when either footprint is degenerate.
pub fn rotated_iou_bev_flagged(a: &Box3D, b: &Box3D) -> (f64, bool) {
    let (area_a, area_b) = (a.l * a.w, b.l * b.w);
    if area_a < DEGENERATE_AREA || area_b < DEGENERATE_AREA {
        return (0.0, true);
    }
    let inter = bev_intersection_area(a, b).min(area_a).min(area_b);
    ((inter / (area_a + area_b - inter)).clamp(0.0, 1.0), false)
}

/// IoU of the two box footprints in the ground plane.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    rotated_iou_bev_flagged(a, b).0
}

/// 3D IoU: BEV intersection times vertical overlap over the union of volumes.
pub fn iou_3d_flagged(a: &Box3D, b: &Box3D) -> (f64, bool) {
    let (va, vb) = (a.volume(), b.volume());
    if a.l * a.w < DEGENERATE_AREA || b.l * b.w < DEGENERATE_AREA || va < DEGENERATE_AREA || vb < DEGENERATE_AREA {
        return (0.0, true);
    }
    let (a0, a1) = a.z_bounds();
    let (b0, b1) = b.z_bounds();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz == 0.0 {
        return (0.0, false);
    }
    let inter = bev_intersection_area(a, b).min(a.l * a.w).min(b.l * b.w) * dz;
    ((inter / (va + vb - inter)).clamp(0.0, 1.0), false)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    iou_3d_flagged(a, b).0
}
