//! KITTI raw formats: velodyne binaries, object labels and calibration files.

use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, Box3D, PointCloud};
use nalgebra::{Matrix3, Vector3};
use std::f64::consts::FRAC_PI_2;

/// Parses little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn read_velodyne(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!(
            "velodyne length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut pc = PointCloud {
        xyz: Vec::with_capacity(n),
        intensity: Vec::with_capacity(n),
    };
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let mut v = [0.0f64; 4];
        for (j, word) in rec.chunks_exact(4).enumerate() {
            let f = f32::from_le_bytes(word.try_into().expect("4-byte chunk"));
            if !f.is_finite() {
                return Err(Error::Format(format!(
                    "non-finite value at byte offset {}",
                    i * 16 + j * 4
                )));
            }
            v[j] = f as f64;
        }
        pc.push([v[0], v[1], v[2]], v[3]);
    }
    Ok(pc)
}

/// Serializes a cloud as KITTI velodyne bytes (values narrowed to `f32`).
pub fn write_velodyne(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for (p, &i) in pc.xyz.iter().zip(&pc.intensity) {
        for v in [p[0], p[1], p[2], i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Affine map `x ↦ m·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub m: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.m * Vector3::new(p[0], p[1], p[2]) + self.t;
        [q.x, q.y, q.z]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            m: self.m * other.m,
            t: self.m * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Result<RigidTransform> {
        let mi = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Format("calibration matrix is singular".into()))?;
        Ok(RigidTransform { m: mi, t: -(mi * self.t) })
    }
}

/// Both directions between the LiDAR frame and the rectified camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub velo_to_rect: RigidTransform,
    pub rect_to_velo: RigidTransform,
}

impl Calibration {
    pub fn identity() -> Self {
        Self {
            velo_to_rect: RigidTransform::identity(),
            rect_to_velo: RigidTransform::identity(),
        }
    }

    pub fn from_velo_to_rect(velo_to_rect: RigidTransform) -> Result<Self> {
        Ok(Self {
            rect_to_velo: velo_to_rect.inverse()?,
            velo_to_rect,
        })
    }
}

/// Reads `Tr_velo_to_cam` (3×4) and `R0_rect` (3×3); other keys are ignored.
pub fn read_calib(text: &str) -> Result<Calibration> {
    let mut tr: Option<Vec<f64>> = None;
    let mut r0: Option<Vec<f64>> = None;
    for (no, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let slot = match key.trim() {
            "Tr_velo_to_cam" => &mut tr,
            "R0_rect" => &mut r0,
            _ => continue,
        };
        let vals = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("calib line {}: {e}", no + 1)))?;
        *slot = Some(vals);
    }
    let tr = tr.ok_or_else(|| Error::Format("calib is missing Tr_velo_to_cam".into()))?;
    let r0 = r0.ok_or_else(|| Error::Format("calib is missing R0_rect".into()))?;
    if tr.len() != 12 || r0.len() != 9 {
        return Err(Error::Format(format!(
            "calib expects 12 Tr_velo_to_cam and 9 R0_rect values, got {} and {}",
            tr.len(),
            r0.len()
        )));
    }
    let velo_to_cam = RigidTransform {
        m: Matrix3::new(tr[0], tr[1], tr[2], tr[4], tr[5], tr[6], tr[8], tr[9], tr[10]),
        t: Vector3::new(tr[3], tr[7], tr[11]),
    };
    let rect = RigidTransform {
        m: Matrix3::from_row_slice(&r0),
        t: Vector3::zeros(),
    };
    Calibration::from_velo_to_rect(rect.compose(&velo_to_cam))
}

pub fn write_calib(velo_to_cam: &RigidTransform, r0: &Matrix3<f64>) -> String {
    let m = &velo_to_cam.m;
    let t = &velo_to_cam.t;
    let tr = [
        m[(0, 0)], m[(0, 1)], m[(0, 2)], t.x,
        m[(1, 0)], m[(1, 1)], m[(1, 2)], t.y,
        m[(2, 0)], m[(2, 1)], m[(2, 2)], t.z,
    ];
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    let r: Vec<f64> = (0..9).map(|i| r0[(i / 3, i % 3)]).collect();
    format!("R0_rect: {}\nTr_velo_to_cam: {}\n", fmt(&r), fmt(&tr))
}

/// One parsed label line, already converted into the LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub raw_label: String,
    pub dont_care: bool,
    /// LiDAR-frame box; `class_id` is 0 until taxonomy mapping.
    pub lidar_box: Box3D,
    pub line: usize,
}

/// Parses 15-field KITTI label lines.
///
/// Camera boxes are bottom-centered with dims `h w l` and `rotation_y`
/// about the camera y axis; they are lifted to LiDAR center/yaw.
pub fn read_label(text: &str, calib: &Calibration) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 15 {
            return Err(Error::Format(format!(
                "label line {}: expected 15 fields, got {}",
                no + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| {
                Error::Format(format!("label line {}: field {} `{}` is not a number", no + 1, i + 1, fields[i]))
            })
        };
        let mut v = [0.0; 14];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = num(i + 1)?;
        }
        let (h, w, l) = (v[7], v[8], v[9]);
        let bottom = calib.rect_to_velo.apply([v[10], v[11], v[12]]);
        let ry = v[13];
        let raw = fields[0].to_string();
        let dont_care = raw == "DontCare";
        // DontCare rows carry placeholder dims; keep them well-formed.
        let dims = if dont_care { [1.0, 1.0, 1.0] } else { [l, w, h] };
        let lidar_box = Box3D::new(
            [bottom[0], bottom[1], bottom[2] + dims[2] / 2.0],
            dims,
            -(FRAC_PI_2 + ry),
            0,
        )
        .map_err(|e| Error::Format(format!("label line {}: {e}", no + 1)))?;
        out.push(LabelRecord {
            raw_label: raw,
            dont_care,
            lidar_box,
            line: no + 1,
        });
    }
    Ok(out)
}

/// Formats a LiDAR-frame box as a KITTI label line (2D fields zeroed).
pub fn format_label_line(raw_label: &str, b: &Box3D, calib: &Calibration) -> String {
    let bottom = calib.velo_to_rect.apply([b.cx, b.cy, b.cz - b.h / 2.0]);
    let ry = normalize_yaw(-b.yaw - FRAC_PI_2);
    format!(
        "{raw_label} 0.00 0 0.00 0.00 0.00 0.00 0.00 {} {} {} {} {} {} {}",
        b.h, b.w, b.l, bottom[0], bottom[1], bottom[2], ry
    )
}
