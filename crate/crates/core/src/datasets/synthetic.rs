//! Synthetic LiDAR domains.
//!
//! A frame is a flat ground plane `sensor_height` below the sensor plus
//! points on the sensor-facing faces of every object. Domains differ in range,
//! sensor height, beam density and object-size distributions.

use super::{class_id, Frame, COMMON_CLASSES};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud, Range3D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const PLACEMENT_RETRIES: usize = 200;
const SIZE_RETRIES: usize = 1000;
/// Clearance between neighboring objects, meters.
const OBJECT_GAP: f64 = 0.3;

/// Truncated-normal size model for one class, dims ordered `l, w, h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeDist {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub class_id: usize,
    pub weight: f64,
    pub size: SizeDist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomainConfig {
    pub seed: u64,
    pub range: Range3D,
    pub sensor_height: f64,
    /// Ground returns per frame before beam thinning.
    pub ground_points: usize,
    /// Object surface returns per square meter before beam thinning.
    pub surface_density: f64,
    /// Fraction of returns kept, in (0, 1].
    pub beam_density: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub yaw_range: (f64, f64),
    /// Vertical noise of ground returns.
    pub noise_std: f64,
    pub classes: Vec<ClassModel>,
}

impl SyntheticDomainConfig {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beam_density > 0.0 && self.beam_density <= 1.0) {
            return bad(format!("beam_density {} not in (0,1]", self.beam_density));
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max".into());
        }
        if self.classes.is_empty() && self.objects_max > 0 {
            return bad("objects requested but no class models".into());
        }
        if self.noise_std < 0.0 || self.surface_density < 0.0 || self.yaw_range.0 > self.yaw_range.1 {
            return bad("negative noise/density or empty yaw range".into());
        }
        if -self.sensor_height - 4.0 * self.noise_std < self.range.z_min {
            return bad(format!(
                "ground at z={} falls outside range z_min={}",
                -self.sensor_height, self.range.z_min
            ));
        }
        for c in &self.classes {
            if c.class_id >= COMMON_CLASSES.len() || c.weight < 0.0 {
                return bad(format!("bad class model {c:?}"));
            }
            let s = &c.size;
            for d in 0..3 {
                if s.std[d] < 0.0 || s.min[d] <= 0.0 || s.min[d] > s.max[d] {
                    return bad(format!("bad size model for class {}", c.class_id));
                }
            }
            if -self.sensor_height + s.max[2] >= self.range.z_max {
                return bad(format!("class {} boxes can poke above z_max", c.class_id));
            }
        }
        Ok(())
    }

    /// Reads the keys documented in the repository README.
    pub fn from_config(c: &Config) -> Result<Self> {
        let range = Range3D::parse(c.require("range")?)?;
        let names: Vec<String> = c.list("classes")?.unwrap_or_default();
        let mut classes = Vec::new();
        for name in &names {
            let id = class_id(name).ok_or_else(|| Error::Config(format!("unknown class `{name}`")))?;
            let triple = |k: &str| -> Result<[f64; 3]> {
                let key = format!("size.{name}.{k}");
                let v: Vec<f64> = c.list(&key)?.ok_or_else(|| Error::Config(format!("missing `{key}`")))?;
                v.try_into()
                    .map_err(|_| Error::Config(format!("`{key}` needs 3 values (l,w,h)")))
            };
            classes.push(ClassModel {
                class_id: id,
                weight: c.parse_or(&format!("size.{name}.weight"), 1.0)?,
                size: SizeDist {
                    mean: triple("mean")?,
                    std: triple("std")?,
                    min: triple("min")?,
                    max: triple("max")?,
                },
            });
        }
        let cfg = Self {
            seed: c.parse_or("seed", 0)?,
            range,
            sensor_height: c.parse_req("sensor_height")?,
            ground_points: c.parse_or("ground_points", 600)?,
            surface_density: c.parse_or("surface_density", 20.0)?,
            beam_density: c.parse_or("beam_density", 1.0)?,
            objects_min: c.parse_or("objects_min", 1)?,
            objects_max: c.parse_or("objects_max", 4)?,
            yaw_range: (c.parse_or("yaw_min", -0.6)?, c.parse_or("yaw_max", 0.6)?),
            noise_std: c.parse_or("noise_std", 0.02)?,
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_text(&self) -> String {
        let t = |v: [f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let mut s = format!(
            "seed = {}\nrange = {}\nsensor_height = {}\nground_points = {}\nsurface_density = {}\n\
             beam_density = {}\nobjects_min = {}\nobjects_max = {}\nyaw_min = {}\nyaw_max = {}\nnoise_std = {}\n",
            self.seed,
            self.range.to_config_string(),
            self.sensor_height,
            self.ground_points,
            self.surface_density,
            self.beam_density,
            self.objects_min,
            self.objects_max,
            self.yaw_range.0,
            self.yaw_range.1,
            self.noise_std
        );
        let names: Vec<&str> = self.classes.iter().map(|c| COMMON_CLASSES[c.class_id]).collect();
        s += &format!("classes = {}\n", names.join(","));
        for (c, name) in self.classes.iter().zip(&names) {
            s += &format!(
                "size.{name}.weight = {}\nsize.{name}.mean = {}\nsize.{name}.std = {}\nsize.{name}.min = {}\nsize.{name}.max = {}\n",
                c.weight,
                t(c.size.mean),
                t(c.size.std),
                t(c.size.min),
                t(c.size.max)
            );
        }
        s
    }
}

fn frame_rng(cfg: &SyntheticDomainConfig, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed)
}

fn sample_size(s: &SizeDist, rng: &mut ChaCha8Rng) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for d in 0..3 {
        if s.std[d] == 0.0 {
            out[d] = s.mean[d].clamp(s.min[d], s.max[d]);
            continue;
        }
        let n = Normal::new(s.mean[d], s.std[d]).map_err(|e| Error::Config(e.to_string()))?;
        out[d] = (0..SIZE_RETRIES)
            .map(|_| n.sample(rng))
            .find(|v| (s.min[d]..=s.max[d]).contains(v))
            .ok_or_else(|| Error::Generation(format!("size window [{}, {}] is too narrow", s.min[d], s.max[d])))?;
    }
    Ok(out)
}

fn pick_class<'a>(classes: &'a [ClassModel], rng: &mut ChaCha8Rng) -> &'a ClassModel {
    let total: f64 = classes.iter().map(|c| c.weight).sum();
    let mut u = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
    for c in classes {
        if u < c.weight {
            return c;
        }
        u -= c.weight;
    }
    &classes[classes.len() - 1]
}

/// Thinned count, at least `floor` when the raw count is positive.
fn thin(raw: f64, density: f64, floor: usize) -> usize {
    ((raw * density).round() as usize).max(if raw > 0.0 { floor } else { 0 })
}

/// Deterministic frame for `(cfg, seed)`.
///
/// Boxes sit on the ground (`cz = -sensor_height + h/2`) fully inside
/// `cfg.range` and do not overlap. Every box receives at least one surface
/// point.
pub fn generate_frame(cfg: &SyntheticDomainConfig, dataset_id: usize, seed: u64) -> Result<Frame> {
    cfg.validate()?;
    let mut rng = frame_rng(cfg, seed);
    let ground_z = -cfg.sensor_height;
    let r = &cfg.range;

    let count = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    for _ in 0..count {
        let model = pick_class(&cfg.classes, &mut rng);
        let [l, w, h] = sample_size(&model.size, &mut rng)?;
        let yaw = if cfg.yaw_range.0 < cfg.yaw_range.1 {
            rng.gen_range(cfg.yaw_range.0..cfg.yaw_range.1)
        } else {
            cfg.yaw_range.0
        };
        let half = 0.5 * (l * l + w * w).sqrt();
        let (x0, x1, y0, y1) = (r.x_min + half, r.x_max - half, r.y_min + half, r.y_max - half);
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Generation(format!("a {l:.2}x{w:.2} box cannot fit in range")));
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let (cx, cy) = (rng.gen_range(x0..x1), rng.gen_range(y0..y1));
            // keep the sensor itself clear
            if cx.hypot(cy) < half + 1.0 {
                continue;
            }
            let clear = boxes.iter().all(|b| {
                let other = 0.5 * (b.l * b.l + b.w * b.w).sqrt();
                (b.cx - cx).hypot(b.cy - cy) > half + other + OBJECT_GAP
            });
            if clear {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed.ok_or_else(|| {
            Error::Generation(format!("no free spot for object {} after {PLACEMENT_RETRIES} tries", boxes.len()))
        })?;
        boxes.push(Box3D::new([cx, cy, ground_z + h / 2.0], [l, w, h], yaw, model.class_id)?);
    }

    let mut points: Vec<([f64; 3], f64)> = Vec::new();
    let n_ground = thin(cfg.ground_points as f64, cfg.beam_density, 0);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    for _ in 0..n_ground {
        let (x, y) = (rng.gen_range(r.x_min..r.x_max), rng.gen_range(r.y_min..r.y_max));
        let z = ground_z + if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let on_object = boxes.iter().any(|b| b.contains_point([x, y, b.cz]));
        let intensity = rng.gen_range(0.0..0.3);
        if !on_object && z < r.z_max && z >= r.z_min {
            points.push(([x, y, z], intensity));
        }
    }
    for b in &boxes {
        surface_points(b, cfg, &mut rng, &mut points);
    }
    points.shuffle(&mut rng);

    let pc = PointCloud {
        xyz: points.iter().map(|p| p.0).collect(),
        intensity: points.iter().map(|p| p.1).collect(),
    };
    Ok(Frame {
        dataset_id,
        frame_id: format!("{seed:06}"),
        pc,
        gt_boxes: boxes,
    })
}

/// Samples the top face and the side faces whose outward normal points at
/// the sensor.
fn surface_points(b: &Box3D, cfg: &SyntheticDomainConfig, rng: &mut ChaCha8Rng, out: &mut Vec<([f64; 3], f64)>) {
    let (s, c) = b.yaw.sin_cos();
    let to_world = |u: f64, v: f64, z: f64| [b.cx + c * u - s * v, b.cy + s * u + c * v, z];
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    let (z0, z1) = b.z_bounds();
    let inside = |p: [f64; 3]| cfg.range.contains(p);

    let mut emitted = 0usize;
    let mut emit = |p: [f64; 3], rng: &mut ChaCha8Rng, out: &mut Vec<([f64; 3], f64)>| {
        if inside(p) {
            out.push((p, rng.gen_range(0.3..1.0)));
            emitted += 1;
        }
    };

    let n_top = thin(b.l * b.w * cfg.surface_density, cfg.beam_density, 1);
    for _ in 0..n_top {
        let (u, v) = (rng.gen_range(-hl..hl), rng.gen_range(-hw..hw));
        emit(to_world(u, v, z1), rng, out);
    }
    // (outward normal in box frame, face half-extent along the face, face offset)
    let faces = [
        ([1.0, 0.0], hw, hl),
        ([-1.0, 0.0], hw, hl),
        ([0.0, 1.0], hl, hw),
        ([0.0, -1.0], hl, hw),
    ];
    for (n, half_span, offset) in faces {
        let normal = [c * n[0] - s * n[1], s * n[0] + c * n[1]];
        let center = to_world(n[0] * offset, n[1] * offset, 0.0);
        if normal[0] * -center[0] + normal[1] * -center[1] <= 0.0 {
            continue;
        }
        let count = thin(2.0 * half_span * b.h * cfg.surface_density, cfg.beam_density, 0);
        for _ in 0..count {
            let t = rng.gen_range(-half_span..half_span);
            let z = rng.gen_range(z0..z1);
            let (u, v) = if n[0] != 0.0 { (n[0] * offset, t) } else { (t, n[1] * offset) };
            emit(to_world(u, v, z), rng, out);
        }
    }
    if emitted == 0 {
        out.push(([b.cx, b.cy, z1], 0.5));
    }
}
