//! Dataset specs, taxonomy mapping, frame I/O, size statistics and
//! subsampling. KITTI parsing lives in [`kitti`], synthetic domains in
//! [`synthetic`].

pub mod kitti;
pub mod synthetic;

pub use synthetic::{generate_frame, ClassModel, SizeDist, SyntheticDomainConfig};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{crop_to_range, shift_origin, Box3D, PointCloud, Range3D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// The common label space shared by every dataset.
pub const COMMON_CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

pub fn class_id(name: &str) -> Option<usize> {
    COMMON_CLASSES.iter().position(|c| *c == name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    /// Native point range; frames are cropped to it during harmonization.
    pub range: Range3D,
    /// Signed vertical shift added to every z when origins are aligned.
    pub dz_shift: f64,
    /// Raw label → index into `classes`.
    pub taxonomy: BTreeMap<String, usize>,
    /// Common class ids this dataset annotates.
    pub classes: Vec<usize>,
    /// Keep only the forward field of view (`x > 0` and the angular cut).
    pub fov_only: bool,
    pub fov_half_angle_deg: f64,
    pub synthetic: Option<SyntheticDomainConfig>,
}

impl DatasetSpec {
    pub fn new(name: &str, range: Range3D) -> Self {
        Self {
            name: name.to_string(),
            range,
            dz_shift: 0.0,
            taxonomy: COMMON_CLASSES
                .iter()
                .enumerate()
                .map(|(i, c)| (c.to_string(), i))
                .collect(),
            classes: (0..COMMON_CLASSES.len()).collect(),
            fov_only: false,
            fov_half_angle_deg: 90.0,
            synthetic: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if let Some(&bad) = self.taxonomy.values().find(|&&v| v >= self.classes.len()) {
            return Err(Error::Config(format!(
                "dataset `{}`: taxonomy maps to class slot {bad}, only {} classes",
                self.name,
                self.classes.len()
            )));
        }
        if self.classes.iter().any(|&c| c >= COMMON_CLASSES.len()) {
            return Err(Error::Config(format!("dataset `{}`: unknown class id", self.name)));
        }
        if !self.dz_shift.is_finite() {
            return Err(Error::Config(format!("dataset `{}`: dz_shift must be finite", self.name)));
        }
        Ok(())
    }

    /// Keys: `name`, `range`, `dz_shift`, `classes`, `fov_only`,
    /// `fov_half_angle_deg`, `taxonomy.<raw> = <class>` and an optional
    /// `synthetic.*` section.
    pub fn from_config(c: &Config) -> Result<Self> {
        let mut spec = Self::new(c.require("name")?, Range3D::parse(c.require("range")?)?);
        spec.dz_shift = c.parse_or("dz_shift", 0.0)?;
        if let Some(names) = c.list::<String>("classes")? {
            spec.classes = names
                .iter()
                .map(|n| class_id(n).ok_or_else(|| Error::Config(format!("unknown class `{n}`"))))
                .collect::<Result<_>>()?;
        }
        let tax = c.section("taxonomy");
        let mut taxonomy: BTreeMap<String, usize> = BTreeMap::new();
        for (i, &cid) in spec.classes.iter().enumerate() {
            taxonomy.insert(COMMON_CLASSES[cid].to_string(), i);
        }
        for (raw, target) in tax.iter() {
            let cid = class_id(target).ok_or_else(|| Error::Config(format!("taxonomy target `{target}`")))?;
            let slot = spec.classes.iter().position(|&c| c == cid).ok_or_else(|| {
                Error::Config(format!("taxonomy maps `{raw}` to `{target}`, not in classes"))
            })?;
            taxonomy.insert(raw.to_string(), slot);
        }
        spec.taxonomy = taxonomy;
        spec.fov_only = c.bool_or("fov_only", false)?;
        spec.fov_half_angle_deg = c.parse_or("fov_half_angle_deg", 90.0)?;
        let syn = c.section("synthetic");
        if syn.keys().next().is_some() {
            spec.synthetic = Some(SyntheticDomainConfig::from_config(&syn)?);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config_text(&self) -> String {
        let names: Vec<&str> = self.classes.iter().map(|&c| COMMON_CLASSES[c]).collect();
        let mut s = format!(
            "name = {}\nrange = {}\ndz_shift = {}\nclasses = {}\nfov_only = {}\nfov_half_angle_deg = {}\n",
            self.name,
            self.range.to_config_string(),
            self.dz_shift,
            names.join(","),
            self.fov_only,
            self.fov_half_angle_deg
        );
        for (raw, &slot) in &self.taxonomy {
            s += &format!("taxonomy.{raw} = {}\n", COMMON_CLASSES[self.classes[slot]]);
        }
        if let Some(syn) = &self.synthetic {
            for line in syn.to_config_text().lines() {
                s += &format!("synthetic.{line}\n");
            }
        }
        s
    }
}

/// Per-label counts of annotations dropped by taxonomy mapping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropCounter {
    pub by_label: BTreeMap<String, usize>,
}

impl DropCounter {
    pub fn total(&self) -> usize {
        self.by_label.values().sum()
    }
}

/// Common class id for `raw`, or `None` (counted) when unmapped.
pub fn map_taxonomy(raw: &str, spec: &DatasetSpec, drops: &mut DropCounter) -> Option<usize> {
    match spec.taxonomy.get(raw) {
        Some(&slot) => Some(spec.classes[slot]),
        None => {
            *drops.by_label.entry(raw.to_string()).or_default() += 1;
            None
        }
    }
}

/// One LiDAR sample with ground truth in the common label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub dataset_id: usize,
    pub frame_id: String,
    pub pc: PointCloud,
    pub gt_boxes: Vec<Box3D>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HarmonizeCounts {
    pub points_dropped: usize,
    pub boxes_dropped: usize,
}

impl std::ops::AddAssign for HarmonizeCounts {
    fn add_assign(&mut self, o: Self) {
        self.points_dropped += o.points_dropped;
        self.boxes_dropped += o.boxes_dropped;
    }
}

/// FOV cut (when flagged), crop to the dataset range, then the origin shift
/// when `align_origin` is set.
pub fn harmonize_frame(frame: &Frame, spec: &DatasetSpec, align_origin: bool) -> (Frame, HarmonizeCounts) {
    let (mut pc, mut boxes) = (frame.pc.clone(), frame.gt_boxes.clone());
    if spec.fov_only {
        let half = spec.fov_half_angle_deg.to_radians();
        let keep = |x: f64, y: f64| x > 0.0 && y.atan2(x).abs() < half;
        let mut cut = PointCloud::default();
        for (p, &i) in pc.xyz.iter().zip(&pc.intensity) {
            if keep(p[0], p[1]) {
                cut.push(*p, i);
            }
        }
        pc = cut;
        boxes.retain(|b| keep(b.cx, b.cy));
    }
    let (mut pc, mut boxes) = crop_to_range(&pc, &boxes, &spec.range);
    if align_origin && spec.dz_shift != 0.0 {
        (pc, boxes) = shift_origin(&pc, &boxes, spec.dz_shift);
    }
    let counts = HarmonizeCounts {
        points_dropped: frame.pc.len() - pc.len(),
        boxes_dropped: frame.gt_boxes.len() - boxes.len(),
    };
    (
        Frame {
            dataset_id: frame.dataset_id,
            frame_id: frame.frame_id.clone(),
            pc,
            gt_boxes: boxes,
        },
        counts,
    )
}

/// Writes `velodyne/<id>.bin` and `boxes/<id>.txt` (`class cx cy cz l w h yaw`).
pub fn write_frame(dir: &Path, frame: &Frame) -> Result<()> {
    for sub in ["velodyne", "boxes"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let bin = dir.join("velodyne").join(format!("{}.bin", frame.frame_id));
    std::fs::write(&bin, kitti::write_velodyne(&frame.pc)).map_err(|e| Error::io(&bin, e))?;
    let txt = dir.join("boxes").join(format!("{}.txt", frame.frame_id));
    std::fs::write(&txt, format_boxes(&frame.gt_boxes)).map_err(|e| Error::io(&txt, e))
}

pub fn format_boxes(boxes: &[Box3D]) -> String {
    boxes
        .iter()
        .map(|b| {
            format!(
                "{} {} {} {} {} {} {} {}\n",
                COMMON_CLASSES[b.class_id], b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw
            )
        })
        .collect()
}

pub fn parse_boxes(text: &str) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 8 {
            return Err(Error::Format(format!("box line {}: expected 8 fields, got {}", no + 1, f.len())));
        }
        let cid = class_id(f[0]).ok_or_else(|| Error::Format(format!("box line {}: class `{}`", no + 1, f[0])))?;
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("box line {}: {e}", no + 1)))?;
        out.push(
            Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], cid)
                .map_err(|e| Error::Format(format!("box line {}: {e}", no + 1)))?,
        );
    }
    Ok(out)
}

/// Loads every frame under `dir`, ordered by frame id.
///
/// Ground truth comes from `boxes/<id>.txt` when present, otherwise from
/// KITTI `label_2/<id>.txt` + `calib/<id>.txt` mapped through the spec's
/// taxonomy (DontCare rows are skipped, unmapped labels counted in `drops`).
pub fn read_frame_dir(dir: &Path, spec: &DatasetSpec, dataset_id: usize, drops: &mut DropCounter) -> Result<Vec<Frame>> {
    let vdir = dir.join("velodyne");
    let mut ids: Vec<String> = std::fs::read_dir(&vdir)
        .map_err(|e| Error::io(&vdir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "bin").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    ids.sort();
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let mut frames = Vec::with_capacity(ids.len());
    for id in ids {
        let bin = vdir.join(format!("{id}.bin"));
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let pc = kitti::read_velodyne(&bytes).map_err(|e| Error::Format(format!("{}: {e}", bin.display())))?;
        let boxes_path = dir.join("boxes").join(format!("{id}.txt"));
        let label_path = dir.join("label_2").join(format!("{id}.txt"));
        let gt_boxes = if boxes_path.exists() {
            parse_boxes(&read(&boxes_path)?).map_err(|e| Error::Format(format!("{}: {e}", boxes_path.display())))?
        } else if label_path.exists() {
            let calib_path = dir.join("calib").join(format!("{id}.txt"));
            let calib = kitti::read_calib(&read(&calib_path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", calib_path.display())))?;
            let recs = kitti::read_label(&read(&label_path)?, &calib)
                .map_err(|e| Error::Format(format!("{}: {e}", label_path.display())))?;
            recs.into_iter()
                .filter(|r| !r.dont_care)
                .filter_map(|r| {
                    let cid = map_taxonomy(&r.raw_label, spec, drops)?;
                    Some(Box3D { class_id: cid, ..r.lidar_box })
                })
                .collect()
        } else {
            Vec::new()
        };
        frames.push(Frame {
            dataset_id,
            frame_id: id,
            pc,
            gt_boxes,
        });
    }
    Ok(frames)
}

/// Per-class histograms of box length, width and height.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeHistogram {
    pub class_id: usize,
    /// `counts[d][k]` counts dimension `d` (l, w, h) in `[edges[k], edges[k+1])`.
    pub counts: [Vec<usize>; 3],
    pub underflow: [usize; 3],
    pub overflow: [usize; 3],
}

impl SizeHistogram {
    pub fn total(&self, dim: usize) -> usize {
        self.counts[dim].iter().sum::<usize>() + self.underflow[dim] + self.overflow[dim]
    }

    /// Index of the fullest bin of dimension `dim` (first on ties).
    pub fn mode_bin(&self, dim: usize) -> Option<usize> {
        let c = &self.counts[dim];
        let max = *c.iter().max()?;
        (max > 0).then(|| c.iter().position(|&v| v == max).expect("max exists"))
    }
}

/// One histogram per common class over the strictly increasing bin `edges`.
pub fn size_histograms(frames: &[Frame], edges: &[f64]) -> Result<Vec<SizeHistogram>> {
    // negated so NaN edges are rejected too
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("histogram edges must be strictly increasing with ≥ 2 entries".into()));
    }
    let nb = edges.len() - 1;
    let mut hist: Vec<SizeHistogram> = (0..COMMON_CLASSES.len())
        .map(|c| SizeHistogram {
            class_id: c,
            counts: [vec![0; nb], vec![0; nb], vec![0; nb]],
            underflow: [0; 3],
            overflow: [0; 3],
        })
        .collect();
    for b in frames.iter().flat_map(|f| &f.gt_boxes) {
        let h = &mut hist[b.class_id];
        for (d, v) in [b.l, b.w, b.h].into_iter().enumerate() {
            if v < edges[0] {
                h.underflow[d] += 1;
            } else if v >= edges[nb] {
                h.overflow[d] += 1;
            } else {
                let k = edges.partition_point(|&e| e <= v) - 1;
                h.counts[d][k] += 1;
            }
        }
    }
    Ok(hist)
}

/// Keeps exactly `⌈fraction·n⌉` frames chosen by a seeded shuffle, in their
/// original order.
pub fn subsample(frames: &[Frame], fraction: f64, seed: u64) -> Result<Vec<Frame>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} not in (0,1]")));
    }
    let keep = subsample_count(frames.len(), fraction);
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| frames[i].clone()).collect())
}

/// `⌈fraction·n⌉`, robust to products like `0.1·30 = 3.0000000000000004`.
pub fn subsample_count(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
    (k as usize).min(n)
}
