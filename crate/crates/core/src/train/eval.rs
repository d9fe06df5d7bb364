//! Average precision over 40 recall positions and evaluation reports.

use super::model::{Model, Sample};
use crate::datasets::COMMON_CLASSES;
use crate::error::Result;
use crate::geometry::{iou_3d, rotated_iou_bev, Box3D};

pub const RECALL_POSITIONS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApMetric {
    Bev,
    ThreeD,
}

impl ApMetric {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Self::Bev => rotated_iou_bev(a, b),
            Self::ThreeD => iou_3d(a, b),
        }
    }
}

/// Matching threshold per common class: 0.7 for cars, 0.5 otherwise.
pub fn class_iou_threshold(class_id: usize) -> f64 {
    if class_id == 0 {
        0.7
    } else {
        0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    /// In `[0, 100]`.
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    /// Set when there was nothing to score (no ground truth).
    pub undefined: bool,
}

/// Detections of `class_id` in global score order, as
/// `(frame, index within frame)`. Ties keep frame order, then input order.
pub fn ranked(frames: &[(Vec<Box3D>, Vec<Box3D>)], class_id: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, (dets, _))| {
            dets.iter()
                .enumerate()
                .filter(move |(_, d)| d.class_id == class_id)
                .map(move |(i, _)| (f, i))
        })
        .collect();
    order.sort_by(|a, b| frames[b.0].0[b.1].score.total_cmp(&frames[a.0].0[a.1].score));
    order
}

/// TP flags along the ranking: each detection takes the unmatched ground
/// truth of its frame with the highest IoU, if that reaches `iou_thresh`.
pub fn match_ranked(
    frames: &[(Vec<Box3D>, Vec<Box3D>)],
    order: &[(usize, usize)],
    class_id: usize,
    iou_thresh: f64,
    metric: ApMetric,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = frames.iter().map(|(_, gt)| vec![false; gt.len()]).collect();
    order
        .iter()
        .map(|&(f, i)| {
            let det = &frames[f].0[i];
            let best = frames[f]
                .1
                .iter()
                .enumerate()
                .filter(|(j, g)| g.class_id == class_id && !used[f][*j])
                .map(|(j, g)| (j, metric.iou(det, g)))
                .filter(|&(_, iou)| iou >= iou_thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    used[f][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP of `class_id` over frames of `(detections, ground truth)`: mean over
/// recall levels `r ∈ {1/40, …, 1}` of the best precision at recall ≥ r,
/// times 100.
pub fn evaluate_ap(frames: &[(Vec<Box3D>, Vec<Box3D>)], class_id: usize, iou_thresh: f64, metric: ApMetric) -> ApResult {
    let num_gt = frames
        .iter()
        .map(|(_, gt)| gt.iter().filter(|g| g.class_id == class_id).count())
        .sum::<usize>();
    let order = ranked(frames, class_id);
    let num_det = order.len();
    if num_gt == 0 {
        return ApResult {
            ap: 0.0,
            num_gt,
            num_det,
            undefined: true,
        };
    }
    let tp = match_ranked(frames, &order, class_id, iou_thresh, metric);
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        points.push((hits as f64 / num_gt as f64, hits as f64 / (k + 1) as f64));
    }
    // best precision at recall ≥ r, sweeping from the tail
    let mut best_from = vec![0.0f64; points.len() + 1];
    for k in (0..points.len()).rev() {
        best_from[k] = best_from[k + 1].max(points[k].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for level in 1..=RECALL_POSITIONS {
        let r = level as f64 / RECALL_POSITIONS as f64;
        while k < points.len() && points[k].0 < r - 1e-12 {
            k += 1;
        }
        sum += best_from[k];
    }
    ApResult {
        ap: 100.0 * sum / RECALL_POSITIONS as f64,
        num_gt,
        num_det,
        undefined: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApEntry {
    pub dataset: String,
    pub class_id: usize,
    pub ap_bev: f64,
    pub ap_3d: f64,
    pub num_gt: usize,
    pub undefined: bool,
}

/// Per dataset × class AP at the class threshold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<ApEntry>,
}

impl EvalReport {
    /// Scores `(detections, ground truth)` frames of one dataset.
    pub fn add(&mut self, dataset: &str, classes: &[usize], frames: &[(Vec<Box3D>, Vec<Box3D>)]) {
        for &c in classes {
            let t = class_iou_threshold(c);
            let bev = evaluate_ap(frames, c, t, ApMetric::Bev);
            let d3 = evaluate_ap(frames, c, t, ApMetric::ThreeD);
            self.entries.push(ApEntry {
                dataset: dataset.to_string(),
                class_id: c,
                ap_bev: bev.ap,
                ap_3d: d3.ap,
                num_gt: bev.num_gt,
                undefined: bev.undefined,
            });
        }
    }

    pub fn get(&self, dataset: &str, class_id: usize) -> Option<&ApEntry> {
        self.entries.iter().find(|e| e.dataset == dataset && e.class_id == class_id)
    }

    /// Arithmetic mean over datasets of one class, `None` without entries.
    pub fn average(&self, class_id: usize, metric: ApMetric) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.class_id == class_id)
            .map(|e| match metric {
                ApMetric::Bev => e.ap_bev,
                ApMetric::ThreeD => e.ap_3d,
            })
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn csv_header() -> &'static str {
        "config,dataset,class,ap_bev,ap_3d\n"
    }

    /// Rows for every entry plus one `avg` row per class.
    pub fn csv_rows(&self, config: &str) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s += &format!(
                "{config},{},{},{:.4},{:.4}\n",
                e.dataset, COMMON_CLASSES[e.class_id], e.ap_bev, e.ap_3d
            );
        }
        let mut classes: Vec<usize> = self.entries.iter().map(|e| e.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            s += &format!(
                "{config},avg,{},{:.4},{:.4}\n",
                COMMON_CLASSES[c],
                self.average(c, ApMetric::Bev).unwrap_or(0.0),
                self.average(c, ApMetric::ThreeD).unwrap_or(0.0)
            );
        }
        s
    }

    pub fn to_csv(&self, config: &str) -> String {
        format!("{}{}", Self::csv_header(), self.csv_rows(config))
    }
}

/// Detections paired with ground truth for every sample, routed as `route`
/// (defaults to each sample's own dataset).
pub fn detect(model: &Model, samples: &[&Sample], route: Option<usize>) -> Result<Vec<(Vec<Box3D>, Vec<Box3D>)>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let d = samples[start].dataset_id;
        let end = start + samples[start..].iter().take_while(|s| s.dataset_id == d).count();
        let dets = model.predict(&samples[start..end], route.unwrap_or(d))?;
        out.extend(dets.into_iter().zip(samples[start..end].iter().map(|s| s.gt.clone())));
        start = end;
    }
    Ok(out)
}

/// Scores every registered dataset that has samples.
pub fn evaluate_model(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (d, spec) in model.cfg.datasets.iter().enumerate() {
        let mine: Vec<&Sample> = samples.iter().filter(|s| s.dataset_id == d).collect();
        if mine.is_empty() {
            continue;
        }
        let frames = detect(model, &mine, None)?;
        report.add(&spec.name, &scored_classes(model, &spec.classes), &frames);
    }
    Ok(report)
}

/// Head classes the dataset annotates.
pub fn scored_classes(model: &Model, dataset_classes: &[usize]) -> Vec<usize> {
    model
        .cfg
        .head
        .classes
        .iter()
        .copied()
        .filter(|c| dataset_classes.contains(c))
        .collect()
}
