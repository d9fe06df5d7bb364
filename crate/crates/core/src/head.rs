//! Center-based detection heads, targets, losses and decoding.
//!
//! Each head predicts a per-class center heatmap and an 8-channel box
//! regression `(dx, dy, z, ln l, ln w, ln h, sin yaw, cos yaw)` at every BEV
//! cell. The multi-dataset loss is the plain sum of per-dataset head losses.

use crate::datasets::COMMON_CLASSES;
use crate::encoder::GridGeometry;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou_bev, Box3D};
use crate::tensor::{kernels, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

pub const REG_CHANNELS: usize = 8;
/// `ln(0.1 / 0.9)`: initial heatmap probability of 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Common class id of every heatmap channel.
    pub classes: Vec<usize>,
    pub min_overlap: f64,
    pub min_radius: usize,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub reg_weight: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            classes: vec![0],
            min_overlap: 0.1,
            min_radius: 2,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            reg_weight: 1.0,
            score_thresh: 0.3,
            nms_iou: 0.1,
            max_detections: 64,
        }
    }
}

impl HeadConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn slot_of(&self, class_id: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub heat_k: ParamId,
    pub heat_b: ParamId,
    pub reg_k: ParamId,
    pub reg_b: ParamId,
}

impl HeadParams {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, name: &str, channels: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            heat_k: params.add_he(&format!("{name}.heat.k"), &[classes, channels, 3, 3], channels * 9, rng),
            heat_b: params.add(format!("{name}.heat.b"), Tensor::full(&[classes], HEATMAP_PRIOR_BIAS)),
            reg_k: params.add_he(&format!("{name}.reg.k"), &[REG_CHANNELS, channels, 3, 3], channels * 9, rng),
            reg_b: params.add(format!("{name}.reg.b"), Tensor::zeros(&[REG_CHANNELS])),
        }
    }

    /// Heatmap logits `[B,K,H,W]` and regression `[B,8,H,W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let heat = g.conv2d(x, p.var(self.heat_k), Some(p.var(self.heat_b)))?;
        let reg = g.conv2d(x, p.var(self.reg_k), Some(p.var(self.reg_b)))?;
        Ok((heat, reg))
    }
}

/// Training targets of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    /// `[K, H, W]`, peaks exactly 1.
    pub heatmap: Tensor,
    /// `[8, H, W]`, meaningful at positive cells only.
    pub reg: Tensor,
    /// One flag per cell.
    pub mask: Vec<bool>,
    pub num_pos: usize,
}

/// Gaussian radius (in cells) for a `h × w` cell footprint so that a box
/// shifted within it still overlaps the original at `min_overlap`.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let (b1, c1) = (h + w, w * h * (1.0 - o) / (1.0 + o));
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let (a2, b2, c2) = (4.0, 2.0 * (h + w), (1.0 - o) * w * h);
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;
    let (a3, b3, c3) = (4.0 * o, -2.0 * o * (h + w), (o - 1.0) * w * h);
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Splat radius and σ used for a box footprint.
pub fn splat_params(b: &Box3D, geom: &GridGeometry, cfg: &HeadConfig) -> (usize, f64) {
    let r = gaussian_radius(b.l / geom.cell, b.w / geom.cell, cfg.min_overlap);
    let radius = (r.max(0.0).floor() as usize).max(cfg.min_radius);
    (radius, (2.0 * radius as f64 + 1.0) / 6.0)
}

/// Gaussian heatmap and regression targets. Boxes of classes outside the
/// head's list are ignored; when two boxes claim one cell the first keeps it.
pub fn build_targets(gt: &[Box3D], geom: &GridGeometry, cfg: &HeadConfig) -> TargetMap {
    let (h, w, k) = (geom.height, geom.width, cfg.num_classes());
    let hw = h * w;
    let mut heat = vec![0.0f64; k * hw];
    let mut reg = vec![0.0; REG_CHANNELS * hw];
    let mut mask = vec![false; hw];
    let mut num_pos = 0;
    for b in gt {
        let Some(slot) = cfg.slot_of(b.class_id) else {
            continue;
        };
        let fx = (b.cx - geom.x_min) / geom.cell;
        let fy = (b.cy - geom.y_min) / geom.cell;
        if fx < 0.0 || fy < 0.0 || fx >= w as f64 || fy >= h as f64 {
            continue;
        }
        let (row, col) = (fy.floor() as usize, fx.floor() as usize);
        let (radius, sigma) = splat_params(b, geom, cfg);
        let r = radius as isize;
        for di in -r..=r {
            for dj in -r..=r {
                let (rr, cc) = (row as isize + di, col as isize + dj);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut heat[slot * hw + rr as usize * w + cc as usize];
                *cell = cell.max(v);
            }
        }
        let s = row * w + col;
        if mask[s] {
            continue;
        }
        mask[s] = true;
        num_pos += 1;
        let (sy, cy) = b.yaw.sin_cos();
        let t = [fx - col as f64, fy - row as f64, b.cz, b.l.ln(), b.w.ln(), b.h.ln(), sy, cy];
        for (ch, v) in t.into_iter().enumerate() {
            reg[ch * hw + s] = v;
        }
    }
    TargetMap {
        heatmap: Tensor::new(vec![k, h, w], heat).expect("sized above"),
        reg: Tensor::new(vec![REG_CHANNELS, h, w], reg).expect("sized above"),
        mask,
        num_pos,
    }
}

/// Focal loss on the heatmap plus weighted L1 on positive cells, both
/// divided by `max(num_pos, 1)` over the whole group.
pub fn head_loss(g: &mut Graph, heat: Var, reg: Var, targets: &[&TargetMap], cfg: &HeadConfig) -> Result<Var> {
    let first = targets.first().ok_or_else(|| Error::Contract("head_loss on an empty group".into()))?;
    let stack = |f: &dyn Fn(&TargetMap) -> &Tensor| -> Result<Tensor> {
        let inner = f(first).shape().to_vec();
        let mut shape = vec![targets.len()];
        shape.extend(inner);
        let data = targets.iter().flat_map(|t| f(t).data().iter().copied()).collect();
        Tensor::new(shape, data)
    };
    let heat_t = stack(&|t| &t.heatmap)?;
    let reg_t = stack(&|t| &t.reg)?;
    let mask: Vec<bool> = targets.iter().flat_map(|t| t.mask.iter().copied()).collect();
    let num_pos: usize = targets.iter().map(|t| t.num_pos).sum();
    let norm = 1.0 / num_pos.max(1) as f64;
    let focal = g.focal_loss(heat, &heat_t, cfg.focal_alpha, cfg.focal_beta)?;
    let l1 = g.masked_l1(reg, &reg_t, &mask)?;
    let l1 = g.scale(l1, cfg.reg_weight)?;
    let total = g.add(focal, l1)?;
    g.scale(total, norm)
}

/// One dataset's share of a batch, routed to head `head`.
pub struct HeadGroup<'a> {
    pub head: usize,
    pub features: Var,
    pub targets: Vec<&'a TargetMap>,
}

/// Sum of per-group head losses, together with each group's term.
pub fn total_loss(g: &mut Graph, p: &Bound, heads: &[HeadParams], groups: &[HeadGroup], cfg: &HeadConfig) -> Result<(Var, Vec<Var>)> {
    let mut terms = Vec::with_capacity(groups.len());
    for grp in groups {
        let head = heads.get(grp.head).ok_or_else(|| {
            Error::Registry(format!("no head {} ({} registered)", grp.head, heads.len()))
        })?;
        let (heat, reg) = head.forward(g, p, grp.features)?;
        terms.push(head_loss(g, heat, reg, &grp.targets, cfg)?);
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for &t in &terms {
        total = g.add(total, t)?;
    }
    Ok((total, terms))
}

/// Boxes from one frame's head output (`heat` logits `[K,H,W]`, `reg` `[8,H,W]`).
pub fn decode(heat: &[f64], reg: &[f64], geom: &GridGeometry, cfg: &HeadConfig) -> Vec<Box3D> {
    let (h, w) = (geom.height, geom.width);
    let hw = h * w;
    let mut cands: Vec<(f64, usize, usize, Box3D)> = Vec::new();
    for k in 0..cfg.num_classes() {
        let plane = &heat[k * hw..(k + 1) * hw];
        for row in 0..h {
            for col in 0..w {
                let s = row * w + col;
                let v = plane[s];
                let score = kernels::sigmoid(v);
                if score <= cfg.score_thresh {
                    continue;
                }
                let is_peak = (row.saturating_sub(1)..(row + 2).min(h))
                    .flat_map(|r| (col.saturating_sub(1)..(col + 2).min(w)).map(move |c| r * w + c))
                    .all(|n| plane[n] <= v);
                if !is_peak {
                    continue;
                }
                let t: Vec<f64> = (0..REG_CHANNELS).map(|ch| reg[ch * hw + s]).collect();
                let cx = geom.x_min + (col as f64 + t[0]) * geom.cell;
                let cy = geom.y_min + (row as f64 + t[1]) * geom.cell;
                let dims = [t[3].exp(), t[4].exp(), t[5].exp()];
                let Ok(b) = Box3D::new([cx, cy, t[2]], dims, t[6].atan2(t[7]), cfg.classes[k]) else {
                    continue;
                };
                cands.push((score, s, k, b.with_score(score)));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let sorted: Vec<Box3D> = cands.into_iter().map(|c| c.3).collect();
    let mut kept = nms(&sorted, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// Greedy per-class NMS over boxes already sorted by descending score:
/// a box is dropped when its BEV IoU with a kept box of its class exceeds
/// `iou_thresh`.
pub fn nms(sorted: &[Box3D], iou_thresh: f64) -> Vec<Box3D> {
    let mut kept: Vec<Box3D> = Vec::new();
    for b in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == b.class_id && rotated_iou_bev(k, b) > iou_thresh);
        if !suppressed {
            kept.push(*b);
        }
    }
    kept
}

/// `frame_id dataset class score cx cy cz l w h yaw`, one line per box.
pub fn format_detections(frame_id: &str, dataset: &str, boxes: &[Box3D]) -> String {
    boxes
        .iter()
        .map(|b| {
            format!(
                "{frame_id} {dataset} {} {} {} {} {} {} {} {} {}\n",
                COMMON_CLASSES[b.class_id], b.score, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw
            )
        })
        .collect()
}

/// Inverse of [`format_detections`]: `(frame_id, dataset, box)` records.
pub fn parse_detections(text: &str) -> Result<Vec<(String, String, Box3D)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 11 {
            return Err(Error::Format(format!("detection line {}: expected 11 fields", no + 1)));
        }
        let cid = crate::datasets::class_id(f[2])
            .ok_or_else(|| Error::Format(format!("detection line {}: class `{}`", no + 1, f[2])))?;
        let v = f[3..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("detection line {}: {e}", no + 1)))?;
        let b = Box3D::new([v[1], v[2], v[3]], [v[4], v[5], v[6]], v[7], cid)
            .map_err(|e| Error::Format(format!("detection line {}: {e}", no + 1)))?
            .with_score(v[0]);
        out.push((f[0].to_string(), f[1].to_string(), b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Range3D;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> GridGeometry {
        GridGeometry::for_range(&Range3D::new([0.0, 8.0], [-4.0, 4.0], [-2.0, 2.0]).unwrap(), 0.8).unwrap()
    }

    fn car(cx: f64, cy: f64, yaw: f64) -> Box3D {
        Box3D::new([cx, cy, -0.8], [3.9, 1.7, 1.5], yaw, 0).unwrap()
    }

    #[test]
    fn empty_and_single_targets() {
        let cfg = HeadConfig::default();
        let t = build_targets(&[], &geom(), &cfg);
        assert!(t.heatmap.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.num_pos, 0);

        let b = car(4.1, 0.3, 0.2);
        let t = build_targets(&[b], &geom(), &cfg);
        let (row, col) = geom().cell_of(b.cx, b.cy);
        let w = geom().width;
        let max = t.heatmap.data().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert_eq!(t.heatmap.data()[row * w + col], 1.0);
        let (_, sigma) = splat_params(&b, &geom(), &cfg);
        let next = t.heatmap.data()[row * w + col + 1];
        assert!((next - (-1.0 / (2.0 * sigma * sigma)).exp()).abs() < 1e-15);
    }

    #[test]
    fn radius_matches_hand_computation() {
        // l=3.9, w=1.7 at 0.8 m cells; the third root is the binding one
        let (h, w, o): (f64, f64, f64) = (3.9 / 0.8, 1.7 / 0.8, 0.1);
        let (a3, b3, c3) = (4.0 * o, -2.0 * o * (h + w), (o - 1.0) * w * h);
        let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
        assert!((gaussian_radius(h, w, o) - r3).abs() < 1e-12);
    }

    #[test]
    fn decode_inverts_ideal_prediction() {
        let cfg = HeadConfig::default();
        let gt = [car(2.3, -1.9, 0.4), car(5.9, 2.1, -0.5)];
        let t = build_targets(&gt, &geom(), &cfg);
        // logits: +10 at peaks, -10 elsewhere
        let heat: Vec<f64> = t.heatmap.data().iter().map(|&v| if v == 1.0 { 10.0 } else { -10.0 }).collect();
        let boxes = decode(&heat, t.reg.data(), &geom(), &cfg);
        assert_eq!(boxes.len(), 2);
        for g in &gt {
            let b = boxes.iter().find(|b| (b.cx - g.cx).abs() < 0.4).unwrap();
            assert!((b.cy - g.cy).abs() < 0.4);
            assert!((b.l - g.l).abs() < 1e-6 && (b.w - g.w).abs() < 1e-6 && (b.h - g.h).abs() < 1e-6);
            assert!((b.yaw - g.yaw).abs() < 1e-6);
        }
    }

    #[test]
    fn single_peak_gives_one_box() {
        let cfg = HeadConfig::default();
        let g = geom();
        let mut heat = vec![-5.0; g.height * g.width];
        heat[3 * g.width + 4] = 2.0;
        let reg = vec![0.5; REG_CHANNELS * g.height * g.width];
        assert_eq!(decode(&heat, &reg, &g, &cfg).len(), 1);
    }

    #[test]
    fn nms_against_brute_force() {
        let cases = [
            vec![car(2.0, 0.0, 0.0).with_score(0.9), car(2.0, 0.0, 0.0).with_score(0.8)],
            vec![
                car(2.0, 0.0, 0.0).with_score(0.9),
                car(2.5, 0.3, 0.1).with_score(0.8),
                car(6.5, 0.0, 0.0).with_score(0.7),
            ],
            vec![
                car(2.0, 0.0, 0.0).with_score(0.9),
                car(4.4, 0.0, 0.0).with_score(0.8),
                car(6.6, 0.0, 0.0).with_score(0.7),
            ],
        ];
        assert_eq!(nms(&cases[0], 0.1).len(), 1);
        for boxes in &cases {
            // brute force: the kept set is the unique subset that (a) keeps the
            // first box, (b) has no kept pair above the threshold, and (c) leaves
            // every dropped box overlapping an earlier kept box
            let n = boxes.len();
            let iou = |i: usize, j: usize| rotated_iou_bev(&boxes[i], &boxes[j]) > 0.1;
            let mut valid = Vec::new();
            for mask in 0u32..(1 << n) {
                let keep = |i: usize| mask & (1 << i) != 0;
                let ok = (0..n).all(|i| {
                    let blocked = (0..i).any(|j| keep(j) && iou(i, j));
                    keep(i) != blocked
                });
                if ok {
                    valid.push((0..n).filter(|&i| keep(i)).map(|i| boxes[i]).collect::<Vec<_>>());
                }
            }
            assert_eq!(valid.len(), 1);
            assert_eq!(nms(boxes, 0.1), valid[0]);
        }
    }

    #[test]
    fn perfect_prediction_has_vanishing_loss() {
        let cfg = HeadConfig::default();
        let t = build_targets(&[car(4.1, 0.3, 0.2)], &geom(), &cfg);
        let mut g = Graph::new();
        // probability → target: 1 at the peak, 0 elsewhere
        let heat: Vec<f64> = t.heatmap.data().iter().map(|&v| if v == 1.0 { 40.0 } else { -40.0 }).collect();
        let hv = g.constant(Tensor::new(vec![1, 1, geom().height, geom().width], heat).unwrap());
        let rv = g.constant(t.reg.reshaped(&[1, REG_CHANNELS, geom().height, geom().width]).unwrap());
        let l = head_loss(&mut g, hv, rv, &[&t], &cfg).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn one_cell_loss_matches_formula() {
        let cfg = HeadConfig::default();
        let t = TargetMap {
            heatmap: Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            reg: Tensor::new(vec![8, 1, 1], vec![0.5, 0.5, -1.0, 1.3, 0.5, 0.4, 0.2, 0.9]).unwrap(),
            mask: vec![true],
            num_pos: 1,
        };
        let (z, r) = (0.7, [0.4, 0.6, -0.8, 1.0, 0.5, 0.1, 0.3, 0.8]);
        let mut g = Graph::new();
        let hv = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![z]).unwrap());
        let rv = g.constant(Tensor::new(vec![1, 8, 1, 1], r.to_vec()).unwrap());
        let l = head_loss(&mut g, hv, rv, &[&t], &cfg).unwrap();
        let p = 1.0 / (1.0 + (-z).exp());
        let focal = -(1.0 - p).powi(2) * p.ln();
        let l1: f64 = r.iter().zip(t.reg.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!((g.value(l).item() - (focal + l1)).abs() < 1e-10);

        let neg = TargetMap { heatmap: Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap(), mask: vec![false], num_pos: 0, ..t };
        let mut g = Graph::new();
        let hv = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![z]).unwrap());
        let rv = g.constant(Tensor::new(vec![1, 8, 1, 1], r.to_vec()).unwrap());
        let l = head_loss(&mut g, hv, rv, &[&neg], &cfg).unwrap();
        let expect = -(0.5f64).powi(4) * p.powi(2) * (1.0 - p).ln();
        assert!((g.value(l).item() - expect).abs() < 1e-10);
    }

    fn two_heads() -> (ParamStore, Vec<HeadParams>) {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let heads = (0..2).map(|i| HeadParams::new(&mut params, &format!("head{i}"), 3, 1, &mut rng)).collect();
        (params, heads)
    }

    fn features(seed: u64) -> Tensor {
        Tensor::uniform(&[1, 3, geom().height, geom().width], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn total_loss_decomposes_and_isolates_heads() {
        let cfg = HeadConfig::default();
        let (params, heads) = two_heads();
        let t0 = build_targets(&[car(2.3, -1.9, 0.4)], &geom(), &cfg);
        let t1 = build_targets(&[car(5.9, 2.1, -0.5)], &geom(), &cfg);
        let single = |head: usize, t: &TargetMap, seed: u64| {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let f = g.constant(features(seed));
            let (l, _) = total_loss(&mut g, &p, &heads, &[HeadGroup { head, features: f, targets: vec![t] }], &cfg).unwrap();
            g.backward(l).unwrap();
            let other = &heads[1 - head];
            let zero_other = g.grad(p.var(other.heat_k)).unwrap().data().iter().all(|&v| v == 0.0);
            (g.value(l).item(), zero_other)
        };
        let (a, iso_a) = single(0, &t0, 1);
        let (b, iso_b) = single(1, &t1, 2);
        assert!(iso_a && iso_b);

        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let (f0, f1) = (g.constant(features(1)), g.constant(features(2)));
        let groups = [
            HeadGroup { head: 0, features: f0, targets: vec![&t0] },
            HeadGroup { head: 1, features: f1, targets: vec![&t1] },
        ];
        let (l, terms) = total_loss(&mut g, &p, &heads, &groups, &cfg).unwrap();
        assert!((g.value(l).item() - (a + b)).abs() < 1e-12);
        assert_eq!(g.value(terms[0]).item(), a);

        let bad = [HeadGroup { head: 2, features: f0, targets: vec![&t0] }];
        assert!(matches!(total_loss(&mut g, &p, &heads, &bad, &cfg), Err(Error::Registry(_))));
    }

    #[test]
    fn head_loss_gradient() {
        let cfg = HeadConfig::default();
        let g4 = GridGeometry::for_range(&Range3D::new([0.0, 3.2], [0.0, 3.2], [-2.0, 2.0]).unwrap(), 0.8).unwrap();
        let t = build_targets(&[Box3D::new([1.5, 1.7, -0.8], [1.5, 1.0, 1.5], 0.3, 0).unwrap()], &g4, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = [
            Tensor::uniform(&[1, 1, 4, 4], -2.0, 2.0, &mut rng),
            Tensor::uniform(&[1, 8, 4, 4], -2.0, 2.0, &mut rng),
        ];
        let r = gradcheck::check(&inputs, 1e-4, None, |g, v| head_loss(g, v[0], v[1], &[&t], &cfg)).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn detection_text_round_trips() {
        let b = car(2.5, -1.25, 0.5).with_score(0.75);
        let text = format_detections("000007", "a", &[b]);
        let back = parse_detections(&text).unwrap();
        assert_eq!(back, vec![("000007".to_string(), "a".to_string(), b)]);
    }
}
