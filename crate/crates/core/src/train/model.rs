//! The full detector: encoder, dataset-aware normalization, coupling and
//! heads, plus the per-frame preprocessing that feeds it.

use super::{onecycle_lr, Adam, TrainConfig};
use crate::config::Config;
use crate::coupling::{self, CRParams, DEFAULT_SE_REDUCTION};
use crate::datasets::{class_id, harmonize_frame, DatasetSpec, Frame, COMMON_CLASSES};
use crate::encoder::{pillarize_on, Encoder, EncoderConfig, GridGeometry, PillarBatch, PillarGrid};
use crate::error::{Error, Result};
use crate::geometry::{crop_to_range, Box3D, Range3D};
use crate::head::{build_targets, decode, total_loss, HeadConfig, HeadGroup, HeadParams, TargetMap};
use crate::norm::{BatchStats, NormMode};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Module switches of one experiment configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    /// Shift every dataset's origin to the ground plane.
    pub coord_align: bool,
    /// Dataset-specific normalization statistics.
    pub stat_align: bool,
    /// Coupling/recoupling of the per-dataset BEV maps.
    pub coupling: bool,
    pub attention: bool,
    pub se: bool,
    /// One head per dataset; otherwise a single shared head.
    pub dataset_heads: bool,
    /// Crop every dataset to the model range; otherwise each dataset's own
    /// range is stretched onto the model grid.
    pub range_aligned: bool,
}

impl Toggles {
    /// Everything on.
    pub fn full() -> Self {
        Self {
            coord_align: true,
            stat_align: true,
            coupling: true,
            attention: true,
            se: true,
            dataset_heads: true,
            range_aligned: true,
        }
    }

    /// Direct merging: shared everything, no alignment beyond the range.
    pub fn direct_merge() -> Self {
        Self {
            coord_align: false,
            stat_align: false,
            coupling: false,
            attention: false,
            se: false,
            dataset_heads: false,
            range_aligned: true,
        }
    }

    /// Named rows of the ablation matrix: `dm`, `ca`, `ca_sa`, `ca_cr`,
    /// `full`, `full_no_att`, `full_no_se`.
    pub fn preset(name: &str) -> Result<Self> {
        let dm = Self::direct_merge();
        let ca = Self {
            coord_align: true,
            dataset_heads: true,
            ..dm
        };
        Ok(match name {
            "dm" => dm,
            "ca" => ca,
            "ca_sa" => Self { stat_align: true, ..ca },
            "ca_cr" => Self {
                coupling: true,
                attention: true,
                se: true,
                ..ca
            },
            "full" => Self::full(),
            "full_no_att" => Self {
                attention: false,
                ..Self::full()
            },
            "full_no_se" => Self {
                se: false,
                ..Self::full()
            },
            _ => return Err(Error::Config(format!("unknown toggle preset `{name}`"))),
        })
    }
}

/// Single-dataset inference route through the coupling module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Feed the frame's map into every branch.
    Copy,
    /// Feed zeros into every other branch.
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Registered datasets; a frame's `dataset_id` indexes this list.
    pub datasets: Vec<DatasetSpec>,
    /// Model grid range (BEV extent and z window).
    pub range: Range3D,
    pub cell: f64,
    pub max_points: usize,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub toggles: Toggles,
    pub se_reduction: usize,
    pub norm_momentum: f64,
    pub infer: InferMode,
    /// BEV region scored at evaluation; defaults to `range`.
    pub eval_range: Option<Range3D>,
}

impl ModelConfig {
    pub fn new(datasets: Vec<DatasetSpec>, range: Range3D, cell: f64) -> Self {
        Self {
            datasets,
            range,
            cell,
            max_points: 8,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            toggles: Toggles::full(),
            se_reduction: DEFAULT_SE_REDUCTION,
            norm_momentum: crate::norm::DEFAULT_MOMENTUM,
            infer: InferMode::Copy,
            eval_range: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets registered".into()));
        }
        for (i, d) in self.datasets.iter().enumerate() {
            d.validate()?;
            if self.datasets[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("dataset `{}` registered twice", d.name)));
            }
        }
        if self.head.classes.is_empty() {
            return Err(Error::Config("head needs at least one class".into()));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config(format!("norm momentum {} not in [0,1]", self.norm_momentum)));
        }
        GridGeometry::for_range(&self.range, self.cell)?;
        Ok(())
    }

    /// Flat keys: `datasets`, `dataset.<name>.*`, `model.*` and `head.*`.
    pub fn from_config(c: &Config) -> Result<Self> {
        let names: Vec<String> = c
            .list("datasets")?
            .ok_or_else(|| Error::Config("missing key `datasets`".into()))?;
        let datasets = names
            .iter()
            .map(|n| {
                let spec = DatasetSpec::from_config(&c.section(&format!("dataset.{n}")))?;
                if &spec.name != n {
                    return Err(Error::Config(format!("dataset.{n}.name is `{}`", spec.name)));
                }
                Ok(spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = c.section("model");
        let mut cfg = Self::new(datasets, Range3D::parse(m.require("range")?)?, m.parse_req("cell")?);
        cfg.max_points = m.parse_or("max_points", cfg.max_points)?;
        cfg.encoder.pillar_channels = m.parse_or("pillar_channels", cfg.encoder.pillar_channels)?;
        cfg.encoder.channels = m.parse_or("channels", cfg.encoder.channels)?;
        cfg.se_reduction = m.parse_or("se_reduction", cfg.se_reduction)?;
        cfg.norm_momentum = m.parse_or("norm_momentum", cfg.norm_momentum)?;
        cfg.infer = match m.get("infer").unwrap_or("copy") {
            "copy" => InferMode::Copy,
            "mask" => InferMode::Mask,
            other => return Err(Error::Config(format!("model.infer `{other}` (copy or mask)"))),
        };
        cfg.eval_range = m.get("eval_range").map(Range3D::parse).transpose()?;
        let t = match m.get("preset") {
            Some(p) => Toggles::preset(p)?,
            None => Toggles::full(),
        };
        cfg.toggles = Toggles {
            coord_align: m.bool_or("coord_align", t.coord_align)?,
            stat_align: m.bool_or("stat_align", t.stat_align)?,
            coupling: m.bool_or("coupling", t.coupling)?,
            attention: m.bool_or("attention", t.attention)?,
            se: m.bool_or("se", t.se)?,
            dataset_heads: m.bool_or("dataset_heads", t.dataset_heads)?,
            range_aligned: m.bool_or("range_aligned", t.range_aligned)?,
        };
        let h = c.section("head");
        let d = HeadConfig::default();
        let classes = match h.list::<String>("classes")? {
            Some(names) => names
                .iter()
                .map(|n| class_id(n).ok_or_else(|| Error::Config(format!("head class `{n}`"))))
                .collect::<Result<Vec<_>>>()?,
            None => d.classes.clone(),
        };
        cfg.head = HeadConfig {
            classes,
            min_overlap: h.parse_or("min_overlap", d.min_overlap)?,
            min_radius: h.parse_or("min_radius", d.min_radius)?,
            focal_alpha: h.parse_or("focal_alpha", d.focal_alpha)?,
            focal_beta: h.parse_or("focal_beta", d.focal_beta)?,
            reg_weight: h.parse_or("reg_weight", d.reg_weight)?,
            score_thresh: h.parse_or("score_thresh", d.score_thresh)?,
            nms_iou: h.parse_or("nms_iou", d.nms_iou)?,
            max_detections: h.parse_or("max_detections", d.max_detections)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_text(&self) -> String {
        let names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        let mut s = format!("datasets = {}\n", names.join(","));
        for d in &self.datasets {
            for line in d.to_config_text().lines() {
                s += &format!("dataset.{}.{line}\n", d.name);
            }
        }
        let t = &self.toggles;
        s += &format!(
            "model.range = {}\nmodel.cell = {}\nmodel.max_points = {}\nmodel.pillar_channels = {}\n\
             model.channels = {}\nmodel.se_reduction = {}\nmodel.norm_momentum = {}\nmodel.infer = {}\n\
             model.coord_align = {}\nmodel.stat_align = {}\nmodel.coupling = {}\nmodel.attention = {}\n\
             model.se = {}\nmodel.dataset_heads = {}\nmodel.range_aligned = {}\n",
            self.range.to_config_string(),
            self.cell,
            self.max_points,
            self.encoder.pillar_channels,
            self.encoder.channels,
            self.se_reduction,
            self.norm_momentum,
            match self.infer {
                InferMode::Copy => "copy",
                InferMode::Mask => "mask",
            },
            t.coord_align,
            t.stat_align,
            t.coupling,
            t.attention,
            t.se,
            t.dataset_heads,
            t.range_aligned
        );
        if let Some(r) = &self.eval_range {
            s += &format!("model.eval_range = {}\n", r.to_config_string());
        }
        let h = &self.head;
        let classes: Vec<&str> = h.classes.iter().map(|&c| COMMON_CLASSES[c]).collect();
        s += &format!(
            "head.classes = {}\nhead.min_overlap = {}\nhead.min_radius = {}\nhead.focal_alpha = {}\n\
             head.focal_beta = {}\nhead.reg_weight = {}\nhead.score_thresh = {}\nhead.nms_iou = {}\n\
             head.max_detections = {}\n",
            classes.join(","),
            h.min_overlap,
            h.min_radius,
            h.focal_alpha,
            h.focal_beta,
            h.reg_weight,
            h.score_thresh,
            h.nms_iou,
            h.max_detections
        );
        s
    }

    pub fn dataset_index(&self, name: &str) -> Result<usize> {
        self.datasets
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Registry(format!("dataset `{name}` is not registered")))
    }

    /// BEV region used for scoring.
    pub fn scored_range(&self) -> Range3D {
        self.eval_range.unwrap_or(self.range)
    }
}

/// One preprocessed frame: pillars, training targets and evaluation boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub dataset_id: usize,
    pub frame_id: String,
    pub grid: PillarGrid,
    pub targets: TargetMap,
    /// Harmonized boxes whose centers fall inside the scored region.
    pub gt: Vec<Box3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub cr: Option<CRParams>,
    pub heads: Vec<HeadParams>,
}

/// Step output, parameter gradients and per-dataset batch statistics.
type Backward = (StepOutput, Vec<Tensor>, Vec<(usize, BatchStats)>);

/// Loss of one training step and the per-dataset terms it sums.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub terms: Vec<(usize, f64)>,
    pub lr: f64,
}

struct Forward {
    total: Var,
    terms: Vec<(usize, Var)>,
    stats: Vec<(usize, BatchStats)>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let n = cfg.datasets.len();
        let t = cfg.toggles;
        let mut encoder = Encoder::new(&mut params, cfg.encoder, n, t.stat_align, &mut rng);
        for norm in &mut encoder.norms {
            norm.momentum = cfg.norm_momentum;
        }
        let c = cfg.encoder.channels;
        let cr = if t.coupling {
            Some(CRParams::new(&mut params, n, c, cfg.se_reduction, t.attention, t.se, &mut rng)?)
        } else {
            None
        };
        let k = cfg.head.num_classes();
        let heads = if t.dataset_heads {
            cfg.datasets
                .iter()
                .map(|d| HeadParams::new(&mut params, &format!("head.{}", d.name), c, k, &mut rng))
                .collect()
        } else {
            vec![HeadParams::new(&mut params, "head.shared", c, k, &mut rng)]
        };
        Ok(Self {
            cfg,
            params,
            encoder,
            cr,
            heads,
        })
    }

    pub fn num_datasets(&self) -> usize {
        self.cfg.datasets.len()
    }

    pub fn head_index(&self, dataset_id: usize) -> Result<usize> {
        if dataset_id >= self.num_datasets() {
            return Err(Error::Registry(format!(
                "dataset {dataset_id} has no head ({} datasets)",
                self.num_datasets()
            )));
        }
        Ok(if self.cfg.toggles.dataset_heads { dataset_id } else { 0 })
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        for n in &mut self.encoder.norms {
            n.mode = mode;
        }
    }

    /// Point window fed to the grid for frames of `spec`.
    pub fn input_range(&self, spec: &DatasetSpec) -> Range3D {
        if self.cfg.toggles.range_aligned {
            self.cfg.range
        } else {
            Range3D {
                z_min: self.cfg.range.z_min,
                z_max: self.cfg.range.z_max,
                ..spec.range
            }
        }
    }

    /// Grid for frames of `spec`. Without range alignment the dataset's own
    /// BEV extent is stretched onto the model's `H × W` cells.
    pub fn geometry_for(&self, spec: &DatasetSpec) -> Result<GridGeometry> {
        let model = GridGeometry::for_range(&self.cfg.range, self.cfg.cell)?;
        if self.cfg.toggles.range_aligned {
            return Ok(model);
        }
        let [ex, ey, _] = spec.range.extent();
        Ok(GridGeometry {
            x_min: spec.range.x_min,
            y_min: spec.range.y_min,
            cell: (ex / model.width as f64).max(ey / model.height as f64),
            ..model
        })
    }

    /// Harmonize, crop to the input window, pillarize and build targets.
    pub fn prepare(&self, frame: &Frame) -> Result<Sample> {
        let spec = self.cfg.datasets.get(frame.dataset_id).ok_or_else(|| {
            Error::Registry(format!("frame {} names unregistered dataset {}", frame.frame_id, frame.dataset_id))
        })?;
        self.prepare_with(frame, spec)
    }

    /// [`Model::prepare`] under an explicit dataset spec, for frames of
    /// datasets the model was not trained on.
    pub fn prepare_with(&self, frame: &Frame, spec: &DatasetSpec) -> Result<Sample> {
        let (h, _) = harmonize_frame(frame, spec, self.cfg.toggles.coord_align);
        let (pc, boxes) = crop_to_range(&h.pc, &h.gt_boxes, &self.input_range(spec));
        let geometry = self.geometry_for(spec)?;
        let grid = pillarize_on(&pc, &geometry, self.cfg.max_points)?;
        let targets = build_targets(&boxes, &geometry, &self.cfg.head);
        let scored = self.cfg.scored_range();
        let gt = boxes.into_iter().filter(|b| scored.contains_bev(b.cx, b.cy)).collect();
        Ok(Sample {
            dataset_id: frame.dataset_id,
            frame_id: frame.frame_id.clone(),
            grid,
            targets,
            gt,
        })
    }

    /// Contiguous `(dataset, start, len)` groups of a batch.
    fn groups(batch: &[&Sample]) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            match out.last_mut() {
                Some(last) if last.0 == s.dataset_id => last.2 += 1,
                _ => out.push((s.dataset_id, i, 1)),
            }
        }
        out
    }

    fn forward_train(&self, g: &mut Graph, p: &Bound, batch: &[&Sample]) -> Result<Forward> {
        let grids: Vec<&PillarGrid> = batch.iter().map(|s| &s.grid).collect();
        let pillars = PillarBatch::assemble(&grids)?;
        let frame_datasets: Vec<usize> = batch.iter().map(|s| s.dataset_id).collect();
        for &d in &frame_datasets {
            self.head_index(d)?;
        }
        let (x, stats) = self.encoder.forward(g, p, &pillars, &frame_datasets)?;
        let groups = Self::groups(batch);
        let mut maps = Vec::with_capacity(groups.len());
        for &(_, start, len) in &groups {
            maps.push(if groups.len() == 1 { x } else { g.slice_batch(x, start, len)? });
        }
        if let Some(cr) = &self.cr {
            let n = self.num_datasets();
            let ordered = groups.len() == n && groups.iter().enumerate().all(|(i, gr)| gr.0 == i);
            if !ordered || groups.iter().any(|gr| gr.2 != groups[0].2) {
                return Err(Error::Contract(format!(
                    "coupled training needs equal frame counts from all {n} datasets in registry order"
                )));
            }
            maps = coupling::couple_recouple(g, p, &maps, cr)?;
        }
        let head_groups = groups
            .iter()
            .zip(&maps)
            .map(|(&(d, start, len), &features)| {
                Ok(HeadGroup {
                    head: self.head_index(d)?,
                    features,
                    targets: batch[start..start + len].iter().map(|s| &s.targets).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (total, terms) = total_loss(g, p, &self.heads, &head_groups, &self.cfg.head)?;
        Ok(Forward {
            total,
            terms: groups.iter().map(|gr| gr.0).zip(terms).collect(),
            stats,
        })
    }

    /// Training-mode loss without any update: `(total, per-dataset terms)`.
    pub fn loss(&self, batch: &[&Sample]) -> Result<(f64, Vec<(usize, f64)>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let f = self.forward_train(&mut g, &p, batch)?;
        let terms = f.terms.iter().map(|&(d, v)| (d, g.value(v).item())).collect();
        Ok((g.value(f.total).item(), terms))
    }

    fn backward(&self, batch: &[&Sample]) -> Result<Backward> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let f = self.forward_train(&mut g, &p, batch)?;
        g.backward(f.total)?;
        let grads: Vec<Tensor> = p
            .vars()
            .iter()
            .zip(self.params.iter())
            .map(|(&v, (_, t))| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let out = StepOutput {
            loss: g.value(f.total).item(),
            terms: f.terms.iter().map(|&(d, v)| (d, g.value(v).item())).collect(),
            lr: 0.0,
        };
        Ok((out, grads, f.stats))
    }

    /// Training-mode loss and its gradient for every parameter, in
    /// [`ParamStore`] order. Nothing is updated.
    pub fn gradients(&self, batch: &[&Sample]) -> Result<(f64, Vec<Tensor>)> {
        let (out, grads, _) = self.backward(batch)?;
        Ok((out.loss, grads))
    }

    /// Forward, backward, optimizer update and running-statistics update.
    pub fn train_step(&mut self, opt: &mut Adam, batch: &[&Sample], lr: f64) -> Result<StepOutput> {
        let (out, grads, stats) = self.backward(batch)?;
        opt.update(&mut self.params, &grads, lr)?;
        self.encoder.apply_stats(&stats)?;
        Ok(StepOutput { lr, ..out })
    }

    /// Eval-mode boxes for each sample, all routed as dataset `route`
    /// (its statistics, coupling branch and head).
    pub fn predict(&self, samples: &[&Sample], route: usize) -> Result<Vec<Vec<Box3D>>> {
        let head = &self.heads[self.head_index(route)?];
        let mut encoder = self.encoder.clone();
        for n in &mut encoder.norms {
            n.mode = NormMode::Eval;
        }
        let scored = self.cfg.scored_range();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(8) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let grids: Vec<&PillarGrid> = chunk.iter().map(|s| &s.grid).collect();
            let pillars = PillarBatch::assemble(&grids)?;
            let (mut x, _) = encoder.forward(&mut g, &p, &pillars, &vec![route; chunk.len()])?;
            if let Some(cr) = &self.cr {
                x = match self.cfg.infer {
                    InferMode::Copy => coupling::infer_copy(&mut g, &p, x, route, cr)?,
                    InferMode::Mask => coupling::infer_mask(&mut g, &p, x, route, cr)?,
                };
            }
            let (heat, reg) = head.forward(&mut g, &p, x)?;
            let (heat, reg) = (g.value(heat).data(), g.value(reg).data());
            let (hs, rs) = (heat.len() / chunk.len(), reg.len() / chunk.len());
            for (b, s) in chunk.iter().enumerate() {
                let boxes = decode(&heat[b * hs..(b + 1) * hs], &reg[b * rs..(b + 1) * rs], &s.grid.geometry, &self.cfg.head);
                out.push(boxes.into_iter().filter(|d| scored.contains_bev(d.cx, d.cy)).collect());
            }
        }
        Ok(out)
    }

    /// Runs `cfg.steps` round-robin steps over `samples`, reporting each
    /// step to `log`.
    pub fn fit(
        &mut self,
        opt: &mut Adam,
        samples: &[Sample],
        cfg: &TrainConfig,
        mut log: impl FnMut(usize, &StepOutput),
    ) -> Result<()> {
        cfg.validate()?;
        let mut pools = vec![Vec::new(); self.num_datasets()];
        for (i, s) in samples.iter().enumerate() {
            pools
                .get_mut(s.dataset_id)
                .ok_or_else(|| Error::Registry(format!("sample of unregistered dataset {}", s.dataset_id)))?
                .push(i);
        }
        let mut sampler = super::RoundRobin::new(pools, cfg.batch_size, cfg.seed ^ 0x5A17)?;
        self.set_mode(NormMode::Train);
        for step in 0..cfg.steps {
            let lr = onecycle_lr(step, cfg)?;
            let batch: Vec<&Sample> = sampler.next_batch().into_iter().map(|i| &samples[i]).collect();
            let out = self.train_step(opt, &batch, lr)?;
            log(step, &out);
        }
        Ok(())
    }
}
