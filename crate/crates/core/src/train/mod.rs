//! Training loop, learning-rate schedule, optimizer, evaluation, checkpoints
//! and the ablation harness.

pub mod checkpoint;
pub mod eval;
pub mod experiment;
pub mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use eval::{evaluate_ap, ApMetric, ApResult, EvalReport};
pub use model::{InferMode, Model, ModelConfig, Sample, Toggles};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// How the datasets of an experiment are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// One model trained from scratch on all datasets at once.
    Scratch,
    /// One model per dataset, each trained only on its own data.
    Separate,
    /// Per target dataset: pretrain on the others, then fine-tune on it.
    PretrainFinetune,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Self::Scratch),
            "separate" => Ok(Self::Separate),
            "pretrain_then_finetune" => Ok(Self::PretrainFinetune),
            _ => Err(Error::Config(format!(
                "train mode `{s}` (expected scratch, separate or pretrain_then_finetune)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Scratch => "scratch",
            Self::Separate => "separate",
            Self::PretrainFinetune => "pretrain_then_finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frames per step, split evenly across the datasets.
    pub batch_size: usize,
    pub lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Share of `steps` spent pretraining in [`TrainMode::PretrainFinetune`].
    pub pretrain_fraction: f64,
    /// Fraction of training frames kept, by dataset name; absent means 1.
    pub subsample: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 0.003,
            pct_start: 0.4,
            div_factor: 10.0,
            final_div: 1e4,
            weight_decay: 0.01,
            seed: 0,
            mode: TrainMode::Scratch,
            pretrain_fraction: 0.5,
            subsample: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    /// Learning rate 0.01 with 32 frames per step.
    pub fn large() -> Self {
        Self {
            lr: 0.01,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.div_factor >= 1.0 && self.final_div >= 1.0) {
            return Err(Error::Config("lr must be positive, div factors at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pct_start) || !(0.0..1.0).contains(&self.pretrain_fraction) {
            return Err(Error::Config("pct_start in [0,1], pretrain_fraction in [0,1)".into()));
        }
        if let Some((name, f)) = self.subsample.iter().find(|(_, &f)| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config(format!("subsample fraction {f} for `{name}` not in (0,1]")));
        }
        Ok(())
    }

    /// Keys under `train.`; `profile = large` switches the defaults.
    pub fn from_config(c: &Config) -> Result<Self> {
        let base = match c.get("profile").unwrap_or("desk") {
            "desk" => Self::default(),
            "large" => Self::large(),
            other => return Err(Error::Config(format!("unknown train profile `{other}`"))),
        };
        let mut subsample = BTreeMap::new();
        for (name, v) in c.section("subsample").iter() {
            let f: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("subsample.{name}: `{v}` is not a number")))?;
            subsample.insert(name.to_string(), f);
        }
        let cfg = Self {
            steps: c.parse_or("steps", base.steps)?,
            batch_size: c.parse_or("batch_size", base.batch_size)?,
            lr: c.parse_or("lr", base.lr)?,
            pct_start: c.parse_or("pct_start", base.pct_start)?,
            div_factor: c.parse_or("div_factor", base.div_factor)?,
            final_div: c.parse_or("final_div", base.final_div)?,
            weight_decay: c.parse_or("weight_decay", base.weight_decay)?,
            seed: c.parse_or("seed", base.seed)?,
            mode: c.get("mode").map(TrainMode::parse).transpose()?.unwrap_or(base.mode),
            pretrain_fraction: c.parse_or("pretrain_fraction", base.pretrain_fraction)?,
            subsample,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_text(&self) -> String {
        let mut s = format!(
            "steps = {}\nbatch_size = {}\nlr = {}\npct_start = {}\ndiv_factor = {}\nfinal_div = {}\n\
             weight_decay = {}\nseed = {}\nmode = {}\npretrain_fraction = {}\n",
            self.steps,
            self.batch_size,
            self.lr,
            self.pct_start,
            self.div_factor,
            self.final_div,
            self.weight_decay,
            self.seed,
            self.mode.as_str(),
            self.pretrain_fraction
        );
        for (name, f) in &self.subsample {
            s += &format!("subsample.{name} = {f}\n");
        }
        s
    }

    pub fn fraction_for(&self, dataset: &str) -> f64 {
        self.subsample.get(dataset).copied().unwrap_or(1.0)
    }
}

/// OneCycle learning rate at `step ∈ [0, cfg.steps]`: linear warm-up from
/// `lr/div_factor` to `lr` over `pct_start·steps`, then cosine decay to
/// `lr/(div_factor·final_div)`.
pub fn onecycle_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::Contract(format!("step {step} beyond {} scheduled steps", cfg.steps)));
    }
    let base = cfg.lr;
    let start = base / cfg.div_factor;
    let end = start / cfg.final_div;
    let warm = cfg.pct_start * cfg.steps as f64;
    let s = step as f64;
    if s == warm {
        return Ok(base);
    }
    if s < warm {
        return Ok(start + (base - start) * s / warm);
    }
    let t = (s - warm) / (cfg.steps as f64 - warm);
    Ok(end + (base - end) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// Adam with decoupled weight decay on weights of rank ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads` is indexed like `params`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let decay = if params.get(id).shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            let w = params.get_mut(id).data_mut();
            if g.len() != w.len() {
                return Err(Error::Dimension(format!("gradient {i} has {} of {} values", g.len(), w.len())));
            }
            for k in 0..w.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= lr * (mh / (vh.sqrt() + self.eps) + decay * w[k]);
            }
        }
        Ok(())
    }
}

/// Endless round-robin batches: each draw takes the same number of frames
/// from every dataset, walking a seeded shuffle that is redrawn per epoch.
#[derive(Debug, Clone)]
pub struct RoundRobin {
    per_dataset: usize,
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl RoundRobin {
    /// `pools[d]` holds the sample indices of dataset `d`.
    pub fn new(pools: Vec<Vec<usize>>, batch_size: usize, seed: u64) -> Result<Self> {
        if pools.is_empty() || pools.iter().any(Vec::is_empty) {
            return Err(Error::Config("every dataset needs at least one training frame".into()));
        }
        if !batch_size.is_multiple_of(pools.len()) {
            return Err(Error::Config(format!(
                "batch size {batch_size} does not split evenly over {} datasets",
                pools.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pools = pools;
        for p in &mut pools {
            p.shuffle(&mut rng);
        }
        Ok(Self {
            per_dataset: batch_size / pools.len(),
            cursors: vec![0; pools.len()],
            pools,
            rng,
        })
    }

    /// Sample indices of the next batch, grouped by dataset in order.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.per_dataset * self.pools.len());
        for d in 0..self.pools.len() {
            for _ in 0..self.per_dataset {
                if self.cursors[d] == self.pools[d].len() {
                    self.pools[d].shuffle(&mut self.rng);
                    self.cursors[d] = 0;
                }
                out.push(self.pools[d][self.cursors[d]]);
                self.cursors[d] += 1;
            }
        }
        out
    }
}
