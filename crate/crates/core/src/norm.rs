//! Dataset-specific statistics normalization with a shared affine transform.
//!
//! Every registered dataset keeps its own running channel mean and variance;
//! the scale `γ` and shift `β` are ordinary parameters shared by all of them.
//! With `dataset_specific = false` a single pooled statistics slot serves
//! every dataset, which is plain batch normalization over the merged batch.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }
}

/// A contiguous run of the leading axis that belongs to one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub dataset_id: usize,
    pub start: usize,
    pub len: usize,
}

/// Batch statistics measured in train mode, waiting to enter the running
/// estimate. `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub slot: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetNormState {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dataset_specific: bool,
    pub num_datasets: usize,
    /// One slot per dataset, or a single pooled slot.
    pub stats: Vec<RunningStats>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: NormMode,
}

pub const DEFAULT_MOMENTUM: f64 = 0.01;
pub const DEFAULT_EPS: f64 = 1e-5;

impl DatasetNormState {
    /// Registers `γ = 1`, `β = 0` under `name` in `params`.
    pub fn new(params: &mut ParamStore, name: &str, channels: usize, num_datasets: usize, dataset_specific: bool) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let slots = if dataset_specific { num_datasets } else { 1 };
        Self {
            channels,
            gamma,
            beta,
            dataset_specific,
            num_datasets,
            stats: (0..slots).map(|_| RunningStats::new(channels)).collect(),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            mode: NormMode::Train,
        }
    }

    pub fn slot(&self, dataset_id: usize) -> Result<usize> {
        if dataset_id >= self.num_datasets {
            return Err(Error::Registry(format!(
                "dataset {dataset_id} is not registered ({} datasets)",
                self.num_datasets
            )));
        }
        Ok(if self.dataset_specific { dataset_id } else { 0 })
    }

    /// `μ ← (1−m)·μ + m·batch_mean`, likewise for the variance.
    pub fn update_running(&mut self, dataset_id: usize, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
        let slot = self.slot(dataset_id)?;
        self.update_slot(slot, batch_mean, batch_var)
    }

    pub fn apply(&mut self, stats: &[BatchStats]) -> Result<()> {
        stats.iter().try_for_each(|s| self.update_slot(s.slot, &s.mean, &s.var))
    }

    fn update_slot(&mut self, slot: usize, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
        if self.mode == NormMode::Eval {
            return Err(Error::State("running statistics are frozen in eval mode".into()));
        }
        if batch_mean.len() != self.channels || batch_var.len() != self.channels {
            return Err(Error::Dimension(format!(
                "running update with {} stats for {} channels",
                batch_mean.len(),
                self.channels
            )));
        }
        let m = self.momentum;
        let s = &mut self.stats[slot];
        for c in 0..self.channels {
            s.mean[c] = (1.0 - m) * s.mean[c] + m * batch_mean[c];
            s.var[c] = (1.0 - m) * s.var[c] + m * batch_var[c];
        }
        Ok(())
    }
}

/// Normalizes `x` (`[N,C]`, `[C,H,W]` or `[B,C,H,W]`) segment by segment.
///
/// Train mode uses each segment's own batch statistics (or the whole batch
/// when statistics are pooled) and returns them for the running update; eval
/// mode uses the stored running statistics. `gamma`/`beta` are the bound
/// graph handles of the state's shared parameters.
pub fn dsnorm_forward(
    g: &mut Graph,
    x: Var,
    segments: &[Segment],
    state: &DatasetNormState,
    gamma: Var,
    beta: Var,
) -> Result<(Var, Vec<BatchStats>)> {
    let lead = g.shape(x)[0];
    check_segments(segments, lead)?;
    let slots = segments
        .iter()
        .map(|s| state.slot(s.dataset_id))
        .collect::<Result<Vec<_>>>()?;
    let per_sample: usize = g.shape(x)[1..].iter().product::<usize>() / state.channels.max(1);
    let unbiased = |v: Vec<f64>, count: usize| -> Vec<f64> {
        let k = count as f64 / (count as f64 - 1.0);
        v.into_iter().map(|p| p * k).collect()
    };

    let mut measured = Vec::new();
    let normalized = match (state.mode, state.dataset_specific) {
        (NormMode::Train, false) => {
            let (y, mean, var) = g.batch_norm(x, state.eps)?;
            measured.push(BatchStats {
                slot: 0,
                mean,
                var: unbiased(var, lead * per_sample),
            });
            y
        }
        (mode, _) => {
            let mut parts = Vec::with_capacity(segments.len());
            for (seg, &slot) in segments.iter().zip(&slots) {
                let part = if segments.len() == 1 {
                    x
                } else {
                    g.slice_batch(x, seg.start, seg.len)?
                };
                let y = if mode == NormMode::Train {
                    let (y, mean, var) = g.batch_norm(part, state.eps)?;
                    measured.push(BatchStats {
                        slot,
                        mean,
                        var: unbiased(var, seg.len * per_sample),
                    });
                    y
                } else {
                    let s = &state.stats[slot];
                    g.normalize_fixed(part, &s.mean, &s.var, state.eps)?
                };
                parts.push(y);
            }
            if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_batch(&parts)?
            }
        }
    };
    let out = g.channel_affine(normalized, gamma, beta)?;
    Ok((out, measured))
}

fn check_segments(segments: &[Segment], lead: usize) -> Result<()> {
    let mut next = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.start != next || s.len == 0 {
            return Err(Error::Contract(format!("segments must tile the batch in order, got {segments:?}")));
        }
        if segments[..i].iter().any(|o| o.dataset_id == s.dataset_id) {
            return Err(Error::Contract(format!("dataset {} appears in two segments", s.dataset_id)));
        }
        next += s.len;
    }
    if next != lead {
        return Err(Error::Contract(format!("segments cover {next} of {lead} samples")));
    }
    Ok(())
}
