//! Coupling and recoupling of per-dataset BEV features.
//!
//! `couple` fuses the N per-dataset maps into one dataset-agnostic map:
//!
//! ```text
//! f_cat  = concat(f_1, …, f_N)                 (N·C channels)
//! M      = channel_max(f_cat)                  (1 channel)
//! A      = softmax_N(conv1x1(f_cat))           (N channels)
//! shared = Σ_i (A_i ⊙ M) · f_i                 (C channels)
//! ```
//!
//! `recouple` restores branch i with a squeeze-and-excitation gate and a
//! residual: `f̂_i = sigmoid(W2·relu(W1·gap(shared)+b1)+b2) ⊙ shared + f_i`.

use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

pub const DEFAULT_SE_REDUCTION: usize = 4;

/// Initial excitation bias. The gate starts near sigmoid(-2) ≈ 0.12, so early
/// training leans on the residual branch while the shared map is still noise.
pub const SE_GATE_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CRParams {
    pub num_datasets: usize,
    pub channels: usize,
    pub reduction: usize,
    pub attention_enabled: bool,
    pub se_enabled: bool,
    /// `[N, N·C, 1, 1]` and `[N]`; absent when attention is disabled.
    pub mask_conv: Option<(ParamId, ParamId)>,
    /// One block per dataset; empty when SE is disabled.
    pub se_blocks: Vec<SeBlock>,
}

impl CRParams {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        num_datasets: usize,
        channels: usize,
        reduction: usize,
        attention_enabled: bool,
        se_enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_datasets == 0 || channels == 0 {
            return Err(Error::Config("coupling needs at least one dataset and channel".into()));
        }
        if se_enabled && (reduction == 0 || !channels.is_multiple_of(reduction)) {
            return Err(Error::Config(format!(
                "SE reduction {reduction} must divide {channels} channels"
            )));
        }
        let (n, c) = (num_datasets, channels);
        let mask_conv = attention_enabled.then(|| {
            (
                params.add_he("cr.mask.k", &[n, n * c, 1, 1], n * c, rng),
                params.add("cr.mask.b", Tensor::zeros(&[n])),
            )
        });
        let se_blocks = if se_enabled {
            let r = c / reduction;
            (0..n)
                .map(|i| SeBlock {
                    w1: params.add_he(&format!("cr.se{i}.w1"), &[c, r], c, rng),
                    b1: params.add(format!("cr.se{i}.b1"), Tensor::zeros(&[r])),
                    w2: params.add_he(&format!("cr.se{i}.w2"), &[r, c], r, rng),
                    b2: params.add(format!("cr.se{i}.b2"), Tensor::full(&[c], SE_GATE_BIAS_INIT)),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            num_datasets,
            channels,
            reduction,
            attention_enabled,
            se_enabled,
            mask_conv,
            se_blocks,
        })
    }

    /// Number of scalar parameters the module adds.
    pub fn expected_param_count(num_datasets: usize, channels: usize, reduction: usize, attention: bool, se: bool) -> usize {
        let (n, c) = (num_datasets, channels);
        let att = if attention { n * n * c + n } else { 0 };
        let r = if se { c / reduction } else { 0 };
        let se = if se { n * (c * r + r + r * c + c) } else { 0 };
        att + se
    }
}

/// Attention map `A` (`[B, N, H, W]`) and the channel max `M` (`[B, 1, H, W]`)
/// for the given branch maps.
pub fn attention(g: &mut Graph, p: &Bound, f: &[Var], cr: &CRParams) -> Result<(Var, Var)> {
    let (k, b) = cr
        .mask_conv
        .ok_or_else(|| Error::State("attention is disabled".into()))?;
    let cat = g.concat_channels(f)?;
    let logits = g.conv2d(cat, p.var(k), Some(p.var(b)))?;
    let a = g.softmax_channel(logits)?;
    let m = g.channel_max(cat)?;
    Ok((a, m))
}

/// Fuses one map per registered dataset into the shared map.
pub fn couple(g: &mut Graph, p: &Bound, f: &[Var], cr: &CRParams) -> Result<Var> {
    if f.len() != cr.num_datasets {
        return Err(Error::Registry(format!(
            "couple expects {} branch maps, got {}",
            cr.num_datasets,
            f.len()
        )));
    }
    let shape = g.shape(f[0]).to_vec();
    if let Some(bad) = f.iter().find(|&&v| g.shape(v) != shape.as_slice()) {
        return Err(Error::Dimension(format!("couple: {:?} vs {:?}", g.shape(*bad), shape)));
    }
    if shape.len() < 3 || shape[shape.len() - 3] != cr.channels {
        return Err(Error::Dimension(format!("couple: {shape:?} for {} channels", cr.channels)));
    }
    let n = f.len();
    if !cr.attention_enabled {
        let mut acc = g.scale(f[0], 1.0 / n as f64)?;
        for &fi in &f[1..] {
            let t = g.scale(fi, 1.0 / n as f64)?;
            acc = g.add(acc, t)?;
        }
        return Ok(acc);
    }
    let (a, m) = attention(g, p, f, cr)?;
    let mut acc: Option<Var> = None;
    for (i, &fi) in f.iter().enumerate() {
        let ai = g.slice_channels(a, i, 1)?;
        let wi = g.mul(ai, m)?;
        let term = g.scale_spatial(fi, wi)?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Restores the dataset-specific map of branch `i`.
pub fn recouple(g: &mut Graph, p: &Bound, shared: Var, f_i: Var, i: usize, cr: &CRParams) -> Result<Var> {
    if i >= cr.num_datasets {
        return Err(Error::Registry(format!(
            "branch {i} out of range for {} datasets",
            cr.num_datasets
        )));
    }
    if !cr.se_enabled {
        return g.add(shared, f_i);
    }
    let se = &cr.se_blocks[i];
    let pooled = g.global_avg_pool(shared)?;
    let h = g.matmul(pooled, p.var(se.w1))?;
    let h = g.add_bias(h, p.var(se.b1))?;
    let h = g.relu(h)?;
    let s = g.matmul(h, p.var(se.w2))?;
    let s = g.add_bias(s, p.var(se.b2))?;
    let gate = g.sigmoid(s)?;
    let scaled = g.scale_channels(shared, gate)?;
    g.add(scaled, f_i)
}

/// Training path: couple all branches, then recouple every one of them.
pub fn couple_recouple(g: &mut Graph, p: &Bound, f: &[Var], cr: &CRParams) -> Result<Vec<Var>> {
    let shared = couple(g, p, f, cr)?;
    f.iter()
        .enumerate()
        .map(|(i, &fi)| recouple(g, p, shared, fi, i, cr))
        .collect()
}

/// Single-dataset inference by copying `f` into every branch.
pub fn infer_copy(g: &mut Graph, p: &Bound, f: Var, i: usize, cr: &CRParams) -> Result<Var> {
    let copies = vec![f; cr.num_datasets];
    let shared = couple(g, p, &copies, cr)?;
    recouple(g, p, shared, f, i, cr)
}

/// Single-dataset inference with every other branch set to zero.
pub fn infer_mask(g: &mut Graph, p: &Bound, f: Var, i: usize, cr: &CRParams) -> Result<Var> {
    if i >= cr.num_datasets {
        return Err(Error::Registry(format!("branch {i} out of range")));
    }
    let zero = g.constant(Tensor::zeros(g.shape(f)));
    let branches: Vec<Var> = (0..cr.num_datasets).map(|j| if j == i { f } else { zero }).collect();
    let shared = couple(g, p, &branches, cr)?;
    recouple(g, p, shared, f, i, cr)
}
