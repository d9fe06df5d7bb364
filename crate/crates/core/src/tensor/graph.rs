use super::kernels::{self, ConvDims};
use super::{bchw, channel_layout, spatial_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    SoftmaxChannel(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatBatch(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    ScaleChannels(Var, Var),
    ScaleSpatial(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    NormalizeFixed {
        x: Var,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    ScatterMax {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    /// Scalar loss whose local derivative was computed during the forward pass.
    PointwiseLoss {
        x: Var,
        dx: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddBias(a, b) => vec![*a, *b],
            ScaleChannels(a, b) | ScaleSpatial(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Sigmoid(a) | SoftmaxChannel(a) => vec![*a],
            GlobalAvgPool(a) | Sum(a) | Mean(a) | Reshape(a) => vec![*a],
            Conv2d { x, k, bias, .. } => {
                let mut v = vec![*x, *k];
                v.extend(bias);
                v
            }
            ChannelMax { x, .. }
            | SliceChannels { x, .. }
            | SliceBatch { x, .. }
            | BatchNorm { x, .. }
            | NormalizeFixed { x, .. }
            | ScatterMax { x, .. }
            | PointwiseLoss { x, .. } => vec![*x],
            ConcatChannels(v) | ConcatBatch(v) => v.clone(),
            ChannelAffine { x, gamma, beta } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of recorded operations. Nodes are appended in topological order,
/// so the reverse of insertion order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Contract(format!("{name} produced a non-finite value")));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push(value, op, name)
    }

    fn map(&mut self, a: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, "scale", |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, "add_scalar", |v| v + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "relu", |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sigmoid", kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::Dimension(format!("matmul: {sa:?} · {sb:?}")));
            }
        };
        let data = kernels::matmul(&self.value(a).data, &self.value(b).data, m, k, n);
        self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), "matmul")
    }

    /// Adds a per-channel bias `b[C]` to `[N,C]`, `[C,H,W]` or `[B,C,H,W]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (outer, c, inner) = channel_layout(self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} for {c} channels",
                self.shape(b)
            )));
        }
        let bias = &self.value(b).data;
        let mut data = self.value(x).data.clone();
        for o in 0..outer {
            for (ch, &bv) in bias.iter().enumerate() {
                let base = (o * c + ch) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::AddBias(x, b), "add_bias")
    }

    /// Same-padded 2D cross-correlation with an odd kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
        let (batch, c_in, height, width) = bchw(self.shape(x))?;
        let (c_out, kh, kw) = match *self.shape(k) {
            [co, ci, kh, kw] if ci == c_in => (co, kh, kw),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d: kernel {:?} for {c_in} input channels",
                    self.shape(k)
                )))
            }
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::Dimension(format!("conv2d: bias {:?}", self.shape(b))));
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            height,
            width,
            kh,
            kw,
        };
        let data = kernels::conv2d_forward(
            &self.value(x).data,
            &self.value(k).data,
            bias.map(|b| self.value(b).data.as_slice()),
            dims,
        );
        let shape = spatial_shape(self.shape(x), batch, c_out, height, width);
        self.push(Tensor { shape, data }, Op::Conv2d { x, k, bias, dims }, "conv2d")
    }

    /// Softmax across the channel axis at every spatial location.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = bchw(self.shape(x))?;
        let hw = h * w;
        let src = &self.value(x).data;
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for s in 0..hw {
                let idx = |ch: usize| (bi * c + ch) * hw + s;
                let m = (0..c).map(|ch| src[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[idx(ch)] - m).exp();
                    data[idx(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    data[idx(ch)] /= z;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::SoftmaxChannel(x), "softmax_channel")
    }

    /// Maximum over channels; ties resolve to the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = bchw(self.shape(x))?;
        let hw = h * w;
        let src = &self.value(x).data;
        let mut data = vec![0.0; b * hw];
        let mut argmax = vec![0usize; b * hw];
        for bi in 0..b {
            for s in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if src[(bi * c + ch) * hw + s] > src[(bi * c + best) * hw + s] {
                        best = ch;
                    }
                }
                argmax[bi * hw + s] = best;
                data[bi * hw + s] = src[(bi * c + best) * hw + s];
            }
        }
        let shape = spatial_shape(self.shape(x), b, 1, h, w);
        self.push(Tensor { shape, data }, Op::ChannelMax { x, argmax }, "channel_max")
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Dimension("concat_channels: empty input".into()))?;
        let (b, _, h, w) = bchw(self.shape(first))?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let (bx, cx, hx, wx) = bchw(self.shape(x))?;
            if (bx, hx, wx) != (b, h, w) || self.shape(x).len() != self.shape(first).len() {
                return Err(Error::Dimension(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(x)
                )));
            }
            chans.push(cx);
        }
        let hw = h * w;
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&x, &cx) in xs.iter().zip(&chans) {
                let src = &self.value(x).data;
                data.extend_from_slice(&src[bi * cx * hw..(bi + 1) * cx * hw]);
            }
        }
        let shape = spatial_shape(self.shape(first), b, total, h, w);
        self.push(Tensor { shape, data }, Op::ConcatChannels(xs.to_vec()), "concat_channels")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = bchw(self.shape(x))?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "slice_channels: [{start}, {}) of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            data.extend_from_slice(&src[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        let shape = spatial_shape(self.shape(x), b, len, h, w);
        self.push(Tensor { shape, data }, Op::SliceChannels { x, start }, "slice_channels")
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Dimension("concat_batch: empty input".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "concat_batch: {:?} vs {:?}",
                    self.shape(first),
                    s
                )));
            }
            rows += s[0];
            data.extend_from_slice(&self.value(x).data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor { shape, data }, Op::ConcatBatch(xs.to_vec()), "concat_batch")
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::Dimension(format!(
                "slice_batch: [{start}, {}) of {}",
                start + len,
                s[0]
            )));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        self.push(Tensor { shape, data }, Op::SliceBatch { x, start }, "slice_batch")
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]` (`[C,H,W] -> [1,C]`).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = bchw(self.shape(x))?;
        let hw = h * w;
        let src = &self.value(x).data;
        let data = (0..b * c)
            .map(|i| src[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor { shape: vec![b, c], data }, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Multiplies every channel plane by a per-(sample, channel) factor `s[B,C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, c, h, w) = bchw(self.shape(x))?;
        if self.value(s).numel() != b * c || self.shape(s).len() > 2 {
            return Err(Error::Dimension(format!(
                "scale_channels: factors {:?} for {b}x{c}",
                self.shape(s)
            )));
        }
        let hw = h * w;
        let f = &self.value(s).data;
        let mut data = self.value(x).data.clone();
        for (i, &fv) in f.iter().enumerate() {
            data[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v *= fv);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::ScaleChannels(x, s), "scale_channels")
    }

    /// Multiplies every channel by a single-channel spatial map `m[B,1,H,W]`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (b, c, h, w) = bchw(self.shape(x))?;
        let (bm, cm, hm, wm) = bchw(self.shape(m))?;
        if (bm, cm, hm, wm) != (b, 1, h, w) {
            return Err(Error::Dimension(format!(
                "scale_spatial: map {:?} for {:?}",
                self.shape(m),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let mv = &self.value(m).data;
        let mut data = self.value(x).data.clone();
        for bi in 0..b {
            let plane = &mv[bi * hw..(bi + 1) * hw];
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for (v, &f) in data[base..base + hw].iter_mut().zip(plane) {
                    *v *= f;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::ScaleSpatial(x, m), "scale_spatial")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Normalizes each channel with the statistics of this batch.
    ///
    /// Returns the normalized tensor together with the per-channel batch mean
    /// and population variance used for normalization.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (outer, c, inner) = channel_layout(self.shape(x))?;
        let count = outer * inner;
        if count < 2 {
            return Err(Error::Contract(format!(
                "batch statistics need at least 2 samples per channel, got {count}"
            )));
        }
        let src = &self.value(x).data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                s += src[base..base + inner].iter().sum::<f64>();
            }
            let mu = s / count as f64;
            let mut q = 0.0;
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                q += src[base..base + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = q / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = normalize(src, outer, c, inner, &mean, &inv_std);
        let shape = self.shape(x).to_vec();
        let out = self.push(Tensor { shape, data }, Op::BatchNorm { x, inv_std }, "batch_norm")?;
        Ok((out, mean, var))
    }

    /// Normalizes each channel with fixed (non-differentiable) statistics.
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (outer, c, inner) = channel_layout(self.shape(x))?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Dimension(format!(
                "normalize_fixed: {} statistics for {c} channels",
                mean.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = normalize(&self.value(x).data, outer, c, inner, mean, &inv_std);
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::NormalizeFixed { x, inv_std }, "normalize_fixed")
    }

    /// `y = gamma[c] * x + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (outer, c, inner) = channel_layout(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "channel_affine: gamma {:?}, beta {:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut data = self.value(x).data.clone();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                data[base..base + inner]
                    .iter_mut()
                    .for_each(|v| *v = g[ch] * *v + bt[ch]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::ChannelAffine { x, gamma, beta }, "channel_affine")
    }

    /// Max-pools rows of `x[P,C]` into grid cells.
    ///
    /// `cells[p]` is the flat `(b, h, w)` cell of row `p` or `None` for rows
    /// that do not contribute. The output is `[B,C,H,W]`; empty cells are zero
    /// and ties go to the earliest row.
    pub fn scatter_max(&mut self, x: Var, cells: &[Option<usize>], grid: (usize, usize, usize)) -> Result<Var> {
        let (p, c) = match *self.shape(x) {
            [p, c] => (p, c),
            _ => return Err(Error::Dimension(format!("scatter_max: {:?}", self.shape(x)))),
        };
        let (b, h, w) = grid;
        let hw = h * w;
        if cells.len() != p {
            return Err(Error::Dimension(format!(
                "scatter_max: {} cell indices for {p} rows",
                cells.len()
            )));
        }
        let src = &self.value(x).data;
        let mut data = vec![0.0; b * c * hw];
        let mut argmax: Vec<Option<usize>> = vec![None; b * c * hw];
        for (row, cell) in cells.iter().enumerate() {
            let Some(cell) = *cell else { continue };
            if cell >= b * hw {
                return Err(Error::Dimension(format!("scatter_max: cell {cell} out of grid")));
            }
            let (bi, s) = (cell / hw, cell % hw);
            for ch in 0..c {
                let o = (bi * c + ch) * hw + s;
                let v = src[row * c + ch];
                if argmax[o].is_none() || v > data[o] {
                    argmax[o] = Some(row);
                    data[o] = v;
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![b, c, h, w],
                data,
            },
            Op::ScatterMax { x, argmax },
            "scatter_max",
        )
    }

    /// Penalty-reduced focal loss on logits, summed over all elements.
    ///
    /// Elements whose target equals 1 are positives; every other element is a
    /// negative down-weighted by `(1 - target)^beta`.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::Dimension(format!(
                "focal_loss: logits {:?} vs target {:?}",
                self.shape(logits),
                target.shape()
            )));
        }
        let x = &self.value(logits).data;
        let mut total = 0.0;
        let mut dx = vec![0.0; x.len()];
        for (i, (&z, &t)) in x.iter().zip(&target.data).enumerate() {
            let p = kernels::sigmoid(z);
            let log_p = -kernels::softplus(-z);
            let log_1mp = -kernels::softplus(z);
            if t == 1.0 {
                let q = 1.0 - p;
                total += -q.powf(alpha) * log_p;
                // d/dz of -(1-p)^a log p
                dx[i] = alpha * p * q.powf(alpha) * log_p - q.powf(alpha + 1.0);
            } else {
                let wgt = (1.0 - t).powf(beta);
                total += -wgt * p.powf(alpha) * log_1mp;
                // d/dz of -w p^a log(1-p)
                dx[i] = -wgt * (alpha * p.powf(alpha) * (1.0 - p) * log_1mp - p.powf(alpha + 1.0));
            }
        }
        self.push(Tensor::scalar(total), Op::PointwiseLoss { x: logits, dx }, "focal_loss")
    }

    /// Sum of `|pred - target|` over all channels of the masked cells.
    ///
    /// `pred` is `[B,R,H,W]` (or `[R,H,W]`); `mask` has one flag per `(b,h,w)`.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let (b, r, h, w) = bchw(self.shape(pred))?;
        if self.shape(pred) != target.shape() || mask.len() != b * h * w {
            return Err(Error::Dimension(format!(
                "masked_l1: pred {:?}, target {:?}, mask {}",
                self.shape(pred),
                target.shape(),
                mask.len()
            )));
        }
        let hw = h * w;
        let x = &self.value(pred).data;
        let mut total = 0.0;
        let mut dx = vec![0.0; x.len()];
        for bi in 0..b {
            for s in (0..hw).filter(|&s| mask[bi * hw + s]) {
                for ch in 0..r {
                    let i = (bi * r + ch) * hw + s;
                    let d = x[i] - target.data[i];
                    total += d.abs();
                    dx[i] = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
        }
        self.push(Tensor::scalar(total), Op::PointwiseLoss { x: pred, dx }, "masked_l1")
    }

    /// Accumulates `d loss / d v` into every node that requires a gradient.
    ///
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }
}

fn normalize(src: &[f64], outer: usize, c: usize, inner: usize, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let mut out = src.to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            out[base..base + inner]
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
    }
    out
}

/// Adds a contribution into the gradient buffer of `v` if it needs one.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(buf);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = &node.value.data;
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x -= gv));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            accumulate(nodes, grads, *a, |d| {
                for ((x, &gv), &y) in d.iter_mut().zip(g).zip(bv) {
                    *x += gv * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((x, &gv), &y) in d.iter_mut().zip(g).zip(av) {
                    *x += gv * y;
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x += s * gv));
        }
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |d| add_into(d, g)),
        Op::Relu(a) => accumulate(nodes, grads, *a, |d| {
            for ((x, &gv), &y) in d.iter_mut().zip(g).zip(out) {
                if y > 0.0 {
                    *x += gv;
                }
            }
        }),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, |d| {
            for ((x, &gv), &y) in d.iter_mut().zip(g).zip(out) {
                *x += gv * y * (1.0 - y);
            }
        }),
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            accumulate(nodes, grads, *a, |d| {
                add_into(d, &kernels::matmul_nt(g, &val(*b).data, m, n, k));
            });
            accumulate(nodes, grads, *b, |d| {
                add_into(d, &kernels::matmul_tn(&val(*a).data, g, m, k, n));
            });
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, |d| add_into(d, g));
            let (outer, c, inner) = channel_layout(node.value.shape()).expect("validated");
            accumulate(nodes, grads, *b, |d| {
                for o in 0..outer {
                    for (ch, dv) in d.iter_mut().enumerate().take(c) {
                        let base = (o * c + ch) * inner;
                        *dv += g[base..base + inner].iter().sum::<f64>();
                    }
                }
            });
        }
        Op::Conv2d { x, k, bias, dims } => {
            let need_dx = nodes[x.0].requires_grad;
            let need_dk = nodes[k.0].requires_grad;
            let (dx, dk, db) =
                kernels::conv2d_backward(&val(*x).data, &val(*k).data, g, *dims, need_dx, need_dk);
            accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            accumulate(nodes, grads, *k, |d| add_into(d, &dk));
            if let Some(b) = bias {
                accumulate(nodes, grads, *b, |d| add_into(d, &db));
            }
        }
        Op::SoftmaxChannel(x) => {
            let (b, c, h, w) = bchw(node.value.shape()).expect("validated");
            let hw = h * w;
            accumulate(nodes, grads, *x, |d| {
                for bi in 0..b {
                    for s in 0..hw {
                        let idx = |ch: usize| (bi * c + ch) * hw + s;
                        let dot: f64 = (0..c).map(|ch| g[idx(ch)] * out[idx(ch)]).sum();
                        for ch in 0..c {
                            d[idx(ch)] += out[idx(ch)] * (g[idx(ch)] - dot);
                        }
                    }
                }
            });
        }
        Op::ChannelMax { x, argmax } => {
            let (b, c, h, w) = bchw(val(*x).shape()).expect("validated");
            let hw = h * w;
            accumulate(nodes, grads, *x, |d| {
                for bi in 0..b {
                    for s in 0..hw {
                        d[(bi * c + argmax[bi * hw + s]) * hw + s] += g[bi * hw + s];
                    }
                }
            });
        }
        Op::ConcatChannels(xs) => {
            let (b, total, h, w) = bchw(node.value.shape()).expect("validated");
            let hw = h * w;
            let mut offset = 0;
            for x in xs {
                let (_, cx, _, _) = bchw(val(*x).shape()).expect("validated");
                accumulate(nodes, grads, *x, |d| {
                    for bi in 0..b {
                        let src = &g[(bi * total + offset) * hw..(bi * total + offset + cx) * hw];
                        add_into(&mut d[bi * cx * hw..(bi + 1) * cx * hw], src);
                    }
                });
                offset += cx;
            }
        }
        Op::SliceChannels { x, start } => {
            let (b, c, h, w) = bchw(val(*x).shape()).expect("validated");
            let (_, len, _, _) = bchw(node.value.shape()).expect("validated");
            let hw = h * w;
            accumulate(nodes, grads, *x, |d| {
                for bi in 0..b {
                    let dst = &mut d[(bi * c + start) * hw..(bi * c + start + len) * hw];
                    add_into(dst, &g[bi * len * hw..(bi + 1) * len * hw]);
                }
            });
        }
        Op::ConcatBatch(xs) => {
            let mut offset = 0;
            for x in xs {
                let n = val(*x).numel();
                accumulate(nodes, grads, *x, |d| add_into(d, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::SliceBatch { x, start } => {
            let row: usize = node.value.shape()[1..].iter().product();
            accumulate(nodes, grads, *x, |d| {
                add_into(&mut d[start * row..start * row + g.len()], g);
            });
        }
        Op::GlobalAvgPool(x) => {
            let (_, _, h, w) = bchw(val(*x).shape()).expect("validated");
            let hw = h * w;
            accumulate(nodes, grads, *x, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v += gv / hw as f64);
                }
            });
        }
        Op::ScaleChannels(x, s) => {
            let (_, _, h, w) = bchw(val(*x).shape()).expect("validated");
            let hw = h * w;
            let (xv, sv) = (&val(*x).data, &val(*s).data);
            accumulate(nodes, grads, *x, |d| {
                for (i, &f) in sv.iter().enumerate() {
                    for j in i * hw..(i + 1) * hw {
                        d[j] += g[j] * f;
                    }
                }
            });
            accumulate(nodes, grads, *s, |d| {
                for (i, dv) in d.iter_mut().enumerate() {
                    *dv += (i * hw..(i + 1) * hw).map(|j| g[j] * xv[j]).sum::<f64>();
                }
            });
        }
        Op::ScaleSpatial(x, m) => {
            let (b, c, h, w) = bchw(val(*x).shape()).expect("validated");
            let hw = h * w;
            let (xv, mv) = (&val(*x).data, &val(*m).data);
            accumulate(nodes, grads, *x, |d| {
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for s in 0..hw {
                            d[base + s] += g[base + s] * mv[bi * hw + s];
                        }
                    }
                }
            });
            accumulate(nodes, grads, *m, |d| {
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for s in 0..hw {
                            d[bi * hw + s] += g[base + s] * xv[base + s];
                        }
                    }
                }
            });
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
        }
        Op::BatchNorm { x, inv_std } => {
            let (outer, c, inner) = channel_layout(node.value.shape()).expect("validated");
            let count = (outer * inner) as f64;
            accumulate(nodes, grads, *x, |d| {
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            sg += g[j];
                            sgx += g[j] * out[j];
                        }
                    }
                    let (mg, mgx) = (sg / count, sgx / count);
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            d[j] += inv_std[ch] * (g[j] - mg - out[j] * mgx);
                        }
                    }
                }
            });
        }
        Op::NormalizeFixed { x, inv_std } => {
            let (outer, c, inner) = channel_layout(node.value.shape()).expect("validated");
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            d[j] += g[j] * inv_std[ch];
                        }
                    }
                }
            });
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let (outer, c, inner) = channel_layout(node.value.shape()).expect("validated");
            let (xv, gm) = (&val(*x).data, &val(*gamma).data);
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            d[j] += g[j] * gm[ch];
                        }
                    }
                }
            });
            accumulate(nodes, grads, *gamma, |d| {
                for o in 0..outer {
                    for (ch, dv) in d.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *dv += (base..base + inner).map(|j| g[j] * xv[j]).sum::<f64>();
                    }
                }
            });
            accumulate(nodes, grads, *beta, |d| {
                for o in 0..outer {
                    for (ch, dv) in d.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *dv += g[base..base + inner].iter().sum::<f64>();
                    }
                }
            });
        }
        Op::ScatterMax { x, argmax } => {
            let c = val(*x).shape()[1];
            let (_, _, h, w) = bchw(node.value.shape()).expect("validated");
            let hw = h * w;
            accumulate(nodes, grads, *x, |d| {
                for (o, row) in argmax.iter().enumerate() {
                    if let Some(row) = row {
                        let ch = (o / hw) % c;
                        d[row * c + ch] += g[o];
                    }
                }
            });
        }
        Op::PointwiseLoss { x, dx } => {
            accumulate(nodes, grads, *x, |d| {
                for (v, &l) in d.iter_mut().zip(dx) {
                    *v += g[0] * l;
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
