//! Raw slice kernels behind the graph ops. Every accumulation runs in a fixed
//! row-major order so results are bitwise reproducible.

/// `c[m,n] = a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `c[m,k] = g[m,n] · b[k,n]ᵀ`.
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    c
}

/// `c[k,n] = a[m,k]ᵀ · g[m,n]`.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
    c
}

/// Geometry of a same-padded 2D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    /// Rows/columns of the output for which input offset `d` stays in bounds.
    fn valid(len: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d).clamp(0, len as isize) as usize;
        (lo, hi.max(lo))
    }
}
/// Dot product with four independent accumulators (vectorizes).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unfolds one `[C_in, H, W]` image into `[C_in·kh·kw, H·W]` patch rows
/// (zero padding).
fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let (hw, ph, pw) = (d.height * d.width, d.kh / 2, d.kw / 2);
    let mut cols = vec![0.0; d.c_in * d.kh * d.kw * hw];
    for ci in 0..d.c_in {
        let xs = &x[ci * hw..(ci + 1) * hw];
        for i in 0..d.kh {
            let di = i as isize - ph as isize;
            let (h0, h1) = ConvDims::valid(d.height, di);
            for j in 0..d.kw {
                let dj = j as isize - pw as isize;
                let (w0, w1) = ConvDims::valid(d.width, dj);
                let row = &mut cols[((ci * d.kh + i) * d.kw + j) * hw..][..hw];
                for h in h0..h1 {
                    let src = (h as isize + di) as usize * d.width;
                    let lo = (src as isize + w0 as isize + dj) as usize;
                    row[h * d.width + w0..h * d.width + w1].copy_from_slice(&xs[lo..lo + (w1 - w0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch rows back into the image.
fn col2im(cols: &[f64], dx: &mut [f64], d: &ConvDims) {
    let (hw, ph, pw) = (d.height * d.width, d.kh / 2, d.kw / 2);
    for ci in 0..d.c_in {
        let xs = &mut dx[ci * hw..(ci + 1) * hw];
        for i in 0..d.kh {
            let di = i as isize - ph as isize;
            let (h0, h1) = ConvDims::valid(d.height, di);
            for j in 0..d.kw {
                let dj = j as isize - pw as isize;
                let (w0, w1) = ConvDims::valid(d.width, dj);
                let row = &cols[((ci * d.kh + i) * d.kw + j) * hw..][..hw];
                for h in h0..h1 {
                    let src = (h as isize + di) as usize * d.width;
                    let lo = (src as isize + w0 as isize + dj) as usize;
                    for (dv, &cv) in xs[lo..lo + (w1 - w0)].iter_mut().zip(&row[h * d.width + w0..h * d.width + w1]) {
                        *dv += cv;
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 convolution: `x [B, C_in, H, W]`,
/// `k [C_out, C_in, kh, kw]` (odd kernel sizes).
pub fn conv2d_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, d: ConvDims) -> Vec<f64> {
    let hw = d.height * d.width;
    let patch = d.c_in * d.kh * d.kw;
    let mut out = Vec::with_capacity(d.batch * d.c_out * hw);
    for b in 0..d.batch {
        let cols = im2col(&x[b * d.c_in * hw..(b + 1) * d.c_in * hw], &d);
        let mut o = matmul(k, &cols, d.c_out, patch, hw);
        if let Some(bias) = bias {
            for (co, row) in o.chunks_exact_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        out.extend(o);
    }
    out
}

/// Gradients `(dx, dk, dbias)` of [`conv2d_forward`] for upstream `g`.
pub fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    d: ConvDims,
    need_dx: bool,
    need_dk: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = d.height * d.width;
    let patch = d.c_in * d.kh * d.kw;
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dk = if need_dk { vec![0.0; k.len()] } else { Vec::new() };
    let mut db = vec![0.0; d.c_out];
    for b in 0..d.batch {
        let gb = &g[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        for (co, row) in gb.chunks_exact(hw).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        if need_dk {
            let cols = im2col(&x[b * d.c_in * hw..(b + 1) * d.c_in * hw], &d);
            for co in 0..d.c_out {
                let grow = &gb[co * hw..(co + 1) * hw];
                for (r, crow) in cols.chunks_exact(hw).enumerate() {
                    dk[co * patch + r] += dot(grow, crow);
                }
            }
        }
        if need_dx {
            let dcols = matmul_tn(k, gb, d.c_out, patch, hw);
            col2im(&dcols, &mut dx[b * d.c_in * hw..(b + 1) * d.c_in * hw], &d);
        }
    }
    (dx, dk, db)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
