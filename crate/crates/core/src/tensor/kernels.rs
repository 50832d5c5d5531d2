//! Raw forward/backward kernels shared by the eager API and the graph.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
        }
    }
}

/// Output extent of a sliding window, rejecting windows that do not tile
/// the padded input exactly.
pub fn window_extent(
    op: &str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config(format!(
            "{op}: kernel and stride must be >= 1"
        )));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::Config(format!(
            "{op}: kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "{op}: (extent {input} + 2*{padding} - kernel {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn matmul_raw(a: &[f64], w: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * n];
    for r in 0..b {
        let row = &a[r * m..(r + 1) * m];
        let orow = &mut out[r * n..(r + 1) * n];
        for (k, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let wrow = &w[k * n..(k + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += av * wv;
            }
        }
    }
    out
}

/// `g · wᵀ` for a `[b, n]` upstream gradient and `[m, n]` weight.
pub(crate) fn matmul_grad_input(g: &[f64], w: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * m];
    for r in 0..b {
        let grow = &g[r * n..(r + 1) * n];
        for k in 0..m {
            let wrow = &w[k * n..(k + 1) * n];
            out[r * m + k] = grow.iter().zip(wrow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` for a `[b, m]` input and `[b, n]` upstream gradient.
pub(crate) fn matmul_grad_weight(a: &[f64], g: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..b {
        let arow = &a[r * m..(r + 1) * m];
        let grow = &g[r * n..(r + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[k * n..(k + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn matmul(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [b, m] = a.dims2("matmul")?;
    let [m2, n] = w.dims2("matmul")?;
    if m != m2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            w.shape()
        )));
    }
    Ok(Tensor::from_parts(
        vec![b, n],
        matmul_raw(a.data(), w.data(), b, m, n),
        a.dtype(),
    ))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_geom(x: &Tensor, k: &Tensor, cfg: Conv2dConfig) -> Result<ConvGeom> {
    let [b, c, h, w] = x.dims4("conv2d input")?;
    let [oc, kc, kh, kw] = k.dims4("conv2d kernel")?;
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input {:?}, kernel {:?}",
            x.shape(),
            k.shape()
        )));
    }
    let oh = window_extent("conv2d", h, kh, cfg.stride, cfg.padding)?;
    let ow = window_extent("conv2d", w, kw, cfg.stride, cfg.padding)?;
    Ok(ConvGeom {
        b,
        c,
        h,
        w,
        oc,
        kh,
        kw,
        oh,
        ow,
        stride: cfg.stride,
        pad: cfg.padding,
    })
}

impl ConvGeom {
    /// Input coordinate hit by output coordinate `o` and tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = o * self.stride + k;
        if p < self.pad || p - self.pad >= extent {
            None
        } else {
            Some(p - self.pad)
        }
    }

    /// Range of output coordinates for which tap `k` lands inside the input.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < out && self.src(lo, k, extent).is_none() {
            lo += 1;
        }
        let mut hi = out;
        while hi > lo && self.src(hi - 1, k, extent).is_none() {
            hi -= 1;
        }
        (lo, hi)
    }
}

pub(crate) fn conv2d_raw(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.b * g.oc * g.oh * g.ow];
    let plane = g.oh * g.ow;
    for n in 0..g.b {
        for o in 0..g.oc {
            let obase = (n * g.oc + o) * plane;
            for ci in 0..g.c {
                let xbase = (n * g.c + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = k[((o * g.c + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = obase + oy * g.ow;
                            let xrow = xbase + iy * g.w;
                            for ox in xlo..xhi {
                                let ix = ox * g.stride + kx - g.pad;
                                out[orow + ox] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input(gout: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0; g.b * g.c * g.h * g.w];
    let plane = g.oh * g.ow;
    for n in 0..g.b {
        for o in 0..g.oc {
            let obase = (n * g.oc + o) * plane;
            for ci in 0..g.c {
                let xbase = (n * g.c + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = k[((o * g.c + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = obase + oy * g.ow;
                            let xrow = xbase + iy * g.w;
                            for ox in xlo..xhi {
                                let ix = ox * g.stride + kx - g.pad;
                                gx[xrow + ix] += wv * gout[orow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn conv2d_grad_kernel(gout: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gk = vec![0.0; g.oc * g.c * g.kh * g.kw];
    let plane = g.oh * g.ow;
    for n in 0..g.b {
        for o in 0..g.oc {
            let obase = (n * g.oc + o) * plane;
            for ci in 0..g.c {
                let xbase = (n * g.c + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = obase + oy * g.ow;
                            let xrow = xbase + iy * g.w;
                            for ox in xlo..xhi {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += gout[orow + ox] * x[xrow + ix];
                            }
                        }
                        gk[((o * g.c + ci) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    gk
}

pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, cfg: Conv2dConfig) -> Result<Tensor> {
    let g = conv_geom(x, k, cfg)?;
    Ok(Tensor::from_parts(
        vec![g.b, g.oc, g.oh, g.ow],
        conv2d_raw(x.data(), k.data(), &g),
        x.dtype(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn pool_geom(x: &Tensor, k: usize, stride: usize) -> Result<PoolGeom> {
    let [b, c, h, w] = x.dims4("pool2d")?;
    let oh = window_extent("pool2d", h, k, stride, 0)?;
    let ow = window_extent("pool2d", w, k, stride, 0)?;
    Ok(PoolGeom {
        b,
        c,
        h,
        w,
        k,
        stride,
        oh,
        ow,
    })
}

/// Returns pooled values and, for max pooling, the flat source index of each
/// output element.
pub(crate) fn pool2d_raw(x: &[f64], g: &PoolGeom, kind: PoolKind) -> (Vec<f64>, Vec<usize>) {
    let n_out = g.b * g.c * g.oh * g.ow;
    let mut out = vec![0.0; n_out];
    let mut idx = if kind == PoolKind::Max {
        vec![0; n_out]
    } else {
        Vec::new()
    };
    let inv = 1.0 / (g.k * g.k) as f64;
    for bc in 0..g.b * g.c {
        let xbase = bc * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = (bc * g.oh + oy) * g.ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let s = xbase + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                                if x[s] > best {
                                    best = x[s];
                                    at = s;
                                }
                            }
                        }
                        out[o] = best;
                        idx[o] = at;
                    }
                    PoolKind::Avg => {
                        let mut acc = 0.0;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                acc += x[xbase + (oy * g.stride + ky) * g.w + ox * g.stride + kx];
                            }
                        }
                        out[o] = acc * inv;
                    }
                }
            }
        }
    }
    (out, idx)
}

pub(crate) fn avg_pool_grad(gout: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut gx = vec![0.0; g.b * g.c * g.h * g.w];
    let inv = 1.0 / (g.k * g.k) as f64;
    for bc in 0..g.b * g.c {
        let xbase = bc * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = gout[(bc * g.oh + oy) * g.ow + ox] * inv;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        gx[xbase + (oy * g.stride + ky) * g.w + ox * g.stride + kx] += gv;
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn upsample_nearest_raw(x: &[f64], shape: [usize; 4], f: usize) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(bc * oh + oy) * ow + ox] = x[(bc * h + oy / f) * w + ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_grad(gout: &[f64], shape: [usize; 4], f: usize) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let (oh, ow) = (h * f, w * f);
    let mut gx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                gx[(bc * h + oy / f) * w + ox / f] += gout[(bc * oh + oy) * ow + ox];
            }
        }
    }
    gx
}
