use super::kernels::{self, ConvGeom, PoolGeom, PoolKind};
use super::{Conv2dConfig, DType, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    BiasAdd {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Scale(Var, f64),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Upsample {
        x: Var,
        shape: [usize; 4],
        factor: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanTokens(Var),
    SwapLast2(Var),
    Reshape(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Append-only computation graph. Node order is a topological order, so
/// backward is a single reverse sweep.
///
/// A graph belongs to one thread; build a fresh one per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_dtype(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(Error::Dtype {
            expected: a.dtype().to_string(),
            found: format!("{} (second operand of {op})", b.dtype()),
        });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        same_dtype("matmul", av, wv)?;
        let out = kernels::matmul(av, wv)?;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(out, Op::MatMul(a, w), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_dtype("add", av, bv)?;
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add needs equal shapes, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data, av.dtype());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a per-feature bias. The feature axis is 1 for rank-4 (channel)
    /// inputs and the last axis otherwise.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        same_dtype("bias_add", xv, bv)?;
        let axis = if xv.rank() == 4 { 1 } else { xv.rank() - 1 };
        if xv.rank() < 2 || bv.rank() != 1 || bv.len() != xv.shape()[axis] {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match feature axis of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let n = bv.len();
        let b = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % n])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data, xv.dtype());
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::BiasAdd { x, bias, axis }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, cfg: Conv2dConfig) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        same_dtype("conv2d", xv, kv)?;
        let geom = kernels::conv_geom(xv, kv, cfg)?;
        let data = kernels::conv2d_raw(xv.data(), kv.data(), &geom);
        let out = Tensor::from_parts(vec![geom.b, geom.oc, geom.oh, geom.ow], data, xv.dtype());
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(out, Op::Conv2d { x, k, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let geom = kernels::pool_geom(xv, kernel, stride)?;
        let (data, argmax) = kernels::pool2d_raw(xv.data(), &geom, PoolKind::Max);
        let out = Tensor::from_parts(vec![geom.b, geom.c, geom.oh, geom.ow], data, xv.dtype());
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let geom = kernels::pool_geom(xv, kernel, stride)?;
        let (data, _) = kernels::pool2d_raw(xv.data(), &geom, PoolKind::Avg);
        let out = Tensor::from_parts(vec![geom.b, geom.c, geom.oh, geom.ow], data, xv.dtype());
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool { x, geom }, rg))
    }

    /// Nearest-neighbour upsampling by an integer factor on both spatial axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let data = kernels::upsample_nearest_raw(xv.data(), shape, factor);
        let [b, c, h, w] = shape;
        let out = Tensor::from_parts(vec![b, c, h * factor, w * factor], data, xv.dtype());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample { x, shape, factor }, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        same_dtype("layer_norm", xv, gv)?;
        same_dtype("layer_norm", xv, bv)?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm affine params {:?}/{:?} do not match feature width {d}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out, xv.dtype());
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batch normalization with frozen running statistics over axis 1 of a
    /// rank-4 input.
    pub fn batch_norm_inference(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4("batch_norm")?;
        for (name, t) in [
            ("gamma", self.value(gamma)),
            ("beta", self.value(beta)),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::Dimension(format!(
                    "batch_norm {name} has shape {:?}, expected [{c}]",
                    t.shape()
                )));
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let plane = h * w;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                for p in 0..plane {
                    let hat = (xv.data()[base + p] - running_mean.data()[ch]) * inv_std[ch];
                    xhat[base + p] = hat;
                    out[base + p] = hat * gv[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out, xv.dtype());
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `[b, t, d] -> [b, d]` mean over the token axis.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, t, d] = match xv.shape()[..] {
            [b, t, d] => [b, t, d],
            _ => {
                return Err(Error::Dimension(format!(
                    "mean_tokens expects [b, t, d], got {:?}",
                    xv.shape()
                )))
            }
        };
        let mut out = vec![0.0; b * d];
        for n in 0..b {
            for k in 0..t {
                let row = &xv.data()[(n * t + k) * d..(n * t + k + 1) * d];
                for (o, v) in out[n * d..(n + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= t as f64;
        }
        let out = Tensor::from_parts(vec![b, d], out, xv.dtype());
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanTokens(x), rg))
    }

    /// `[b, m, n] -> [b, n, m]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, m, n] = match xv.shape()[..] {
            [b, m, n] => [b, m, n],
            _ => {
                return Err(Error::Dimension(format!(
                    "swap_last2 expects a rank-3 tensor, got {:?}",
                    xv.shape()
                )))
            }
        };
        let out = Tensor::from_parts(vec![b, n, m], swap_raw(xv.data(), b, m, n), xv.dtype());
        let rg = self.rg(x);
        Ok(self.push(out, Op::SwapLast2(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Flattens every axis after the sample axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let out = super::flatten_features(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[b, t, d] · [d, e] -> [b, t, e]`, the same weight applied to every token.
    pub fn token_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [b, t, d] = match shape[..] {
            [b, t, d] => [b, t, d],
            _ => {
                return Err(Error::Dimension(format!(
                    "token_linear expects [b, t, d], got {shape:?}"
                )))
            }
        };
        let flat = self.reshape(x, &[b * t, d])?;
        let y = self.matmul(flat, w)?;
        let e = self.value(y).shape()[1];
        self.reshape(y, &[b, t, e])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(vec![1], vec![xv.sum()], xv.dtype());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, n] = lv.dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::Data(format!("label {bad} outside [0, {n})")));
        }
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &lv.data()[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for c in 0..n {
                probs[r * n + c] = (row[c] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        loss /= b as f64;
        let out = Tensor::from_parts(vec![1], vec![loss], lv.dtype());
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every node that lies on a path from
    /// a trainable leaf to `loss` receives a gradient; other grads are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            node.grad = Some(Tensor::from_parts(
                node.value.shape().to_vec(),
                g,
                node.value.dtype(),
            ));
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, w) => {
                let (av, wv) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
                let (b, m, n) = (av.shape()[0], av.shape()[1], wv.shape()[1]);
                if self.rg(*a) {
                    acc(*a, kernels::matmul_grad_input(g, wv.data(), b, m, n));
                }
                if self.rg(*w) {
                    acc(*w, kernels::matmul_grad_weight(av.data(), g, b, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::BiasAdd { x, bias, axis } => {
                acc(*x, g.to_vec());
                if self.rg(*bias) {
                    let shape = node.value.shape();
                    let n = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut gb = vec![0.0; n];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[(i / inner) % n] += gv;
                    }
                    acc(*bias, gb);
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Conv2d { x, k, geom } => {
                if self.rg(*x) {
                    let kv = &self.nodes[k.0].value;
                    acc(*x, kernels::conv2d_grad_input(g, kv.data(), geom));
                }
                if self.rg(*k) {
                    let xv = &self.nodes[x.0].value;
                    acc(*k, kernels::conv2d_grad_kernel(g, xv.data(), geom));
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                acc(*x, gx);
            }
            Op::AvgPool { x, geom } => acc(*x, kernels::avg_pool_grad(g, geom)),
            Op::Upsample { x, shape, factor } => {
                acc(*x, kernels::upsample_nearest_grad(g, *shape, *factor))
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let gam = self.nodes[gamma.0].value.data();
                let rows = g.len() / d;
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let s = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> =
                            g[s.clone()].iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 =
                            dxhat.iter().zip(&xhat[s.clone()]).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            gx[r * d + c] = inv_std[r] / d as f64
                                * (d as f64 * dxhat[c] - sum_d - xhat[r * d + c] * sum_dx);
                        }
                    }
                    acc(*x, gx);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (i, &gv) in g.iter().enumerate() {
                        gg[i % d] += gv * xhat[i];
                        gb[i % d] += gv;
                    }
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let gam = self.nodes[gamma.0].value.data();
                let ch = |i: usize| (i / plane) % c;
                if self.rg(*x) {
                    acc(
                        *x,
                        g.iter()
                            .enumerate()
                            .map(|(i, gv)| gv * gam[ch(i)] * inv_std[ch(i)])
                            .collect(),
                    );
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for (i, &gv) in g.iter().enumerate() {
                        gg[ch(i)] += gv * xhat[i];
                        gb[ch(i)] += gv;
                    }
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
            }
            Op::MeanTokens(x) => {
                let s = self.nodes[x.0].value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut gx = vec![0.0; b * t * d];
                for n in 0..b {
                    for k in 0..t {
                        for c in 0..d {
                            gx[(n * t + k) * d + c] = g[n * d + c] / t as f64;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SwapLast2(x) => {
                let s = node.value.shape();
                acc(*x, swap_raw(g, s[0], s[1], s[2]));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let b = labels.len();
                let n = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * n + y] -= scale;
                }
                acc(*logits, gl);
            }
        }
    }
}

fn swap_raw(x: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..b {
        for r in 0..m {
            for c in 0..n {
                out[(i * n + c) * m + r] = x[(i * m + r) * n + c];
            }
        }
    }
    out
}

impl Graph {
    /// Convenience for tests and tools: dtype of a node.
    pub fn dtype(&self, v: Var) -> DType {
        self.value(v).dtype()
    }
}
