//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and `backward` walks it in reverse. Parameters are
//! borrowed rather than copied, which keeps full-scale weights out of the
//! tape.

use std::borrow::Cow;

use rand::Rng;

use super::conv::{ConvGeometry, ConvKind, Plan};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        plan: Plan,
        kind: ConvKind,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Softmax {
        x: Var,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// An input whose gradient is recorded by `backward`.
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A borrowed parameter; `trainable = false` treats it as a constant.
    pub fn param(&mut self, value: &'a Tensor, trainable: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        self.convolution(x, w, b, geom, ConvKind::Conv)
    }

    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        self.convolution(x, w, b, geom, ConvKind::Transposed)
    }

    /// Weight layout: `[C_out, C_in, k, k, k]` for convolutions and
    /// `[C_in, C_out, k, k, k]` for transposed convolutions.
    fn convolution(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        kind: ConvKind,
    ) -> Result<Var> {
        let (n, c_in, dims) = self.value(x).dims5()?;
        let wshape = self.value(w).shape().to_vec();
        let k = geom.kernel;
        if wshape.len() != 5 || wshape[2..] != [k, k, k] {
            return Err(Error::shape(format!(
                "weight {wshape:?} does not match kernel {k}"
            )));
        }
        let (c_out, plan) = match kind {
            ConvKind::Conv => {
                if wshape[1] != c_in {
                    return Err(Error::shape(format!(
                        "convolution expects {} input channels, got {c_in}",
                        wshape[1]
                    )));
                }
                let out = geom.conv_output(dims);
                (wshape[0], Plan::new(geom, dims, out, c_in, wshape[0])?)
            }
            ConvKind::Transposed => {
                if wshape[0] != c_in {
                    return Err(Error::shape(format!(
                        "transposed convolution expects {} input channels, got {c_in}",
                        wshape[0]
                    )));
                }
                let out = geom.transposed_output(dims);
                (wshape[1], Plan::new(geom, out, dims, wshape[1], c_in)?)
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(format!(
                    "bias {:?} does not match {c_out} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let out_dims = match kind {
            ConvKind::Conv => plan.small(),
            ConvKind::Transposed => plan.big(),
        };
        let in_len = c_in * dims.iter().product::<usize>();
        let vox: usize = out_dims.iter().product();
        let out_len = c_out * vox;
        let mut out = vec![0.0f32; n * out_len];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * in_len..(s + 1) * in_len];
                let ys = &mut out[s * out_len..(s + 1) * out_len];
                match kind {
                    ConvKind::Conv => plan.gather(xs, wv, ys),
                    ConvKind::Transposed => plan.scatter(xs, wv, ys),
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for (c, bias) in bv.iter().enumerate() {
                        let start = s * out_len + c * vox;
                        for v in &mut out[start..start + vox] {
                            *v += *bias;
                        }
                    }
                }
            }
        }
        let requires = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&[n, c_out, out_dims[0], out_dims[1], out_dims[2]], out)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::Conv {
                x,
                w,
                b,
                plan,
                kind,
            },
            requires,
        ))
    }

    /// Per-sample, per-channel normalization over the spatial axes followed
    /// by a learnable per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (n, c, dims) = self.value(x).dims5()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "instance norm affine parameters must have shape [{c}]"
            )));
        }
        let vox: usize = dims.iter().product();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; n * c];
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * vox;
                let seg = &xv[start..start + vox];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / vox as f64;
                let var = seg
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / vox as f64;
                let istd = 1.0 / (var + eps as f64).sqrt();
                inv_std[s * c + ch] = istd as f32;
                for i in 0..vox {
                    let h = ((seg[i] as f64 - mean) * istd) as f32;
                    xhat[start + i] = h;
                    out[start + i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let requires = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            requires,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let requires = self.needs(x);
        self.push(Cow::Owned(value), Op::LeakyRelu { x, slope }, requires)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Var {
        let keep = 1.0 - p;
        let src = self.value(x);
        let mask: Vec<f32> = (0..src.len())
            .map(|_| {
                if rng.gen::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let requires = self.needs(x);
        self.push(Cow::Owned(value), Op::Dropout { x, mask }, requires)
    }

    /// Channel-axis concatenation of rank-5 tensors sharing N and grid.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, dims) = self
            .value(*parts.first().ok_or_else(|| Error::shape("empty concat"))?)
            .dims5()?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, pd) = self.value(p).dims5()?;
            if pn != n || pd != dims {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with batch {n} grid {dims:?}",
                    self.value(p).shape()
                )));
            }
            channels += pc;
        }
        let vox: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n * channels * vox);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * vox;
                data.extend_from_slice(&t.data()[s * per..(s + 1) * per]);
            }
        }
        let requires = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::from_vec(&[n, channels, dims[0], dims[1], dims[2]], data)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::Concat {
                parts: parts.to_vec(),
            },
            requires,
        ))
    }

    /// Softmax over the channel axis of a rank-5 tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, dims) = self.value(x).dims5()?;
        let vox: usize = dims.iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0f32; src.len()];
        for s in 0..n {
            let base = s * c * vox;
            for v in 0..vox {
                let mut max = f32::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(src[base + ch * vox + v]);
                }
                let mut sum = 0.0f32;
                for ch in 0..c {
                    let e = (src[base + ch * vox + v] - max).exp();
                    out[base + ch * vox + v] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[base + ch * vox + v] /= sum;
                }
            }
        }
        let requires = self.needs(x);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Cow::Owned(Tensor::from_vec(&shape, out)?),
            Op::Softmax { x },
            requires,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates the given output gradients through the tape.
    ///
    /// Leaf gradients are kept for [`Graph::grad`]; intermediate gradients
    /// are released as soon as they have been propagated.
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor)>) -> Result<()> {
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::shape(format!(
                    "seed gradient {:?} does not match value {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            self.accumulate(v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, gout)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gout: Tensor) -> Result<()> {
        // Split borrows: the op is read while other nodes' grads are written.
        let node = &self.nodes[i];
        let mut pending: Vec<(Var, Tensor)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                plan,
                kind,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let n = xt.shape()[0];
                let in_len = xt.len() / n;
                let out_len = gout.len() / n;
                if self.needs(*x) {
                    let mut gx = vec![0.0f32; xt.len()];
                    let mut tmp = Vec::new();
                    for s in 0..n {
                        let gs = &gout.data()[s * out_len..(s + 1) * out_len];
                        let dst = &mut gx[s * in_len..(s + 1) * in_len];
                        match kind {
                            ConvKind::Conv => plan.scatter(gs, wt.data(), dst),
                            ConvKind::Transposed => {
                                tmp.resize(in_len, 0.0);
                                plan.gather(gs, wt.data(), &mut tmp);
                                dst.copy_from_slice(&tmp);
                            }
                        }
                    }
                    pending.push((*x, Tensor::from_vec(xt.shape(), gx)?));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0f32; wt.len()];
                    for s in 0..n {
                        let xs = &xt.data()[s * in_len..(s + 1) * in_len];
                        let gs = &gout.data()[s * out_len..(s + 1) * out_len];
                        match kind {
                            ConvKind::Conv => plan.weight_grad(xs, gs, &mut gw),
                            ConvKind::Transposed => plan.weight_grad(gs, xs, &mut gw),
                        }
                    }
                    pending.push((*w, Tensor::from_vec(wt.shape(), gw)?));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let c_out = self.value(*b).len();
                        let vox = out_len / c_out;
                        let mut gb = vec![0.0f32; c_out];
                        for s in 0..n {
                            for (c, slot) in gb.iter_mut().enumerate() {
                                let start = s * out_len + c * vox;
                                *slot += gout.data()[start..start + vox]
                                    .iter()
                                    .map(|&v| v as f64)
                                    .sum::<f64>() as f32;
                            }
                        }
                        pending.push((*b, Tensor::from_vec(&[c_out], gb)?));
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, dims) = gout.dims5()?;
                let vox: usize = dims.iter().product();
                let gv = self.value(*gamma).data();
                let dy = gout.data();
                let mut gx = vec![0.0f32; dy.len()];
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * vox;
                        let dys = &dy[start..start + vox];
                        let hs = &xhat[start..start + vox];
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_h = 0.0f64;
                        for (d, h) in dys.iter().zip(hs) {
                            sum_dy += *d as f64;
                            sum_dy_h += (*d * *h) as f64;
                        }
                        ggamma[ch] += sum_dy_h as f32;
                        gbeta[ch] += sum_dy as f32;
                        let g = gv[ch] as f64;
                        let istd = inv_std[s * c + ch] as f64;
                        let m = vox as f64;
                        for k in 0..vox {
                            let dxhat = dys[k] as f64 * g;
                            let v =
                                istd / m * (m * dxhat - g * sum_dy - hs[k] as f64 * g * sum_dy_h);
                            gx[start + k] = v as f32;
                        }
                    }
                }
                if self.needs(*x) {
                    pending.push((*x, Tensor::from_vec(gout.shape(), gx)?));
                }
                if self.needs(*gamma) {
                    pending.push((*gamma, Tensor::from_vec(&[c], ggamma)?));
                }
                if self.needs(*beta) {
                    pending.push((*beta, Tensor::from_vec(&[c], gbeta)?));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let data = gout
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { slope * g })
                    .collect();
                pending.push((*x, Tensor::from_vec(gout.shape(), data)?));
            }
            Op::Dropout { x, mask } => {
                let data = gout.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                pending.push((*x, Tensor::from_vec(gout.shape(), data)?));
            }
            Op::Concat { parts } => {
                let (n, _, dims) = gout.dims5()?;
                let vox: usize = dims.iter().product();
                let total = gout.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(n * pc * vox);
                        for s in 0..n {
                            let start = (s * total + offset) * vox;
                            data.extend_from_slice(&gout.data()[start..start + pc * vox]);
                        }
                        pending.push((p, Tensor::from_vec(self.value(p).shape(), data)?));
                    }
                    offset += pc;
                }
            }
            Op::Softmax { x } => {
                let (n, c, dims) = gout.dims5()?;
                let vox: usize = dims.iter().product();
                let y = node.value.data();
                let dy = gout.data();
                let mut gx = vec![0.0f32; dy.len()];
                for s in 0..n {
                    let base = s * c * vox;
                    for v in 0..vox {
                        let mut dot = 0.0f32;
                        for ch in 0..c {
                            let k = base + ch * vox + v;
                            dot += dy[k] * y[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * vox + v;
                            gx[k] = y[k] * (dy[k] - dot);
                        }
                    }
                }
                pending.push((*x, Tensor::from_vec(gout.shape(), gx)?));
            }
        }
        for (v, g) in pending {
            self.accumulate(v, g);
        }
        Ok(())
    }
}
