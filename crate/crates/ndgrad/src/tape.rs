//! Reverse-mode tape over [`Tensor`] values.
//!
//! Ops are recorded in execution order; [`Tape::backward`] walks the
//! record in reverse, freeing each node's value once its gradient has
//! been propagated.

use std::collections::HashMap;

use crate::error::{shape_err, NdError, Result};
use crate::kernels::{col2im_add, conv_direct, conv_direct_dw, conv_direct_dx, gemm, im2col, ConvGeom};
use crate::loss;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Batchnorm variance floor.
pub const BN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl PoolGeom {
    pub fn new(k: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            k_h: k.0,
            k_w: k.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h + 2 * self.pad_h < self.k_h || w + 2 * self.pad_w < self.k_w {
            return None;
        }
        Some((
            (h + 2 * self.pad_h - self.k_h) / self.stride_h + 1,
            (w + 2 * self.pad_w - self.k_w) / self.stride_w + 1,
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed by a training-mode batchnorm.
/// `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Input,
    /// A leaf that never receives a gradient.
    Const,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Add {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Loss {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: HashMap<Var, Tensor>,
    params: Vec<(String, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to an [`Tape::input`] leaf, if it was reached.
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds the parameter gradients into the accumulators of `set`.
    pub fn accumulate_into(&self, set: &mut ParamSet) -> Result<()> {
        for (name, g) in &self.params {
            set.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => shape_err(op, format!("expected [N, C, H, W], got {:?}", t.shape())),
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("tape value read after backward")
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        #[cfg(debug_assertions)]
        self.check_finite(&value, &op);
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    #[cfg(debug_assertions)]
    fn check_finite(&self, value: &Tensor, op: &Op) {
        if value.is_finite() {
            return;
        }
        let inputs_finite = Self::op_inputs(op)
            .iter()
            .all(|v| self.value(*v).is_finite());
        assert!(!inputs_finite, "non-finite output from finite inputs");
    }

    fn op_inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Const | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x }
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Reshape { x }
            | Op::L2Normalize { x, .. }
            | Op::Loss { x, .. } => vec![*x],
            Op::Add { a, b } => vec![*a, *b],
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Like [`Tape::input`], but no gradient is propagated into it, which
    /// lets the first convolution skip its input gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, set: &ParamSet, name: &str) -> Result<Var> {
        let value = set.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    /// 2-D cross-correlation of `[N, Ci, H, W]` with `[Co, Ci, kh, kw]` kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let [n, ci, h, wd] = dims4(self.value(x), "conv2d")?;
        let [co, wci, kh, kw] = dims4(self.value(w), "conv2d")?;
        if wci != ci {
            return shape_err("conv2d", format!("input has {ci} channels, kernel expects {wci}"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return shape_err("conv2d", format!("bias shape {:?}", self.value(b).shape()));
            }
        }
        let geom = ConvGeom {
            in_ch: ci,
            in_h: h,
            in_w: wd,
            k_h: kh,
            k_w: kw,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
        };
        if !geom.fits() {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{wd} with padding {pad:?}"),
            );
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * co * p];
        let direct = geom.prefers_direct(co);
        let mut cols = if geom.is_pointwise() || direct {
            Vec::new()
        } else {
            vec![0.0; k * p]
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let img = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
            let dst = &mut out[s * co * p..(s + 1) * co * p];
            if direct {
                conv_direct(&geom, co, wv, img, dst);
            } else if geom.is_pointwise() {
                gemm(co, k, p, wv, false, img, false, dst, 0.0);
            } else {
                im2col(&geom, img, &mut cols);
                gemm(co, k, p, wv, false, &cols, false, dst, 0.0);
            }
            if let Some(b) = b {
                for (c, bias) in self.value(b).data().iter().enumerate() {
                    dst[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// Per-channel batch normalization over `[N, C, ...]`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnStats>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return shape_err("batchnorm", format!("expected [N, C, ...], got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if n == 0 || inner == 0 {
            return Err(NdError::EmptyBatch);
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return shape_err(
                    "batchnorm",
                    format!("{name} shape {:?} for {c} channels", self.value(v).shape()),
                );
            }
        }
        let count = (n * inner) as f64;
        let xv = self.value(x).data();
        let channel_iter = |ch: usize| {
            (0..n).flat_map(move |s| {
                let base = (s * c + ch) * inner;
                base..base + inner
            })
        };
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let m = channel_iter(ch).map(|i| xv[i]).sum::<f64>() / count;
                    let v = channel_iter(ch).map(|i| (xv[i] - m).powi(2)).sum::<f64>() / count;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batchnorm", "running statistics length mismatch");
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            for i in channel_iter(ch) {
                let h = (xv[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + bt[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        let train = stats.is_some();
        let var_out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu { x })
    }

    /// Window maximum; padded positions never win.
    pub fn maxpool2d(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "maxpool2d")?;
        let Some((oh, ow)) = geom.out_dims(h, w) else {
            return shape_err("maxpool2d", format!("window does not fit {h}x{w}"));
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..geom.k_h {
                        let iy = (oy * geom.stride_h + ky) as isize - geom.pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..geom.k_w {
                            let ix = (ox * geom.stride_w + kx) as isize - geom.pad_w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best || best_idx == usize::MAX {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    if best_idx == usize::MAX {
                        return shape_err("maxpool2d", "window lies entirely in padding");
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = plane * h * w + best_idx;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Window mean without padding.
    pub fn avgpool2d(&mut self, x: Var, k: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "avgpool2d")?;
        let geom = PoolGeom::new(k, stride, (0, 0));
        let Some((oh, ow)) = geom.out_dims(h, w) else {
            return shape_err("avgpool2d", format!("window {k:?} does not fit {h}x{w}"));
        };
        let xv = self.value(x).data();
        let area = (geom.k_h * geom.k_w) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0;
                    for ky in 0..geom.k_h {
                        let row = (oy * geom.stride_h + ky) * w + ox * geom.stride_w;
                        sum += src[row..row + geom.k_w].iter().sum::<f64>();
                    }
                    out[plane * oh * ow + oy * ow + ox] = sum / area;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { x, geom }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Affine map `x W^T + b` for `x: [N, D]`, `W: [K, D]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[n, d], &[k, wd]) = (tx.shape(), tw.shape()) else {
            return shape_err(
                "linear",
                format!("expected [N, D] x [K, D], got {:?} x {:?}", tx.shape(), tw.shape()),
            );
        };
        if d != wd {
            return shape_err("linear", format!("input dim {d} vs weight dim {wd}"));
        }
        let mut out = vec![0.0; n * k];
        gemm(n, d, k, tx.data(), false, tw.data(), true, &mut out, 0.0);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [k] {
                return shape_err("linear", format!("bias shape {:?}", tb.shape()));
            }
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(tb.data()).for_each(|(o, bv)| *o += bv);
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, d] = t.shape() else {
            return shape_err("l2_normalize", format!("expected [N, D], got {:?}", t.shape()));
        };
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::L2Normalize { x, norms }))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (l, grad) = loss::softmax_xent(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(l), Op::Loss { x: logits, grad }))
    }

    /// Mean contrastive loss over pairs of rows `(i, j, positive)` of `[N, D]`.
    pub fn contrastive(
        &mut self,
        emb: Var,
        pairs: &[(usize, usize, bool)],
        margin: f64,
    ) -> Result<Var> {
        let t = self.value(emb);
        let &[n, d] = t.shape() else {
            return shape_err("contrastive", format!("expected [N, D], got {:?}", t.shape()));
        };
        if pairs.is_empty() {
            return shape_err("contrastive", "no pairs");
        }
        let mut grad = vec![0.0; n * d];
        let mut total = 0.0;
        let scale = 1.0 / pairs.len() as f64;
        for &(i, j, positive) in pairs {
            if i >= n || j >= n {
                return shape_err("contrastive", format!("pair ({i}, {j}) outside {n} rows"));
            }
            let (a, b) = (&t.data()[i * d..(i + 1) * d], &t.data()[j * d..(j + 1) * d]);
            let (l, ga, gb) = loss::contrastive_loss(a, b, positive, margin)?;
            total += l;
            for (k, (x, y)) in ga.iter().zip(&gb).enumerate() {
                grad[i * d + k] += scale * x;
                grad[j * d + k] += scale * y;
            }
        }
        let grad = Tensor::new(vec![n, d], grad)?;
        Ok(self.push(Tensor::scalar(total * scale), Op::Loss { x: emb, grad }))
    }

    /// Back-propagates from the scalar `loss`, consuming the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", "loss must be a scalar");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut needs = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let need = match &node.op {
                Op::Const => false,
                Op::Input | Op::Param(_) => true,
                op => Self::op_inputs(op).iter().any(|v| needs[v.0]),
            };
            needs.push(need);
        }
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let g = if needs[i] { grads[i].take() } else { None };
            let Some(g) = g else {
                self.nodes[i].value = None;
                continue;
            };
            let node = std::mem::replace(
                &mut self.nodes[i],
                Node {
                    value: None,
                    op: Op::Input,
                },
            );
            let value = node.value.expect("value present until its backward");
            match node.op {
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(name) => out.params.push((name, g)),
                op => self.backward_op(op, &value, g, &mut grads, &needs)?,
            }
        }
        out.params.reverse();
        Ok(out)
    }

    fn backward_op(
        &self,
        op: Op,
        value: &Tensor,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        needs: &[bool],
    ) -> Result<()> {
        match op {
            Op::Input | Op::Const | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Conv2d { x, w, b, geom } => {
                let xt = self.value(x);
                let wt = self.value(w);
                let n = xt.shape()[0];
                let co = wt.shape()[0];
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.in_ch * geom.in_h * geom.in_w;
                let want_dx = needs[x.0];
                let mut dx = vec![0.0; if want_dx { xt.len() } else { 0 }];
                let mut dw = vec![0.0; wt.len()];
                let mut db = vec![0.0; co];
                let direct = geom.prefers_direct(co);
                let unfold = !geom.is_pointwise() && !direct;
                let mut cols = vec![0.0; if unfold { k * p } else { 0 }];
                let mut dcols = vec![0.0; if unfold && want_dx { k * p } else { 0 }];
                for s in 0..n {
                    let img = &xt.data()[s * img_len..(s + 1) * img_len];
                    let gout = &g.data()[s * co * p..(s + 1) * co * p];
                    if direct {
                        conv_direct_dw(&geom, co, gout, img, &mut dw);
                    } else if geom.is_pointwise() {
                        gemm(co, p, k, gout, false, img, true, &mut dw, 1.0);
                    } else {
                        im2col(&geom, img, &mut cols);
                        gemm(co, p, k, gout, false, &cols, true, &mut dw, 1.0);
                    }
                    if want_dx {
                        let dimg = &mut dx[s * img_len..(s + 1) * img_len];
                        if direct {
                            conv_direct_dx(&geom, co, wt.data(), gout, dimg);
                        } else if geom.is_pointwise() {
                            gemm(k, co, p, wt.data(), true, gout, false, dimg, 0.0);
                        } else {
                            gemm(k, co, p, wt.data(), true, gout, false, &mut dcols, 0.0);
                            col2im_add(&geom, &dcols, dimg);
                        }
                    }
                    if b.is_some() {
                        for (c, d) in db.iter_mut().enumerate() {
                            *d += gout[c * p..(c + 1) * p].iter().sum::<f64>();
                        }
                    }
                }
                if want_dx {
                    accumulate(&mut grads[x.0], Tensor::new(xt.shape().to_vec(), dx)?);
                }
                accumulate(&mut grads[w.0], Tensor::new(wt.shape().to_vec(), dw)?);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], Tensor::new(vec![co], db)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = (n * inner) as f64;
                let gam = self.value(gamma).data();
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let idx = || {
                        (0..n).flat_map(move |s| {
                            let base = (s * c + ch) * inner;
                            base..base + inner
                        })
                    };
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for i in idx() {
                        sum_g += gd[i];
                        sum_gx += gd[i] * xhat[i];
                    }
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let scale = gam[ch] * inv_std[ch];
                    if train {
                        for i in idx() {
                            dx[i] = scale * (gd[i] - sum_g / count - xhat[i] * sum_gx / count);
                        }
                    } else {
                        for i in idx() {
                            dx[i] = scale * gd[i];
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(shape.to_vec(), dx)?);
                accumulate(&mut grads[gamma.0], Tensor::new(vec![c], dgamma)?);
                accumulate(&mut grads[beta.0], Tensor::new(vec![c], dbeta)?);
            }
            Op::Relu { x } => {
                let data = g
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], Tensor::new(value.shape().to_vec(), data)?);
            }
            Op::MaxPool { x, argmax } => {
                let xt = self.value(x);
                let mut dx = vec![0.0; xt.len()];
                for (gv, &src) in g.data().iter().zip(&argmax) {
                    dx[src] += gv;
                }
                accumulate(&mut grads[x.0], Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::AvgPool { x, geom } => {
                let xt = self.value(x);
                let [n, c, h, w] = dims4(xt, "avgpool2d")?;
                let (oh, ow) = geom.out_dims(h, w).expect("checked in forward");
                let area = (geom.k_h * geom.k_w) as f64;
                let mut dx = vec![0.0; xt.len()];
                for plane in 0..n * c {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[plane * oh * ow + oy * ow + ox] / area;
                            for ky in 0..geom.k_h {
                                let row = (oy * geom.stride_h + ky) * w + ox * geom.stride_w;
                                dst[row..row + geom.k_w].iter_mut().for_each(|d| *d += gv);
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(xt.shape().to_vec(), dx)?);
            }
            Op::Add { a, b } => {
                accumulate(&mut grads[b.0], g.clone());
                accumulate(&mut grads[a.0], g);
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(x), self.value(w));
                let (n, d) = (xt.shape()[0], xt.shape()[1]);
                let k = wt.shape()[0];
                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; k * d];
                gemm(n, k, d, g.data(), false, wt.data(), false, &mut dx, 0.0);
                gemm(k, n, d, g.data(), true, xt.data(), false, &mut dw, 0.0);
                accumulate(&mut grads[x.0], Tensor::new(vec![n, d], dx)?);
                accumulate(&mut grads[w.0], Tensor::new(vec![k, d], dw)?);
                if let Some(b) = b {
                    let mut db = vec![0.0; k];
                    for row in g.data().chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(&mut grads[b.0], Tensor::new(vec![k], db)?);
                }
            }
            Op::Reshape { x } => {
                let shape = self.value(x).shape().to_vec();
                accumulate(&mut grads[x.0], g.reshape(&shape)?);
            }
            Op::L2Normalize { x, norms } => {
                let d = value.shape()[1];
                let mut dx = vec![0.0; value.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let y = &value.data()[r * d..(r + 1) * d];
                    let gy = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        dx[r * d + k] = (gy[k] - y[k] * dot) / norm;
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(value.shape().to_vec(), dx)?);
            }
            Op::Loss { x, grad } => {
                let scale = g.data()[0];
                let data = grad.data().iter().map(|v| v * scale).collect();
                accumulate(&mut grads[x.0], Tensor::new(grad.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}
