//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node holding its output value and
//! whatever the backward rule needs. [`Graph::backward`] walks the tape once
//! in reverse; afterwards the graph is consumed and must be rebuilt by a
//! fresh forward pass.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{conv_out_extent, gemm, MatRef, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, n: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeom, n: usize },
    GlobalAvgPool { x: Var, spatial: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { parts: Vec<(Var, usize)>, outer: usize },
    SliceRows { x: Var, start: usize },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Softmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    WeightedCe { logits: Var, labels: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    BceLogits { logits: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    params: Vec<(ParamId, Tensor<T>)>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn from_params(mut params: Vec<(ParamId, Tensor<T>)>) -> Self {
        params.sort_by_key(|(id, _)| *id);
        Gradients { params, inputs: HashMap::new() }
    }

    /// Add another gradient set into this one, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (id, g) in other.params() {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::Shape("gradient accumulation shape mismatch".into()));
                    }
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b);
                }
                None => self.params.push((id, g.clone())),
            }
        }
        self.params.sort_by_key(|(id, _)| *id);
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for (_, g) in self.params.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Gradient with respect to an input created by [`Graph::input_tracked`].
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_vars: HashMap::new(), consumed: false, grad_enabled: true }
    }

    /// A graph that never tracks gradients; used for inference.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    /// Drop every recorded node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, what: &str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward; call reset".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, false, "input")
    }

    /// Input leaf whose gradient is reported by [`Graph::backward`].
    pub fn input_tracked(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, true, "input")
    }

    /// Leaf bound to a trainable parameter. Repeated calls for the same id
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects NCHW input and OIHW weight, got {xs:?} / {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv2d: input has {} channels, weight expects {}", xs[1], ws[1])));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!("conv2d bias shape {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            cin: ws[1],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            h: xs[2],
            w: xs[3],
            ho: conv_out_extent(xs[2], ws[2], stride.0, pad.0)?,
            wo: conv_out_extent(xs[3], ws[3], stride.1, pad.1)?,
        };
        let n = xs[0];
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            &geom,
        );
        let out = Tensor::new(vec![n, geom.cout, geom.ho, geom.wo], y)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, geom, n }, ng, "conv2d")
    }

    /// Batch normalisation over axis 1 of an `[N, C, ...]` tensor.
    ///
    /// In train mode the batch statistics normalise the input and the running
    /// statistics are updated in place; in eval mode the running statistics
    /// are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        eps: T,
        momentum: T,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("batchnorm needs [N, C, ...], got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for (what, t) in [("gamma", self.shape(gamma)), ("beta", self.shape(beta))] {
            if t != [c] {
                return Err(Error::Shape(format!("batchnorm {what} shape {t:?}, expected [{c}]")));
            }
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::Shape("batchnorm running statistics shape".into()));
        }
        let m = n * inner;
        let xv = self.value(x).data();
        let (mean, var) = if mode == Mode::Train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for i in 0..n {
                    let base = (i * c + ch) * inner;
                    acc += wide_sum(&xv[base..base + inner]);
                }
                let mu = T::lit(acc / m as f64);
                let mut sq = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * inner;
                    sq += xv[base..base + inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                mean[ch] = mu;
                var[ch] = sq / T::lit(m as f64);
            }
            let unbias = if m > 1 { T::lit(m as f64 / (m as f64 - 1.0)) } else { T::one() };
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (T::one() - momentum) * *rm + momentum * mean[ch];
                let rv = &mut running_var.data_mut()[ch];
                *rv = (T::one() - momentum) * *rv + momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    y[j] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(xs, y)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let xhat = if ng { xhat } else { Vec::new() };
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train };
        self.push(out, op, ng, "batchnorm")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(out, Op::Relu { x }, ng, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid { x }, ng, "sigmoid")
    }

    fn pool_geom(&self, x: Var, k: usize, s: usize) -> Result<(usize, PoolGeom)> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::Shape(format!("pooling expects NCHW, got {xs:?}")));
        }
        let geom = PoolGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            s,
            ho: conv_out_extent(xs[2], k, s, 0)?,
            wo: conv_out_extent(xs[3], k, s, 0)?,
        };
        Ok((xs[0], geom))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, geom) = self.pool_geom(x, kernel, stride)?;
        let (y, argmax) = kernels::maxpool_forward(self.value(x).data(), n, &geom);
        let out = Tensor::new(vec![n, geom.c, geom.ho, geom.wo], y)?;
        let ng = self.needs(x);
        self.push(out, Op::MaxPool { x, argmax }, ng, "maxpool")
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, geom) = self.pool_geom(x, kernel, stride)?;
        let y = kernels::avgpool_forward(self.value(x).data(), n, &geom);
        let out = Tensor::new(vec![n, geom.c, geom.ho, geom.wo], y)?;
        let ng = self.needs(x);
        self.push(out, Op::AvgPool { x, geom, n }, ng, "avgpool")
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avgpool expects NCHW, got {xs:?}")));
        }
        let spatial = xs[2] * xs[3];
        let inv = T::one() / T::lit(spatial as f64);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|p| T::lit(wide_sum(p)) * inv)
            .collect();
        let out = Tensor::new(vec![xs[0], xs[1]], y)?;
        let ng = self.needs(x);
        self.push(out, Op::GlobalAvgPool { x, spatial }, ng, "global_avgpool")
    }

    /// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!("linear bias shape {:?}", self.shape(b))));
            }
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            n,
            fin,
            fout,
            MatRef::rm(self.value(x).data(), fin),
            MatRef::tr(self.value(w).data(), fin),
            beta,
            &mut y,
        );
        let out = Tensor::new(vec![n, fout], y)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, ng, "linear")
    }

    /// Concatenate along axis 1. All parts must agree on every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::Shape("concat needs rank >= 2".into()));
        }
        let outer = s0[0];
        let tail: usize = s0[2..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::Shape(format!("concat: {s:?} vs {s0:?}")));
            }
            widths.push((p, s[1] * tail));
        }
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut y = Vec::with_capacity(outer * total);
        for i in 0..outer {
            for &(p, w) in &widths {
                y.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total / tail;
        let out = Tensor::new(shape, y)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat { parts: widths, outer }, ng, "concat")
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if len == 0 || start + len > xs[0] {
            return Err(Error::Shape(format!("slice_rows {start}+{len} of {xs:?}")));
        }
        let inner: usize = xs[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = xs;
        shape[0] = len;
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        self.push(out, Op::SliceRows { x, start }, ng, "slice_rows")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, ng, "add")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, factor }, ng, "scale")
    }

    /// Softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("softmax expects [N, K], got {xs:?}")));
        }
        let y = softmax_rows(self.value(x).data(), xs[1]);
        let out = Tensor::new(xs, y)?;
        let ng = self.needs(x);
        self.push(out, Op::Softmax { x }, ng, "softmax")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng, "mean")
    }

    /// Batch mean of `-w[label] * log softmax(logits)[label]`.
    pub fn weighted_softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[T],
    ) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy: logits {xs:?} for {} labels",
                labels.len()
            )));
        }
        let k = xs[1];
        if weights.len() != k {
            return Err(Error::Shape(format!("{} class weights for {k} classes", weights.len())));
        }
        if weights.iter().any(|w| *w < T::zero()) {
            return Err(Error::InvalidArgument("negative class weight".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let data = self.value(logits).data();
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            if weights[l] == T::zero() {
                continue;
            }
            let row = &data[i * k..(i + 1) * k];
            loss += -weights[l] * log_softmax_at(row, l);
        }
        loss = loss / T::lit(labels.len() as f64);
        let ng = self.needs(logits);
        let op = Op::WeightedCe { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, ng, "cross_entropy")
    }

    /// Mean binary cross entropy over all elements, computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::Shape(format!("bce: {} logits, {} targets", z.len(), targets.len())));
        }
        let mut loss = T::zero();
        for (&zi, &t) in z.iter().zip(targets) {
            loss += zi.max(T::zero()) - zi * t + (T::one() + (-zi.abs()).exp()).ln();
        }
        loss = loss / T::lit(z.len() as f64);
        let ng = self.needs(logits);
        let op = Op::BceLogits { logits, targets: targets.to_vec() };
        self.push(Tensor::scalar(loss), op, ng, "bce")
    }

    /// Reverse pass from a scalar node. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph("backward called twice without a new forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { params: Vec::new(), inputs: HashMap::new() };

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, g: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input => {
                    let t = Tensor::new(node.value.shape().to_vec(), dy)?;
                    out.inputs.insert(Var(idx), t);
                }
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), dy)?;
                    out.params.push((*id, t));
                }
                Op::Conv2d { x, w, b, geom, n } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &dy,
                        *n,
                        geom,
                        self.needs(*x),
                    );
                    if let Some(dx) = cg.dx {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, cg.dw, &mut grads);
                    if let Some(b) = b {
                        send(*b, cg.db, &mut grads);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let m = T::lit((n * inner) as f64);
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            for j in base..base + inner {
                                dgamma[ch] += dy[j] * xhat[j];
                                dbeta[ch] += dy[j];
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); dy.len()];
                        for i in 0..n {
                            for ch in 0..c {
                                let base = (i * c + ch) * inner;
                                let k = g[ch] * inv_std[ch];
                                for j in base..base + inner {
                                    dx[j] = if *batch_stats {
                                        k * (dy[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                    } else {
                                        k * dy[j]
                                    };
                                }
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                    send(*gamma, dgamma, &mut grads);
                    send(*beta, dbeta, &mut grads);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let dx = dy
                        .iter()
                        .zip(xv)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    send(*x, dx, &mut grads);
                }
                Op::Sigmoid { x } => {
                    let yv = node.value.data();
                    let dx = dy.iter().zip(yv).map(|(&d, &y)| d * y * (T::one() - y)).collect();
                    send(*x, dx, &mut grads);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (&i, &d) in argmax.iter().zip(&dy) {
                        dx[i] += d;
                    }
                    send(*x, dx, &mut grads);
                }
                Op::AvgPool { x, geom, n } => {
                    let dx = kernels::avgpool_backward(&dy, *n, geom);
                    send(*x, dx, &mut grads);
                }
                Op::GlobalAvgPool { x, spatial } => {
                    let inv = T::one() / T::lit(*spatial as f64);
                    let mut dx = Vec::with_capacity(dy.len() * spatial);
                    for &d in &dy {
                        dx.extend(std::iter::repeat_n(d * inv, *spatial));
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x);
                    let (nb, fin) = (xs[0], xs[1]);
                    let fout = self.shape(*w)[0];
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); nb * fin];
                        gemm(
                            nb,
                            fout,
                            fin,
                            MatRef::rm(&dy, fout),
                            MatRef::rm(self.value(*w).data(), fin),
                            T::zero(),
                            &mut dx,
                        );
                        send(*x, dx, &mut grads);
                    }
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(
                        fout,
                        nb,
                        fin,
                        MatRef::tr(&dy, fout),
                        MatRef::rm(self.value(*x).data(), fin),
                        T::zero(),
                        &mut dw,
                    );
                    send(*w, dw, &mut grads);
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); fout];
                        for row in dy.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a += *r);
                        }
                        send(*b, db, &mut grads);
                    }
                }
                Op::Concat { parts, outer } => {
                    let total: usize = parts.iter().map(|(_, w)| w).sum();
                    let mut offset = 0;
                    for &(p, w) in parts {
                        let mut dp = Vec::with_capacity(outer * w);
                        for i in 0..*outer {
                            let base = i * total + offset;
                            dp.extend_from_slice(&dy[base..base + w]);
                        }
                        send(p, dp, &mut grads);
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xs = self.shape(*x);
                    let inner: usize = xs[1..].iter().product();
                    let mut dx = vec![T::zero(); xs[0] * inner];
                    dx[start * inner..start * inner + dy.len()].copy_from_slice(&dy);
                    send(*x, dx, &mut grads);
                }
                Op::Add { a, b } => {
                    send(*a, dy.clone(), &mut grads);
                    send(*b, dy, &mut grads);
                }
                Op::Scale { x, factor } => {
                    let dx = dy.iter().map(|&d| d * *factor).collect();
                    send(*x, dx, &mut grads);
                }
                Op::Softmax { x } => {
                    let k = node.value.shape()[1];
                    let yv = node.value.data();
                    let mut dx = vec![T::zero(); dy.len()];
                    for ((dxr, dyr), yr) in dx.chunks_mut(k).zip(dy.chunks(k)).zip(yv.chunks(k)) {
                        let dot: T = dyr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for j in 0..k {
                            dxr[j] = yr[j] * (dyr[j] - dot);
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Sum { x } => {
                    let n = self.value(*x).numel();
                    send(*x, vec![dy[0]; n], &mut grads);
                }
                Op::Mean { x } => {
                    let n = self.value(*x).numel();
                    send(*x, vec![dy[0] / T::lit(n as f64); n], &mut grads);
                }
                Op::WeightedCe { logits, labels, weights, probs } => {
                    let k = weights.len();
                    let scale = dy[0] / T::lit(labels.len() as f64);
                    let mut dx = vec![T::zero(); probs.len()];
                    for (i, &l) in labels.iter().enumerate() {
                        let wl = weights[l] * scale;
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            dx[i * k + j] = wl * (probs[i * k + j] - onehot);
                        }
                    }
                    send(*logits, dx, &mut grads);
                }
                Op::BceLogits { logits, targets } => {
                    let z = self.value(*logits).data();
                    let scale = dy[0] / T::lit(z.len() as f64);
                    let dx = z.iter().zip(targets).map(|(&zi, &t)| (sigmoid(zi) - t) * scale).collect();
                    send(*logits, dx, &mut grads);
                }
            }
        }
        for (id, g) in &out.params {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", id.0)));
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

/// Sum accumulated in f64 so long reductions stay exact for constant inputs.
fn wide_sum<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum()
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax over a row-major matrix with `k` columns.
pub fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (yr, xr) in y.chunks_mut(k).zip(x.chunks(k)) {
        let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mx).exp();
            s += *o;
        }
        yr.iter_mut().for_each(|o| *o = *o / s);
    }
    y
}

fn log_softmax_at<T: Scalar>(row: &[T], l: usize) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
    row[l] - lse
}
