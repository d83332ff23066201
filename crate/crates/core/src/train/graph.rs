//! Tape-based reverse-mode differentiation over the model's operator set.
//!
//! A [`Graph`] records one forward pass (one cloud) and implements
//! [`Backend`], so the training path runs the same architecture code as the
//! packed inference path. Binarizers are replaced by their reconstructions in
//! the forward pass and by straight-through estimators in the backward pass.

use std::collections::HashMap;

use crate::binmodules::attention::{attention_entropy, code_products, softmax_rows, AttnIds};
use crate::binmodules::linear::linear_with_codes;
use crate::binmodules::model::{Backend, Model, LN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::hybridize::quantize_activation;
use crate::quantize::{l1_mean, shift_scale, Binarizer, FineGrainedCode, Granularity, SCALE_FLOOR};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    /// `x W^T + b`
    Linear { x: usize, w: usize, b: usize },
    /// `a b` or `a b^T`
    MatMul { a: usize, b: usize, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LayerNorm { x: usize, g: usize, b: usize, xhat: Tensor, rstd: Vec<f64> },
    Softmax(usize),
    Gather { x: usize, idx: Vec<usize> },
    Concat(Vec<usize>),
    MaxPool { x: usize, argmax: Vec<usize> },
    /// `alpha_o * sign(w)` with the clipped STE on `w / alpha_o`
    SignWeight { w: usize, mask: Tensor },
    /// per-tensor learnable shift/scale binarizer
    FakeQuant { x: usize, shift: usize, scale: usize, xp: Tensor, binarizer: Binarizer },
    /// value replaced by a quantized reconstruction; gradient passes through
    StePass(usize),
    /// scalar softmax cross-entropy against `label`
    CrossEntropy { logits: usize, probs: Vec<f64>, label: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Clipped-identity straight-through gradient of a binarizer at the
/// shifted/scaled input `x`.
pub fn ste_grad(upstream: &Tensor, x: &Tensor, binarizer: Binarizer) -> Result<Tensor> {
    if upstream.shape() != x.shape() {
        return Err(shape_err("ste_grad", format!("{:?}", x.shape()), format!("{:?}", upstream.shape())));
    }
    let data = upstream.data().iter().zip(x.data()).map(|(u, v)| u * binarizer.ste_mask(*v)).collect();
    Ok(Tensor::new(x.rows(), x.cols(), data))
}

/// One recorded forward pass.
pub struct Graph<'m> {
    model: &'m Model,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, usize>,
    identity: bool,
    /// mean softmax-row entropy per attention block
    pub entropies: Vec<f64>,
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(s) => {
            for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for row in t.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            identity: false,
            entropies: Vec::new(),
        }
    }

    /// Graph whose binarizers are all the identity: the smooth path used for
    /// gradient checking.
    pub fn with_identity_binarizers(model: &'m Model) -> Self {
        Self {
            identity: true,
            ..Self::new(model)
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.model.params.id(name)?;
        if let Some(&n) = self.param_nodes.get(&id) {
            return Ok(Var(n));
        }
        let v = self.push(self.model.params.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v.0);
        Ok(v)
    }

    fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let mut y = matmul(self.value(x), false, self.value(w), true)?;
        let bias = self.value(b).data().to_vec();
        for r in 0..y.rows() {
            for (v, bb) in y.row_mut(r).iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        Ok(self.push(y, Op::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    fn matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let y = matmul(self.value(a), false, self.value(b), tb)?;
        Ok(self.push(y, Op::MatMul { a: a.0, b: b.0, tb }))
    }

    /// Product node whose forward value was computed elsewhere (exactly, on
    /// bit codes); the backward pass differentiates the float product.
    fn product_with_value(&mut self, y: Tensor, op: Op) -> Var {
        self.push(y, op)
    }

    fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).scale(c);
        self.push(y, Op::Scale(a.0, c))
    }

    fn softmax(&mut self, a: Var) -> Var {
        let y = softmax_rows(self.value(a));
        self.push(y, Op::Softmax(a.0))
    }

    fn sign_weight(&mut self, w: Var) -> Var {
        let wt = self.value(w);
        let mut y = wt.clone();
        let mut mask = wt.clone();
        for r in 0..wt.rows() {
            let alpha = l1_mean(wt.row(r));
            for (c, &v) in wt.row(r).iter().enumerate() {
                y.set(r, c, alpha * Binarizer::Sign.code(v));
                mask.set(r, c, Binarizer::Sign.ste_mask(v / alpha));
            }
        }
        self.push(y, Op::SignWeight { w: w.0, mask })
    }

    fn fake_quant(&mut self, x: Var, id: &str, binarizer: Binarizer) -> Result<Var> {
        if !self.model.calibrated.contains(id) {
            return Err(Error::Unfrozen(id.to_string()));
        }
        let shift = self.param(&format!("{id}.shift"))?;
        let scale = self.param(&format!("{id}.scale"))?;
        let (sh, sc) = (self.value(shift).data()[0], self.value(scale).data()[0].max(SCALE_FLOOR));
        let xp = shift_scale(self.value(x), Granularity::PerTensor, &[sh], &[sc])?;
        let y = xp.map(|v| sh + sc * binarizer.code(v));
        Ok(self.push(
            y,
            Op::FakeQuant {
                x: x.0,
                shift: shift.0,
                scale: scale.0,
                xp,
                binarizer,
            },
        ))
    }

    /// Quantize an activation by tensor id under the model's policy;
    /// `transposed` quantizes `x^T` (per-channel V). Returns the
    /// reconstruction node and the row codes of the quantized tensor.
    fn act_quant(&mut self, x: Var, id: &str, transposed: bool) -> Result<(Var, Vec<(f64, FineGrainedCode)>)> {
        let spec = self
            .model
            .specs
            .get(id)
            .ok_or_else(|| Error::UnregisteredTensor(id.to_string()))?;
        let xv = self.value(x);
        let qa = if transposed {
            quantize_activation(&xv.transpose(), spec, &self.model.policy, id)?
        } else {
            quantize_activation(xv, spec, &self.model.policy, id)?
        };
        let y = if transposed { qa.reconstruct().transpose() } else { qa.reconstruct() };
        Ok((self.push(y, Op::StePass(x.0)), qa.row_codes()?))
    }

    /// Mean softmax cross-entropy of a `1 x classes` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != 1 || label >= l.cols() {
            return Err(Error::InvalidArgument(format!("label {label} for logits {:?}", l.shape())));
        }
        let probs = softmax_rows(l).into_data();
        let m = l.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - l.data()[label];
        Ok(self.push(Tensor::full(1, 1, loss), Op::CrossEntropy { logits: logits.0, probs, label }))
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// took part, indexed by parameter id.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument("backward needs a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(1, 1, 1.0));
        let mut out = vec![None; self.model.params.len()];
        for n in (0..=loss.0).rev() {
            let Some(up) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[*id] = Some(up),
                Op::Linear { x, w, b } => {
                    add_into(&mut grads[*x], matmul(&up, false, &self.nodes[*w].value, false)?);
                    add_into(&mut grads[*w], matmul(&up, true, &self.nodes[*x].value, false)?);
                    add_into(&mut grads[*b], column_sums(&up));
                }
                Op::MatMul { a, b, tb } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if *tb {
                        add_into(&mut grads[*a], matmul(&up, false, bv, false)?);
                        add_into(&mut grads[*b], matmul(&up, true, av, false)?);
                    } else {
                        add_into(&mut grads[*a], matmul(&up, false, bv, true)?);
                        add_into(&mut grads[*b], matmul(av, true, &up, false)?);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[*a], up.clone());
                    add_into(&mut grads[*b], up);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads[*b], up.scale(-1.0));
                    add_into(&mut grads[*a], up);
                }
                Op::Scale(a, c) => add_into(&mut grads[*a], up.scale(*c)),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let data = up.data().iter().zip(x.data()).map(|(u, v)| if *v > 0.0 { *u } else { 0.0 }).collect();
                    add_into(&mut grads[*a], Tensor::new(x.rows(), x.cols(), data));
                }
                Op::LayerNorm { x, g, b, xhat, rstd } => {
                    let gamma = self.nodes[*g].value.data();
                    let c = xhat.cols() as f64;
                    let mut dx = Tensor::zeros(xhat.rows(), xhat.cols());
                    let mut dg = Tensor::zeros(1, xhat.cols());
                    for r in 0..xhat.rows() {
                        let (u, xh) = (up.row(r), xhat.row(r));
                        let dxh: Vec<f64> = u.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c;
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                        for (d, (a, b)) in dg.data_mut().iter_mut().zip(u.iter().zip(xh)) {
                            *d += a * b;
                        }
                    }
                    add_into(&mut grads[*b], column_sums(&up));
                    add_into(&mut grads[*g], dg);
                    add_into(&mut grads[*x], dx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = up.row(r).iter().zip(y.row(r)).map(|(u, p)| u * p).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = y.get(r, j) * (up.get(r, j) - dot);
                        }
                    }
                    add_into(&mut grads[*a], dx);
                }
                Op::Gather { x, idx } => {
                    let src = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, u) in dx.row_mut(i).iter_mut().zip(up.row(r)) {
                            *d += u;
                        }
                    }
                    add_into(&mut grads[*x], dx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        let mut d = Tensor::zeros(up.rows(), w);
                        for r in 0..up.rows() {
                            d.row_mut(r).copy_from_slice(&up.row(r)[off..off + w]);
                        }
                        add_into(&mut grads[p], d);
                        off += w;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let src = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    for (o, &r) in argmax.iter().enumerate() {
                        let c = o % cols;
                        dx.set(r, c, dx.get(r, c) + up.data()[o]);
                    }
                    add_into(&mut grads[*x], dx);
                }
                Op::SignWeight { w, mask } => {
                    let data = up.data().iter().zip(mask.data()).map(|(u, m)| u * m).collect();
                    add_into(&mut grads[*w], Tensor::new(up.rows(), up.cols(), data));
                }
                Op::FakeQuant {
                    x,
                    shift,
                    scale,
                    xp,
                    binarizer,
                } => {
                    let (mut dshift, mut dscale) = (0.0, 0.0);
                    let mut dx = Tensor::zeros(xp.rows(), xp.cols());
                    for ((d, &u), &v) in dx.data_mut().iter_mut().zip(up.data()).zip(xp.data()) {
                        let m = binarizer.ste_mask(v);
                        *d = u * m;
                        dshift += u * (1.0 - m);
                        dscale += u * (binarizer.code(v) - v * m);
                    }
                    add_into(&mut grads[*x], dx);
                    add_into(&mut grads[*shift], Tensor::full(1, 1, dshift));
                    add_into(&mut grads[*scale], Tensor::full(1, 1, dscale));
                }
                Op::StePass(a) => add_into(&mut grads[*a], up),
                Op::CrossEntropy { logits, probs, label } => {
                    let s = up.data()[0];
                    let mut d: Vec<f64> = probs.iter().map(|p| s * p).collect();
                    d[*label] -= s;
                    add_into(&mut grads[*logits], Tensor::row_vector(d));
                }
            }
        }
        Ok(out)
    }
}

impl Backend for Graph<'_> {
    type V = Var;

    fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn fp_linear(&mut self, name: &str, x: &Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.linear(*x, w, b)
    }

    fn norm(&mut self, name: &str, x: &Var) -> Result<Var> {
        let g = self.param(&format!("{name}.gamma"))?;
        let b = self.param(&format!("{name}.beta"))?;
        let xv = self.value(*x);
        let c = xv.cols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        let (gamma, beta) = (self.value(g).data(), self.value(b).data());
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            for ((v, gg), bb) in y.row_mut(r).iter_mut().zip(gamma).zip(beta) {
                *v = *v * gg + bb;
            }
        }
        Ok(self.push(
            y,
            Op::LayerNorm {
                x: x.0,
                g: g.0,
                b: b.0,
                xhat,
                rstd,
            },
        ))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = self.value(*x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x.0))
    }

    fn binary_linear(&mut self, name: &str, x: &Var, bin_w: bool, bin_a: bool) -> Result<Var> {
        let mut w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let mut x = *x;
        if self.identity {
            return self.linear(x, w, b);
        }
        if bin_w {
            w = self.sign_weight(w);
        }
        if bin_a {
            x = self.fake_quant(x, &format!("{name}.in"), Binarizer::Sign)?;
        }
        if !(bin_w && bin_a) {
            return self.linear(x, w, b);
        }
        // fully binary: forward value from the packed kernels, so that
        // training sees the same (tie-exact) outputs as inference
        let layer = self
            .model
            .binary
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no binary layer `{name}`")))?;
        let qa = quantize_activation(&self.nodes[x.0].value, &layer.in_spec, &self.model.policy, &layer.in_id())?;
        let y = linear_with_codes(layer, &qa)?;
        Ok(self.product_with_value(y, Op::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    fn attention(&mut self, block: usize, q: &Var, k: &Var, v: &Var, binary: bool) -> Result<Var> {
        let d = self.value(*q).cols() as f64;
        if !binary || self.identity {
            let logits = self.matmul(*q, *k, true)?;
            let logits = self.scale(logits, 1.0 / d.sqrt());
            let a = self.softmax(logits);
            self.entropies.push(attention_entropy(self.value(a), 0.0)?.mean);
            return self.matmul(a, *v, false);
        }
        let ids = AttnIds::for_block(block);
        let (qh, qc) = self.act_quant(*q, &ids.q, false)?;
        let (kh, kc) = self.act_quant(*k, &ids.k, false)?;
        let (vh, vc) = self.act_quant(*v, &ids.v, true)?;
        let inv = 1.0 / d.sqrt();
        let logits = code_products(&qc, &kc, 1.0)?;
        let logits = self.product_with_value(logits, Op::MatMul { a: qh.0, b: kh.0, tb: true });
        let logits = self.scale(logits, inv);
        let a = self.softmax(logits);
        self.entropies.push(attention_entropy(self.value(a), 0.0)?.mean);
        let (ah, ac) = self.act_quant(a, &ids.attn, false)?;
        let r = code_products(&ac, &vc, 1.0)?;
        Ok(self.product_with_value(r, Op::MatMul { a: ah.0, b: vh.0, tb: false }))
    }

    fn gather(&mut self, x: &Var, idx: &[usize]) -> Var {
        let y = self.value(*x).gather_rows(idx);
        self.push(y, Op::Gather { x: x.0, idx: idx.to_vec() })
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.value(*a).sub(self.value(*b))?;
        Ok(self.push(y, Op::Sub(a.0, b.0)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.value(*a).add(self.value(*b))?;
        Ok(self.push(y, Op::Add(a.0, b.0)))
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let y = Tensor::concat_cols(&parts.iter().map(|p| self.value(*p)).collect::<Vec<_>>())?;
        Ok(self.push(y, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    fn max_pool(&mut self, x: &Var, k: usize) -> Result<Var> {
        let src = self.value(*x);
        if k == 0 || src.rows() % k != 0 {
            return Err(shape_err("max_pool", format!("rows divisible by {k}"), src.rows()));
        }
        let cols = src.cols();
        let mut y = Tensor::full(src.rows() / k, cols, f64::NEG_INFINITY);
        let mut argmax = vec![0; y.len()];
        for r in 0..src.rows() {
            let o = r / k;
            for (c, &v) in src.row(r).iter().enumerate() {
                if v > y.get(o, c) {
                    y.set(o, c, v);
                    argmax[o * cols + c] = r;
                }
            }
        }
        Ok(self.push(y, Op::MaxPool { x: x.0, argmax }))
    }
}
