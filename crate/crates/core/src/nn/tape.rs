//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the tape in reverse and scatters parameter gradients into per-slot flat
//! buffers, so a model's gradient lines up with its flat parameter vector.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::gemm::{col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Where a model's weights come from while building a graph.
///
/// `slot: None` binds the weights as constants, which is how frozen models
/// take part in a graph without receiving gradients.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub slot: Option<usize>,
    pub params: &'a [f64],
}

impl<'a> Binding<'a> {
    pub fn trainable(slot: usize, params: &'a [f64]) -> Self {
        Self { slot: Some(slot), params }
    }

    pub fn frozen(params: &'a [f64]) -> Self {
        Self { slot: None, params }
    }
}

/// Offsets of one convolution's kernel and bias inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvParams {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

enum Op {
    Leaf,
    Param {
        slot: usize,
        offset: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Silu(Var),
    LeakyRelu(Var, f64),
    Affine(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Mean(Var),
    L1Target(Var, Rc<Vec<f64>>),
    SoftDice(Var, Rc<Vec<f64>>),
    SquaredToConst(Var, f64),
    L1Pair(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    slot_lens: BTreeMap<usize, usize>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Flat gradient for a parameter slot (zeros if the slot was never touched).
    pub fn slot(&self, slot: usize) -> Option<&[f64]> {
        self.params.get(&slot).map(|v| v.as_slice())
    }

    pub fn take_slot(&mut self, slot: usize) -> Option<Vec<f64>> {
        self.params.remove(&slot)
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
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input sensitivities).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, bind: Binding<'_>, offset: usize, shape: (usize, usize, usize)) -> Var {
        let n = shape.0 * shape.1 * shape.2;
        let t = Tensor::from_vec(shape.0, shape.1, shape.2, bind.params[offset..offset + n].to_vec());
        match bind.slot {
            Some(slot) => {
                self.slot_lens.insert(slot, bind.params.len());
                self.push(t, Op::Param { slot, offset }, true)
            }
            None => self.constant(t),
        }
    }

    pub fn conv(&mut self, x: Var, bind: Binding<'_>, p: &ConvParams, stride: usize, pad: usize) -> Var {
        let w = self.param(bind, p.w_off, (p.cout, p.cin * p.k * p.k, 1));
        let b = self.param(bind, p.b_off, (p.cout, 1, 1));
        let xv = self.value(x);
        assert_eq!(xv.c, p.cin, "conv input channels");
        let geom = ConvGeom {
            cin: p.cin,
            h: xv.h,
            w: xv.w,
            k: p.k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut cols = Vec::new();
        im2col(&xv.data, &geom, &mut cols);
        let mut out = Tensor::zeros(p.cout, oh, ow);
        let plane = oh * ow;
        let bias = &self.value(b).data;
        for (co, chunk) in out.data.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            false,
            false,
            p.cout,
            plane,
            geom.rows(),
            1.0,
            &self.value(w).data,
            &cols,
            1.0,
            &mut out.data,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Conv { x, w, b, geom, cols }, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.h % 2 == 0 && xv.w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (c, oh, ow) = (xv.c, xv.h / 2, xv.w / 2);
        let mut out = Tensor::zeros(c, oh, ow);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let s = xv.at(ch, 2 * y, 2 * xx)
                        + xv.at(ch, 2 * y, 2 * xx + 1)
                        + xv.at(ch, 2 * y + 1, 2 * xx)
                        + xv.at(ch, 2 * y + 1, 2 * xx + 1);
                    out.data[(ch * oh + y) * ow + xx] = 0.25 * s;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::AvgPool2(x), ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, oh, ow) = (xv.c, xv.h * 2, xv.w * 2);
        let mut out = Tensor::zeros(c, oh, ow);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out.data[(ch * oh + y) * ow + xx] = xv.at(ch, y / 2, xx / 2);
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.h, av.w), (bv.h, bv.w), "concat spatial mismatch");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(&av.data);
        data.extend_from_slice(&bv.data);
        let out = Tensor::from_vec(av.c + bv.c, av.h, av.w, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Concat(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.c, xv.h, xv.w, xv.data.iter().map(|&v| f(v)).collect());
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Softmax across channels at every spatial position.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let plane = xv.plane();
        let mut out = Tensor::zeros(xv.c, xv.h, xv.w);
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for c in 0..xv.c {
                m = m.max(xv.data[c * plane + p]);
            }
            let mut s = 0.0;
            for c in 0..xv.c {
                let e = (xv.data[c * plane + p] - m).exp();
                out.data[c * plane + p] = e;
                s += e;
            }
            for c in 0..xv.c {
                out.data[c * plane + p] /= s;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Mean absolute difference to a fixed target of the same length.
    pub fn l1_target(&mut self, x: Var, target: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len());
        let m = xv.data.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::L1Target(x, target), ng)
    }

    /// `1 - mean_c dice_c` between channel probabilities and a one-hot target.
    pub fn soft_dice(&mut self, x: Var, target: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len());
        let plane = xv.plane();
        let mut acc = 0.0;
        for c in 0..xv.c {
            let (n, d) = dice_parts(&xv.data[c * plane..(c + 1) * plane], &target[c * plane..(c + 1) * plane]);
            acc += n / d;
        }
        let loss = 1.0 - acc / xv.c as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(loss), Op::SoftDice(x, target), ng)
    }

    /// Mean of `(x - c)^2`.
    pub fn squared_to_const(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().map(|v| (v - c) * (v - c)).sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::SquaredToConst(x, c), ng)
    }

    /// Mean absolute difference between two nodes of equal shape.
    pub fn l1_pair(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let m = av.data.iter().zip(&bv.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(m), Op::L1Pair(a, b), ng)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        let mut ng = false;
        for &(v, wt) in terms {
            s += wt * self.value(v).item();
            ng |= self.ng(v);
        }
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: BTreeMap<usize, Vec<f64>> =
            self.slot_lens.iter().map(|(&s, &n)| (s, vec![0.0; n])).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param { slot, offset } => {
                    let buf = params.get_mut(slot).expect("registered slot");
                    for (d, v) in buf[*offset..*offset + g.len()].iter_mut().zip(&g.data) {
                        *d += v;
                    }
                }
                Op::Conv { x, w, b, geom, cols } => {
                    let plane = geom.out_h() * geom.out_w();
                    let cout = g.c;
                    let rows = geom.rows();
                    if self.ng(*w) {
                        let mut dw = Tensor::zeros(cout, rows, 1);
                        gemm(false, true, cout, rows, plane, 1.0, &g.data, cols, 0.0, &mut dw.data);
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.ng(*b) {
                        let db: Vec<f64> = g.data.chunks(plane).map(|c| c.iter().sum()).collect();
                        accumulate(&mut grads, *b, Tensor::from_vec(cout, 1, 1, db));
                    }
                    if self.ng(*x) {
                        let mut dcols = vec![0.0; rows * plane];
                        let wv = &self.value(*w).data;
                        gemm(true, false, rows, plane, cout, 1.0, wv, &g.data, 0.0, &mut dcols);
                        let mut dx = Tensor::zeros(geom.cin, geom.h, geom.w);
                        col2im(&dcols, geom, &mut dx.data);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::AvgPool2(x) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.c, xv.h, xv.w);
                    for c in 0..xv.c {
                        for y in 0..xv.h {
                            for xx in 0..xv.w {
                                dx.data[(c * xv.h + y) * xv.w + xx] = 0.25 * g.at(c, y / 2, xx / 2);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.c, xv.h, xv.w);
                    for c in 0..g.c {
                        for y in 0..g.h {
                            for xx in 0..g.w {
                                dx.data[(c * xv.h + y / 2) * xv.w + xx / 2] += g.at(c, y, xx);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(a, b) => {
                    let av = self.value(*a);
                    let split = av.len();
                    if self.ng(*a) {
                        let t = Tensor::from_vec(av.c, av.h, av.w, g.data[..split].to_vec());
                        accumulate(&mut grads, *a, t);
                    }
                    if self.ng(*b) {
                        let bv = self.value(*b);
                        let t = Tensor::from_vec(bv.c, bv.h, bv.w, g.data[split..].to_vec());
                        accumulate(&mut grads, *b, t);
                    }
                }
                Op::Add(a, b) => {
                    match (self.ng(*a), self.ng(*b)) {
                        (true, true) => {
                            accumulate(&mut grads, *a, g.clone());
                            accumulate(&mut grads, *b, g);
                        }
                        (true, false) => accumulate(&mut grads, *a, g),
                        (false, true) => accumulate(&mut grads, *b, g),
                        (false, false) => {}
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let d = zip_map(&g, xv, |gv, v| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::LeakyRelu(x, slope) => {
                    let d = zip_map(&g, self.value(*x), |gv, v| if v > 0.0 { gv } else { slope * gv });
                    accumulate(&mut grads, *x, d);
                }
                Op::Affine(x, scale) => {
                    let d = zip_map(&g, self.value(*x), |gv, _| scale * gv);
                    accumulate(&mut grads, *x, d);
                }
                Op::Clamp(x, lo, hi) => {
                    let d = zip_map(&g, self.value(*x), |gv, v| if v >= *lo && v <= *hi { gv } else { 0.0 });
                    accumulate(&mut grads, *x, d);
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let plane = p.plane();
                    let mut dx = Tensor::zeros(p.c, p.h, p.w);
                    for q in 0..plane {
                        let mut dot = 0.0;
                        for c in 0..p.c {
                            dot += g.data[c * plane + q] * p.data[c * plane + q];
                        }
                        for c in 0..p.c {
                            let k = c * plane + q;
                            dx.data[k] = p.data[k] * (g.data[k] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let s = g.item() / xv.len() as f64;
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.c, xv.h, xv.w, vec![s; xv.len()]));
                }
                Op::L1Target(x, t) => {
                    let xv = self.value(*x);
                    let s = g.item() / xv.len() as f64;
                    let d = xv.data.iter().zip(t.iter()).map(|(a, b)| s * sign(a - b)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.c, xv.h, xv.w, d));
                }
                Op::SoftDice(x, t) => {
                    let xv = self.value(*x);
                    let plane = xv.plane();
                    let mut dx = Tensor::zeros(xv.c, xv.h, xv.w);
                    let scale = -g.item() / xv.c as f64;
                    for c in 0..xv.c {
                        let r = c * plane..(c + 1) * plane;
                        let (n, d) = dice_parts(&xv.data[r.clone()], &t[r.clone()]);
                        for k in r {
                            dx.data[k] = scale * (2.0 * t[k] * d - n) / (d * d);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SquaredToConst(x, c) => {
                    let xv = self.value(*x);
                    let s = 2.0 * g.item() / xv.len() as f64;
                    let d = xv.data.iter().map(|v| s * (v - c)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.c, xv.h, xv.w, d));
                }
                Op::L1Pair(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let s = g.item() / av.len() as f64;
                    let d: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| s * sign(x - y)).collect();
                    if self.ng(*b) {
                        let neg = d.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *b, Tensor::from_vec(bv.c, bv.h, bv.w, neg));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, Tensor::from_vec(av.c, av.h, av.w, d));
                    }
                }
                Op::WeightedSum(terms) => {
                    let gv = g.item();
                    for &(v, wt) in terms {
                        if self.ng(v) {
                            accumulate(&mut grads, v, Tensor::scalar(wt * gv));
                        }
                    }
                }
            }
        }
        Gradients { nodes: grads, params }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data.iter().zip(&x.data).map(|(&gv, &v)| f(gv, v)).collect();
    Tensor::from_vec(x.c, x.h, x.w, data)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) const DICE_EPS: f64 = 1e-6;

fn dice_parts(p: &[f64], t: &[f64]) -> (f64, f64) {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let st: f64 = t.iter().sum();
    (2.0 * inter + DICE_EPS, sp + st + DICE_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det_tensor(c: usize, h: usize, w: usize, seed: f64) -> Tensor {
        let data = (0..c * h * w).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        Tensor::from_vec(c, h, w, data)
    }

    /// Central-difference check of d(loss)/d(input) along a fixed direction.
    fn check_input_grad(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss);
        let g = grads.wrt(xv).expect("input grad");
        let dir = det_tensor(x.c, x.h, x.w, 0.731);
        let analytic: f64 = g.data.iter().zip(&dir.data).map(|(a, b)| a * b).sum();
        let eps = 1e-5;
        let eval = |s: f64| {
            let mut t = Tape::new();
            let mut xp = x.clone();
            for (a, d) in xp.data.iter_mut().zip(&dir.data) {
                *a += s * d;
            }
            let v = t.input(xp);
            let l = build(&mut t, v);
            t.value(l).item()
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-6, "analytic {analytic} numeric {numeric} rel {rel}");
    }

    #[test]
    fn elementwise_and_pooling_grads() {
        let x = det_tensor(2, 4, 6, 0.37);
        check_input_grad(
            |t, v| {
                let a = t.silu(v);
                let b = t.avg_pool2(a);
                let c = t.upsample2(b);
                let d = t.concat(c, v);
                let e = t.affine(d, 1.7, -0.2);
                t.squared_to_const(e, 0.3)
            },
            x,
        );
    }

    #[test]
    fn softmax_and_target_losses_grads() {
        let x = det_tensor(3, 4, 4, 0.53);
        let onehot: Vec<f64> = (0..48).map(|i| if (i / 16) == (i % 3) { 1.0 } else { 0.0 }).collect();
        let onehot = Rc::new(onehot);
        let t1 = onehot.clone();
        check_input_grad(
            move |t, v| {
                let p = t.softmax_channels(v);
                let l1 = t.l1_target(p, t1.clone());
                let d = t.soft_dice(p, t1.clone());
                t.weighted_sum(&[(l1, 0.7), (d, 1.3)])
            },
            x,
        );
    }

    #[test]
    fn conv_grads_wrt_input_and_weights() {
        let p = ConvParams { cin: 2, cout: 3, k: 3, w_off: 0, b_off: 54 };
        let params: Vec<f64> = (0..57).map(|i| ((i as f64) * 0.41).cos() * 0.3).collect();
        let x = det_tensor(2, 6, 5, 0.29);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let pp = params.clone();
            check_input_grad(
                move |t, v| {
                    let y = t.conv(v, Binding::frozen(&pp), &p, stride, pad);
                    let z = t.leaky_relu(y, 0.2);
                    t.squared_to_const(z, -0.1)
                },
                x.clone(),
            );
        }
        // weights via slot
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.conv(xv, Binding::trainable(0, &params), &p, 2, 1);
        let l = tape.squared_to_const(y, 0.5);
        let grads = tape.backward(l);
        let g = grads.slot(0).unwrap().to_vec();
        let eps = 1e-6;
        for idx in [0usize, 13, 53, 55] {
            let f = |s: f64| {
                let mut pp = params.clone();
                pp[idx] += s;
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let y = t.conv(xv, Binding::frozen(&pp), &p, 2, 1);
                let l = t.squared_to_const(y, 0.5);
                t.value(l).item()
            };
            let num = (f(eps) - f(-eps)) / (2.0 * eps);
            assert!((num - g[idx]).abs() < 1e-7, "param {idx}: {num} vs {}", g[idx]);
        }
    }

    #[test]
    fn frozen_binding_produces_no_slot() {
        let p = ConvParams { cin: 1, cout: 1, k: 1, w_off: 0, b_off: 1 };
        let params = vec![2.0, 0.5];
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 1, 2, vec![1.0, -1.0]));
        let y = tape.conv(x, Binding::frozen(&params), &p, 1, 0);
        let l = tape.mean(y);
        let g = tape.backward(l);
        assert!(g.slot(0).is_none());
        assert_eq!(g.wrt(x).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]));
        let d = tape.detach(x);
        let s = tape.add(x, d);
        let l = tape.mean(s);
        let g = tape.backward(l);
        assert_eq!(g.wrt(x).unwrap().data, vec![0.5, 0.5]);
    }
}
