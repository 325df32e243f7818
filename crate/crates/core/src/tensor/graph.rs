//! Operation tape with reverse-mode accumulation.
//!
//! Each method on [`Graph`] computes its forward value eagerly and records
//! the operation. [`Graph::backward`] walks the tape from the output back to
//! the leaves, applying the analytic adjoint of every recorded op.

use std::collections::HashMap;

use super::{dropout_mask, ParamStore, SeededRng, Tensor};
use crate::error::{Error, Result};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` inside the losses.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Row(NodeId, usize),
    Reshape(NodeId),
    MeanCols(NodeId),
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    AvgPool2(NodeId),
    GaussFit { alpha: NodeId, w: usize, floor: f64 },
    GaussLogits { fit: NodeId, h: usize, w: usize },
    CrossEntropy { logits: NodeId, target: usize },
    BceMean { logits: NodeId, target: Vec<f64> },
    Sum(Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_logit(x: f64) -> (f64, bool) {
    if x.abs() <= LOGIT_CLAMP {
        (x, true)
    } else {
        (x.signum() * LOGIT_CLAMP, false)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Binds a stored parameter. Trainable parameters get their gradient
    /// reported by [`Gradients::write_to`]; frozen ones act as constants.
    /// Repeated binds of one name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_index.get(name) {
            return Ok(id);
        }
        let slot = store.slot(name)?;
        let id = self.push(slot.value.clone(), Op::Leaf);
        if slot.trainable {
            self.params.push((name.to_string(), id));
        }
        self.param_index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a[m, n] + b[m]`, broadcasting `b` across columns.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape() != [va.shape()[0]] {
            return Err(mismatch("add_bias", va, vb));
        }
        let n = va.shape()[1];
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x + vb.data()[k / n])
            .collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(a, b)))
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        let (vs, vx) = (self.value(s), self.value(x));
        if vs.len() != 1 {
            return Err(mismatch("scale", vs, vx));
        }
        let k = vs.item();
        let data = vx.data().iter().map(|v| k * v).collect();
        let out = Tensor::from_vec(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Scale(s, x)))
    }

    pub fn scale_const(&mut self, x: NodeId, k: f64) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| k * v).collect();
        let out = Tensor::from_vec(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::ScaleConst(x, k))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(mismatch("matmul", va, vb));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va.data()[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &vb.data()[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let out = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `w[m, n] · x[n]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.shape().len() != 2 || vx.shape() != [vw.shape()[1]] {
            return Err(mismatch("matvec", vw, vx));
        }
        let (m, n) = (vw.shape()[0], vw.shape()[1]);
        let data = (0..m)
            .map(|i| {
                vw.data()[i * n..(i + 1) * n]
                    .iter()
                    .zip(vx.data())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(self.push(Tensor::vector(data), Op::MatVec(w, x)))
    }

    /// `w · x + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::from_vec(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::from_vec(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Sigmoid(x))
    }

    /// Max-shifted softmax over every entry of `x`.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        softmax_in_place(out.data_mut());
        self.push(out, Op::Softmax(x))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: v.shape().to_vec(),
                    right: vec![],
                });
            }
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 1 || start + len > vx.len() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: vx.shape().to_vec(),
                right: vec![start, start + len],
            });
        }
        let out = Tensor::vector(vx.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice(x, start)))
    }

    /// Row `i` of a 2-D table (embedding lookup).
    pub fn row(&mut self, table: NodeId, i: usize) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row",
                left: vt.shape().to_vec(),
                right: vec![i],
            });
        }
        if i >= vt.shape()[0] {
            return Err(Error::IndexOutOfRange {
                what: "table row",
                index: i,
                len: vt.shape()[0],
            });
        }
        let out = Tensor::vector(vt.row(i).to_vec());
        Ok(self.push(out, Op::Row(table, i)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Mean over the columns of `x[m, n]`, giving `[m]`.
    pub fn mean_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || vx.shape()[1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_cols",
                left: vx.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        let data = (0..m)
            .map(|i| vx.data()[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        Ok(self.push(Tensor::vector(data), Op::MeanCols(x)))
    }

    /// Same-padded 3×3 convolution: `x[ci, h, w]`, `w[co, ci, 3, 3]`, `b[co]`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let ok = vx.shape().len() == 3
            && vw.shape().len() == 4
            && vw.shape()[1] == vx.shape()[0]
            && vw.shape()[2..] == [3, 3]
            && vb.shape() == [vw.shape()[0]];
        if !ok {
            return Err(mismatch("conv3x3", vx, vw));
        }
        let (ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let co = vw.shape()[0];
        let mut out = vec![0.0; co * h * wd];
        for o in 0..co {
            let bias = vb.data()[o];
            for r in 0..h {
                for c in 0..wd {
                    let mut acc = bias;
                    for i in 0..ci {
                        for kr in 0..3 {
                            let rr = r + kr;
                            if rr < 1 || rr > h {
                                continue;
                            }
                            for kc in 0..3 {
                                let cc = c + kc;
                                if cc < 1 || cc > wd {
                                    continue;
                                }
                                acc += vw.data()[((o * ci + i) * 3 + kr) * 3 + kc]
                                    * vx.data()[(i * h + rr - 1) * wd + cc - 1];
                            }
                        }
                    }
                    out[(o * h + r) * wd + c] = acc;
                }
            }
        }
        let out = Tensor::from_vec(vec![co, h, wd], out)?;
        Ok(self.push(out, Op::Conv3x3 { x, w, b }))
    }

    /// 2×2 average pooling with stride 2 over `x[c, h, w]`; odd edges dropped.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 3 || vx.shape()[1] < 2 || vx.shape()[2] < 2 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                left: vx.shape().to_vec(),
                right: vec![],
            });
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for q in 0..ow {
                    let at = |dr: usize, dq: usize| vx.data()[(ch * h + 2 * r + dr) * w + 2 * q + dq];
                    out[(ch * oh + r) * ow + q] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let out = Tensor::from_vec(vec![c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    /// Moment-matched diagonal Gaussian of a distribution over an `h × w`
    /// grid (row-major). Returns `[mu_row, mu_col, var_row, var_col]`, each
    /// variance floored at `floor`.
    pub fn gauss_fit(&mut self, alpha: NodeId, h: usize, w: usize, floor: f64) -> Result<NodeId> {
        let va = self.value(alpha);
        if va.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "gauss_fit",
                left: va.shape().to_vec(),
                right: vec![h, w],
            });
        }
        let (mut mr, mut mc, mut sr, mut sc) = (0.0, 0.0, 0.0, 0.0);
        for (k, &a) in va.data().iter().enumerate() {
            let (r, c) = ((k / w) as f64, (k % w) as f64);
            mr += a * r;
            mc += a * c;
            sr += a * r * r;
            sc += a * c * c;
        }
        let vr = (sr - mr * mr).max(floor);
        let vc = (sc - mc * mc).max(floor);
        let out = Tensor::vector(vec![mr, mc, vr, vc]);
        Ok(self.push(out, Op::GaussFit { alpha, w, floor }))
    }

    /// Unnormalised log-density `-(Δr²/var_r + Δc²/var_c)/2` at each grid cell.
    pub fn gauss_logits(&mut self, fit: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let vf = self.value(fit);
        if vf.shape() != [4] {
            return Err(Error::ShapeMismatch {
                op: "gauss_logits",
                left: vf.shape().to_vec(),
                right: vec![4],
            });
        }
        let [mr, mc, vr, vc] = [vf.data()[0], vf.data()[1], vf.data()[2], vf.data()[3]];
        let data = (0..h * w)
            .map(|k| {
                let (dr, dc) = ((k / w) as f64 - mr, (k % w) as f64 - mc);
                -0.5 * (dr * dr / vr + dc * dc / vc)
            })
            .collect();
        Ok(self.push(Tensor::vector(data), Op::GaussLogits { fit, h, w }))
    }

    /// `-ln softmax(clamp(logits))[target]`, as a one-element tensor.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let vl = self.value(logits);
        if target >= vl.len() {
            return Err(Error::IndexOutOfRange {
                what: "cross-entropy target",
                index: target,
                len: vl.len(),
            });
        }
        let z: Vec<f64> = vl.data().iter().map(|&x| clamp_logit(x).0).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = Tensor::scalar(lse - z[target]);
        Ok(self.push(out, Op::CrossEntropy { logits, target }))
    }

    /// Mean over entries of the logit-form binary cross-entropy
    /// `max(z,0) - z·y + ln(1 + e^{-|z|})` with `z` clamped.
    pub fn bce_mean(&mut self, logits: NodeId, target: &[f64]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.len() != target.len() || target.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "bce_mean",
                left: vl.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let sum: f64 = vl
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &y)| {
                let z = clamp_logit(x).0;
                softplus(z) - z * y
            })
            .sum();
        let out = Tensor::scalar(sum / target.len() as f64);
        Ok(self.push(
            out,
            Op::BceMean {
                logits,
                target: target.to_vec(),
            },
        ))
    }

    /// Sum of one-element tensors.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut total = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "sum",
                    left: v.shape().to_vec(),
                    right: vec![1],
                });
            }
            total += v.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::Sum(parts.to_vec())))
    }

    /// Inverted dropout. Identity (no new node) in eval mode or at rate 0.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<(NodeId, Option<Tensor>)> {
        if !training || rate <= 0.0 {
            return Ok((x, None));
        }
        let mask = dropout_mask(self.value(x).len(), rate, rng).reshape(self.value(x).shape())?;
        let m = self.constant(mask.clone());
        Ok((self.mul(x, m)?, Some(mask)))
    }

    /// One LSTM cell step with gate order (input, forget, cell, output):
    /// `z = Wx·x + Wh·h + b`, `c' = σ(f)⊙c + σ(i)⊙tanh(g)`, `h' = σ(o)⊙tanh(c')`.
    pub fn lstm_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_x: NodeId,
        w_h: NodeId,
        b: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let n = self.value(h).len();
        if self.value(b).len() != 4 * n || self.value(c).len() != n {
            return Err(mismatch("lstm_step", self.value(b), self.value(h)));
        }
        let zx = self.matvec(w_x, x)?;
        let zh = self.matvec(w_h, h)?;
        let z = self.add(zx, zh)?;
        let z = self.add(z, b)?;
        let gi = self.slice(z, 0, n)?;
        let gf = self.slice(z, n, n)?;
        let gg = self.slice(z, 2 * n, n)?;
        let go = self.slice(z, 3 * n, n)?;
        let i = self.sigmoid(gi);
        let f = self.sigmoid(gf);
        let g = self.tanh(gg);
        let o = self.sigmoid(go);
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_new = self.add(fc, ig)?;
        let tc = self.tanh(c_new);
        let h_new = self.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, out: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop(&node.op, &node.value, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop(&self, op: &Op, y: &Tensor, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |id: NodeId, g: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        };
        let like =
            |id: NodeId, data: Vec<f64>| Tensor::from_vec(self.value(id).shape().to_vec(), data).expect("grad shape");
        let d = dy.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, like(*a, d.iter().zip(vb).map(|(g, y)| g * y).collect()));
                acc(*b, like(*b, d.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::AddBias(a, b) => {
                let n = self.value(*a).shape()[1];
                let db = d.chunks(n).map(|row| row.iter().sum()).collect();
                acc(*a, dy.clone());
                acc(*b, Tensor::vector(db));
            }
            Op::Scale(s, x) => {
                let k = self.value(*s).item();
                let vx = self.value(*x).data();
                let ds: f64 = d.iter().zip(vx).map(|(g, x)| g * x).sum();
                acc(*s, like(*s, vec![ds]));
                acc(*x, like(*x, d.iter().map(|g| k * g).collect()));
            }
            Op::ScaleConst(x, k) => acc(*x, like(*x, d.iter().map(|g| k * g).collect())),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = va.data()[i * k + p];
                        let mut s = 0.0;
                        for j in 0..n {
                            let g = d[i * n + j];
                            s += g * vb.data()[p * n + j];
                            db[p * n + j] += a_ip * g;
                        }
                        da[i * k + p] = s;
                    }
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::MatVec(w, x) => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let (m, n) = (vw.shape()[0], vw.shape()[1]);
                let mut dw = vec![0.0; m * n];
                let mut dx = vec![0.0; n];
                for i in 0..m {
                    let g = d[i];
                    let wrow = &vw.data()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dw[i * n + j] = g * vx.data()[j];
                        dx[j] += g * wrow[j];
                    }
                }
                acc(*w, like(*w, dw));
                acc(*x, like(*x, dx));
            }
            Op::Tanh(x) => acc(
                *x,
                like(*x, d.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect()),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                like(*x, d.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect()),
            ),
            Op::Softmax(x) => {
                let dot: f64 = d.iter().zip(y.data()).map(|(g, p)| g * p).sum();
                acc(
                    *x,
                    like(*x, d.iter().zip(y.data()).map(|(g, p)| p * (g - dot)).collect()),
                );
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(*p, like(*p, d[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Slice(x, start) => {
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[*start..*start + d.len()].copy_from_slice(d);
                acc(*x, like(*x, dx));
            }
            Op::Row(table, i) => {
                let vt = self.value(*table);
                let cols = vt.shape()[1];
                let mut dt = vec![0.0; vt.len()];
                dt[i * cols..(i + 1) * cols].copy_from_slice(d);
                acc(*table, like(*table, dt));
            }
            Op::Reshape(x) => acc(*x, like(*x, d.to_vec())),
            Op::MeanCols(x) => {
                let n = self.value(*x).shape()[1];
                let dx = d.iter().flat_map(|g| std::iter::repeat_n(g / n as f64, n)).collect();
                acc(*x, like(*x, dx));
            }
            Op::Conv3x3 { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let co = vw.shape()[0];
                let mut dx = vec![0.0; vx.len()];
                let mut dw = vec![0.0; vw.len()];
                let mut db = vec![0.0; co];
                for o in 0..co {
                    for r in 0..h {
                        for c in 0..wd {
                            let g = d[(o * h + r) * wd + c];
                            if g == 0.0 {
                                continue;
                            }
                            db[o] += g;
                            for i in 0..ci {
                                for kr in 0..3 {
                                    let rr = r + kr;
                                    if rr < 1 || rr > h {
                                        continue;
                                    }
                                    for kc in 0..3 {
                                        let cc = c + kc;
                                        if cc < 1 || cc > wd {
                                            continue;
                                        }
                                        let wi = ((o * ci + i) * 3 + kr) * 3 + kc;
                                        let xi = (i * h + rr - 1) * wd + cc - 1;
                                        dw[wi] += g * vx.data()[xi];
                                        dx[xi] += g * vw.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*x, like(*x, dx));
                acc(*w, like(*w, dw));
                acc(*b, like(*b, db));
            }
            Op::AvgPool2(x) => {
                let vx = self.value(*x);
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; vx.len()];
                for ch in 0..c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let g = 0.25 * d[(ch * oh + r) * ow + q];
                            for dr in 0..2 {
                                for dq in 0..2 {
                                    dx[(ch * h + 2 * r + dr) * w + 2 * q + dq] += g;
                                }
                            }
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::GaussFit { alpha, w, floor } => {
                let va = self.value(*alpha);
                let (mr, mc, vr, vc) = (y.data()[0], y.data()[1], y.data()[2], y.data()[3]);
                // A floored variance is locally constant.
                let gvr = if vr > *floor { d[2] } else { 0.0 };
                let gvc = if vc > *floor { d[3] } else { 0.0 };
                let dx = (0..va.len())
                    .map(|k| {
                        let (r, c) = ((k / w) as f64, (k % w) as f64);
                        d[0] * r + d[1] * c + gvr * (r * r - 2.0 * mr * r) + gvc * (c * c - 2.0 * mc * c)
                    })
                    .collect();
                acc(*alpha, like(*alpha, dx));
            }
            Op::GaussLogits { fit, h, w } => {
                let vf = self.value(*fit).data();
                let (mr, mc, vr, vc) = (vf[0], vf[1], vf[2], vf[3]);
                let mut df = [0.0; 4];
                for (k, g) in d.iter().enumerate().take(h * w) {
                    let (dr, dc) = ((k / w) as f64 - mr, (k % w) as f64 - mc);
                    df[0] += g * dr / vr;
                    df[1] += g * dc / vc;
                    df[2] += g * 0.5 * dr * dr / (vr * vr);
                    df[3] += g * 0.5 * dc * dc / (vc * vc);
                }
                acc(*fit, like(*fit, df.to_vec()));
            }
            Op::CrossEntropy { logits, target } => {
                let vl = self.value(*logits).data();
                let mut p: Vec<f64> = vl.iter().map(|&x| clamp_logit(x).0).collect();
                softmax_in_place(&mut p);
                let g = d[0];
                let dx = vl
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        if !clamp_logit(x).1 {
                            return 0.0;
                        }
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        g * (p[j] - onehot)
                    })
                    .collect();
                acc(*logits, like(*logits, dx));
            }
            Op::BceMean { logits, target } => {
                let vl = self.value(*logits).data();
                let scale = d[0] / target.len() as f64;
                let dx = vl
                    .iter()
                    .zip(target)
                    .map(|(&x, &t)| {
                        let (z, live) = clamp_logit(x);
                        if live {
                            scale * (sigmoid(z) - t)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*logits, like(*logits, dx));
            }
            Op::Sum(parts) => {
                for p in parts {
                    acc(*p, dy.clone());
                }
            }
        }
    }
}

/// Adjoints of every node reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adds `scale ×` each bound parameter's gradient into the store.
    pub fn write_to(&self, graph: &Graph, store: &mut ParamStore, scale: f64) -> Result<()> {
        for (name, id) in &graph.params {
            if let Some(g) = self.get(*id) {
                store.accumulate_grad(name, g, scale)?;
            }
        }
        Ok(())
    }

    /// Bound parameter gradients by name; unreached parameters are omitted.
    pub fn param_grads<'g>(&'g self, graph: &'g Graph) -> impl Iterator<Item = (&'g str, &'g Tensor)> {
        graph
            .params
            .iter()
            .filter_map(move |(name, id)| self.get(*id).map(|g| (name.as_str(), g)))
    }
}
