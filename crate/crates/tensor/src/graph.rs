//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so backpropagation is a single reverse sweep. Nodes whose
//! inputs never require gradients are skipped entirely, which is what makes
//! frozen sub-networks cheap to differentiate *through*: no weight gradients
//! and no cached im2col buffers are produced for them.

use crate::error::{Result, TensorError};
use crate::kernels::{col2im, gemm, im2col, logistic, maxpool2, upsample2};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward value is computed outside the graph.
///
/// Implementors cache whatever they need for the adjoint when they are
/// constructed; [`Graph::custom`] stores the op alongside the precomputed output.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` where `needs[i]` is false).
    fn backward(&self, inputs: &[&[f32]], output: &[f32], grad_output: &[f32], needs: &[bool])
        -> Vec<Option<Vec<f32>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        k: usize,
        cols: Vec<f32>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Logistic(Var),
    Ln(Var),
    Recip(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MulConst(Var, Vec<f32>),
    Sum(Var),
    Mean(Var),
    WeightedRowSum(Var, Vec<f32>),
    SelectColumn(Var, usize),
    ConcatChannels(Vec<Var>),
    BroadcastSpatial(Var),
    Bce {
        pred: Var,
        target: Vec<f32>,
    },
    SquaredError {
        pred: Var,
        target: Vec<f32>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

const BCE_EPS: f32 = 1e-7;

/// A single-use computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contrib: &[f32]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b += c),
        None => *slot = Some(contrib.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backpropagated loss w.r.t. `v`, if `v` needed one.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<Var> {
        if shape.contains(&0) || numel(&shape) != data.len() {
            return Err(mismatch("leaf", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    /// Free variable that receives a gradient.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        self.leaf(shape, data, true)
    }

    /// Copies a parameter tensor in; gradient tracking follows `requires_grad`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Stride-1 convolution with zero "same" padding.
    /// `input: [N, C, H, W]`, `weight: [O, C, k, k]` (k odd), `bias: [O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(mismatch("conv2d bias", &ws, self.shape(bias)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (hw, ckk) = (h * w, c * k * k);
        let keep_cols = self.needs(weight);
        let mut cols = vec![0.0f32; if keep_cols { n * ckk * hw } else { ckk * hw }];
        let mut out = vec![0.0f32; n * o * hw];
        {
            let x = &self.node(input).value;
            let wv = &self.node(weight).value;
            let bv = &self.node(bias).value;
            for s in 0..n {
                let col = if keep_cols {
                    &mut cols[s * ckk * hw..(s + 1) * ckk * hw]
                } else {
                    &mut cols[..]
                };
                im2col(&x[s * c * hw..(s + 1) * c * hw], c, h, w, k, col);
                let out_s = &mut out[s * o * hw..(s + 1) * o * hw];
                for (oc, row) in out_s.chunks_mut(hw).enumerate() {
                    row.fill(bv[oc]);
                }
                gemm(o, ckk, hw, wv, (ckk, 1), col, (hw, 1), 1.0, out_s);
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![n, o, h, w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
                cols,
            },
            needs,
        ))
    }

    /// 2×2 max pooling, stride 2, over `[N, C, H, W]`.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(mismatch("maxpool2d", &xs, &[2, 2]));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; n * c * (h / 2) * (w / 2)];
        let argmax = maxpool2(&self.node(input).value, n * c, h, w, &mut out);
        let needs = self.needs(input);
        Ok(self.push(vec![n, c, h / 2, w / 2], out, Op::MaxPool2 { input, argmax }, needs))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2d(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("upsample2d", &xs, &[4]));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; n * c * 4 * h * w];
        upsample2(&self.node(input).value, n * c, h, w, &mut out);
        let needs = self.needs(input);
        Ok(self.push(vec![n, c, 2 * h, 2 * w], out, Op::Upsample2(input), needs))
    }

    /// `y = x·Wᵀ + b` with `x: [N, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(mismatch("dense", &xs, &ws));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(mismatch("dense bias", &ws, self.shape(bias)));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * dout];
        {
            let bv = &self.node(bias).value;
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
            gemm(
                n,
                din,
                dout,
                &self.node(input).value,
                (din, 1),
                &self.node(weight).value,
                (1, din),
                1.0,
                &mut out,
            );
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(vec![n, dout], out, Op::Dense { input, weight, bias }, needs))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let shape = self.shape(input).to_vec();
        let out = self.node(input).value.iter().map(|&x| f(x)).collect();
        let needs = self.needs(input);
        self.push(shape, out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        self.unary(x, logistic, Op::Logistic(x))
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Ln(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.node(x).value.len() {
            return Err(mismatch("reshape", self.shape(x), &shape));
        }
        let value = self.node(x).value.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, value, Op::Reshape(x), needs))
    }

    /// Collapses all but the leading (batch) dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = numel(&s[1..]);
        self.reshape(x, vec![n, rest])
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with a constant array of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f32>) -> Result<Var> {
        if c.len() != self.node(x).value.len() {
            return Err(mismatch("mul_const", self.shape(x), &[c.len()]));
        }
        let out = self.node(x).value.iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::MulConst(x, c), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.node(x).value.iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.node(x).value;
        let m = v.iter().sum::<f32>() / v.len() as f32;
        let needs = self.needs(x);
        self.push(vec![1], vec![m], Op::Mean(x), needs)
    }

    /// Per-sample dot product with constant weights: `[N, ...] -> [N, 1]`.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        let v = &self.node(x).value;
        if weights.len() != v.len() {
            return Err(mismatch("weighted_row_sum", self.shape(x), &[weights.len()]));
        }
        let n = self.shape(x)[0];
        let per = v.len() / n;
        let out = v
            .chunks(per)
            .zip(weights.chunks(per))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
            .collect();
        let needs = self.needs(x);
        Ok(self.push(vec![n, 1], out, Op::WeightedRowSum(x, weights), needs))
    }

    /// Picks column `col` of a `[N, K]` matrix as `[N, 1]`.
    pub fn select_column(&mut self, x: Var, col: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || col >= s[1] {
            return Err(mismatch("select_column", &s, &[col]));
        }
        let out = self.node(x).value.chunks(s[1]).map(|r| r[col]).collect();
        let needs = self.needs(x);
        Ok(self.push(vec![s[0], 1], out, Op::SelectColumn(x, col), needs))
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(mismatch("concat_channels", &first, &[4]));
        }
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(mismatch("concat_channels", &first, s));
            }
            total_c += s[1];
        }
        let (n, hw) = (first[0], first[2] * first[3]);
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.node(p).value[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![n, total_c, first[2], first[3]],
            out,
            Op::ConcatChannels(parts.to_vec()),
            needs,
        ))
    }

    /// Broadcasts `[N, C]` to `[N, C, h, w]`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || h == 0 || w == 0 {
            return Err(mismatch("broadcast_spatial", &s, &[h, w]));
        }
        let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
        for &v in &self.node(x).value {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let needs = self.needs(x);
        Ok(self.push(vec![s[0], s[1], h, w], out, Op::BroadcastSpatial(x), needs))
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`.
    pub fn bce(&mut self, pred: Var, target: Vec<f32>) -> Result<Var> {
        let p = &self.node(pred).value;
        if target.len() != p.len() {
            return Err(mismatch("bce", self.shape(pred), &[target.len()]));
        }
        let total: f64 = p
            .iter()
            .zip(&target)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
                let t = t as f64;
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let loss = (total / p.len() as f64) as f32;
        let needs = self.needs(pred);
        Ok(self.push(vec![1], vec![loss], Op::Bce { pred, target }, needs))
    }

    /// Mean squared error of `pred` against `target`.
    pub fn squared_error(&mut self, pred: Var, target: Vec<f32>) -> Result<Var> {
        let p = &self.node(pred).value;
        if target.len() != p.len() {
            return Err(mismatch("squared_error", self.shape(pred), &[target.len()]));
        }
        let total: f32 = p.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
        let loss = total / p.len() as f32;
        let needs = self.needs(pred);
        Ok(self.push(vec![1], vec![loss], Op::SquaredError { pred, target }, needs))
    }

    /// Inserts an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], shape: Vec<usize>, value: Vec<f32>, op: Box<dyn CustomOp>) -> Result<Var> {
        if numel(&shape) != value.len() || shape.contains(&0) {
            return Err(mismatch(op.name(), &shape, &[value.len()]));
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        ))
    }

    /// Backpropagates from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::GraphReused);
        }
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::NotScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
                cols,
            } => {
                let xs = &nodes[input.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let o = node.shape[1];
                let (hw, ckk) = (h * w, c * k * k);
                if needs(bias) {
                    let mut db = vec![0.0f32; o];
                    for s in 0..n {
                        for (oc, row) in g[s * o * hw..(s + 1) * o * hw].chunks(hw).enumerate() {
                            db[oc] += row.iter().sum::<f32>();
                        }
                    }
                    accumulate_owned(&mut grads[bias.0], db);
                }
                if needs(weight) {
                    let mut dw = vec![0.0f32; o * ckk];
                    for s in 0..n {
                        gemm(
                            o,
                            hw,
                            ckk,
                            &g[s * o * hw..],
                            (hw, 1),
                            &cols[s * ckk * hw..],
                            (1, hw),
                            1.0,
                            &mut dw,
                        );
                    }
                    accumulate_owned(&mut grads[weight.0], dw);
                }
                if needs(input) {
                    let wv = &nodes[weight.0].value;
                    let mut dcols = vec![0.0f32; ckk * hw];
                    let mut dx = vec![0.0f32; n * c * hw];
                    for s in 0..n {
                        gemm(ckk, o, hw, wv, (1, ckk), &g[s * o * hw..], (hw, 1), 0.0, &mut dcols);
                        col2im(&dcols, c, h, w, *k, &mut dx[s * c * hw..(s + 1) * c * hw]);
                    }
                    accumulate_owned(&mut grads[input.0], dx);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0f32; nodes[input.0].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src as usize] += gv;
                }
                accumulate_owned(&mut grads[input.0], dx);
            }
            Op::Upsample2(input) => {
                let xs = &nodes[input.0].shape;
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let ow = 2 * w;
                let mut dx = vec![0.0f32; planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        let src = &g[(p * 2 * h + y) * ow..(p * 2 * h + y + 1) * ow];
                        let dst = &mut dx[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                        for (x, gv) in src.iter().enumerate() {
                            dst[x / 2] += gv;
                        }
                    }
                }
                accumulate_owned(&mut grads[input.0], dx);
            }
            Op::Dense { input, weight, bias } => {
                let xs = &nodes[input.0].shape;
                let (n, din) = (xs[0], xs[1]);
                let dout = node.shape[1];
                if needs(bias) {
                    let mut db = vec![0.0f32; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate_owned(&mut grads[bias.0], db);
                }
                if needs(weight) {
                    let mut dw = vec![0.0f32; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        g,
                        (1, dout),
                        &nodes[input.0].value,
                        (din, 1),
                        0.0,
                        &mut dw,
                    );
                    accumulate_owned(&mut grads[weight.0], dw);
                }
                if needs(input) {
                    let mut dx = vec![0.0f32; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        g,
                        (dout, 1),
                        &nodes[weight.0].value,
                        (din, 1),
                        0.0,
                        &mut dx,
                    );
                    accumulate_owned(&mut grads[input.0], dx);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Logistic(x) => {
                let dx = node.value.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Ln(x) => {
                let dx = nodes[x.0].value.iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Recip(x) => {
                let dx = node.value.iter().zip(g).map(|(&y, &gv)| -gv * y * y).collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Reshape(x) | Op::AddScalar(x) => accumulate(&mut grads[x.0], g),
            Op::Scale(x, s) => {
                let dx = g.iter().map(|v| v * s).collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let da = nodes[b.0].value.iter().zip(g).map(|(v, gv)| v * gv).collect();
                    accumulate_owned(&mut grads[a.0], da);
                }
                if needs(b) {
                    let db = nodes[a.0].value.iter().zip(g).map(|(v, gv)| v * gv).collect();
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::MulConst(x, c) => {
                let dx = c.iter().zip(g).map(|(v, gv)| v * gv).collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; nodes[x.0].value.len()];
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Mean(x) => {
                let len = nodes[x.0].value.len();
                accumulate_owned(&mut grads[x.0], vec![g[0] / len as f32; len]);
            }
            Op::WeightedRowSum(x, wts) => {
                let n = node.shape[0];
                let per = wts.len() / n;
                let dx = wts
                    .chunks(per)
                    .zip(g)
                    .flat_map(|(row, &gv)| row.iter().map(move |w| w * gv))
                    .collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::SelectColumn(x, col) => {
                let k = nodes[x.0].shape[1];
                let mut dx = vec![0.0f32; nodes[x.0].value.len()];
                for (r, gv) in g.iter().enumerate() {
                    dx[r * k + col] = *gv;
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::ConcatChannels(parts) => {
                let (n, hw) = (node.shape[0], node.shape[2] * node.shape[3]);
                let total_c = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].shape[1];
                    if needs(p) {
                        let mut dx = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            dx.extend_from_slice(&g[start..start + c * hw]);
                        }
                        accumulate_owned(&mut grads[p.0], dx);
                    }
                    offset += c;
                }
            }
            Op::BroadcastSpatial(x) => {
                let hw = node.shape[2] * node.shape[3];
                let dx = g.chunks(hw).map(|c| c.iter().sum()).collect();
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Bce { pred, target } => {
                let p = &nodes[pred.0].value;
                let scale = g[0] / p.len() as f32;
                let dx = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        scale * (p - t) / (p * (1.0 - p))
                    })
                    .collect();
                accumulate_owned(&mut grads[pred.0], dx);
            }
            Op::SquaredError { pred, target } => {
                let p = &nodes[pred.0].value;
                let scale = 2.0 * g[0] / p.len() as f32;
                let dx = p.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                accumulate_owned(&mut grads[pred.0], dx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&[f32]> = inputs.iter().map(|v| nodes[v.0].value.as_slice()).collect();
                let flags: Vec<bool> = inputs.iter().map(needs).collect();
                let out = op.backward(&values, &node.value, g, &flags);
                for ((v, flag), dg) in inputs.iter().zip(&flags).zip(out) {
                    if let (true, Some(dg)) = (flag, dg) {
                        accumulate_owned(&mut grads[v.0], dg);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_zero_image_is_bias() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 2, 5, 5], vec![0.0; 50]).unwrap();
        let w = g
            .variable(vec![3, 2, 3, 3], (0..54).map(|i| i as f32 * 0.1).collect())
            .unwrap();
        let b = g.variable(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 5, 5]);
        for (c, plane) in g.value(y).chunks(25).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn maxpool_picks_maximum() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[4.0]);
    }

    #[test]
    fn dense_with_identity_selects_row() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let w = g
            .input(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = g.input(vec![3], vec![0.0; 3]).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), &[0.0, 1.0, 0.0]);

        // a non-identity matrix: input basis vector e_j selects column j of W (row j of Wᵀ)
        let mut g = Graph::new();
        let x = g.input(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let w = g.input(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = g.input(vec![3], vec![0.0; 3]).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mean_of_square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(vec![1], vec![3.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.variable(vec![2], vec![1.0, 2.0]).unwrap();
        let y = g.scale(x, 2.0);
        assert_eq!(g.backward(y), Err(TensorError::NotScalarLoss(vec![2])));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::GraphReused));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.input(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = g.input(vec![4], vec![0.0; 4]).unwrap();
        match g.add(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 2]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(vec![1, 1, 4, 4], vec![1.0; 16]).unwrap();
        let w = g.input(vec![1, 1, 3, 3], vec![0.5; 9]).unwrap();
        let b = g.input(vec![1], vec![0.0]).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(b).is_none());
        // corner input pixel feeds 4 outputs, centre pixels feed 9
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[0], 2.0);
        assert_eq!(gx[5], 4.5);
    }
}
