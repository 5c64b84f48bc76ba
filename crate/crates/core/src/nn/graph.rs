//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass together
//! with whatever the backward rule needs. [`Graph::backward`] walks the tape in
//! reverse, so gradient accumulation order is fixed and results are
//! bit-reproducible.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor, Trans};

const NORM_EPS: f32 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch layout of a `[batch * time, channels]` sequence tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub time: usize,
    /// Valid frames per item; frames at `t >= lens[b]` are padding.
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn single(time: usize) -> Self {
        Self {
            batch: 1,
            time,
            lens: vec![time],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.time
    }

    #[inline]
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.time + t
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: SeqLayout,
        groups: usize,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    Im2Col {
        x: Var,
        layout: SeqLayout,
        kernel: usize,
    },
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Lstm {
        xp: Var,
        whh: Var,
        layout: SeqLayout,
        reverse: bool,
        /// Activated gates `[i f g o]` per row.
        gates: Tensor,
        cells: Tensor,
    },
    Grl(Var, f32),
    StraightThrough(Var),
    MaskedMse {
        pred: Var,
        target: Tensor,
        row_weight: Vec<f32>,
    },
    SliceL1 {
        z: Var,
        pred: Var,
        spans: Vec<RowSpan>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

/// Column range and weight of one row in a [`Graph::slice_l1`] loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowSpan {
    pub start: usize,
    pub end: usize,
    pub weight: f32,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (test inputs, probes).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node holding parameter `id`; created once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .expect("matmul shape mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x + bias` with a `1 x C` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.shape(), (1, xv.cols()), "bias shape");
        let mut out = xv.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, bv.cols());
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), k.shape(), "mul_const shape");
        let out = self.value(x).zip_map(&k, |a, b| a * b);
        let ng = self.ng(x);
        self.push(out, Op::MulConst(x, k), ng)
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).scale(k);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, k), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / cols as f64;
            let is = 1.0 / (var + NORM_EPS as f64).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = ((v as f64 - mean) * is) as f32;
            }
            inv_std.push(is as f32);
        }
        let out = affine_channels(&xhat, self.value(gamma), self.value(beta));
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Group normalization over `(time, channels-in-group)` per batch item,
    /// with statistics taken over valid frames only.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: &SeqLayout,
        groups: usize,
    ) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(rows, layout.rows(), "group_norm layout");
        assert!(groups > 0 && cols % groups == 0, "channels not divisible by groups");
        let cg = cols / groups;
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(layout.batch * groups);
        for b in 0..layout.batch {
            let len = layout.lens[b].max(1);
            for g in 0..groups {
                let cs = g * cg;
                let mut sum = 0.0f64;
                for t in 0..len {
                    sum += xv.row(layout.row(b, t))[cs..cs + cg]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                let n = (len * cg) as f64;
                let mean = sum / n;
                let mut var = 0.0f64;
                for t in 0..len {
                    var += xv.row(layout.row(b, t))[cs..cs + cg]
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                let is = 1.0 / (var / n + NORM_EPS as f64).sqrt();
                for t in 0..layout.time {
                    let r = layout.row(b, t);
                    let src = &xv.row(r)[cs..cs + cg];
                    let dst = &mut xhat.row_mut(r)[cs..cs + cg];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = ((v as f64 - mean) * is) as f32;
                    }
                }
                inv_std.push(is as f32);
            }
        }
        let out = affine_channels(&xhat, self.value(gamma), self.value(beta));
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                layout: layout.clone(),
                groups,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Unfolds `kernel` neighbouring frames (centered, zero outside each
    /// item's valid range) into `[rows, kernel * C]` for convolution by matmul.
    pub fn im2col(&mut self, x: Var, layout: &SeqLayout, kernel: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), layout.rows(), "im2col layout");
        let pad = (kernel - 1) / 2;
        let mut out = Tensor::zeros(xv.rows(), kernel * c);
        for b in 0..layout.batch {
            let len = layout.lens[b];
            for t in 0..layout.time {
                let r = layout.row(b, t);
                let dst = out.row_mut(r);
                for j in 0..kernel {
                    let src_t = t as isize + j as isize - pad as isize;
                    if src_t >= 0 && (src_t as usize) < len {
                        dst[j * c..(j + 1) * c]
                            .copy_from_slice(xv.row(layout.row(b, src_t as usize)));
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::Im2Col {
                x,
                layout: layout.clone(),
                kernel,
            },
            ng,
        )
    }

    /// `out[i] = x[idx[i]]` over rows.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let out = self.value(x).gather_rows(&idx);
        let ng = self.ng(x);
        self.push(out, Op::Gather(x, idx), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&vals).expect("concat rows mismatch");
        let ng = parts.iter().any(|&v| self.ng(v));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_cols(start, end);
        let ng = self.ng(x);
        self.push(out, Op::SliceCols(x, start, end), ng)
    }

    /// Unidirectional LSTM recurrence. `xp` holds the precomputed input
    /// projection plus bias, `[rows, 4H]` with gate order `[i f g o]`;
    /// `whh` is `[H, 4H]`. Zero initial state; padded frames output zero.
    /// With `reverse`, each item runs from its last valid frame backwards.
    pub fn lstm(&mut self, xp: Var, whh: Var, layout: &SeqLayout, reverse: bool) -> Var {
        let xpv = self.value(xp);
        let whv = self.value(whh);
        let h = whv.rows();
        assert_eq!(whv.cols(), 4 * h, "lstm recurrent weight shape");
        assert_eq!(xpv.shape(), (layout.rows(), 4 * h), "lstm projection shape");
        let rows = layout.rows();
        let mut out = Tensor::zeros(rows, h);
        let mut gates = Tensor::zeros(rows, 4 * h);
        let mut cells = Tensor::zeros(rows, h);
        let bsz = layout.batch;
        let mut h_prev = vec![0.0f32; bsz * h];
        let mut c_prev = vec![0.0f32; bsz * h];
        let mut pre = vec![0.0f32; bsz * 4 * h];
        for s in 0..layout.time {
            for b in 0..bsz {
                if let Some(t) = step_time(layout, b, s, reverse) {
                    pre[b * 4 * h..(b + 1) * 4 * h].copy_from_slice(xpv.row(layout.row(b, t)));
                }
            }
            gemm(Trans::No, Trans::No, bsz, h, 4 * h, &h_prev, whv.data(), &mut pre, 1.0);
            for b in 0..bsz {
                let Some(t) = step_time(layout, b, s, reverse) else {
                    continue;
                };
                let r = layout.row(b, t);
                let p = &pre[b * 4 * h..(b + 1) * 4 * h];
                let grow = gates.row_mut(r);
                for j in 0..h {
                    grow[j] = sigmoid(p[j]);
                    grow[h + j] = sigmoid(p[h + j]);
                    grow[2 * h + j] = p[2 * h + j].tanh();
                    grow[3 * h + j] = sigmoid(p[3 * h + j]);
                }
                let grow = gates.row(r).to_vec();
                let crow = cells.row_mut(r);
                for j in 0..h {
                    let c = grow[h + j] * c_prev[b * h + j] + grow[j] * grow[2 * h + j];
                    crow[j] = c;
                    c_prev[b * h + j] = c;
                }
                let orow = out.row_mut(r);
                for j in 0..h {
                    let hv = grow[3 * h + j] * c_prev[b * h + j].tanh();
                    orow[j] = hv;
                    h_prev[b * h + j] = hv;
                }
            }
        }
        let ng = self.ng(xp) || self.ng(whh);
        self.push(
            out,
            Op::Lstm {
                xp,
                whh,
                layout: layout.clone(),
                reverse,
                gates,
                cells,
            },
            ng,
        )
    }

    /// Gradient reversal: identity forward, `-scale * grad` backward.
    pub fn grl(&mut self, x: Var, scale: f32) -> Var {
        let out = self.value(x).clone();
        let ng = self.ng(x);
        self.push(out, Op::Grl(x, scale), ng)
    }

    /// Binarizes at 0.5 (`> 0.5` maps to 1) and passes the gradient through
    /// unchanged.
    pub fn straight_through(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let ng = self.ng(x);
        self.push(out, Op::StraightThrough(x), ng)
    }

    /// `sum_r row_weight[r] * sum_c (pred - target)^2`; rows with weight 0
    /// contribute nothing.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor, row_weight: Vec<f32>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "masked_mse shape");
        assert_eq!(row_weight.len(), pv.rows());
        let mut total = 0.0f64;
        for (r, &w) in row_weight.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let s: f64 = pv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            total += w as f64 * s;
        }
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(total as f32),
            Op::MaskedMse {
                pred,
                target,
                row_weight,
            },
            ng,
        )
    }

    /// `sum_r weight_r * sum_{c in span_r} |z - pred|`.
    pub fn slice_l1(&mut self, z: Var, pred: Var, spans: Vec<RowSpan>) -> Var {
        let zv = self.value(z);
        let pv = self.value(pred);
        assert_eq!(zv.shape(), pv.shape(), "slice_l1 shape");
        assert_eq!(spans.len(), zv.rows());
        let mut total = 0.0f64;
        for (r, sp) in spans.iter().enumerate() {
            if sp.weight == 0.0 {
                continue;
            }
            let s: f64 = zv.row(r)[sp.start..sp.end]
                .iter()
                .zip(&pv.row(r)[sp.start..sp.end])
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum();
            total += sp.weight as f64 * s;
        }
        let ng = self.ng(z) || self.ng(pred);
        self.push(Tensor::scalar(total as f32), Op::SliceL1 { z, pred, spans }, ng)
    }

    /// Mean softmax cross-entropy of `logits` against class `labels`.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(labels.len(), lv.rows());
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (((v - m) as f64).exp() / z) as f32;
            }
            loss += z.ln() - (row[y] - m) as f64;
        }
        let n = labels.len().max(1) as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar((loss / n) as f32),
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from `seeds`, each a scalar node with its upstream weight.
    pub fn backward(&self, seeds: &[(Var, f32)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(v, w) in seeds {
            let shape = self.value(v).shape();
            accumulate(&mut grads, v, Tensor::full(shape.0, shape.1, w));
        }
        let last = seeds.iter().map(|s| s.0 .0).max().map_or(0, |m| m + 1);
        for i in (0..last).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.ng(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(Trans::No, Trans::Yes, m, n, k, g.data(), bv.data(), da.data_mut(), 0.0);
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(Trans::Yes, Trans::No, k, m, n, av.data(), g.data(), db.data_mut(), 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::AddRow(x, bias) => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.ng(*bias) {
                    accumulate(grads, *bias, column_sums(g));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulConst(x, k) => accumulate(grads, *x, g.zip_map(k, |a, b| a * b)),
            Op::Scale(x, k) => accumulate(grads, *x, g.scale(*k)),
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv));
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, Tensor::full(r, c, g.item()));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                self.norm_affine_grads(*gamma, *beta, g, xhat, grads);
                if self.ng(*x) {
                    let gam = self.value(*gamma);
                    let (rows, cols) = xhat.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for c in 0..cols {
                            let d = (gr[c] * gam.data()[c]) as f64;
                            s1 += d;
                            s2 += d * xr[c] as f64;
                        }
                        let n = cols as f64;
                        let is = inv_std[r] as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let d = (gr[c] * gam.data()[c]) as f64;
                            *o = (is * (d - s1 / n - xr[c] as f64 * s2 / n)) as f32;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                layout,
                groups,
                xhat,
                inv_std,
            } => {
                // padded frames are outputs of the norm but not of the statistics
                let mut gv = g.clone();
                for b in 0..layout.batch {
                    for t in layout.lens[b].max(1)..layout.time {
                        gv.row_mut(layout.row(b, t)).fill(0.0);
                    }
                }
                self.norm_affine_grads(*gamma, *beta, &gv, xhat, grads);
                if self.ng(*x) {
                    let gam = self.value(*gamma).data();
                    let cols = xhat.cols();
                    let cg = cols / groups;
                    let mut dx = Tensor::zeros(xhat.rows(), cols);
                    for b in 0..layout.batch {
                        let len = layout.lens[b].max(1);
                        for gi in 0..*groups {
                            let cs = gi * cg;
                            let mut s1 = 0.0f64;
                            let mut s2 = 0.0f64;
                            for t in 0..len {
                                let r = layout.row(b, t);
                                for c in cs..cs + cg {
                                    let d = (gv.get(r, c) * gam[c]) as f64;
                                    s1 += d;
                                    s2 += d * xhat.get(r, c) as f64;
                                }
                            }
                            let n = (len * cg) as f64;
                            let is = inv_std[b * groups + gi] as f64;
                            for t in 0..len {
                                let r = layout.row(b, t);
                                for c in cs..cs + cg {
                                    let d = (gv.get(r, c) * gam[c]) as f64;
                                    let v = is * (d - s1 / n - xhat.get(r, c) as f64 * s2 / n);
                                    dx.set(r, c, v as f32);
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Im2Col { x, layout, kernel } => {
                let c = self.value(*x).cols();
                let pad = (kernel - 1) / 2;
                let mut dx = Tensor::zeros(layout.rows(), c);
                for b in 0..layout.batch {
                    let len = layout.lens[b];
                    for t in 0..layout.time {
                        let gr = g.row(layout.row(b, t));
                        for j in 0..*kernel {
                            let src_t = t as isize + j as isize - pad as isize;
                            if src_t >= 0 && (src_t as usize) < len {
                                let dst = dx.row_mut(layout.row(b, src_t as usize));
                                for (o, v) in dst.iter_mut().zip(&gr[j * c..(j + 1) * c]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather(x, idx) => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::Lstm {
                xp,
                whh,
                layout,
                reverse,
                gates,
                cells,
            } => self.lstm_backward(*xp, *whh, layout, *reverse, gates, cells, &node.value, g, grads),
            Op::Grl(x, scale) => accumulate(grads, *x, g.scale(-*scale)),
            Op::StraightThrough(x) => accumulate(grads, *x, g.clone()),
            Op::MaskedMse {
                pred,
                target,
                row_weight,
            } => {
                let up = g.item();
                let pv = self.value(*pred);
                let mut d = Tensor::zeros(pv.rows(), pv.cols());
                for (r, &w) in row_weight.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for ((o, &a), &b) in d.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                        *o = up * w * 2.0 * (a - b);
                    }
                }
                accumulate(grads, *pred, d);
            }
            Op::SliceL1 { z, pred, spans } => {
                let up = g.item();
                let zv = self.value(*z);
                let pv = self.value(*pred);
                let mut d = Tensor::zeros(zv.rows(), zv.cols());
                for (r, sp) in spans.iter().enumerate() {
                    if sp.weight == 0.0 {
                        continue;
                    }
                    let zr = zv.row(r);
                    let pr = pv.row(r);
                    let dr = d.row_mut(r);
                    for c in sp.start..sp.end {
                        let diff = zr[c] - pr[c];
                        dr[c] = if diff > 0.0 {
                            up * sp.weight
                        } else if diff < 0.0 {
                            -up * sp.weight
                        } else {
                            0.0
                        };
                    }
                }
                if self.ng(*pred) {
                    accumulate(grads, *pred, d.scale(-1.0));
                }
                if self.ng(*z) {
                    accumulate(grads, *z, d);
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = g.item() / labels.len().max(1) as f32;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= k;
                    }
                }
                accumulate(grads, *logits, d);
            }
        }
    }

    fn norm_affine_grads(
        &self,
        gamma: Var,
        beta: Var,
        g: &Tensor,
        xhat: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        if self.ng(gamma) {
            accumulate(grads, gamma, column_sums(&g.zip_map(xhat, |a, b| a * b)));
        }
        if self.ng(beta) {
            accumulate(grads, beta, column_sums(g));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        xp: Var,
        whh: Var,
        layout: &SeqLayout,
        reverse: bool,
        gates: &Tensor,
        cells: &Tensor,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let whv = self.value(whh);
        let h = whv.rows();
        let bsz = layout.batch;
        let mut dxp = Tensor::zeros(layout.rows(), 4 * h);
        let mut dwhh = Tensor::zeros(h, 4 * h);
        let mut dh_next = vec![0.0f32; bsz * h];
        let mut dc_next = vec![0.0f32; bsz * h];
        let mut dpre = vec![0.0f32; bsz * 4 * h];
        let mut h_prev = vec![0.0f32; bsz * h];
        for s in (0..layout.time).rev() {
            dpre.fill(0.0);
            h_prev.fill(0.0);
            for b in 0..bsz {
                let Some(t) = step_time(layout, b, s, reverse) else {
                    continue;
                };
                let r = layout.row(b, t);
                let prev_row = if s == 0 {
                    None
                } else {
                    step_time(layout, b, s - 1, reverse).map(|pt| layout.row(b, pt))
                };
                let gr = gates.row(r);
                let cr = cells.row(r);
                let gout = g.row(r);
                let dp = &mut dpre[b * 4 * h..(b + 1) * 4 * h];
                for j in 0..h {
                    let (i, f, gg, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                    let tc = cr[j].tanh();
                    let dh = gout[j] + dh_next[b * h + j];
                    let d_o = dh * tc;
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[b * h + j];
                    let c_prev = prev_row.map_or(0.0, |pr| cells.get(pr, j));
                    let di = dc * gg;
                    let dg = dc * i;
                    let df = dc * c_prev;
                    dc_next[b * h + j] = dc * f;
                    dp[j] = di * i * (1.0 - i);
                    dp[h + j] = df * f * (1.0 - f);
                    dp[2 * h + j] = dg * (1.0 - gg * gg);
                    dp[3 * h + j] = d_o * o * (1.0 - o);
                }
                dxp.row_mut(r).copy_from_slice(dp);
                if let Some(pr) = prev_row {
                    h_prev[b * h..(b + 1) * h].copy_from_slice(out.row(pr));
                }
            }
            // dW_hh += h_prev^T dpre ; dh_next = dpre W_hh^T
            gemm(Trans::Yes, Trans::No, h, bsz, 4 * h, &h_prev, &dpre, dwhh.data_mut(), 1.0);
            gemm(Trans::No, Trans::Yes, bsz, 4 * h, h, &dpre, whv.data(), &mut dh_next, 0.0);
            for b in 0..bsz {
                if step_time(layout, b, s, reverse).is_none() {
                    dh_next[b * h..(b + 1) * h].fill(0.0);
                    dc_next[b * h..(b + 1) * h].fill(0.0);
                }
            }
        }
        if self.ng(xp) {
            accumulate(grads, xp, dxp);
        }
        if self.ng(whh) {
            accumulate(grads, whh, dwhh);
        }
    }
}

/// Frame processed by item `b` at recurrence step `s`, if any.
#[inline]
fn step_time(layout: &SeqLayout, b: usize, s: usize, reverse: bool) -> Option<usize> {
    let len = layout.lens[b];
    if s >= len {
        None
    } else if reverse {
        Some(len - 1 - s)
    } else {
        Some(s)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn affine_channels(xhat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    assert_eq!(gamma.shape(), (1, xhat.cols()), "norm gamma shape");
    assert_eq!(beta.shape(), (1, xhat.cols()), "norm beta shape");
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((o, g), b) in out.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2))
}

#[inline]
fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x / std::f32::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
    cdf + x * pdf
}

/// Gradients from one [`Graph::backward`] sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients, in parameter-id order.
    pub fn params(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = graph
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].clone().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
