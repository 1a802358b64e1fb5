//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A `Tape` records the forward pass; `backward` replays it in reverse and
//! accumulates exact gradients into per-parameter slots and, where requested,
//! input leaves. The ReLU subgradient at 0 is 0.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a · b
    MatMul(usize, usize),
    /// a · bᵀ
    MatMulNT(usize, usize),
    Add(usize, usize),
    /// (n×p) + broadcast (1×p)
    AddRow(usize, usize),
    Relu(usize),
    /// Row i scaled by the constant c[i].
    ScaleRows(usize, Array1<f64>),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    Scale(usize, f64),
    Sum(usize),
    /// Pairwise hinge-rank loss over a column of scores; labels ascend.
    HingeRank(usize, Vec<u32>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    needs_grad: bool,
    /// Parameter slot this leaf belongs to (gradient accumulated per slot).
    param_slot: Option<usize>,
    /// Tag for input leaves whose gradients the caller wants back.
    input_tag: Option<usize>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Indexed by parameter slot; missing slots are zero tensors.
    pub by_slot: BTreeMap<usize, Array2<f64>>,
    /// Gradients of tagged input leaves.
    pub by_input: BTreeMap<usize, Array2<f64>>,
}

impl Gradients {
    pub fn slot(&self, s: usize) -> Option<&Array2<f64>> {
        self.by_slot.get(&s)
    }

    pub fn is_finite(&self) -> bool {
        self.by_slot
            .values()
            .chain(self.by_input.values())
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Accumulate another pass's gradients (per-sample tapes reduce here).
    pub fn merge(&mut self, other: &Gradients) {
        for (k, g) in &other.by_slot {
            self.by_slot
                .entry(*k)
                .and_modify(|acc| *acc += g)
                .or_insert_with(|| g.clone());
        }
        for (k, g) in &other.by_input {
            self.by_input
                .entry(*k)
                .and_modify(|acc| *acc += g)
                .or_insert_with(|| g.clone());
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_slot.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
        for g in self.by_input.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param_slot: None,
            input_tag: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf tied to a parameter slot.
    pub fn param(&mut self, slot: usize, value: Array2<f64>) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.nodes[v.0].param_slot = Some(slot);
        v
    }

    /// Tracked leaf whose gradient is reported under `tag`.
    pub fn input(&mut self, tag: usize, value: Array2<f64>) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.nodes[v.0].input_tag = Some(tag);
        v
    }

    /// Untracked constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn grad_needed(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.grad_needed(a) || self.grad_needed(b);
        self.push(Op::MatMul(a.0, b.0), value, ng)
    }

    /// a · bᵀ — the standard "rows of samples times weight (out,in)" product.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let ng = self.grad_needed(a) || self.grad_needed(b);
        self.push(Op::MatMulNT(a.0, b.0), value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.grad_needed(a) || self.grad_needed(b);
        self.push(Op::Add(a.0, b.0), value, ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let ng = self.grad_needed(a) || self.grad_needed(row);
        self.push(Op::AddRow(a.0, row.0), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        let ng = self.grad_needed(a);
        self.push(Op::Relu(a.0), value, ng)
    }

    pub fn scale_rows(&mut self, a: Var, c: Array1<f64>) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * c[i]);
        }
        let ng = self.grad_needed(a);
        self.push(Op::ScaleRows(a.0, c), value, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, ca, cb) = (va.nrows(), va.ncols(), vb.ncols());
        let mut value = Array2::zeros((n, ca + cb));
        value.slice_mut(ndarray::s![.., ..ca]).assign(va);
        value.slice_mut(ndarray::s![.., ca..]).assign(vb);
        let ng = self.grad_needed(a) || self.grad_needed(b);
        self.push(Op::ConcatCols(a.0, b.0), value, ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (na, nb, c) = (va.nrows(), vb.nrows(), va.ncols());
        let mut value = Array2::zeros((na + nb, c));
        value.slice_mut(ndarray::s![..na, ..]).assign(va);
        value.slice_mut(ndarray::s![na.., ..]).assign(vb);
        let ng = self.grad_needed(a) || self.grad_needed(b);
        self.push(Op::ConcatRows(a.0, b.0), value, ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let va = &self.nodes[a.0].value;
        let mut value = Array2::zeros((rows.len(), va.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&va.row(r));
        }
        let ng = self.grad_needed(a);
        self.push(Op::GatherRows(a.0, rows), value, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * s);
        let ng = self.grad_needed(a);
        self.push(Op::Scale(a.0, s), value, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let ng = self.grad_needed(a);
        self.push(Op::Sum(a.0), value, ng)
    }

    /// Pairwise hinge-rank loss: scores is an (n×1) column, labels ascend in
    /// quality. loss = (1/K)·Σ_{Y_j > Y_i} (1 − (s_j − s_i))₊ with K the
    /// number of ordered pairs; K = 0 gives loss 0.
    pub fn hinge_rank(&mut self, scores: Var, labels: Vec<u32>) -> Var {
        let s = &self.nodes[scores.0].value;
        let n = s.nrows();
        debug_assert_eq!(n, labels.len());
        let mut total = 0.0;
        let mut pairs = 0usize;
        for j in 0..n {
            for i in 0..n {
                if labels[j] > labels[i] {
                    pairs += 1;
                    total += (1.0 - (s[(j, 0)] - s[(i, 0)])).max(0.0);
                }
            }
        }
        let loss = if pairs == 0 { 0.0 } else { total / pairs as f64 };
        let ng = self.grad_needed(scores);
        self.push(Op::HingeRank(scores.0, labels), Array2::from_elem((1, 1), loss), ng)
    }

    /// Reverse pass from a scalar root seeded with `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::NoRecordedPass);
        }
        let shape = self.nodes[root.0].value.dim();
        self.backward_with(root, Array2::from_elem(shape, seed))
    }

    /// Reverse pass with an arbitrary output gradient for the root node.
    pub fn backward_with(&self, root: Var, root_grad: Array2<f64>) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::NoRecordedPass);
        }
        if root_grad.dim() != self.nodes[root.0].value.dim() {
            return Err(Error::ShapeMismatch {
                context: "root gradient",
                expected: self.nodes[root.0].value.len(),
                found: root_grad.len(),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(root_grad);
        let mut out = Gradients {
            by_slot: BTreeMap::new(),
            by_input: BTreeMap::new(),
        };
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let accum = |grads: &mut Vec<Option<Array2<f64>>>, tgt: usize, delta: Array2<f64>| {
                if !self.nodes[tgt].needs_grad {
                    return;
                }
                match &mut grads[tgt] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(slot) = node.param_slot {
                        out.by_slot
                            .entry(slot)
                            .and_modify(|acc| *acc += &g)
                            .or_insert_with(|| g.clone());
                    }
                    if let Some(tag) = node.input_tag {
                        out.by_input
                            .entry(tag)
                            .and_modify(|acc| *acc += &g)
                            .or_insert_with(|| g.clone());
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accum(&mut grads, *a, g.dot(&vb.t()));
                    accum(&mut grads, *b, va.t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accum(&mut grads, *a, g.dot(vb));
                    accum(&mut grads, *b, g.t().dot(va));
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let col_sums = g.sum_axis(ndarray::Axis(0));
                    accum(
                        &mut grads,
                        *row,
                        col_sums.insert_axis(ndarray::Axis(0)),
                    );
                    accum(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let va = &self.nodes[*a].value;
                    let mut masked = g;
                    ndarray::Zip::from(&mut masked).and(va).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accum(&mut grads, *a, masked);
                }
                Op::ScaleRows(a, c) => {
                    let mut scaled = g;
                    for (i, mut row) in scaled.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|v| v * c[i]);
                    }
                    accum(&mut grads, *a, scaled);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.ncols();
                    accum(&mut grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                    accum(&mut grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
                }
                Op::ConcatRows(a, b) => {
                    let na = self.nodes[*a].value.nrows();
                    accum(&mut grads, *a, g.slice(ndarray::s![..na, ..]).to_owned());
                    accum(&mut grads, *b, g.slice(ndarray::s![na.., ..]).to_owned());
                }
                Op::GatherRows(a, rows) => {
                    let mut scatter = Array2::zeros(self.nodes[*a].value.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = scatter.row_mut(r);
                        dst += &g.row(i);
                    }
                    accum(&mut grads, *a, scatter);
                }
                Op::Scale(a, s) => accum(&mut grads, *a, g.mapv(|v| v * s)),
                Op::Sum(a) => {
                    let seed = g[(0, 0)];
                    accum(
                        &mut grads,
                        *a,
                        Array2::from_elem(self.nodes[*a].value.dim(), seed),
                    );
                }
                Op::HingeRank(svar, labels) => {
                    let s = &self.nodes[*svar].value;
                    let n = s.nrows();
                    let mut pairs = 0usize;
                    let mut ds = Array2::zeros((n, 1));
                    for j in 0..n {
                        for i in 0..n {
                            if labels[j] > labels[i] {
                                pairs += 1;
                                // Hinge active strictly above zero; the
                                // subgradient at the kink is 0.
                                if 1.0 - (s[(j, 0)] - s[(i, 0)]) > 0.0 {
                                    ds[(j, 0)] -= 1.0;
                                    ds[(i, 0)] += 1.0;
                                }
                            }
                        }
                    }
                    if pairs > 0 {
                        let scale = g[(0, 0)] / pairs as f64;
                        ds.mapv_inplace(|v| v * scale);
                        accum(&mut grads, *svar, ds);
                    }
                }
            }
        }
        Ok(out)
    }
}
