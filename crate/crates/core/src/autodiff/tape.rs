use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Visibility pattern for a row-wise softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Every column is visible.
    Full,
    /// Row `i` sees columns `j <= i + offset`.
    Causal { offset: usize },
    /// Rows form consecutive blocks of `size` scored against their own
    /// `size` columns (the layout of a grouped matmul); row `i` sees
    /// columns `j <= i % size`.
    BlockCausal { size: usize },
}

impl Mask {
    fn visible(self, row: usize, cols: usize) -> (usize, usize) {
        match self {
            Mask::Full => (0, cols),
            Mask::Causal { offset } => (0, (row + offset + 1).min(cols)),
            Mask::BlockCausal { size } => (0, (row % size + 1).min(cols)),
        }
    }
}

/// Handle to a value slot on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input,
    Constant,
    MatMul { a: Var, b: Var, transpose_b: bool, groups: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Gelu { a: Var },
    Softmax { a: Var, mask: Mask },
    RmsNorm { x: Var, gain: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Constant)
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
}

/// Ordered record of primitive operations and the values they produced.
///
/// Leaves are either differentiable inputs or constants. Every operation
/// only references earlier slots, so the node order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by slot.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not
    /// influence the seed.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded operations, leaves excluded.
    pub fn len(&self) -> usize {
        self.ops
    }

    pub fn is_empty(&self) -> bool {
        self.ops == 0
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        self.nodes[v.0].value.clone()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.input_shared(Arc::new(t))
    }

    pub fn input_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_leaf(Op::Input, t)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.constant_shared(Arc::new(t))
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_leaf(Op::Constant, t)
    }

    fn push_leaf(&mut self, op: Op, value: Arc<Tensor>) -> Var {
        let needs_grad = matches!(op, Op::Input);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let index = self.ops;
        let value = eval_op(&op, &self.nodes)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                index,
                op: op.name(),
            });
        }
        let needs_grad = inputs_of(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            needs_grad,
        });
        self.ops += 1;
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_grouped(a, b, 1)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t_grouped(a, b, 1)
    }

    /// Batched `a · b`: both operands are `groups` equal row blocks stacked
    /// vertically and block `g` of the result is `a_g · b_g`.
    pub fn matmul_grouped(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            transpose_b: false,
            groups,
        })
    }

    /// Batched `a · bᵀ` over `groups` stacked row blocks.
    pub fn matmul_t_grouped(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            transpose_b: true,
            groups,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add { a, b })
    }

    /// Elementwise product; `b` may also be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul { a, b })
    }

    /// Multiply by a constant scalar (a `mul` against a constant leaf).
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(c));
        self.mul(a, s)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu { a })
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax { a, mask: Mask::Full })
    }

    /// Row-wise softmax restricted to the columns `mask` leaves visible;
    /// hidden columns get probability zero.
    pub fn softmax_masked(&mut self, a: Var, mask: Mask) -> Result<Var> {
        if let Mask::BlockCausal { size: 0 } = mask {
            bail!(Structural, "block size must be positive");
        }
        self.push(Op::Softmax { a, mask })
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.push(Op::RmsNorm { x, gain })
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    /// Mean cross-entropy of each logits row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    /// Re-executes the recorded operations. `inputs` replaces the values of
    /// the differentiable leaves in creation order; constants are kept.
    pub fn replay(&self, inputs: &[Tensor]) -> Result<Tape> {
        let mut out = Tape::new();
        let mut next = inputs.iter();
        for node in &self.nodes {
            match &node.op {
                Op::Input => {
                    let t = next.next().ok_or_else(|| {
                        Error::Structural("replay: too few input values".to_string())
                    })?;
                    if t.shape() != node.value.shape() {
                        bail!(
                            Structural,
                            "replay: input shape {:?} != recorded {:?}",
                            t.shape(),
                            node.value.shape()
                        );
                    }
                    out.input(t.clone());
                }
                Op::Constant => {
                    out.constant_shared(node.value.clone());
                }
                op => {
                    out.push(op.clone())?;
                }
            }
        }
        if next.next().is_some() {
            bail!(Structural, "replay: too many input values");
        }
        Ok(out)
    }

    /// Reverse pass from `seed`. A single-element seed defaults to a unit
    /// cotangent; larger seeds need an explicit one.
    pub fn backward(&self, seed: Var, cotangent: Option<&Tensor>) -> Result<Gradients> {
        if seed.0 >= self.nodes.len() {
            bail!(Structural, "seed slot {} is not on the tape", seed.0);
        }
        let seed_val = &self.nodes[seed.0].value;
        let ct = match cotangent {
            Some(c) => {
                if c.shape() != seed_val.shape() {
                    bail!(
                        Structural,
                        "cotangent shape {:?} != seed shape {:?}",
                        c.shape(),
                        seed_val.shape()
                    );
                }
                c.clone()
            }
            None if seed_val.len() == 1 => Tensor::filled(seed_val.shape(), 1.0),
            None => bail!(Structural, "non-scalar seed requires an explicit cotangent"),
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(ct);
        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if node.op.is_leaf() || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Input) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::MatMul {
                a,
                b,
                transpose_b,
                groups,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = matmul_dims(av, bv, *transpose_b, *groups)?;
                let (sa, sb, sc) = (m * k, k * n, m * n);
                let want_a = self.wants(*a);
                let want_b = self.wants(*b);
                if want_a {
                    let ga = acc(grads, *a, av);
                    for q in 0..*groups {
                        let gq = &g.data()[q * sc..(q + 1) * sc];
                        let bq = &bv.data()[q * sb..(q + 1) * sb];
                        let out = &mut ga.data_mut()[q * sa..(q + 1) * sa];
                        if *transpose_b {
                            gemm_nn(m, n, k, gq, bq, out);
                        } else {
                            gemm_nt(m, n, k, gq, bq, out);
                        }
                    }
                }
                if want_b {
                    let gb = acc(grads, *b, bv);
                    for q in 0..*groups {
                        let gq = &g.data()[q * sc..(q + 1) * sc];
                        let aq = &av.data()[q * sa..(q + 1) * sa];
                        let out = &mut gb.data_mut()[q * sb..(q + 1) * sb];
                        if *transpose_b {
                            gemm_tn(m, n, k, gq, aq, out);
                        } else {
                            gemm_tn(m, k, n, aq, gq, out);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let gv = acc(grads, v, val(v));
                        for (x, y) in gv.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if bv.len() == 1 && av.len() != 1 {
                    let s = bv.data()[0];
                    if self.wants(*a) {
                        let ga = acc(grads, *a, av);
                        for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                            *x += y * s;
                        }
                    }
                    if self.wants(*b) {
                        let total = math::dot(g.data(), av.data());
                        acc(grads, *b, bv).data_mut()[0] += total;
                    }
                } else {
                    if self.wants(*a) {
                        let ga = acc(grads, *a, av);
                        for ((x, y), z) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *x += y * z;
                        }
                    }
                    if self.wants(*b) {
                        let gb = acc(grads, *b, bv);
                        for ((x, y), z) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *x += y * z;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.wants(*a) {
                    let av = val(*a);
                    let ga = acc(grads, *a, av);
                    for ((x, y), z) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += y * gelu_grad(*z);
                    }
                }
            }
            Op::Softmax { a, .. } => {
                if self.wants(*a) {
                    let y = &node.value;
                    let av = val(*a);
                    let cols = y.cols();
                    let ga = acc(grads, *a, av);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let s = math::dot(yr, gr);
                        let out = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain } => {
                let (xv, gv) = (val(*x), val(*gain));
                let cols = xv.cols();
                let nf = cols as f64;
                let mut dx = if self.wants(*x) {
                    Some(Tensor::zeros(xv.shape()))
                } else {
                    None
                };
                let mut dgain = if self.wants(*gain) {
                    Some(Tensor::zeros(gv.shape()))
                } else {
                    None
                };
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let inv = 1.0 / math::sqrt(math::dot(xr, xr) / nf + RMS_EPS);
                    if let Some(dg) = dgain.as_mut() {
                        for j in 0..cols {
                            dg.data_mut()[j] += gr[j] * xr[j] * inv;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += gr[j] * gv.data()[j] * xr[j];
                        }
                        let coef = inv * inv * inv * s / nf;
                        let out = dx.row_mut(r);
                        for j in 0..cols {
                            out[j] = inv * gr[j] * gv.data()[j] - coef * xr[j];
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(grads, *x, xv).add_assign(&dx)?;
                }
                if let Some(dg) = dgain {
                    acc(grads, *gain, gv).add_assign(&dg)?;
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = val(*table);
                    let cols = tv.cols();
                    let gt = acc(grads, *table, tv);
                    for (r, id) in ids.iter().enumerate() {
                        let src = &g.data()[r * cols..(r + 1) * cols];
                        let dst = gt.row_mut(*id);
                        for j in 0..cols {
                            dst[j] += src[j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let lv = val(*logits);
                    let scale = g.data()[0] / targets.len() as f64;
                    let gl = acc(grads, *logits, lv);
                    for (r, t) in targets.iter().enumerate() {
                        let p = softmax_row(lv.row(r));
                        let out = gl.row_mut(r);
                        for j in 0..p.len() {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            out[j] += scale * (p[j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-group `(m, k, n)` of a grouped matmul.
fn matmul_dims(av: &Tensor, bv: &Tensor, transpose_b: bool, groups: usize) -> Result<(usize, usize, usize)> {
    if av.rank() != 2 || bv.rank() != 2 {
        bail!(Structural, "matmul needs matrices, got {:?} and {:?}", av.shape(), bv.shape());
    }
    if groups == 0 || !av.rows().is_multiple_of(groups) || !bv.rows().is_multiple_of(groups) {
        bail!(
            Structural,
            "matmul {:?} x {:?} cannot be split into {} groups",
            av.shape(),
            bv.shape(),
            groups
        );
    }
    let m = av.rows() / groups;
    let k = av.cols();
    let (k2, n) = if transpose_b {
        (bv.cols(), bv.rows() / groups)
    } else {
        (bv.rows() / groups, bv.cols())
    };
    if k != k2 {
        let t = if transpose_b { "ᵀ" } else { "" };
        bail!(Structural, "matmul {:?} x {:?}{} (groups {})", av.shape(), bv.shape(), t, groups);
    }
    Ok((m, k, n))
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Constant => vec![],
        Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Gelu { a } | Op::Softmax { a, .. } => vec![*a],
        Op::RmsNorm { x, gain } => vec![*x, *gain],
        Op::Embedding { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| math::exp(v - max)).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

fn eval_op(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
    match op {
        Op::Input | Op::Constant => bail!(Structural, "leaves are not evaluated"),
        Op::MatMul {
            a,
            b,
            transpose_b,
            groups,
        } => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = matmul_dims(av, bv, *transpose_b, *groups)?;
            let mut out = vec![0.0; groups * m * n];
            for q in 0..*groups {
                let aq = &av.data()[q * m * k..(q + 1) * m * k];
                let bq = &bv.data()[q * k * n..(q + 1) * k * n];
                let cq = &mut out[q * m * n..(q + 1) * m * n];
                if *transpose_b {
                    gemm_nt(m, k, n, aq, bq, cq);
                } else {
                    gemm_nn(m, k, n, aq, bq, cq);
                }
            }
            Tensor::matrix(groups * m, n, out)
        }
        Op::Add { a, b } => val(a).add(val(b)),
        Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if bv.len() == 1 && av.len() != 1 {
                Ok(av.scale(bv.data()[0]))
            } else if av.shape() == bv.shape() {
                let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                Tensor::new(av.shape().to_vec(), data)
            } else {
                bail!(Structural, "mul between {:?} and {:?}", av.shape(), bv.shape())
            }
        }
        Op::Gelu { a } => Ok(val(a).map(gelu)),
        Op::Softmax { a, mask } => {
            let av = val(a);
            let cols = av.cols();
            let mut out = Tensor::zeros(av.shape());
            for r in 0..av.rows() {
                let (lo, hi) = mask.visible(r, cols);
                if lo >= hi {
                    bail!(Structural, "softmax row {} has no visible columns", r);
                }
                let p = softmax_row(&av.row(r)[lo..hi]);
                out.row_mut(r)[lo..hi].copy_from_slice(&p);
            }
            Ok(out)
        }
        Op::RmsNorm { x, gain } => {
            let (xv, gv) = (val(x), val(gain));
            let cols = xv.cols();
            if gv.len() != cols {
                bail!(Structural, "rms_norm gain {:?} for rows of {}", gv.shape(), cols);
            }
            let mut out = Tensor::zeros(xv.shape());
            for r in 0..xv.rows() {
                let xr = xv.row(r);
                let inv = 1.0 / math::sqrt(math::dot(xr, xr) / cols as f64 + RMS_EPS);
                let o = out.row_mut(r);
                for j in 0..cols {
                    o[j] = xr[j] * inv * gv.data()[j];
                }
            }
            Ok(out)
        }
        Op::Embedding { table, ids } => {
            let tv = val(table);
            if tv.rank() != 2 {
                bail!(Structural, "embedding table must be a matrix");
            }
            let cols = tv.cols();
            let mut data = Vec::with_capacity(ids.len() * cols);
            for id in ids {
                if *id >= tv.rows() {
                    bail!(Input, "id {} out of range for table with {} rows", id, tv.rows());
                }
                data.extend_from_slice(tv.row(*id));
            }
            Tensor::matrix(ids.len(), cols, data)
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = val(logits);
            if lv.rows() != targets.len() || targets.is_empty() {
                bail!(
                    Structural,
                    "cross_entropy: {} rows for {} targets",
                    lv.rows(),
                    targets.len()
                );
            }
            if let Some(t) = targets.iter().find(|&&t| t >= lv.cols()) {
                bail!(Input, "target class {} out of range {}", t, lv.cols());
            }
            let rows = targets.iter().enumerate().map(|(r, &t)| (lv.row(r), t));
            Ok(Tensor::scalar(math::mean_nll(rows)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_program_records_no_operations() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.len(), 0);
        assert_eq!(tape.value(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn identity_matmul_returns_input() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::identity(2));
        let x = tape.input(Tensor::matrix(2, 1, vec![3.0, -4.0]).unwrap());
        let y = tape.matmul(a, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -4.0]);
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Structural(_))));
    }

    #[test]
    fn non_finite_results_name_the_operation() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(vec![1e308, 1e308]));
        let b = tape.input(Tensor::vector(vec![1e308, 1e308]));
        let s = tape.add(a, b).unwrap_err();
        assert_eq!(s, Error::NonFinite { index: 0, op: "add" });
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let grads = tape.backward(c, None).unwrap();
        let g = grads.get_or_zeros(x, tape.value(x));
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(vec![1.5, -2.0, 0.25]));
        let y = tape.matmul_t(x, x).unwrap();
        let grads = tape.backward(y, None).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn non_scalar_seed_needs_cotangent() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.gelu(x).unwrap();
        assert!(tape.backward(y, None).is_err());
        assert!(tape.backward(Var(99), None).is_err());
    }

    #[test]
    fn causal_softmax_zeroes_future_columns() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let p = tape.softmax_masked(a, Mask::Causal { offset: 0 }).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn block_causal_softmax_restarts_each_block() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[4, 2]));
        let p = tape.softmax_masked(a, Mask::BlockCausal { size: 2 }).unwrap();
        let want = [1.0, 0.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5];
        assert_eq!(tape.value(p).data(), &want);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let t = tape.input(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.embedding(t, &[0, 3]), Err(Error::Input(_))));
    }
}
