//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! The tape records operations in execution order, so every node's inputs
//! precede it and a single reverse sweep propagates gradients to all
//! `requires_grad` leaves. Forward and backward are single-threaded and the
//! accumulation order is fixed, which makes runs bitwise-reproducible.

use crate::error::{CoreError, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, b: Var, rows: usize, cols: usize },
    Neg { a: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Ln { a: Var },
    LogSigmoid { a: Var },
    LogSoftmax { a: Var, rows: usize, cols: usize },
    GatherIndex { a: Var, cols: usize, idx: Vec<usize> },
    RowSum { a: Var, rows: usize, cols: usize },
    EmbedConcat { tok: Var, pos: Var, dim: usize, ctx_len: usize, contexts: Vec<Vec<usize>> },
    SegmentSum { a: Var, seg: Vec<usize> },
    SumAll { a: Var },
    MeanAll { a: Var },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(CoreError::DimensionMismatch {
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf holding a copy of the tensor's data.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(CoreError::NonScalarLoss(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        match shape.len() {
            1 => Ok((1, shape[0])),
            2 => Ok((shape[0], shape[1])),
            _ => Err(CoreError::DimensionMismatch {
                left: shape.to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a)?;
        let (k2, n) = self.matrix_dims(b)?;
        if k != k2 {
            return Err(CoreError::DimensionMismatch {
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &bv[kk * n..(kk + 1) * n];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, needs, Op::Matmul { a, b, m, k, n }))
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b))?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, needs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-`cols` row vector to every row of an `rows x cols` matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a)?;
        if self.shape(b) != [cols] {
            return Err(CoreError::DimensionMismatch {
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bv = &self.nodes[b.0].value;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            out,
            needs,
            Op::AddRow { a, b, rows, cols },
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), out, needs, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg { a })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.iter().any(|&x| x <= 0.0) {
            return Err(CoreError::Numeric("ln of a non-positive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Ln { a }))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, crate::numeric::log_sigmoid, Op::LogSigmoid { a })
    }

    /// Row-wise numerically stable log softmax over the last dimension.
    /// `-inf` entries stay `-inf` and carry no gradient.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a)?;
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.nodes[a.0].value.chunks(cols) {
            out.extend(crate::numeric::log_softmax(row)?);
        }
        let needs = self.needs(a);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            out,
            needs,
            Op::LogSoftmax { a, rows, cols },
        ))
    }

    /// Picks `a[r, idx[r]]` for every row `r` of an `rows x cols` matrix.
    pub fn gather_index(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a)?;
        if idx.len() != rows {
            return Err(CoreError::DimensionMismatch {
                left: vec![rows],
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(CoreError::Vocabulary { id: bad, vocab: cols });
        }
        let av = &self.nodes[a.0].value;
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| av[r * cols + i])
            .collect();
        let needs = self.needs(a);
        Ok(self.push(
            vec![rows],
            out,
            needs,
            Op::GatherIndex { a, cols, idx: idx.to_vec() },
        ))
    }

    /// Sums each row of an `rows x cols` matrix into a length-`rows` vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .chunks(cols)
            .map(|row| row.iter().sum())
            .collect();
        let needs = self.needs(a);
        Ok(self.push(vec![rows], out, needs, Op::RowSum { a, rows, cols }))
    }

    /// Builds the model input matrix for a batch of fixed-length contexts:
    /// row `b` is the concatenation over context slots `c` of
    /// `tok[contexts[b][c]] + pos[c]`.
    pub fn embed_concat(&mut self, tok: Var, pos: Var, contexts: &[Vec<usize>]) -> Result<Var> {
        let (vocab, dim) = self.matrix_dims(tok)?;
        let (ctx_len, dim2) = self.matrix_dims(pos)?;
        if dim != dim2 {
            return Err(CoreError::DimensionMismatch {
                left: self.shape(tok).to_vec(),
                right: self.shape(pos).to_vec(),
            });
        }
        let batch = contexts.len();
        let mut out = vec![0.0; batch * ctx_len * dim];
        {
            let tv = &self.nodes[tok.0].value;
            let pv = &self.nodes[pos.0].value;
            for (b, ctx) in contexts.iter().enumerate() {
                if ctx.len() != ctx_len {
                    return Err(CoreError::DimensionMismatch {
                        left: vec![ctx_len],
                        right: vec![ctx.len()],
                    });
                }
                for (c, &t) in ctx.iter().enumerate() {
                    if t >= vocab {
                        return Err(CoreError::Vocabulary { id: t, vocab });
                    }
                    let dst = &mut out[(b * ctx_len + c) * dim..(b * ctx_len + c + 1) * dim];
                    let te = &tv[t * dim..(t + 1) * dim];
                    let pe = &pv[c * dim..(c + 1) * dim];
                    for ((d, &x), &y) in dst.iter_mut().zip(te).zip(pe) {
                        *d = x + y;
                    }
                }
            }
        }
        let needs = self.needs(tok) || self.needs(pos);
        Ok(self.push(
            vec![batch, ctx_len * dim],
            out,
            needs,
            Op::EmbedConcat {
                tok,
                pos,
                dim,
                ctx_len,
                contexts: contexts.to_vec(),
            },
        ))
    }

    /// Sums entries of a vector into `out_len` buckets given by `seg`.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], out_len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if seg.len() != av.len() {
            return Err(CoreError::DimensionMismatch {
                left: vec![av.len()],
                right: vec![seg.len()],
            });
        }
        let mut out = vec![0.0; out_len];
        for (&s, &v) in seg.iter().zip(av) {
            if s >= out_len {
                return Err(CoreError::DimensionMismatch {
                    left: vec![s],
                    right: vec![out_len],
                });
            }
            out[s] += v;
        }
        let needs = self.needs(a);
        Ok(self.push(
            vec![out_len],
            out,
            needs,
            Op::SegmentSum { a, seg: seg.to_vec() },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a);
        self.push(vec![], vec![s], needs, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a);
        self.push(vec![], vec![s / n as f64], needs, Op::MeanAll { a })
    }

    /// Propagates gradients from a scalar loss to every `requires_grad` leaf.
    /// A second call on the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(CoreError::BackwardAlreadyRun);
        }
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(CoreError::NonScalarLoss(node.shape.clone()));
        }
        if !node.needs_grad {
            return Err(CoreError::DetachedGraph);
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[id].grad).unwrap();
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            let (prefix, rest) = self.nodes.split_at_mut(id);
            let cur = &rest[0];
            match &op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    if prefix[a.0].needs_grad {
                        let bv = prefix[b.0].value.clone();
                        let ga = grad_buf(&mut prefix[a.0]);
                        for i in 0..*m {
                            for kk in 0..*k {
                                let mut acc = 0.0;
                                let grow = &grad[i * n..(i + 1) * n];
                                let brow = &bv[kk * n..(kk + 1) * n];
                                for (&g, &bvj) in grow.iter().zip(brow) {
                                    acc += g * bvj;
                                }
                                ga[i * k + kk] += acc;
                            }
                        }
                    }
                    if prefix[b.0].needs_grad {
                        let av = prefix[a.0].value.clone();
                        let gb = grad_buf(&mut prefix[b.0]);
                        for i in 0..*m {
                            let arow = &av[i * k..(i + 1) * k];
                            let grow = &grad[i * n..(i + 1) * n];
                            for (kk, &aik) in arow.iter().enumerate() {
                                let dst = &mut gb[kk * n..(kk + 1) * n];
                                for (d, &g) in dst.iter_mut().zip(grow) {
                                    *d += aik * g;
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate(prefix, *a, &grad, |g, _| g);
                    accumulate(prefix, *b, &grad, |g, _| g);
                }
                Op::Sub { a, b } => {
                    accumulate(prefix, *a, &grad, |g, _| g);
                    accumulate(prefix, *b, &grad, |g, _| -g);
                }
                Op::Mul { a, b } => {
                    if prefix[a.0].needs_grad {
                        let bv = prefix[b.0].value.clone();
                        let ga = grad_buf(&mut prefix[a.0]);
                        for ((g, &bvv), d) in grad.iter().zip(&bv).zip(ga.iter_mut()) {
                            *d += g * bvv;
                        }
                    }
                    if prefix[b.0].needs_grad {
                        let av = prefix[a.0].value.clone();
                        let gb = grad_buf(&mut prefix[b.0]);
                        for ((g, &avv), d) in grad.iter().zip(&av).zip(gb.iter_mut()) {
                            *d += g * avv;
                        }
                    }
                }
                Op::AddRow { a, b, rows, cols } => {
                    accumulate(prefix, *a, &grad, |g, _| g);
                    if prefix[b.0].needs_grad {
                        let gb = grad_buf(&mut prefix[b.0]);
                        for r in 0..*rows {
                            for c in 0..*cols {
                                gb[c] += grad[r * cols + c];
                            }
                        }
                    }
                }
                Op::Neg { a } => accumulate(prefix, *a, &grad, |g, _| -g),
                Op::Scale { a, c } => accumulate(prefix, *a, &grad, |g, _| c * g),
                Op::AddScalar { a } => accumulate(prefix, *a, &grad, |g, _| g),
                Op::Tanh { a } => {
                    let y = &cur.value;
                    if prefix[a.0].needs_grad {
                        let ga = grad_buf(&mut prefix[a.0]);
                        for ((g, &yv), d) in grad.iter().zip(y).zip(ga.iter_mut()) {
                            *d += g * (1.0 - yv * yv);
                        }
                    }
                }
                Op::Exp { a } => {
                    let y = &cur.value;
                    if prefix[a.0].needs_grad {
                        let ga = grad_buf(&mut prefix[a.0]);
                        for ((g, &yv), d) in grad.iter().zip(y).zip(ga.iter_mut()) {
                            *d += g * yv;
                        }
                    }
                }
                Op::Ln { a } => {
                    if prefix[a.0].needs_grad {
                        let xs = prefix[a.0].value.clone();
                        let ga = grad_buf(&mut prefix[a.0]);
                        for ((g, &x), d) in grad.iter().zip(&xs).zip(ga.iter_mut()) {
                            *d += g / x;
                        }
                    }
                }
                Op::LogSigmoid { a } => {
                    if prefix[a.0].needs_grad {
                        let xs = prefix[a.0].value.clone();
                        let ga = grad_buf(&mut prefix[a.0]);
                        for ((g, &x), d) in grad.iter().zip(&xs).zip(ga.iter_mut()) {
                            *d += g * crate::numeric::sigmoid(-x);
                        }
                    }
                }
                Op::LogSoftmax { a, rows, cols } => {
                    if prefix[a.0].needs_grad {
                        let y = cur.value.clone();
                        let xs = prefix[a.0].value.clone();
                        let ga = grad_buf(&mut prefix[a.0]);
                        for r in 0..*rows {
                            let gr = &grad[r * cols..(r + 1) * cols];
                            let yr = &y[r * cols..(r + 1) * cols];
                            let xr = &xs[r * cols..(r + 1) * cols];
                            let gsum: f64 = gr.iter().sum();
                            let dst = &mut ga[r * cols..(r + 1) * cols];
                            for c in 0..*cols {
                                if xr[c].is_finite() {
                                    let p = yr[c].exp();
                                    dst[c] += gr[c] - p * gsum;
                                }
                            }
                        }
                    }
                }
                Op::GatherIndex { a, cols, idx } => {
                    if prefix[a.0].needs_grad {
                        let ga = grad_buf(&mut prefix[a.0]);
                        for (r, &i) in idx.iter().enumerate() {
                            ga[r * cols + i] += grad[r];
                        }
                    }
                }
                Op::RowSum { a, rows, cols } => {
                    if prefix[a.0].needs_grad {
                        let ga = grad_buf(&mut prefix[a.0]);
                        for r in 0..*rows {
                            let dst = &mut ga[r * cols..(r + 1) * cols];
                            for d in dst {
                                *d += grad[r];
                            }
                        }
                    }
                }
                Op::EmbedConcat { tok, pos, dim, ctx_len, contexts } => {
                    if prefix[tok.0].needs_grad {
                        let gt = grad_buf(&mut prefix[tok.0]);
                        for (b, ctx) in contexts.iter().enumerate() {
                            for (c, &t) in ctx.iter().enumerate() {
                                let src = &grad[(b * ctx_len + c) * dim..(b * ctx_len + c + 1) * dim];
                                let dst = &mut gt[t * dim..(t + 1) * dim];
                                for (d, &g) in dst.iter_mut().zip(src) {
                                    *d += g;
                                }
                            }
                        }
                    }
                    if prefix[pos.0].needs_grad {
                        let gp = grad_buf(&mut prefix[pos.0]);
                        for (b, ctx) in contexts.iter().enumerate() {
                            for c in 0..ctx.len() {
                                let src = &grad[(b * ctx_len + c) * dim..(b * ctx_len + c + 1) * dim];
                                let dst = &mut gp[c * dim..(c + 1) * dim];
                                for (d, &g) in dst.iter_mut().zip(src) {
                                    *d += g;
                                }
                            }
                        }
                    }
                }
                Op::SegmentSum { a, seg } => {
                    if prefix[a.0].needs_grad {
                        let ga = grad_buf(&mut prefix[a.0]);
                        for (i, &s) in seg.iter().enumerate() {
                            ga[i] += grad[s];
                        }
                    }
                }
                Op::SumAll { a } => {
                    accumulate(prefix, *a, &[grad[0]], |g, _| g);
                }
                Op::MeanAll { a } => {
                    let n = prefix[a.0].value.len().max(1) as f64;
                    if prefix[a.0].needs_grad {
                        let ga = grad_buf(&mut prefix[a.0]);
                        for d in ga.iter_mut() {
                            *d += grad[0] / n;
                        }
                    }
                }
            }
            self.nodes[id].op = op;
            self.nodes[id].grad = Some(grad);
        }
        Ok(())
    }

    /// Gradient of the loss with respect to `v`; requires a prior [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        if !self.backward_done {
            return Err(CoreError::UninitializedGradient(format!("node {}", v.0)));
        }
        self.nodes[v.0]
            .grad
            .as_deref()
            .ok_or_else(|| CoreError::UninitializedGradient(format!("node {}", v.0)))
    }

    /// Gradient of the loss with respect to `v`, treating unreached nodes as zero.
    pub fn grad_or_zeros(&self, v: Var) -> Result<Vec<f64>> {
        if !self.backward_done {
            return Err(CoreError::UninitializedGradient(format!("node {}", v.0)));
        }
        Ok(match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        })
    }
}

fn grad_buf(node: &mut Node) -> &mut Vec<f64> {
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.value.len()]);
    }
    node.grad.as_mut().unwrap()
}

/// Accumulates `f(grad[i], i)` into the gradient of `v` when it needs one.
/// A single-element `grad` is broadcast over the whole buffer.
fn accumulate(nodes: &mut [Node], v: Var, grad: &[f64], f: impl Fn(f64, usize) -> f64) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let buf = grad_buf(&mut nodes[v.0]);
    if grad.len() == 1 && buf.len() != 1 {
        for (i, d) in buf.iter_mut().enumerate() {
            *d += f(grad[0], i);
        }
    } else {
        for (i, (d, &g)) in buf.iter_mut().zip(grad).enumerate() {
            *d += f(g, i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = tape.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 1], vec![2.0]);
        let b = tape.constant(vec![1, 1], vec![3.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[6.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (3, 4, 2);
        let av: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bv: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += av[i * k + kk] * bv[kk * n + j];
                }
                expect[i * n + j] = acc;
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(vec![m, k], av);
        let b = tape.constant(vec![k, n], bv);
        let c = tape.matmul(a, b).unwrap();
        for (x, y) in tape.value(c).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(vec![1], vec![3.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_identity() {
        // loss = -log_softmax(h)[j]  =>  dL/dh = p - onehot(j)
        let mut tape = Tape::new();
        let h = tape.leaf(&param(vec![1, 3], vec![0.3, -1.2, 2.0]));
        let ls = tape.log_softmax(h).unwrap();
        let picked = tape.gather_index(ls, &[2]).unwrap();
        let s = tape.sum_all(picked);
        let loss = tape.neg(s);
        tape.backward(loss).unwrap();
        let p = crate::numeric::softmax(&[0.3, -1.2, 2.0]).unwrap();
        let g = tape.grad(h).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let want = p[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(vec![1], vec![2.0]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(CoreError::BackwardAlreadyRun)
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(CoreError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn detached_graph_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![1.0]);
        let loss = tape.sum_all(x);
        assert!(matches!(tape.backward(loss), Err(CoreError::DetachedGraph)));
    }

    #[test]
    fn log_softmax_rows_are_simplices() {
        let mut tape = Tape::new();
        let h = tape.constant(vec![2, 3], vec![1.0, -4.0, 0.5, 100.0, 99.0, -30.0]);
        let ls = tape.log_softmax(h).unwrap();
        for row in tape.value(ls).chunks(3) {
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
