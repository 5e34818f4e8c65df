//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Inputs of a node
//! always precede it, so walking the nodes backwards is a valid topological
//! order and each node is visited exactly once by [`Tape::backward`].
//!
//! ```
//! use synth_core::tape::Tape;
//! use synth_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Relu { x: Var },
    Softmax { x: Var },
    TileBlock { x: Var, factor: usize },
    TileCyclic { x: Var, factor: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var> },
    BroadcastBatch { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        include: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum { x: Var },
    WeightedSum { xs: Vec<Var>, w: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose_last2",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "row_softmax",
            Op::TileBlock { .. } => "tile_block",
            Op::TileCyclic { .. } => "tile_cyclic",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat_last",
            Op::BroadcastBatch { .. } => "broadcast_batch",
            Op::Gather { .. } => "gather_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn split_matrix(shape: &[usize]) -> (&[usize], usize, usize) {
    let r = shape.len();
    (&shape[..r - 2], shape[r - 2], shape[r - 1])
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product `[.., m, p] × [.., p, n] -> [.., m, n]`.
    ///
    /// Batch extents must agree, or one side must have a single batch
    /// (rank-2 operands broadcast).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ba_shape, m, p) = split_matrix(sa);
        let (bb_shape, p2, n) = split_matrix(sb);
        if p != p2 {
            return Err(mismatch());
        }
        let ba: usize = ba_shape.iter().product();
        let bb: usize = bb_shape.iter().product();
        let out_batch = if bb == 1 {
            ba_shape.to_vec()
        } else if ba == 1 {
            bb_shape.to_vec()
        } else if ba_shape == bb_shape {
            ba_shape.to_vec()
        } else {
            return Err(mismatch());
        };
        let batches = ba.max(bb);
        let mut out = vec![T::zero(); batches * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if bb == 1 {
            T::gemm(
                ba * m,
                p,
                n,
                ad,
                p as isize,
                1,
                bd,
                n as isize,
                1,
                T::zero(),
                &mut out,
                n as isize,
                1,
            );
        } else {
            for i in 0..batches {
                let ao = if ba == 1 { 0 } else { i * m * p };
                T::gemm(
                    m,
                    p,
                    n,
                    &ad[ao..ao + m * p],
                    p as isize,
                    1,
                    &bd[i * p * n..(i + 1) * p * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::MatMul { a, b }, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.rank() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose_last2",
                shape: src.shape().to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let (batch, m, n) = split_matrix(src.shape());
        let mut shape = batch.to_vec();
        shape.extend([n, m]);
        let d = src.data();
        let mut out = Vec::with_capacity(d.len());
        for blk in d.chunks(m * n) {
            for j in 0..n {
                for i in 0..m {
                    out.push(blk[i * n + j]);
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Transpose { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Elementwise sum. `b` may be a scalar or match a trailing suffix of
    /// `a`'s shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = if vb.len() == 1 {
            let s = vb.data()[0];
            va.data().iter().map(|&x| x + s).collect()
        } else if is_suffix(vb.shape(), va.shape()) {
            let bd = vb.data();
            va.data()
                .chunks(bd.len())
                .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| x + y))
                .collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let value = Tensor::new(va.shape(), out)?;
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product of equal shapes, or by a scalar tensor `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect()
        } else if vb.len() == 1 {
            let s = vb.data()[0];
            va.data().iter().map(|&x| x * s).collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let value = Tensor::new(va.shape(), out)?;
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Softmax over the last axis with row-max stabilization.
    ///
    /// Disallowed mask entries are replaced by [`Scalar::mask_value`] before
    /// normalization and come out exactly zero. A row without any allowed
    /// entry is an error.
    pub fn row_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let src = self.value(x);
        let cols = src.cols();
        let rows = src.rows();
        if let Some(m) = mask {
            let mrows = if src.rank() >= 2 {
                src.shape()[src.rank() - 2]
            } else {
                1
            };
            let batches = rows / mrows;
            if m.cols() != cols || m.rows() != mrows || (m.batch() != 1 && m.batch() != batches) {
                return Err(TensorError::ShapeMismatch {
                    op: "row_softmax",
                    lhs: src.shape().to_vec(),
                    rhs: vec![m.batch(), m.rows(), m.cols()],
                });
            }
        }
        let mut out = src.data().to_vec();
        let fill = T::mask_value();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let allowed = mask.map(|m| m.row(r));
            if let Some(al) = allowed {
                if !al.iter().any(|&a| a) {
                    return Err(TensorError::DegenerateRow { row: r });
                }
                for (v, &a) in row.iter_mut().zip(al) {
                    if !a {
                        *v = fill;
                    }
                }
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
            if let Some(al) = allowed {
                for (v, &a) in row.iter_mut().zip(al) {
                    if !a {
                        *v = T::zero();
                    }
                }
            }
        }
        let value = Tensor::new(src.shape(), out)?;
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Repeats each element of the last axis `factor` times contiguously:
    /// `[x, y]` becomes `[x, x, y, y]` for factor 2.
    pub fn tile_block(&mut self, x: Var, factor: usize) -> Result<Var> {
        let src = self.value(x);
        check_factor("tile_block", src.shape(), factor)?;
        let out: Vec<T> = src
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, factor))
            .collect();
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() *= factor;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::TileBlock { x, factor }, &[x])
    }

    /// Repeats the whole last axis `factor` times end-to-end:
    /// `[x, y]` becomes `[x, y, x, y]` for factor 2.
    pub fn tile_cyclic(&mut self, x: Var, factor: usize) -> Result<Var> {
        let src = self.value(x);
        check_factor("tile_cyclic", src.shape(), factor)?;
        let n = src.cols();
        let mut out = Vec::with_capacity(src.len() * factor);
        for row in src.data().chunks(n) {
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() *= factor;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::TileCyclic { x, factor }, &[x])
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape: shape.to_vec(),
                reason: format!("cannot take {start}..{} on axis {axis}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = src.data();
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let value = Tensor::new(&new_shape, out)?;
        self.push(value, Op::Narrow { x, axis, start }, &[x])
    }

    /// Concatenates along the last axis; leading shapes must match.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat_last",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != *lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let rows = self.value(first).rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Concat { xs: xs.to_vec() }, xs)
    }

    /// Stacks `count` copies of `x` along a new leading axis.
    pub fn broadcast_batch(&mut self, x: Var, count: usize) -> Result<Var> {
        let src = self.value(x);
        if count == 0 {
            return Err(TensorError::InvalidShape {
                op: "broadcast_batch",
                shape: src.shape().to_vec(),
                reason: "count must be positive".into(),
            });
        }
        let mut shape = vec![count];
        shape.extend_from_slice(src.shape());
        if count == 1 {
            return self.reshape(x, &shape);
        }
        let mut out = Vec::with_capacity(src.len() * count);
        for _ in 0..count {
            out.extend_from_slice(src.data());
        }
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::BroadcastBatch { x }, &[x])
    }

    /// Row lookup: `table[ids[i]]` for each id, output shape `id_shape ++ [d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: id_shape.to_vec(),
            });
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: vocab,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(&shape, out)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let src = self.value(x);
        let n = src.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [n] || b.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: src.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let nf = T::from_usize_lossy(n);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.rows());
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let value = Tensor::new(src.shape(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean token-level negative log-likelihood over included rows.
    ///
    /// `logits` is viewed as `rows × vocab`; `targets` and `include` have
    /// one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], include: &[bool]) -> Result<Var> {
        let src = self.value(logits);
        let vocab = src.cols();
        let rows = src.rows();
        if targets.len() != rows || include.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: src.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = include.iter().filter(|&&i| i).count();
        if count == 0 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: src.shape().to_vec(),
                reason: "no included target rows".into(),
            });
        }
        let mut probs = Vec::with_capacity(src.len());
        let mut total = T::zero();
        for (r, row) in src.data().chunks(vocab).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
            if include[r] {
                let t = targets[r];
                if t >= vocab {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        extent: vocab,
                    });
                }
                total += lse - row[t];
            }
        }
        let value = Tensor::scalar(total / T::from_usize_lossy(count));
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize_lossy(self.value(x).len());
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// `Σ w[i] · xs[i]` for equally shaped `xs` and a weight vector `w`.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        let wv = self.value(w);
        if xs.is_empty() || wv.len() != xs.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: vec![xs.len()],
                rhs: wv.shape().to_vec(),
            });
        }
        let shape = self.shape(xs[0]).to_vec();
        let mut out = vec![T::zero(); self.value(xs[0]).len()];
        for (i, &x) in xs.iter().enumerate() {
            let v = self.value(x);
            if v.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: shape,
                    rhs: v.shape().to_vec(),
                });
            }
            let wi = wv.data()[i];
            for (o, &e) in out.iter_mut().zip(v.data()) {
                *o += wi * e;
            }
        }
        let value = Tensor::new(&shape, out)?;
        let mut inputs = xs.to_vec();
        inputs.push(w);
        self.push(value, Op::WeightedSum { xs: xs.to_vec(), w }, &inputs)
    }

    /// Propagates `d loss / d v` to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Tensor::new(n.value.shape(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => self.matmul_backward(*a, *b, g, grads),
            Op::Transpose { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let (_, m, n) = split_matrix(self.nodes[x.0].value.shape());
                    // g is [.., n, m]; dx is [.., m, n]
                    for (gb, db) in g.chunks(m * n).zip(dx.chunks_mut(m * n)) {
                        for i in 0..m {
                            for j in 0..n {
                                db[i * n + j] += gb[j * m + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    let n = db.len();
                    for chunk in g.chunks(n) {
                        if n == 1 {
                            db[0] += chunk.iter().copied().sum();
                        } else {
                            add_into(db, chunk);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let scalar_b = va.shape() != vb.shape();
                if let Some(da) = self.slot(grads, *a) {
                    if scalar_b {
                        let s = vb.data()[0];
                        da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * s);
                    } else {
                        da.iter_mut()
                            .zip(g.iter().zip(vb.data()))
                            .for_each(|(d, (&gi, &y))| *d += gi * y);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    if scalar_b {
                        db[0] += g.iter().zip(va.data()).map(|(&gi, &x)| gi * x).sum();
                    } else {
                        db.iter_mut()
                            .zip(g.iter().zip(va.data()))
                            .for_each(|(d, (&gi, &x))| *d += gi * x);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *c);
                }
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let cols = y.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((dr, gr), yr) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.data().chunks(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::TileBlock { x, factor } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, chunk) in dx.iter_mut().zip(g.chunks(*factor)) {
                        *d += chunk.iter().copied().sum();
                    }
                }
            }
            Op::TileCyclic { x, factor } => {
                let n = self.nodes[x.0].value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n * factor)) {
                        for rep in grow.chunks(n) {
                            add_into(drow, rep);
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.nodes[x.0].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let ext = shape[*axis];
                let len = node.value.shape()[*axis];
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        let gbase = o * len * inner;
                        add_into(
                            &mut dx[base..base + len * inner],
                            &g[gbase..gbase + len * inner],
                        );
                    }
                }
            }
            Op::Concat { xs } => {
                let total = node.value.cols();
                let mut offset = 0;
                for &v in xs {
                    let w = self.nodes[v.0].value.cols();
                    if let Some(dv) = self.slot(grads, v) {
                        for (drow, grow) in dv.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::BroadcastBatch { x } => {
                let n = self.nodes[x.0].value.len();
                if let Some(dx) = self.slot(grads, *x) {
                    for chunk in g.chunks(n) {
                        add_into(dx, chunk);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].value.cols();
                if let Some(dt) = self.slot(grads, *table) {
                    for (&id, grow) in ids.iter().zip(g.chunks(d)) {
                        add_into(&mut dt[id * d..(id + 1) * d], grow);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gam = self.nodes[gamma.0].value.data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = T::from_usize_lossy(n);
                    let mut dh = vec![T::zero(); n];
                    for (r, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dh[j] = grow[j] * gam[j];
                            s1 += dh[j];
                            s2 += dh[j] * hrow[j];
                        }
                        let k = rstd[r] / nf;
                        for j in 0..n {
                            drow[j] += k * (nf * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                include,
                probs,
                count,
            } => {
                let vocab = self.nodes[logits.0].value.cols();
                let scale = g[0] / T::from_usize_lossy(*count);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, drow) in dl.chunks_mut(vocab).enumerate() {
                        if !include[r] {
                            continue;
                        }
                        let prow = &probs[r * vocab..(r + 1) * vocab];
                        for (j, d) in drow.iter_mut().enumerate() {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            *d += scale * (prow[j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { xs, w } => {
                let wv = self.nodes[w.0].value.data().to_vec();
                for (i, &x) in xs.iter().enumerate() {
                    if let Some(dx) = self.slot(grads, x) {
                        dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * wv[i]);
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let contrib: Vec<T> = xs
                        .iter()
                        .map(|&x| {
                            self.nodes[x.0]
                                .value
                                .data()
                                .iter()
                                .zip(g)
                                .map(|(&a, &b)| a * b)
                                .sum()
                        })
                        .collect();
                    if let Some(dw) = self.slot(grads, *w) {
                        add_into(dw, &contrib);
                    }
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ba_shape, m, p) = split_matrix(va.shape());
        let (bb_shape, _, n) = split_matrix(vb.shape());
        let ba: usize = ba_shape.iter().product();
        let bb: usize = bb_shape.iter().product();
        let batches = ba.max(bb);
        let (ad, bd) = (va.data(), vb.data());
        let (pi, ni) = (p as isize, n as isize);

        if let Some(da) = self.slot(grads, a) {
            // dA = dC · Bᵀ
            if bb == 1 {
                T::gemm(ba * m, n, p, g, ni, 1, bd, 1, ni, T::one(), da, pi, 1);
            } else {
                for i in 0..batches {
                    let ao = if ba == 1 { 0 } else { i * m * p };
                    T::gemm(
                        m,
                        n,
                        p,
                        &g[i * m * n..(i + 1) * m * n],
                        ni,
                        1,
                        &bd[i * p * n..(i + 1) * p * n],
                        1,
                        ni,
                        T::one(),
                        &mut da[ao..ao + m * p],
                        pi,
                        1,
                    );
                }
            }
        }
        if let Some(db) = self.slot(grads, b) {
            // dB = Aᵀ · dC
            if bb == 1 {
                T::gemm(p, ba * m, n, ad, 1, pi, g, ni, 1, T::one(), db, ni, 1);
            } else {
                for i in 0..batches {
                    let ao = if ba == 1 { 0 } else { i * m * p };
                    T::gemm(
                        p,
                        m,
                        n,
                        &ad[ao..ao + m * p],
                        1,
                        pi,
                        &g[i * m * n..(i + 1) * m * n],
                        ni,
                        1,
                        T::one(),
                        &mut db[i * p * n..(i + 1) * p * n],
                        ni,
                        1,
                    );
                }
            }
        }
    }
}

fn check_factor(op: &'static str, shape: &[usize], factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "factor must be at least 1".into(),
        });
    }
    Ok(())
}
