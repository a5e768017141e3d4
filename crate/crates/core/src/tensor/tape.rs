use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::ops::{self, Op};
use super::{axis_split, Scalar, Tensor};
use crate::error::{Error, Result};

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    tracked: bool,
}

struct Inner<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Ordered record of differentiable operations.
///
/// Each recorded node keeps its forward value and enough saved state to
/// compute input gradients. [`Tape::backward`] walks the record once in
/// reverse and marks the tape consumed; a second call fails until
/// [`Tape::clear`] is called and the forward pass is re-run.
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Releases every recorded node and resets the consumed flag.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    /// Records `tensor` as an input. Gradients are tracked iff it requires grad.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data_arc().clone(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data_arc().clone(),
            Op::Leaf,
            false,
        )
    }

    fn push(&self, shape: Vec<usize>, value: Arc<Vec<T>>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var { tape: self, id }
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    fn value_of(&self, id: usize) -> Arc<Vec<T>> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].tracked
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let root = &inner.nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if nodes[loss.id].tracked {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut sink = |input: usize, contribution: Vec<T>| {
                if !nodes[input].tracked {
                    return;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            };
            ops::backward(
                &node.op,
                &node.shape,
                &node.value,
                &g,
                |i| (&nodes[i].shape[..], &nodes[i].value[..]),
                &mut sink,
            );
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // Records a node whose inputs are `inputs`. Tracked if any input is.
    fn record(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let tracked = inputs.iter().any(|&i| self.tracked(i));
        self.push(shape, Arc::new(value), op, tracked)
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor`'s grad buffer. Untouched
    /// leaves (no path to the loss) leave the buffer as it was.
    pub fn accumulate_into(&self, var: Var<'_, T>, tensor: &mut Tensor<T>) -> Result<()> {
        if var.shape() != tensor.shape() {
            return Err(Error::shape("accumulate_into", &var.shape(), tensor.shape()));
        }
        if let Some(g) = self.get(var) {
            tensor.accumulate_grad(g)?;
        } else if tensor.requires_grad() && tensor.grad().is_none() {
            tensor.set_grad(Some(vec![T::zero(); tensor.numel()]));
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(op, shape, &vec![0; rank]));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor<T> {
        Tensor::from_arc(self.shape(), self.tape.value_of(self.id))
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Copies the value into a fresh untracked node.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape
            .push(self.shape(), self.tape.value_of(self.id), Op::Leaf, false)
    }

    /// `self · rhs` for `[m, k] · [k, n]`.
    pub fn matmul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let out = ops::matmul(&self.tape.value_of(self.id), &self.tape.value_of(rhs.id), sa[0], sa[1], sb[1]);
        Ok(self.tape.record(
            vec![sa[0], sb[1]],
            out,
            Op::MatMul { a: self.id, b: rhs.id },
            &[self.id, rhs.id],
        ))
    }

    /// `self · rhsᵀ` for `[m, k] · [n, k]ᵀ`.
    pub fn matmul_nt(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", &sa, &sb));
        }
        let out = ops::matmul_nt(&self.tape.value_of(self.id), &self.tape.value_of(rhs.id), sa[0], sa[1], sb[0]);
        Ok(self.tape.record(
            vec![sa[0], sb[0]],
            out,
            Op::MatMulNt { a: self.id, b: rhs.id },
            &[self.id, rhs.id],
        ))
    }

    fn zip_op(
        &self,
        rhs: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        same_tape(self, &rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(Error::shape(name, &sa, &sb));
        }
        let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(rhs.id));
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.record(sa, out, op, &[self.id, rhs.id]))
    }

    pub fn add(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_op(rhs, "add", |x, y| x + y, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_op(rhs, "sub", |x, y| x - y, Op::Sub { a: self.id, b: rhs.id })
    }

    pub fn mul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_op(rhs, "mul", |x, y| x * y, Op::Mul { a: self.id, b: rhs.id })
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &bias);
        let (sx, sb) = (self.shape(), bias.shape());
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n || n == 0 {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let (x, b) = (self.tape.value_of(self.id), self.tape.value_of(bias.id));
        let out = x
            .chunks(n)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(&v, &c)| v + c))
            .collect();
        Ok(self
            .tape
            .record(sx, out, Op::AddBias { x: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let out = self.tape.value_of(self.id).iter().map(|&v| v * s).collect();
        self.tape
            .record(self.shape(), out, Op::Scale { x: self.id, s }, &[self.id])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let sx = self.shape();
        if sx != c.shape() {
            return Err(Error::shape("mul_const", &sx, c.shape()));
        }
        let out = self
            .tape
            .value_of(self.id)
            .iter()
            .zip(c.data())
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.tape.record(
            sx,
            out,
            Op::MulConst {
                x: self.id,
                c: c.data_arc().clone(),
            },
            &[self.id],
        ))
    }

    pub fn square(&self) -> Var<'t, T> {
        let out = self.tape.value_of(self.id).iter().map(|&v| v * v).collect();
        self.tape
            .record(self.shape(), out, Op::Square { x: self.id }, &[self.id])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        let out = self
            .tape
            .value_of(self.id)
            .iter()
            .map(|&v| ops::gelu(v))
            .collect();
        self.tape
            .record(self.shape(), out, Op::Gelu { x: self.id }, &[self.id])
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let out = ops::softmax(&self.tape.value_of(self.id), outer, n, inner);
        Ok(self
            .tape
            .record(shape, out, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let out = ops::log_softmax(&self.tape.value_of(self.id), outer, n, inner);
        Ok(self
            .tape
            .record(shape, out, Op::LogSoftmax { x: self.id, axis }, &[self.id]))
    }

    /// Normalises each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        same_tape(self, &gain);
        same_tape(self, &bias);
        let shape = self.shape();
        let d = *shape.last().unwrap_or(&0);
        if gain.shape() != [d] || bias.shape() != [d] || d == 0 {
            return Err(Error::shape("layer_norm", &shape, &gain.shape()));
        }
        let (out, xhat, rstd) = ops::layer_norm(
            &self.tape.value_of(self.id),
            &self.tape.value_of(gain.id),
            &self.tape.value_of(bias.id),
            d,
            T::lit(eps),
        );
        Ok(self.tape.record(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Row lookup: `out[i] = self[ids[i]]` for a `[rows, d]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        expect_rank("gather_rows", &shape, 2)?;
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", &shape, &[bad]));
        }
        let table = self.tape.value_of(self.id);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&table[i * d..(i + 1) * d]);
        }
        Ok(self.tape.record(
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Rows `start..start + count` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        expect_rank("slice_rows", &shape, 2)?;
        if start + count > shape[0] {
            return Err(Error::shape("slice_rows", &shape, &[start, count]));
        }
        let d = shape[1];
        let out = self.tape.value_of(self.id)[start * d..(start + count) * d].to_vec();
        Ok(self.tape.record(
            vec![count, d],
            out,
            Op::SliceRows { x: self.id, start },
            &[self.id],
        ))
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        expect_rank("slice_cols", &shape, 2)?;
        if start + width > shape[1] {
            return Err(Error::shape("slice_cols", &shape, &[start, width]));
        }
        let x = self.tape.value_of(self.id);
        let out = x
            .chunks(shape[1])
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        Ok(self.tape.record(
            vec![shape[0], width],
            out,
            Op::SliceCols { x: self.id, start },
            &[self.id],
        ))
    }

    /// Sets entries where `mask` is true to negative infinity.
    pub fn mask_fill_neg_inf(&self, mask: &[bool]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let x = self.tape.value_of(self.id);
        if mask.len() != x.len() {
            return Err(Error::shape("mask_fill_neg_inf", &shape, &[mask.len()]));
        }
        let out = x
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { T::neg_infinity() } else { v })
            .collect();
        Ok(self.tape.record(
            shape,
            out,
            Op::MaskFill {
                x: self.id,
                mask: mask.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.tape.value_of(self.id).iter().copied().sum();
        self.tape
            .record(vec![], vec![total], Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::lit(self.tape.value_of(self.id).len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// `Σ weights[i] · self[i]` as a scalar.
    pub fn weighted_sum(&self, weights: &[T]) -> Result<Var<'t, T>> {
        let x = self.tape.value_of(self.id);
        if weights.len() != x.len() {
            return Err(Error::shape("weighted_sum", &self.shape(), &[weights.len()]));
        }
        let total = x.iter().zip(weights).map(|(&v, &w)| v * w).sum();
        Ok(self.tape.record(
            vec![],
            vec![total],
            Op::WeightedSum {
                x: self.id,
                weights: weights.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let d = *shape.last().ok_or(Error::Axis { axis: 0, shape: vec![] })?;
        let x = self.tape.value_of(self.id);
        let inv = T::one() / T::lit(d as f64);
        let out = x
            .chunks(d)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.tape.record(
            shape[..shape.len() - 1].to_vec(),
            out,
            Op::MeanLast { x: self.id },
            &[self.id],
        ))
    }

    /// Per-slice `Σ p·ln(p/q)` along `axis`, with both inputs floored at
    /// `eps` before the logarithm. Fails if a slice is not a distribution
    /// to within 1e-6.
    pub fn kl_divergence(&self, q: Var<'t, T>, axis: usize, eps: f64) -> Result<Var<'t, T>> {
        same_tape(self, &q);
        let (sp, sq) = (self.shape(), q.shape());
        if sp != sq {
            return Err(Error::shape("kl_divergence", &sp, &sq));
        }
        let (outer, n, inner) = axis_split(&sp, axis)?;
        let (p_val, q_val) = (self.tape.value_of(self.id), self.tape.value_of(q.id));
        ops::check_stochastic("kl_divergence", &p_val, outer, n, inner)?;
        ops::check_stochastic("kl_divergence", &q_val, outer, n, inner)?;
        let out = ops::kl(&p_val, &q_val, outer, n, inner, T::lit(eps));
        let mut out_shape = sp.clone();
        out_shape.remove(axis);
        Ok(self.tape.record(
            out_shape,
            out,
            Op::Kl {
                p: self.id,
                q: q.id,
                axis,
                eps: T::lit(eps),
            },
            &[self.id, q.id],
        ))
    }

    /// Mean negative log-likelihood of `targets` over the rows selected by `mask`.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        expect_rank("cross_entropy", &shape, 2)?;
        let (n, v) = (shape[0], shape[1]);
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len(), mask.len()]));
        }
        let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::domain("cross_entropy", "mask selects no positions"));
        }
        if let Some(&r) = rows.iter().find(|&&r| targets[r] >= v) {
            return Err(Error::domain(
                "cross_entropy",
                format!("target {} out of range for vocabulary of {v}", targets[r]),
            ));
        }
        let logits = self.tape.value_of(self.id);
        let (loss, probs) = ops::cross_entropy(&logits, v, targets, &rows);
        Ok(self.tape.record(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                rows,
                probs,
            },
            &[self.id],
        ))
    }

    /// Scaled dot-product multi-head attention over a batch of equal-length
    /// (padded) sequences. `q`, `k`, `v` are `[batch·len, d]`; heads split
    /// the `d` columns. `key_pad[b·len + j]` hides key `j` of sequence `b`.
    pub fn attention(
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        geometry: AttentionGeometry,
        key_pad: &[bool],
    ) -> Result<Var<'t, T>> {
        same_tape(&q, &k);
        same_tape(&q, &v);
        let shape = q.shape();
        let AttentionGeometry { batch, len, heads } = geometry;
        if shape.len() != 2
            || k.shape() != shape
            || v.shape() != shape
            || shape[0] != batch * len
            || heads == 0
            || !shape[1].is_multiple_of(heads)
            || key_pad.len() != batch * len
        {
            return Err(Error::shape("attention", &shape, &[batch, len, heads]));
        }
        let tape = q.tape;
        let (out, probs) = ops::attention_forward(
            &tape.value_of(q.id),
            &tape.value_of(k.id),
            &tape.value_of(v.id),
            geometry,
            shape[1],
            key_pad,
        );
        Ok(tape.record(
            shape,
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                geometry,
                probs,
            },
            &[q.id, k.id, v.id],
        ))
    }

    /// Attention weights `[batch, heads, len, len]` saved by an attention node.
    pub fn attention_weights(&self) -> Option<Vec<T>> {
        match &self.tape.inner.borrow().nodes[self.id].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }
}

/// Layout of a padded batch for [`Var::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
}
