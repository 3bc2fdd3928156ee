use std::collections::HashMap;
use std::sync::Arc;

use super::{axis_layout, ParamId, ParamStore, Tensor, MAX_RANK};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: given the input values, the output
/// value and the upstream gradient, return one gradient buffer per input.
pub type CustomBackward = Arc<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

#[derive(Clone, Copy, Debug)]
enum MatMulKind {
    /// `[m×k]·[k×n]`
    Plain,
    /// `[b×s×k]·[k×n]`, the right operand shared across all rows.
    Rows,
    /// `[b×m×k]·[b×k×n]`
    Batched,
}

enum Op {
    Leaf,
    MatMul(Var, Var, MatMulKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    // masked entries are exactly zero in the output, so the usual softmax
    // backward already gives them zero gradient
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Stack {
        parts: Vec<Var>,
        axis: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order, so
/// [`Graph::backward`] is a single reverse sweep. A graph is meant to live
/// for one forward/backward pass; build a fresh one for the next step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that accumulates a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf for parameter `id`. Repeated calls return the same node, so
    /// every consumer of a parameter contributes to one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    /// Parameter leaves in the order they were first used.
    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.param_order
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if it has received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub(crate) fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut() {
            *g = None;
        }
    }

    // ── ops ──────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (kind, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (MatMulKind::Plain, vec![sa[0], sb[1]]),
            (3, 2) if sa[2] == sb[0] => (MatMulKind::Rows, vec![sa[0], sa[1], sb[1]]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                (MatMulKind::Batched, vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            match kind {
                MatMulKind::Plain => mm(av, bv, &mut out, sa[0], sa[1], sb[1]),
                MatMulKind::Rows => mm(av, bv, &mut out, sa[0] * sa[1], sa[2], sb[1]),
                MatMulKind::Batched => {
                    let (m, k, n) = (sa[1], sa[2], sb[2]);
                    for i in 0..sa[0] {
                        mm(
                            &av[i * m * k..(i + 1) * m * k],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut out[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::MatMul(a, b, kind),
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            Tensor {
                shape: ta.shape().to_vec(),
                data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::Dimension {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
            let bc = Broadcast::new(ta.shape(), tb.shape(), &shape);
            let mut data = Vec::with_capacity(shape.iter().product());
            bc.for_each(|_, ia, ib| data.push(f(ta.data()[ia], tb.data()[ib])));
            Tensor { shape, data }
        };
        Ok((out, self.rg(&[a, b])))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Hadamard product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax that gives exactly zero probability to positions whose mask
    /// entry is `false`. `mask` has the same shape as `x`.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask has {} entries for shape {:?}", mask.len(), self.shape(x)),
            ));
        }
        self.softmax_impl(x, axis, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let mut t = self.value(x).clone();
        let shape = t.shape().to_vec();
        softmax_in_place(t.data_mut(), &shape, axis, mask);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let mut t = self.value(x).clone();
        let (outer, len, inner) = axis_layout(t.shape(), axis);
        let d = t.data_mut();
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + k;
                let max = (0..len).map(|i| d[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|i| (d[at(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..len {
                    d[at(i)] -= lse;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} invalid for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                data[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equally shaped operands along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() || base.len() + 1 > MAX_RANK {
            return Err(Error::shape("stack", format!("axis {axis} invalid for {base:?}")));
        }
        for &p in parts {
            if self.shape(p) != base.as_slice() {
                return Err(Error::Dimension {
                    op: "stack",
                    lhs: base.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let n = parts.len();
        let mut data = vec![0.0; outer * n * inner];
        for (j, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = o * n * inner + j * inner;
                data[dst..dst + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, n);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape, data },
            Op::Stack {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Picks entry `index` of `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        self.check_axis(x, axis, "select")?;
        let shape = self.shape(x).to_vec();
        if index >= shape[axis] {
            return Err(Error::shape(
                "select",
                format!("index {index} out of range for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let s = o * len * inner + index * inner;
            data.extend_from_slice(&src[s..s + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Select { x, axis, index },
            rg,
        ))
    }

    /// Entries `start..start + len` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_layout(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = o * full * inner + start * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    /// Sum over one axis, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_layout(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for k in 0..inner {
                    data[o * inner + k] += src[o * len * inner + i * inner + k];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SumAxis { x, axis },
            rg,
        ))
    }

    /// Maximum over one axis, dropping it. The gradient goes to the selected
    /// entry only; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "max_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_layout(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + k;
                let mut best = 0;
                for i in 1..len {
                    if src[at(i)] > src[at(best)] {
                        best = i;
                    }
                }
                data.push(src[at(best)]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::MaxAxis { x, axis, argmax },
            rg,
        ))
    }

    /// Row lookup into a `[V×E]` table. The result has shape
    /// `index_shape ++ [E]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("gather", format!("table must be rank 2, got {ts:?}")));
        }
        if index_shape.iter().product::<usize>() != indices.len() || index_shape.len() + 1 > MAX_RANK {
            return Err(Error::shape(
                "gather",
                format!("{} indices do not fit shape {index_shape:?}", indices.len()),
            ));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for (flat, &ix) in indices.iter().enumerate() {
            if ix >= vocab {
                return Err(Error::Vocabulary {
                    index: ix,
                    size: vocab,
                    position: unflatten(flat, index_shape),
                });
            }
            data.extend_from_slice(&src[ix * dim..(ix + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = x[i, indices[i]]` for a `[N×V]` input.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(Error::shape(
                "pick",
                format!("{} indices for shape {s:?}", indices.len()),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len());
        for (i, &ix) in indices.iter().enumerate() {
            if ix >= s[1] {
                return Err(Error::Vocabulary {
                    index: ix,
                    size: s[1],
                    position: vec![i],
                });
            }
            data.push(src[i * s[1] + ix]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len()],
                data,
            },
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Records an operation whose forward and backward rules are supplied by
    /// the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor]) -> Result<Tensor>,
        backward: CustomBackward,
    ) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&values)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        ))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(
                op,
                format!("axis {axis} invalid for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a one-element `loss`. Gradients accumulate into
    /// every leaf that requires one; calling this twice without
    /// [`Graph::zero_grad`] sums the two sweeps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Graph {
            nodes, leaf_grads, ..
        } = self;
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[v.0].requires_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {
                    let slot = leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, d) in slot.iter_mut().zip(&g) {
                        *s += d;
                    }
                }
                Op::MatMul(a, b, kind) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (sa, sb) = (ta.shape(), tb.shape());
                    match kind {
                        MatMulKind::Plain | MatMulKind::Rows => {
                            let k = *sa.last().unwrap();
                            let m = ta.len() / k;
                            let n = sb[1];
                            acc(*a, &mut |da| mm_a_bt(&g, tb.data(), da, m, k, n));
                            acc(*b, &mut |db| mm_at_b(ta.data(), &g, db, m, k, n));
                        }
                        MatMulKind::Batched => {
                            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                            acc(*a, &mut |da| {
                                for bi in 0..batch {
                                    mm_a_bt(
                                        &g[bi * m * n..(bi + 1) * m * n],
                                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                                        &mut da[bi * m * k..(bi + 1) * m * k],
                                        m,
                                        k,
                                        n,
                                    );
                                }
                            });
                            acc(*b, &mut |db| {
                                for bi in 0..batch {
                                    mm_at_b(
                                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                                        &g[bi * m * n..(bi + 1) * m * n],
                                        &mut db[bi * k * n..(bi + 1) * k * n],
                                        m,
                                        k,
                                        n,
                                    );
                                }
                            });
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (da_rule, db_rule): (fn(f64, f64) -> f64, fn(f64, f64) -> f64) = match &node.op {
                        Op::Add(..) => (|_, _| 1.0, |_, _| 1.0),
                        Op::Sub(..) => (|_, _| 1.0, |_, _| -1.0),
                        _ => (|_, y| y, |x, _| x),
                    };
                    if ta.shape() == tb.shape() {
                        acc(*a, &mut |da| {
                            for j in 0..g.len() {
                                da[j] += g[j] * da_rule(ta.data()[j], tb.data()[j]);
                            }
                        });
                        acc(*b, &mut |db| {
                            for j in 0..g.len() {
                                db[j] += g[j] * db_rule(ta.data()[j], tb.data()[j]);
                            }
                        });
                    } else {
                        let bc = Broadcast::new(ta.shape(), tb.shape(), out.shape());
                        acc(*a, &mut |da| {
                            bc.for_each(|o, ia, ib| da[ia] += g[o] * da_rule(ta.data()[ia], tb.data()[ib]))
                        });
                        acc(*b, &mut |db| {
                            bc.for_each(|o, ia, ib| db[ib] += g[o] * db_rule(ta.data()[ia], tb.data()[ib]))
                        });
                    }
                }
                Op::Scale(x, c) => acc(*x, &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(&g) {
                        *d += gv * c;
                    }
                }),
                Op::Sigmoid(x) => acc(*x, &mut |dx| {
                    for ((d, gv), y) in dx.iter_mut().zip(&g).zip(out.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }),
                Op::Tanh(x) => acc(*x, &mut |dx| {
                    for ((d, gv), y) in dx.iter_mut().zip(&g).zip(out.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }),
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_layout(out.shape(), *axis);
                    let y = out.data();
                    acc(*x, &mut |dx| {
                        for o in 0..outer {
                            for k in 0..inner {
                                let at = |i: usize| o * len * inner + i * inner + k;
                                let dot: f64 = (0..len).map(|i| y[at(i)] * g[at(i)]).sum();
                                for i in 0..len {
                                    dx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmax { x, axis } => {
                    let (outer, len, inner) = axis_layout(out.shape(), *axis);
                    let y = out.data();
                    acc(*x, &mut |dx| {
                        for o in 0..outer {
                            for k in 0..inner {
                                let at = |i: usize| o * len * inner + i * inner + k;
                                let total: f64 = (0..len).map(|i| g[at(i)]).sum();
                                for i in 0..len {
                                    dx[at(i)] += g[at(i)] - y[at(i)].exp() * total;
                                }
                            }
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_layout(out.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.shape()[*axis];
                        acc(p, &mut |dp| {
                            for o in 0..outer {
                                let src = o * total * inner + offset * inner;
                                for (d, gv) in dp[o * len * inner..(o + 1) * len * inner]
                                    .iter_mut()
                                    .zip(&g[src..src + len * inner])
                                {
                                    *d += gv;
                                }
                            }
                        });
                        offset += len;
                    }
                }
                Op::Stack { parts, axis } => {
                    let n = parts.len();
                    let base = nodes[parts[0].0].value.shape();
                    let outer: usize = base[..*axis].iter().product();
                    let inner: usize = base[*axis..].iter().product();
                    for (j, &p) in parts.iter().enumerate() {
                        acc(p, &mut |dp| {
                            for o in 0..outer {
                                let src = o * n * inner + j * inner;
                                for (d, gv) in dp[o * inner..(o + 1) * inner].iter_mut().zip(&g[src..src + inner]) {
                                    *d += gv;
                                }
                            }
                        });
                    }
                }
                Op::Select { x, axis, index } => {
                    let (outer, len, inner) = axis_layout(nodes[x.0].value.shape(), *axis);
                    acc(*x, &mut |dx| {
                        for o in 0..outer {
                            let dst = o * len * inner + index * inner;
                            for (d, gv) in dx[dst..dst + inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Slice { x, axis, start } => {
                    let (outer, full, inner) = axis_layout(nodes[x.0].value.shape(), *axis);
                    let len = out.shape()[*axis];
                    acc(*x, &mut |dx| {
                        for o in 0..outer {
                            let dst = o * full * inner + start * inner;
                            let src = o * len * inner;
                            for (d, gv) in dx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }),
                Op::Sum(x) => acc(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }),
                Op::SumAxis { x, axis } => {
                    let (outer, len, inner) = axis_layout(nodes[x.0].value.shape(), *axis);
                    acc(*x, &mut |dx| {
                        for o in 0..outer {
                            for i in 0..len {
                                for k in 0..inner {
                                    dx[o * len * inner + i * inner + k] += g[o * inner + k];
                                }
                            }
                        }
                    });
                }
                Op::MaxAxis { x, axis, argmax } => {
                    let (outer, len, inner) = axis_layout(nodes[x.0].value.shape(), *axis);
                    acc(*x, &mut |dx| {
                        for o in 0..outer {
                            for k in 0..inner {
                                let i = argmax[o * inner + k];
                                dx[o * len * inner + i * inner + k] += g[o * inner + k];
                            }
                        }
                    });
                }
                Op::Gather { table, indices } => {
                    let dim = nodes[table.0].value.shape()[1];
                    acc(*table, &mut |dt| {
                        for (r, &ix) in indices.iter().enumerate() {
                            for (d, gv) in dt[ix * dim..(ix + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Pick { x, indices } => {
                    let width = nodes[x.0].value.shape()[1];
                    acc(*x, &mut |dx| {
                        for (r, &ix) in indices.iter().enumerate() {
                            dx[r * width + ix] += g[r];
                        }
                    });
                }
                Op::Custom { inputs, backward } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let parts = backward(&values, out, &g);
                    for (&v, part) in inputs.iter().zip(parts) {
                        acc(v, &mut |dv| {
                            for (d, p) in dv.iter_mut().zip(&part) {
                                *d += p;
                            }
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(d: &mut [f64], shape: &[usize], axis: usize, mask: Option<&[bool]>) {
    let (outer, len, inner) = axis_layout(shape, axis);
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| o * len * inner + i * inner + k;
            let max = (0..len)
                .filter(|&i| keep(at(i)))
                .map(|i| d[at(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                for i in 0..len {
                    d[at(i)] = 0.0;
                }
                continue;
            }
            let mut total = 0.0;
            for i in 0..len {
                let j = at(i);
                d[j] = if keep(j) { (d[j] - max).exp() } else { 0.0 };
                total += d[j];
            }
            for i in 0..len {
                d[at(i)] /= total;
            }
        }
    }
}

/// `out += a·b` with `a: [m×k]`, `b: [k×n]`.
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `da += g·bᵀ` with `g: [m×n]`, `b: [k×n]`.
fn mm_a_bt(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += gi.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db += aᵀ·g` with `a: [m×k]`, `g: [m×n]`.
fn mm_at_b(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *d += av * gv;
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pa = pad_left(a, rank);
    let pb = pad_left(b, rank);
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn pad_left(s: &[usize], rank: usize) -> Vec<usize> {
    let mut v = vec![1; rank - s.len()];
    v.extend_from_slice(s);
    v
}

fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (slot, &dim) in idx.iter_mut().zip(shape).rev() {
        *slot = flat % dim;
        flat /= dim;
    }
    idx
}

/// Index mapping from a broadcast output back into its two operands, with
/// every shape left-padded to rank 3.
struct Broadcast {
    out: [usize; 3],
    sa: [usize; 3],
    sb: [usize; 3],
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize], out: &[usize]) -> Self {
        let to3 = |s: &[usize]| -> [usize; 3] {
            let p = pad_left(s, 3);
            [p[0], p[1], p[2]]
        };
        let strides = |s: [usize; 3]| -> [usize; 3] {
            let st = [s[1] * s[2], s[2], 1];
            [0, 1, 2].map(|i| if s[i] == 1 { 0 } else { st[i] })
        };
        Broadcast {
            out: to3(out),
            sa: strides(to3(a)),
            sb: strides(to3(b)),
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d0, d1, d2] = self.out;
        let mut o = 0;
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    let ia = i * self.sa[0] + j * self.sa[1] + k * self.sa[2];
                    let ib = i * self.sb[0] + j * self.sb[1] + k * self.sb[2];
                    f(o, ia, ib);
                    o += 1;
                }
            }
        }
    }
}
