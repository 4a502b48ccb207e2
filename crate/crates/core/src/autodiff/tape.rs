//! The computation record and its primitives.
//!
//! A [`Var`] is a handle to one node of a [`Tape`]. Nodes are appended in
//! topological order by construction, so backpropagation is a single
//! reverse sweep. Records are dynamic: one per forward pass, sized by the
//! actual sequence lengths.

use std::cell::RefCell;
use std::rc::Rc;

use super::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// The closed set of primitive kinds accepted by [`Tape::apply`].
///
/// `EmbeddingLookup` and `ScalarScale` carry their non-tensor operand as
/// part of the tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive<F> {
    /// Matrix product. Accepts `[m,k]×[k,n]`, and 1-D operands by the
    /// usual vector conventions (`[k]×[k,n]`, `[m,k]×[k]`, dot `[k]×[k]`).
    MatMul,
    /// Elementwise addition of two same-shape tensors.
    Add,
    /// Elementwise product; one operand may be a single-element tensor,
    /// which broadcasts.
    ElemMul,
    Sigmoid,
    Tanh,
    /// Row softmax (a 1-D input is one row).
    Softmax,
    /// Row log-softmax (a 1-D input is one row).
    LogSoftmax,
    /// Concatenation along the last axis.
    Concat,
    /// Gathers row `id` of a 2-D table; gradient scatters back into it.
    EmbeddingLookup { id: usize },
    /// Sum of all elements, producing shape `[1]`.
    Sum,
    /// Multiplication by the compile-time-known constant `factor`.
    ScalarScale { factor: F },
}

impl<F> Primitive<F> {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matrix-multiply",
            Primitive::Add => "add",
            Primitive::ElemMul => "elementwise-multiply",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log-softmax",
            Primitive::Concat => "concatenate",
            Primitive::EmbeddingLookup { .. } => "embedding-lookup",
            Primitive::Sum => "sum",
            Primitive::ScalarScale { .. } => "scalar-scale",
        }
    }
}

enum NodeOp<F> {
    Leaf,
    MatMul {
        lhs: usize,
        rhs: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    ElemMul {
        lhs: usize,
        rhs: usize,
    },
    Sigmoid {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    LogSoftmax {
        x: usize,
        cols: usize,
    },
    Concat {
        inputs: Vec<usize>,
        segments: Vec<usize>,
    },
    Embed {
        table: usize,
        id: usize,
    },
    Sum {
        x: usize,
    },
    Scale {
        x: usize,
        factor: F,
    },
}

struct Node<F> {
    op: NodeOp<F>,
    values: Vec<F>,
    grad: Vec<F>,
}

/// One computation record. Cheap to clone (shared handle); confined to a
/// single thread while being written.
pub struct Tape<F: Scalar> {
    inner: Rc<RefCell<Vec<Node<F>>>>,
}

impl<F: Scalar> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tensor in a [`Tape`].
pub struct Var<F: Scalar> {
    tape: Tape<F>,
    id: usize,
    shape: Vec<usize>,
}

impl<F: Scalar> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl<F: Scalar> Var<F> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn node_id(&self) -> usize {
        self.id
    }

    /// Handle to the tape this variable lives on.
    pub fn tape(&self) -> Tape<F> {
        self.tape.clone()
    }

    pub fn matmul(&self, rhs: &Var<F>) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::MatMul, &[self, rhs])
    }

    pub fn add(&self, rhs: &Var<F>) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::Add, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Var<F>) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::ElemMul, &[self, rhs])
    }

    pub fn sigmoid(&self) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::Sigmoid, &[self])
    }

    pub fn tanh(&self) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::Tanh, &[self])
    }

    pub fn softmax(&self) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::Softmax, &[self])
    }

    pub fn log_softmax(&self) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::LogSoftmax, &[self])
    }

    pub fn sum(&self) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::Sum, &[self])
    }

    pub fn scale(&self, factor: F) -> Result<Var<F>, AutodiffError> {
        self.tape.apply(Primitive::ScalarScale { factor }, &[self])
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Number of recorded applications (including leaves).
    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: NodeOp<F>, shape: Vec<usize>, values: Vec<F>) -> Var<F> {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            values,
            grad: Vec::new(),
        });
        Var {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// Copies a persistent tensor onto the tape as a differentiable leaf.
    pub fn leaf(&self, tensor: &Tensor<F>) -> Var<F> {
        self.push(
            NodeOp::Leaf,
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
        )
    }

    /// Constant leaf from raw values (participates in forward only in the
    /// sense that its gradient is discarded by callers).
    pub fn constant(&self, shape: Vec<usize>, values: Vec<F>) -> Result<Var<F>, AutodiffError> {
        let t = Tensor::from_values(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn constant_scalar(&self, v: F) -> Var<F> {
        self.push(NodeOp::Leaf, vec![1], vec![v])
    }

    pub fn ones(&self, shape: Vec<usize>) -> Var<F> {
        let len = shape.iter().product();
        self.push(NodeOp::Leaf, shape, vec![F::one(); len])
    }

    /// Concatenates inputs along their last axis.
    pub fn concat(&self, inputs: &[&Var<F>]) -> Result<Var<F>, AutodiffError> {
        self.apply(Primitive::Concat, inputs)
    }

    /// Gathers row `id` from a 2-D embedding table.
    pub fn embed(&self, table: &Var<F>, id: usize) -> Result<Var<F>, AutodiffError> {
        self.apply(Primitive::EmbeddingLookup { id }, &[table])
    }

    pub fn value(&self, var: &Var<F>) -> Vec<F> {
        self.inner.borrow()[var.id].values.clone()
    }

    pub fn scalar_value(&self, var: &Var<F>) -> F {
        self.inner.borrow()[var.id].values[0]
    }

    /// Gradient of the last `backward` target w.r.t. `var`. Empty until
    /// `backward` has run.
    pub fn grad(&self, var: &Var<F>) -> Vec<F> {
        self.inner.borrow()[var.id].grad.clone()
    }

    /// Adds the tape gradient of `var` into a persistent tensor's buffer.
    pub fn accumulate_into(&self, var: &Var<F>, target: &mut Tensor<F>) {
        let nodes = self.inner.borrow();
        target.accumulate_grad(&nodes[var.id].grad);
    }

    fn check_same_tape(
        &self,
        primitive: &'static str,
        inputs: &[&Var<F>],
    ) -> Result<(), AutodiffError> {
        for v in inputs {
            if !Rc::ptr_eq(&self.inner, &v.tape.inner) {
                return Err(AutodiffError::TapeMismatch { primitive });
            }
        }
        Ok(())
    }

    /// Applies one primitive and appends the application to the record.
    pub fn apply(
        &self,
        primitive: Primitive<F>,
        inputs: &[&Var<F>],
    ) -> Result<Var<F>, AutodiffError> {
        let name = primitive.name();
        self.check_same_tape(name, inputs)?;
        let arity_ok = match primitive {
            Primitive::MatMul | Primitive::Add | Primitive::ElemMul => inputs.len() == 2,
            Primitive::Concat => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            let expected = match primitive {
                Primitive::MatMul | Primitive::Add | Primitive::ElemMul => 2,
                _ => 1,
            };
            return Err(AutodiffError::Arity {
                primitive: name,
                expected,
                got: inputs.len(),
            });
        }

        let out = match primitive {
            Primitive::MatMul => self.do_matmul(inputs[0], inputs[1])?,
            Primitive::Add => self.do_add(inputs[0], inputs[1])?,
            Primitive::ElemMul => self.do_elem_mul(inputs[0], inputs[1])?,
            Primitive::Sigmoid => self.do_unary(inputs[0], true),
            Primitive::Tanh => self.do_unary(inputs[0], false),
            Primitive::Softmax => self.do_softmax(inputs[0], false)?,
            Primitive::LogSoftmax => self.do_softmax(inputs[0], true)?,
            Primitive::Concat => self.do_concat(inputs)?,
            Primitive::EmbeddingLookup { id } => self.do_embed(inputs[0], id)?,
            Primitive::Sum => {
                let total = self.value_sum(inputs[0]);
                self.push(NodeOp::Sum { x: inputs[0].id }, vec![1], vec![total])
            }
            Primitive::ScalarScale { factor } => {
                let values: Vec<F> = self.inner.borrow()[inputs[0].id]
                    .values
                    .iter()
                    .map(|v| *v * factor)
                    .collect();
                self.push(
                    NodeOp::Scale {
                        x: inputs[0].id,
                        factor,
                    },
                    inputs[0].shape.clone(),
                    values,
                )
            }
        };

        {
            let nodes = self.inner.borrow();
            if nodes[out.id].values.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    context: name.to_string(),
                });
            }
        }
        Ok(out)
    }

    fn value_sum(&self, x: &Var<F>) -> F {
        self.inner.borrow()[x.id].values.iter().copied().sum()
    }

    fn do_matmul(&self, lhs: &Var<F>, rhs: &Var<F>) -> Result<Var<F>, AutodiffError> {
        let (m, k, n, out_shape) = match (lhs.shape.as_slice(), rhs.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n, vec![*m, *n]),
            ([k], [k2, n]) if k == k2 => (1, *k, *n, vec![*n]),
            ([m, k], [k2]) if k == k2 => (*m, *k, 1, vec![*m]),
            ([k], [k2]) if k == k2 => (1, *k, 1, vec![1]),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    primitive: "matrix-multiply",
                    lhs: lhs.shape.clone(),
                    rhs: rhs.shape.clone(),
                })
            }
        };
        let nodes = self.inner.borrow();
        let a = &nodes[lhs.id].values;
        let b = &nodes[rhs.id].values;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = a[i * k + l];
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += ail * brow[j];
                }
            }
        }
        drop(nodes);
        Ok(self.push(
            NodeOp::MatMul {
                lhs: lhs.id,
                rhs: rhs.id,
                m,
                k,
                n,
            },
            out_shape,
            out,
        ))
    }

    fn do_add(&self, lhs: &Var<F>, rhs: &Var<F>) -> Result<Var<F>, AutodiffError> {
        if lhs.shape != rhs.shape {
            return Err(AutodiffError::ShapeMismatch {
                primitive: "add",
                lhs: lhs.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let values: Vec<F> = {
            let nodes = self.inner.borrow();
            nodes[lhs.id]
                .values
                .iter()
                .zip(&nodes[rhs.id].values)
                .map(|(a, b)| *a + *b)
                .collect()
        };
        Ok(self.push(
            NodeOp::Add {
                lhs: lhs.id,
                rhs: rhs.id,
            },
            lhs.shape.clone(),
            values,
        ))
    }

    fn do_elem_mul(&self, lhs: &Var<F>, rhs: &Var<F>) -> Result<Var<F>, AutodiffError> {
        let lhs_len: usize = lhs.shape.iter().product();
        let rhs_len: usize = rhs.shape.iter().product();
        let out_shape = if lhs.shape == rhs.shape {
            lhs.shape.clone()
        } else if lhs_len == 1 {
            rhs.shape.clone()
        } else if rhs_len == 1 {
            lhs.shape.clone()
        } else {
            return Err(AutodiffError::ShapeMismatch {
                primitive: "elementwise-multiply",
                lhs: lhs.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        };
        let values: Vec<F> = {
            let nodes = self.inner.borrow();
            let a = &nodes[lhs.id].values;
            let b = &nodes[rhs.id].values;
            if a.len() == b.len() {
                a.iter().zip(b).map(|(x, y)| *x * *y).collect()
            } else if a.len() == 1 {
                b.iter().map(|y| a[0] * *y).collect()
            } else {
                a.iter().map(|x| *x * b[0]).collect()
            }
        };
        Ok(self.push(
            NodeOp::ElemMul {
                lhs: lhs.id,
                rhs: rhs.id,
            },
            out_shape,
            values,
        ))
    }

    fn do_unary(&self, x: &Var<F>, is_sigmoid: bool) -> Var<F> {
        let values: Vec<F> = {
            let nodes = self.inner.borrow();
            nodes[x.id]
                .values
                .iter()
                .map(|v| {
                    if is_sigmoid {
                        F::one() / (F::one() + (-*v).exp())
                    } else {
                        v.tanh()
                    }
                })
                .collect()
        };
        let op = if is_sigmoid {
            NodeOp::Sigmoid { x: x.id }
        } else {
            NodeOp::Tanh { x: x.id }
        };
        self.push(op, x.shape.clone(), values)
    }

    fn do_softmax(&self, x: &Var<F>, log: bool) -> Result<Var<F>, AutodiffError> {
        let cols = match x.shape.as_slice() {
            [n] => *n,
            [_, n] => *n,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    primitive: if log { "log-softmax" } else { "softmax" },
                    lhs: x.shape.clone(),
                    rhs: vec![],
                })
            }
        };
        if cols == 0 {
            return Err(AutodiffError::ShapeMismatch {
                primitive: if log { "log-softmax" } else { "softmax" },
                lhs: x.shape.clone(),
                rhs: vec![],
            });
        }
        let values: Vec<F> = {
            let nodes = self.inner.borrow();
            let xs = &nodes[x.id].values;
            let mut out = Vec::with_capacity(xs.len());
            for row in xs.chunks(cols) {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let z: F = row.iter().map(|v| (*v - max).exp()).sum();
                if log {
                    let log_z = max + z.ln();
                    out.extend(row.iter().map(|v| *v - log_z));
                } else {
                    out.extend(row.iter().map(|v| (*v - max).exp() / z));
                }
            }
            out
        };
        let op = if log {
            NodeOp::LogSoftmax { x: x.id, cols }
        } else {
            NodeOp::Softmax { x: x.id, cols }
        };
        Ok(self.push(op, x.shape.clone(), values))
    }

    fn do_concat(&self, inputs: &[&Var<F>]) -> Result<Var<F>, AutodiffError> {
        let rank = inputs[0].shape.len();
        if rank == 0 {
            return Err(AutodiffError::ShapeMismatch {
                primitive: "concatenate",
                lhs: inputs[0].shape.clone(),
                rhs: vec![],
            });
        }
        let lead = &inputs[0].shape[..rank - 1];
        for v in &inputs[1..] {
            if v.shape.len() != rank || &v.shape[..rank - 1] != lead {
                return Err(AutodiffError::ShapeMismatch {
                    primitive: "concatenate",
                    lhs: inputs[0].shape.clone(),
                    rhs: v.shape.clone(),
                });
            }
        }
        let segments: Vec<usize> = inputs.iter().map(|v| v.shape[rank - 1]).collect();
        let total_last: usize = segments.iter().sum();
        let outer: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.push(total_last);

        let values: Vec<F> = {
            let nodes = self.inner.borrow();
            let mut out = Vec::with_capacity(outer * total_last);
            for row in 0..outer {
                for (v, seg) in inputs.iter().zip(&segments) {
                    let src = &nodes[v.id].values[row * seg..(row + 1) * seg];
                    out.extend_from_slice(src);
                }
            }
            out
        };
        Ok(self.push(
            NodeOp::Concat {
                inputs: inputs.iter().map(|v| v.id).collect(),
                segments,
            },
            out_shape,
            values,
        ))
    }

    fn do_embed(&self, table: &Var<F>, id: usize) -> Result<Var<F>, AutodiffError> {
        let (rows, cols) = match table.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    primitive: "embedding-lookup",
                    lhs: table.shape.clone(),
                    rhs: vec![],
                })
            }
        };
        if id >= rows {
            return Err(AutodiffError::EmbedOutOfRange { id, rows });
        }
        let values: Vec<F> = {
            let nodes = self.inner.borrow();
            nodes[table.id].values[id * cols..(id + 1) * cols].to_vec()
        };
        Ok(self.push(
            NodeOp::Embed {
                table: table.id,
                id,
            },
            vec![cols],
            values,
        ))
    }

    /// Populates every node's gradient with `∂loss/∂node` by a reverse
    /// sweep. Nodes not reachable from `loss` end with zero gradients.
    pub fn backward(&self, loss: &Var<F>) -> Result<(), AutodiffError> {
        self.check_same_tape("backward", &[loss])?;
        if loss.shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss.shape.clone(),
            });
        }
        let mut nodes = self.inner.borrow_mut();
        for node in nodes.iter_mut() {
            node.grad = vec![F::zero(); node.values.len()];
        }
        nodes[loss.id].grad[0] = F::one();

        for i in (0..=loss.id).rev() {
            let (before, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            match &node.op {
                NodeOp::Leaf => {}
                NodeOp::MatMul { lhs, rhs, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if *lhs == *rhs {
                        // dX for X·X: both factor positions contribute.
                        let a = before[*lhs].values.clone();
                        let g = &mut before[*lhs].grad;
                        for i0 in 0..m {
                            for j in 0..n {
                                let d = node.grad[i0 * n + j];
                                for l in 0..k {
                                    g[i0 * k + l] += d * a[l * n + j];
                                    g[l * n + j] += a[i0 * k + l] * d;
                                }
                            }
                        }
                    } else {
                        let (first, second) = if lhs < rhs {
                            let (x, y) = before.split_at_mut(*rhs);
                            (&mut x[*lhs], &mut y[0])
                        } else {
                            let (x, y) = before.split_at_mut(*lhs);
                            (&mut y[0], &mut x[*rhs])
                        };
                        // first = lhs node, second = rhs node
                        for i0 in 0..m {
                            for j in 0..n {
                                let d = node.grad[i0 * n + j];
                                for l in 0..k {
                                    first.grad[i0 * k + l] += d * second.values[l * n + j];
                                    second.grad[l * n + j] += first.values[i0 * k + l] * d;
                                }
                            }
                        }
                    }
                }
                NodeOp::Add { lhs, rhs } => {
                    for (idx, d) in node.grad.iter().enumerate() {
                        before[*lhs].grad[idx] += *d;
                    }
                    for (idx, d) in node.grad.iter().enumerate() {
                        before[*rhs].grad[idx] += *d;
                    }
                }
                NodeOp::ElemMul { lhs, rhs } => {
                    let a_len = before[*lhs].values.len();
                    let b_len = before[*rhs].values.len();
                    if a_len == b_len {
                        for idx in 0..a_len {
                            let d = node.grad[idx];
                            let av = before[*lhs].values[idx];
                            let bv = before[*rhs].values[idx];
                            before[*lhs].grad[idx] += d * bv;
                            before[*rhs].grad[idx] += d * av;
                        }
                    } else if a_len == 1 {
                        let av = before[*lhs].values[0];
                        let mut acc = F::zero();
                        for idx in 0..b_len {
                            let d = node.grad[idx];
                            acc += d * before[*rhs].values[idx];
                            before[*rhs].grad[idx] += d * av;
                        }
                        before[*lhs].grad[0] += acc;
                    } else {
                        let bv = before[*rhs].values[0];
                        let mut acc = F::zero();
                        for idx in 0..a_len {
                            let d = node.grad[idx];
                            acc += d * before[*lhs].values[idx];
                            before[*lhs].grad[idx] += d * bv;
                        }
                        before[*rhs].grad[0] += acc;
                    }
                }
                NodeOp::Sigmoid { x } => {
                    for idx in 0..node.values.len() {
                        let y = node.values[idx];
                        before[*x].grad[idx] += node.grad[idx] * y * (F::one() - y);
                    }
                }
                NodeOp::Tanh { x } => {
                    for idx in 0..node.values.len() {
                        let y = node.values[idx];
                        before[*x].grad[idx] += node.grad[idx] * (F::one() - y * y);
                    }
                }
                NodeOp::Softmax { x, cols } => {
                    for (row_idx, row) in node.values.chunks(*cols).enumerate() {
                        let base = row_idx * *cols;
                        let dot: F = (0..*cols).map(|j| node.grad[base + j] * row[j]).sum();
                        for j in 0..*cols {
                            before[*x].grad[base + j] += row[j] * (node.grad[base + j] - dot);
                        }
                    }
                }
                NodeOp::LogSoftmax { x, cols } => {
                    for (row_idx, row) in node.values.chunks(*cols).enumerate() {
                        let base = row_idx * *cols;
                        let total: F = (0..*cols).map(|j| node.grad[base + j]).sum();
                        for j in 0..*cols {
                            before[*x].grad[base + j] +=
                                node.grad[base + j] - row[j].exp() * total;
                        }
                    }
                }
                NodeOp::Concat { inputs, segments } => {
                    let total_last: usize = segments.iter().sum();
                    let outer = node.values.len() / total_last.max(1);
                    for row in 0..outer {
                        let mut offset = 0;
                        for (input, seg) in inputs.iter().zip(segments) {
                            for j in 0..*seg {
                                before[*input].grad[row * seg + j] +=
                                    node.grad[row * total_last + offset + j];
                            }
                            offset += seg;
                        }
                    }
                }
                NodeOp::Embed { table, id } => {
                    let cols = node.values.len();
                    for j in 0..cols {
                        before[*table].grad[*id * cols + j] += node.grad[j];
                    }
                }
                NodeOp::Sum { x } => {
                    let d = node.grad[0];
                    for g in before[*x].grad.iter_mut() {
                        *g += d;
                    }
                }
                NodeOp::Scale { x, factor } => {
                    for (idx, d) in node.grad.iter().enumerate() {
                        before[*x].grad[idx] += *factor * *d;
                    }
                }
            }
        }

        for node in nodes.iter() {
            if node.grad.iter().any(|g| !g.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    context: "backward".to_string(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tape<f64>;

    fn var(tape: &T, shape: Vec<usize>, values: Vec<f64>) -> Var<f64> {
        tape.constant(shape, values).unwrap()
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        for v in [-3.0, 0.0, 7.5] {
            let tape = T::new();
            let x = var(&tape, vec![4], vec![v; 4]);
            let y = x.softmax().unwrap();
            let out = tape.value(&y);
            for o in &out {
                assert!((o - 0.25).abs() < 1e-15);
            }
            let total: f64 = out.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_and_tanh_identity_points() {
        let tape = T::new();
        let x = var(&tape, vec![1], vec![0.0]);
        assert_eq!(tape.value(&x.sigmoid().unwrap()), vec![0.5]);
        assert_eq!(tape.value(&x.tanh().unwrap()), vec![0.0]);
    }

    #[test]
    fn matmul_identity_matrix() {
        let tape = T::new();
        let a = var(&tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = var(&tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = a.matmul(&eye).unwrap();
        assert_eq!(tape.value(&out), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_vector_conventions() {
        let tape = T::new();
        let v = var(&tape, vec![2], vec![1.0, 2.0]);
        let m = var(&tape, vec![2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]);
        let row = v.matmul(&m).unwrap();
        assert_eq!(row.shape(), &[3]);
        assert_eq!(tape.value(&row), vec![1.0, 2.0, 4.0]);

        let w = var(&tape, vec![3], vec![1.0, 1.0, 1.0]);
        let col = m.matmul(&w).unwrap();
        assert_eq!(col.shape(), &[2]);
        assert_eq!(tape.value(&col), vec![3.0, 2.0]);

        let dot = v.matmul(&v).unwrap();
        assert_eq!(dot.shape(), &[1]);
        assert_eq!(tape.value(&dot), vec![5.0]);
    }

    #[test]
    fn backward_linear_scale() {
        let tape = T::new();
        let x = var(&tape, vec![3], vec![0.5, -1.0, 2.0]);
        let loss = x.scale(3.0).unwrap().sum().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x), vec![3.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let tape = T::new();
        let x = var(&tape, vec![4], vec![0.0; 4]);
        let loss = x.sigmoid().unwrap().sum().unwrap();
        tape.backward(&loss).unwrap();
        for g in tape.grad(&x) {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_linear_chain_is_exact() {
        // All-dyadic values: the reverse sweep must reproduce the exact
        // chain-rule product with no rounding slack.
        let tape = T::new();
        let a = var(&tape, vec![2, 2], vec![0.5, 0.25, 1.0, 2.0]);
        let x = var(&tape, vec![2], vec![4.0, 8.0]);
        let y = a.matmul(&x).unwrap().scale(0.5).unwrap();
        let loss = y.sum().unwrap();
        tape.backward(&loss).unwrap();
        // d/dx = 0.5 * A^T * ones
        assert_eq!(tape.grad(&x), vec![0.5 * (0.5 + 1.0), 0.5 * (0.25 + 2.0)]);
        // d/dA[i][j] = 0.5 * x[j]
        assert_eq!(tape.grad(&a), vec![2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn unreachable_nodes_get_zero_grad() {
        let tape = T::new();
        let x = var(&tape, vec![2], vec![1.0, 2.0]);
        let unused = var(&tape, vec![2], vec![5.0, 6.0]);
        let _dangling = unused.tanh().unwrap();
        let loss = x.sum().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&unused), vec![0.0, 0.0]);
        assert_eq!(tape.grad(&x), vec![1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let tape = T::new();
        let a = var(&tape, vec![2, 3], vec![0.0; 6]);
        let b = var(&tape, vec![2, 2], vec![0.0; 4]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matrix-multiply"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = T::new();
        let x = var(&tape, vec![1], vec![1e308]);
        let err = x.scale(10.0).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { .. }));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = T::new();
        let x = var(&tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarLoss { .. }));
    }

    #[test]
    fn concat_and_split_gradients() {
        let tape = T::new();
        let a = var(&tape, vec![2], vec![1.0, 2.0]);
        let b = var(&tape, vec![3], vec![3.0, 4.0, 5.0]);
        let c = tape.concat(&[&a, &b]).unwrap();
        assert_eq!(tape.value(&c), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let loss = c.scale(2.0).unwrap().sum().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&a), vec![2.0, 2.0]);
        assert_eq!(tape.grad(&b), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let tape = T::new();
        let table = var(&tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let row = tape.embed(&table, 1).unwrap();
        assert_eq!(tape.value(&row), vec![3.0, 4.0]);
        let loss = row.sum().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&table), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

        assert!(matches!(
            tape.embed(&table, 3),
            Err(AutodiffError::EmbedOutOfRange { .. })
        ));
    }

    #[test]
    fn scalar_broadcast_mul() {
        let tape = T::new();
        let s = tape.constant_scalar(2.0);
        let x = var(&tape, vec![3], vec![1.0, 2.0, 3.0]);
        let y = s.mul(&x).unwrap();
        assert_eq!(tape.value(&y), vec![2.0, 4.0, 6.0]);
        let loss = y.sum().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x), vec![2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(&s), vec![6.0]);
    }

    #[test]
    fn self_matmul_accumulates_both_sides() {
        // x·x (dot with itself): d/dx = 2x.
        let tape = T::new();
        let x = var(&tape, vec![2], vec![3.0, 4.0]);
        let loss = x.matmul(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x), vec![6.0, 8.0]);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1..4usize,
            cols in 1..6usize,
            seed_vals in proptest::collection::vec(-50.0..50.0f64, 24),
        ) {
            let tape = T::new();
            let values: Vec<f64> = (0..rows * cols).map(|i| seed_vals[i % seed_vals.len()]).collect();
            let x = var(&tape, vec![rows, cols], values);
            let y = tape.value(&x.softmax().unwrap());
            for row in y.chunks(cols) {
                let total: f64 = row.iter().sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-12, "row sum {total}");
                for v in row {
                    proptest::prop_assert!(*v >= 0.0);
                }
            }
        }
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let tape = T::new();
        let x = var(&tape, vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]);
        let ls = tape.value(&x.log_softmax().unwrap());
        let sm = tape.value(&x.softmax().unwrap());
        for (a, b) in ls.iter().zip(&sm) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
        for row in sm.chunks(3) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
