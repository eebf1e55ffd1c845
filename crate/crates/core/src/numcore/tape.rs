//! Reverse-mode differentiation over a small, closed set of primitives.
//!
//! Every primitive has a hand-written backward rule. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list is a valid
//! topological order for the backward pass.

use super::matrix::{dot, l2_norm, log_sum_exp, softmax_into, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitives the tape understands.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `a · b`.
    MatMul,
    /// `x + 1·bᵀ`, with `b` a `1×n` row broadcast over the rows of `x`.
    BiasAdd,
    /// Elementwise `max(x, 0)`. The subgradient at exactly 0 is 0.
    Relu,
    /// Each row divided by its L2 norm. A zero row maps to zero and passes
    /// zero gradient.
    RowNormalize,
    /// Row-wise `log Σ exp`, producing an `m×1` column.
    LogSumExp,
    /// From row `i`, pick column `indices[i]`, producing an `m×1` column.
    GatherRows(Vec<usize>),
    /// Multiply every entry by a constant.
    Scale(f64),
    /// Elementwise sum of two equally shaped inputs.
    Add,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::BiasAdd => "bias_add",
            Primitive::Relu => "relu",
            Primitive::RowNormalize => "row_normalize",
            Primitive::LogSumExp => "log_sum_exp",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::Scale(_) => "scale",
            Primitive::Add => "add",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::BiasAdd | Primitive::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Matrix,
}

/// Ordered record of primitive evaluations with their forward values.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], one slot per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `node`, if the seeded outputs depend on it.
    pub fn get(&self, node: NodeId) -> Option<&Matrix> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns a zero matrix of the right shape
    /// when no gradient reached `node`.
    pub fn get_or_zeros(&self, node: NodeId, tape: &GradTape) -> Matrix {
        self.get(node).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(node).shape();
            Matrix::zeros(r, c)
        })
    }

    pub fn take(&mut self, node: NodeId) -> Option<Matrix> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Node ids from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, node: NodeId) -> &Matrix {
        &self.nodes[node.0].value
    }

    /// Evaluates `op` on recorded inputs and records the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let name = op.name();
        if inputs.len() != op.arity() {
            return Err(Error::shape(
                name,
                format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            ));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Protocol(format!(
                    "{name}: input node {} is not on the tape",
                    id.0
                )));
            }
        }
        let vals: Vec<&Matrix> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &vals)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Primitive::BiasAdd, &[x, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowNormalize, &[x])
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSumExp, &[x])
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::GatherRows(indices), &[x])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(s), &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    /// Backward pass from a single output seeded with `seed`.
    pub fn backward(&self, output: NodeId, seed: Matrix) -> Result<Gradients> {
        self.backward_many(vec![(output, seed)])
    }

    /// Backward pass from several outputs at once; their contributions are
    /// summed wherever the graphs share nodes.
    pub fn backward_many(&self, seeds: Vec<(NodeId, Matrix)>) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Protocol("backward called before forward".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (id, seed) in seeds {
            let Some(node) = self.nodes.get(id.0) else {
                return Err(Error::Protocol(format!(
                    "seeded node {} is not on the tape",
                    id.0
                )));
            };
            if node.value.shape() != seed.shape() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed {:?} for output {:?}",
                        seed.shape(),
                        node.value.shape()
                    ),
                ));
            }
            accumulate(&mut grads[id.0], seed)?;
            last = last.max(id.0);
        }

        for idx in (0..=last).rev() {
            let Some(op) = &self.nodes[idx].op else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let input_vals: Vec<&Matrix> =
                node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let input_grads = backward_rule(op, &input_vals, &node.value, &upstream)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                accumulate(&mut grads[input.0], g)?;
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn forward(op: &Primitive, inputs: &[&Matrix]) -> Result<Matrix> {
    let x = inputs[0];
    match op {
        Primitive::MatMul => x.matmul(inputs[1]),
        Primitive::BiasAdd => {
            let b = inputs[1];
            if b.rows() != 1 || b.cols() != x.cols() {
                return Err(Error::shape(
                    "bias_add",
                    format!("bias {:?} for input {:?}", b.shape(), x.shape()),
                ));
            }
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, &bv) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                    *o += bv;
                }
            }
            Ok(out)
        }
        Primitive::Relu => Ok(x.map(|v| if v > 0.0 { v } else { 0.0 })),
        Primitive::RowNormalize => Ok(x.normalize_rows()),
        Primitive::LogSumExp => {
            let data = x.row_iter().map(|r| log_sum_exp(r.iter().copied())).collect();
            Matrix::from_vec(x.rows(), 1, data)
        }
        Primitive::GatherRows(indices) => {
            if indices.len() != x.rows() || indices.iter().any(|&c| c >= x.cols()) {
                return Err(Error::shape(
                    "gather_rows",
                    format!("{} indices into {:?}", indices.len(), x.shape()),
                ));
            }
            let data = indices.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
            Matrix::from_vec(x.rows(), 1, data)
        }
        Primitive::Scale(s) => Ok(x.scale(*s)),
        Primitive::Add => {
            let mut out = x.clone();
            out.add_assign(inputs[1])?;
            Ok(out)
        }
    }
}

fn backward_rule(
    op: &Primitive,
    inputs: &[&Matrix],
    output: &Matrix,
    upstream: &Matrix,
) -> Result<Vec<Matrix>> {
    let x = inputs[0];
    Ok(match op {
        Primitive::MatMul => {
            let b = inputs[1];
            vec![upstream.matmul_t(b)?, x.t_matmul(upstream)?]
        }
        Primitive::BiasAdd => {
            let mut db = Matrix::zeros(1, x.cols());
            for row in upstream.row_iter() {
                for (d, &u) in db.as_mut_slice().iter_mut().zip(row) {
                    *d += u;
                }
            }
            vec![upstream.clone(), db]
        }
        Primitive::Relu => {
            let mut dx = upstream.clone();
            for (d, &v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }
            vec![dx]
        }
        Primitive::RowNormalize => {
            // d(x/‖x‖) = (dy − y⟨y, dy⟩) / ‖x‖
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let norm = l2_norm(x.row(r));
                if norm == 0.0 {
                    continue;
                }
                let y = output.row(r);
                let dy = upstream.row(r);
                let proj = dot(y, dy);
                for ((d, &yv), &dyv) in dx.row_mut(r).iter_mut().zip(y).zip(dy) {
                    *d = (dyv - yv * proj) / norm;
                }
            }
            vec![dx]
        }
        Primitive::LogSumExp => {
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let u = upstream.get(r, 0);
                let row = dx.row_mut(r);
                softmax_into(x.row(r), row);
                row.iter_mut().for_each(|v| *v *= u);
            }
            vec![dx]
        }
        Primitive::GatherRows(indices) => {
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for (r, &c) in indices.iter().enumerate() {
                dx.set(r, c, upstream.get(r, 0));
            }
            vec![dx]
        }
        Primitive::Scale(s) => vec![upstream.scale(*s)],
        Primitive::Add => vec![upstream.clone(), upstream.clone()],
    })
}
