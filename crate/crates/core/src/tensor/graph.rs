//! The recording tape for reverse-mode differentiation.
//!
//! [`Graph::apply`] executes a primitive and records a node when any
//! input is on the gradient path. Values that never touch a gradient
//! leaf stay plain tensors, so inference pays no tape cost. Nodes are
//! stored in execution order, which is a topological order by
//! construction; [`Graph::backward`] walks it in reverse with a fixed
//! accumulation order.

use super::{kernels, Scalar, Tensor};
use crate::{Error, Result};

/// Primitive operations understood by the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum PrimOp {
    /// 2-D convolution, stride 1, symmetric zero padding.
    Conv2d { pad: usize },
    /// `x (b,i) * w' (o,i) + bias`.
    Linear,
    /// Plain 2-D matrix product.
    MatMul,
    GroupNorm { groups: usize, eps: f64 },
    Silu,
    Add,
    Mul,
    MulScalar(f64),
    AddScalar(f64),
    /// `x * (1 + scale) + shift` with per-(batch, channel) scale/shift.
    ScaleShift,
    ConcatChannels,
    AvgPool2,
    UpsampleNearest2,
    Sum { per_batch: bool },
    Mean { per_batch: bool },
    Reshape(Vec<usize>),
    Ln,
    ClampMin(f64),
}

impl PrimOp {
    fn name(&self) -> &'static str {
        match self {
            PrimOp::Conv2d { .. } => "conv2d",
            PrimOp::Linear => "linear",
            PrimOp::MatMul => "matmul",
            PrimOp::GroupNorm { .. } => "group_norm",
            PrimOp::Silu => "silu",
            PrimOp::Add => "add",
            PrimOp::Mul => "mul",
            PrimOp::MulScalar(_) => "mul_scalar",
            PrimOp::AddScalar(_) => "add_scalar",
            PrimOp::ScaleShift => "scale_shift",
            PrimOp::ConcatChannels => "concat_channels",
            PrimOp::AvgPool2 => "avg_pool2",
            PrimOp::UpsampleNearest2 => "upsample_nearest2",
            PrimOp::Sum { .. } => "sum",
            PrimOp::Mean { .. } => "mean",
            PrimOp::Reshape(_) => "reshape",
            PrimOp::Ln => "ln",
            PrimOp::ClampMin(_) => "clamp_min",
        }
    }

    fn arity(&self) -> usize {
        match self {
            PrimOp::Conv2d { .. } | PrimOp::Linear | PrimOp::GroupNorm { .. } => 3,
            PrimOp::ScaleShift => 3,
            PrimOp::MatMul | PrimOp::Add | PrimOp::Mul | PrimOp::ConcatChannels => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeId(usize);

#[derive(Clone)]
struct Input<S: Scalar> {
    tensor: Tensor<S>,
    node: Option<NodeId>,
}

enum NodeKind<S: Scalar> {
    Leaf,
    Op { op: PrimOp, inputs: Vec<Input<S>> },
}

struct Node<S: Scalar> {
    kind: NodeKind<S>,
    output: Tensor<S>,
}

/// A tensor plus its (optional) position on the tape.
///
/// Values with no node are constants: they can be shared across graphs
/// and threads freely.
#[derive(Clone)]
pub struct Value<S: Scalar> {
    tensor: Tensor<S>,
    node: Option<NodeId>,
}

impl<S: Scalar> Value<S> {
    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// True when this value is tracked on a tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// A constant value that never joins a tape.
    pub fn constant(tensor: Tensor<S>) -> Self {
        Value { tensor, node: None }
    }
}

/// Recorded computation: topologically ordered operation nodes.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Registers a gradient leaf when the tensor requires gradients,
    /// otherwise returns a constant.
    pub fn leaf(&mut self, tensor: &Tensor<S>) -> Value<S> {
        if !tensor.requires_grad() {
            return Value::constant(tensor.clone());
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { kind: NodeKind::Leaf, output: tensor.clone() });
        Value { tensor: tensor.clone(), node: Some(id) }
    }

    pub fn constant(&self, tensor: &Tensor<S>) -> Value<S> {
        Value::constant(tensor.clone())
    }

    /// Executes a primitive, recording it when any input is tracked.
    pub fn apply(&mut self, op: PrimOp, inputs: &[&Value<S>]) -> Result<Value<S>> {
        if inputs.len() != op.arity() {
            return Err(Error::InvalidAttr {
                op: op.name(),
                detail: format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            });
        }
        let t: Vec<&Tensor<S>> = inputs.iter().map(|v| &v.tensor).collect();
        let output = match &op {
            PrimOp::Conv2d { pad } => kernels::conv2d(t[0], t[1], t[2], *pad)?,
            PrimOp::Linear => kernels::linear(t[0], t[1], t[2])?,
            PrimOp::MatMul => kernels::matmul(t[0], t[1])?,
            PrimOp::GroupNorm { groups, eps } => {
                kernels::group_norm(t[0], t[1], t[2], *groups, *eps)?
            }
            PrimOp::Silu => kernels::silu(t[0]),
            PrimOp::Add => kernels::add(t[0], t[1])?,
            PrimOp::Mul => kernels::mul(t[0], t[1])?,
            PrimOp::MulScalar(c) => t[0].map(|v| v * S::from_f64(*c)),
            PrimOp::AddScalar(c) => t[0].map(|v| v + S::from_f64(*c)),
            PrimOp::ScaleShift => kernels::scale_shift(t[0], t[1], t[2])?,
            PrimOp::ConcatChannels => kernels::concat_channels(t[0], t[1])?,
            PrimOp::AvgPool2 => kernels::avg_pool2(t[0])?,
            PrimOp::UpsampleNearest2 => kernels::upsample_nearest2(t[0])?,
            PrimOp::Sum { per_batch } => kernels::reduce(t[0], *per_batch, false)?,
            PrimOp::Mean { per_batch } => kernels::reduce(t[0], *per_batch, true)?,
            PrimOp::Reshape(shape) => {
                let numel: usize = shape.iter().product();
                if numel != t[0].numel() {
                    return Err(Error::ShapeMismatch {
                        op: "reshape",
                        detail: format!("{:?} -> {:?}", t[0].shape(), shape),
                    });
                }
                Tensor::from_vec(shape, t[0].data().to_vec())?
            }
            PrimOp::Ln => kernels::ln(t[0]),
            PrimOp::ClampMin(c) => kernels::clamp_min(t[0], *c),
        };
        if inputs.iter().all(|v| v.node.is_none()) {
            return Ok(Value::constant(output));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind: NodeKind::Op {
                op,
                inputs: inputs
                    .iter()
                    .map(|v| Input { tensor: v.tensor.clone(), node: v.node })
                    .collect(),
            },
            output: output.clone(),
        });
        Ok(Value { tensor: output, node: Some(id) })
    }

    /// Re-executes every recorded node from its saved inputs and checks
    /// the stored output is reproduced bit-exactly.
    pub fn verify_replay(&self) -> Result<()> {
        for node in &self.nodes {
            let (op, inputs) = match &node.kind {
                NodeKind::Leaf => continue,
                NodeKind::Op { op, inputs } => (op, inputs),
            };
            let vals: Vec<Value<S>> =
                inputs.iter().map(|i| Value::constant(i.tensor.clone())).collect();
            let refs: Vec<&Value<S>> = vals.iter().collect();
            let mut scratch = Graph::new();
            let replayed = scratch.apply(op.clone(), &refs)?;
            if !replayed.tensor().bit_eq(&node.output) {
                return Err(Error::NonFinite {
                    context: format!("tape replay diverged at {}", op.name()),
                });
            }
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// tracked leaf. Leaves not reachable from the loss read back as
    /// zeros through [`Gradients::get_or_zeros`].
    pub fn backward(&self, loss: &Value<S>) -> Result<Gradients<S>> {
        if loss.tensor.numel() != 1 {
            return Err(Error::NotScalar { numel: loss.tensor.numel() });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        let root = match loss.node {
            Some(NodeId(id)) => id,
            None => return Ok(Gradients { grads }),
        };
        grads[root] = Some(Tensor::scalar(S::one()));
        for id in (0..=root).rev() {
            let (op, inputs) = match &self.nodes[id].kind {
                NodeKind::Leaf => continue,
                NodeKind::Op { op, inputs } => (op, inputs),
            };
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let input_grads = Self::input_grads(op, inputs, &grad)?;
            for (input, ig) in inputs.iter().zip(input_grads) {
                if let (Some(NodeId(src)), Some(ig)) = (input.node, ig) {
                    grads[src] = Some(match grads[src].take() {
                        Some(acc) => kernels::add(&acc, &ig)?,
                        None => ig,
                    });
                }
            }
        }
        // Leaf gradients survive; interior ones were consumed above.
        Ok(Gradients { grads })
    }

    fn input_grads(
        op: &PrimOp,
        inputs: &[Input<S>],
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let t: Vec<&Tensor<S>> = inputs.iter().map(|i| &i.tensor).collect();
        let need: Vec<bool> = inputs.iter().map(|i| i.node.is_some()).collect();
        Ok(match op {
            PrimOp::Conv2d { pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    t[0],
                    t[1],
                    t[2],
                    *pad,
                    grad,
                    (need[0], need[1], need[2]),
                )?;
                vec![dx, dw, db]
            }
            PrimOp::Linear => {
                let (dx, dw, db) = kernels::linear_backward(t[0], t[1], t[2], grad)?;
                vec![Some(dx), Some(dw), Some(db)]
            }
            PrimOp::MatMul => {
                let (da, db) = kernels::matmul_backward(t[0], t[1], grad)?;
                vec![Some(da), Some(db)]
            }
            PrimOp::GroupNorm { groups, eps } => {
                let (dx, dg, db) =
                    kernels::group_norm_backward(t[0], t[1], t[2], *groups, *eps, grad)?;
                vec![Some(dx), Some(dg), Some(db)]
            }
            PrimOp::Silu => vec![Some(kernels::silu_backward(t[0], grad))],
            PrimOp::Add => vec![Some(grad.clone()), Some(grad.clone())],
            PrimOp::Mul => {
                let da = if need[0] { Some(kernels::mul(grad, t[1])?) } else { None };
                let db = if need[1] { Some(kernels::mul(grad, t[0])?) } else { None };
                vec![da, db]
            }
            PrimOp::MulScalar(c) => {
                let c = S::from_f64(*c);
                vec![Some(grad.map(|g| g * c))]
            }
            PrimOp::AddScalar(_) => vec![Some(grad.clone())],
            PrimOp::ScaleShift => {
                let (dx, ds, dt) = kernels::scale_shift_backward(t[0], t[1], t[2], grad)?;
                vec![Some(dx), Some(ds), Some(dt)]
            }
            PrimOp::ConcatChannels => {
                let (da, db) = kernels::concat_channels_backward(t[0], t[1], grad)?;
                vec![Some(da), Some(db)]
            }
            PrimOp::AvgPool2 => vec![Some(kernels::avg_pool2_backward(t[0], grad)?)],
            PrimOp::UpsampleNearest2 => {
                vec![Some(kernels::upsample_nearest2_backward(t[0], grad)?)]
            }
            PrimOp::Sum { per_batch } => {
                vec![Some(kernels::reduce_backward(t[0], *per_batch, false, grad)?)]
            }
            PrimOp::Mean { per_batch } => {
                vec![Some(kernels::reduce_backward(t[0], *per_batch, true, grad)?)]
            }
            PrimOp::Reshape(_) => {
                vec![Some(Tensor::from_vec(t[0].shape(), grad.data().to_vec())?)]
            }
            PrimOp::Ln => {
                let data: Vec<S> =
                    grad.data().iter().zip(t[0].data()).map(|(&g, &x)| g / x).collect();
                vec![Some(Tensor::from_vec(t[0].shape(), data)?)]
            }
            PrimOp::ClampMin(c) => {
                let c = S::from_f64(*c);
                let data: Vec<S> = grad
                    .data()
                    .iter()
                    .zip(t[0].data())
                    .map(|(&g, &x)| if x >= c { g } else { S::zero() })
                    .collect();
                vec![Some(Tensor::from_vec(t[0].shape(), data)?)]
            }
        })
    }
}

/// Gradient map produced by [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to a tracked value, if any
    /// gradient reached it.
    pub fn get(&self, value: &Value<S>) -> Option<&Tensor<S>> {
        let NodeId(id) = value.node?;
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`], but unreachable leaves read as zeros.
    pub fn get_or_zeros(&self, value: &Value<S>) -> Tensor<S> {
        match self.get(value) {
            Some(g) => g.clone(),
            None => Tensor::zeros(value.tensor().shape()),
        }
    }
}
