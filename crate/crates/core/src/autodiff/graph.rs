//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its inputs and its cached output.
//! Nodes whose inputs all carry values are evaluated immediately; graphs
//! built over unbound leaves ([`Graph::input`]) are evaluated later with
//! [`Graph::forward_eval`], which also replays a finished graph with new leaf
//! values.

use std::collections::HashMap;

use super::ops::Op;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    shape: Vec<usize>,
    value: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
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

    /// A leaf holding `value`. Gradients are reported for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Declares an unbound leaf of the given shape. Nodes depending on it
    /// stay unevaluated until [`Graph::forward_eval`] binds a value.
    pub fn input(&mut self, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("invalid leaf shape {shape:?}")));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: shape.to_vec(),
            value: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn value(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].value.as_ref()
    }

    /// The value of `var`, or an error if it has not been evaluated.
    pub fn get(&self, var: Var) -> Result<&Tensor> {
        self.value(var).ok_or(Error::NotEvaluated { node: var.0 })
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push(&mut self, op: Op, inputs: Vec<Var>) -> Result<Var> {
        let id = self.nodes.len();
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.nodes[v.0].shape.as_slice()).collect();
        let shape = op.infer_shape(&shapes).map_err(|detail| Error::ShapeMismatch {
            op: op.name(),
            node: id,
            detail,
        })?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = if inputs.iter().all(|v| self.nodes[v.0].value.is_some()) {
            Some(self.evaluate(id, &op, &inputs, &shape)?)
        } else {
            None
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn evaluate(&self, id: usize, op: &Op, inputs: &[Var], shape: &[usize]) -> Result<Tensor> {
        let ins: Vec<&Tensor> = inputs
            .iter()
            .map(|v| self.nodes[v.0].value.as_ref().expect("inputs evaluated"))
            .collect();
        let data = op.forward(&ins, shape);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    /// Evaluates every node in order, binding the given leaves first, and
    /// returns the value of the last node.
    ///
    /// Leaves not mentioned in `bindings` keep their current values; an
    /// unbound leaf that is still without a value is an error.
    pub fn forward_eval(&mut self, bindings: &[(Var, Tensor)]) -> Result<Tensor> {
        for (var, value) in bindings {
            let node = self
                .nodes
                .get_mut(var.0)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown node {}", var.0)))?;
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::NotALeaf { node: var.0 });
            }
            if node.shape != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "bind",
                    node: var.0,
                    detail: format!("declared {:?}, bound {:?}", node.shape, value.shape()),
                });
            }
            node.value = Some(value.clone());
        }
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                if self.nodes[id].value.is_none() {
                    return Err(Error::UnboundLeaf { node: id });
                }
                continue;
            }
            let node = &self.nodes[id];
            let value = self.evaluate(id, &node.op, &node.inputs, &node.shape)?;
            self.nodes[id].value = Some(value);
        }
        self.nodes
            .last()
            .and_then(|n| n.value.clone())
            .ok_or_else(|| Error::InvalidArgument("empty graph".into()))
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Every `requires_grad` leaf receives a gradient; leaves that do not
    /// influence the root get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        let root_value = root_node.value.as_ref().ok_or(Error::NotEvaluated { node: root.0 })?;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        slots[root.0] = Some(vec![1.0]);
        let mut grads = HashMap::new();

        for id in (0..=root.0).rev() {
            let Some(grad) = slots[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads.insert(Var(id), Tensor::from_parts(node.shape.clone(), grad));
                continue;
            }
            let out = node.value.as_ref().ok_or(Error::NotEvaluated { node: id })?;
            let mut ins = Vec::with_capacity(node.inputs.len());
            for v in &node.inputs {
                ins.push(self.nodes[v.0].value.as_ref().ok_or(Error::NotEvaluated { node: v.0 })?);
            }
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = node.op.backward(&ins, out, &grad, &need);
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut slots[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                grads
                    .entry(Var(id))
                    .or_insert_with(|| Tensor::zeros(&node.shape));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Operation builders.
impl Graph {
    pub fn identity(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Scale(1.0), vec![x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, vec![a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div, vec![a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(factor), vec![x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        self.push(Op::AddScalar(offset), vec![x])
    }

    /// Adds `bias[c]` to every element whose index along `axis` is `c`.
    pub fn add_channel(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        self.push(Op::ChannelAdd { axis }, vec![x, bias])
    }

    /// Multiplies every element whose index along `axis` is `c` by `scale[c]`.
    pub fn mul_channel(&mut self, x: Var, scale: Var, axis: usize) -> Result<Var> {
        self.push(Op::ChannelMul { axis }, vec![x, scale])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, vec![a, b])
    }

    /// 2-D convolution of `[n, ci, h, w]` with `[co, ci, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::Conv2d { stride, pad }, vec![x, weight])
    }

    /// Convolution with "same" padding (`k / 2`) for odd kernels.
    pub fn conv2d_same(&mut self, x: Var, weight: Var, stride: usize) -> Result<Var> {
        let k = *self.shape(weight).last().unwrap_or(&1);
        self.conv2d(x, weight, stride, k / 2)
    }

    /// Transposed 2-D convolution of `[n, ci, h, w]` with `[ci, co, k, k]`
    /// weights; output side is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::ConvTranspose2d { stride, pad }, vec![x, weight])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.push(Op::LeakyRelu(slope), vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid, vec![x])
    }

    /// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Silu, vec![x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp, vec![x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log { floor: None }, vec![x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.push(Op::Log { floor: Some(floor) }, vec![x])
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.push(Op::Pow(exponent), vec![x])
    }

    /// Per-sample, per-channel normalization over the spatial axes of a
    /// `[n, c, ...]` tensor.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::InstanceNorm { eps }, vec![x])
    }

    /// Normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { eps }, vec![x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax { axis }, vec![x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean, vec![x])
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::SumAxis { axis }, vec![x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(shape.to_vec()), vec![x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.push(Op::Permute(perm.to_vec()), vec![x])
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.push(Op::Slice { axis, start, end }, vec![x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    /// Depthwise causal convolution along the sequence axis of `[n, l, e]`
    /// with `[e, k]` taps: `y[t] = sum_j w[j] * x[t - (k - 1) + j]`.
    pub fn causal_conv1d(&mut self, x: Var, weight: Var) -> Result<Var> {
        self.push(Op::CausalConv1d, vec![x, weight])
    }

    /// Linear state-space recurrence over `[n, t, d_in]` sequences.
    ///
    /// With states `x_0 = x0`, `x_{t+1} = A x_t + B u_t (+ w_t)` the output
    /// is `y_t = C x_t + D u_t (+ v_t)`. The optional noise pair holds
    /// per-step `[t, d_state]` and `[t, d_out]` constants shared by every
    /// sequence in the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(
        &mut self,
        u: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        x0: Var,
        noise: Option<(Tensor, Tensor)>,
    ) -> Result<Var> {
        self.push(Op::SsmScan { noise }, vec![u, a, b, c, d, x0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_doubling() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.identity(x).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[1.0, 2.0, 3.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.5]));
        let y = g.add(x, x).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.7));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_hand_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = g.softmax(z, 0).unwrap();
        let p = g.get(p).unwrap();
        assert!((p.data()[0] - 0.26894).abs() < 1e-5);
        assert!((p.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(&[2], true).unwrap();
        let s = g.sum(x).unwrap();
        assert!(g.value(s).is_none());
        assert!(matches!(g.backward(s), Err(Error::NotEvaluated { .. })));
        let out = g.forward_eval(&[(x, Tensor::vector(vec![2.0, 3.0]))]).unwrap();
        assert_eq!(out.item(), 5.0);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_eval_errors() {
        let mut g = Graph::new();
        let x = g.input(&[2], false).unwrap();
        let y = g.exp(x).unwrap();
        assert!(matches!(g.forward_eval(&[]), Err(Error::UnboundLeaf { node: 0 })));
        let err = g.forward_eval(&[(x, Tensor::vector(vec![1.0; 3]))]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { node: 0, .. }), "{err}");
        assert!(matches!(
            g.forward_eval(&[(y, Tensor::vector(vec![1.0; 2]))]),
            Err(Error::NotALeaf { .. })
        ));
        let err = g.forward_eval(&[(x, Tensor::vector(vec![1.0, 1e3]))]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp", node: 1 }), "{err}");
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let b = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op: "add", node: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_is_bitwise_reproducible() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.3 - 0.5).collect()).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let l = g.log(s).unwrap();
        let m = g.mean(l).unwrap();
        let first = g.get(m).unwrap().clone();
        let again = g.forward_eval(&[]).unwrap();
        assert_eq!(first.bits(), again.bits());
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let unused = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 3.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }
}
