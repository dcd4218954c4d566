use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

use super::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Normalize {
        input: NodeId,
        scale: Vec<f32>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    /// Terminal node; its value is the probability map.
    SoftmaxCe {
        logits: NodeId,
        loss: f64,
        grad_logits: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    backward_scale: f32,
}

/// A recorded forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs have
/// smaller ids and reverse id order is a reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            backward_scale: 1.0,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.node(id).value
    }

    /// Loss recorded by a softmax cross-entropy node.
    pub fn loss(&self, id: NodeId) -> Option<f64> {
        match self.node(id).op {
            Op::SoftmaxCe { loss, .. } => Some(loss),
            _ => None,
        }
    }

    /// Multiplies the gradient a node sends to its inputs during backward.
    /// Only meant for fault-injection in gradient checks.
    pub fn scale_backward(&mut self, id: NodeId, factor: f32) {
        self.nodes[id.0].backward_scale = factor;
    }

    /// Per-channel `(x − mean[c]) / scale[c]` on an `H×W×C` tensor.
    pub fn normalize(&mut self, input: NodeId, mean: &[f32], scale: &[f32]) -> Result<NodeId> {
        let x = self.value(input);
        let (_, _, c) = x.hwc()?;
        if mean.len() != c || scale.len() != c {
            return Err(Error::Config(format!(
                "normalisation has {} means / {} scales for {c} channels",
                mean.len(),
                scale.len()
            )));
        }
        let mut out = x.clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(mean).zip(scale) {
                *v = (*v - m) / s;
            }
        }
        let rg = self.node(input).requires_grad;
        Ok(self.push(
            out,
            Op::Normalize {
                input,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::conv2d_fwd(self.value(input), self.value(kernel), self.value(bias))?;
        let rg = [input, kernel, bias].iter().any(|&n| self.node(n).requires_grad);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu_fwd(self.value(input));
        let rg = self.node(input).requires_grad;
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn softmax_ce(&mut self, logits: NodeId, target: &LabelMap, weights: &Tensor) -> Result<NodeId> {
        let res = ops::softmax_ce(self.value(logits), target, weights)?;
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            res.probs.into_tensor(),
            Op::SoftmaxCe {
                logits,
                loss: res.loss,
                grad_logits: res.grad_logits,
            },
            rg,
        ))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_sum(&[loss])
    }

    /// Gradients of the sum of several loss nodes.
    pub fn backward_sum(&self, losses: &[NodeId]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let Some(start) = losses.iter().map(|l| l.0).max() else {
            return Ok(Gradients { grads });
        };
        for &l in losses {
            if !matches!(self.node(l).op, Op::SoftmaxCe { .. }) {
                return Err(Error::Internal(format!("node {} is not a loss", l.0)));
            }
        }
        for idx in (0..=start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let seeded = losses.iter().any(|l| l.0 == idx);
            let mut upstream = if let (true, Op::SoftmaxCe { grad_logits, .. }) = (seeded, &node.op) {
                Some(grad_logits.clone())
            } else {
                grads[idx].take()
            };
            let Some(g) = upstream.as_mut() else {
                continue;
            };
            if node.backward_scale != 1.0 {
                g.scale(node.backward_scale);
            }
            let g = upstream.expect("checked above");
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Normalize { input, scale } => {
                    let c = scale.len();
                    let mut gi = g;
                    for px in gi.data_mut().chunks_exact_mut(c) {
                        for (v, s) in px.iter_mut().zip(scale) {
                            *v /= s;
                        }
                    }
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Conv2d { input, kernel, bias } => {
                    let want_input = self.node(*input).requires_grad;
                    let want_params = self.node(*kernel).requires_grad || self.node(*bias).requires_grad;
                    let cg = ops::conv2d_bwd(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        &g,
                        want_input,
                        want_params,
                    )?;
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads, *input, gi)?;
                    }
                    if self.node(*kernel).requires_grad {
                        if let Some(gk) = cg.kernel {
                            accumulate(&mut grads, *kernel, gk)?;
                        }
                    }
                    if self.node(*bias).requires_grad {
                        if let Some(gb) = cg.bias {
                            accumulate(&mut grads, *bias, gb)?;
                        }
                    }
                }
                Op::Relu { input } => {
                    let gi = ops::relu_bwd(self.value(*input), &g)?;
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::SoftmaxCe { logits, .. } => {
                    if seeded {
                        accumulate(&mut grads, *logits, g)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_scaled(&g, 1.0).map_err(|e| Error::Internal(e.to_string())),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
