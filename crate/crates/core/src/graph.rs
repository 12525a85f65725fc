//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied during a forward pass. Leaves
//! may borrow their tensor (model parameters) or own it (inputs, constants).
//! [`Graph::backward`] walks the tape in reverse and returns a gradient for
//! every node that contributes to the loss.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, OddPolicy, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        padding: Padding,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    CrossEntropy {
        probs: NodeId,
        label: usize,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that borrows its tensor, typically a model parameter.
    pub fn param(&mut self, tensor: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId, padding: Padding) -> Result<NodeId> {
        let out = tensor::conv2d(self.value(input), self.value(kernels), self.value(bias), padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                padding,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId, odd: OddPolicy) -> Result<NodeId> {
        let (out, argmax) = tensor::maxpool2d(self.value(input), odd)?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = tensor::dense(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(out, Op::Dense { input, weights, bias }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = tensor::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = Tensor::new(shape, self.value(input).data().to_vec())?;
        Ok(self.push(out, Op::Reshape(input)))
    }

    pub fn softmax(&mut self, logits: NodeId) -> NodeId {
        let out = Tensor::vector(tensor::softmax(self.value(logits).data()));
        self.push(out, Op::Softmax(logits))
    }

    /// `-ln probs[label]` on an explicit probability node.
    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId> {
        let loss = tensor::cross_entropy(self.value(probs).data(), label)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, label }))
    }

    /// Cross entropy of `softmax(logits)` fused through log-sum-exp. Equal to
    /// `cross_entropy(softmax(logits))` but finite for saturated logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let loss = tensor::log_sum_exp(z) - z[label];
        let probs = tensor::softmax(z);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, label, probs }))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(input))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        self.push(out, Op::Scale(input, factor))
    }

    /// Back-propagates from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before the forward pass was recorded".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
            match &mut grads[id.0] {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
                slot @ None => *slot = Some(delta),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    padding,
                } => {
                    let (gx, gk, gb) = tensor::conv2d_backward(
                        self.value(*input),
                        self.value(*kernels),
                        self.value(*bias),
                        *padding,
                        &g,
                    )?;
                    acc(&mut grads, *input, gx);
                    acc(&mut grads, *kernels, gk);
                    acc(&mut grads, *bias, gb);
                }
                Op::MaxPool2d { input, argmax } => {
                    let gx = tensor::maxpool2d_backward(self.value(*input).numel(), argmax, &g);
                    acc(&mut grads, *input, gx);
                }
                Op::Dense { input, weights, bias } => {
                    let (gx, gw, gb) = tensor::dense_backward(self.value(*input), self.value(*weights), &g);
                    acc(&mut grads, *input, gx);
                    acc(&mut grads, *weights, gw);
                    acc(&mut grads, *bias, gb);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let gx = g.iter().zip(x).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut grads, *input, gx);
                }
                Op::Reshape(input) => acc(&mut grads, *input, g),
                Op::Softmax(input) => {
                    let p = node.value.data();
                    let dot: f64 = g.iter().zip(p).map(|(g, p)| g * p).sum();
                    let gz = p.iter().zip(&g).map(|(p, g)| p * (g - dot)).collect();
                    acc(&mut grads, *input, gz);
                }
                Op::CrossEntropy { probs, label } => {
                    let p = self.value(*probs).data();
                    let mut gp = vec![0.0; p.len()];
                    gp[*label] = -g[0] / p[*label];
                    acc(&mut grads, *probs, gp);
                }
                Op::SoftmaxCrossEntropy { logits, label, probs } => {
                    let mut gz: Vec<f64> = probs.iter().map(|p| g[0] * p).collect();
                    gz[*label] -= g[0];
                    acc(&mut grads, *logits, gz);
                }
                Op::Sum(input) => {
                    let n = self.value(*input).numel();
                    acc(&mut grads, *input, vec![g[0]; n]);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    let gb = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Scale(input, factor) => {
                    let gx = g.iter().map(|v| v * factor).collect();
                    acc(&mut grads, *input, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaves keep their
/// gradient; intermediate buffers are released during the sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf; `None` if the leaf does
    /// not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}
