//! The multi-exit convolutional classifier.
//!
//! The trunk is a stack of `conv(3x3, same) -> ReLU -> maxpool(2x2)` blocks
//! followed by `dense -> ReLU -> dense`. Two auxiliary heads
//! (`conv(valid) -> ReLU -> maxpool -> dense`, no output activation) branch off
//! after configurable trunk blocks, so one forward pass yields three logit
//! vectors: two early exits and the network's final output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::{OddPolicy, Padding, Tensor};

/// Two auxiliary exits plus the final one.
pub const NUM_EXITS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Side length of the square grayscale input.
    pub input_size: usize,
    /// Output channels of each trunk conv block.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// Trunk block count (1-based) after which each auxiliary head attaches.
    pub exit_after: [usize; 2],
    pub head_channels: usize,
    /// Per-exit cross-entropy weights, early exits first.
    pub loss_weights: [f64; NUM_EXITS],
    pub pool_odd: OddPolicy,
    /// Parameter initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            conv_channels: vec![16, 32, 64, 128, 128],
            kernel_size: 3,
            hidden: 256,
            num_classes: 3,
            exit_after: [2, 4],
            head_channels: 128,
            loss_weights: [0.5, 0.5, 1.0],
            pool_odd: OddPolicy::Error,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    fan_in: usize,
}

/// Shape bookkeeping for one conv stage.
fn pooled(n: usize, odd: OddPolicy) -> Option<usize> {
    match odd {
        OddPolicy::Error if !n.is_multiple_of(2) => None,
        _ if n == 0 => None,
        _ => Some(n.div_ceil(2)),
    }
}

impl ModelConfig {
    /// Checks structural invariants and returns the parameter layout.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let blocks = self.conv_channels.len();
        if self.input_size == 0 || blocks == 0 || self.kernel_size == 0 {
            return Err(Error::Config(
                "input size, conv plan and kernel size must be non-empty".into(),
            ));
        }
        if self.conv_channels.contains(&0) || self.hidden == 0 || self.head_channels == 0 {
            return Err(Error::Config("channel and hidden widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let [a, b] = self.exit_after;
        if !(1 <= a && a < b && b < blocks) {
            return Err(Error::Config(format!(
                "exit points must satisfy 1 <= first < second < {blocks}, got {a}, {b}"
            )));
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.loss_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got {:?}",
                self.loss_weights
            )));
        }

        let k = self.kernel_size;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| specs.push(ParamSpec { name, shape, fan_in });
        let mut side = self.input_size;
        let mut channels = 1;
        let mut head_inputs = Vec::new();
        for (i, &c) in self.conv_channels.iter().enumerate() {
            if side < k {
                return Err(Error::Config(format!(
                    "block {} input {side}x{side} smaller than kernel",
                    i + 1
                )));
            }
            push(
                format!("trunk.conv{}.weight", i + 1),
                vec![c, channels, k, k],
                channels * k * k,
            );
            push(format!("trunk.conv{}.bias", i + 1), vec![c], channels * k * k);
            side = pooled(side, self.pool_odd)
                .ok_or_else(|| Error::Config(format!("block {} pools an odd {side}x{side} map", i + 1)))?;
            channels = c;
            if self.exit_after.contains(&(i + 1)) {
                head_inputs.push((channels, side));
            }
        }
        let flat = channels * side * side;
        push("trunk.fc1.weight".into(), vec![self.hidden, flat], flat);
        push("trunk.fc1.bias".into(), vec![self.hidden], flat);
        push(
            "trunk.fc2.weight".into(),
            vec![self.num_classes, self.hidden],
            self.hidden,
        );
        push("trunk.fc2.bias".into(), vec![self.num_classes], self.hidden);
        for (e, (c_in, s)) in head_inputs.into_iter().enumerate() {
            if s < k {
                return Err(Error::Config(format!(
                    "exit {} head sees a {s}x{s} map, smaller than its kernel",
                    e + 1
                )));
            }
            let conv_side = s - k + 1;
            let ps = pooled(conv_side, self.pool_odd).ok_or_else(|| {
                Error::Config(format!("exit {} head pools an odd {conv_side}x{conv_side} map", e + 1))
            })?;
            let hc = self.head_channels;
            push(format!("exit{}.conv.weight", e + 1), vec![hc, c_in, k, k], c_in * k * k);
            push(format!("exit{}.conv.bias", e + 1), vec![hc], c_in * k * k);
            let hflat = hc * ps * ps;
            push(format!("exit{}.fc.weight", e + 1), vec![self.num_classes, hflat], hflat);
            push(format!("exit{}.fc.bias", e + 1), vec![self.num_classes], hflat);
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Logits of every exit for one input, early exits first.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitLogits {
    pub exits: [Vec<f64>; NUM_EXITS],
}

impl ExitLogits {
    pub fn exit(&self, e: usize) -> &[f64] {
        &self.exits[e]
    }

    pub fn final_logits(&self) -> &[f64] {
        &self.exits[NUM_EXITS - 1]
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    trunk_fc: usize,
    heads: usize,
}

#[derive(Debug, Clone)]
pub struct MultiExitModel {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Node ids of the logits produced by [`MultiExitModel::record`].
pub struct Recorded {
    pub params: Vec<NodeId>,
    pub exits: [Option<NodeId>; NUM_EXITS],
}

impl MultiExitModel {
    /// Fresh model with He-normal weights and zero biases drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let specs = config.param_specs()?;
        let mut rng = rng::seeded(config.seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                if s.name.ends_with(".bias") {
                    Tensor::zeros(&s.shape)
                } else {
                    let std = libm::sqrt(2.0 / s.fan_in as f64);
                    let data = (0..n).map(|_| std * rng::normal(&mut rng)).collect();
                    Tensor::new(&s.shape, data).expect("spec shape")
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Assembles a model from tensors in [`ModelConfig::param_specs`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let specs = config.param_specs()?;
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, tensor) in specs.into_iter().zip(tensors) {
            if tensor.shape() != spec.shape.as_slice() {
                return Err(Error::shape("load parameter", &spec.shape, tensor.shape()));
            }
            params.push(Param {
                name: spec.name,
                tensor,
            });
        }
        let blocks = config.conv_channels.len();
        let layout = Layout {
            trunk_fc: 2 * blocks,
            heads: 2 * blocks + 4,
        };
        Ok(MultiExitModel { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Indices into [`Self::params`] owned by auxiliary head `e` (0 or 1).
    pub fn head_param_range(&self, e: usize) -> core::ops::Range<usize> {
        let start = self.layout.heads + 4 * e;
        start..start + 4
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let n = self.config.input_size;
        if image.shape() != [1, n, n] {
            return Err(Error::Input(format!(
                "expected image of shape [1, {n}, {n}], got {:?}",
                image.shape()
            )));
        }
        if !image.is_finite() {
            return Err(Error::Input("image contains non-finite pixels".into()));
        }
        Ok(())
    }

    /// Records a forward pass on `graph`. With `heads == false` the auxiliary
    /// exits are skipped and only the final logits are produced.
    pub fn record<'a>(&'a self, graph: &mut Graph<'a>, image: Tensor, heads: bool) -> Result<Recorded> {
        self.check_input(&image)?;
        let p: Vec<NodeId> = self.params.iter().map(|p| graph.param(&p.tensor)).collect();
        let odd = self.config.pool_odd;
        let mut exits = [None; NUM_EXITS];
        let mut x = graph.input(image);
        for block in 0..self.config.conv_channels.len() {
            let c = graph.conv2d(x, p[2 * block], p[2 * block + 1], Padding::Same)?;
            let r = graph.relu(c);
            x = graph.maxpool2d(r, odd)?;
            if let Some(e) = self.config.exit_after.iter().position(|&a| a == block + 1) {
                if heads {
                    let hp = self.head_param_range(e).start;
                    let c = graph.conv2d(x, p[hp], p[hp + 1], Padding::Valid)?;
                    let r = graph.relu(c);
                    let m = graph.maxpool2d(r, odd)?;
                    exits[e] = Some(graph.dense(m, p[hp + 2], p[hp + 3])?);
                }
            }
        }
        let f = self.layout.trunk_fc;
        let h = graph.dense(x, p[f], p[f + 1])?;
        let h = graph.relu(h);
        exits[NUM_EXITS - 1] = Some(graph.dense(h, p[f + 2], p[f + 3])?);
        Ok(Recorded { params: p, exits })
    }

    /// Logits of all three exits in one pass.
    pub fn forward(&self, image: &Tensor) -> Result<ExitLogits> {
        let mut g = Graph::new();
        let rec = self.record(&mut g, image.clone(), true)?;
        let exits = rec
            .exits
            .map(|id| g.value(id.expect("all exits recorded")).data().to_vec());
        Ok(ExitLogits { exits })
    }

    /// Final-exit logits without evaluating the auxiliary heads.
    pub fn forward_final(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let rec = self.record(&mut g, image.clone(), false)?;
        Ok(g.value(rec.exits[NUM_EXITS - 1].expect("final exit")).data().to_vec())
    }

    /// Records the weighted multi-exit cross-entropy loss for one labelled
    /// image and returns `(recorded, loss node)`.
    pub fn record_loss<'a>(&'a self, graph: &mut Graph<'a>, image: Tensor, label: usize) -> Result<(Recorded, NodeId)> {
        if label >= self.config.num_classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let rec = self.record(graph, image, true)?;
        let mut total: Option<NodeId> = None;
        for (e, w) in self.config.loss_weights.iter().enumerate() {
            let ce = graph.softmax_cross_entropy(rec.exits[e].expect("exit"), label)?;
            let term = graph.scale(ce, *w);
            total = Some(match total {
                Some(t) => graph.add(t, term)?,
                None => term,
            });
        }
        Ok((rec, total.expect("three exits")))
    }

    /// Weighted multi-exit loss value for one labelled image.
    pub fn loss(&self, image: &Tensor, label: usize) -> Result<f64> {
        let mut g = Graph::new();
        let (_, loss) = self.record_loss(&mut g, image.clone(), label)?;
        Ok(g.value(loss).data()[0])
    }

    /// Loss value and per-parameter gradients for one labelled image.
    pub fn loss_and_gradients(&self, image: &Tensor, label: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let (rec, loss) = self.record_loss(&mut g, image.clone(), label)?;
        let grads = g.backward(loss)?;
        let per_param = rec
            .params
            .iter()
            .zip(&self.params)
            .map(|(id, p)| {
                grads
                    .get(*id)
                    .map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec)
            })
            .collect();
        Ok((g.value(loss).data()[0], per_param))
    }

    /// Predicted class from the final exit.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(crate::tensor::argmax(&self.forward_final(image)?))
    }
}
