//! Mini-batch training of a [`MultiExitModel`] on the weighted multi-exit loss.

use alloc::vec::Vec;

use crate::dataset::{require_all_classes, Sample};
use crate::error::{Error, Result};
use crate::model::MultiExitModel;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Drives batch shuffling only; initialisation uses the model seed.
    pub seed: u64,
}

/// Mean per-sample loss of every epoch, in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub epoch_loss: Vec<f64>,
}

impl LossHistory {
    pub fn last(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

pub fn train(model: &mut MultiExitModel, data: &[Sample], opts: &TrainOptions) -> Result<LossHistory> {
    if opts.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    require_all_classes(data, model.num_classes())?;
    let mut optimizer = {
        let tensors: Vec<_> = model.params().iter().map(|p| &p.tensor).collect();
        OptimizerState::new(opts.optimizer, &tensors)?
    };
    let mut rng = rng::seeded(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = LossHistory::default();

    for epoch in 0..opts.epochs {
        rng::shuffle(&mut order, &mut rng);
        let mut epoch_total = 0.0;
        for (batch_idx, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &data[i];
                let (loss, grads) = model.loss_and_gradients(&s.image, s.label)?;
                batch_loss += loss;
                for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                    p.tensor.accumulate_grad(g)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            epoch_total += batch_loss;

            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = model
                .params_mut()
                .iter_mut()
                .map(|p| {
                    p.tensor.scale_grad(scale);
                    p.tensor
                        .take_grad()
                        .unwrap_or_else(|| alloc::vec![0.0; p.tensor.numel()])
                })
                .collect();
            let mut triples: Vec<_> = model
                .params_mut()
                .iter_mut()
                .zip(grads.iter_mut())
                .map(|(p, g)| (p.name.as_str(), &mut p.tensor, g.as_slice()))
                .collect();
            optimizer.step(&mut triples)?;
        }
        history.epoch_loss.push(epoch_total / data.len() as f64);
    }
    Ok(history)
}

/// Fraction of samples whose final-exit argmax matches the label.
pub fn accuracy(model: &MultiExitModel, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for s in data {
        if model.predict(&s.image)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
