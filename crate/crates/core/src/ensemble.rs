//! Deep ensembles: diversified member configurations, member training and
//! disagreement-based uncertainty.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dataset::{require_all_classes, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiExitModel};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::rng;
use crate::tensor::{argmax, softmax, Tensor};
use crate::train::{train, LossHistory, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub members: usize,
    /// Fraction of the training set each member leaves out, drawn uniformly.
    pub leave_out: (f64, f64),
    /// Learning rate, drawn log-uniformly.
    pub learning_rate: (f64, f64),
    pub optimizers: Vec<OptimizerKind>,
    /// Inclusive epoch range.
    pub epochs: (usize, usize),
    pub batch_sizes: Vec<usize>,
    pub master_seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            members: 20,
            leave_out: (0.0, 0.15),
            learning_rate: (1e-4, 1e-3),
            optimizers: vec![OptimizerKind::Adam, OptimizerKind::RmsProp],
            epochs: (25, 85),
            batch_sizes: vec![8, 16, 32, 64, 128],
            master_seed: 0,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.members < 2 {
            return bad(format!("an ensemble needs at least 2 members, got {}", self.members));
        }
        let (lo, hi) = self.leave_out;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad(format!(
                "leave-out range must satisfy 0 <= lo <= hi < 1, got {lo}..{hi}"
            ));
        }
        let (lo, hi) = self.learning_rate;
        if !(0.0 < lo && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "learning-rate range must be positive and ordered, got {lo}..{hi}"
            ));
        }
        if self.epochs.0 == 0 || self.epochs.0 > self.epochs.1 {
            return bad(format!(
                "epoch range must be positive and ordered, got {:?}",
                self.epochs
            ));
        }
        if self.optimizers.is_empty() || self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("optimizer and batch-size choices must be non-empty and positive".into());
        }
        Ok(())
    }
}

/// Hyperparameters of one ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberConfig {
    pub index: usize,
    /// Root of the member's init, leave-out and shuffle streams.
    pub seed: u64,
    pub leave_out_fraction: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
}

const STREAM_HYPER: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_LEAVE_OUT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

/// Draws one configuration per member. Member `i` only depends on the master
/// seed and `i`, so growing `members` keeps the earlier configurations.
pub fn sample_member_configs(spec: &EnsembleSpec) -> Result<Vec<MemberConfig>> {
    spec.validate()?;
    Ok((0..spec.members).map(|i| sample_member(spec, i)).collect())
}

pub fn sample_member(spec: &EnsembleSpec, index: usize) -> MemberConfig {
    let seed = rng::derive_seed(spec.master_seed, index as u64);
    let mut r = rng::seeded(rng::derive_seed(seed, STREAM_HYPER));
    let leave_out_fraction = rng::uniform(&mut r, spec.leave_out.0, spec.leave_out.1);
    let (lo, hi) = spec.learning_rate;
    let learning_rate = libm::exp(rng::uniform(&mut r, libm::log(lo), libm::log(hi))).clamp(lo, hi);
    let optimizer = spec.optimizers[r.random_range(0..spec.optimizers.len())];
    let epochs = r.random_range(spec.epochs.0..=spec.epochs.1);
    let batch_size = spec.batch_sizes[r.random_range(0..spec.batch_sizes.len())];
    MemberConfig {
        index,
        seed,
        leave_out_fraction,
        learning_rate,
        optimizer,
        epochs,
        batch_size,
    }
}

/// A trained member together with what it was trained on.
#[derive(Debug, Clone)]
pub struct TrainedMember {
    pub config: MemberConfig,
    pub model: MultiExitModel,
    pub left_out: Vec<String>,
    pub history: LossHistory,
}

/// Ids of the samples member `config` leaves out (`⌊fraction · n⌋` of them).
pub fn leave_out_ids(config: &MemberConfig, data: &[Sample]) -> Vec<String> {
    let count = libm::floor(config.leave_out_fraction * data.len() as f64) as usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng::shuffle(
        &mut order,
        &mut rng::seeded(rng::derive_seed(config.seed, STREAM_LEAVE_OUT)),
    );
    let mut picked: Vec<usize> = order[..count.min(data.len())].to_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| data[i].id.clone()).collect()
}

/// Trains one member on its subsample of `data`. Single-threaded and fully
/// determined by `base` and `config`.
pub fn train_member(base: &ModelConfig, config: &MemberConfig, data: &[Sample]) -> Result<TrainedMember> {
    let left_out = leave_out_ids(config, data);
    let excluded: BTreeSet<&str> = left_out.iter().map(String::as_str).collect();
    let subset: Vec<Sample> = data
        .iter()
        .filter(|s| !excluded.contains(s.id.as_str()))
        .cloned()
        .collect();
    require_all_classes(&subset, base.num_classes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("member {}: {msg} after leave-out", config.index)),
        other => other,
    })?;
    let model_config = ModelConfig {
        seed: rng::derive_seed(config.seed, STREAM_INIT),
        ..base.clone()
    };
    let mut model = MultiExitModel::new(model_config)?;
    let opts = TrainOptions {
        epochs: config.epochs,
        batch_size: config.batch_size,
        optimizer: OptimizerConfig {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
        },
        seed: rng::derive_seed(config.seed, STREAM_SHUFFLE),
    };
    let history = train(&mut model, &subset, &opts)?;
    Ok(TrainedMember {
        config: config.clone(),
        model,
        left_out,
        history,
    })
}

/// Aggregate of the members' softmax outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub member_probs: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Population standard deviation (divisor N) per class.
    pub std: Vec<f64>,
    /// `Σ_c σ_c`.
    pub uncertainty: f64,
    /// `Σ_c μ_c σ_c`.
    pub weighted_uncertainty: f64,
    pub vote: usize,
}

impl EnsembleOutput {
    pub fn from_probs(member_probs: Vec<Vec<f64>>) -> Result<Self> {
        if member_probs.len() < 2 {
            return Err(Error::Config(format!(
                "ensemble prediction needs at least 2 members, got {}",
                member_probs.len()
            )));
        }
        let k = member_probs[0].len();
        if k == 0 {
            return Err(Error::Config("members output no classes".into()));
        }
        if let Some((m, p)) = member_probs.iter().enumerate().find(|(_, p)| p.len() != k) {
            return Err(Error::Config(format!(
                "member {m} outputs {} classes, member 0 outputs {k}",
                p.len()
            )));
        }
        let n = member_probs.len() as f64;
        // accumulate relative to member 0
        let first = &member_probs[0];
        let mut mean = vec![0.0; k];
        for p in &member_probs[1..] {
            mean.iter_mut()
                .zip(p.iter().zip(first))
                .for_each(|(m, (v, f))| *m += v - f);
        }
        mean.iter_mut().zip(first).for_each(|(m, f)| *m = f + *m / n);
        let mut var = vec![0.0; k];
        for p in &member_probs {
            var.iter_mut()
                .zip(p.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let std: Vec<f64> = var.into_iter().map(|s| libm::sqrt(s / n)).collect();
        let uncertainty = std.iter().sum();
        let weighted_uncertainty = std.iter().zip(&mean).map(|(s, m)| s * m).sum();

        let mut votes = vec![0usize; k];
        for p in &member_probs {
            votes[argmax(p)] += 1;
        }
        let top = *votes.iter().max().expect("k > 0");
        let mut vote = usize::MAX;
        for c in (0..k).filter(|&c| votes[c] == top) {
            if vote == usize::MAX || mean[c] > mean[vote] {
                vote = c;
            }
        }
        Ok(EnsembleOutput {
            member_probs,
            mean,
            std,
            uncertainty,
            weighted_uncertainty,
            vote,
        })
    }

    /// OOD score (higher means more ID): `-U` or `-U_w`.
    pub fn id_score(&self, weighted: bool) -> f64 {
        if weighted {
            -self.weighted_uncertainty
        } else {
            -self.uncertainty
        }
    }

    /// Mean probability of the designated malignant class.
    pub fn malignant_score(&self, malignant: Option<usize>) -> Result<f64> {
        let class = malignant.ok_or_else(|| Error::Config("no malignant class designated".into()))?;
        self.mean.get(class).copied().ok_or_else(|| {
            Error::Config(format!(
                "malignant class {class} out of range for {} classes",
                self.mean.len()
            ))
        })
    }
}

/// Runs every member on `image` (final exit) and aggregates.
pub fn ensemble_predict(members: &[MultiExitModel], image: &Tensor) -> Result<EnsembleOutput> {
    let probs = members
        .iter()
        .map(|m| m.forward_final(image).map(|z| softmax(&z)))
        .collect::<Result<Vec<_>>>()?;
    EnsembleOutput::from_probs(probs)
}
