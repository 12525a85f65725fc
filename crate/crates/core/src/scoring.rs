//! Post-hoc OOD scores and the per-exit threshold gate.
//!
//! All scores here are oriented so that a higher value means "more
//! in-distribution". The energy score itself is kept with its usual sign
//! (low energy for ID data); [`energy_id_score`] negates it for thresholding
//! and ROC analysis.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::metrics::lower_quantile;
use crate::model::{ExitLogits, NUM_EXITS};
use crate::tensor::softmax;

pub const DEFAULT_TEMPERATURE: f64 = 0.001;
pub const DEFAULT_QUANTILE: f64 = 0.95;
/// Smallest calibration set accepted per exit.
pub const MIN_CALIBRATION_SCORES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Softmax,
    Energy,
    Ensemble,
    EnsembleWeighted,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Softmax,
        Method::Energy,
        Method::Ensemble,
        Method::EnsembleWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::Energy => "energy",
            Method::Ensemble => "ensemble",
            Method::EnsembleWeighted => "ensemble_weighted",
        }
    }

    /// Accepts both `ensemble_weighted` and `ensemble-weighted`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "softmax" => Some(Method::Softmax),
            "energy" => Some(Method::Energy),
            "ensemble" => Some(Method::Ensemble),
            "ensemble_weighted" => Some(Method::EnsembleWeighted),
            _ => None,
        }
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Method::Ensemble | Method::EnsembleWeighted)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Id,
    Ood,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::Id => "ID",
            Origin::Ood => "OOD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ID" => Some(Origin::Id),
            "OOD" => Some(Origin::Ood),
            _ => None,
        }
    }
}

/// One scored sample. `exit_scores` is only present for the energy method.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub method: Method,
    pub exit_scores: Option<[f64; NUM_EXITS]>,
    pub combined: f64,
    pub origin: Origin,
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("logits must be non-empty and finite".into()));
    }
    Ok(())
}

/// Maximum softmax probability.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    check_finite(logits)?;
    Ok(softmax(logits).into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Energy `-T log Σ exp(f_i / T)`, evaluated as
/// `-m - T log Σ exp((f_i - m) / T)` with `m = max f_i`.
pub fn energy(logits: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_finite(logits)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|f| libm::exp((f - m) / temperature)).sum();
    Ok(-m - temperature * libm::log(sum))
}

/// Negated energy; higher means more in-distribution.
pub fn energy_id_score(logits: &[f64], temperature: f64) -> Result<f64> {
    energy(logits, temperature).map(|e| -e)
}

/// Gate-oriented energy score of each exit.
pub fn exit_energy_scores(logits: &ExitLogits, temperature: f64) -> Result<[f64; NUM_EXITS]> {
    let mut out = [0.0; NUM_EXITS];
    for (o, z) in out.iter_mut().zip(&logits.exits) {
        *o = energy_id_score(z, temperature)?;
    }
    Ok(out)
}

/// Per-exit thresholds of the all-exits gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub quantile: f64,
    pub thresholds: Vec<f64>,
    /// Fingerprint of the calibration scores the thresholds came from.
    pub fingerprint: String,
}

/// Hex FNV-1a digest over the bit patterns of per-exit score lists.
pub fn scores_fingerprint(per_exit: &[Vec<f64>]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for scores in per_exit {
        feed(&(scores.len() as u64).to_le_bytes());
        for s in scores {
            feed(&s.to_bits().to_le_bytes());
        }
    }
    format!("{h:016x}")
}

/// Per exit, picks the lowest threshold such that at least a `quantile`
/// fraction of the calibration scores is `>=` it (see [`lower_quantile`]).
pub fn calibrate(per_exit_scores: &[Vec<f64>], quantile: f64) -> Result<ThresholdSet> {
    if per_exit_scores.is_empty() {
        return Err(Error::Input("calibration needs at least one exit".into()));
    }
    let mut thresholds = Vec::with_capacity(per_exit_scores.len());
    for (e, scores) in per_exit_scores.iter().enumerate() {
        if scores.len() < MIN_CALIBRATION_SCORES {
            return Err(Error::Calibration {
                exit: e + 1,
                needed: MIN_CALIBRATION_SCORES,
                got: scores.len(),
            });
        }
        thresholds.push(lower_quantile(scores, quantile)?);
    }
    Ok(ThresholdSet {
        quantile,
        thresholds,
        fingerprint: scores_fingerprint(per_exit_scores),
    })
}

fn check_exits(scores: &[f64], thresholds: &ThresholdSet) -> Result<()> {
    if scores.len() != thresholds.thresholds.len() {
        return Err(Error::Input(format!(
            "gate needs {} exit scores, got {}",
            thresholds.thresholds.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("missing (NaN) exit score".into()));
    }
    Ok(())
}

/// ID iff every exit score reaches its threshold.
pub fn gate(scores: &[f64], thresholds: &ThresholdSet) -> Result<Origin> {
    check_exits(scores, thresholds)?;
    let pass = scores.iter().zip(&thresholds.thresholds).all(|(s, t)| s >= t);
    Ok(if pass { Origin::Id } else { Origin::Ood })
}

/// `min_e (s_e - τ_e)`: non-negative exactly when [`gate`] says ID.
pub fn gate_margin(scores: &[f64], thresholds: &ThresholdSet) -> Result<f64> {
    check_exits(scores, thresholds)?;
    Ok(scores
        .iter()
        .zip(&thresholds.thresholds)
        .map(|(s, t)| s - t)
        .fold(f64::INFINITY, f64::min))
}
