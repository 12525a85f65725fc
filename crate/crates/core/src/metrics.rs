//! ROC, AUC and FPR-at-TPR for detectors whose score is higher for
//! in-distribution (positive) samples.
//!
//! The same lower-quantile rule ([`lower_quantile`]) drives threshold
//! calibration, FPR95 and the FNR5 filter, so "95%" means the same thing in
//! all three places.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Default target TPR for [`fpr_at_tpr`].
pub const FPR_TPR_TARGET: f64 = 0.95;
/// Default fraction of ID samples dropped by [`auc_at_fnr`].
pub const FNR_FILTER: f64 = 0.05;

/// `⌊(1 - q) · n⌋`, with float products within 1e-9 of an integer snapped to
/// that integer so e.g. `q = 0.95, n = 20` yields exactly 1.
pub fn quantile_index(n: usize, q: f64) -> usize {
    let x = (1.0 - q) * n as f64;
    let r = libm::round(x);
    let idx = if (x - r).abs() < 1e-9 { r } else { libm::floor(x) };
    (idx.max(0.0) as usize).min(n.saturating_sub(1))
}

/// The `⌊(1 - q) · n⌋`-th smallest score (0-based): at least `q · n` of the
/// scores are `>=` the returned value.
pub fn lower_quantile(scores: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("quantile must lie in (0, 1), got {q}")));
    }
    check_scores("quantile", scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_index(sorted.len(), q)])
}

fn check_scores(what: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Input(format!("{what}: empty score list")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input(format!("{what}: NaN score")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from `(0, 0)` to `(1, 1)`; one point per distinct threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

/// Sweeps every distinct score as a threshold (descending). A sample counts
/// as detected-ID when its score is `>=` the threshold.
pub fn roc(id_scores: &[f64], ood_scores: &[f64]) -> Result<RocCurve> {
    check_scores("roc ID", id_scores)?;
    check_scores("roc OOD", ood_scores)?;
    let mut tagged: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|s| (*s, true))
        .chain(ood_scores.iter().map(|s| (*s, false)))
        .collect();
    tagged.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    let mut points = alloc::vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < tagged.len() {
        let threshold = tagged[i].0;
        while i < tagged.len() && tagged[i].0 == threshold {
            if tagged[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_ood,
            tpr: tp as f64 / n_id,
        });
    }
    // The last threshold admits everything; the endpoint is already (1, 1).
    debug_assert_eq!(points.last(), Some(&RocPoint { fpr: 1.0, tpr: 1.0 }));
    Ok(RocCurve { points })
}

/// Area under the ROC curve by trapezoidal integration of [`roc`].
pub fn auc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    Ok(roc(id_scores, ood_scores)?.area())
}

/// Mann–Whitney form of the AUC, `P(id > ood) + ½ P(id = ood)`, computed from
/// mid-ranks in `O((n + m) log(n + m))`.
pub fn auc_mann_whitney(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("auc ID", id_scores)?;
    check_scores("auc OOD", ood_scores)?;
    let mut tagged: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|s| (*s, true))
        .chain(ood_scores.iter().map(|s| (*s, false)))
        .collect();
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < tagged.len() {
        let mut j = i;
        while j < tagged.len() && tagged[j].0 == tagged[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * tagged[i..j].iter().filter(|t| t.1).count() as f64;
        i = j;
    }
    let (n, m) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((rank_sum - n * (n + 1.0) / 2.0) / (n * m))
}

/// Fraction of OOD scores at or above the threshold that keeps a
/// `tpr_target` fraction of ID scores (FPR95 for the default target).
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores("fpr ID", id_scores)?;
    check_scores("fpr OOD", ood_scores)?;
    let threshold = lower_quantile(id_scores, tpr_target)?;
    Ok(ood_scores.iter().filter(|s| **s >= threshold).count() as f64 / ood_scores.len() as f64)
}

/// An ID test sample for the classification AUC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifiedSample {
    /// OOD detector score, higher means more ID.
    pub ood_score: f64,
    /// Predicted probability of the malignant class.
    pub malignant_score: f64,
    pub is_cancer: bool,
}

/// Cancer-vs-non-cancer AUC of the malignant score.
pub fn classification_auc(samples: &[ClassifiedSample]) -> Result<f64> {
    let (pos, neg): (Vec<&ClassifiedSample>, Vec<&ClassifiedSample>) = samples.iter().partition(|s| s.is_cancer);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedAuc(format!(
            "{} cancer and {} non-cancer samples",
            pos.len(),
            neg.len()
        )));
    }
    let pos: Vec<f64> = pos.iter().map(|s| s.malignant_score).collect();
    let neg: Vec<f64> = neg.iter().map(|s| s.malignant_score).collect();
    auc(&pos, &neg)
}

/// Samples left after removing the `⌊fnr · n⌋` lowest OOD scores (ties broken
/// by input order).
pub fn fnr_filter(samples: &[ClassifiedSample], fnr: f64) -> Result<Vec<ClassifiedSample>> {
    if !(0.0..1.0).contains(&fnr) {
        return Err(Error::Parameter(format!("FNR must lie in [0, 1), got {fnr}")));
    }
    if samples.is_empty() {
        return Err(Error::Input("no classified samples".into()));
    }
    let drop = if fnr == 0.0 {
        0
    } else {
        quantile_index(samples.len(), 1.0 - fnr)
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].ood_score.total_cmp(&samples[b].ood_score).then(a.cmp(&b)));
    let mut keep = alloc::vec![true; samples.len()];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    Ok(samples.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| *s).collect())
}

/// Classification AUC after discarding the ID samples the detector flags as
/// most OOD (AUC at FNR5 for the default `fnr`).
pub fn auc_at_fnr(samples: &[ClassifiedSample], fnr: f64) -> Result<f64> {
    classification_auc(&fnr_filter(samples, fnr)?)
}
