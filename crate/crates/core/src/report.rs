//! Evaluation tables: OOD detection per method and OOD set, per-exit energy
//! results, and classification AUC with and without the FNR5 filter.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::metrics::{self, ClassifiedSample, RocCurve, FNR_FILTER, FPR_TPR_TARGET};
use crate::model::NUM_EXITS;
use crate::scoring::Method;

/// Scores of one sample set under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreColumn {
    pub combined: Vec<f64>,
    pub exits: Option<[Vec<f64>; NUM_EXITS]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodInput {
    pub method: Method,
    pub id: ScoreColumn,
    /// `(set name, scores)` for every OOD set evaluated with this method.
    pub ood: Vec<(String, ScoreColumn)>,
    /// ID test samples with malignant-class scores, if available.
    pub classification: Option<Vec<ClassifiedSample>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodRow {
    pub method: Method,
    pub ood_set: String,
    pub auc_pct: f64,
    pub fpr95_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitRow {
    pub method: Method,
    pub ood_set: String,
    /// 1-based exit index.
    pub exit: usize,
    pub auc_pct: f64,
    pub fpr95_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationRow {
    pub method: Method,
    pub auc_pct: f64,
    pub auc_fnr5_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub ood: Vec<OodRow>,
    pub exits: Vec<ExitRow>,
    pub classification: Vec<ClassificationRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocEntry {
    pub method: Method,
    pub ood_set: String,
    pub curve: RocCurve,
}

fn pct(v: f64) -> f64 {
    100.0 * v
}

/// AUC and FPR95 of one ID/OOD pair, in percent.
pub fn ood_metrics(id: &[f64], ood: &[f64]) -> Result<(f64, f64)> {
    Ok((
        pct(metrics::auc(id, ood)?),
        pct(metrics::fpr_at_tpr(id, ood, FPR_TPR_TARGET)?),
    ))
}

pub fn build_report(inputs: &[MethodInput]) -> Result<(MetricsReport, Vec<RocEntry>)> {
    let mut report = MetricsReport::default();
    let mut curves = Vec::new();
    for input in inputs {
        for (set, column) in &input.ood {
            let (auc_pct, fpr95_pct) = ood_metrics(&input.id.combined, &column.combined)?;
            report.ood.push(OodRow {
                method: input.method,
                ood_set: set.clone(),
                auc_pct,
                fpr95_pct,
            });
            curves.push(RocEntry {
                method: input.method,
                ood_set: set.clone(),
                curve: metrics::roc(&input.id.combined, &column.combined)?,
            });
            if let (Some(id_exits), Some(ood_exits)) = (&input.id.exits, &column.exits) {
                for (e, (i, o)) in id_exits.iter().zip(ood_exits).enumerate() {
                    let (auc_pct, fpr95_pct) = ood_metrics(i, o)?;
                    report.exits.push(ExitRow {
                        method: input.method,
                        ood_set: set.clone(),
                        exit: e + 1,
                        auc_pct,
                        fpr95_pct,
                    });
                }
            }
        }
        if let Some(samples) = &input.classification {
            report.classification.push(ClassificationRow {
                method: input.method,
                auc_pct: pct(metrics::classification_auc(samples)?),
                auc_fnr5_pct: pct(metrics::auc_at_fnr(samples, FNR_FILTER)?),
            });
        }
    }
    report.validate()?;
    Ok((report, curves))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| String::from("absent"), |v| format!("{v:.1}"))
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let values = self
            .ood
            .iter()
            .flat_map(|r| [r.auc_pct, r.fpr95_pct])
            .chain(self.exits.iter().flat_map(|r| [r.auc_pct, r.fpr95_pct]))
            .chain(self.classification.iter().flat_map(|r| [r.auc_pct, r.auc_fnr5_pct]));
        for v in values {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Input(format!("metric {v} outside [0, 100]")));
            }
        }
        Ok(())
    }

    fn methods(&self) -> BTreeSet<Method> {
        self.ood
            .iter()
            .map(|r| r.method)
            .chain(self.classification.iter().map(|r| r.method))
            .collect()
    }

    fn sets(&self) -> Vec<String> {
        let mut sets: Vec<String> = Vec::new();
        for r in &self.ood {
            if !sets.contains(&r.ood_set) {
                sets.push(r.ood_set.clone());
            }
        }
        sets
    }

    /// One row per method and OOD set; combinations without data read
    /// `absent`.
    pub fn ood_table(&self) -> String {
        let mut out = String::from("| Method | OOD set | AUC (%) | FPR95 (%) |\n|---|---|---|---|\n");
        for m in self.methods() {
            for set in self.sets() {
                let row = self.ood.iter().find(|r| r.method == m && r.ood_set == set);
                let _ = writeln!(
                    out,
                    "| {m} | {set} | {} | {} |",
                    cell(row.map(|r| r.auc_pct)),
                    cell(row.map(|r| r.fpr95_pct))
                );
            }
        }
        out
    }

    /// Per-exit AUC and FPR95 for every method that reported exit scores.
    pub fn exit_table(&self) -> String {
        let mut out = String::from("| Method | OOD set |");
        for e in 1..=NUM_EXITS {
            let _ = write!(out, " Exit {e} AUC (%) | Exit {e} FPR95 (%) |");
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|---|".repeat(NUM_EXITS));
        out.push('\n');
        let methods: BTreeSet<Method> = self.exits.iter().map(|r| r.method).collect();
        for m in methods {
            for set in self.sets() {
                let _ = write!(out, "| {m} | {set} |");
                for e in 1..=NUM_EXITS {
                    let row = self
                        .exits
                        .iter()
                        .find(|r| r.method == m && r.ood_set == set && r.exit == e);
                    let _ = write!(
                        out,
                        " {} | {} |",
                        cell(row.map(|r| r.auc_pct)),
                        cell(row.map(|r| r.fpr95_pct))
                    );
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn classification_table(&self) -> String {
        let mut out = String::from("| Method | AUC (%) | AUC at FNR5 (%) |\n|---|---|---|\n");
        for m in self.methods() {
            let row = self.classification.iter().find(|r| r.method == m);
            let _ = writeln!(
                out,
                "| {m} | {} | {} |",
                cell(row.map(|r| r.auc_pct)),
                cell(row.map(|r| r.auc_fnr5_pct))
            );
        }
        out
    }
}
