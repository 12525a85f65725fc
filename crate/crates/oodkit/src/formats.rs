//! Score, threshold, prediction and metrics files.
//!
//! CSV files have a header row, `.` decimals and LF line endings. Floats are
//! written in Rust's shortest round-trip form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use oodkit_core::metrics::RocCurve;
use oodkit_core::report::{ClassificationRow, ExitRow, MetricsReport, OodRow, RocEntry};
use oodkit_core::scoring::{Method, Origin, ScoreRecord, ThresholdSet};
use serde::{Deserialize, Serialize};

use crate::error::{read_bytes, read_text, write_bytes, Error, Result};

pub const SCORES_HEADER: [&str; 7] = ["sample_id", "method", "exit1", "exit2", "exit3", "combined", "origin"];
pub const PREDICTIONS_HEADER: [&str; 5] = ["sample_id", "method", "label", "malignant_score", "cancer"];
pub const METRICS_FILE: &str = "metrics.csv";
pub const EXITS_FILE: &str = "exits.csv";
pub const CLASSIFICATION_FILE: &str = "classification.csv";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(path: &Path, row: usize, field: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::row(path, row, format!("{field}: not a number: {s:?}")))
}

fn parse_method(path: &Path, row: usize, s: &str) -> Result<Method> {
    Method::parse(s).ok_or_else(|| Error::row(path, row, format!("unknown method {s:?}")))
}

fn csv_bytes(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::write(path, e.into()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::write(path, e.into()))?;
    }
    w.into_inner().map_err(|e| Error::write(path, e.into_error()))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_bytes(path, &csv_bytes(path, header, rows)?)
}

/// Data rows of a CSV whose header must equal `header`, numbered from 1.
fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new().from_reader(bytes.as_slice());
    let found = reader.headers().map_err(|e| Error::parse(path, e))?;
    if found.iter().collect::<Vec<_>>() != header {
        return Err(Error::parse(path, format!("header must be {}", header.join(","))));
    }
    reader
        .records()
        .enumerate()
        .map(|(i, r)| r.map(|r| (i + 1, r)).map_err(|e| Error::row(path, i + 1, e)))
        .collect()
}

/// Origin metadata of a scores file, stored next to it as `<file>.meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMeta {
    pub method: String,
    pub model_fingerprint: String,
    pub temperature: f64,
    /// Thresholds applied to `combined`, if any.
    pub thresholds_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub meta: ScoreMeta,
    pub records: Vec<ScoreRecord>,
}

pub fn meta_path(scores: &Path) -> PathBuf {
    let mut name = scores.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

impl ScoreFile {
    pub fn method(&self) -> Method {
        Method::parse(&self.meta.method).expect("validated on read")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                let exits = match r.exit_scores {
                    Some(e) => e.map(fmt_f64),
                    None => Default::default(),
                };
                let [e1, e2, e3] = exits;
                vec![
                    r.sample_id.clone(),
                    r.method.name().into(),
                    e1,
                    e2,
                    e3,
                    fmt_f64(r.combined),
                    r.origin.name().into(),
                ]
            })
            .collect();
        write_csv(path, &SCORES_HEADER, &rows)?;
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Internal(e.to_string()))?;
        write_bytes(&meta_path(path), meta.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mp = meta_path(path);
        let meta: ScoreMeta = toml::from_str(&read_text(&mp)?).map_err(|e| Error::parse(&mp, e))?;
        let method = Method::parse(&meta.method)
            .ok_or_else(|| Error::parse(&mp, format!("unknown method {:?}", meta.method)))?;
        let mut records = Vec::new();
        for (row, r) in read_csv(path, &SCORES_HEADER)? {
            let m = parse_method(path, row, &r[1])?;
            if m != method {
                return Err(Error::row(path, row, format!("method {m} in a {method} scores file")));
            }
            let exit_fields = [&r[2], &r[3], &r[4]];
            let exit_scores = if exit_fields.iter().all(|f| f.is_empty()) {
                None
            } else {
                let mut e = [0.0; 3];
                for (i, f) in exit_fields.iter().enumerate() {
                    e[i] = parse_f64(path, row, SCORES_HEADER[2 + i], f)?;
                }
                Some(e)
            };
            records.push(ScoreRecord {
                sample_id: r[0].to_string(),
                method: m,
                exit_scores,
                combined: parse_f64(path, row, "combined", &r[5])?,
                origin: Origin::parse(&r[6])
                    .ok_or_else(|| Error::row(path, row, format!("unknown origin {:?}", &r[6])))?,
            });
        }
        Ok(ScoreFile { meta, records })
    }

    pub fn combined(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.combined).collect()
    }

    /// Per-exit columns; `None` unless every record has exit scores.
    pub fn exit_columns(&self) -> Option<[Vec<f64>; 3]> {
        let mut cols: [Vec<f64>; 3] = Default::default();
        for r in &self.records {
            let e = r.exit_scores?;
            for (c, v) in cols.iter_mut().zip(e) {
                c.push(v);
            }
        }
        Some(cols)
    }
}

/// Calibrated thresholds with the fingerprints they are bound to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdFile {
    pub method: String,
    pub model_fingerprint: String,
    pub temperature: f64,
    pub quantile: f64,
    pub thresholds: Vec<f64>,
    pub scores_fingerprint: String,
}

impl ThresholdFile {
    pub fn set(&self) -> ThresholdSet {
        ThresholdSet {
            quantile: self.quantile,
            thresholds: self.thresholds.clone(),
            fingerprint: self.scores_fingerprint.clone(),
        }
    }

    /// Digest of the whole file, recorded by consumers.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("thresholds serialize");
        crate::checkpoint::sha256_hex(&[text.as_bytes()])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))?;
        write_bytes(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        toml::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))
    }

    /// Refuses thresholds made for another method, model or temperature.
    pub fn check(&self, method: Method, model_fingerprint: &str, temperature: f64) -> Result<()> {
        if Method::parse(&self.method) != Some(method) {
            return Err(Error::Fingerprint(format!(
                "thresholds were calibrated for method {}, not {method}",
                self.method
            )));
        }
        if self.model_fingerprint != model_fingerprint {
            return Err(Error::Fingerprint(format!(
                "thresholds belong to model {}, scores come from model {model_fingerprint}",
                self.model_fingerprint
            )));
        }
        if method == Method::Energy && self.temperature != temperature {
            return Err(Error::Fingerprint(format!(
                "thresholds use temperature {}, scores use {temperature}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub method: Method,
    pub label: Option<usize>,
    pub malignant_score: f64,
    pub cancer: Option<bool>,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let rows: Vec<Vec<String>> = preds
        .iter()
        .map(|p| {
            vec![
                p.sample_id.clone(),
                p.method.name().into(),
                p.label.map(|l| l.to_string()).unwrap_or_default(),
                fmt_f64(p.malignant_score),
                p.cancer.map(|c| u8::from(c).to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(path, &PREDICTIONS_HEADER, &rows)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_csv(path, &PREDICTIONS_HEADER)?
        .into_iter()
        .map(|(row, r)| {
            let label = match &r[2] {
                "" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| Error::row(path, row, format!("bad label {s:?}")))?,
                ),
            };
            let cancer = match &r[4] {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                s => return Err(Error::row(path, row, format!("cancer must be 0 or 1, got {s:?}"))),
            };
            Ok(Prediction {
                sample_id: r[0].to_string(),
                method: parse_method(path, row, &r[1])?,
                label,
                malignant_score: parse_f64(path, row, "malignant_score", &r[3])?,
                cancer,
            })
        })
        .collect()
}

/// File-name-safe form of an OOD set name.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn roc_file_name(method: Method, set: &str) -> String {
    format!("roc_{}_{}.csv", method.name(), slug(set))
}

/// The three metrics tables as CSV bytes, keyed by file name.
pub fn report_files(report: &MetricsReport) -> Result<BTreeMap<&'static str, Vec<u8>>> {
    let ood: Vec<Vec<String>> = report
        .ood
        .iter()
        .map(|r| {
            vec![
                r.method.name().into(),
                r.ood_set.clone(),
                fmt_f64(r.auc_pct),
                fmt_f64(r.fpr95_pct),
            ]
        })
        .collect();
    let exits: Vec<Vec<String>> = report
        .exits
        .iter()
        .map(|r| {
            vec![
                r.method.name().into(),
                r.ood_set.clone(),
                r.exit.to_string(),
                fmt_f64(r.auc_pct),
                fmt_f64(r.fpr95_pct),
            ]
        })
        .collect();
    let cls: Vec<Vec<String>> = report
        .classification
        .iter()
        .map(|r| vec![r.method.name().into(), fmt_f64(r.auc_pct), fmt_f64(r.auc_fnr5_pct)])
        .collect();
    let mut out = BTreeMap::new();
    out.insert(
        METRICS_FILE,
        csv_bytes(
            Path::new(METRICS_FILE),
            &["method", "ood_set", "auc_pct", "fpr95_pct"],
            &ood,
        )?,
    );
    out.insert(
        EXITS_FILE,
        csv_bytes(
            Path::new(EXITS_FILE),
            &["method", "ood_set", "exit", "auc_pct", "fpr95_pct"],
            &exits,
        )?,
    );
    out.insert(
        CLASSIFICATION_FILE,
        csv_bytes(
            Path::new(CLASSIFICATION_FILE),
            &["method", "auc_pct", "auc_fnr5_pct"],
            &cls,
        )?,
    );
    Ok(out)
}

pub fn write_report(dir: &Path, report: &MetricsReport, curves: &[RocEntry]) -> Result<()> {
    for (name, bytes) in report_files(report)? {
        write_bytes(&dir.join(name), &bytes)?;
    }
    for c in curves {
        write_roc(&dir.join(roc_file_name(c.method, &c.ood_set)), &c.curve)?;
    }
    Ok(())
}

pub fn write_roc(path: &Path, curve: &RocCurve) -> Result<()> {
    let rows: Vec<Vec<String>> = curve
        .points
        .iter()
        .map(|p| vec![fmt_f64(p.fpr), fmt_f64(p.tpr)])
        .collect();
    write_csv(path, &["fpr", "tpr"], &rows)
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let p = dir.join(METRICS_FILE);
    let ood = read_csv(&p, &["method", "ood_set", "auc_pct", "fpr95_pct"])?
        .into_iter()
        .map(|(row, r)| {
            Ok(OodRow {
                method: parse_method(&p, row, &r[0])?,
                ood_set: r[1].to_string(),
                auc_pct: parse_f64(&p, row, "auc_pct", &r[2])?,
                fpr95_pct: parse_f64(&p, row, "fpr95_pct", &r[3])?,
            })
        })
        .collect::<Result<_>>()?;
    let p = dir.join(EXITS_FILE);
    let exits = read_csv(&p, &["method", "ood_set", "exit", "auc_pct", "fpr95_pct"])?
        .into_iter()
        .map(|(row, r)| {
            Ok(ExitRow {
                method: parse_method(&p, row, &r[0])?,
                ood_set: r[1].to_string(),
                exit: r[2].parse().map_err(|_| Error::row(&p, row, "bad exit index"))?,
                auc_pct: parse_f64(&p, row, "auc_pct", &r[3])?,
                fpr95_pct: parse_f64(&p, row, "fpr95_pct", &r[4])?,
            })
        })
        .collect::<Result<_>>()?;
    let p = dir.join(CLASSIFICATION_FILE);
    let classification = read_csv(&p, &["method", "auc_pct", "auc_fnr5_pct"])?
        .into_iter()
        .map(|(row, r)| {
            Ok(ClassificationRow {
                method: parse_method(&p, row, &r[0])?,
                auc_pct: parse_f64(&p, row, "auc_pct", &r[1])?,
                auc_fnr5_pct: parse_f64(&p, row, "auc_fnr5_pct", &r[2])?,
            })
        })
        .collect::<Result<_>>()?;
    let report = MetricsReport {
        ood,
        exits,
        classification,
    };
    report.validate()?;
    Ok(report)
}
