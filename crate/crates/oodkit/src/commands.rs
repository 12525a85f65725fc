//! The work behind each subcommand. Every command reads its inputs, writes
//! its outputs and nothing else.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::path::{Component, Path, PathBuf};

use oodkit_core::dataset::{require_all_classes, Sample};
use oodkit_core::ensemble::ensemble_predict;
use oodkit_core::imaging::{corrupt as corrupt_image, make_synthetic, uniform_noise};
use oodkit_core::metrics::ClassifiedSample;
use oodkit_core::report::{build_report, MethodInput, MetricsReport, ScoreColumn};
use oodkit_core::rng::derive_seed;
use oodkit_core::scoring::{
    calibrate as calibrate_scores, exit_energy_scores, gate_margin, msp_score, Method, Origin, ScoreRecord,
};
use oodkit_core::tensor::softmax;
use oodkit_core::train::{train as train_model, TrainOptions};
use oodkit_core::MultiExitModel;
use serde::Serialize;

use crate::checkpoint::{self, sha256_hex};
use crate::config::RunConfig;
use crate::data::{labelled, load_idx_subset, write_manifest, write_png, DatasetManifest, ManifestRow, Split};
use crate::ensemble::{self, LoadedEnsemble};
use crate::error::{create_dir, read_bytes, write_bytes, Error, Result};
use crate::formats::{self, Prediction, ScoreFile, ScoreMeta, ThresholdFile};

pub const RUN_LOCK: &str = "run.lock";
const BUSY_LOCK: &str = ".oodkit.lock";
const STREAM_SHUFFLE: u64 = 1;

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        create_dir(dir)?;
        let path = dir.join(BUSY_LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked {
                dir: dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(Error::write(&path, e)),
        }
    }

    /// Locks the directory a single output file goes into.
    pub fn for_file(file: &Path) -> Result<Self> {
        match file.parent() {
            Some(p) if !p.as_os_str().is_empty() => Self::acquire(p),
            _ => Self::acquire(Path::new(".")),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
struct RunLock<'a> {
    command: &'a str,
    version: &'a str,
    seeds: BTreeMap<&'a str, String>,
    inputs: BTreeMap<&'a str, String>,
    artifacts: BTreeMap<String, String>,
    config: &'a RunConfig,
}

fn write_run_lock(dir: &Path, lock: &RunLock<'_>) -> Result<()> {
    let text = toml::to_string(lock).map_err(|e| Error::Internal(e.to_string()))?;
    write_bytes(&dir.join(RUN_LOCK), text.as_bytes())
}

/// Digest of a manifest and every image file it lists.
fn dataset_fingerprint(manifest: &DatasetManifest) -> Result<String> {
    let mut parts: Vec<Vec<u8>> = vec![read_bytes(&manifest.path)?];
    for row in &manifest.rows {
        parts.push(read_bytes(&manifest.root().join(&row.path))?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(sha256_hex(&refs))
}

/// Training data: the `train` split of a manifest, or the configured IDX
/// files when no manifest is given.
fn training_data(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<Sample>, String)> {
    let classes = cfg.classes()?;
    let (samples, fp, source) = match (data, &cfg.data.idx_images, &cfg.data.idx_labels) {
        (Some(path), _, _) => {
            let manifest = DatasetManifest::read(path)?;
            let items = manifest.load(cfg.input_size, Some(Split::Train), &classes)?;
            let fp = dataset_fingerprint(&manifest)?;
            (labelled(items, &manifest.path)?, fp, manifest.path)
        }
        (None, Some(images), Some(labels)) => {
            let digits = cfg
                .data
                .idx_digits
                .clone()
                .unwrap_or_else(|| (0..cfg.model.num_classes as u8).collect());
            if digits.len() != cfg.model.num_classes {
                return Err(Error::Usage(format!(
                    "data.idx_digits lists {} digits for {} classes",
                    digits.len(),
                    cfg.model.num_classes
                )));
            }
            let s = load_idx_subset(images, labels, &digits, cfg.input_size)?;
            let fp = sha256_hex(&[&read_bytes(images)?, &read_bytes(labels)?]);
            (s, fp, images.clone())
        }
        _ => {
            return Err(Error::Usage(
                "no training data: pass --data or set data.idx_images and data.idx_labels".into(),
            ))
        }
    };
    if samples.is_empty() {
        return Err(Error::parse(&source, "no training samples"));
    }
    require_all_classes(&samples, cfg.model.num_classes).map_err(|e| Error::parse(&source, e))?;
    Ok((samples, fp))
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<String> {
    let _lock = OutputLock::acquire(out)?;
    let (samples, data_fp) = training_data(cfg, data)?;
    let mut model = MultiExitModel::new(cfg.model_config()?)?;
    let shuffle_seed = derive_seed(cfg.seed, STREAM_SHUFFLE);
    let opts = TrainOptions {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        optimizer: cfg.train_optimizer()?,
        seed: shuffle_seed,
    };
    let history = train_model(&mut model, &samples, &opts)?;
    let fp = checkpoint::save(&model, out)?;
    let loss = history
        .epoch_loss
        .iter()
        .map(|l| formats::fmt_f64(*l))
        .collect::<Vec<_>>()
        .join(",");
    write_run_lock(
        out,
        &RunLock {
            command: "train",
            version: env!("CARGO_PKG_VERSION"),
            seeds: BTreeMap::from([
                ("model_init", cfg.seed.to_string()),
                ("shuffle", shuffle_seed.to_string()),
            ]),
            inputs: BTreeMap::from([("data", data_fp)]),
            artifacts: BTreeMap::from([("checkpoint".to_string(), fp.clone()), ("epoch_loss".to_string(), loss)]),
            config: cfg,
        },
    )?;
    Ok(fp)
}

pub fn train_ensemble(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<String> {
    let _lock = OutputLock::acquire(out)?;
    let (samples, data_fp) = training_data(cfg, data)?;
    let spec = cfg.ensemble_spec()?;
    let base = cfg.model_config()?;
    let members = ensemble::train_ensemble(&base, &spec, &samples, cfg.ensemble.threads)?;
    let fp = ensemble::save(out, &base, &spec, &members)?;
    let mut artifacts = BTreeMap::from([("ensemble".to_string(), fp.clone())]);
    for m in &members {
        artifacts.insert(format!("member_{}", m.config.index), checkpoint::fingerprint(&m.model));
    }
    write_run_lock(
        out,
        &RunLock {
            command: "train-ensemble",
            version: env!("CARGO_PKG_VERSION"),
            seeds: BTreeMap::from([("master", cfg.seed.to_string())]),
            inputs: BTreeMap::from([("data", data_fp)]),
            artifacts,
            config: cfg,
        },
    )?;
    Ok(fp)
}

enum Scorer {
    Single(checkpoint::Checkpoint),
    Ensemble(LoadedEnsemble),
}

impl Scorer {
    fn load(path: &Path, method: Method) -> Result<Self> {
        let is_ens = ensemble::is_ensemble_dir(path);
        match (method.is_ensemble(), is_ens) {
            (true, true) => Ok(Scorer::Ensemble(ensemble::load(path)?)),
            (false, false) => Ok(Scorer::Single(checkpoint::load(path)?)),
            (true, false) => Err(Error::Usage(format!(
                "method {method} needs an ensemble directory; {} is not one",
                path.display()
            ))),
            (false, true) => Err(Error::Usage(format!(
                "method {method} needs a single checkpoint; {} is an ensemble",
                path.display()
            ))),
        }
    }

    fn fingerprint(&self) -> &str {
        match self {
            Scorer::Single(c) => &c.fingerprint,
            Scorer::Ensemble(e) => &e.fingerprint,
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Scorer::Single(c) => c.model.num_classes(),
            Scorer::Ensemble(e) => e.models[0].num_classes(),
        }
    }

    fn input_size(&self) -> usize {
        match self {
            Scorer::Single(c) => c.model.config().input_size,
            Scorer::Ensemble(e) => e.models[0].config().input_size,
        }
    }
}

/// Options of [`score`] beyond the run config.
#[derive(Debug, Clone)]
pub struct ScoreArgs<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub split: Option<Split>,
    pub origin: Origin,
    pub out: &'a Path,
    pub predictions: Option<&'a Path>,
    pub thresholds: Option<&'a Path>,
}

/// Scores every image of the selected split. For the energy method,
/// `combined` is the gate margin when thresholds are given and the final-exit
/// score otherwise.
pub fn score(cfg: &RunConfig, args: &ScoreArgs<'_>) -> Result<usize> {
    let method = cfg.method()?;
    let scorer = Scorer::load(args.model, method)?;
    let thresholds = match args.thresholds {
        Some(p) => {
            let t = ThresholdFile::read(p)?;
            t.check(method, scorer.fingerprint(), cfg.temperature)?;
            Some(t)
        }
        None => None,
    };
    let mut classes = cfg.classes()?;
    if classes.names.len() != scorer.num_classes() {
        return Err(Error::Usage(format!(
            "config has {} classes, the model has {}",
            classes.names.len(),
            scorer.num_classes()
        )));
    }
    classes.malignant = classes.malignant.min(scorer.num_classes() - 1);
    let manifest = DatasetManifest::read(args.data)?;
    let items = manifest.load(scorer.input_size(), args.split, &classes)?;
    if items.is_empty() {
        return Err(Error::parse(&manifest.path, "no images in the selected split"));
    }
    let _lock = OutputLock::for_file(args.out)?;
    let mut records = Vec::with_capacity(items.len());
    let mut preds = Vec::with_capacity(items.len());
    for item in &items {
        let (exit_scores, combined, malignant) = match &scorer {
            Scorer::Single(c) => {
                let logits = c.model.forward(&item.image)?;
                let probs = softmax(logits.final_logits());
                let malignant = probs[classes.malignant];
                match method {
                    Method::Softmax => (None, msp_score(logits.final_logits())?, malignant),
                    _ => {
                        let ex = exit_energy_scores(&logits, cfg.temperature)?;
                        let combined = match &thresholds {
                            Some(t) => gate_margin(&ex, &t.set())?,
                            None => ex[2],
                        };
                        (Some(ex), combined, malignant)
                    }
                }
            }
            Scorer::Ensemble(e) => {
                let out = ensemble_predict(&e.models, &item.image)?;
                let weighted = method == Method::EnsembleWeighted;
                (
                    None,
                    out.id_score(weighted),
                    out.malignant_score(Some(classes.malignant))?,
                )
            }
        };
        records.push(ScoreRecord {
            sample_id: item.id.clone(),
            method,
            exit_scores,
            combined,
            origin: args.origin,
        });
        preds.push(Prediction {
            sample_id: item.id.clone(),
            method,
            label: item.label,
            malignant_score: malignant,
            cancer: item.label.map(|l| l == classes.malignant),
        });
    }
    let file = ScoreFile {
        meta: ScoreMeta {
            method: method.name().into(),
            model_fingerprint: scorer.fingerprint().into(),
            temperature: cfg.temperature,
            thresholds_fingerprint: thresholds.as_ref().map(ThresholdFile::fingerprint),
        },
        records,
    };
    file.write(args.out)?;
    if let Some(p) = args.predictions {
        formats::write_predictions(p, &preds)?;
    }
    Ok(items.len())
}

/// Calibration columns: one per exit for energy scores, else `combined`.
fn calibration_columns(file: &ScoreFile, source: &Path) -> Result<Vec<Vec<f64>>> {
    if file.method() == Method::Energy {
        let cols = file
            .exit_columns()
            .ok_or_else(|| Error::parse(source, "energy scores need all three exit columns"))?;
        Ok(cols.to_vec())
    } else {
        Ok(vec![file.combined()])
    }
}

pub fn calibrate(cfg: &RunConfig, scores: &Path, out: &Path) -> Result<ThresholdFile> {
    let file = ScoreFile::read(scores)?;
    if let Some(r) = file.records.iter().find(|r| r.origin != Origin::Id) {
        return Err(Error::parse(
            scores,
            format!("calibration needs ID scores; {} is {}", r.sample_id, r.origin.name()),
        ));
    }
    let set = calibrate_scores(&calibration_columns(&file, scores)?, cfg.quantile)?;
    let t = ThresholdFile {
        method: file.meta.method.clone(),
        model_fingerprint: file.meta.model_fingerprint.clone(),
        temperature: file.meta.temperature,
        quantile: set.quantile,
        thresholds: set.thresholds,
        scores_fingerprint: set.fingerprint,
    };
    let _lock = OutputLock::for_file(out)?;
    t.write(out)?;
    Ok(t)
}

/// Inputs of [`evaluate`]: score files for any number of methods.
#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub id: Vec<PathBuf>,
    /// `(set name, scores file)`.
    pub ood: Vec<(String, PathBuf)>,
    pub thresholds: Vec<PathBuf>,
    pub predictions: Vec<PathBuf>,
    pub out: PathBuf,
}

fn check_origin(file: &ScoreFile, path: &Path, want: Origin) -> Result<()> {
    match file.records.iter().find(|r| r.origin != want) {
        Some(r) => Err(Error::parse(
            path,
            format!("{} is {}, expected {}", r.sample_id, r.origin.name(), want.name()),
        )),
        None if file.records.is_empty() => Err(Error::parse(path, "no scores")),
        None => Ok(()),
    }
}

fn same_source(a: &ScoreFile, b: &ScoreFile, a_path: &Path, b_path: &Path) -> Result<()> {
    if a.meta.model_fingerprint != b.meta.model_fingerprint {
        return Err(Error::Fingerprint(format!(
            "{} and {} come from different models",
            a_path.display(),
            b_path.display()
        )));
    }
    if a.meta.temperature != b.meta.temperature && a.method() == Method::Energy {
        return Err(Error::Fingerprint(format!(
            "{} and {} use different temperatures",
            a_path.display(),
            b_path.display()
        )));
    }
    Ok(())
}

/// Energy columns rescored as gate margins.
fn gated(file: &ScoreFile, path: &Path, t: &oodkit_core::scoring::ThresholdSet) -> Result<ScoreColumn> {
    let exits = file
        .exit_columns()
        .ok_or_else(|| Error::parse(path, "energy scores need all three exit columns"))?;
    let combined = file
        .records
        .iter()
        .map(|r| gate_margin(&r.exit_scores.expect("checked above"), t))
        .collect::<oodkit_core::Result<Vec<_>>>()?;
    Ok(ScoreColumn {
        combined,
        exits: Some(exits),
    })
}

/// Computes all metrics tables and ROC curves. Energy scores are evaluated
/// through the all-exits gate, using the given thresholds or, failing that,
/// thresholds calibrated on the ID scores themselves.
pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<MetricsReport> {
    let mut ids: BTreeMap<Method, (ScoreFile, PathBuf)> = BTreeMap::new();
    for p in &args.id {
        let f = ScoreFile::read(p)?;
        check_origin(&f, p, Origin::Id)?;
        let m = f.method();
        if ids.insert(m, (f, p.clone())).is_some() {
            return Err(Error::Usage(format!("more than one ID scores file for method {m}")));
        }
    }
    let mut thresholds: BTreeMap<Method, ThresholdFile> = BTreeMap::new();
    for p in &args.thresholds {
        let t = ThresholdFile::read(p)?;
        let m = Method::parse(&t.method).ok_or_else(|| Error::parse(p, format!("unknown method {:?}", t.method)))?;
        let (f, _) = ids.get(&m).ok_or_else(|| {
            Error::Usage(format!(
                "thresholds {} are for method {m}, which has no ID scores",
                p.display()
            ))
        })?;
        t.check(m, &f.meta.model_fingerprint, f.meta.temperature)?;
        thresholds.insert(m, t);
    }
    let mut gates = BTreeMap::new();
    for (m, (f, p)) in &ids {
        if *m == Method::Energy {
            let set = match thresholds.get(m) {
                Some(t) => t.set(),
                None => calibrate_scores(&calibration_columns(f, p)?, cfg.quantile)?,
            };
            gates.insert(*m, set);
        }
    }
    let column = |m: Method, f: &ScoreFile, p: &Path| -> Result<ScoreColumn> {
        match gates.get(&m) {
            Some(t) => gated(f, p, t),
            None => Ok(ScoreColumn {
                combined: f.combined(),
                exits: None,
            }),
        }
    };
    let mut inputs: BTreeMap<Method, MethodInput> = BTreeMap::new();
    for (m, (f, p)) in &ids {
        inputs.insert(
            *m,
            MethodInput {
                method: *m,
                id: column(*m, f, p)?,
                ood: Vec::new(),
                classification: None,
            },
        );
    }
    for (set, p) in &args.ood {
        let f = ScoreFile::read(p)?;
        check_origin(&f, p, Origin::Ood)?;
        let m = f.method();
        let (idf, idp) = ids.get(&m).ok_or_else(|| {
            Error::Usage(format!(
                "{} holds {m} scores but no ID scores for {m} were given",
                p.display()
            ))
        })?;
        same_source(idf, &f, idp, p)?;
        let col = column(m, &f, p)?;
        let input = inputs.get_mut(&m).expect("inserted for every ID file");
        if input.ood.iter().any(|(s, _)| s == set) {
            return Err(Error::Usage(format!("OOD set {set:?} given twice for method {m}")));
        }
        input.ood.push((set.clone(), col));
    }
    for p in &args.predictions {
        let preds = formats::read_predictions(p)?;
        let Some(first) = preds.first() else {
            return Err(Error::parse(p, "no predictions"));
        };
        let m = first.method;
        let (idf, _) = ids.get(&m).ok_or_else(|| {
            Error::Usage(format!(
                "{} holds {m} predictions but no ID scores for {m} were given",
                p.display()
            ))
        })?;
        let input = inputs.get_mut(&m).expect("inserted for every ID file");
        let by_id: HashMap<&str, f64> = idf
            .records
            .iter()
            .zip(&input.id.combined)
            .map(|(r, s)| (r.sample_id.as_str(), *s))
            .collect();
        let mut samples = Vec::new();
        for pr in &preds {
            if pr.method != m {
                return Err(Error::parse(p, "predictions mix methods"));
            }
            let Some(cancer) = pr.cancer else { continue };
            let ood_score = *by_id
                .get(pr.sample_id.as_str())
                .ok_or_else(|| Error::parse(p, format!("{} has no ID score", pr.sample_id)))?;
            samples.push(ClassifiedSample {
                ood_score,
                malignant_score: pr.malignant_score,
                is_cancer: cancer,
            });
        }
        input.classification = Some(samples);
    }
    let inputs: Vec<MethodInput> = inputs.into_values().collect();
    let (report, curves) = build_report(&inputs)?;
    let _lock = OutputLock::acquire(&args.out)?;
    formats::write_report(&args.out, &report, &curves)?;
    Ok(report)
}

/// Corrupts every image of `split` (all rows if `None`) and writes PNGs plus a
/// manifest under `out`. Image `i` of the selection uses per-image seed `i`.
pub fn corrupt(cfg: &RunConfig, data: &Path, split: Option<Split>, out: &Path) -> Result<usize> {
    let corruption = cfg.corruption()?;
    let manifest = DatasetManifest::read(data)?;
    let _lock = OutputLock::acquire(out)?;
    let mut rows = Vec::new();
    for (i, row) in manifest.rows_in(split).enumerate() {
        let rel = Path::new(&row.path);
        if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(Error::row(
                &manifest.path,
                row.row,
                format!("path {:?} leaves the dataset directory", row.path),
            ));
        }
        let image = manifest.decode(row)?;
        let corrupted = corrupt_image(&image, &corruption, i as u64)?;
        let out_rel = rel.with_extension("png");
        write_png(&out.join(&out_rel), &corrupted)?;
        rows.push(ManifestRow {
            row: rows.len() + 1,
            path: out_rel.to_string_lossy().replace('\\', "/"),
            label: row.label.clone(),
            split: row.split,
        });
    }
    write_manifest(&out.join(crate::data::MANIFEST_FILE), &rows)?;
    Ok(rows.len())
}

/// Markdown tables of an evaluation directory.
pub fn report(eval_dir: &Path) -> Result<String> {
    let r = formats::read_report(eval_dir)?;
    Ok(format!(
        "## OOD detection\n\n{}\n## Per-exit energy scores\n\n{}\n## Classification\n\n{}",
        r.ood_table(),
        r.exit_table(),
        r.classification_table()
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Class-dependent blobs in train/calibrate/test splits.
    Blobs,
    /// Unlabelled uniform-noise images in the test split.
    Noise,
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub kind: SynthKind,
    /// Images per class and split: train, calibrate, test. For noise only
    /// the test count is used, as a total.
    pub counts: [usize; 3],
    pub size: usize,
    pub out: PathBuf,
}

/// Writes a synthetic image set and its manifest.
pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<usize> {
    let _lock = OutputLock::acquire(&args.out)?;
    let mut rows = Vec::new();
    let mut emit = |split: Split, name: String, label: String, image: &oodkit_core::Tensor| -> Result<()> {
        let rel = format!("{split}/{name}.png");
        write_png(&args.out.join(&rel), image)?;
        rows.push(ManifestRow {
            row: rows.len() + 1,
            path: rel,
            label,
            split,
        });
        Ok(())
    };
    match args.kind {
        SynthKind::Blobs => {
            let classes = cfg.classes()?;
            for (s, split) in [Split::Train, Split::Calibrate, Split::Test].into_iter().enumerate() {
                if args.counts[s] == 0 {
                    continue;
                }
                let seed = derive_seed(cfg.seed, s as u64);
                for sample in make_synthetic(classes.names.len(), args.counts[s], args.size, seed)? {
                    emit(split, sample.id, classes.names[sample.label].clone(), &sample.image)?;
                }
            }
        }
        SynthKind::Noise => {
            for (i, image) in uniform_noise(args.counts[2], args.size, cfg.seed).iter().enumerate() {
                emit(Split::Test, format!("noise_{i:05}"), String::new(), image)?;
            }
        }
    }
    write_manifest(&args.out.join(crate::data::MANIFEST_FILE), &rows)?;
    Ok(rows.len())
}
