//! Parallel ensemble training and the on-disk ensemble layout:
//! `member_{i}/checkpoint/`, `member_{i}/manifest` and `ensemble.manifest`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use oodkit_core::dataset::Sample;
use oodkit_core::ensemble::{sample_member_configs, train_member, EnsembleSpec, MemberConfig, TrainedMember};
use oodkit_core::model::ModelConfig;
use oodkit_core::optim::OptimizerKind;
use oodkit_core::MultiExitModel;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, sha256_hex, ModelRecord};
use crate::error::{create_dir, read_text, write_bytes, Error, Result};

pub const ENSEMBLE_MANIFEST: &str = "ensemble.manifest";
pub const FORMAT: &str = "oodkit-ensemble";
pub const VERSION: i64 = 1;

/// Trains every member of `spec`, at most `threads` at a time (0 means one
/// per available core). Results do not depend on the thread count.
pub fn train_ensemble(
    base: &ModelConfig,
    spec: &EnsembleSpec,
    data: &[Sample],
    threads: usize,
) -> Result<Vec<TrainedMember>> {
    let configs = sample_member_configs(spec)?;
    let threads = match threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(configs.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<oodkit_core::Result<TrainedMember>>>> =
        configs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(config) = configs.get(i) else { break };
                let result = train_member(base, config, data);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            let result = slot.into_inner().expect("slot lock").expect("every member trained");
            result.map_err(Error::from)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecRecord {
    pub members: usize,
    pub leave_out: [f64; 2],
    pub learning_rate: [f64; 2],
    pub optimizers: Vec<String>,
    pub epochs: [usize; 2],
    pub batch_sizes: Vec<usize>,
    pub master_seed: String,
}

impl SpecRecord {
    pub fn from_spec(s: &EnsembleSpec) -> Self {
        SpecRecord {
            members: s.members,
            leave_out: [s.leave_out.0, s.leave_out.1],
            learning_rate: [s.learning_rate.0, s.learning_rate.1],
            optimizers: s.optimizers.iter().map(|o| o.name().to_string()).collect(),
            epochs: [s.epochs.0, s.epochs.1],
            batch_sizes: s.batch_sizes.clone(),
            master_seed: s.master_seed.to_string(),
        }
    }
}

/// Contents of `member_{i}/manifest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberRecord {
    pub index: usize,
    pub seed: String,
    pub leave_out_fraction: f64,
    pub learning_rate: f64,
    pub optimizer: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_fingerprint: String,
    pub epoch_loss: Vec<f64>,
    pub left_out: Vec<String>,
}

impl MemberRecord {
    pub fn new(m: &TrainedMember, fingerprint: String) -> Self {
        let c: &MemberConfig = &m.config;
        MemberRecord {
            index: c.index,
            seed: c.seed.to_string(),
            leave_out_fraction: c.leave_out_fraction,
            learning_rate: c.learning_rate,
            optimizer: c.optimizer.name().into(),
            epochs: c.epochs,
            batch_size: c.batch_size,
            checkpoint_fingerprint: fingerprint,
            epoch_loss: m.history.epoch_loss.clone(),
            left_out: m.left_out.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleManifest {
    format: String,
    version: i64,
    spec: SpecRecord,
    model: ModelRecord,
    member_fingerprints: Vec<String>,
}

pub fn member_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("member_{index}"))
}

/// Writes the ensemble layout and returns its fingerprint.
pub fn save(dir: &Path, base: &ModelConfig, spec: &EnsembleSpec, members: &[TrainedMember]) -> Result<String> {
    create_dir(dir)?;
    let mut fingerprints = Vec::new();
    for m in members {
        let mdir = member_dir(dir, m.config.index);
        let fp = checkpoint::save(&m.model, &mdir.join("checkpoint"))?;
        let record = MemberRecord::new(m, fp.clone());
        let text = toml::to_string(&record).map_err(|e| Error::Internal(e.to_string()))?;
        write_bytes(&mdir.join("manifest"), text.as_bytes())?;
        fingerprints.push(fp);
    }
    let manifest = EnsembleManifest {
        format: FORMAT.into(),
        version: VERSION,
        spec: SpecRecord::from_spec(spec),
        model: ModelRecord::from_config(base),
        member_fingerprints: fingerprints,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    write_bytes(&dir.join(ENSEMBLE_MANIFEST), text.as_bytes())?;
    Ok(sha256_hex(&[text.as_bytes()]))
}

pub fn is_ensemble_dir(dir: &Path) -> bool {
    dir.join(ENSEMBLE_MANIFEST).is_file()
}

#[derive(Debug, Clone)]
pub struct LoadedEnsemble {
    pub models: Vec<MultiExitModel>,
    pub members: Vec<MemberRecord>,
    pub fingerprint: String,
}

/// Loads every member and checks it against the recorded fingerprints.
pub fn load(dir: &Path) -> Result<LoadedEnsemble> {
    let path = dir.join(ENSEMBLE_MANIFEST);
    let text = read_text(&path)?;
    let manifest: EnsembleManifest = toml::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    if manifest.format != FORMAT {
        return Err(Error::parse(&path, format!("not an {FORMAT} manifest")));
    }
    if manifest.version != VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: VERSION,
        });
    }
    let mut models = Vec::new();
    let mut members = Vec::new();
    for (i, want) in manifest.member_fingerprints.iter().enumerate() {
        let mdir = member_dir(dir, i);
        let ckpt = checkpoint::load(&mdir.join("checkpoint"))?;
        if &ckpt.fingerprint != want {
            return Err(Error::Fingerprint(format!(
                "{} does not match the fingerprint in {}",
                mdir.display(),
                path.display()
            )));
        }
        if ModelRecord::from_config(ckpt.model.config()) != manifest.model {
            return Err(Error::parse(&path, format!("member {i} has a different architecture")));
        }
        let mpath = mdir.join("manifest");
        let record: MemberRecord = toml::from_str(&read_text(&mpath)?).map_err(|e| Error::parse(&mpath, e))?;
        if OptimizerKind::parse(&record.optimizer).is_none() {
            return Err(Error::parse(
                &mpath,
                format!("unknown optimizer {:?}", record.optimizer),
            ));
        }
        models.push(ckpt.model);
        members.push(record);
    }
    if models.len() < 2 {
        return Err(Error::parse(&path, "an ensemble needs at least 2 members"));
    }
    Ok(LoadedEnsemble {
        models,
        members,
        fingerprint: sha256_hex(&[text.as_bytes()]),
    })
}
