//! Run configuration, read from a TOML file and overridden by CLI flags.

use std::path::{Path, PathBuf};

use oodkit_core::ensemble::EnsembleSpec;
use oodkit_core::imaging::CorruptionConfig;
use oodkit_core::model::ModelConfig;
use oodkit_core::optim::{OptimizerConfig, OptimizerKind};
use oodkit_core::scoring::{Method, DEFAULT_QUANTILE, DEFAULT_TEMPERATURE};
use oodkit_core::tensor::OddPolicy;
use serde::{Deserialize, Serialize};

use crate::data::ClassMap;
use crate::error::{read_text, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: String,
    pub temperature: f64,
    pub quantile: f64,
    pub input_size: usize,
    pub paths: PathsSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ensemble: EnsembleSection,
    pub corrupt: CorruptSection,
}

/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Class names in index order; defaults to `"0"`..`"K-1"`.
    pub classes: Option<Vec<String>>,
    /// Defaults to the last class.
    pub malignant_class: Option<usize>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// IDX digits used as classes `0..`, in order.
    pub idx_digits: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub exit_after: [usize; 2],
    pub head_channels: usize,
    pub loss_weights: [f64; 3],
    pub pad_odd: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            conv_channels: d.conv_channels,
            kernel_size: d.kernel_size,
            hidden: d.hidden,
            num_classes: d.num_classes,
            exit_after: d.exit_after,
            head_channels: d.head_channels,
            loss_weights: d.loss_weights,
            pad_odd: d.pool_odd == OddPolicy::Pad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 16,
            optimizer: "adam".into(),
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub members: usize,
    pub leave_out: [f64; 2],
    pub learning_rate: [f64; 2],
    pub optimizers: Vec<String>,
    pub epochs: [usize; 2],
    pub batch_sizes: Vec<usize>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let d = EnsembleSpec::default();
        EnsembleSection {
            members: d.members,
            leave_out: [d.leave_out.0, d.leave_out.1],
            learning_rate: [d.learning_rate.0, d.learning_rate.1],
            optimizers: d.optimizers.iter().map(|o| o.name().to_string()).collect(),
            epochs: [d.epochs.0, d.epochs.1],
            batch_sizes: d.batch_sizes,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptSection {
    pub dark_regions: bool,
    pub blur: bool,
    pub noise: bool,
    pub dark_count: [usize; 2],
    pub dark_size: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub noise_std: [f64; 2],
}

impl Default for CorruptSection {
    fn default() -> Self {
        let d = CorruptionConfig::default();
        CorruptSection {
            dark_regions: d.dark_regions,
            blur: d.blur,
            noise: d.noise,
            dark_count: [d.dark_count.0, d.dark_count.1],
            dark_size: [d.dark_size.0, d.dark_size.1],
            blur_sigma: [d.blur_sigma.0, d.blur_sigma.1],
            noise_std: [d.noise_std.0, d.noise_std.1],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            method: Method::Energy.name().into(),
            temperature: DEFAULT_TEMPERATURE,
            quantile: DEFAULT_QUANTILE,
            input_size: ModelConfig::default().input_size,
            paths: PathsSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            ensemble: EnsembleSection::default(),
            corrupt: CorruptSection::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub temperature: Option<f64>,
    pub quantile: Option<f64>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let mut c: RunConfig = toml::from_str(&read_text(p)?).map_err(|e| Error::parse(p, e))?;
                let base = p.parent().unwrap_or(Path::new(""));
                for slot in [
                    &mut c.paths.data,
                    &mut c.paths.model,
                    &mut c.paths.output,
                    &mut c.data.idx_images,
                    &mut c.data.idx_labels,
                ] {
                    resolve(base, slot);
                }
                c
            }
            None => RunConfig::default(),
        };
        if let Some(v) = overrides.seed {
            config.seed = v;
        }
        if let Some(v) = &overrides.method {
            config.method = v.clone();
        }
        if let Some(v) = overrides.temperature {
            config.temperature = v;
        }
        if let Some(v) = overrides.quantile {
            config.quantile = v;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.method()?;
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Usage(format!("seed must be below 2^63, got {}", self.seed)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Usage(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Usage(format!(
                "quantile must lie in (0, 1), got {}",
                self.quantile
            )));
        }
        self.model_config()?.param_specs()?;
        self.classes()?;
        Ok(())
    }

    pub fn method(&self) -> Result<Method> {
        Method::parse(&self.method).ok_or_else(|| {
            Error::Usage(format!(
                "unknown method {:?} (expected softmax, energy, ensemble or ensemble-weighted)",
                self.method
            ))
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            input_size: self.input_size,
            conv_channels: m.conv_channels.clone(),
            kernel_size: m.kernel_size,
            hidden: m.hidden,
            num_classes: m.num_classes,
            exit_after: m.exit_after,
            head_channels: m.head_channels,
            loss_weights: m.loss_weights,
            pool_odd: if m.pad_odd { OddPolicy::Pad } else { OddPolicy::Error },
            seed: self.seed,
        })
    }

    pub fn train_optimizer(&self) -> Result<OptimizerConfig> {
        let kind = parse_optimizer(&self.train.optimizer)?;
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Usage("train.learning_rate must be positive".into()));
        }
        Ok(OptimizerConfig {
            kind,
            learning_rate: self.train.learning_rate,
        })
    }

    pub fn ensemble_spec(&self) -> Result<EnsembleSpec> {
        let e = &self.ensemble;
        let spec = EnsembleSpec {
            members: e.members,
            leave_out: (e.leave_out[0], e.leave_out[1]),
            learning_rate: (e.learning_rate[0], e.learning_rate[1]),
            optimizers: e.optimizers.iter().map(|o| parse_optimizer(o)).collect::<Result<_>>()?,
            epochs: (e.epochs[0], e.epochs[1]),
            batch_sizes: e.batch_sizes.clone(),
            master_seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn corruption(&self) -> Result<CorruptionConfig> {
        let c = &self.corrupt;
        let cfg = CorruptionConfig {
            seed: self.seed,
            dark_regions: c.dark_regions,
            blur: c.blur,
            noise: c.noise,
            dark_count: (c.dark_count[0], c.dark_count[1]),
            dark_size: (c.dark_size[0], c.dark_size[1]),
            blur_sigma: (c.blur_sigma[0], c.blur_sigma[1]),
            noise_std: (c.noise_std[0], c.noise_std[1]),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn classes(&self) -> Result<ClassMap> {
        let k = self.model.num_classes;
        let names = match &self.data.classes {
            Some(names) if names.len() != k => {
                return Err(Error::Usage(format!(
                    "data.classes lists {} names for {k} classes",
                    names.len()
                )))
            }
            Some(names) => names.clone(),
            None => ClassMap::numeric(k).names,
        };
        ClassMap::new(names, self.data.malignant_class.unwrap_or(k.saturating_sub(1)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    OptimizerKind::parse(s).ok_or_else(|| Error::Usage(format!("unknown optimizer {s:?}")))
}
