//! Line-oriented run configuration: `section.key = value`, `#` comments.
//!
//! Relative manifest paths resolve against the directory of the config
//! file.

use std::collections::BTreeSet;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use casemil::casedata::SyntheticConfig;
use casemil::evaluation::EvalConfig;
use casemil::model::ModelConfig;
use casemil::training::{Batching, OptimizerKind, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
}

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    fn bad(&self, msg: impl Display) -> ConfigError {
        ConfigError::Value {
            line: self.line,
            key: self.key.clone(),
            msg: msg.to_string(),
        }
    }

    fn unknown(&self) -> ConfigError {
        ConfigError::UnknownKey {
            line: self.line,
            key: self.key.clone(),
        }
    }

    fn parse<T: FromStr>(&self) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.value.parse().map_err(|e| self.bad(e))
    }

    fn list<T: FromStr>(&self) -> Result<Vec<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.value
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| self.bad(e)))
            .collect()
    }
}

/// Splits text into entries, rejecting malformed and duplicate keys.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let syntax = || ConfigError::Syntax {
            line,
            text: raw.trim().to_string(),
        };
        let (key, value) = body.split_once('=').ok_or_else(syntax)?;
        let (key, value) = (key.trim(), value.trim());
        let well_formed = key.split_once('.').is_some_and(|(s, k)| !s.is_empty() && !k.is_empty());
        if !well_formed || key.contains(char::is_whitespace) {
            return Err(syntax());
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Preprocessed manifests. Without a validation manifest, early
    /// stopping falls back to the training loss.
    Manifest {
        train: PathBuf,
        val: Option<PathBuf>,
        test: Option<PathBuf>,
    },
    /// Generated in memory; extents come from the model section and the
    /// seed from `seeds.data`.
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            data: 17,
            shuffle: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DataSource,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
}

#[derive(Default)]
struct DatasetKeys {
    manifest: Option<PathBuf>,
    val: Option<PathBuf>,
    test: Option<PathBuf>,
    synthetic: Option<bool>,
    synth: SyntheticConfig,
    synth_keys: Vec<String>,
}

fn apply_dataset(d: &mut DatasetKeys, e: &Entry, field: &str) -> Result<(), ConfigError> {
    let s = &mut d.synth;
    match field {
        "manifest" => d.manifest = Some(PathBuf::from(&e.value)),
        "val_manifest" => d.val = Some(PathBuf::from(&e.value)),
        "test_manifest" => d.test = Some(PathBuf::from(&e.value)),
        "synthetic" => d.synthetic = Some(e.parse()?),
        _ => {
            match field {
                "n_cases" => s.n_cases = e.parse()?,
                "malignant_fraction" => s.malignant_fraction = e.parse()?,
                "view_counts" => {
                    let v: Vec<f64> = e.list()?;
                    s.view_count_distribution = v
                        .try_into()
                        .map_err(|_| e.bad("expected 5 probabilities (single, one-side-many, one-per-side, four-standard, four-standard-extra)"))?;
                }
                "lesion_contrast" => s.lesion_contrast = e.parse()?,
                "benign_lesion_rate" => s.benign_lesion_rate = e.parse()?,
                "lesion_radius" => s.lesion_radius = e.parse()?,
                "train_fraction" => s.train_fraction = e.parse()?,
                "val_fraction" => s.val_fraction = e.parse()?,
                _ => return Err(e.unknown()),
            }
            d.synth_keys.push(e.key.clone());
        }
    }
    Ok(())
}

/// Applies one `model.*` field. `strides_set` records explicit stride keys
/// so channel lists can default their strides.
fn apply_model(m: &mut ModelConfig, e: &Entry, field: &str, strides_set: &mut BTreeSet<&'static str>) -> Result<(), ConfigError> {
    let f = &mut m.features;
    match field {
        "spec" => m.spec = e.parse()?,
        "image_height" => f.image_height = e.parse()?,
        "image_width" => f.image_width = e.parse()?,
        "global_channels" => f.global.channels = e.list()?,
        "global_strides" => {
            f.global.strides = e.list()?;
            strides_set.insert("global");
        }
        "local_channels" => f.local.channels = e.list()?,
        "local_strides" => {
            f.local.strides = e.list()?;
            strides_set.insert("local");
        }
        "local_embed" => f.local.embed_dim = e.parse()?,
        "t_fraction" => f.t_fraction = e.parse()?,
        "k" => f.k = e.parse()?,
        "patch_height" => f.patch_height = e.parse()?,
        "patch_width" => f.patch_width = e.parse()?,
        "roi_window_fraction" => f.roi_window_fraction = e.parse()?,
        "attention_hidden" => f.attention_hidden = e.parse()?,
        _ => return Err(e.unknown()),
    }
    Ok(())
}

fn finish_model(m: &mut ModelConfig, strides_set: &BTreeSet<&'static str>) -> Result<(), ConfigError> {
    let f = &mut m.features;
    if !strides_set.contains("global") {
        f.global.strides = vec![2; f.global.channels.len()];
    }
    if !strides_set.contains("local") {
        f.local.strides = vec![2; f.local.channels.len()];
    }
    // the global net's pooled dimension is its last channel count
    f.global.embed_dim = f.global.channels.last().copied().unwrap_or(0);
    let invalid = |e: casemil::tensor::TensorError| ConfigError::Invalid(e.to_string());
    f.global.validate("model.global").map_err(invalid)?;
    f.local.validate("model.local").map_err(invalid)?;
    if f.saliency_extents().is_none() {
        return Err(ConfigError::Invalid(format!(
            "model: images of {}x{} are too small for the global net",
            f.image_height, f.image_width
        )));
    }
    if !(f.t_fraction > 0.0 && f.t_fraction <= 1.0) {
        return Err(ConfigError::Invalid(format!("model.t_fraction {} outside (0,1]", f.t_fraction)));
    }
    if f.k == 0 || f.attention_hidden == 0 || f.patch_height == 0 || f.patch_width == 0 {
        return Err(ConfigError::Invalid(
            "model.k, model.attention_hidden and the patch extents must be positive".into(),
        ));
    }
    if f.patch_height > f.image_height || f.patch_width > f.image_width {
        return Err(ConfigError::Invalid("model: patch larger than the image".into()));
    }
    if !(f.roi_window_fraction > 0.0 && f.roi_window_fraction <= 1.0) {
        return Err(ConfigError::Invalid("model.roi_window_fraction outside (0,1]".into()));
    }
    Ok(())
}

fn apply_training(t: &mut TrainConfig, e: &Entry, field: &str, momentum: &mut f64, sgd: &mut bool) -> Result<(), ConfigError> {
    match field {
        "optimizer" => {
            *sgd = match e.value.as_str() {
                "adam" => false,
                "sgd" => true,
                other => return Err(e.bad(format!("`{other}`; expected adam or sgd"))),
            }
        }
        "momentum" => *momentum = e.parse()?,
        "lr" => t.lr = e.parse()?,
        "weight_decay" => t.weight_decay = e.parse()?,
        "beta" => t.beta = e.parse()?,
        "pos_weight" => {
            t.pos_weight = match e.value.as_str() {
                "auto" => None,
                _ => Some(e.parse()?),
            }
        }
        "batch_size" => t.batch_size = e.parse()?,
        "max_epochs" => t.max_epochs = e.parse()?,
        "patience" => t.patience = e.parse()?,
        "scheme" => t.scheme = e.parse()?,
        "batching" => {
            t.batching = match e.value.as_str() {
                "grouped" => Batching::Grouped,
                "mixed" => Batching::Mixed,
                other => return Err(e.bad(format!("`{other}`; expected grouped or mixed"))),
            }
        }
        _ => return Err(e.unknown()),
    }
    Ok(())
}

fn resolve(base: Option<&Path>, p: PathBuf) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

impl RunConfig {
    /// Parses a full run configuration; the dataset section is mandatory.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<RunConfig, ConfigError> {
        let mut data = DatasetKeys::default();
        let mut model = ModelConfig::default();
        let mut strides_set = BTreeSet::new();
        let mut training = TrainConfig::default();
        let (mut momentum, mut sgd) = (0.9, false);
        let mut eval = EvalConfig::default();
        let mut seeds = Seeds::default();
        for e in parse_entries(text)? {
            let (section, field) = e.key.split_once('.').expect("checked by parse_entries");
            match section {
                "dataset" => apply_dataset(&mut data, &e, field)?,
                "model" => apply_model(&mut model, &e, field, &mut strides_set)?,
                "training" => apply_training(&mut training, &e, field, &mut momentum, &mut sgd)?,
                "eval" => match field {
                    "roi_match_threshold" => eval.roi_match_threshold = e.parse()?,
                    "attention_threshold" => eval.attention_threshold = e.parse()?,
                    _ => return Err(e.unknown()),
                },
                "seeds" => match field {
                    "init" => seeds.init = e.parse()?,
                    "data" => seeds.data = e.parse()?,
                    "shuffle" => seeds.shuffle = e.parse()?,
                    _ => return Err(e.unknown()),
                },
                _ => return Err(e.unknown()),
            }
        }
        finish_model(&mut model, &strides_set)?;
        training.optimizer = if sgd {
            OptimizerKind::Sgd { momentum }
        } else {
            OptimizerKind::adam()
        };
        training.shuffle_seed = seeds.shuffle;
        if !(training.lr > 0.0) {
            return Err(ConfigError::Invalid("training.lr must be positive".into()));
        }
        if training.batch_size == 0 || training.max_epochs == 0 {
            return Err(ConfigError::Invalid(
                "training.batch_size and training.max_epochs must be positive".into(),
            ));
        }

        let dataset = match (data.manifest, data.synthetic.unwrap_or(false)) {
            (Some(_), true) => {
                return Err(ConfigError::Invalid(
                    "dataset: set either dataset.manifest or dataset.synthetic = true, not both".into(),
                ))
            }
            (None, false) => {
                return Err(ConfigError::Invalid(
                    "dataset section required: set dataset.manifest or dataset.synthetic = true".into(),
                ))
            }
            (Some(train), false) => {
                if let Some(k) = data.synth_keys.first() {
                    return Err(ConfigError::Invalid(format!("`{k}` only applies to synthetic datasets")));
                }
                DataSource::Manifest {
                    train: resolve(base_dir, train),
                    val: data.val.map(|p| resolve(base_dir, p)),
                    test: data.test.map(|p| resolve(base_dir, p)),
                }
            }
            (None, true) => {
                if data.val.is_some() || data.test.is_some() {
                    return Err(ConfigError::Invalid(
                        "dataset.val_manifest/test_manifest need dataset.manifest".into(),
                    ));
                }
                let mut s = data.synth;
                s.image_height = model.features.image_height;
                s.image_width = model.features.image_width;
                s.seed = seeds.data;
                s.validate().map_err(|e| ConfigError::Invalid(format!("dataset: {e}")))?;
                DataSource::Synthetic(s)
            }
        };
        Ok(RunConfig {
            dataset,
            model,
            training,
            eval,
            seeds,
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        RunConfig::parse(&text, path.parent())
    }

    /// Canonical text with every key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            DataSource::Manifest { train, val, test } => {
                kv(&mut s, "dataset.manifest", train.display());
                if let Some(v) = val {
                    kv(&mut s, "dataset.val_manifest", v.display());
                }
                if let Some(t) = test {
                    kv(&mut s, "dataset.test_manifest", t.display());
                }
            }
            DataSource::Synthetic(c) => {
                kv(&mut s, "dataset.synthetic", true);
                kv(&mut s, "dataset.n_cases", c.n_cases);
                kv(&mut s, "dataset.malignant_fraction", c.malignant_fraction);
                kv(&mut s, "dataset.view_counts", join(&c.view_count_distribution));
                kv(&mut s, "dataset.lesion_contrast", c.lesion_contrast);
                kv(&mut s, "dataset.benign_lesion_rate", c.benign_lesion_rate);
                kv(&mut s, "dataset.lesion_radius", c.lesion_radius);
                kv(&mut s, "dataset.train_fraction", c.train_fraction);
                kv(&mut s, "dataset.val_fraction", c.val_fraction);
            }
        }
        s.push_str(&model_text(&self.model));
        let t = &self.training;
        match t.optimizer {
            OptimizerKind::Adam { .. } => kv(&mut s, "training.optimizer", "adam"),
            OptimizerKind::Sgd { momentum } => {
                kv(&mut s, "training.optimizer", "sgd");
                kv(&mut s, "training.momentum", momentum);
            }
        }
        kv(&mut s, "training.lr", t.lr);
        kv(&mut s, "training.weight_decay", t.weight_decay);
        kv(&mut s, "training.beta", t.beta);
        match t.pos_weight {
            Some(w) => kv(&mut s, "training.pos_weight", w),
            None => kv(&mut s, "training.pos_weight", "auto"),
        }
        kv(&mut s, "training.batch_size", t.batch_size);
        kv(&mut s, "training.max_epochs", t.max_epochs);
        kv(&mut s, "training.patience", t.patience);
        kv(&mut s, "training.scheme", t.scheme);
        let batching = match t.batching {
            Batching::Grouped => "grouped",
            Batching::Mixed => "mixed",
        };
        kv(&mut s, "training.batching", batching);
        kv(&mut s, "eval.roi_match_threshold", self.eval.roi_match_threshold);
        kv(&mut s, "eval.attention_threshold", self.eval.attention_threshold);
        kv(&mut s, "seeds.init", self.seeds.init);
        kv(&mut s, "seeds.data", self.seeds.data);
        kv(&mut s, "seeds.shuffle", self.seeds.shuffle);
        s
    }
}

fn kv(s: &mut String, key: &str, value: impl Display) {
    let _ = writeln!(s, "{key} = {value}");
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// `model.*` lines for a model configuration.
pub fn model_text(m: &ModelConfig) -> String {
    let f = &m.features;
    let mut s = String::new();
    kv(&mut s, "model.spec", m.spec);
    kv(&mut s, "model.image_height", f.image_height);
    kv(&mut s, "model.image_width", f.image_width);
    kv(&mut s, "model.global_channels", join(&f.global.channels));
    kv(&mut s, "model.global_strides", join(&f.global.strides));
    kv(&mut s, "model.local_channels", join(&f.local.channels));
    kv(&mut s, "model.local_strides", join(&f.local.strides));
    kv(&mut s, "model.local_embed", f.local.embed_dim);
    kv(&mut s, "model.t_fraction", f.t_fraction);
    kv(&mut s, "model.k", f.k);
    kv(&mut s, "model.patch_height", f.patch_height);
    kv(&mut s, "model.patch_width", f.patch_width);
    kv(&mut s, "model.roi_window_fraction", f.roi_window_fraction);
    kv(&mut s, "model.attention_hidden", f.attention_hidden);
    s
}

/// Checkpoint sidecar: the model section plus `checkpoint.*` facts.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub best_epoch: usize,
    pub init_seed: u64,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        let mut s = model_text(&self.model);
        kv(&mut s, "checkpoint.best_epoch", self.best_epoch);
        kv(&mut s, "checkpoint.init_seed", self.init_seed);
        s
    }

    pub fn parse(text: &str) -> Result<CheckpointMeta, ConfigError> {
        let mut model = ModelConfig::default();
        let mut strides_set = BTreeSet::new();
        let (mut best_epoch, mut init_seed) = (None, None);
        for e in parse_entries(text)? {
            let (section, field) = e.key.split_once('.').expect("checked by parse_entries");
            match (section, field) {
                ("model", _) => apply_model(&mut model, &e, field, &mut strides_set)?,
                ("checkpoint", "best_epoch") => best_epoch = Some(e.parse()?),
                ("checkpoint", "init_seed") => init_seed = Some(e.parse()?),
                _ => return Err(e.unknown()),
            }
        }
        finish_model(&mut model, &strides_set)?;
        Ok(CheckpointMeta {
            model,
            best_epoch: best_epoch.ok_or_else(|| ConfigError::Invalid("checkpoint.best_epoch missing".into()))?,
            init_seed: init_seed.ok_or_else(|| ConfigError::Invalid("checkpoint.init_seed missing".into()))?,
        })
    }
}
