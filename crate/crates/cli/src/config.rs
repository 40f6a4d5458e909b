//! Run configuration: a TOML file plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use condensery::data::{load_idx, make_blob_split, normalize, normalize_with, BlobSpec};
use condensery::eval::EvalProtocol;
use condensery::models::{Architecture, ConvNetSpec, LinearSpec, MlpSpec};
use condensery::{CondenseConfig, LabeledDataset, NormStats};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::exit::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Idx,
    Blobs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Zero padding on each spatial side; unset means the smallest pad that
    /// makes the image divisible by the ConvNet's pooling.
    pub pad: Option<usize>,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shape: [usize; 3],
    pub spread: f64,
    pub separation: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Idx,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            pad: None,
            classes: 3,
            train_per_class: 100,
            test_per_class: 100,
            shape: [1, 8, 8],
            spread: 1.0,
            separation: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Convnet,
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub channels: usize,
    pub blocks: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchKind::Convnet,
            channels: 128,
            blocks: 3,
            hidden: vec![128, 128],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// "desk" (3 x 5 networks, 100 epochs) or "paper" (5 x 20, 300 epochs).
    pub protocol: String,
    pub experiments: Option<usize>,
    pub nets_per_experiment: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    /// Extra architectures to test on, e.g. `["convnet-32", "convnet-64", "mlp"]`.
    pub cross_archs: Vec<String>,
    /// Real images per class in the projection export.
    pub projection_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: "desk".into(),
            experiments: None,
            nets_per_experiment: None,
            epochs: None,
            lr: None,
            momentum: None,
            batch_size: None,
            cross_archs: Vec::new(),
            projection_per_class: 100,
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self) -> Result<EvalProtocol, CliError> {
        let mut p = EvalProtocol::named(&self.protocol).map_err(CliError::config)?;
        if let Some(v) = self.experiments {
            p.experiments = v;
        }
        if let Some(v) = self.nets_per_experiment {
            p.nets_per_experiment = v;
        }
        if let Some(v) = self.epochs {
            p.epochs = v;
        }
        if let Some(v) = self.lr {
            p.lr = v;
        }
        if let Some(v) = self.momentum {
            p.momentum = v;
        }
        if let Some(v) = self.batch_size {
            p.batch_size = v;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Flattened normalized pixels.
    Pixels,
    /// Last-tap features of a network trained on the full training set.
    Features,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoresetConfig {
    pub method: String,
    pub embedding: EmbeddingKind,
    /// Epochs of the real-data run that records forgetting events (and trains feature embeddings).
    pub trace_epochs: usize,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        CoresetConfig {
            method: "random".into(),
            embedding: EmbeddingKind::Pixels,
            trace_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub condense: CondenseConfig,
    pub eval: EvalConfig,
    pub coreset: CoresetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            condense: CondenseConfig::default(),
            eval: EvalConfig::default(),
            coreset: CoresetConfig::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["dataset", "model", "condense", "eval", "coreset"];

fn parse_value(raw: &str) -> Value {
    // anything that is not a TOML literal is taken as a bare string
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Resolves a bare key to `section.key` by looking it up in the defaults.
fn qualify(key: &str, defaults: &Table) -> Result<Vec<String>, CliError> {
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    if defaults.contains_key(key) && !SECTIONS.contains(&key) {
        return Ok(vec![key.to_string()]);
    }
    let owners: Vec<&str> = SECTIONS
        .iter()
        .copied()
        .filter(|s| {
            defaults
                .get(*s)
                .and_then(Value::as_table)
                .is_some_and(|t| t.contains_key(key))
        })
        .collect();
    // optional fields are absent from the serialized defaults
    let optional: &[(&str, &str)] = &[
        ("synth_per_class", "condense"),
        ("train_images", "dataset"),
        ("train_labels", "dataset"),
        ("test_images", "dataset"),
        ("test_labels", "dataset"),
        ("pad", "dataset"),
        ("experiments", "eval"),
        ("nets_per_experiment", "eval"),
        ("epochs", "eval"),
        ("lr", "eval"),
        ("momentum", "eval"),
        ("batch_size", "eval"),
    ];
    match owners.as_slice() {
        [one] => Ok(vec![one.to_string(), key.to_string()]),
        [] => optional
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(k, s)| vec![s.to_string(), k.to_string()])
            .ok_or_else(|| CliError::config(format!("unknown config key '{key}'"))),
        many => Err(CliError::config(format!(
            "key '{key}' is ambiguous, qualify it as one of: {}",
            many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn apply_override(table: &mut Table, assignment: &str, defaults: &Table) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override '{assignment}' is not of the form key=value")))?;
    let path = qualify(key.trim(), defaults)?;
    let mut node = table;
    for part in &path[..path.len() - 1] {
        node = node
            .entry(part.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("'{part}' is not a section")))?;
    }
    node.insert(path[path.len() - 1].clone(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<Table>(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let defaults = Table::try_from(RunConfig::default()).expect("defaults serialize");
        for o in overrides {
            apply_override(&mut table, o, &defaults)?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        cfg.condense.seed = cfg.seed;
        cfg.condense.validate().map_err(CliError::config)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture(&self, image_shape: [usize; 3], num_classes: usize) -> Architecture {
        match self.model.arch {
            ArchKind::Convnet => Architecture::ConvNet(
                ConvNetSpec::new(image_shape, num_classes)
                    .with_channels(self.model.channels)
                    .with_blocks(self.model.blocks),
            ),
            ArchKind::Mlp => Architecture::Mlp(MlpSpec {
                input_shape: image_shape,
                hidden: self.model.hidden.clone(),
                num_classes,
            }),
            ArchKind::Linear => Architecture::Linear(LinearSpec {
                input_shape: image_shape,
                num_classes,
            }),
        }
    }

    /// Parses `convnet`, `convnet-<channels>`, `mlp` or `linear`.
    pub fn named_architecture(&self, name: &str, image_shape: [usize; 3], num_classes: usize) -> Result<Architecture, CliError> {
        let mut alt = self.clone();
        match name.split_once('-') {
            Some(("convnet", ch)) => {
                alt.model.arch = ArchKind::Convnet;
                alt.model.channels = ch
                    .parse()
                    .map_err(|_| CliError::config(format!("bad channel count in architecture '{name}'")))?;
            }
            None if name == "convnet" => alt.model.arch = ArchKind::Convnet,
            None if name == "mlp" => alt.model.arch = ArchKind::Mlp,
            None if name == "linear" => alt.model.arch = ArchKind::Linear,
            _ => {
                return Err(CliError::config(format!(
                    "unknown architecture '{name}', expected convnet[-C], mlp or linear"
                )))
            }
        }
        Ok(alt.architecture(image_shape, num_classes))
    }

    fn pad_for(&self, height: usize) -> usize {
        if let Some(p) = self.dataset.pad {
            return p;
        }
        if self.model.arch != ArchKind::Convnet {
            return 0;
        }
        let m = 1usize << self.model.blocks;
        let target = height.div_ceil(m) * m;
        (target - height).div_ceil(2)
    }

    fn require(&self, key: &str, v: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        v.clone()
            .ok_or_else(|| CliError::config(format!("dataset.{key} is required for kind = \"idx\"")))
    }

    /// Raw (unnormalized, unpadded) train and test splits.
    fn raw_splits(&self) -> Result<(LabeledDataset, LabeledDataset), CliError> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Idx => {
                let train = load_idx(self.require("train_images", &d.train_images)?, self.require("train_labels", &d.train_labels)?)
                    .map_err(CliError::data)?;
                let test = load_idx(self.require("test_images", &d.test_images)?, self.require("test_labels", &d.test_labels)?)
                    .map_err(CliError::data)?;
                Ok((train, test))
            }
            DatasetKind::Blobs => {
                let spec = BlobSpec {
                    num_classes: d.classes,
                    image_shape: d.shape,
                    spread: d.spread,
                    separation: d.separation,
                    seed: self.seed,
                };
                make_blob_split(&spec, d.train_per_class, d.test_per_class).map_err(CliError::config)
            }
        }
    }

    /// Padded, normalized splits. Test data uses `stats` when given, else the train statistics.
    pub fn load_data(&self, stats: Option<&NormStats>) -> Result<Data, CliError> {
        let (train, test) = self.raw_splits()?;
        let pad = self.pad_for(train.image_shape()[1]);
        let train = train.pad_spatial(pad).map_err(CliError::data)?;
        let test = test.pad_spatial(pad).map_err(CliError::data)?;
        let train = match stats {
            Some(s) => normalize_with(&train, s),
            None => normalize(&train),
        }
        .map_err(CliError::data)?;
        let stats = train.norm_stats.clone().expect("normalized");
        let test = normalize_with(&test, &stats).map_err(CliError::data)?;
        if test.num_classes != train.num_classes {
            return Err(CliError::data(format!(
                "train has {} classes, test has {}",
                train.num_classes, test.num_classes
            )));
        }
        Ok(Data { train, test, stats, pad })
    }
}

pub struct Data {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub stats: NormStats,
    pub pad: usize,
}
