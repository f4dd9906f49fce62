//! Run configuration: a TOML file whose values command-line flags override.
//!
//! ```toml
//! seed = 7
//! graph = "stick9"
//! variant = "ae-l"
//! protocol = "1nn"
//!
//! [data]
//! frames = 32
//! synthetic = { classes = 4, per_class = 50 }
//!
//! [model]
//! channels = [16, 32, 64]
//! latent_dim = 64
//!
//! [train]
//! epochs = 50
//!
//! [eval]
//! rotated_test = true
//! ```
//!
//! Unknown keys are rejected at every level. `model.joints` and
//! `model.frames` are always taken from the dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skelae::data::{BodyMode, Precision, SplitKind, SynthConfig, DEFAULT_FRAMES};
use skelae::evaluation::Distance;
use skelae::model::ModelConfig;
use skelae::training::{TrainConfig, Variant};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SKELAE_OUT";
pub const DEFAULT_OUT: &str = "skelae-out";
pub const DEFAULT_CACHE: &str = "dataset.skds";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[value(name = "1nn")]
    #[serde(rename = "1nn")]
    Knn1,
    Lep,
    Finetune,
    Supervised,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Knn1 => "1nn",
            Protocol::Lep => "lep",
            Protocol::Finetune => "finetune",
            Protocol::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Built-in topology name or bone-list file.
    pub graph: Option<String>,
    pub variant: Option<Variant>,
    pub protocol: Option<Protocol>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SynthConfig>,
    /// Directory of NTU `.skeleton` files.
    pub ntu: Option<PathBuf>,
    pub split: SplitKind,
    pub body: BodyMode,
    /// Fixed temporal length of NTU sequences after resampling.
    pub frames: usize,
    pub normalize: bool,
    pub precision: Precision,
    /// Cache file name under the output directory.
    pub cache: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: None,
            ntu: None,
            split: SplitKind::CrossSubject,
            body: BodyMode::First,
            frames: DEFAULT_FRAMES,
            normalize: true,
            precision: Precision::F64,
            cache: DEFAULT_CACHE.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Classifier epochs; the protocol default when absent.
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub distance: Distance,
    /// Evaluate on a randomly rotated copy of the test set.
    pub rotated_test: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| skelae::Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// `--out`, then the config file, then `$SKELAE_OUT`, then `./skelae-out`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// Parses `key=value` pairs such as `classes=4 per-class=50` into a
/// synthetic-data config. Keys may use dashes or underscores.
pub fn parse_synthetic(pairs: &[String], base: SynthConfig) -> Result<SynthConfig, CliError> {
    let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Usage(e.to_string()))?;
    for pair in pairs {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("synthetic option `{pair}` is not key=value")))?;
        let key = key.trim().replace('-', "_");
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", value.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .ok_or_else(|| CliError::Usage(format!("synthetic option `{pair}` has an invalid value")))?;
        table.insert(key, value);
    }
    table.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("synthetic options: {}", e.message())))
}
