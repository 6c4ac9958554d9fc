//! Run configuration file. Every key is optional; command-line flags take
//! precedence over the file, and relative paths in the file resolve against
//! the file's directory.

use std::path::{Path, PathBuf};

use mowe::bucketing::{ShapeSpec, SplitMode};
use mowe::experiments::ExperimentConfig;
use mowe::model::ModelConfig;
use mowe::ops::Activation;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub buckets: BucketSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub probe: ProbeSection,
    /// Base experiment for `ablate`.
    pub ablate: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub names: Option<PathBuf>,
    pub default_vocab: Option<PathBuf>,
    pub routing_dir: Option<PathBuf>,
    pub freq: Option<PathBuf>,
    pub shapes: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    pub size: Option<usize>,
    pub sentinels: Option<usize>,
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSection {
    pub k: Option<usize>,
    pub bypass: Option<usize>,
    pub split: Option<SplitMode>,
    /// Inline shape spec, used when `paths.shapes` is absent.
    pub shapes: Option<ShapeSpec>,
}

/// Architecture keys of the model config; vocabulary sizes come from the
/// vocabulary files.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub num_heads: Option<usize>,
    pub num_enc_blocks: Option<usize>,
    pub num_dec_blocks: Option<usize>,
    pub ffn_hidden: Option<usize>,
    pub mowe_positions_enc: Option<Vec<usize>>,
    pub mowe_positions_dec: Option<Vec<usize>>,
    pub share_experts: Option<bool>,
    pub max_seq_len: Option<usize>,
    pub activation: Option<Activation>,
}

impl ModelSection {
    pub fn resolve(&self, default_vocab_size: usize, routing_vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::desk_default(default_vocab_size, routing_vocab_size);
        macro_rules! take {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { c.$f = v; })*};
        }
        take!(
            d_model,
            num_heads,
            num_enc_blocks,
            num_dec_blocks,
            ffn_hidden,
            mowe_positions_enc,
            mowe_positions_dec,
            share_experts,
            max_seq_len,
            activation
        );
        c
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_steps: Option<usize>,
    pub finetune_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub pretrain_lr: Option<f64>,
    pub finetune_lr: Option<f64>,
    pub freeze_experts: Option<bool>,
    pub corruption_rate: Option<f64>,
    pub mean_span_len: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub threshold: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.names,
            &mut self.default_vocab,
            &mut self.routing_dir,
            &mut self.freq,
            &mut self.shapes,
            &mut self.plan,
            &mut self.checkpoint,
            &mut self.qa,
            &mut self.out,
            &mut self.trace,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// The flag value if given, else the config value, else a usage error
/// naming both.
pub fn pick<T>(
    flag: Option<T>,
    config: Option<T>,
    key: &str,
    flag_name: &str,
) -> Result<T, CliError> {
    flag.or(config).ok_or_else(|| {
        CliError::Usage(format!(
            "missing {key}: pass --{flag_name} or set {key} in the config"
        ))
    })
}

/// An existing input file.
pub fn input(path: PathBuf, key: &str) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!(
            "{key}: {} is not a readable file",
            path.display()
        )))
    }
}

/// An output path whose parent directory exists.
pub fn output(path: PathBuf, key: &str) -> Result<PathBuf, CliError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    match parent {
        Some(dir) if !dir.is_dir() => Err(CliError::Usage(format!(
            "{key}: directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(path),
    }
}
