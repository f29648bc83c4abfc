//! Experiment configuration: one TOML file drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CorpusConfig;
use crate::nets::{DiscriminatorSpec, GeneratorSpec, Preset};
use crate::schedule::ScheduleConfig;
use crate::trainer::{ModelSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Replaces the preset's generator when given.
    pub generator: Option<GeneratorSpec>,
    pub discriminator: Option<DiscriminatorSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: Preset::Tiny, generator: None, discriminator: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Where `make-corpus` writes and `train`/`evaluate` read features.
    pub corpus_dir: PathBuf,
    /// Output directory of `train` and default for other commands.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { corpus_dir: "corpus".into(), out_dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds both corpus synthesis and training; overrides `train.seed`.
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Propagates the seed and validates every section.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.train.validate()?;
        self.corpus.validate().map_err(|e| Error::Config(format!("corpus: {e}")))?;
        let m = self.model_spec();
        m.generator.validate().map_err(|e| Error::Config(format!("model.generator: {e}")))?;
        m.discriminator.validate().map_err(|e| Error::Config(format!("model.discriminator: {e}")))?;
        let q = self.corpus.order;
        if m.generator.feature_dim != q || m.discriminator.feature_dim != q {
            return Err(Error::Config(format!("network feature_dim must equal corpus.order = {q}")));
        }
        if self.train.seq_len % m.generator.downsample_factor != 0 {
            return Err(Error::Config("train.seq_len must be a multiple of the generator's downsample_factor".into()));
        }
        if self.train.seq_len > self.corpus.frames {
            return Err(Error::Config("train.seq_len exceeds corpus.frames".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let q = self.corpus.order;
        ModelSpec {
            generator: self.model.generator.unwrap_or_else(|| self.model.preset.generator(q)),
            discriminator: self.model.discriminator.unwrap_or_else(|| self.model.preset.discriminator(q)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["sed = 3", "[train]\nlearning_rate = 0.1", "[schedule]\nt_diff = 4\nbeta = 0.2"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seed_propagates_and_round_trips() {
        let cfg = ExperimentConfig::from_toml("seed = 9\n[train]\niterations = 5\n[schedule]\nt_diff = 2\nbeta_min = 0.9\nbeta_max = 0.99").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for text in ["[schedule]\nbeta_max = 0.5", "[train]\nmomentum = 1.0", "[corpus]\nframes = 32", "[train]\nseq_len = 63"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
