//! Run configuration, read from TOML. Every field has a default, so an empty
//! file describes the smoke experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MlpConfig, TransformerConfig};
use crate::noble::{ActivationKind, NobleSpec};
use crate::optim::AdamWConfig;
use crate::tasks::{CorpusSpec, SpectralSpec};

/// Environment variable that replaces `run.output_dir`.
pub const OUTPUT_ENV: &str = "NOBLE_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Cumulative forward and backward floating-point work in GFLOP; a
    /// deterministic stand-in for elapsed time.
    Modeled,
    /// Elapsed seconds.
    Measured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub eval_every: u64,
    /// Source of the `wallclock_s` column in `metrics.csv`.
    pub clock: Clock,
    /// Grid cells run concurrently; each run stays single-threaded.
    pub parallel: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "smoke".into(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            eval_every: 50,
            clock: Clock::Modeled,
            parallel: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Spectral,
    CharLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub spectral: SpectralSpec,
    pub corpus: CorpusSpec,
    /// Sequences per language-model batch.
    pub lm_batch: usize,
    /// Eval batches of `lm_batch` sequences.
    pub lm_eval_batches: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::Spectral,
            spectral: SpectralSpec::default(),
            corpus: CorpusSpec::default(),
            lm_batch: 16,
            lm_eval_batches: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelSection {
    pub mlp: MlpConfig,
    pub transformer: TransformerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NobleSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub spec: NobleSpec,
}

impl Default for NobleSection {
    fn default() -> Self {
        Self { enabled: true, spec: NobleSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub ranks: Vec<usize>,
    pub activations: Vec<ActivationKind>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ranks: vec![8, 16, 32],
            activations: vec![
                ActivationKind::Tanh,
                ActivationKind::LeakyRelu,
                ActivationKind::Gelu,
                ActivationKind::Cosine1Layer,
                ActivationKind::CosNet2Layer,
                ActivationKind::CosNet3Layer,
            ],
        }
    }
}

/// Optimizer settings with desk-scale defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSection {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let full = AdamWConfig::default();
        Self {
            base_lr: 3e-3,
            beta1: full.beta1,
            beta2: full.beta2,
            eps: full.eps,
            weight_decay: full.weight_decay,
            warmup_steps: 50,
            total_steps: 500,
        }
    }
}

impl OptimSection {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            base_lr: self.base_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub task: TaskSection,
    pub model: ModelSection,
    pub noble: NobleSection,
    pub optim: OptimSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let invalid = |e: toml::de::Error| Error::config(format!("invalid config: {e}"));
        let cfg: Self = toml::from_str(text).map_err(invalid)?;
        // Any key that does not survive a round trip was not recognized.
        let given: toml::Table = toml::from_str(text).map_err(invalid)?;
        let resolved = toml::Table::try_from(&cfg).map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the output-root override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = std::env::var_os(OUTPUT_ENV) {
            cfg.run.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    /// Exact resolved configuration as TOML.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        o.adamw().validate()?;
        if o.total_steps <= o.warmup_steps {
            return Err(Error::config("total_steps must exceed warmup_steps"));
        }
        let every = self.run.eval_every;
        if every == 0 || o.total_steps % every != 0 {
            return Err(Error::config(format!("eval_every {every} must divide total_steps {}", o.total_steps)));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        self.noble.spec.validate()?;
        match self.task.kind {
            TaskKind::Spectral => {
                self.task.spectral.validate()?;
                self.mlp(None).validate()?;
            }
            TaskKind::CharLm => {
                self.task.corpus.validate()?;
                if self.task.lm_batch == 0 || self.task.lm_eval_batches == 0 {
                    return Err(Error::config("lm_batch and lm_eval_batches must be positive"));
                }
                self.transformer(None, self.task.corpus.vocab_size).validate()?;
            }
        }
        Ok(())
    }

    /// Regression net shaped for the spectral task.
    pub fn mlp(&self, noble: Option<NobleSpec>) -> MlpConfig {
        MlpConfig { input_dim: self.task.spectral.input_dim, noble, ..self.model.mlp.clone() }
    }

    pub fn transformer(&self, noble: Option<NobleSpec>, vocab_size: usize) -> TransformerConfig {
        TransformerConfig { vocab_size, noble, ..self.model.transformer.clone() }
    }

    /// The configured branch, or `None` when disabled.
    pub fn noble_spec(&self) -> Option<NobleSpec> {
        self.noble.enabled.then_some(self.noble.spec)
    }
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(r))) => unknown_keys(g, r, &format!("{path}."), out),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_valid() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn snapshot_roundtrips() {
        let text = r#"
            [run]
            seeds = [4]
            eval_every = 25
            [task]
            kind = "char_lm"
            [task.corpus]
            order = 1
            [noble]
            activation = "tanh"
            rank = 8
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.task.kind, TaskKind::CharLm);
        assert_eq!(cfg.noble.spec.activation, ActivationKind::Tanh);
        assert_eq!(cfg.noble.spec.alpha, 0.01);
        assert_eq!(RunConfig::from_toml(&cfg.snapshot().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_inconsistent_schedule() {
        assert!(RunConfig::from_toml("[run]\neval_every = 7").is_err());
        assert!(RunConfig::from_toml("[optim]\nwarmup_steps = 600").is_err());
        assert!(RunConfig::from_toml("[run]\nseeds = []").is_err());
        assert!(RunConfig::from_toml("[noble]\nactivation = \"relu\"").is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = RunConfig::from_toml("[optim]\nbase_lr = 1e-3\nlearning_rate = 1e-3").unwrap_err().to_string();
        assert!(err.contains("optim.learning_rate"), "{err}");
        assert!(RunConfig::from_toml("[nobel]\nrank = 4").is_err());
        assert!(RunConfig::from_toml("[noble]\nrank = 4\nalpha = 0.1").is_ok());
    }
}
