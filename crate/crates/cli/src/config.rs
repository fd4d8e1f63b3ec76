//! Experiment configuration file.
//!
//! Relative paths resolve against the directory holding the config file.
//! The resolved config, with every default made explicit, is written next
//! to each run's artifacts.

use std::path::{Path, PathBuf};

use distil_core::autodiff::Precision;
use distil_core::training::{AdadeltaConfig, TargetMode, DEFAULT_BATCH_SIZE, DEFAULT_PATIENCE};
use distil_core::{LossWeights, Regimen};
use serde::{Deserialize, Serialize};

use crate::artifacts::sha256_hex;
use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub teacher: PathBuf,
    /// Held-out labeled corpus for test accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Student sizes. Vocabulary size and class count come from the inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    /// Inferred from the teacher records when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_hidden: Option<usize>,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub recurrent_dropout_rate: f64,
}

impl Default for StudentSection {
    fn default() -> Self {
        let d = distil_core::StudentConfig::with_defaults(1, 2);
        Self {
            embed_dim: d.embed_dim,
            lstm_hidden: d.lstm_hidden,
            teacher_hidden: None,
            max_len: d.max_len,
            dropout_rate: d.dropout_rate,
            recurrent_dropout_rate: d.recurrent_dropout_rate,
        }
    }
}

fn default_regimen() -> Regimen {
    Regimen::Joint
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_max_epochs() -> usize {
    50
}

fn default_patience() -> usize {
    DEFAULT_PATIENCE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required once command-line overrides are applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_regimen")]
    pub regimen: Regimen,
    #[serde(default)]
    pub targets: TargetMode,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Draw this many labeled instances per class from the corpus's labeled
    /// pool; the rest joins the transfer set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_per_class: Option<usize>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: AdadeltaConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Command-line overrides of config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub regimen: Option<Regimen>,
    pub targets: Option<TargetMode>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> CliResult<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().replace('\n', " ")))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(out) = &o.out {
            self.paths.out = Some(out.clone());
        }
        if let Some(k) = o.k {
            self.labeled_per_class = Some(k);
        }
        if let Some(r) = o.regimen {
            self.regimen = r;
        }
        if let Some(t) = o.targets {
            self.targets = t;
        }
        if let Some(a) = o.alpha {
            self.weights.alpha = a;
        }
        if let Some(b) = o.beta {
            self.weights.beta = b;
        }
        if let Some(g) = o.gamma {
            self.weights.gamma = g;
        }
        if let Some(m) = o.max_epochs {
            self.max_epochs = m;
        }
        if let Some(p) = o.patience {
            self.patience = p;
        }
    }

    /// Checks that need no data: seed present, weights valid, inputs exist.
    pub fn validate(&self) -> CliResult<()> {
        if self.seed.is_none() {
            return Err(CliError::Config("seed is required (set `seed` or pass --seed)".into()));
        }
        if self.paths.out.is_none() {
            return Err(CliError::Config(
                "output directory is required (set `paths.out` or pass --out)".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(|e| CliError::Config(format!("weights: {e}")))?;
        let mut inputs = vec![
            ("paths.corpus", &self.paths.corpus),
            ("paths.vocab", &self.paths.vocab),
            ("paths.teacher", &self.paths.teacher),
        ];
        if let Some(t) = &self.paths.test {
            inputs.push(("paths.test", t));
        }
        for (key, p) in inputs {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(CliError::Config(format!("{key}: {} does not exist", full.display())));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(self.paths.out.as_deref().expect("validated"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the resolved config without the output directory, so the
    /// same experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = None;
        sha256_hex(c.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[paths]
corpus = "c.jsonl"
vocab = "v.txt"
teacher = "t.jsonl"
"#;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = ExperimentConfig::parse(MINIMAL, "/x").unwrap();
        assert_eq!(c.regimen, Regimen::Joint);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.weights, LossWeights::new(10.0, 10.0, 1.0).unwrap());
        assert_eq!(c.student.embed_dim, 300);
        assert_eq!(c.student.lstm_hidden, 600);
        assert_eq!(c.student.dropout_rate, 0.4);
        assert_eq!(c.optimizer.rho, 0.95);
        assert_eq!(c.resolve(Path::new("c.jsonl")), PathBuf::from("/x/c.jsonl"));
    }

    #[test]
    fn resolved_dump_round_trips() {
        let c = ExperimentConfig::parse(MINIMAL, "").unwrap();
        let back = ExperimentConfig::parse(&c.to_toml(), "").unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let mut a = ExperimentConfig::parse(MINIMAL, "").unwrap();
        let h = a.hash();
        a.apply(&Overrides {
            out: Some("elsewhere".into()),
            ..Overrides::default()
        });
        assert_eq!(a.hash(), h);
        a.apply(&Overrides {
            beta: Some(0.0),
            ..Overrides::default()
        });
        assert_ne!(a.hash(), h);
    }

    #[test]
    fn unknown_keys_and_missing_seed_are_rejected() {
        assert!(ExperimentConfig::parse(&format!("bogus = 1\n{MINIMAL}"), "").is_err());
        let c = ExperimentConfig::parse(&MINIMAL.replace("seed = 3", ""), "").unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
