//! Command-line front end: tokenize, export oracle teacher records, distil
//! a student, and evaluate checkpoints. Every command writes its artifacts
//! and a `manifest.json` with their digests under the output directory.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use distil_core::synthetic::SyntheticSpec;
use distil_core::training::TargetMode;
use distil_core::Regimen;

use crate::commands::{OracleSettings, SynthSettings};
use crate::config::Overrides;
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "distil", version, about = "Distil an exported teacher into a BiLSTM student")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimenArg {
    Joint,
    StagewiseRlFirst,
    DistilThenFinetune,
}

impl From<RegimenArg> for Regimen {
    fn from(r: RegimenArg) -> Self {
        match r {
            RegimenArg::Joint => Regimen::Joint,
            RegimenArg::StagewiseRlFirst => Regimen::StagewiseRlFirst,
            RegimenArg::DistilThenFinetune => Regimen::DistilThenFinetune,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetsArg {
    Soft,
    Hard,
}

impl From<TargetsArg> for TargetMode {
    fn from(t: TargetsArg) -> Self {
        match t {
            TargetsArg::Soft => TargetMode::Soft,
            TargetsArg::Hard => TargetMode::Hard,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a JSONL file of texts into wordpiece ids.
    Tokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = distil_core::tokenizer::DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export synthetic teacher records for a corpus.
    TeacherOracle {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Mean gap between the two largest class scores after fitting.
        #[arg(long, default_value_t = 2.5)]
        margin: f64,
        #[arg(long, default_value_t = 1024)]
        features: usize,
        #[arg(long, default_value_t = 768)]
        hidden: usize,
        #[arg(long, default_value_t = distil_core::tokenizer::DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Fail unless the corpus has this many classes.
        #[arg(long)]
        classes: Option<usize>,
        /// Also emit records for labeled instances.
        #[arg(long)]
        include_labeled: bool,
        /// Labeled corpus to report held-out oracle accuracy on.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Train a student as described by an experiment config.
    Distil {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Labeled instances per class drawn from the corpus.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        regimen: Option<RegimenArg>,
        #[arg(long, value_enum)]
        targets: Option<TargetsArg>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Accuracy of a checkpoint on a corpus's labeled instances.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Teacher records to measure hard-label agreement against.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic token-pattern task and a matching experiment file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 2080)]
        pool: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("serializable")
}

/// Run one command and return the line to print on success.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Tokenize {
            input,
            vocab,
            max_len,
            out,
        } => {
            let stats = commands::tokenize(&input, &vocab, max_len, &out)?;
            Ok(json(&stats))
        }
        Command::TeacherOracle {
            corpus,
            vocab,
            out,
            seed,
            tau,
            margin,
            features,
            hidden,
            max_len,
            classes,
            include_labeled,
            heldout,
        } => {
            let settings = OracleSettings {
                tau,
                margin,
                features,
                hidden,
                max_len,
                classes,
                include_labeled,
                heldout,
                ..OracleSettings::new(corpus, vocab, seed)
            };
            Ok(json(&commands::teacher_oracle(&settings, &out)?))
        }
        Command::Distil {
            config,
            seed,
            out,
            k,
            regimen,
            targets,
            alpha,
            beta,
            gamma,
            max_epochs,
            patience,
        } => {
            let overrides = Overrides {
                seed,
                out,
                k,
                regimen: regimen.map(Into::into),
                targets: targets.map(Into::into),
                alpha,
                beta,
                gamma,
                max_epochs,
                patience,
            };
            Ok(json(&commands::distil(&config, &overrides)?))
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            vocab,
            teacher,
            out,
        } => {
            let report = commands::evaluate(&checkpoint, &corpus, &vocab, teacher.as_deref())?;
            if let Some(out) = out {
                let settings = (&checkpoint, &corpus, &vocab, &teacher, &report.checkpoint_sha256);
                commands::write_evaluation(&report, &settings, &out)?;
            }
            Ok(json(&report))
        }
        Command::Synth {
            out,
            seed,
            pool,
            test,
            classes,
            k,
        } => {
            let settings = SynthSettings {
                seed,
                pool,
                test,
                labeled_per_class: k,
                spec: SyntheticSpec {
                    num_classes: classes,
                    ..SyntheticSpec::default()
                },
            };
            Ok(json(&commands::synth(&settings, &out)?))
        }
    }
}
