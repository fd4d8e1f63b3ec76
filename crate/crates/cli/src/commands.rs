//! Subcommand implementations. Each returns a serializable report; printing
//! is left to the caller.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use distil_core::checkpoint;
use distil_core::evaluation::{
    self, accuracy, load_corpus, low_resource_split, max_variance, per_class_accuracy, prediction_variance,
    save_corpus, Corpus, LabeledText,
};
use distil_core::student::{argmax, predict_probs};
use distil_core::synthetic::{generate, SyntheticSpec};
use distil_core::teacher::{export_records, import_records, OracleTeacher, TeacherRecord};
use distil_core::tokenizer::{encode, render, Encoded, Vocab};
use distil_core::training::{run_regimen, MetricRecord, PhaseReport, TargetMode, TrainConfig};
use distil_core::{Error, Regimen, StudentConfig, StudentParams, TrainingSet};
use serde::{Deserialize, Serialize};

use crate::artifacts::{ensure_dir, settings_hash, sha256_hex, write_bytes, write_json, write_jsonl, write_manifest};
use crate::config::{ExperimentConfig, Overrides};
use crate::error::{io_err, CliError, CliResult, Context};

const PREDICT_CHUNK: usize = 256;

fn load_vocab(path: &Path) -> CliResult<Vocab> {
    Vocab::load(path).context(format!("vocab {}", path.display()))
}

fn encode_all<'a>(texts: impl Iterator<Item = &'a str>, vocab: &Vocab, max_len: usize) -> CliResult<Vec<Encoded>> {
    texts
        .map(|t| encode(t, vocab, max_len))
        .collect::<distil_core::Result<Vec<_>>>()
        .context("encoding")
}

fn predicted_labels(params: &StudentParams, encoded: &[Encoded]) -> CliResult<Vec<usize>> {
    let refs: Vec<&Encoded> = encoded.iter().collect();
    let probs = predict_probs(params, &refs, PREDICT_CHUNK).context("prediction")?;
    Ok(probs.iter().map(|p| argmax(p)).collect())
}

// ---------------------------------------------------------------- tokenize

#[derive(Clone, Debug, Serialize)]
pub struct TokenizeSettings {
    pub input: PathBuf,
    pub vocab: PathBuf,
    pub max_len: usize,
    pub input_sha256: String,
    pub vocab_sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizeStats {
    pub instances: usize,
    /// Wordpieces kept, excluding framing tokens.
    pub pieces: usize,
    pub unknown: usize,
    pub truncated: usize,
    pub max_length: usize,
    pub mean_length: f64,
}

#[derive(Serialize)]
struct TokenizedLine<'a> {
    id: &'a str,
    tokens: String,
    ids: &'a [usize],
    length: usize,
}

#[derive(Deserialize)]
struct TextLine {
    #[serde(default)]
    id: Option<String>,
    text: String,
}

pub fn tokenize(input: &Path, vocab_path: &Path, max_len: usize, out: &Path) -> CliResult<TokenizeStats> {
    let vocab = load_vocab(vocab_path)?;
    let raw = fs::read(input).map_err(io_err(input))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(raw.as_slice()).lines().enumerate() {
        let line = line.map_err(io_err(input))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CliError::Core {
            context: "tokenize".into(),
            source: Error::Malformed {
                path: input.to_path_buf(),
                line: n + 1,
                message,
            },
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if value.get("provenance").is_some() {
            continue;
        }
        let rec: TextLine = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        let id = rec.id.unwrap_or_else(|| format!("line{}", n + 1));
        let full = distil_core::tokenizer::pieces(&rec.text, &vocab).len();
        let enc = encode(&rec.text, &vocab, max_len).context(format!("instance {id}"))?;
        rows.push((id, full, enc));
    }

    let mut stats = TokenizeStats {
        instances: rows.len(),
        ..TokenizeStats::default()
    };
    let mut lines = Vec::with_capacity(rows.len());
    for (id, full, enc) in &rows {
        let kept = enc.length - 2;
        stats.pieces += kept;
        stats.unknown += enc.valid_ids()[1..enc.length - 1]
            .iter()
            .filter(|&&i| i == vocab.unk_id())
            .count();
        stats.truncated += usize::from(*full > kept);
        stats.max_length = stats.max_length.max(enc.length);
        stats.mean_length += enc.length as f64;
        lines.push(TokenizedLine {
            id,
            tokens: render(enc, &vocab),
            ids: &enc.ids,
            length: enc.length,
        });
    }
    if stats.instances > 0 {
        stats.mean_length /= stats.instances as f64;
    }

    ensure_dir(out)?;
    let tokens = out.join("tokens.jsonl");
    write_jsonl(&tokens, &lines)?;
    let settings = TokenizeSettings {
        input: input.to_path_buf(),
        vocab: vocab_path.to_path_buf(),
        max_len,
        input_sha256: sha256_hex(&raw),
        vocab_sha256: sha256_hex(vocab.to_file_string().as_bytes()),
    };
    let stats_path = out.join("stats.json");
    write_json(&stats_path, &stats)?;
    write_manifest(
        out,
        "tokenize",
        &settings_hash(&settings),
        &settings,
        &[tokens, stats_path],
    )?;
    Ok(stats)
}

// ---------------------------------------------------------- teacher-oracle

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleSettings {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub seed: u64,
    pub tau: f64,
    pub margin: f64,
    pub features: usize,
    pub hidden: usize,
    pub max_len: usize,
    /// Expected class count; checked against the corpus.
    pub classes: Option<usize>,
    /// Also emit records for the labeled instances.
    pub include_labeled: bool,
    /// Labeled corpus the oracle is scored on but never fitted to.
    pub heldout: Option<PathBuf>,
}

impl OracleSettings {
    pub fn new(corpus: PathBuf, vocab: PathBuf, seed: u64) -> Self {
        Self {
            corpus,
            vocab,
            seed,
            tau: 1.0,
            margin: 2.5,
            features: 1024,
            hidden: 768,
            max_len: distil_core::tokenizer::DEFAULT_MAX_LEN,
            classes: None,
            include_labeled: false,
            heldout: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub records: usize,
    pub num_classes: usize,
    /// Whether the weights were fitted to labeled instances.
    pub fitted: bool,
    /// Oracle accuracy on the labeled instances, when there are any.
    pub labeled_accuracy: Option<f64>,
    pub heldout_accuracy: Option<f64>,
    pub prediction_variance: Option<f64>,
    pub max_variance: f64,
    pub config_hash: String,
}

pub fn teacher_oracle(s: &OracleSettings, out: &Path) -> CliResult<OracleReport> {
    let vocab = load_vocab(&s.vocab)?;
    let corpus = load_corpus(&s.corpus).context(format!("corpus {}", s.corpus.display()))?;
    let c = corpus.num_classes;
    if let Some(expected) = s.classes {
        if expected != c {
            return Err(CliError::Core {
                context: "teacher-oracle".into(),
                source: Error::Contract(format!("oracle configured for {expected} classes, corpus has {c}")),
            });
        }
    }
    let labeled_enc = encode_all(corpus.labeled.iter().map(|l| l.text.as_str()), &vocab, s.max_len)?;
    let oracle = if corpus.labeled.is_empty() {
        OracleTeacher::random(s.features, c, s.hidden, s.tau, s.seed)
    } else {
        let examples: Vec<(&Encoded, usize)> = labeled_enc
            .iter()
            .zip(&corpus.labeled)
            .map(|(e, l)| (e, l.label))
            .collect();
        OracleTeacher::fit(&examples, s.features, c, s.hidden, s.tau, s.margin, s.seed)
    }
    .context("oracle")?;

    let labeled_accuracy = if corpus.labeled.is_empty() {
        None
    } else {
        let pred: Vec<usize> = labeled_enc.iter().map(|e| argmax(&oracle.scores(e))).collect();
        let gold: Vec<usize> = corpus.labeled.iter().map(|l| l.label).collect();
        Some(accuracy(&pred, &gold).context("oracle accuracy")?)
    };

    let heldout_accuracy = match &s.heldout {
        Some(path) => {
            let held = load_corpus(path).context(format!("heldout {}", path.display()))?;
            if held.num_classes != c {
                return Err(CliError::Core {
                    context: "teacher-oracle".into(),
                    source: Error::Contract(format!(
                        "heldout corpus has {} classes, corpus has {c}",
                        held.num_classes
                    )),
                });
            }
            let enc = encode_all(held.labeled.iter().map(|l| l.text.as_str()), &vocab, s.max_len)?;
            let pred: Vec<usize> = enc.iter().map(|e| argmax(&oracle.scores(e))).collect();
            let gold: Vec<usize> = held.labeled.iter().map(|l| l.label).collect();
            Some(accuracy(&pred, &gold).context("heldout accuracy")?)
        }
        None => None,
    };

    let mut records: Vec<TeacherRecord> = Vec::new();
    if s.include_labeled {
        for (l, e) in corpus.labeled.iter().zip(&labeled_enc) {
            records.push(oracle.predict(l.id.clone(), l.text.clone(), e));
        }
    }
    for u in &corpus.unlabeled {
        let e = encode(&u.text, &vocab, s.max_len).context(format!("instance {}", u.id))?;
        records.push(oracle.predict(u.id.clone(), u.text.clone(), &e));
    }

    let variance = if records.is_empty() {
        None
    } else {
        Some(prediction_variance(&records).context("variance")?)
    };
    ensure_dir(out)?;
    let path = out.join("teacher.jsonl");
    export_records(&records, &path).context("export")?;
    let heldout_digest = s.heldout.as_deref().map(input_digest).transpose()?;
    let hash = settings_hash(&(s, input_digest(&s.corpus)?, input_digest(&s.vocab)?, heldout_digest));
    let report = OracleReport {
        records: records.len(),
        num_classes: c,
        fitted: !corpus.labeled.is_empty(),
        labeled_accuracy,
        heldout_accuracy,
        prediction_variance: variance,
        max_variance: max_variance(c).context("variance")?,
        config_hash: hash.clone(),
    };
    let report_path = out.join("oracle.json");
    write_json(&report_path, &report)?;
    write_manifest(out, "teacher-oracle", &hash, s, &[path, report_path])?;
    Ok(report)
}

fn input_digest(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

// ------------------------------------------------------------------ distil

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistilSummary {
    pub config_hash: String,
    pub regimen: Regimen,
    pub targets: TargetMode,
    pub seed: u64,
    /// Neither teacher term contributes: the run is the plain student.
    pub no_distillation: bool,
    pub labeled: usize,
    pub unlabeled: usize,
    pub total_steps: usize,
    pub stage_history: Vec<String>,
    pub phases: Vec<PhaseReport>,
    /// Over every labeled training instance, validation holdout included.
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub checkpoint_sha256: String,
}

/// The corpus actually trained on: the configured one, or a `k`-per-class
/// draw from its labeled pool with the remainder moved to the transfer set.
fn effective_corpus(cfg: &ExperimentConfig) -> CliResult<Corpus> {
    let path = cfg.resolve(&cfg.paths.corpus);
    let corpus = load_corpus(&path).context("paths.corpus")?;
    let Some(k) = cfg.labeled_per_class else {
        return Ok(corpus);
    };
    let mut split =
        low_resource_split(&corpus.labeled, k, corpus.num_classes, cfg.seed()).context("labeled_per_class")?;
    split.unlabeled.extend(corpus.unlabeled);
    Ok(split)
}

fn student_config(cfg: &ExperimentConfig, vocab: &Vocab, data: &TrainingSet) -> CliResult<StudentConfig> {
    let teacher_hidden = match cfg.student.teacher_hidden {
        Some(h) if h != data.teacher_hidden => {
            return Err(CliError::Config(format!(
                "student.teacher_hidden is {h}, teacher records have {}",
                data.teacher_hidden
            )))
        }
        Some(h) => h,
        None => data.teacher_hidden,
    };
    Ok(StudentConfig {
        vocab_size: vocab.len(),
        embed_dim: cfg.student.embed_dim,
        lstm_hidden: cfg.student.lstm_hidden,
        num_classes: data.num_classes,
        teacher_hidden,
        max_len: cfg.student.max_len,
        dropout_rate: cfg.student.dropout_rate,
        recurrent_dropout_rate: cfg.student.recurrent_dropout_rate,
    })
}

pub fn distil(config_path: &Path, overrides: &Overrides) -> CliResult<DistilSummary> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply(overrides);
    cfg.validate()?;
    let seed = cfg.seed();
    let vocab = load_vocab(&cfg.resolve(&cfg.paths.vocab))?;
    let corpus = effective_corpus(&cfg)?;
    let records = import_records(cfg.resolve(&cfg.paths.teacher)).context("paths.teacher")?;
    let data = TrainingSet::build(&corpus, &records, &vocab, cfg.student.max_len, seed).context("training set")?;
    let student = student_config(&cfg, &vocab, &data)?;
    let train = TrainConfig {
        student,
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        seed,
        optimizer: cfg.optimizer,
        targets: cfg.targets,
        precision: cfg.precision,
    };
    train.validate().context("config")?;
    let outcome = run_regimen(cfg.regimen, &data, &cfg.weights, &train).context(format!("regimen {}", cfg.regimen))?;

    let labeled_enc: Vec<Encoded> = data.labeled.all().map(|l| l.encoded.clone()).collect();
    let labeled_gold: Vec<usize> = data.labeled.all().map(|l| l.label).collect();
    let train_accuracy =
        accuracy(&predicted_labels(&outcome.params, &labeled_enc)?, &labeled_gold).context("train accuracy")?;
    let val = data.labeled.val_or_train();
    let val_enc: Vec<Encoded> = val.iter().map(|l| l.encoded.clone()).collect();
    let val_gold: Vec<usize> = val.iter().map(|l| l.label).collect();
    let validation_accuracy =
        accuracy(&predicted_labels(&outcome.params, &val_enc)?, &val_gold).context("validation accuracy")?;
    let test_accuracy = match &cfg.paths.test {
        Some(p) => {
            let test = load_corpus(cfg.resolve(p)).context("paths.test")?;
            if test.num_classes != data.num_classes {
                return Err(CliError::Config(format!(
                    "paths.test has {} classes, training corpus has {}",
                    test.num_classes, data.num_classes
                )));
            }
            let enc = encode_all(
                test.labeled.iter().map(|l| l.text.as_str()),
                &vocab,
                cfg.student.max_len,
            )?;
            let gold: Vec<usize> = test.labeled.iter().map(|l| l.label).collect();
            Some(accuracy(&predicted_labels(&outcome.params, &enc)?, &gold).context("test accuracy")?)
        }
        None => None,
    };

    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let ckpt_bytes = checkpoint::to_bytes(&outcome.params);
    let ckpt = out.join("checkpoint.bin");
    write_bytes(&ckpt, &ckpt_bytes)?;
    let mut files = vec![ckpt];
    if let Some(d) = &outcome.distilled {
        let p = out.join("distilled.bin");
        write_bytes(&p, &checkpoint::to_bytes(d))?;
        files.push(p);
    }
    let corpus_path = out.join("corpus.jsonl");
    save_corpus(&corpus, &corpus_path).context("corpus copy")?;
    files.push(corpus_path);
    // The output directory is implied by where these files land.
    let mut settings = cfg.clone();
    settings.paths.out = None;
    let resolved = out.join("config.resolved.toml");
    write_bytes(&resolved, settings.to_toml().as_bytes())?;
    files.push(resolved);

    let hash = cfg.hash();
    let summary = DistilSummary {
        config_hash: hash.clone(),
        regimen: cfg.regimen,
        targets: cfg.targets,
        seed,
        no_distillation: cfg.weights.is_supervised_only() && cfg.targets == TargetMode::Soft,
        labeled: labeled_gold.len(),
        unlabeled: corpus.unlabeled.len(),
        total_steps: outcome.total_steps,
        stage_history: outcome.phase_history().iter().map(|p| p.label().to_string()).collect(),
        phases: outcome.phases.clone(),
        train_accuracy,
        validation_accuracy,
        test_accuracy,
        checkpoint_sha256: sha256_hex(&ckpt_bytes),
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    files.push(summary_path);
    // Wall-clock times make the metrics log run-specific, so it stays out
    // of the manifest.
    write_jsonl::<MetricRecord>(&out.join("metrics.jsonl"), &outcome.metrics)?;
    write_manifest(&out, "distil", &hash, &settings, &files)?;
    Ok(summary)
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub instances: usize,
    pub accuracy: Option<f64>,
    /// `None` for classes absent from the corpus.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Fraction of teacher records whose hard label the student reproduces.
    pub teacher_agreement: Option<f64>,
    pub teacher_records: usize,
    pub checkpoint_sha256: String,
}

pub fn evaluate(
    checkpoint_path: &Path,
    corpus_path: &Path,
    vocab_path: &Path,
    teacher: Option<&Path>,
) -> CliResult<EvaluationReport> {
    let bytes = fs::read(checkpoint_path).map_err(io_err(checkpoint_path))?;
    let params = checkpoint::from_bytes(&bytes).context(format!("checkpoint {}", checkpoint_path.display()))?;
    let vocab = load_vocab(vocab_path)?;
    let corpus = load_corpus(corpus_path).context(format!("corpus {}", corpus_path.display()))?;
    let sc = params.config();
    let mismatch = |msg: String| CliError::Core {
        context: "evaluate".into(),
        source: Error::Contract(msg),
    };
    if sc.vocab_size != vocab.len() {
        return Err(mismatch(format!(
            "checkpoint vocabulary has {} tokens, vocab file has {}",
            sc.vocab_size,
            vocab.len()
        )));
    }
    if sc.num_classes != corpus.num_classes {
        return Err(mismatch(format!(
            "checkpoint has {} classes, corpus has {}",
            sc.num_classes, corpus.num_classes
        )));
    }
    let enc = encode_all(corpus.labeled.iter().map(|l| l.text.as_str()), &vocab, sc.max_len)?;
    let gold: Vec<usize> = corpus.labeled.iter().map(|l| l.label).collect();
    let pred = predicted_labels(&params, &enc)?;
    let acc = if gold.is_empty() {
        None
    } else {
        Some(accuracy(&pred, &gold).context("accuracy")?)
    };

    let (teacher_agreement, teacher_records) = match teacher {
        Some(path) => {
            let records = import_records(path).context(format!("teacher {}", path.display()))?;
            if let Some(r) = records.iter().find(|r| r.num_classes() != sc.num_classes) {
                return Err(mismatch(format!(
                    "teacher record {} has {} classes",
                    r.id,
                    r.num_classes()
                )));
            }
            let enc = encode_all(records.iter().map(|r| r.text.as_str()), &vocab, sc.max_len)?;
            let pred = predicted_labels(&params, &enc)?;
            let hard: Vec<usize> = records.iter().map(|r| r.hard_label).collect();
            let agreement = if records.is_empty() {
                None
            } else {
                Some(accuracy(&pred, &hard).context("agreement")?)
            };
            (agreement, records.len())
        }
        None => (None, 0),
    };
    Ok(EvaluationReport {
        instances: gold.len(),
        accuracy: acc,
        per_class_accuracy: per_class_accuracy(&pred, &gold, sc.num_classes),
        teacher_agreement,
        teacher_records,
        checkpoint_sha256: sha256_hex(&bytes),
    })
}

pub fn write_evaluation(report: &EvaluationReport, settings: &impl Serialize, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let path = out.join("evaluation.json");
    write_json(&path, report)?;
    write_manifest(out, "evaluate", &settings_hash(settings), settings, &[path])
}

// ------------------------------------------------------------------- synth

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSettings {
    pub seed: u64,
    pub pool: usize,
    pub test: usize,
    pub labeled_per_class: usize,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub vocab_size: usize,
    pub pool: usize,
    pub test: usize,
    pub num_classes: usize,
}

/// Student sizes written into the generated experiment file.
pub const SYNTH_DIM: usize = 16;
pub const SYNTH_MAX_LEN: usize = 24;

fn labeled_corpus(items: Vec<LabeledText>, num_classes: usize) -> Corpus {
    Corpus {
        labeled: items,
        unlabeled: Vec::new(),
        num_classes,
        provenance: evaluation::SplitProvenance::default(),
    }
}

pub fn synth(s: &SynthSettings, out: &Path) -> CliResult<SynthReport> {
    let task = generate(&s.spec, s.pool, s.test, s.seed).context("synthetic task")?;
    ensure_dir(out)?;
    let vocab = out.join("vocab.txt");
    task.vocab.save(&vocab).context("vocab")?;
    let pool = out.join("pool.jsonl");
    save_corpus(&labeled_corpus(task.pool.clone(), s.spec.num_classes), &pool).context("pool")?;
    let test = out.join("test.jsonl");
    save_corpus(&labeled_corpus(task.test.clone(), s.spec.num_classes), &test).context("test")?;
    let experiment = out.join("experiment.toml");
    let toml = format!(
        "seed = {seed}\n\
         regimen = \"joint\"\n\
         batch_size = 64\n\
         max_epochs = 30\n\
         patience = 3\n\
         labeled_per_class = {k}\n\
         \n\
         [paths]\n\
         corpus = \"pool.jsonl\"\n\
         vocab = \"vocab.txt\"\n\
         teacher = \"teacher/teacher.jsonl\"\n\
         test = \"test.jsonl\"\n\
         \n\
         [student]\n\
         embed_dim = {d}\n\
         lstm_hidden = {d}\n\
         max_len = {m}\n\
         dropout_rate = 0.4\n\
         recurrent_dropout_rate = 0.2\n\
         \n\
         [weights]\n\
         alpha = 10.0\n\
         beta = 10.0\n\
         gamma = 1.0\n",
        seed = s.seed,
        k = s.labeled_per_class,
        d = SYNTH_DIM,
        m = SYNTH_MAX_LEN,
    );
    write_bytes(&experiment, toml.as_bytes())?;
    let files = [vocab, pool, test, experiment];
    write_manifest(out, "synth", &settings_hash(s), s, &files)?;
    Ok(SynthReport {
        vocab_size: task.vocab.len(),
        pool: task.pool.len(),
        test: task.test.len(),
        num_classes: s.spec.num_classes,
    })
}
