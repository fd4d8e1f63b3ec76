//! Optimizer, batch streams, early stopping and the three training regimens.

mod adadelta;
mod batches;
mod schedule;

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adadelta::{AdadeltaConfig, AdadeltaState};
pub use batches::{
    dual_batch_stream, single_batch_stream, steps_per_epoch, CyclingSampler, DualBatch, DualBatchStream,
    SingleBatchStream,
};
pub use schedule::{best_index, early_stop, Phase, Regimen, ScheduleState, StopDecision};

use crate::autodiff::{Graph, Precision, Var};
use crate::error::{Error, Result};
use crate::evaluation::Corpus;
use crate::losses::{self, LossWeights};
use crate::student::{self, BoundStudent, ForwardCtx, ParamGroup, StudentConfig, StudentParams};
use crate::teacher::TeacherRecord;
use crate::tensor::Tensor;
use crate::tokenizer::{encode, Encoded, Vocab};

/// Share of each pool held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_PATIENCE: usize = 3;
const EVAL_CHUNK: usize = 256;

/// What the transfer set contributes during joint training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Teacher logits and hidden states (logit + representation losses).
    #[default]
    Soft,
    /// Teacher argmax labels with cross-entropy.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub student: StudentConfig,
    pub batch_size: usize,
    /// Upper bound on epochs in each phase.
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdadeltaConfig,
    pub targets: TargetMode,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn new(student: StudentConfig, seed: u64) -> Self {
        Self {
            student,
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: 50,
            patience: DEFAULT_PATIENCE,
            seed,
            optimizer: AdadeltaConfig::default(),
            targets: TargetMode::Soft,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::contract("max_epochs must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::contract("patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub encoded: Encoded,
    pub label: usize,
}

/// A transfer-set instance paired with its teacher targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferExample {
    pub id: String,
    pub encoded: Encoded,
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
    pub hard_label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
}

impl LabeledSet {
    /// Stratified hold-out of [`VALIDATION_FRACTION`] of each class.
    pub fn split(examples: Vec<LabeledExample>, num_classes: usize, seed: u64) -> Result<Self> {
        let mut by_class: Vec<Vec<LabeledExample>> = vec![Vec::new(); num_classes];
        for ex in examples {
            if ex.label >= num_classes {
                return Err(Error::data(format!(
                    "instance {} has label {} outside [0, {num_classes})",
                    ex.id, ex.label
                )));
            }
            by_class[ex.label].push(ex);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A11_DA7E);
        let mut set = LabeledSet::default();
        for mut members in by_class {
            members.shuffle(&mut rng);
            let n_val = holdout_size(members.len());
            let train = members.split_off(n_val);
            set.val.extend(members);
            set.train.extend(train);
        }
        Ok(set)
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }

    /// Validation instances, or the training ones when nothing was held out.
    pub fn val_or_train(&self) -> &[LabeledExample] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &LabeledExample> {
        self.train.iter().chain(&self.val)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferSet {
    pub train: Vec<TransferExample>,
    pub val: Vec<TransferExample>,
}

impl TransferSet {
    pub fn split(mut examples: Vec<TransferExample>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A11_DA7F);
        examples.shuffle(&mut rng);
        let n_val = holdout_size(examples.len());
        let train = examples.split_off(n_val);
        Self { train, val: examples }
    }

    pub fn val_or_train(&self) -> &[TransferExample] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

fn holdout_size(n: usize) -> usize {
    let k = (n as f64 * VALIDATION_FRACTION).round() as usize;
    if n >= 2 {
        k.min(n - 1)
    } else {
        0
    }
}

/// Encoded, split training data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub labeled: LabeledSet,
    pub transfer: TransferSet,
    pub num_classes: usize,
    pub teacher_hidden: usize,
}

impl TrainingSet {
    /// Encode the corpus and attach teacher targets to every unlabeled
    /// instance. Fails on the first unlabeled id with no record.
    pub fn build(corpus: &Corpus, records: &[TeacherRecord], vocab: &Vocab, max_len: usize, seed: u64) -> Result<Self> {
        corpus.validate()?;
        let by_id: HashMap<&str, &TeacherRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut transfer = Vec::with_capacity(corpus.unlabeled.len());
        let mut hidden_dim = None;
        for u in &corpus.unlabeled {
            let rec = by_id
                .get(u.id.as_str())
                .ok_or_else(|| Error::MissingTeacherRecord(u.id.clone()))?;
            if rec.probs.len() != corpus.num_classes {
                return Err(Error::data(format!(
                    "teacher record {} has {} classes, corpus has {}",
                    rec.id,
                    rec.probs.len(),
                    corpus.num_classes
                )));
            }
            if *hidden_dim.get_or_insert(rec.hidden.len()) != rec.hidden.len() {
                return Err(Error::data(format!(
                    "teacher record {} has inconsistent hidden width",
                    rec.id
                )));
            }
            transfer.push(TransferExample {
                id: u.id.clone(),
                encoded: encode(&u.text, vocab, max_len)?,
                logits: rec.logits.clone(),
                hidden: rec.hidden.clone(),
                hard_label: rec.hard_label,
            });
        }
        let labeled = corpus
            .labeled
            .iter()
            .map(|l| {
                Ok(LabeledExample {
                    id: l.id.clone(),
                    encoded: encode(&l.text, vocab, max_len)?,
                    label: l.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labeled: LabeledSet::split(labeled, corpus.num_classes, seed)?,
            transfer: TransferSet::split(transfer, seed),
            num_classes: corpus.num_classes,
            teacher_hidden: hidden_dim.unwrap_or(0),
        })
    }

    fn check_against(&self, config: &StudentConfig) -> Result<()> {
        if config.num_classes != self.num_classes {
            return Err(Error::contract(format!(
                "student has {} classes, data has {}",
                config.num_classes, self.num_classes
            )));
        }
        if !self.transfer.train.is_empty() && config.teacher_hidden != self.teacher_hidden {
            return Err(Error::contract(format!(
                "student projects to {} dims, teacher hidden states have {}",
                config.teacher_hidden, self.teacher_hidden
            )));
        }
        Ok(())
    }
}

/// Per-epoch losses; absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ce: Option<f64>,
    /// Cross-entropy against teacher hard labels on the transfer set.
    pub ce_hard: Option<f64>,
    pub rl: Option<f64>,
    pub ll: Option<f64>,
    pub joint: Option<f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub losses: LossValues,
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub stage: usize,
    pub phase: Phase,
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: StudentParams,
    pub metrics: Vec<MetricRecord>,
    pub phases: Vec<PhaseReport>,
    pub total_steps: usize,
    /// Stage-1 checkpoint of distil-then-finetune.
    pub distilled: Option<StudentParams>,
}

impl TrainOutcome {
    pub fn phase_history(&self) -> Vec<Phase> {
        self.phases.iter().map(|p| p.phase).collect()
    }
}

/// Passed to observers after every optimizer step.
pub struct StepEvent<'a> {
    pub stage: usize,
    pub phase: Phase,
    pub step: usize,
    pub params: &'a StudentParams,
}

pub type Observer<'o> = dyn FnMut(&StepEvent<'_>) + 'o;

/// Loss-term weights for one phase; zero means the term is absent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Objective {
    ce: f64,
    ce_hard: f64,
    rl: f64,
    ll: f64,
}

impl Objective {
    fn uses_transfer(&self) -> bool {
        self.ce_hard > 0.0 || self.rl > 0.0 || self.ll > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stream {
    Dual,
    TransferOnly,
    LabeledOnly,
}

fn or_one(w: f64) -> f64 {
    if w > 0.0 {
        w
    } else {
        1.0
    }
}

fn phase_objective(
    regimen: Regimen,
    phase: Phase,
    weights: &LossWeights,
    targets: TargetMode,
) -> Result<(Objective, Stream)> {
    let o = match (regimen, phase) {
        (Regimen::Joint, Phase::Joint) => match targets {
            TargetMode::Soft => (
                Objective {
                    ce: weights.alpha,
                    rl: weights.beta,
                    ll: weights.gamma,
                    ..Default::default()
                },
                Stream::Dual,
            ),
            TargetMode::Hard => (
                Objective {
                    ce: or_one(weights.alpha),
                    ce_hard: or_one(weights.alpha),
                    ..Default::default()
                },
                Stream::Dual,
            ),
        },
        (Regimen::StagewiseRlFirst, Phase::Representation) => (
            Objective {
                rl: or_one(weights.beta),
                ..Default::default()
            },
            Stream::TransferOnly,
        ),
        (Regimen::StagewiseRlFirst, _) => (
            Objective {
                ce: weights.alpha,
                ll: weights.gamma,
                ..Default::default()
            },
            Stream::Dual,
        ),
        (Regimen::DistilThenFinetune, Phase::Distillation) => (
            Objective {
                rl: weights.beta,
                ll: weights.gamma,
                ..Default::default()
            },
            Stream::TransferOnly,
        ),
        (Regimen::DistilThenFinetune, _) => (
            Objective {
                ce: or_one(weights.alpha),
                ..Default::default()
            },
            Stream::LabeledOnly,
        ),
        (r, p) => return Err(Error::contract(format!("phase {p} is not part of regimen {r}"))),
    };
    if o.0 == Objective::default() {
        return Err(Error::contract(format!(
            "phase {phase} of {regimen} has no active loss term with weights {weights:?}"
        )));
    }
    Ok(o)
}

fn phase_seed(seed: u64, stage: usize, phase: Phase) -> u64 {
    let tag = phase
        .label()
        .bytes()
        .fold(stage as u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag
}

struct Trainer<'a, 'o> {
    labeled: &'a LabeledSet,
    transfer: &'a TransferSet,
    config: &'a TrainConfig,
    params: StudentParams,
    optimizer: AdadeltaState,
    dropout_rng: ChaCha8Rng,
    step: usize,
    metrics: Vec<MetricRecord>,
    phases: Vec<PhaseReport>,
    started: Instant,
    observer: &'a mut Observer<'o>,
}

impl<'a, 'o> Trainer<'a, 'o> {
    fn new(
        labeled: &'a LabeledSet,
        transfer: &'a TransferSet,
        config: &'a TrainConfig,
        params: StudentParams,
        observer: &'a mut Observer<'o>,
    ) -> Result<Self> {
        let optimizer = AdadeltaState::new(config.optimizer, &params)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(1);
        Ok(Self {
            labeled,
            transfer,
            config,
            params,
            optimizer,
            dropout_rng,
            step: 0,
            metrics: Vec::new(),
            phases: Vec::new(),
            started: Instant::now(),
            observer,
        })
    }

    /// Forward the requested terms for one batch. Returns the joint loss
    /// node (if any) and the individual values.
    fn forward(
        &mut self,
        graph: &mut Graph,
        objective: &Objective,
        labeled: &[&LabeledExample],
        transfer: &[&TransferExample],
        training: bool,
        trainable: bool,
    ) -> Result<(Option<Var>, LossValues, BoundStudent)> {
        let bound = if trainable {
            self.params.bind(graph)?
        } else {
            self.params.bind_constant(graph)?
        };
        let cfg = self.params.config().clone();
        let mut ctx = ForwardCtx {
            training,
            rng: &mut self.dropout_rng,
        };
        let mut values = LossValues::default();
        let mut terms = Vec::new();

        if objective.ce > 0.0 && !labeled.is_empty() {
            let enc: Vec<&Encoded> = labeled.iter().map(|e| &e.encoded).collect();
            let z = student::encode(graph, &bound, &cfg, &enc, &mut ctx)?;
            let p = student::classify(graph, &bound, z)?;
            let labels: Vec<usize> = labeled.iter().map(|e| e.label).collect();
            let ce = losses::cross_entropy(graph, p, &labels)?;
            values.ce = Some(graph.value(ce).data()[0]);
            terms.push((ce, objective.ce));
        }
        if objective.uses_transfer() && !transfer.is_empty() {
            let enc: Vec<&Encoded> = transfer.iter().map(|e| &e.encoded).collect();
            let z = student::encode(graph, &bound, &cfg, &enc, &mut ctx)?;
            if objective.ce_hard > 0.0 {
                let p = student::classify(graph, &bound, z)?;
                let labels: Vec<usize> = transfer.iter().map(|e| e.hard_label).collect();
                let ce = losses::cross_entropy(graph, p, &labels)?;
                values.ce_hard = Some(graph.value(ce).data()[0]);
                terms.push((ce, objective.ce_hard));
            }
            if objective.rl > 0.0 {
                let proj = student::project(graph, &bound, z)?;
                let rows: Vec<Vec<f64>> = transfer.iter().map(|e| e.hidden.clone()).collect();
                let target = graph.constant(Tensor::from_rows(&rows)?)?;
                let rl = losses::representation_loss(graph, proj, target)?;
                values.rl = Some(graph.value(rl).data()[0]);
                terms.push((rl, objective.rl));
            }
            if objective.ll > 0.0 {
                let scores = student::regress_logits(graph, &bound, z)?;
                let rows: Vec<Vec<f64>> = transfer.iter().map(|e| e.logits.clone()).collect();
                let target = graph.constant(Tensor::from_rows(&rows)?)?;
                let ll = losses::logit_loss(graph, scores, target)?;
                values.ll = Some(graph.value(ll).data()[0]);
                terms.push((ll, objective.ll));
            }
        }
        let mut joint = None;
        for (term, w) in terms {
            let scaled = graph.scale(term, w)?;
            joint = Some(match joint {
                Some(acc) => graph.add(acc, scaled)?,
                None => scaled,
            });
        }
        values.joint = joint.map(|j| graph.value(j).data()[0]);
        Ok((joint, values, bound))
    }

    fn validate(&mut self, objective: &Objective) -> Result<(f64, Option<f64>)> {
        let labeled: Vec<&LabeledExample> = self.labeled.val_or_train().iter().collect();
        let transfer: Vec<&TransferExample> = if objective.uses_transfer() {
            self.transfer.val_or_train().iter().collect()
        } else {
            Vec::new()
        };
        let mut weighted = 0.0;
        let mut any = false;
        // Cross-entropy on labeled validation.
        if objective.ce > 0.0 && !labeled.is_empty() {
            let only_ce = Objective {
                ce: 1.0,
                ..Default::default()
            };
            let mut total = 0.0;
            for chunk in labeled.chunks(EVAL_CHUNK) {
                let mut g = Graph::with_precision(self.config.precision);
                let (_, l, _) = self.forward(&mut g, &only_ce, chunk, &[], false, false)?;
                total += l.ce.unwrap_or(0.0) * chunk.len() as f64;
            }
            weighted += objective.ce * total / labeled.len() as f64;
            any = true;
        }
        if !transfer.is_empty() {
            let transfer_only = Objective { ce: 0.0, ..*objective };
            let mut total = 0.0;
            for chunk in transfer.chunks(EVAL_CHUNK) {
                let mut g = Graph::with_precision(self.config.precision);
                let (_, l, _) = self.forward(&mut g, &transfer_only, &[], chunk, false, false)?;
                total += l.joint.unwrap_or(0.0) * chunk.len() as f64;
            }
            weighted += total / transfer.len() as f64;
            any = true;
        }
        if !any {
            return Err(Error::contract("no validation data for the active loss terms"));
        }
        let accuracy = if labeled.is_empty() {
            None
        } else {
            let enc: Vec<&Encoded> = labeled.iter().map(|e| &e.encoded).collect();
            let pred = student::predict_labels(&self.params, &enc)?;
            let gold: Vec<usize> = labeled.iter().map(|e| e.label).collect();
            Some(crate::evaluation::accuracy(&pred, &gold)?)
        };
        Ok((weighted, accuracy))
    }

    fn train_step(&mut self, objective: &Objective, labeled: &[usize], transfer: &[usize]) -> Result<LossValues> {
        let lab: Vec<&LabeledExample> = labeled.iter().map(|&i| &self.labeled.train[i]).collect();
        let tra: Vec<&TransferExample> = transfer.iter().map(|&i| &self.transfer.train[i]).collect();
        let mut graph = Graph::with_precision(self.config.precision);
        let (joint, losses, bound) = self.forward(&mut graph, objective, &lab, &tra, true, true)?;
        let joint = joint.ok_or_else(|| Error::contract("training step with no active loss term"))?;
        graph.backward(joint)?;
        let grads = bound.grads(&graph);
        self.optimizer.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(losses)
    }

    fn run_phase(&mut self, regimen: Regimen, stage: usize, phase: Phase, weights: &LossWeights) -> Result<()> {
        let (objective, stream) = phase_objective(regimen, phase, weights, self.config.targets)?;
        phase.apply_freeze(&mut self.params);
        let seed = phase_seed(self.config.seed, stage, phase);
        let mut dual = None;
        let mut single = None;
        match stream {
            Stream::Dual => {
                dual = Some(dual_batch_stream(
                    self.labeled.train.len(),
                    self.transfer.train.len(),
                    self.config.batch_size,
                    seed,
                )?)
            }
            Stream::TransferOnly => {
                single = Some(single_batch_stream(
                    self.transfer.train.len(),
                    self.config.batch_size,
                    seed,
                )?)
            }
            Stream::LabeledOnly => {
                single = Some(single_batch_stream(
                    self.labeled.train.len(),
                    self.config.batch_size,
                    seed,
                )?)
            }
        }

        let start_step = self.step;
        let (v0, a0) = self.validate(&objective)?;
        let mut best_val = v0;
        let mut history = vec![v0];
        let mut best = self.params.clone();
        self.push_metric(stage, phase, 0, LossValues::default(), v0, a0);

        let mut stopped_early = false;
        for epoch in 1..=self.config.max_epochs {
            let batches: Vec<(Vec<usize>, Vec<usize>)> = match stream {
                Stream::Dual => dual
                    .as_mut()
                    .expect("dual")
                    .epoch()
                    .into_iter()
                    .map(|b| (b.labeled, b.unlabeled))
                    .collect(),
                Stream::TransferOnly => single
                    .as_mut()
                    .expect("single")
                    .epoch()
                    .into_iter()
                    .map(|b| (Vec::new(), b))
                    .collect(),
                Stream::LabeledOnly => single
                    .as_mut()
                    .expect("single")
                    .epoch()
                    .into_iter()
                    .map(|b| (b, Vec::new()))
                    .collect(),
            };
            let mut sums = LossSums::default();
            for (lab, tra) in &batches {
                let values = self.train_step(&objective, lab, tra)?;
                sums.add(&values);
                (self.observer)(&StepEvent {
                    stage,
                    phase,
                    step: self.step,
                    params: &self.params,
                });
            }
            let (val, acc) = self.validate(&objective)?;
            if val < best_val {
                best_val = val;
                best = self.params.clone();
            }
            history.push(val);
            self.push_metric(stage, phase, epoch, sums.mean(), val, acc);
            if let StopDecision::Stop { .. } = early_stop(&history, self.config.patience)? {
                stopped_early = true;
                break;
            }
        }
        let best_epoch = best_index(&history).expect("non-empty history");
        let flags = self.params.frozen_flags();
        self.params = best;
        for (g, f) in ParamGroup::ALL.into_iter().zip(flags) {
            self.params.set_frozen(g, f);
        }
        self.phases.push(PhaseReport {
            stage,
            phase,
            epochs: history.len() - 1,
            steps: self.step - start_step,
            best_epoch,
            best_val_loss: history[best_epoch],
            stopped_early,
        });
        Ok(())
    }

    fn push_metric(
        &mut self,
        stage: usize,
        phase: Phase,
        epoch: usize,
        losses: LossValues,
        val_loss: f64,
        val_accuracy: Option<f64>,
    ) {
        self.metrics.push(MetricRecord {
            step: self.step,
            stage,
            phase,
            epoch,
            losses,
            val_loss,
            val_accuracy,
            wall_ms: self.started.elapsed().as_millis() as u64,
        });
    }

    fn finish(self, distilled: Option<StudentParams>) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            metrics: self.metrics,
            phases: self.phases,
            total_steps: self.step,
            distilled,
        }
    }
}

#[derive(Default)]
struct LossSums {
    n: usize,
    ce: (f64, usize),
    ce_hard: (f64, usize),
    rl: (f64, usize),
    ll: (f64, usize),
    joint: (f64, usize),
}

impl LossSums {
    fn add(&mut self, v: &LossValues) {
        self.n += 1;
        for (slot, val) in [
            (&mut self.ce, v.ce),
            (&mut self.ce_hard, v.ce_hard),
            (&mut self.rl, v.rl),
            (&mut self.ll, v.ll),
            (&mut self.joint, v.joint),
        ] {
            if let Some(x) = val {
                slot.0 += x;
                slot.1 += 1;
            }
        }
    }

    fn mean(&self) -> LossValues {
        let m = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        LossValues {
            ce: m(self.ce),
            ce_hard: m(self.ce_hard),
            rl: m(self.rl),
            ll: m(self.ll),
            joint: m(self.joint),
        }
    }
}

fn no_op(_: &StepEvent<'_>) {}

fn initial_params(config: &TrainConfig) -> Result<StudentParams> {
    config.validate()?;
    StudentParams::init(config.student.clone(), config.seed)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    regimen: Regimen,
    stage: usize,
    labeled: &LabeledSet,
    transfer: &TransferSet,
    start: StudentParams,
    weights: &LossWeights,
    config: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(labeled, transfer, config, start, observer)?;
    for (s, phase) in regimen.plan() {
        if s == stage {
            trainer.run_phase(regimen, s, phase, weights)?;
        }
    }
    Ok(trainer.finish(None))
}

fn check_targets(regimen: Regimen, config: &TrainConfig) -> Result<()> {
    if config.targets == TargetMode::Hard && regimen != Regimen::Joint {
        return Err(Error::contract(
            "hard targets are only supported with the joint regimen",
        ));
    }
    Ok(())
}

/// Train under `regimen`, calling `observer` after every optimizer step.
pub fn run_regimen_observed(
    regimen: Regimen,
    data: &TrainingSet,
    weights: &LossWeights,
    config: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    weights.validate()?;
    check_targets(regimen, config)?;
    data.check_against(&config.student)?;
    if data.transfer.train.is_empty() {
        return Err(Error::data("transfer set is empty"));
    }
    let start = initial_params(config)?;
    match regimen {
        Regimen::Joint | Regimen::StagewiseRlFirst => {
            if data.labeled.train.is_empty() {
                return Err(Error::data("labeled set is empty"));
            }
            let mut trainer = Trainer::new(&data.labeled, &data.transfer, config, start, observer)?;
            for (stage, phase) in regimen.plan() {
                trainer.run_phase(regimen, stage, phase, weights)?;
            }
            Ok(trainer.finish(None))
        }
        Regimen::DistilThenFinetune => {
            let stage1 = distil_stage_from(&data.transfer, start, weights, config, observer)?;
            let distilled = stage1.params.clone();
            let stage2 = finetune_stage_observed(&distilled, &data.labeled, weights, config, observer)?;
            let offset = stage1.total_steps;
            let mut metrics = stage1.metrics;
            metrics.extend(stage2.metrics.into_iter().map(|mut m| {
                m.step += offset;
                m
            }));
            let mut phases = stage1.phases;
            phases.extend(stage2.phases);
            Ok(TrainOutcome {
                params: stage2.params,
                metrics,
                phases,
                total_steps: offset + stage2.total_steps,
                distilled: Some(distilled),
            })
        }
    }
}

pub fn run_regimen(
    regimen: Regimen,
    data: &TrainingSet,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run_regimen_observed(regimen, data, weights, config, &mut no_op)
}

/// CE on labeled batches plus representation and logit losses on transfer
/// batches, one backward pass per step, everything trainable.
pub fn run_joint(data: &TrainingSet, weights: &LossWeights, config: &TrainConfig) -> Result<TrainOutcome> {
    run_regimen(Regimen::Joint, data, weights, config)
}

/// Representation loss alone, then CE + logit loss with gradual unfreezing.
pub fn run_stagewise_rl_first(data: &TrainingSet, weights: &LossWeights, config: &TrainConfig) -> Result<TrainOutcome> {
    run_regimen(Regimen::StagewiseRlFirst, data, weights, config)
}

/// Label-free distillation, then CE fine-tuning with gradual unfreezing.
pub fn run_distil_then_finetune(
    data: &TrainingSet,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run_regimen(Regimen::DistilThenFinetune, data, weights, config)
}

fn distil_stage_from(
    transfer: &TransferSet,
    start: StudentParams,
    weights: &LossWeights,
    config: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    if transfer.train.is_empty() {
        return Err(Error::data("transfer set is empty"));
    }
    let no_labels = LabeledSet::default();
    run_stage(
        Regimen::DistilThenFinetune,
        1,
        &no_labels,
        transfer,
        start,
        weights,
        config,
        observer,
    )
}

/// Stage 1 of distil-then-finetune. Takes only the transfer set, so gold
/// labels are unreachable.
pub fn distil_stage(
    transfer: &TransferSet,
    weights: &LossWeights,
    config: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    weights.validate()?;
    check_targets(Regimen::DistilThenFinetune, config)?;
    let start = initial_params(config)?;
    distil_stage_from(transfer, start, weights, config, observer)
}

/// Stage 2 of distil-then-finetune, starting from a distilled checkpoint.
/// Re-runnable with different labeled sets from the same checkpoint.
pub fn finetune_stage_observed(
    start: &StudentParams,
    labeled: &LabeledSet,
    weights: &LossWeights,
    config: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if labeled.train.is_empty() {
        return Err(Error::data("labeled set is empty"));
    }
    if start.config() != &config.student {
        return Err(Error::contract("checkpoint config does not match training config"));
    }
    let empty = TransferSet::default();
    run_stage(
        Regimen::DistilThenFinetune,
        2,
        labeled,
        &empty,
        start.clone(),
        weights,
        config,
        observer,
    )
}

pub fn finetune_stage(
    start: &StudentParams,
    labeled: &LabeledSet,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    finetune_stage_observed(start, labeled, weights, config, &mut no_op)
}
