#![allow(dead_code)]

use distil_core::autodiff::{Graph, Var};
use distil_core::losses::{self, LossWeights};
use distil_core::student::{self, ForwardCtx, StudentConfig, StudentParams};
use distil_core::tensor::Tensor;
use distil_core::tokenizer::Encoded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// V=20, K=4, L=3, C=3, H_t=6, T=5.
pub fn micro_config() -> StudentConfig {
    StudentConfig {
        vocab_size: 20,
        embed_dim: 4,
        lstm_hidden: 3,
        num_classes: 3,
        teacher_hidden: 6,
        max_len: 5,
        dropout_rate: 0.0,
        recurrent_dropout_rate: 0.0,
    }
}

pub fn encoded(ids: &[usize], max_len: usize) -> Encoded {
    let mut padded = ids.to_vec();
    padded.resize(max_len, 0);
    Encoded {
        ids: padded,
        length: ids.len(),
        max_len,
    }
}

/// Two sequences of different lengths (B=2).
pub fn micro_batch() -> Vec<Encoded> {
    vec![encoded(&[2, 7, 11, 5, 3], 5), encoded(&[2, 13, 3], 5)]
}

pub struct MicroTargets {
    pub labels: Vec<usize>,
    pub logits: Tensor,
    pub hidden: Tensor,
}

pub fn micro_targets(seed: u64) -> MicroTargets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = |n: usize, w: usize, scale: f64| {
        Tensor::from_rows(
            &(0..n)
                .map(|_| (0..w).map(|_| rng.gen_range(-scale..scale)).collect())
                .collect::<Vec<Vec<f64>>>(),
        )
        .unwrap()
    };
    MicroTargets {
        labels: vec![1, 2],
        logits: rows(2, 3, 4.0),
        hidden: rows(2, 6, 1.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Ce,
    Ll,
    Rl,
    Joint,
}

/// Build the loss for `term` in eval mode and return the loss node plus the
/// bound parameters.
pub fn build_loss(
    graph: &mut Graph,
    params: &StudentParams,
    batch: &[Encoded],
    targets: &MicroTargets,
    term: Term,
    weights: &LossWeights,
) -> (Var, student::BoundStudent) {
    let bound = params.bind(graph).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx {
        training: false,
        rng: &mut rng,
    };
    let refs: Vec<&Encoded> = batch.iter().collect();
    let z = student::encode(graph, &bound, params.config(), &refs, &mut ctx).unwrap();
    let ce = |g: &mut Graph| {
        let p = student::classify(g, &bound, z).unwrap();
        losses::cross_entropy(g, p, &targets.labels).unwrap()
    };
    let ll = |g: &mut Graph| {
        let s = student::regress_logits(g, &bound, z).unwrap();
        let t = g.constant(targets.logits.clone()).unwrap();
        losses::logit_loss(g, s, t).unwrap()
    };
    let rl = |g: &mut Graph| {
        let s = student::project(g, &bound, z).unwrap();
        let t = g.constant(targets.hidden.clone()).unwrap();
        losses::representation_loss(g, s, t).unwrap()
    };
    let loss = match term {
        Term::Ce => ce(graph),
        Term::Ll => ll(graph),
        Term::Rl => rl(graph),
        Term::Joint => {
            let (c, r, l) = (ce(graph), rl(graph), ll(graph));
            losses::joint_loss(graph, weights, Some(c), Some(r), Some(l)).unwrap()
        }
    };
    (loss, bound)
}

pub fn loss_value(
    params: &StudentParams,
    batch: &[Encoded],
    targets: &MicroTargets,
    term: Term,
    weights: &LossWeights,
) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = build_loss(&mut g, params, batch, targets, term, weights);
    g.value(loss).data()[0]
}

use distil_core::evaluation::low_resource_split;
use distil_core::synthetic::{generate, SyntheticSpec, SyntheticTask};
use distil_core::teacher::OracleTeacher;
use distil_core::tokenizer::encode;
use distil_core::training::{TrainConfig, TrainingSet};

pub const MICRO_MAX_LEN: usize = 10;

pub fn micro_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 3,
        signatures_per_class: 6,
        noise_words: 10,
        min_words: 4,
        max_words: 6,
        min_signatures: 1,
        max_signatures: 2,
        confusion_rate: 0.2,
        suffix_rate: 0.1,
        unknown_rate: 0.05,
    }
}

/// A small task with 5 labeled instances per class and an oracle teacher.
pub fn micro_task(seed: u64) -> (SyntheticTask, TrainingSet, TrainConfig) {
    let task = generate(&micro_spec(), 90, 30, seed).unwrap();
    let enc: Vec<Encoded> = task
        .pool
        .iter()
        .map(|t| encode(&t.text, &task.vocab, MICRO_MAX_LEN).unwrap())
        .collect();
    let ex: Vec<(&Encoded, usize)> = enc.iter().zip(&task.pool).map(|(e, t)| (e, t.label)).collect();
    let oracle = OracleTeacher::fit(&ex, 64, 3, 6, 1.0, 2.5, seed).unwrap();
    let corpus = low_resource_split(&task.pool, 5, 3, seed).unwrap();
    let records: Vec<_> = corpus
        .unlabeled
        .iter()
        .map(|u| {
            oracle.predict(
                u.id.clone(),
                u.text.clone(),
                &encode(&u.text, &task.vocab, MICRO_MAX_LEN).unwrap(),
            )
        })
        .collect();
    let data = TrainingSet::build(&corpus, &records, &task.vocab, MICRO_MAX_LEN, seed).unwrap();
    let student = StudentConfig {
        vocab_size: task.vocab.len(),
        embed_dim: 6,
        lstm_hidden: 5,
        num_classes: 3,
        teacher_hidden: 6,
        max_len: MICRO_MAX_LEN,
        dropout_rate: 0.4,
        recurrent_dropout_rate: 0.2,
    };
    let mut config = TrainConfig::new(student, seed);
    config.batch_size = 8;
    config.max_epochs = 3;
    config.patience = 2;
    (task, data, config)
}
