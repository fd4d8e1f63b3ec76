mod common;

use common::*;
use distil_core::autodiff::{sigmoid, Graph};
use distil_core::evaluation::{derive_split, max_variance, prediction_variance, LabeledText};
use distil_core::losses;
use distil_core::student::{self, ForwardCtx, StudentParams};
use distil_core::teacher::{hard_label, logit_transform, TeacherRecord};
use distil_core::tensor::Tensor;
use distil_core::tokenizer::Encoded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Scalar-loop LSTM, written against the parameter names only.

fn mat(p: &StudentParams, name: &str) -> (Vec<f64>, usize) {
    let t = p.get(name).unwrap();
    (t.data().to_vec(), t.last_dim())
}

fn lstm_states(p: &StudentParams, dir: &str, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let l = p.config().lstm_hidden;
    let gate = |g: &str, x: &[f64], h: &[f64]| -> Vec<f64> {
        let (w, wc) = mat(p, &format!("{dir}.{g}.w"));
        let (u, uc) = mat(p, &format!("{dir}.{g}.u"));
        let (b, _) = mat(p, &format!("{dir}.{g}.b"));
        (0..l)
            .map(|j| {
                let mut s = b[j];
                for (k, xv) in x.iter().enumerate() {
                    s += xv * w[k * wc + j];
                }
                for (k, hv) in h.iter().enumerate() {
                    s += hv * u[k * uc + j];
                }
                s
            })
            .collect()
    };
    let mut h = vec![0.0; l];
    let mut c = vec![0.0; l];
    let mut out = Vec::new();
    for x in xs {
        let i: Vec<f64> = gate("input", x, &h).into_iter().map(sigmoid).collect();
        let f: Vec<f64> = gate("forget", x, &h).into_iter().map(sigmoid).collect();
        let o: Vec<f64> = gate("output", x, &h).into_iter().map(sigmoid).collect();
        let g: Vec<f64> = gate("cell", x, &h).into_iter().map(f64::tanh).collect();
        for j in 0..l {
            c[j] = f[j] * c[j] + i[j] * g[j];
            h[j] = o[j] * c[j].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn reference_encoding(p: &StudentParams, e: &Encoded) -> Vec<f64> {
    let (emb, k) = mat(p, "embedding");
    let xs: Vec<Vec<f64>> = e
        .valid_ids()
        .iter()
        .map(|&id| emb[id * k..(id + 1) * k].to_vec())
        .collect();
    let mut rev = xs.clone();
    rev.reverse();
    let pool = |states: Vec<Vec<f64>>| -> Vec<f64> {
        (0..states[0].len())
            .map(|j| states.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    };
    let mut z = pool(lstm_states(p, "fwd", &xs));
    z.extend(pool(lstm_states(p, "bwd", &rev)));
    z
}

fn graph_encoding(p: &StudentParams, batch: &[Encoded]) -> (Graph, student::BoundStudent, distil_core::autodiff::Var) {
    let mut g = Graph::new();
    let bound = p.bind_constant(&mut g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx {
        training: false,
        rng: &mut rng,
    };
    let refs: Vec<&Encoded> = batch.iter().collect();
    let z = student::encode(&mut g, &bound, p.config(), &refs, &mut ctx).unwrap();
    (g, bound, z)
}

#[test]
fn bilstm_encoding_matches_scalar_recurrence() {
    let p = StudentParams::init(micro_config(), 9).unwrap();
    let batch = vec![
        encoded(&[2, 7, 11, 5, 3], 5),
        encoded(&[2, 13, 3], 5),
        encoded(&[2, 3], 5),
    ];
    let (g, _, z) = graph_encoding(&p, &batch);
    let width = 2 * p.config().lstm_hidden;
    for (row, e) in batch.iter().enumerate() {
        let expected = reference_encoding(&p, e);
        let got = &g.value(z).data()[row * width..(row + 1) * width];
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "row {row}: {a} vs {b}");
        }
    }
}

#[test]
fn heads_match_direct_arithmetic() {
    let p = StudentParams::init(micro_config(), 4).unwrap();
    let batch = micro_batch();
    let (mut g, bound, z) = graph_encoding(&p, &batch);
    let probs = student::classify(&mut g, &bound, z).unwrap();
    let scores = student::regress_logits(&mut g, &bound, z).unwrap();
    let proj = student::project(&mut g, &bound, z).unwrap();
    let cfg = p.config().clone();
    let zl = 2 * cfg.lstm_hidden;
    let affine = |zrow: &[f64], w: &str, b: Option<&str>, out: usize| -> Vec<f64> {
        let (wv, _) = mat(&p, w);
        let bias = b.map(|b| mat(&p, b).0).unwrap_or_else(|| vec![0.0; out]);
        (0..out)
            .map(|j| bias[j] + (0..zl).map(|i| zrow[i] * wv[i * out + j]).sum::<f64>())
            .collect()
    };
    for r in 0..batch.len() {
        let zrow = &g.value(z).data()[r * zl..(r + 1) * zl];
        let s = affine(zrow, "classifier.w", None, cfg.num_classes);
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = s.iter().map(|v| (v - m).exp()).sum();
        for (c, sc) in s.iter().enumerate() {
            let want = (sc - m).exp() / denom;
            assert!((g.value(probs).at(r, c) - want).abs() < 1e-12);
        }
        let s = affine(zrow, "regressor.w", Some("regressor.b"), cfg.num_classes);
        for (c, sc) in s.iter().enumerate() {
            assert!((g.value(scores).at(r, c) - sc).abs() < 1e-12);
        }
        let s = affine(zrow, "projector.w", Some("projector.b"), cfg.teacher_hidden);
        for (h, sh) in s.iter().enumerate() {
            let want = 0.5 * sh * (1.0 + libm::erf(sh / std::f64::consts::SQRT_2));
            assert!((g.value(proj).at(r, h) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn vectorized_losses_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let b = rng.gen_range(1..9);
        let w = rng.gen_range(2..12);
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..b)
                .map(|_| (0..w).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect()
        };
        let a = rows(&mut rng);
        let t = rows(&mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..w)).collect();

        let mut g = Graph::new();
        let va = g.constant(Tensor::from_rows(&a).unwrap()).unwrap();
        let vt = g.constant(Tensor::from_rows(&t).unwrap()).unwrap();
        let ll = losses::logit_loss(&mut g, va, vt).unwrap();
        let rl = losses::representation_loss(&mut g, va, vt).unwrap();
        let p = g.softmax(va).unwrap();
        let ce = losses::cross_entropy(&mut g, p, &labels).unwrap();

        let mut sq = 0.0;
        for i in 0..b {
            for j in 0..w {
                sq += 0.5 * (a[i][j] - t[i][j]).powi(2);
            }
        }
        sq /= b as f64;
        let mut nll = 0.0;
        for i in 0..b {
            let m = a[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = a[i].iter().map(|v| (v - m).exp()).sum();
            let pi = (a[i][labels[i]] - m).exp() / z;
            nll -= pi.max(losses::PROB_FLOOR).ln();
        }
        nll /= b as f64;
        assert!((g.value(ll).data()[0] - sq).abs() < 1e-12);
        assert!((g.value(rl).data()[0] - sq).abs() < 1e-12);
        assert!((g.value(ce).data()[0] - nll).abs() < 1e-12);
    }
}

#[test]
fn logit_round_trip_and_hard_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let eps = 1e-7;
    for i in 0..10_000 {
        let c = rng.gen_range(2..15);
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(-8.0..8.0f64).exp()).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let logits = logit_transform(&probs, eps);
        for (p, l) in probs.iter().zip(&logits) {
            assert!((sigmoid(*l) - p.clamp(eps, 1.0 - eps)).abs() < 1e-9);
        }
        let rec = TeacherRecord::from_probs(format!("r{i}"), "", probs.clone(), vec![0.0]);
        assert_eq!(student::argmax(&logits), rec.hard_label);
        assert_eq!(hard_label(&probs), rec.hard_label);
    }
}

fn one_hot_records(c: usize, n: usize) -> Vec<TeacherRecord> {
    (0..n)
        .map(|i| {
            let mut p = vec![0.0; c];
            p[i % c] = 1.0;
            TeacherRecord::from_probs(format!("r{i}"), "", p, vec![0.0])
        })
        .collect()
}

#[test]
fn max_variance_reproduces_table_values() {
    for (c, want) in [(2, 0.250), (4, 0.188), (14, 0.066)] {
        let v = prediction_variance(&one_hot_records(c, 3 * c)).unwrap();
        assert_eq!(format!("{v:.3}"), format!("{want:.3}"));
    }
    for c in 2..=50 {
        let brute = prediction_variance(&one_hot_records(c, 1)).unwrap();
        assert!((brute - max_variance(c).unwrap()).abs() < 1e-12);
    }
}

fn pool(per_class: &[usize]) -> Vec<LabeledText> {
    let mut out = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        out.extend((0..n).map(|i| LabeledText {
            id: format!("{c}-{i}"),
            text: String::new(),
            label: c,
        }));
    }
    out
}

#[test]
fn derived_split_matches_table_sizes() {
    // AG News: 4 classes, 120k train, 7.6k test.
    let corpus = derive_split(&pool(&[30_000; 4]), 7_600, 4, 1).unwrap();
    assert_eq!(corpus.labeled_count_per_class(), vec![1_900; 4]);
    assert_eq!(corpus.unlabeled.len(), 112_400);
}
