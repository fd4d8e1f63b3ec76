//! Teacher artifacts: per-instance probabilities, logits and hidden
//! states, plus a seeded stand-in teacher for desk-scale experiments.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows};
use crate::error::{Error, Result};
use crate::student::argmax;
use crate::tensor::Tensor;
use crate::tokenizer::Encoded;

pub const DEFAULT_LOGIT_EPS: f64 = 1e-7;
/// Tolerance on `Σ probs = 1` when importing records.
pub const PROB_SUM_TOL: f64 = 1e-6;
/// Tolerance on stored logits versus the recomputed transform.
pub const LOGIT_TOL: f64 = 1e-6;

/// One transfer-set instance as seen by the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub id: String,
    pub text: String,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
    pub hard_label: usize,
}

impl TeacherRecord {
    /// Derive logits and the hard label from `probs`.
    pub fn from_probs(id: impl Into<String>, text: impl Into<String>, probs: Vec<f64>, hidden: Vec<f64>) -> Self {
        let logits = logit_transform(&probs, DEFAULT_LOGIT_EPS);
        let hard_label = hard_label(&probs);
        Self {
            id: id.into(),
            text: text.into(),
            probs,
            logits,
            hidden,
            hard_label,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Check the per-record invariants.
    pub fn validate(&self) -> Result<()> {
        let c = self.probs.len();
        if c < 2 {
            return Err(Error::data(format!("record {}: needs at least 2 classes", self.id)));
        }
        if self.logits.len() != c {
            return Err(Error::data(format!(
                "record {}: {} logits for {c} classes",
                self.id,
                self.logits.len()
            )));
        }
        if self.hidden.is_empty() {
            return Err(Error::data(format!("record {}: empty hidden vector", self.id)));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.probs) || !finite(&self.logits) || !finite(&self.hidden) {
            return Err(Error::data(format!("record {}: non-finite value", self.id)));
        }
        if self.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::data(format!("record {}: probability outside [0, 1]", self.id)));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::data(format!(
                "record {}: probabilities sum to {sum}, not 1",
                self.id
            )));
        }
        let expected = logit_transform(&self.probs, DEFAULT_LOGIT_EPS);
        if expected
            .iter()
            .zip(&self.logits)
            .any(|(e, l)| (e - l).abs() > LOGIT_TOL)
        {
            return Err(Error::data(format!(
                "record {}: logits are not the log-odds of probs",
                self.id
            )));
        }
        if self.hard_label != hard_label(&self.probs) {
            return Err(Error::data(format!(
                "record {}: hard_label {} is not the argmax",
                self.id, self.hard_label
            )));
        }
        Ok(())
    }
}

/// Elementwise `log(p'/(1-p'))` with `p' = clamp(p, eps, 1-eps)`.
pub fn logit_transform(probs: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0 && eps < 0.5, "logit clamp eps must lie in (0, 0.5)");
    probs
        .iter()
        .map(|&p| {
            let q = p.clamp(eps, 1.0 - eps);
            (q / (1.0 - q)).ln()
        })
        .collect()
}

/// Inverse of [`logit_transform`] on the clamped range.
pub fn inverse_logit(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&l| sigmoid(l)).collect()
}

/// Index of the largest probability; ties go to the lowest index.
pub fn hard_label(probs: &[f64]) -> usize {
    argmax(probs)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const FIT_ITERATIONS: usize = 400;
const FIT_STEP: f64 = 2.0;
const FIT_L2: f64 = 1e-4;
const HIDDEN_BAG_SCALE: f64 = 0.25;

/// Synthetic teacher: a linear model over a hashed bag of token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTeacher {
    features: usize,
    weights: Tensor,
    projector: Tensor,
    tau: f64,
    seed: u64,
}

impl OracleTeacher {
    /// Random Gaussian weights and projector.
    pub fn random(features: usize, num_classes: usize, hidden: usize, tau: f64, seed: u64) -> Result<Self> {
        if features == 0 || hidden == 0 || num_classes < 2 {
            return Err(Error::contract(
                "oracle needs features > 0, hidden > 0 and at least 2 classes",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let weights = Tensor::new(vec![features, num_classes], normal(features * num_classes))?;
        let projector = Tensor::new(vec![features, hidden], normal(features * hidden))?;
        let mut oracle = Self {
            features,
            weights,
            projector,
            tau: 1.0,
            seed,
        };
        oracle.set_tau(tau)?;
        Ok(oracle)
    }

    /// Class weights fitted by multinomial logistic regression (full-batch
    /// gradient descent from zero) on the hashed features, then rescaled so
    /// the mean gap between the two largest scores on the fitting data
    /// equals `margin`.
    pub fn fit(
        examples: &[(&Encoded, usize)],
        features: usize,
        num_classes: usize,
        hidden: usize,
        tau: f64,
        margin: f64,
        seed: u64,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::contract("cannot fit an oracle on zero examples"));
        }
        if margin.is_nan() || margin <= 0.0 {
            return Err(Error::contract("oracle margin must be positive"));
        }
        if let Some((_, bad)) = examples.iter().find(|(_, l)| *l >= num_classes) {
            return Err(Error::contract(format!("label {bad} out of range")));
        }
        let mut oracle = Self::random(features, num_classes, hidden, tau, seed)?;
        // Sparse feature rows.
        let rows: Vec<Vec<(usize, f64)>> = examples
            .iter()
            .map(|(enc, _)| {
                oracle
                    .featurize(enc)
                    .into_iter()
                    .enumerate()
                    .filter(|(_, v)| *v != 0.0)
                    .collect()
            })
            .collect();
        let n = examples.len() as f64;
        let mut w = vec![0.0; features * num_classes];
        let mut grad = vec![0.0; features * num_classes];
        for _ in 0..FIT_ITERATIONS {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &(_, label)) in rows.iter().zip(examples) {
                let mut s = vec![0.0; num_classes];
                for &(f, x) in row {
                    for (c, sc) in s.iter_mut().enumerate() {
                        *sc += x * w[f * num_classes + c];
                    }
                }
                let p = softmax_rows(&s, num_classes);
                for &(f, x) in row {
                    for c in 0..num_classes {
                        let target = if c == label { 1.0 } else { 0.0 };
                        grad[f * num_classes + c] += x * (p[c] - target) / n;
                    }
                }
            }
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv -= FIT_STEP * (g + FIT_L2 * *wv);
            }
        }
        oracle.weights = Tensor::new(vec![features, num_classes], w)?;
        let gap: f64 = examples
            .iter()
            .map(|(enc, _)| {
                let mut s = oracle.scores(enc);
                s.sort_by(|a, b| b.total_cmp(a));
                s[0] - s[1]
            })
            .sum::<f64>()
            / examples.len() as f64;
        if gap > 0.0 {
            let factor = margin / gap;
            for v in oracle.weights.data_mut() {
                *v *= factor;
            }
        }
        // Hidden pre-activations: a random mix of the class scores plus a
        // smaller random view of the bag, so class scores are close to a
        // linear read-out of the hidden state.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D49_5845);
        let mix: Vec<f64> = (0..num_classes * hidden)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let w = oracle.weights.data();
        let mut proj = oracle
            .projector
            .data()
            .iter()
            .map(|r| r * HIDDEN_BAG_SCALE)
            .collect::<Vec<f64>>();
        for f in 0..features {
            for h in 0..hidden {
                let s: f64 = (0..num_classes)
                    .map(|c| w[f * num_classes + c] * mix[c * hidden + h])
                    .sum();
                proj[f * hidden + h] += s / margin;
            }
        }
        oracle.projector = Tensor::new(vec![features, hidden], proj)?;
        Ok(oracle)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if tau.is_nan() || tau <= 0.0 || !tau.is_finite() {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        self.tau = tau;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.weights.last_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.projector.last_dim()
    }

    /// L2-normalized hashed counts of the valid token ids.
    pub fn featurize(&self, encoded: &Encoded) -> Vec<f64> {
        let mut f = vec![0.0; self.features];
        for &id in encoded.valid_ids() {
            let bucket = mix64(id as u64 ^ mix64(self.seed)) % self.features as u64;
            f[bucket as usize] += 1.0;
        }
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut f {
                *v /= norm;
            }
        }
        f
    }

    fn project_with(&self, feats: &[f64], m: &Tensor) -> Vec<f64> {
        let cols = m.last_dim();
        let mut out = vec![0.0; cols];
        for (f, &x) in feats.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(m.row(f)) {
                *o += x * w;
            }
        }
        out
    }

    /// Untempered class scores.
    pub fn scores(&self, encoded: &Encoded) -> Vec<f64> {
        self.project_with(&self.featurize(encoded), &self.weights)
    }

    pub fn predict(&self, id: impl Into<String>, text: impl Into<String>, encoded: &Encoded) -> TeacherRecord {
        let feats = self.featurize(encoded);
        let scaled: Vec<f64> = self
            .project_with(&feats, &self.weights)
            .iter()
            .map(|s| s / self.tau)
            .collect();
        let probs = softmax_rows(&scaled, scaled.len());
        let hidden = self
            .project_with(&feats, &self.projector)
            .iter()
            .map(|v| v.tanh())
            .collect();
        TeacherRecord::from_probs(id, text, probs, hidden)
    }
}

fn write_floats(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // 17 significant digits.
        write!(out, "{v:.16e}").expect("write to string");
    }
    out.push(']');
}

/// One artifact line (without trailing newline).
pub fn record_to_line(r: &TeacherRecord) -> String {
    let mut line = String::with_capacity(64 + 24 * (r.probs.len() * 2 + r.hidden.len()));
    line.push_str("{\"id\":");
    line.push_str(&serde_json::to_string(&r.id).expect("string serializes"));
    line.push_str(",\"text\":");
    line.push_str(&serde_json::to_string(&r.text).expect("string serializes"));
    line.push_str(",\"probs\":");
    write_floats(&mut line, &r.probs);
    line.push_str(",\"logits\":");
    write_floats(&mut line, &r.logits);
    line.push_str(",\"hidden\":");
    write_floats(&mut line, &r.hidden);
    write!(line, ",\"hard_label\":{}}}", r.hard_label).expect("write to string");
    line
}

pub fn write_records<W: Write>(mut w: W, records: &[TeacherRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", record_to_line(r))?;
    }
    Ok(())
}

pub fn export_records(records: &[TeacherRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_records(&mut w, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse and validate artifact lines. All records must share the class
/// count and hidden width of the first.
pub fn read_records<R: BufRead>(reader: R, path: &Path) -> Result<Vec<TeacherRecord>> {
    let mut records: Vec<TeacherRecord> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: TeacherRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        rec.validate().map_err(|e| malformed(e.to_string()))?;
        if let Some(first) = records.first() {
            if rec.probs.len() != first.probs.len() {
                return Err(malformed(format!(
                    "{} classes, expected {}",
                    rec.probs.len(),
                    first.probs.len()
                )));
            }
            if rec.hidden.len() != first.hidden.len() {
                return Err(malformed(format!(
                    "hidden width {}, expected {}",
                    rec.hidden.len(),
                    first.hidden.len()
                )));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn import_records(path: impl AsRef<Path>) -> Result<Vec<TeacherRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn enc(ids: &[usize]) -> Encoded {
        Encoded {
            ids: ids.to_vec(),
            length: ids.len(),
            max_len: ids.len(),
        }
    }

    #[test]
    fn logit_examples() {
        assert_eq!(logit_transform(&[0.5], 1e-7), vec![0.0]);
        assert!((logit_transform(&[0.9], 1e-7)[0] - 2.19722).abs() < 1e-5);
        assert!((logit_transform(&[1.0], 1e-7)[0] - 16.1181).abs() < 1e-3);
        assert!(logit_transform(&[0.0], 1e-7)[0] < -16.0);
    }

    #[test]
    fn hard_label_examples() {
        assert_eq!(hard_label(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(hard_label(&[0.5, 0.5]), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let c = rng.gen_range(2..10);
            let v: Vec<f64> = (0..c).map(|_| rng.gen_range(0..4) as f64).collect();
            let mut best = 0;
            for i in 1..c {
                if v[i] > v[best] {
                    best = i;
                }
            }
            assert_eq!(hard_label(&v), best);
        }
    }

    #[test]
    fn oracle_temperature_limits() {
        let o = OracleTeacher::random(32, 4, 8, 1e-6, 3).unwrap();
        let r = o.predict("a", "", &enc(&[2, 9, 14, 3]));
        assert!(r.probs.iter().cloned().fold(0.0, f64::max) > 0.999);
        let mut o = o;
        o.set_tau(1e6).unwrap();
        let r = o.predict("a", "", &enc(&[2, 9, 14, 3]));
        assert!(r.probs.iter().all(|p| (p - 0.25).abs() < 1e-3));
        assert!(o.set_tau(0.0).is_err());
    }

    #[test]
    fn oracle_is_deterministic() {
        let a = OracleTeacher::random(16, 3, 5, 1.0, 8).unwrap();
        let b = OracleTeacher::random(16, 3, 5, 1.0, 8).unwrap();
        let e = enc(&[2, 4, 4, 7, 3]);
        assert_eq!(a.predict("x", "t", &e), b.predict("x", "t", &e));
        let r = a.predict("x", "t", &e);
        r.validate().unwrap();
        assert_eq!(r.hidden.len(), 5);
    }

    #[test]
    fn oracle_confidence_is_monotone_in_tau() {
        let mut o = OracleTeacher::random(64, 5, 4, 1.0, 1).unwrap();
        let e = enc(&[2, 10, 11, 12, 3]);
        let mut last = f64::INFINITY;
        for tau in [0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0] {
            o.set_tau(tau).unwrap();
            let m = o.predict("", "", &e).probs.iter().cloned().fold(0.0, f64::max);
            assert!(m <= last + 1e-15);
            last = m;
        }
    }

    #[test]
    fn fitted_oracle_separates_classes() {
        let a = enc(&[2, 10, 11, 3]);
        let b = enc(&[2, 20, 21, 3]);
        let ex = vec![(&a, 0), (&b, 1)];
        let o = OracleTeacher::fit(&ex, 64, 2, 4, 1.0, 4.0, 0).unwrap();
        assert_eq!(o.predict("", "", &a).hard_label, 0);
        assert_eq!(o.predict("", "", &b).hard_label, 1);
        let s = o.scores(&a);
        assert!(((s[0] - s[1]) - 4.0).abs() < 1e-9);
    }

    fn random_record(rng: &mut ChaCha8Rng, i: usize) -> TeacherRecord {
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let probs = softmax_rows(&raw, 4);
        let hidden = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TeacherRecord::from_probs(format!("u{i}"), format!("text \"{i}\"\n"), probs, hidden)
    }

    #[test]
    fn export_import_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let records: Vec<_> = (0..100).map(|i| random_record(&mut rng, i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        export_records(&records, &path).unwrap();
        let back = import_records(&path).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in records.iter().zip(&back) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.probs), bits(&b.probs));
            assert_eq!(bits(&a.logits), bits(&b.logits));
            assert_eq!(bits(&a.hidden), bits(&b.hidden));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn import_rejects_bad_records() {
        let path = Path::new("mem");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let good = random_record(&mut rng, 0);

        let mut short = good.clone();
        short.probs = vec![0.5, 0.2, 0.05, 0.05];
        short.logits = logit_transform(&short.probs, DEFAULT_LOGIT_EPS);
        let err = read_records(record_to_line(&short).as_bytes(), path).unwrap_err();
        assert!(err.to_string().contains("sum"), "{err}");

        let mut narrow = random_record(&mut rng, 1);
        narrow.hidden.pop();
        let text = format!("{}\n{}\n", record_to_line(&good), record_to_line(&narrow));
        let err = read_records(text.as_bytes(), path).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }), "{err}");

        let err = read_records("{not json}\n".as_bytes(), path).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 1, .. }));

        let mut wrong_label = good.clone();
        wrong_label.hard_label = (good.hard_label + 1) % 4;
        assert!(read_records(record_to_line(&wrong_label).as_bytes(), path).is_err());
    }

    proptest! {
        #[test]
        fn logit_round_trips_through_sigmoid(p in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let eps = DEFAULT_LOGIT_EPS;
            let back = inverse_logit(&logit_transform(&p, eps));
            for (orig, b) in p.iter().zip(back) {
                prop_assert!((orig.clamp(eps, 1.0 - eps) - b).abs() < 1e-9);
            }
        }

        #[test]
        fn logits_preserve_argmax(raw in proptest::collection::vec(-20.0f64..20.0, 2..12)) {
            let probs = softmax_rows(&raw, raw.len());
            let r = TeacherRecord::from_probs("x", "", probs.clone(), vec![0.0]);
            prop_assert_eq!(argmax(&r.logits), r.hard_label);
            prop_assert_eq!(r.hard_label, argmax(&probs));
        }
    }
}
