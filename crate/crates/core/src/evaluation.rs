//! Corpus splits, accuracy, and the teacher prediction-variance diagnostic.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teacher::TeacherRecord;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledText {
    pub id: String,
    pub text: String,
}

/// How a corpus was carved out of its labeled pool.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub seed: Option<u64>,
    /// Labeled instances drawn per class.
    pub per_class: Vec<usize>,
    pub pool_size: usize,
}

/// Labeled set `D_l` and unlabeled transfer set `D_u`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub labeled: Vec<LabeledText>,
    pub unlabeled: Vec<UnlabeledText>,
    pub num_classes: usize,
    pub provenance: SplitProvenance,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::data("corpus needs at least 2 classes"));
        }
        if let Some(bad) = self.labeled.iter().find(|l| l.label >= self.num_classes) {
            return Err(Error::data(format!(
                "instance {} has label {} outside [0, {})",
                bad.id, bad.label, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn labeled_count_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for l in &self.labeled {
            counts[l.label] += 1;
        }
        counts
    }
}

fn group_by_class(pool: &[LabeledText], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, item) in pool.iter().enumerate() {
        if item.label >= num_classes {
            return Err(Error::data(format!(
                "instance {} has label {} outside [0, {num_classes})",
                item.id, item.label
            )));
        }
        by_class[item.label].push(i);
    }
    Ok(by_class)
}

/// Draw `k` instances per class (uniform, without replacement) into the
/// labeled set; everything else becomes unlabeled.
pub fn low_resource_split(pool: &[LabeledText], k: usize, num_classes: usize, seed: u64) -> Result<Corpus> {
    if num_classes < 2 {
        return Err(Error::contract("split needs at least 2 classes"));
    }
    let by_class = group_by_class(pool, num_classes)?;
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < k) {
        return Err(Error::data(format!(
            "class {c} has {} instances, {k} required",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; pool.len()];
    for members in &by_class {
        for &i in members.choose_multiple(&mut rng, k) {
            chosen[i] = true;
        }
    }
    let mut labeled = Vec::with_capacity(k * num_classes);
    let mut unlabeled = Vec::with_capacity(pool.len() - k * num_classes);
    for (item, &picked) in pool.iter().zip(&chosen) {
        if picked {
            labeled.push(item.clone());
        } else {
            unlabeled.push(UnlabeledText {
                id: item.id.clone(),
                text: item.text.clone(),
            });
        }
    }
    Ok(Corpus {
        labeled,
        unlabeled,
        num_classes,
        provenance: SplitProvenance {
            seed: Some(seed),
            per_class: vec![k; num_classes],
            pool_size: pool.len(),
        },
    })
}

/// Balanced labeled set whose total size equals `test_size`
/// (`test_size / C` per class); the rest of the pool is stripped of labels.
pub fn derive_split(pool: &[LabeledText], test_size: usize, num_classes: usize, seed: u64) -> Result<Corpus> {
    if num_classes < 2 {
        return Err(Error::contract("split needs at least 2 classes"));
    }
    low_resource_split(pool, test_size / num_classes, num_classes, seed)
}

/// Fraction of positions where `predictions` equals `gold`.
pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape {
            op: "accuracy",
            left: vec![predictions.len()],
            right: vec![gold.len()],
        });
    }
    if gold.is_empty() {
        return Err(Error::contract("accuracy over zero instances"));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Accuracy restricted to each gold class; `None` for absent classes.
pub fn per_class_accuracy(predictions: &[usize], gold: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        if g < num_classes {
            totals[g] += 1;
            hits[g] += usize::from(p == g);
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Population variance of one probability vector.
pub fn probability_variance(probs: &[f64]) -> f64 {
    let n = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / n;
    probs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n
}

/// Mean over instances of the per-instance population variance of the
/// teacher's class probabilities.
pub fn prediction_variance(records: &[TeacherRecord]) -> Result<f64> {
    let first = records
        .first()
        .ok_or_else(|| Error::contract("prediction variance over zero records"))?;
    let c = first.probs.len();
    let mut total = 0.0;
    for r in records {
        if r.probs.len() != c {
            return Err(Error::data(format!(
                "record {} has {} classes, expected {c}",
                r.id,
                r.probs.len()
            )));
        }
        total += probability_variance(&r.probs);
    }
    Ok(total / records.len() as f64)
}

/// Variance of a one-hot vector over `C` classes, `(C−1)/C²`.
pub fn max_variance(num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::contract("max variance needs at least 2 classes"));
    }
    let c = num_classes as f64;
    Ok((c - 1.0) / (c * c))
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    provenance: SplitProvenance,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    text: String,
    label: Option<usize>,
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &Corpus) -> std::io::Result<()> {
    let header = CorpusHeader {
        provenance: corpus.provenance.clone(),
        num_classes: corpus.num_classes,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for l in &corpus.labeled {
        let line = CorpusLine {
            id: l.id.clone(),
            text: l.text.clone(),
            label: Some(l.label),
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("line serializes"))?;
    }
    for u in &corpus.unlabeled {
        let line = CorpusLine {
            id: u.id.clone(),
            text: u.text.clone(),
            label: None,
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("line serializes"))?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(&mut w, corpus).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a corpus file. The header line is optional; without it the class
/// count is inferred as `max label + 1` (at least 2).
pub fn read_corpus<R: BufRead>(reader: R, path: &Path) -> Result<Corpus> {
    let mut header: Option<CorpusHeader> = None;
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if value.get("provenance").is_some() {
            if header.is_some() || !labeled.is_empty() || !unlabeled.is_empty() {
                return Err(malformed("header must be the first record".into()));
            }
            header = Some(serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?);
            continue;
        }
        let rec: CorpusLine = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        match rec.label {
            Some(label) => labeled.push(LabeledText {
                id: rec.id,
                text: rec.text,
                label,
            }),
            None => unlabeled.push(UnlabeledText {
                id: rec.id,
                text: rec.text,
            }),
        }
    }
    let (num_classes, provenance) = match header {
        Some(h) => (h.num_classes, h.provenance),
        None => (
            labeled.iter().map(|l| l.label + 1).max().unwrap_or(2).max(2),
            SplitProvenance::default(),
        ),
    };
    let corpus = Corpus {
        labeled,
        unlabeled,
        num_classes,
        provenance,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), path)
}
