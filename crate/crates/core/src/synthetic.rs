//! Seeded token-pattern classification task for desk-scale experiments.
//!
//! Every class owns a set of signature words. A text mixes one or more
//! signatures of its own class with noise words shared by all classes and,
//! sometimes, one signature borrowed from another class. Some noise words
//! carry an `s` suffix that only the wordpiece vocabulary can split, and a
//! few are out of vocabulary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::LabeledText;
use crate::tokenizer::{Vocab, CLS, PAD, SEP, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub signatures_per_class: usize,
    pub noise_words: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Own-class signatures per text, inclusive range.
    pub min_signatures: usize,
    pub max_signatures: usize,
    /// Probability that a text also carries one foreign signature.
    pub confusion_rate: f64,
    /// Probability that a noise word is written with an `s` suffix.
    pub suffix_rate: f64,
    /// Probability that a noise word is replaced by an unknown word.
    pub unknown_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            signatures_per_class: 40,
            noise_words: 120,
            min_words: 6,
            max_words: 12,
            min_signatures: 2,
            max_signatures: 3,
            confusion_rate: 0.3,
            suffix_rate: 0.1,
            unknown_rate: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("synthetic task needs at least 2 classes"));
        }
        if self.signatures_per_class == 0 || self.noise_words == 0 {
            return Err(Error::contract("synthetic task needs signature and noise words"));
        }
        if self.min_signatures == 0 || self.min_signatures > self.max_signatures {
            return Err(Error::contract(
                "signature range must be non-empty and start at 1 or more",
            ));
        }
        if self.min_words > self.max_words || self.max_signatures + 1 > self.min_words {
            return Err(Error::contract(
                "word range must hold every signature plus one noise word",
            ));
        }
        for p in [self.confusion_rate, self.suffix_rate, self.unknown_rate] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("rate {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn signature(&self, class: usize, j: usize) -> String {
        format!("c{class}w{j}")
    }

    fn noise(&self, j: usize) -> String {
        format!("n{j}")
    }

    /// Vocabulary covering every signature and noise word plus the suffix piece.
    pub fn vocab(&self) -> Result<Vocab> {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        for c in 0..self.num_classes {
            tokens.extend((0..self.signatures_per_class).map(|j| self.signature(c, j)));
        }
        tokens.extend((0..self.noise_words).map(|j| self.noise(j)));
        tokens.push("##s".to_string());
        Vocab::from_tokens(tokens)
    }

    fn text<R: Rng>(&self, label: usize, rng: &mut R) -> String {
        let len = rng.gen_range(self.min_words..=self.max_words);
        let own = rng.gen_range(self.min_signatures..=self.max_signatures);
        let mut words: Vec<String> = (0..own)
            .map(|_| self.signature(label, rng.gen_range(0..self.signatures_per_class)))
            .collect();
        if rng.gen_bool(self.confusion_rate) {
            let other = (label + rng.gen_range(1..self.num_classes)) % self.num_classes;
            words.push(self.signature(other, rng.gen_range(0..self.signatures_per_class)));
        }
        while words.len() < len {
            let mut w = self.noise(rng.gen_range(0..self.noise_words));
            if rng.gen_bool(self.unknown_rate) {
                w = format!("zq{}x", rng.gen_range(0..1000));
            } else if rng.gen_bool(self.suffix_rate) {
                w.push('s');
            }
            words.push(w);
        }
        words.shuffle(rng);
        words.join(" ")
    }

    /// `n` class-balanced instances (labels cycle), ids prefixed with `prefix`.
    pub fn sample(&self, n: usize, prefix: &str, seed: u64) -> Result<Vec<LabeledText>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|i| {
                let label = i % self.num_classes;
                LabeledText {
                    id: format!("{prefix}{i}"),
                    text: self.text(label, &mut rng),
                    label,
                }
            })
            .collect())
    }
}

/// A generated pool and an independent test set over a shared vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    pub vocab: Vocab,
    pub pool: Vec<LabeledText>,
    pub test: Vec<LabeledText>,
}

pub fn generate(spec: &SyntheticSpec, pool_size: usize, test_size: usize, seed: u64) -> Result<SyntheticTask> {
    Ok(SyntheticTask {
        spec: spec.clone(),
        vocab: spec.vocab()?,
        pool: spec.sample(pool_size, "p", seed)?,
        test: spec.sample(test_size, "t", seed ^ 0x5EED_7E57)?,
    })
}
