//! Knowledge distillation from an exported teacher into a BiLSTM student.
//!
//! The teacher's class probabilities, logits and hidden states are read
//! from a JSONL artifact; the student learns from them with cross-entropy,
//! logit regression and representation losses under one of three regimens.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod student;
pub mod synthetic;
pub mod teacher;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use losses::LossWeights;
pub use student::{StudentConfig, StudentParams};
pub use tensor::Tensor;
pub use training::{Regimen, TrainConfig, TrainOutcome, TrainingSet};
