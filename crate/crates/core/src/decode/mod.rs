//! Inference and evaluation: greedy and beam decoding over any
//! [`StepScorer`], corpus BLEU and token accuracy.

mod metrics;
mod scorer;
mod search;

pub use metrics::{bleu, token_accuracy, token_hits};
pub use scorer::{log_softmax, ModelScorer};
pub use search::{argmax, beam_search, greedy, BeamConfig, Hypothesis, StepScorer};
