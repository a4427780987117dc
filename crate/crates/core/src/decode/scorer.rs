use alloc::vec::Vec;

use super::search::StepScorer;
use crate::autodiff::Graph;
use crate::data::{Batch, BOS};
use crate::model::{Seq2Seq, TargetOptions};
use crate::nn::{Dropout, ParamStore};
use crate::{Real, Result};

/// Scores next tokens by re-running the model on `bos ∥ prefix` for one
/// source sequence, with dropout off.
pub struct ModelScorer<'a, T: Real> {
    model: &'a Seq2Seq,
    params: &'a ParamStore<T>,
    src: &'a [u32],
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Seq2Seq, params: &'a ParamStore<T>, src: &'a [u32]) -> Self {
        ModelScorer { model, params, src }
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut tgt = Vec::with_capacity(prefix.len() + 1);
        tgt.push(BOS);
        tgt.extend_from_slice(prefix);
        let batch = Batch::for_decoding(self.src, &tgt)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let out = self
            .model
            .forward(&mut g, &bound, &batch, TargetOptions::default(), &mut Dropout::eval())?;
        let logits = g.value(out.logits);
        let v = self.model.config().vocab;
        let last = &logits.data()[logits.len() - v..];
        Ok(log_softmax(last))
    }
}

/// Log-softmax of one logit row, in `f64`.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| libm::exp(x.f64() - max)).sum();
    let lz = max + libm::log(z);
    row.iter().map(|x| x.f64() - lz).collect()
}
