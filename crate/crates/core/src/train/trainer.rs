use alloc::format;
use alloc::vec::Vec;

use super::lr::LrSchedule;
use super::optim::{clip_global_norm, Adam, AdamConfig};
use crate::autodiff::Graph;
use crate::bai::{self, LambdaSchedule, ScheduleShape};
use crate::data::{plan_batches, Batch, BatchPolicy, BatchSize, Example};
use crate::decode::{self, ModelScorer};
use crate::model::{ModelConfig, Seq2Seq, TargetOptions};
use crate::nn::{self, Dropout, ParamStore};
use crate::rng::{self, streams};
use crate::{Error, Real, Result};

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Shape of `Λ`; the steps per epoch come from the first epoch's plan.
    pub lambda: ScheduleShape,
    pub bai_enabled: bool,
    pub target: TargetOptions,
    pub epochs: u64,
    pub batch_size: BatchSize,
    pub batch_policy: BatchPolicy,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Validation examples decoded greedily for BLEU at the end of each epoch.
    pub bleu_samples: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for `model`.
    pub fn new(model: ModelConfig) -> Self {
        let hidden = model.hidden;
        TrainConfig {
            model,
            lambda: ScheduleShape::Logistic {
                eta: bai::EQ5_ETA,
                gamma: bai::EQ5_GAMMA,
                phi: bai::EQ5_PHI,
            },
            bai_enabled: true,
            target: TargetOptions::default(),
            epochs: 10,
            batch_size: BatchSize::Sequences(64),
            batch_policy: BatchPolicy::Random,
            lr: LrSchedule::Noam {
                hidden,
                warmup: 4000,
                factor: 1.0,
            },
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            seed: 1,
            bleu_samples: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        LambdaSchedule::new(self.lambda, 1)?;
        self.lr.validate()?;
        self.adam.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        match self.batch_size {
            BatchSize::Sequences(0) | BatchSize::Tokens(0) => {
                return Err(Error::Config("batch size must be at least 1".into()))
            }
            _ => {}
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One optimizer step, plus validation results on the last step of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: u64,
    /// Zero-based optimizer step.
    pub iteration: u64,
    pub ce: f64,
    /// Reconstruction error; `None` when BAI is disabled.
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub valid_token_accuracy: Option<f64>,
    pub valid_bleu: Option<f64>,
    pub valid_ce: Option<f64>,
    /// Reconstruction error on the validation set, measured whether or not
    /// BAI is trained.
    pub valid_beta: Option<f64>,
    /// Filled in by callers that time the run; never by the trainer, so the
    /// record stream stays a pure function of the inputs.
    pub wall_clock_ms: Option<u64>,
}

/// Validation summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub ce: f64,
    pub beta: f64,
    pub bleu: Option<f64>,
}

/// Owner of the parameters and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub model: Seq2Seq,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    /// Optimizer steps taken.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// `T` of the weight schedule, fixed by the first epoch.
    pub iters_per_epoch: Option<usize>,
}

struct StepLoss<T> {
    ce: T,
    beta: Option<T>,
    total: T,
    grads: ParamStore<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Seq2Seq::new(config.model.clone())?;
        let params = model.init_params(config.seed)?;
        let adam = Adam::new(config.adam, &params);
        Ok(Trainer {
            config,
            model,
            params,
            adam,
            iteration: 0,
            epoch: 0,
            iters_per_epoch: None,
        })
    }

    /// Rebuilds a trainer from saved state.
    pub fn restore(
        config: TrainConfig,
        params: ParamStore<T>,
        adam: Adam<T>,
        iteration: u64,
        epoch: u64,
        iters_per_epoch: Option<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Seq2Seq::new(config.model.clone())?;
        let expected = model.init_params::<T>(config.seed)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::shape("restore", t.shape(), p.shape())),
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Config("checkpoint has parameters the model does not use".into()));
        }
        Ok(Trainer {
            config,
            model,
            params,
            adam,
            iteration,
            epoch,
            iters_per_epoch,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// The `Λ` schedule, once the steps per epoch are known.
    pub fn lambda_schedule(&self) -> Option<LambdaSchedule> {
        self.iters_per_epoch.map(|t| LambdaSchedule {
            shape: self.config.lambda,
            iters_per_epoch: t,
        })
    }

    fn loss_and_grads(&self, batch: &Batch, lambda: Option<T>) -> Result<StepLoss<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let mut drop = if self.config.model.dropout > 0.0 {
            Dropout::train(
                self.config.model.dropout,
                rng::stream(self.config.seed, streams::DROPOUT_BASE + self.iteration),
            )
        } else {
            Dropout::eval()
        };
        let out = self.model.forward(&mut g, &bound, batch, self.config.target, &mut drop)?;
        let (loss, ce, beta) = match lambda {
            Some(lambda) => {
                let route = bai::select_pivots(self.config.model.arch, &out.pivots)?;
                let r = bai::reconstruct(&mut g, &route, out.targets, &batch.tgt_lengths)?;
                let rep = bai::joint_loss(&mut g, out.logits, &batch.tgt_out, &batch.tgt_lengths, r, out.targets, lambda)?;
                (rep.total, rep.ce_value, Some(rep.beta_value))
            }
            None => {
                let ce = nn::cross_entropy(&mut g, out.logits, &batch.tgt_out, &batch.tgt_lengths)?;
                (ce, g.value(ce).item(), None)
            }
        };
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {total} at iteration {} (ce {ce})",
                self.iteration
            )));
        }
        g.backward(loss)?;
        Ok(StepLoss {
            ce,
            beta,
            total,
            grads: self.params.gradients(&g, &bound),
        })
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<MetricRecord> {
        let lambda = match (self.config.bai_enabled, self.lambda_schedule()) {
            (false, _) => None,
            (true, Some(s)) => Some(s.weight(self.iteration)?),
            (true, None) => return Err(Error::Contract("steps per epoch unknown before the first epoch".into())),
        };
        let mut out = self.loss_and_grads(batch, lambda.map(T::of))?;
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut out.grads, c),
            None => super::optim::global_norm(&out.grads),
        };
        let lr = self.config.lr.rate(self.iteration + 1, self.epoch);
        self.adam.update(&mut self.params, &out.grads, lr)?;
        let record = MetricRecord {
            epoch: self.epoch,
            iteration: self.iteration,
            ce: out.ce.f64(),
            beta: out.beta.map(Real::f64),
            lambda,
            total: out.total.f64(),
            lr,
            grad_norm,
            valid_token_accuracy: None,
            valid_bleu: None,
            valid_ce: None,
            valid_beta: None,
            wall_clock_ms: None,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Trains one epoch and evaluates on `valid` (when non-empty); the last
    /// record carries the validation results.
    pub fn run_epoch(&mut self, train: &[Example], valid: &[Example]) -> Result<Vec<MetricRecord>> {
        if self.finished() {
            return Err(Error::Contract(format!("all {} epochs already ran", self.config.epochs)));
        }
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let plan = plan_batches(train, self.config.batch_size, self.config.batch_policy, self.config.seed, self.epoch);
        if self.iters_per_epoch.is_none() {
            self.iters_per_epoch = Some(plan.len());
        }
        let mut records = Vec::with_capacity(plan.len());
        for idx in plan {
            let refs: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_examples(&refs)?;
            records.push(self.step(&batch)?);
        }
        if !valid.is_empty() {
            let rep = self.evaluate(valid, self.config.bleu_samples)?;
            let last = records.last_mut().expect("non-empty plan");
            last.valid_token_accuracy = Some(rep.token_accuracy);
            last.valid_ce = Some(rep.ce);
            last.valid_beta = Some(rep.beta);
            last.valid_bleu = rep.bleu;
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Teacher-forced accuracy, cross-entropy and reconstruction error on
    /// `examples` (dropout off), plus greedy BLEU on the first `bleu_samples`.
    pub fn evaluate(&self, examples: &[Example], bleu_samples: usize) -> Result<EvalReport> {
        evaluate(&self.model, &self.params, self.config.target, examples, bleu_samples)
    }
}

/// Fixed-order evaluation batches.
const EVAL_BATCH: usize = 64;

/// See [`Trainer::evaluate`].
pub fn evaluate<T: Real>(
    model: &Seq2Seq,
    params: &ParamStore<T>,
    target: TargetOptions,
    examples: &[Example],
    bleu_samples: usize,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let (mut hits, mut count) = (0usize, 0usize);
    let (mut ce_sum, mut beta_sum) = (0.0, 0.0);
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let out = model.forward(&mut g, &bound, &batch, target, &mut Dropout::eval())?;
        let (h, c) = decode::token_hits(g.value(out.logits), &batch.tgt_out, &batch.tgt_lengths)?;
        hits += h;
        count += c;
        let ce = nn::cross_entropy(&mut g, out.logits, &batch.tgt_out, &batch.tgt_lengths)?;
        ce_sum += g.value(ce).item().f64() * c as f64;
        let route = bai::select_pivots(model.config().arch, &out.pivots)?;
        let r = bai::reconstruct(&mut g, &route, out.targets, &batch.tgt_lengths)?;
        let beta = bai::bai_mse(&mut g, r, out.targets, &batch.tgt_lengths)?;
        beta_sum += g.value(beta).item().f64() * chunk.len() as f64;
    }
    let bleu = if bleu_samples > 0 {
        let subset = &examples[..bleu_samples.min(examples.len())];
        let mut hyps = Vec::with_capacity(subset.len());
        for e in subset {
            let steps = model.max_decode_steps(e.src.len());
            hyps.push(decode::greedy(&mut ModelScorer::new(model, params, &e.src), steps)?.tokens);
        }
        let cands: Vec<&[u32]> = hyps.iter().map(Vec::as_slice).collect();
        let refs: Vec<&[u32]> = subset.iter().map(|e| e.tgt.as_slice()).collect();
        Some(decode::bleu(&cands, &refs, 4)?)
    } else {
        None
    };
    Ok(EvalReport {
        token_accuracy: hits as f64 / count.max(1) as f64,
        ce: ce_sum / count.max(1) as f64,
        beta: beta_sum / examples.len() as f64,
        bleu,
    })
}
