use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::bai::ScheduleShape;
use crate::data::{generate, BatchSize, Dataset, TaskKind, TaskSpec};
use crate::model::{Arch, ModelConfig};
use crate::nn::ParamStore;
use crate::{Error, Tensor};

fn scalar_store(name: &str, v: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
    p
}

#[test]
fn adam_three_step_trace() {
    // Hand arithmetic with β₁ = 0.9, β₂ = 0.98, ε = 1e-9, lr = 0.1, p₀ = 1:
    //   t=1, g=0.5:  m=0.05,   v=0.005,    m̂=0.5,       v̂=0.25      → p=0.9 − 2e-10
    //   t=2, g=−0.2: m=0.025,  v=0.0057,   m̂=0.025/0.19, v̂=0.0057/0.0396
    //   t=3, g=0.1:  m=0.0325, v=0.005786, m̂=0.0325/0.271, v̂=0.005786/0.058808
    let want = [0.9000000001999999, 0.8653186040987564, 0.8270851919072676];
    let want_m = [0.05, 0.025, 0.0325];
    let want_v = [0.005, 0.0057, 0.005786];
    let mut p = scalar_store("w", 1.0);
    let mut adam = Adam::new(AdamConfig::default(), &p);
    for (i, g) in [0.5, -0.2, 0.1].into_iter().enumerate() {
        adam.update(&mut p, &scalar_store("w", g), 0.1).unwrap();
        let got = p.get("w").unwrap().item();
        assert!((got - want[i]).abs() < 1e-14, "step {i}: {got}");
        assert!((adam.m.get("w").unwrap().item() - want_m[i]).abs() < 1e-15);
        assert!((adam.v.get("w").unwrap().item() - want_v[i]).abs() < 1e-15);
    }
    assert_eq!(adam.step, 3);
}

#[test]
fn adam_zero_gradient() {
    let mut p = scalar_store("w", 0.7);
    let mut adam = Adam::new(AdamConfig::default(), &p);
    adam.update(&mut p, &scalar_store("w", 0.0), 0.1).unwrap();
    assert_eq!(p.get("w").unwrap().item(), 0.7);
    adam.update(&mut p, &scalar_store("w", 0.3), 0.1).unwrap();
    let (m, v) = (adam.m.get("w").unwrap().item(), adam.v.get("w").unwrap().item());
    adam.update(&mut p, &scalar_store("w", 0.0), 0.1).unwrap();
    assert_eq!(adam.m.get("w").unwrap().item(), 0.9 * m);
    assert_eq!(adam.v.get("w").unwrap().item(), 0.98 * v);
}

#[test]
fn adam_first_step_moves_by_lr_against_the_gradient_sign() {
    for g in [3.0, -0.02, 1e-3] {
        let mut p = scalar_store("w", 0.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.update(&mut p, &scalar_store("w", g), 0.01).unwrap();
        let got = p.get("w").unwrap().item();
        assert!((got + 0.01 * g / (g.abs() + 1e-9)).abs() < 1e-15);
    }
}

#[test]
fn adam_rejects_nan_with_the_parameter_path() {
    let mut p = scalar_store("enc.0.ff.w1.weight", 1.0);
    let mut adam = Adam::new(AdamConfig::default(), &p);
    let err = adam.update(&mut p, &scalar_store("enc.0.ff.w1.weight", f64::NAN), 0.1).unwrap_err();
    assert!(matches!(&err, Error::Numeric(msg) if msg.contains("enc.0.ff.w1.weight")));
    assert_eq!(p.get("enc.0.ff.w1.weight").unwrap().item(), 1.0);
    assert_eq!(adam.step, 0);
}

#[test]
fn noam_shape() {
    let (h, w) = (512, 4000);
    let peak = noam_lr(w, h, w);
    assert!((peak - 1.0 / (512f64.sqrt() * 4000f64.sqrt())).abs() < 1e-18);
    assert!((noam_lr(1, h, w) - 512f64.powf(-0.5) * 4000f64.powf(-1.5)).abs() < 1e-18);
    for s in 1..w {
        assert!(noam_lr(s + 1, h, w) > noam_lr(s, h, w));
    }
    for s in w..3 * w {
        assert!(noam_lr(s + 1, h, w) < noam_lr(s, h, w));
    }
    let decay = LrSchedule::StepDecay {
        base: 1e-3,
        factor: 0.8,
        every: 2,
    };
    assert_eq!(decay.rate(1, 1), 1e-3);
    assert!((decay.rate(1, 5) - 1e-3 * 0.64).abs() < 1e-18);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = ParamStore::<f64>::new();
    g.insert("a", Tensor::from_f64(&[2], &[3.0, 0.0]).unwrap()).unwrap();
    g.insert("b", Tensor::from_f64(&[1], &[4.0]).unwrap()).unwrap();
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    assert_eq!(g.get("b").unwrap().data(), &[0.8]);
    assert_eq!(clip_global_norm(&mut g, 10.0), global_norm(&g));
}

fn tiny_task() -> Dataset {
    generate(&TaskSpec {
        kind: TaskKind::Copy,
        vocab_size: 12,
        min_len: 2,
        max_len: 5,
        train_count: 160,
        valid_count: 20,
        seed: 3,
        path: None,
    })
    .unwrap()
}

fn tiny_config(arch: Arch) -> TrainConfig {
    let model = ModelConfig {
        arch,
        layers: 1,
        hidden: 16,
        ff_size: 32,
        heads: 2,
        vocab: 12,
        expansion_groups: vec![2, 4],
        max_len: 16,
        dropout: 0.1,
        scale_embeddings: true,
        tie_embeddings: false,
    };
    TrainConfig {
        epochs: 3,
        batch_size: BatchSize::Sequences(16),
        lr: LrSchedule::Fixed { value: 3e-3 },
        lambda: ScheduleShape::Logistic {
            eta: 1e-3,
            gamma: 0.5,
            phi: 1.0,
        },
        bleu_samples: 5,
        ..TrainConfig::new(model)
    }
}

fn run(cfg: TrainConfig, data: &Dataset) -> (Vec<MetricRecord>, Trainer<f32>) {
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let mut all = Vec::new();
    while !t.finished() {
        all.extend(t.run_epoch(&data.train, &data.valid).unwrap());
    }
    (all, t)
}

fn epoch_mean_ce(records: &[MetricRecord], epoch: u64) -> f64 {
    let xs: Vec<f64> = records.iter().filter(|r| r.epoch == epoch).map(|r| r.ce).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn training_reduces_cross_entropy_for_every_arch() {
    let data = tiny_task();
    for arch in [Arch::Transformer, Arch::Expansion, Arch::DecoderOnly] {
        let (records, t) = run(tiny_config(arch), &data);
        assert_eq!(records.len(), 30);
        assert!(epoch_mean_ce(&records, 2) < epoch_mean_ce(&records, 0), "{arch:?}");
        let last = records.last().unwrap();
        assert!(last.valid_token_accuracy.is_some() && last.valid_bleu.is_some() && last.valid_beta.is_some());
        assert_eq!(t.iteration, 30);
        for r in &records {
            assert_eq!(r.total, (r.lambda.unwrap() as f32 * r.beta.unwrap() as f32 + r.ce as f32) as f64);
        }
    }
}

#[test]
fn logged_lambda_follows_the_schedule() {
    let data = tiny_task();
    let (records, t) = run(tiny_config(Arch::Transformer), &data);
    let sched = t.lambda_schedule().unwrap();
    assert_eq!(sched.iters_per_epoch, 10);
    for r in &records {
        assert_eq!(r.lambda, Some(sched.weight(r.iteration).unwrap()));
    }
}

#[test]
fn runs_are_deterministic() {
    let data = tiny_task();
    let (a, ta) = run(tiny_config(Arch::Expansion), &data);
    let (b, tb) = run(tiny_config(Arch::Expansion), &data);
    assert_eq!(a, b);
    assert_eq!(ta.params, tb.params);
    assert_eq!(ta.adam, tb.adam);
}

#[test]
fn zero_weight_matches_disabled_bai_bit_for_bit() {
    let data = tiny_task();
    let off = TrainConfig {
        bai_enabled: false,
        ..tiny_config(Arch::Transformer)
    };
    let zero = TrainConfig {
        lambda: ScheduleShape::Const { value: 0.0 },
        ..tiny_config(Arch::Transformer)
    };
    let (ra, ta) = run(off, &data);
    let (rb, tb) = run(zero, &data);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.ce.to_bits(), y.ce.to_bits());
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        assert_eq!(x.valid_token_accuracy, y.valid_token_accuracy);
    }
    for ((_, p), (_, q)) in ta.params.iter().zip(tb.params.iter()) {
        let pb: Vec<u32> = p.data().iter().map(|x| x.to_bits()).collect();
        let qb: Vec<u32> = q.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(pb, qb);
    }
}

#[test]
fn restored_trainer_continues_the_same_trajectory() {
    let data = tiny_task();
    let (full, _) = run(tiny_config(Arch::DecoderOnly), &data);
    let mut t = Trainer::<f32>::new(tiny_config(Arch::DecoderOnly)).unwrap();
    let mut resumed = t.run_epoch(&data.train, &data.valid).unwrap();
    let mut t2 = Trainer::restore(
        t.config.clone(),
        t.params.clone(),
        t.adam.clone(),
        t.iteration,
        t.epoch,
        t.iters_per_epoch,
    )
    .unwrap();
    drop(t);
    while !t2.finished() {
        resumed.extend(t2.run_epoch(&data.train, &data.valid).unwrap());
    }
    assert_eq!(full, resumed);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny_config(Arch::Transformer);
    c.epochs = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny_config(Arch::Transformer);
    c.lambda = ScheduleShape::Logistic {
        eta: 1e-3,
        gamma: 0.0,
        phi: 1.0,
    };
    assert!(matches!(Trainer::<f32>::new(c), Err(Error::Config(_))));
}
