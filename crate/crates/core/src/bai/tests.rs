use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use super::*;
use crate::autodiff::Graph;
use crate::data::TokenMatrix;
use crate::model::{Arch, ExpansionPivot, PivotSet};
use crate::{Error, Tensor};

fn tf(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

/// Triple-loop attention equalization in double-double arithmetic.
#[allow(clippy::too_many_arguments)]
fn oracle_attention(e: &[f64], d: &[f64], b: usize, n: usize, m: usize, h: usize, src: &[usize], tgt: &[usize]) -> Vec<f64> {
    let sqrt_h = tf(h as f64).sqrt();
    let mut out = vec![0.0; b * m * h];
    for bi in 0..b {
        for t in 0..tgt[bi].min(m) {
            let scores: Vec<TwoFloat> = (0..src[bi])
                .map(|j| {
                    let mut s = tf(0.0);
                    for k in 0..h {
                        s += tf(d[(bi * m + t) * h + k]) * tf(e[(bi * n + j) * h + k]);
                    }
                    s / sqrt_h
                })
                .collect();
            let max = scores.iter().fold(scores[0], |a, &s| if s > a { s } else { a });
            let w: Vec<TwoFloat> = scores.iter().map(|&s| (s - max).exp()).collect();
            let z = w.iter().fold(tf(0.0), |a, &x| a + x);
            for k in 0..h {
                let mut r = tf(0.0);
                for j in 0..src[bi] {
                    r += w[j] / z * tf(e[(bi * n + j) * h + k]);
                }
                out[(bi * m + t) * h + k] = r.into();
            }
        }
    }
    out
}

/// Triple-loop backward-expansion equalization in double-double arithmetic.
fn oracle_expansion(groups: &[(usize, Vec<f64>, Vec<f64>)], d: &[f64], b: usize, m: usize, h: usize, tgt: &[usize]) -> Vec<f64> {
    let sqrt_h = tf(h as f64).sqrt();
    let eps = tf(PHI_EPS);
    let mut out = vec![0.0; b * m * h];
    for bi in 0..b {
        for t in 0..tgt[bi].min(m) {
            let mut r = vec![tf(0.0); h];
            for (g, a, bb) in groups {
                let g = *g;
                let mut pos = Vec::with_capacity(g);
                let mut neg = Vec::with_capacity(g);
                for j in 0..g {
                    let mut s = tf(0.0);
                    for k in 0..h {
                        let c = (tf(a[(bi * g + j) * h + k]) + tf(bb[(bi * g + j) * h + k])) / tf(2.0);
                        s += tf(d[(bi * m + t) * h + k]) * c;
                    }
                    let s = s / sqrt_h;
                    pos.push(if s > tf(0.0) { s } else { tf(0.0) });
                    neg.push(if s < tf(0.0) { -s } else { tf(0.0) });
                }
                let zp = pos.iter().fold(tf(0.0), |acc, &x| acc + x) + eps;
                let zn = neg.iter().fold(tf(0.0), |acc, &x| acc + x) + eps;
                for j in 0..g {
                    for k in 0..h {
                        r[k] += pos[j] / zp * tf(a[(bi * g + j) * h + k]) + neg[j] / zn * tf(bb[(bi * g + j) * h + k]);
                    }
                }
            }
            for k in 0..h {
                out[(bi * m + t) * h + k] = (r[k] / tf(2.0 * groups.len() as f64)).into();
            }
        }
    }
    out
}

fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_pivot_is_copied_to_every_row() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::from_f64(&[1, 1, 2], &[0.3, -1.5]).unwrap());
    let d = g.constant(Tensor::from_f64(&[1, 3, 2], &[1.0, 2.0, -4.0, 0.5, 9.0, 9.0]).unwrap());
    let r = equalize_transformer(&mut g, e, &[1], d, &[3]).unwrap();
    assert_eq!(g.value(r).data(), &[0.3, -1.5, 0.3, -1.5, 0.3, -1.5]);
}

#[test]
fn identical_pivots_reproduce_themselves() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::from_f64(&[1, 3, 2], &[0.25, 0.5, 0.25, 0.5, 0.25, 0.5]).unwrap());
    let d = g.constant(Tensor::from_f64(&[1, 2, 2], &[3.0, -1.0, 0.1, 7.0]).unwrap());
    let r = equalize_transformer(&mut g, e, &[3], d, &[2]).unwrap();
    for v in g.value(r).data().chunks(2) {
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15);
    }
}

#[test]
fn attention_equalizer_matches_hand_set_oracle() {
    let e = [1.0, 0.0, 0.0, 1.0, -1.0, 2.0];
    let d = [0.5, -0.5, 2.0, 1.0];
    let mut g = Graph::<f64>::new();
    let ev = g.constant(Tensor::from_f64(&[1, 3, 2], &e).unwrap());
    let dv = g.constant(Tensor::from_f64(&[1, 2, 2], &d).unwrap());
    let r = equalize_transformer(&mut g, ev, &[3], dv, &[2]).unwrap();
    let want = oracle_attention(&e, &d, 1, 3, 2, 2, &[3], &[2]);
    assert!(max_abs_diff(g.value(r).data(), &want) < 1e-10);
}

#[test]
fn equalizers_match_oracles_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let (b, n, m, h) = (rng.random_range(1..3), rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let src: Vec<usize> = (0..b).map(|_| rng.random_range(1..=n)).collect();
        let tgt: Vec<usize> = (0..b).map(|_| rng.random_range(0..=m)).collect();
        let e = random(&mut rng, b * n * h);
        let d = random(&mut rng, b * m * h);
        let mut g = Graph::<f64>::new();
        let ev = g.constant(Tensor::from_f64(&[b, n, h], &e).unwrap());
        let dv = g.constant(Tensor::from_f64(&[b, m, h], &d).unwrap());
        let r = equalize_transformer(&mut g, ev, &src, dv, &tgt).unwrap();
        assert!(max_abs_diff(g.value(r).data(), &oracle_attention(&e, &d, b, n, m, h, &src, &tgt)) < 1e-10);

        let count = rng.random_range(1..4);
        let groups: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..count)
            .map(|_| {
                let s = rng.random_range(1..9);
                (s, random(&mut rng, b * s * h), random(&mut rng, b * s * h))
            })
            .collect();
        let vars: Vec<_> = groups
            .iter()
            .map(|(s, a, bb)| {
                (
                    g.constant(Tensor::from_f64(&[b, *s, h], a).unwrap()),
                    g.constant(Tensor::from_f64(&[b, *s, h], bb).unwrap()),
                )
            })
            .collect();
        let r = equalize_expansion(&mut g, &vars, dv, &tgt).unwrap();
        assert_eq!(g.shape(r), &[b, m, h]);
        assert!(max_abs_diff(g.value(r).data(), &oracle_expansion(&groups, &d, b, m, h, &tgt)) < 1e-10);
    }
}

#[test]
fn padded_pivots_are_ignored_and_padded_rows_zeroed() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, 100.0]).unwrap());
    let d = g.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, 1.0]).unwrap());
    let r = equalize_transformer(&mut g, e, &[1], d, &[1]).unwrap();
    assert_eq!(g.value(r).data(), &[1.0, 0.0]);
}

#[test]
fn fully_masked_source_is_a_contract_error() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::zeros(&[1, 2, 2]));
    let d = g.constant(Tensor::zeros(&[1, 1, 2]));
    assert!(matches!(equalize_transformer(&mut g, e, &[0], d, &[1]), Err(Error::Contract(_))));
}

#[test]
fn expansion_routing_rows_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(&[1, 4, 3], &random(&mut rng, 12)).unwrap());
    let b = g.constant(Tensor::from_f64(&[1, 4, 3], &random(&mut rng, 12)).unwrap());
    let d = g.constant(Tensor::from_f64(&[1, 5, 3], &random(&mut rng, 15)).unwrap());
    let _ = expansion_recombine(&mut g, d, &[(a, b)]).unwrap();
    // The normalized routing weights are the two `normalize_rows` nodes.
    let mut checked = 0;
    for v in g.vars() {
        if g.op_name(v) != "normalize_rows" {
            continue;
        }
        for row in g.value(v).data().chunks(4) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&x| x > 0.0) {
                assert!((s - 1.0).abs() < 1e-8, "row sum {s}");
            } else {
                assert_eq!(s, 0.0);
            }
        }
        checked += 1;
    }
    assert_eq!(checked, 2);
}

#[test]
fn expansion_groups_must_share_hidden_size() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[1, 2, 3]));
    let b = g.constant(Tensor::zeros(&[1, 2, 4]));
    let d = g.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(matches!(equalize_expansion(&mut g, &[(a, b)], d, &[2]), Err(Error::Contract(_))));
}

#[test]
fn mse_hand_cases() {
    let mut g = Graph::<f64>::new();
    let r = g.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 2.0]).unwrap());
    let d = g.constant(Tensor::zeros(&[1, 1, 2]));
    let beta = bai_mse(&mut g, r, d, &[1]).unwrap();
    assert_eq!(g.value(beta).item(), 2.5);

    let same = bai_mse(&mut g, r, r, &[1]).unwrap();
    assert_eq!(g.value(same).item(), 0.0);

    // Doubling H with zero-filled extra dimensions halves the error.
    let r4 = g.constant(Tensor::from_f64(&[1, 1, 4], &[1.0, 2.0, 0.0, 0.0]).unwrap());
    let d4 = g.constant(Tensor::zeros(&[1, 1, 4]));
    let beta4 = bai_mse(&mut g, r4, d4, &[1]).unwrap();
    assert_eq!(g.value(beta4).item(), 1.25);
}

#[test]
fn mse_ignores_padding_and_averages_sequences() {
    let mut g = Graph::<f64>::new();
    // Sequence 0: rows (1) and padding (50); sequence 1: rows (2), (4).
    let r = g.constant(Tensor::from_f64(&[2, 2, 1], &[1.0, 50.0, 2.0, 4.0]).unwrap());
    let d = g.constant(Tensor::zeros(&[2, 2, 1]));
    let beta = bai_mse(&mut g, r, d, &[1, 2]).unwrap();
    assert!((g.value(beta).item() - (1.0 + 10.0) / 2.0).abs() < 1e-15);
    assert!(matches!(bai_mse(&mut g, r, d, &[0, 0]), Err(Error::Contract(_))));
}

fn loss_fixture(g: &mut Graph<f64>) -> (crate::autodiff::Var, TokenMatrix, crate::autodiff::Var, crate::autodiff::Var) {
    let logits = g.param(Tensor::from_f64(&[1, 2, 3], &[0.1, -0.3, 0.7, 1.2, 0.0, -0.5]).unwrap());
    let targets = TokenMatrix::from_rows(&[&[2, 0]]);
    let r = g.param(Tensor::from_f64(&[1, 2, 2], &[0.5, 0.1, -0.2, 0.3]).unwrap());
    let d = g.param(Tensor::from_f64(&[1, 2, 2], &[0.0, 1.0, 0.4, -0.1]).unwrap());
    (logits, targets, r, d)
}

#[test]
fn zero_weight_leaves_cross_entropy_untouched() {
    let mut g = Graph::<f64>::new();
    let (logits, targets, r, d) = loss_fixture(&mut g);
    let rep = joint_loss(&mut g, logits, &targets, &[2], r, d, 0.0).unwrap();
    assert_eq!(rep.total_value.to_bits(), rep.ce_value.to_bits());
    let rep = joint_loss(&mut g, logits, &targets, &[2], r, d, 0.3).unwrap();
    assert_eq!(rep.total_value, 0.3 * rep.beta_value + rep.ce_value);
    assert!(matches!(joint_loss(&mut g, logits, &targets, &[2], r, d, 1.5), Err(Error::Contract(_))));
    assert!(matches!(joint_loss(&mut g, logits, &targets, &[2], r, d, f64::NAN), Err(Error::Contract(_))));
}

#[test]
fn joint_gradient_matches_finite_differences() {
    let base = {
        let mut g = Graph::<f64>::new();
        let (logits, ..) = loss_fixture(&mut g);
        g.value(logits).clone()
    };
    let eval = |lg: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let (_, targets, r, d) = loss_fixture(&mut g);
        let logits = g.param(lg.clone());
        let rep = joint_loss(&mut g, logits, &targets, &[2], r, d, 0.7).unwrap();
        (g, logits, r, rep)
    };
    let (mut g, logits, r, rep) = eval(&base);
    g.backward(rep.total).unwrap();
    let analytic = g.grad(logits).unwrap().to_vec();
    let h = 1e-6;
    #[allow(clippy::needless_range_loop)]
    for i in 0..base.len() {
        let mut p = base.clone();
        p.data_mut()[i] += h;
        let mut m = base.clone();
        m.data_mut()[i] -= h;
        let num = (eval(&p).3.total_value - eval(&m).3.total_value) / (2.0 * h);
        assert!((num - analytic[i]).abs() < 1e-8, "{i}: {num} vs {}", analytic[i]);
    }
    // β = mean_t ‖r_t − d_t‖²/H, so ∂total/∂r = 0.7 · 2(r − d)/(M·H).
    let gr = g.grad(r).unwrap();
    let diffs = [0.5, -0.9, -0.6, 0.4];
    for (got, dd) in gr.iter().zip(diffs) {
        assert!((got - 0.7 * 2.0 * dd / 4.0).abs() < 1e-15);
    }
}

#[test]
fn logistic_schedule_values() {
    let s = LambdaSchedule::preset("eq5", 100).unwrap();
    assert!((s.weight(1500).unwrap() - 0.5005).abs() < 1e-15);
    // η + σ(−30)(1 − η), evaluated in double-double arithmetic.
    let sig = tf(1.0) / (tf(1.0) + tf(30.0).exp());
    let want: f64 = (tf(1e-3) + sig * (tf(1.0) - tf(1e-3))).into();
    let got = s.weight(0).unwrap();
    assert!(((got - want) / want).abs() < 1e-12, "{got:e} vs {want:e}");
    assert!((got - 1.00000000009348e-3).abs() < 1e-17);
    assert!((s.weight(1_000_000).unwrap() - 1.0).abs() < 1e-12);
    let mut prev = 0.0;
    for t in 0..4000 {
        let v = s.weight(t).unwrap();
        assert!(v >= prev && v > 1e-3 && v <= 1.0);
        prev = v;
    }
}

#[test]
fn non_positive_gamma_is_rejected() {
    for gamma in [0.0, -1.0, f64::NAN] {
        let shape = ScheduleShape::Logistic { eta: 1e-3, gamma, phi: 1.0 };
        assert!(matches!(LambdaSchedule::new(shape, 10), Err(Error::Config(_))));
    }
    assert!(LambdaSchedule::preset("l9", 10).is_err());
}

#[test]
fn preset_values() {
    let at = |name: &str, epochs: f64| LambdaSchedule::preset(name, 10).unwrap().weight((epochs * 10.0) as u64).unwrap();
    assert_eq!(at("l1", 3.0), 1e-3);
    assert_eq!(at("l2", 3.0), 1e-6);
    assert_eq!(at("l3", 3.0), 1.0);
    assert_eq!(at("l4", 0.0), 1e-6);
    assert!((at("l4", 15.0) - (1e-6 + (1.0 - 1e-6) * 0.5)).abs() < 1e-15);
    assert_eq!(at("l4", 45.0), 1.0);
    assert_eq!(at("l5", 0.0), 1.0);
    assert!((at("l5", 15.0) - ((1.0 - 1e-6) * 0.5 + 1e-6)).abs() < 1e-15);
    assert_eq!(at("l5", 45.0), 1e-6);
}

#[test]
fn pivots_route_by_architecture() {
    let mut g = Graph::<f64>::new();
    let states = g.constant(Tensor::zeros(&[1, 2, 2]));
    let enc = PivotSet::EncoderFinal { states, lengths: vec![2] };
    assert!(matches!(select_pivots(Arch::Transformer, &enc), Ok(PivotRoute::Attention { .. })));
    assert!(matches!(select_pivots(Arch::Expansion, &enc), Err(Error::Contract(_))));
    let prompt = PivotSet::PromptFinal { states, lengths: vec![2] };
    assert!(matches!(select_pivots(Arch::DecoderOnly, &prompt), Ok(PivotRoute::Attention { .. })));
    assert!(select_pivots(Arch::Transformer, &prompt).is_err());
    let exp = PivotSet::ExpansionIntermediate {
        groups: vec![ExpansionPivot {
            size: 2,
            a: states,
            b: states,
            per_layer: vec![(states, states)],
        }],
        lengths: vec![2],
    };
    assert!(matches!(select_pivots(Arch::Expansion, &exp), Ok(PivotRoute::Expansion { .. })));
    assert!(select_pivots(Arch::DecoderOnly, &exp).is_err());
}
