use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::data::{Example, TokenMatrix};
use crate::nn::ParamStore;
use crate::Tensor;

fn tiny(arch: Arch) -> Seq2Seq {
    Seq2Seq::new(ModelConfig {
        arch,
        layers: 2,
        hidden: 8,
        ff_size: 16,
        heads: 2,
        vocab: 10,
        expansion_groups: vec![2, 3],
        max_len: 16,
        dropout: 0.0,
        scale_embeddings: true,
        tie_embeddings: false,
    })
    .unwrap()
}

const ARCHS: [Arch; 3] = [Arch::Transformer, Arch::Expansion, Arch::DecoderOnly];

fn batch(pairs: &[(&[u32], &[u32])]) -> Batch {
    let ex: Vec<Example> = pairs.iter().map(|(s, t)| Example::new(s.to_vec(), t.to_vec())).collect();
    let refs: Vec<&Example> = ex.iter().collect();
    Batch::from_examples(&refs).unwrap()
}

fn run(model: &Seq2Seq, params: &ParamStore<f64>, b: &Batch) -> (Graph<f64>, ForwardOutput) {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = model.forward(&mut g, &bound, b, TargetOptions::default(), &mut Dropout::eval()).unwrap();
    (g, out)
}

#[test]
fn output_shapes() {
    let b = batch(&[(&[4, 5, 6], &[7, 8]), (&[4, 9], &[5, 6, 7, 8])]);
    for arch in ARCHS {
        let m = tiny(arch);
        let p = m.init_params::<f64>(1).unwrap();
        let (g, out) = run(&m, &p, &b);
        assert_eq!(g.shape(out.logits), &[2, 5, 10], "{arch:?}");
        assert_eq!(g.shape(out.targets), &[2, 5, 8]);
        match &out.pivots {
            PivotSet::EncoderFinal { states, .. } | PivotSet::PromptFinal { states, .. } => {
                assert_eq!(g.shape(*states), &[2, 3, 8])
            }
            PivotSet::ExpansionIntermediate { groups, .. } => {
                assert_eq!(groups.len(), 2);
                for p in groups {
                    assert_eq!(g.shape(p.a), &[2, p.size, 8]);
                    assert_eq!(g.shape(p.b), &[2, p.size, 8]);
                    assert_eq!(p.per_layer.len(), 2);
                }
            }
        }
    }
}

#[test]
fn zeroed_parameters_leave_only_the_output_bias() {
    let b = batch(&[(&[4, 5], &[6, 7, 8])]);
    for arch in ARCHS {
        let m = tiny(arch);
        let mut p = m.init_params::<f64>(2).unwrap();
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let bias: Vec<f64> = (0..10).map(|i| i as f64 * 0.1 - 0.3).collect();
        *p.get_mut("out.bias").unwrap() = Tensor::from_f64(&[10], &bias).unwrap();
        let (g, out) = run(&m, &p, &b);
        for row in g.value(out.logits).data().chunks(10) {
            assert_eq!(row, bias.as_slice(), "{arch:?}");
        }
    }
}

#[test]
fn logits_do_not_see_future_targets() {
    let base = batch(&[(&[4, 5, 6], &[7, 8, 9, 4])]);
    for arch in ARCHS {
        let m = tiny(arch);
        let p = m.init_params::<f64>(3).unwrap();
        let (g0, o0) = run(&m, &p, &base);
        let l0 = g0.value(o0.logits).data().to_vec();
        // Changing target token k only moves decoder input slot k + 1.
        for k in 0..4 {
            let mut edited = base.clone();
            edited.tgt_in.set(0, k + 1, 3);
            let (g1, o1) = run(&m, &p, &edited);
            let l1 = g1.value(o1.logits).data();
            let cut = (k + 1) * 10;
            assert_eq!(&l0[..cut], &l1[..cut], "{arch:?} position {k}");
            assert_ne!(&l0[cut..], &l1[cut..]);
        }
    }
}

#[test]
fn pivots_ignore_target_tokens() {
    let a = batch(&[(&[4, 5, 6], &[7, 8]), (&[9], &[4])]);
    let b = batch(&[(&[4, 5, 6], &[3, 3]), (&[9], &[8])]);
    for arch in ARCHS {
        let m = tiny(arch);
        let p = m.init_params::<f64>(4).unwrap();
        let (ga, oa) = run(&m, &p, &a);
        let (gb, ob) = run(&m, &p, &b);
        for (va, vb) in oa.pivots.vars().into_iter().zip(ob.pivots.vars()) {
            assert_eq!(ga.value(va).data(), gb.value(vb).data(), "{arch:?}");
        }
    }
}

#[test]
fn expansion_pivots_sum_layers() {
    let m = tiny(Arch::Expansion);
    let p = m.init_params::<f64>(5).unwrap();
    let (g, out) = run(&m, &p, &batch(&[(&[4, 5, 6, 7], &[8])]));
    let PivotSet::ExpansionIntermediate { groups, .. } = &out.pivots else {
        panic!("expected expansion pivots")
    };
    for piv in groups {
        let mut sum_a = vec![0.0; g.value(piv.a).len()];
        let mut sum_b = sum_a.clone();
        for &(a, b) in &piv.per_layer {
            for (s, v) in sum_a.iter_mut().zip(g.value(a).data()) {
                *s += v;
            }
            for (s, v) in sum_b.iter_mut().zip(g.value(b).data()) {
                *s += v;
            }
        }
        assert_eq!(g.value(piv.a).data(), sum_a.as_slice());
        assert_eq!(g.value(piv.b).data(), sum_b.as_slice());
    }
}

#[test]
fn expansion_identity_routing() {
    // Orthonormal inputs and queries equal to the inputs: every slot routes
    // to exactly its own input, the negative path stays empty, and the
    // recombination averages the positive path with an empty one.
    let (n, h) = (4, 4);
    let c = 50.0;
    let x: Vec<f64> = (0..n * h).map(|i| if i / h == i % h { 1.0 } else { 0.0 }).collect();
    let mut store = ParamStore::new();
    store
        .insert("blk.query.4", Tensor::from_f64(&[n, h], &x).unwrap().map(|v| v * c))
        .unwrap();
    let mut g = Graph::<f64>::new();
    let bound = store.bind(&mut g, true);
    let xv = g.constant(Tensor::from_f64(&[1, n, h], &x).unwrap());
    let blk = expansion_block(&mut g, &bound, "blk", xv, &[n], &[4]).unwrap();
    let (_, a, b) = blk.groups[0];
    for (got, want) in g.value(a).data().iter().zip(&x) {
        assert!((got - want).abs() < 1e-9);
    }
    assert!(g.value(b).data().iter().all(|&v| v == 0.0));
    for (got, want) in g.value(blk.recombined).data().iter().zip(&x) {
        assert!((got - want / 2.0).abs() < 1e-8);
    }
}

#[test]
fn length_limits_are_enforced() {
    let long: Vec<u32> = vec![4; 17];
    for arch in [Arch::Transformer, Arch::Expansion] {
        let m = tiny(arch);
        let p = m.init_params::<f64>(6).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let b = batch(&[(&long, &[5])]);
        let err = m.forward(&mut g, &bound, &b, TargetOptions::default(), &mut Dropout::eval());
        assert!(matches!(err, Err(Error::Input(_))));
    }
    // Decoder-only: prompt plus continuation must fit.
    let m = tiny(Arch::DecoderOnly);
    let p = m.init_params::<f64>(6).unwrap();
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let b = batch(&[(&[4; 10], &[5; 6])]);
    let err = m.forward(&mut g, &bound, &b, TargetOptions::default(), &mut Dropout::eval());
    assert!(matches!(err, Err(Error::Input(_))));
    let b = batch(&[(&[4; 10], &[5; 5])]);
    assert!(m.forward(&mut g, &bound, &b, TargetOptions::default(), &mut Dropout::eval()).is_ok());
}

#[test]
fn empty_prompt_is_rejected() {
    let m = tiny(Arch::DecoderOnly);
    let p = m.init_params::<f64>(7).unwrap();
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let mut b = batch(&[(&[4], &[5])]);
    b.src_lengths[0] = 0;
    let err = m.forward(&mut g, &bound, &b, TargetOptions::default(), &mut Dropout::eval());
    assert!(matches!(err, Err(Error::Input(_))));
}

#[test]
fn all_padding_continuation_has_no_loss() {
    let m = tiny(Arch::DecoderOnly);
    let p = m.init_params::<f64>(8).unwrap();
    let mut b = batch(&[(&[4, 5], &[6])]);
    b.tgt_lengths[0] = 0;
    b.tgt_in = TokenMatrix::from_rows(&[&[0, 0]]);
    let (mut g, out) = run(&m, &p, &b);
    let ce = crate::nn::cross_entropy(&mut g, out.logits, &b.tgt_out, &b.tgt_lengths);
    assert!(matches!(ce, Err(Error::Contract(_))));
}

#[test]
fn prompt_padding_does_not_shift_the_continuation() {
    let m = tiny(Arch::DecoderOnly);
    let p = m.init_params::<f64>(9).unwrap();
    let (g1, o1) = run(&m, &p, &batch(&[(&[4, 5], &[6, 7])]));
    let (g2, o2) = run(&m, &p, &batch(&[(&[4, 5], &[6, 7]), (&[4, 5, 6, 7, 8], &[9])]));
    let one = g1.value(o1.logits).data();
    let both = g2.value(o2.logits).data();
    for (a, b) in one.iter().zip(both) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn initialization_is_deterministic_across_widths() {
    let m = tiny(Arch::Transformer);
    let a = m.init_params::<f64>(11).unwrap();
    let b = m.init_params::<f64>(11).unwrap();
    let c = m.init_params::<f32>(11).unwrap();
    let d = m.init_params::<f64>(12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, d);
    for ((na, ta), (nc, tc)) in a.iter().zip(c.iter()) {
        assert_eq!(na, nc);
        for (x, y) in ta.data().iter().zip(tc.data()) {
            assert_eq!(*x as f32, *y);
        }
    }
    assert!(a.get("dec.0.cross_attn.wq.weight").is_some());
    assert!(a.get("enc.1.self_attn.wo.bias").is_some());
}
