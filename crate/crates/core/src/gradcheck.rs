//! Central finite-difference checks of the analytic gradients, at `f64`.
//!
//! Every primitive graph op and a handful of composites (attention, both
//! equalizers, the reconstruction loss and the joint objective) is checked on
//! seeded random inputs, contracted to a scalar with fixed random weights.
//! The full joint objective of a tiny model is then checked against every
//! parameter element.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::bai;
use crate::data::{Batch, Example, TokenMatrix};
use crate::model::{Arch, ModelConfig, Seq2Seq, TargetOptions};
use crate::nn::{self, AttentionMask, Bound, Dropout, ParamStore};
use crate::rng::{self, Rng};
use crate::{Error, Result, Tensor};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding do not divide by zero.
pub const FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Result of one checked function.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of input elements compared.
    pub evaluated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&CheckRow> {
        self.rows.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares the analytic gradient of the scalar `build(inputs)` against
/// central differences for every element of every input.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], build: F) -> Result<CheckRow>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        scalar_value(&g, out, name)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    scalar_value(&g, out, name)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let (mut worst, mut evaluated) = (0.0f64, 0usize);
    #[allow(clippy::needless_range_loop)]
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic[i][j], numeric);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("{name}: non-finite gradient comparison")));
            }
            worst = worst.max(err);
            evaluated += 1;
        }
    }
    Ok(CheckRow {
        name: name.into(),
        max_rel_err: worst,
        evaluated,
    })
}

fn scalar_value(g: &Graph<f64>, v: Var, name: &str) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::shape("gradcheck", t.shape(), &[]));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::Numeric(format!("{name}: non-finite value {x}")));
    }
    Ok(x)
}

/// Contract a tensor-valued op to `Σ w ⊙ out` with weights fixed by `rng`.
fn check_op<F>(name: &str, inputs: &[Tensor<f64>], rng: &mut Rng, op: F) -> Result<CheckRow>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = op(&mut g, &vars)?;
    let weights = uniform(rng, g.shape(out), -1.0, 1.0);
    check_fn(name, inputs, |g, v| {
        let out = op(g, v)?;
        let w = g.mul_const(out, &weights)?;
        Ok(g.sum(w))
    })
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform in `±[0.2, 1]`, so kinks at zero stay far from every probe.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Every primitive op and the composite blocks, on random inputs.
pub fn check_ops(seed: u64) -> Result<Vec<CheckRow>> {
    let mut r = rng::stream(seed, 0x6772_6164);
    let r = &mut r;
    let mut rows = Vec::new();
    let u = |r: &mut Rng, s: &[usize]| uniform(r, s, -1.0, 1.0);

    let ins = [u(r, &[3, 4]), u(r, &[4, 2])];
    rows.push(check_op("matmul", &ins, r, |g, v| g.matmul(v[0], v[1]))?);
    let ins = [u(r, &[2, 3, 4]), u(r, &[2, 4, 2])];
    rows.push(check_op("bmm", &ins, r, |g, v| g.bmm(v[0], v[1]))?);
    let ins = [u(r, &[2, 3, 4]), u(r, &[2, 5, 4])];
    rows.push(check_op("bmm_nt", &ins, r, |g, v| g.bmm_nt(v[0], v[1]))?);
    let ins = [u(r, &[3, 4]), u(r, &[3, 4])];
    rows.push(check_op("add", &ins, r, |g, v| g.add(v[0], v[1]))?);
    rows.push(check_op("sub", &ins, r, |g, v| g.sub(v[0], v[1]))?);
    rows.push(check_op("mul", &ins, r, |g, v| g.mul(v[0], v[1]))?);
    let ins = [u(r, &[2, 3, 4]), u(r, &[4])];
    rows.push(check_op("add_bias", &ins, r, |g, v| g.add_bias(v[0], v[1]))?);
    let ins = [u(r, &[3, 4])];
    rows.push(check_op("scale", &ins, r, |g, v| Ok(g.scale(v[0], -0.7)))?);
    let c = u(r, &[3, 4]);
    rows.push(check_op("add_const", &ins, r, |g, v| g.add_const(v[0], &c))?);
    rows.push(check_op("mul_const", &ins, r, |g, v| g.mul_const(v[0], &c))?);
    let ins = [off_zero(r, &[3, 4])];
    rows.push(check_op("relu", &ins, r, |g, v| Ok(g.relu(v[0])))?);
    rows.push(check_op("neg_relu", &ins, r, |g, v| Ok(g.neg_relu(v[0])))?);
    let ins = [u(r, &[2, 3, 4])];
    rows.push(check_op("sum", &ins, r, |g, v| Ok(g.sum(v[0])))?);
    rows.push(check_op("mean", &ins, r, |g, v| Ok(g.mean(v[0])))?);
    rows.push(check_op("reshape", &ins, r, |g, v| g.reshape(v[0], &[6, 4]))?);
    rows.push(check_op("permute", &ins, r, |g, v| g.permute(v[0], &[2, 0, 1]))?);
    rows.push(check_op("slice", &ins, r, |g, v| g.slice(v[0], 2, 1, 3))?);
    rows.push(check_op("softmax", &ins, r, |g, v| g.softmax(v[0]))?);
    let ins = [u(r, &[3, 5])];
    rows.push(check_op("transpose", &ins, r, |g, v| g.transpose(v[0]))?);
    let ins = [u(r, &[2, 3, 4]), u(r, &[2, 2, 4])];
    rows.push(check_op("concat", &ins, r, |g, v| g.concat(&[v[0], v[1]], 1))?);
    let ins = [u(r, &[5, 3])];
    rows.push(check_op("embedding", &ins, r, |g, v| g.embedding(v[0], &[0, 2, 2, 4]))?);
    let mut masked = vec![0.0; 12];
    masked[3] = f64::NEG_INFINITY;
    masked[6] = f64::NEG_INFINITY;
    let masked = Tensor::from_f64(&[3, 4], &masked)?;
    let ins = [u(r, &[3, 4])];
    rows.push(check_op("masked_softmax", &ins, r, |g, v| {
        let x = g.add_const(v[0], &masked)?;
        g.softmax(x)
    })?);
    let ins = [u(r, &[3, 4]), uniform(r, &[4], 0.5, 1.5), u(r, &[4])];
    rows.push(check_op("layer_norm", &ins, r, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?);
    let ins = [uniform(r, &[3, 4], 0.1, 1.0)];
    rows.push(check_op("normalize_rows", &ins, r, |g, v| Ok(g.normalize_rows(v[0], bai::PHI_EPS)))?);
    let ins = [u(r, &[4, 5])];
    rows.push(check_fn("cross_entropy", &ins, |g, v| g.cross_entropy(v[0], &[1, 4, 0, 2], &[1.0, 0.5, 0.0, 2.0]))?);

    // Composites.
    let h = 4;
    let names = ["wq", "wk", "wv", "wo"];
    let mut ins = vec![u(r, &[2, 3, h]), u(r, &[2, 5, h])];
    for _ in names {
        ins.push(u(r, &[h, h]));
        ins.push(u(r, &[h]));
    }
    let bind = |v: &[Var]| {
        Bound::from_pairs(names.iter().enumerate().flat_map(|(i, n)| {
            [(format!("att.{n}.weight"), v[2 + 2 * i]), (format!("att.{n}.bias"), v[3 + 2 * i])]
        }))
    };
    let mask = AttentionMask::Padding { key_lengths: vec![5, 3] };
    rows.push(check_op("cross_attention", &ins, r, |g, v| {
        nn::multi_head_attention(g, &bind(v), "att", v[0], v[1], &mask, 2)
    })?);
    let causal = AttentionMask::Causal {
        key_lengths: Some(vec![3, 2]),
    };
    let mut self_ins = ins.clone();
    self_ins.remove(1);
    rows.push(check_op("causal_self_attention", &self_ins, r, |g, v| {
        let mut all = vec![v[0], v[0]];
        all.extend_from_slice(&v[1..]);
        nn::multi_head_attention(g, &bind(&all), "att", v[0], v[0], &causal, 2)
    })?);

    let (src_len, tgt_len) = ([3, 2], [4, 2]);
    let ins = [u(r, &[2, 3, h]), u(r, &[2, 4, h])];
    rows.push(check_op("equalize_attention", &ins, r, |g, v| {
        bai::equalize_transformer(g, v[0], &src_len, v[1], &tgt_len)
    })?);
    let ins = [
        u(r, &[2, 2, h]),
        u(r, &[2, 2, h]),
        u(r, &[2, 3, h]),
        u(r, &[2, 3, h]),
        u(r, &[2, 4, h]),
    ];
    rows.push(check_op("equalize_expansion", &ins, r, |g, v| {
        bai::equalize_expansion(g, &[(v[0], v[1]), (v[2], v[3])], v[4], &tgt_len)
    })?);
    rows.push(check_op("expansion_recombine", &ins, r, |g, v| {
        bai::expansion_recombine(g, v[4], &[(v[0], v[1]), (v[2], v[3])])
    })?);
    let ins = [u(r, &[2, 4, h]), u(r, &[2, 4, h])];
    rows.push(check_fn("bai_mse", &ins, |g, v| bai::bai_mse(g, v[0], v[1], &tgt_len))?);
    let targets = TokenMatrix::from_rows(&[&[1, 3, 0, 2], &[4, 2]]);
    let ins = [u(r, &[2, 4, 5]), u(r, &[2, 4, h]), u(r, &[2, 4, h])];
    rows.push(check_fn("joint_loss", &ins, |g, v| {
        Ok(bai::joint_loss(g, v[0], &targets, &tgt_len, v[1], v[2], 0.7)?.total)
    })?);
    Ok(rows)
}

/// Tiny model used for the full-objective check.
pub fn tiny_model(arch: Arch) -> ModelConfig {
    ModelConfig {
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
    }
}

fn tiny_batch() -> Result<Batch> {
    let a = Example::new(vec![4, 5, 6], vec![5, 6]);
    let b = Example::new(vec![7, 8], vec![9, 4, 7]);
    Batch::from_examples(&[&a, &b])
}

/// The joint objective `λ·β + CE` of a tiny `arch` model, checked against
/// every parameter element.
pub fn check_objective(arch: Arch, seed: u64) -> Result<CheckRow> {
    let model = Seq2Seq::new(tiny_model(arch))?;
    let params: ParamStore<f64> = model.init_params(seed)?;
    let batch = tiny_batch()?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    check_fn(&format!("objective/{}", arch.name()), &inputs, |g, v| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
        let out = model.forward(g, &bound, &batch, TargetOptions::default(), &mut Dropout::eval())?;
        let route = bai::select_pivots(arch, &out.pivots)?;
        let r = bai::reconstruct(g, &route, out.targets, &batch.tgt_lengths)?;
        Ok(bai::joint_loss(g, out.logits, &batch.tgt_out, &batch.tgt_lengths, r, out.targets, 0.7)?.total)
    })
}

/// Op checks followed by the objective of `arch`.
pub fn run(arch: Arch, seed: u64) -> Result<GradcheckReport> {
    let mut rows = check_ops(seed)?;
    rows.push(check_objective(arch, seed)?);
    Ok(GradcheckReport {
        rows,
        tolerance: TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_the_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn every_op_passes() {
        let rows = check_ops(7).unwrap();
        assert!(rows.len() >= 30);
        for row in &rows {
            assert!(row.evaluated > 0, "{}", row.name);
            assert!(row.max_rel_err < TOLERANCE, "{}: {}", row.name, row.max_rel_err);
        }
    }

    #[test]
    fn objective_passes_for_every_arch() {
        for arch in [Arch::Transformer, Arch::Expansion, Arch::DecoderOnly] {
            let row = check_objective(arch, 11).unwrap();
            let n = Seq2Seq::new(tiny_model(arch)).unwrap().init_params::<f64>(11).unwrap().num_elements();
            assert_eq!(row.evaluated, n);
            assert!(row.max_rel_err < TOLERANCE, "{}: {}", row.name, row.max_rel_err);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // `x ↦ x·detach(x)` has true derivative 2x but the graph reports x.
        let ins = [Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()];
        let row = check_fn("broken", &ins, |g, v| {
            let d = g.detach(v[0]);
            let p = g.mul(v[0], d)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(row.max_rel_err > 0.4);
    }
}
