//! The two corruption processes and their losses: linear-path flow matching
//! for continuous image tokens and mask-based discrete diffusion for text.

use crate::error::{Error, Result};
use crate::numerics::{Graph, RngState, Scalar, Tensor, Var};
use crate::tokenization::{TextSequence, MASK, PAD};

/// One flow-matching corruption: x_t = (1-t)·x + t·ε, target v* = ε - x.
#[derive(Debug, Clone)]
pub struct FlowSample<T> {
    pub clean: Tensor<T>,
    pub noise: Tensor<T>,
    pub t: f64,
    pub corrupted: Tensor<T>,
    pub target_velocity: Tensor<T>,
}

pub fn flow_corrupt<T: Scalar>(clean: &Tensor<T>, t: f64, rng: &mut RngState) -> FlowSample<T> {
    debug_assert!((0.0..=1.0).contains(&t));
    let noise = Tensor::randn(clean.shape().to_vec(), rng);
    flow_corrupt_with_noise(clean, &noise, t)
}

/// Deterministic variant used by tests and the teacher-forced sampler oracle.
pub fn flow_corrupt_with_noise<T: Scalar>(
    clean: &Tensor<T>,
    noise: &Tensor<T>,
    t: f64,
) -> FlowSample<T> {
    debug_assert_eq!(clean.shape(), noise.shape());
    let tt = T::from_f64(t);
    let one_minus = T::one() - tt;
    let corrupted = Tensor::from_fn(clean.shape().to_vec(), |i| {
        one_minus * clean.data()[i] + tt * noise.data()[i]
    });
    let target_velocity =
        Tensor::from_fn(clean.shape().to_vec(), |i| noise.data()[i] - clean.data()[i]);
    FlowSample { clean: clean.clone(), noise: noise.clone(), t, corrupted, target_velocity }
}

/// Mean squared error over all velocity coordinates (plain tensors).
pub fn flow_matching_loss<T: Scalar>(v_pred: &Tensor<T>, sample: &FlowSample<T>) -> Result<T> {
    if v_pred.shape() != sample.target_velocity.shape() {
        return Err(Error::shape("flow_matching_loss", format!("{:?}", v_pred.shape())));
    }
    let n = v_pred.numel();
    let mut acc = T::zero();
    for (&p, &t) in v_pred.data().iter().zip(sample.target_velocity.data()) {
        let d = p - t;
        acc = acc + d * d;
    }
    Ok(acc / T::from_usize(n))
}

/// Same loss expressed on the graph, for training and gradcheck.
pub fn flow_matching_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    v_pred: Var,
    target_velocity: &Tensor<T>,
) -> Result<Var> {
    let target = g.constant(target_velocity.clone());
    let diff = g.sub(v_pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

/// One mask corruption of a text sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub clean_ids: Vec<usize>,
    pub t: f64,
    pub mask: Vec<bool>,
    pub corrupted_ids: Vec<usize>,
    pub masked_count: usize,
}

/// Mask each valid (non-PAD) position independently with probability t; if
/// no position gets masked, force one so the 1/K weight stays defined.
pub fn mask_corrupt(seq: &TextSequence, t: f64, rng: &mut RngState) -> MaskSample {
    debug_assert!(t > 0.0 && t <= 1.0);
    let valid: Vec<usize> = (0..seq.len()).filter(|&i| seq.ids[i] != PAD).collect();
    let mut mask = vec![false; seq.len()];
    let mut masked = 0;
    for &i in &valid {
        if rng.uniform_f64() < t {
            mask[i] = true;
            masked += 1;
        }
    }
    if masked == 0 && !valid.is_empty() {
        let pick = valid[rng.below(valid.len())];
        mask[pick] = true;
        masked = 1;
    }
    let corrupted_ids: Vec<usize> = seq
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| if mask[i] { MASK } else { id })
        .collect();
    MaskSample { clean_ids: seq.ids.clone(), t, mask, corrupted_ids, masked_count: masked }
}

/// -(1/K) Σ_masked log softmax(logits_i)[clean_i] / t, on plain tensors.
pub fn masked_diffusion_loss<T: Scalar>(logits: &Tensor<T>, sample: &MaskSample) -> Result<T> {
    let (l, v) = logits.dims2()?;
    if l != sample.clean_ids.len() {
        return Err(Error::shape("masked_diffusion_loss", format!("{l} rows")));
    }
    if sample.masked_count == 0 {
        return Err(Error::shape("masked_diffusion_loss", "K = 0".to_string()));
    }
    let mut acc = 0.0f64;
    for i in 0..l {
        if !sample.mask[i] {
            continue;
        }
        let row = &logits.data()[i * v..(i + 1) * v];
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = 0.0f64;
        for &x in row {
            sum += (x - mx).as_f64().exp();
        }
        let logp = (row[sample.clean_ids[i]] - mx).as_f64() - sum.ln();
        if !logp.is_finite() {
            return Err(Error::NonFinite { kernel: "masked_diffusion_loss" });
        }
        acc -= logp / sample.t;
    }
    Ok(T::from_f64(acc / sample.masked_count as f64))
}

/// Same loss on the graph: gather log-softmax at clean ids on masked rows,
/// weight by 1/(K·t).
pub fn masked_diffusion_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    sample: &MaskSample,
) -> Result<Var> {
    if sample.masked_count == 0 {
        return Err(Error::shape("masked_diffusion_loss", "K = 0".to_string()));
    }
    let l = sample.clean_ids.len();
    let logp = g.log_softmax(logits)?;
    let picked = g.gather_rows(logp, &sample.clean_ids)?;
    let w = Tensor::from_fn(vec![l], |i| {
        if sample.mask[i] {
            T::from_f64(-1.0 / (sample.masked_count as f64 * sample.t))
        } else {
            T::zero()
        }
    });
    let wv = g.constant(w);
    let weighted = g.mul(picked, wv)?;
    g.sum_all(weighted)
}

/// Cosine commit schedule for iterative unmasking: how many of `total`
/// positions are still masked after step u of `steps`.
pub fn cosine_remaining(total: usize, u: usize, steps: usize) -> usize {
    if u >= steps {
        return 0;
    }
    let frac = (std::f64::consts::FRAC_PI_2 * u as f64 / steps as f64).cos();
    (total as f64 * frac).floor() as usize
}
