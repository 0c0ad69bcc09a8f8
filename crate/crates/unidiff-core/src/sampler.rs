//! Inference: Euler integration of the learned velocity field for images,
//! confidence-ordered iterative unmasking for captions, and condition-token
//! concatenation for editing/perception. The teacher and the projection
//! heads M are never evaluated here.

use crate::backbone::{forward, ForwardInputs, Mode, ModelConfig};
use crate::diffusion::cosine_remaining;
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, RngState, Scalar, Tensor};
use crate::tokenization::{
    decode_text, encode_text, grid_from_tokens, patchify, unpatchify, Image, TextSequence,
    Vocabulary, BOS, MASK,
};
use crate::trainer::SampleConfig;

/// Euler integration of dx/dt = v(x, t) from t=1 down to t=0 in `steps`
/// uniform steps, with the field evaluated at each step's midpoint time.
/// The midpoint evaluation removes the first-order quadrature bias of the
/// contraction integral that otherwise deflates sample variance by ~15-25%
/// at S=20; it costs nothing (still one field evaluation per step) and is
/// exact for step-constant fields, so the teacher-forced oracle still
/// recovers targets to machine precision. Exposed so the exact target field
/// can be integrated as an oracle.
pub fn euler_integrate<T: Scalar, F>(x1: Tensor<T>, steps: usize, mut field: F) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if steps == 0 {
        return Err(Error::config("sample.image_steps", "must be >= 1"));
    }
    let mut x = x1;
    let dt = 1.0 / steps as f64;
    for s in (1..=steps).rev() {
        let t = (s as f64 - 0.5) / steps as f64;
        let v = field(&x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler", format!("{:?}", v.shape())));
        }
        x = Tensor::from_fn(x.shape().to_vec(), |i| {
            x.data()[i] - T::from_f64(dt) * v.data()[i]
        });
    }
    Ok(x)
}

/// Flow sampling: start from Gaussian token noise, integrate the predicted
/// velocity field, clamp and unpatchify. `condition` tokens (a clean source
/// image) switch this between T2I and conditional generation.
pub fn generate_image<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    caption: &str,
    condition: Option<&Image>,
    sample: &SampleConfig,
) -> Result<Image> {
    sample.validate()?;
    let text = encode_text(caption, vocab, cfg.l_txt)?;
    let null_text = TextSequence::null(cfg.l_txt);
    let cond_tokens = match condition {
        Some(img) => Some(patchify::<T>(img, cfg.patch)?.tokens),
        None => None,
    };
    let mut rng = RngState::new(sample.seed).substream("image_noise");
    let x1 = Tensor::<T>::randn(vec![cfg.l_img(), cfg.patch_dim()], &mut rng);
    let guided = sample.guidance > 1.0;
    let x0 = euler_integrate(x1, sample.image_steps, |x, t| {
        let v_cond = forward(
            params,
            cfg,
            &ForwardInputs {
                text_ids: &text.ids,
                image_tokens: x,
                condition_tokens: cond_tokens.as_ref(),
                t_img: t,
                mode: Mode::ImageDenoise,
            },
        )?
        .velocity;
        if !guided {
            return Ok(v_cond);
        }
        let v_null = forward(
            params,
            cfg,
            &ForwardInputs {
                text_ids: &null_text.ids,
                image_tokens: x,
                condition_tokens: cond_tokens.as_ref(),
                t_img: t,
                mode: Mode::ImageDenoise,
            },
        )?
        .velocity;
        let g = T::from_f64(sample.guidance);
        Ok(Tensor::from_fn(v_cond.shape().to_vec(), |i| {
            v_null.data()[i] + g * (v_cond.data()[i] - v_null.data()[i])
        }))
    })?;
    let grid = grid_from_tokens(x0, cfg.grid(), cfg.grid(), cfg.patch)?;
    let mut img = unpatchify(&grid);
    img.clamp();
    Ok(img)
}

/// Iterative unmasking: start all-`[MASK]` after `[BOS]`, commit the most
/// confident argmax ids on a cosine schedule; committed tokens never change.
pub fn generate_caption<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    image: &Image,
    sample: &SampleConfig,
) -> Result<String> {
    sample.validate()?;
    let image_tokens = patchify::<T>(image, cfg.patch)?.tokens;
    let l = cfg.l_txt;
    let mut ids = vec![MASK; l];
    ids[0] = BOS;
    let total = l - 1;
    let steps = sample.text_steps;
    for u in 1..=steps {
        let masked: Vec<usize> = (0..l).filter(|&i| ids[i] == MASK).collect();
        if masked.is_empty() {
            break;
        }
        let commit = masked.len() - cosine_remaining(total, u, steps).min(masked.len());
        if commit == 0 {
            continue;
        }
        let trace = forward(
            params,
            cfg,
            &ForwardInputs {
                text_ids: &ids,
                image_tokens: &image_tokens,
                condition_tokens: None,
                t_img: 0.0,
                mode: Mode::TextDenoise,
            },
        )?;
        let v = cfg.vocab_size;
        // (confidence, position, argmax id) per still-masked position;
        // [MASK] is excluded from candidate ids
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(masked.len());
        for &pos in &masked {
            let row = &trace.logits.data()[pos * v..(pos + 1) * v];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut denom = 0.0f64;
            for &x in row {
                denom += (x - mx).as_f64().exp();
            }
            let mut best_id = 0;
            let mut best = f64::NEG_INFINITY;
            for (i, &x) in row.iter().enumerate() {
                if i == MASK {
                    continue;
                }
                let p = (x - mx).as_f64().exp() / denom;
                if p > best {
                    best = p;
                    best_id = i;
                }
            }
            cands.push((best, pos, best_id));
        }
        // most confident first; ties broken by lowest position index
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, pos, id) in cands.iter().take(commit) {
            ids[pos] = id;
        }
    }
    let seq = TextSequence { valid_len: ids.len(), ids, truncated: false };
    Ok(decode_text(&seq, vocab))
}

/// Editing / perception: identical to `generate_image` with the clean source
/// appended as condition tokens and the instruction as text context.
pub fn run_conditional<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    source: &Image,
    instruction: &str,
    sample: &SampleConfig,
) -> Result<Image> {
    generate_image(params, cfg, vocab, instruction, Some(source), sample)
}
