//! The shared-weight transformer: one token stream `[text | image | cond?]`
//! through N adaLN-modulated blocks, with a velocity head on the image slice,
//! a logit head on the text slice, pooled projections for the contrastive
//! loss, and hook-depth hidden states for the intrinsic alignment loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::numerics::{BoundParams, Graph, ParameterStore, RngState, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub l_txt: usize,
    pub image_size: usize,
    pub patch: usize,
    pub vocab_size: usize,
    /// Alignment hook depth (1-based); `None` means the middle block.
    pub hook_depth: Option<usize>,
    pub d_clip: usize,
    pub d_sem: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config("model.n_heads", "embed_dim must divide by n_heads"));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::config("model.patch", "image_size must divide by patch"));
        }
        let k = self.hook();
        if k == 0 || k > self.n_blocks {
            return Err(Error::config("model.hook_depth", "must be in 1..=n_blocks"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn l_img(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Effective hook depth: paper's "depth 8" maps to the middle block at
    /// desk scale.
    pub fn hook(&self) -> usize {
        self.hook_depth.unwrap_or(self.n_blocks.div_ceil(2))
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Desk-scale default used by the end-to-end run.
impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            n_blocks: 6,
            n_heads: 4,
            l_txt: 16,
            image_size: 16,
            patch: 2,
            vocab_size: 0, // filled from the vocabulary
            hook_depth: None,
            d_clip: 32,
            d_sem: crate::datagen::ATTRIBUTE_DIM,
        }
    }
}

/// Full parameter inventory: (name, shape, zero_init).
pub fn parameter_inventory(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = cfg.embed_dim;
    let mut inv: Vec<(String, Vec<usize>, bool)> = Vec::new();
    let mut p = |name: String, shape: Vec<usize>, zero: bool| inv.push((name, shape, zero));

    p("embed.text".into(), vec![cfg.vocab_size, d], false);
    p("embed.image.w".into(), vec![cfg.patch_dim(), d], false);
    p("embed.image.b".into(), vec![d], true);
    p("embed.modality.text".into(), vec![d], false);
    p("embed.modality.image".into(), vec![d], false);
    p("embed.modality.cond".into(), vec![d], false);
    p("embed.pos.text".into(), vec![cfg.l_txt, d], false);
    p("embed.pos.img_row".into(), vec![cfg.grid(), d], false);
    p("embed.pos.img_col".into(), vec![cfg.grid(), d], false);
    p("time.fc1.w".into(), vec![d, d], false);
    p("time.fc1.b".into(), vec![d], true);
    p("time.fc2.w".into(), vec![d, d], false);
    p("time.fc2.b".into(), vec![d], true);
    for i in 0..cfg.n_blocks {
        for (nm, shape, zero) in [
            ("attn.wq", vec![d, d], false),
            ("attn.bq", vec![d], true),
            ("attn.wk", vec![d, d], false),
            ("attn.bk", vec![d], true),
            ("attn.wv", vec![d, d], false),
            ("attn.bv", vec![d], true),
            ("attn.wo", vec![d, d], false),
            ("attn.bo", vec![d], true),
            ("mlp.fc1.w", vec![d, cfg.mlp_dim()], false),
            ("mlp.fc1.b", vec![cfg.mlp_dim()], true),
            ("mlp.fc2.w", vec![cfg.mlp_dim(), d], false),
            ("mlp.fc2.b", vec![d], true),
            // adaLN modulation outputs are zero-initialized
            ("mod.w", vec![d, 6 * d], true),
            ("mod.b", vec![6 * d], true),
        ] {
            p(format!("block{i}.{nm}"), shape, zero);
        }
    }
    p("head.vel.mod.w".into(), vec![d, 2 * d], true);
    p("head.vel.mod.b".into(), vec![2 * d], true);
    p("head.vel.w".into(), vec![d, cfg.patch_dim()], false);
    p("head.vel.b".into(), vec![cfg.patch_dim()], true);
    p("head.logit.w".into(), vec![d, cfg.vocab_size], false);
    p("head.logit.b".into(), vec![cfg.vocab_size], true);
    for side in ["img", "txt"] {
        p(format!("align.{side}.fc1.w"), vec![d, 2 * d], false);
        p(format!("align.{side}.fc1.b"), vec![2 * d], true);
        p(format!("align.{side}.fc2.w"), vec![2 * d, cfg.d_sem], false);
        p(format!("align.{side}.fc2.b"), vec![cfg.d_sem], true);
    }
    p("pool.img.w".into(), vec![d, cfg.d_clip], false);
    p("pool.txt.w".into(), vec![d, cfg.d_clip], false);
    inv
}

/// Truncated-normal init: std 0.02 for embeddings and tables, Xavier-scaled
/// std for projection matrices, zero biases, zero adaLN modulation.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, rng: &mut RngState) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    for (name, shape, zero) in parameter_inventory(cfg) {
        let t = if zero {
            Tensor::zeros(shape)
        } else {
            let std = if name.ends_with(".w") && shape.len() == 2 {
                // projection matrix: truncated normal at Xavier scale
                (2.0 / (shape[0] + shape[1]) as f64).sqrt()
            } else {
                INIT_STD
            };
            Tensor::trunc_normal(shape, std, rng)
        };
        store.insert(name, t);
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ImageDenoise,
    TextDenoise,
}

/// Per-sample forward inputs. In `ImageDenoise` mode the image tokens are
/// noised and the text is clean context; in `TextDenoise` mode the text
/// carries `[MASK]` ids and the image tokens are clean context. Condition
/// tokens are present only for conditional tasks.
pub struct ForwardInputs<'a, T> {
    pub text_ids: &'a [usize],
    pub image_tokens: &'a Tensor<T>,
    pub condition_tokens: Option<&'a Tensor<T>>,
    pub t_img: f64,
    pub mode: Mode,
}

/// Graph handles exposed by one forward pass.
pub struct TraceVars {
    pub final_hidden: Var,
    pub hook_image: Var,
    pub hook_text: Var,
    pub hook_image_mean: Var,
    pub hook_text_mean: Var,
    pub velocity: Var,
    pub logits: Var,
    pub pooled_image: Var,
    pub pooled_text: Var,
}

/// Concrete values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub final_hidden: Tensor<T>,
    pub hook_image: Tensor<T>,
    pub hook_text: Tensor<T>,
    pub velocity: Tensor<T>,
    pub logits: Tensor<T>,
    pub pooled_image: Tensor<T>,
    pub pooled_text: Tensor<T>,
}

fn sinusoidal_features<T: Scalar>(t: f64, d: usize) -> Tensor<T> {
    let half = d / 2;
    let scaled = t * 1000.0;
    Tensor::from_fn(vec![1, d], |i| {
        let (idx, is_cos) = if i < half { (i, false) } else { (i - half, true) };
        let freq = (-(10_000.0f64).ln() * idx as f64 / half as f64).exp();
        let arg = scaled * freq;
        T::from_f64(if is_cos { arg.cos() } else { arg.sin() })
    })
}

/// modulate(x, shift, scale) = x · (1 + scale) + shift
fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let scaled = g.mul_row(x, scale)?;
    let summed = g.add(x, scaled)?;
    g.add_bias(summed, shift)
}

fn linear<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    x: Var,
    w: &str,
    b: &str,
) -> Result<Var> {
    let wv = bound.var(w)?;
    let bv = bound.var(b)?;
    let y = g.matmul(x, wv)?;
    g.add_bias(y, bv)
}

/// Build one forward pass on an existing graph, sharing bound parameters.
pub fn forward_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    inputs: &ForwardInputs<'_, T>,
) -> Result<TraceVars> {
    let d = cfg.embed_dim;
    let l_txt = cfg.l_txt;
    let l_img = cfg.l_img();
    if inputs.text_ids.len() != l_txt {
        return Err(Error::shape("forward", format!("{} text ids", inputs.text_ids.len())));
    }
    if inputs.image_tokens.shape() != [l_img, cfg.patch_dim()] {
        return Err(Error::shape("forward", format!("image {:?}", inputs.image_tokens.shape())));
    }
    if let Some(c) = inputs.condition_tokens {
        if c.shape() != [l_img, cfg.patch_dim()] {
            return Err(Error::shape("forward", format!("condition {:?}", c.shape())));
        }
    }

    // text segment: token table + 1-D positions + modality
    let text_table = bound.var("embed.text")?;
    let mut text = g.embedding(text_table, inputs.text_ids)?;
    let pos_ids: Vec<usize> = (0..l_txt).collect();
    let pos_t_table = bound.var("embed.pos.text")?;
    let pos_t = g.embedding(pos_t_table, &pos_ids)?;
    text = g.add(text, pos_t)?;
    let mod_text = bound.var("embed.modality.text")?;
    text = g.add_bias(text, mod_text)?;

    // image segment: linear patch projection + factored 2-D positions
    let grid = cfg.grid();
    let row_ids: Vec<usize> = (0..l_img).map(|i| i / grid).collect();
    let col_ids: Vec<usize> = (0..l_img).map(|i| i % grid).collect();
    let embed_segment = |g: &mut Graph<T>, tokens: Var, modality: &str| -> Result<Var> {
        let mut x = linear(g, bound, tokens, "embed.image.w", "embed.image.b")?;
        let row_table = bound.var("embed.pos.img_row")?;
        let col_table = bound.var("embed.pos.img_col")?;
        let pr = g.embedding(row_table, &row_ids)?;
        let pc = g.embedding(col_table, &col_ids)?;
        x = g.add(x, pr)?;
        x = g.add(x, pc)?;
        let m = bound.var(modality)?;
        g.add_bias(x, m)
    };
    let img_tokens = g.constant(inputs.image_tokens.clone());
    let image = embed_segment(g, img_tokens, "embed.modality.image")?;

    let mut segments = vec![text, image];
    if let Some(c) = inputs.condition_tokens {
        let cond_tokens = g.constant(c.clone());
        // condition keeps the image 2-D positions, offset by its own segment
        // embedding; tokens stay clean but share the t_img modulation
        segments.push(embed_segment(g, cond_tokens, "embed.modality.cond")?);
    }
    let mut x = g.concat_rows(&segments)?;

    // timestep embedding
    let tfeat = g.constant(sinusoidal_features::<T>(inputs.t_img, d));
    let tc = linear(g, bound, tfeat, "time.fc1.w", "time.fc1.b")?;
    let tc = g.gelu(tc)?;
    let tc = linear(g, bound, tc, "time.fc2.w", "time.fc2.b")?;

    let mut hook_image = None;
    let mut hook_text = None;
    for i in 0..cfg.n_blocks {
        let pre = format!("block{i}");
        // 6 modulation vectors from the time embedding
        let m = linear(g, bound, tc, &format!("{pre}.mod.w"), &format!("{pre}.mod.b"))?;
        let m = g.reshape(m, vec![6, d])?;
        let mut pieces = Vec::with_capacity(6);
        for j in 0..6 {
            let s = g.slice_rows(m, j, 1)?;
            pieces.push(g.reshape(s, vec![d])?);
        }
        let (shift1, scale1, gate1, shift2, scale2, gate2) =
            (pieces[0], pieces[1], pieces[2], pieces[3], pieces[4], pieces[5]);

        let ln1 = g.layer_norm(x)?;
        let h = modulate(g, ln1, shift1, scale1)?;
        let q = linear(g, bound, h, &format!("{pre}.attn.wq"), &format!("{pre}.attn.bq"))?;
        let k = linear(g, bound, h, &format!("{pre}.attn.wk"), &format!("{pre}.attn.bk"))?;
        let v = linear(g, bound, h, &format!("{pre}.attn.wv"), &format!("{pre}.attn.bv"))?;
        let qh = g.split_heads(q, cfg.n_heads)?;
        let kh = g.split_heads(k, cfg.n_heads)?;
        let vh = g.split_heads(v, cfg.n_heads)?;
        let att = g.sdpa(qh, kh, vh)?;
        let att = g.merge_heads(att)?;
        let att = linear(g, bound, att, &format!("{pre}.attn.wo"), &format!("{pre}.attn.bo"))?;
        let gated = g.mul_row(att, gate1)?;
        x = g.add(x, gated)?;

        let ln2 = g.layer_norm(x)?;
        let h2 = modulate(g, ln2, shift2, scale2)?;
        let h2 = linear(g, bound, h2, &format!("{pre}.mlp.fc1.w"), &format!("{pre}.mlp.fc1.b"))?;
        let h2 = g.gelu(h2)?;
        let h2 = linear(g, bound, h2, &format!("{pre}.mlp.fc2.w"), &format!("{pre}.mlp.fc2.b"))?;
        let gated2 = g.mul_row(h2, gate2)?;
        x = g.add(x, gated2)?;

        if i + 1 == cfg.hook() {
            hook_text = Some(g.slice_rows(x, 0, l_txt)?);
            hook_image = Some(g.slice_rows(x, l_txt, l_img)?);
        }
    }
    let hook_image = hook_image.expect("hook depth validated");
    let hook_text = hook_text.expect("hook depth validated");
    let hook_image_mean = g.mean_rows(hook_image)?;
    let hook_text_mean = g.mean_rows(hook_text)?;

    // velocity head over the image slice (time-modulated final layer)
    let x_img = g.slice_rows(x, l_txt, l_img)?;
    let ln_v = g.layer_norm(x_img)?;
    let hm = linear(g, bound, tc, "head.vel.mod.w", "head.vel.mod.b")?;
    let hm = g.reshape(hm, vec![2, d])?;
    let shift_v = g.slice_rows(hm, 0, 1)?;
    let shift_v = g.reshape(shift_v, vec![d])?;
    let scale_v = g.slice_rows(hm, 1, 1)?;
    let scale_v = g.reshape(scale_v, vec![d])?;
    let mod_v = modulate(g, ln_v, shift_v, scale_v)?;
    let velocity = linear(g, bound, mod_v, "head.vel.w", "head.vel.b")?;

    // logit head over the text slice
    let x_txt = g.slice_rows(x, 0, l_txt)?;
    let ln_t = g.layer_norm(x_txt)?;
    let logits = linear(g, bound, ln_t, "head.logit.w", "head.logit.b")?;

    // pooled, projected, L2-normalized output embeddings
    let pool = |g: &mut Graph<T>, slice: Var, w: &str| -> Result<Var> {
        let mean = g.mean_rows(slice)?;
        let mean = g.reshape(mean, vec![1, d])?;
        let wv = bound.var(w)?;
        let proj = g.matmul(mean, wv)?;
        let unit = g.l2_normalize_rows(proj)?;
        g.reshape(unit, vec![cfg.d_clip])
    };
    let pooled_image = pool(g, x_img, "pool.img.w")?;
    let pooled_text = pool(g, x_txt, "pool.txt.w")?;

    Ok(TraceVars {
        final_hidden: x,
        hook_image,
        hook_text,
        hook_image_mean,
        hook_text_mean,
        velocity,
        logits,
        pooled_image,
        pooled_text,
    })
}

/// Standalone forward: builds a graph, runs one pass, extracts values.
pub fn forward<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    inputs: &ForwardInputs<'_, T>,
) -> Result<ForwardTrace<T>> {
    instrument::count_forward();
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let t = forward_on_graph(&mut g, &bound, cfg, inputs)?;
    Ok(ForwardTrace {
        final_hidden: g.value(t.final_hidden).clone(),
        hook_image: g.value(t.hook_image).clone(),
        hook_text: g.value(t.hook_text).clone(),
        velocity: g.value(t.velocity).clone(),
        logits: g.value(t.logits).clone(),
        pooled_image: g.value(t.pooled_image).clone(),
        pooled_text: g.value(t.pooled_text).clone(),
    })
}
