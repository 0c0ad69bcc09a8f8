//! The dual-pass training step. Production path: one forward graph per
//! (sample, pass) built in parallel, a tiny coupling graph for the
//! contrastive term, then seeded per-sample backwards reduced in fixed
//! order — bit-deterministic for any thread count. A single-graph builder
//! for each loss also exists for gradient checking and cross-route tests.

use rayon::prelude::*;

use crate::alignment::{contrastive_loss_graph, contrastive_loss_value, intrinsic_cos_term};
use crate::backbone::{forward_on_graph, ForwardInputs, Mode, ModelConfig};
use crate::diffusion::{flow_matching_loss_graph, masked_diffusion_loss_graph};
use crate::error::{Error, Result};
use crate::instrument;
use crate::numerics::{
    adamw_step, AdamWConfig, AdamWState, BoundParams, GradMap, Graph, ParameterStore, Scalar,
    Tensor, Var,
};

use super::batch::{Batch, BatchSample};
use super::config::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_img: f64,
    pub l_txt: f64,
    pub l_cross: f64,
    pub l_intr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(l_img: f64, l_txt: f64, l_cross: f64, l_intr: f64, t: &TrainConfig) -> Self {
        let total = l_img + t.lambda1 * l_txt + t.lambda2 * l_cross + t.lambda3 * l_intr;
        LossBreakdown { l_img, l_txt, l_cross, l_intr, total }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PassKind {
    Image,
    Text,
}

/// Build one pass for one sample on a graph; returns (branch loss, optional
/// intrinsic cosine term, pooled output embedding).
fn build_pass_on<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    sample: &BatchSample<T>,
    kind: PassKind,
) -> Result<(Var, Option<Var>, Var)> {
    match kind {
        PassKind::Image => {
            let tv = forward_on_graph(
                g,
                bound,
                cfg,
                &ForwardInputs {
                    text_ids: &sample.image_pass_text,
                    image_tokens: &sample.flow.corrupted,
                    condition_tokens: sample.condition_tokens.as_ref(),
                    t_img: sample.t_img,
                    mode: Mode::ImageDenoise,
                },
            )?;
            let loss = flow_matching_loss_graph(g, tv.velocity, &sample.flow.target_velocity)?;
            let intr = intrinsic_cos_term(
                g,
                bound,
                "align.img",
                tv.hook_image_mean,
                &sample.teacher.h_image,
                sample.teacher.image_ok,
            )?;
            Ok((loss, intr, tv.pooled_image))
        }
        PassKind::Text => {
            let tv = forward_on_graph(
                g,
                bound,
                cfg,
                &ForwardInputs {
                    text_ids: &sample.mask.corrupted_ids,
                    image_tokens: &sample.clean_image_tokens,
                    condition_tokens: None,
                    // clean image context sits at t = 0 on the flow path
                    t_img: 0.0,
                    mode: Mode::TextDenoise,
                },
            )?;
            let loss = masked_diffusion_loss_graph(g, tv.logits, &sample.mask)?;
            let intr = intrinsic_cos_term(
                g,
                bound,
                "align.txt",
                tv.hook_text_mean,
                &sample.teacher.h_text,
                sample.teacher.text_ok,
            )?;
            Ok((loss, intr, tv.pooled_text))
        }
    }
}

// ---- single-graph route (gradcheck and algebraic tests) ---------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Image,
    Text,
    Cross,
    Intrinsic,
    Total,
}

/// Build the requested batch loss in one graph. The total reuses one pair of
/// forwards per sample for all four components.
pub fn batch_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    train: &TrainConfig,
    batch: &Batch<T>,
) -> Result<Var> {
    batch_loss_graph_kind(g, bound, cfg, train, batch, LossKind::Total)
}

pub fn batch_loss_graph_kind<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    train: &TrainConfig,
    batch: &Batch<T>,
    kind: LossKind,
) -> Result<Var> {
    let n = batch.samples.len();
    let inv_n = T::from_f64(1.0 / n as f64);
    let needs_image = matches!(kind, LossKind::Image | LossKind::Cross | LossKind::Intrinsic | LossKind::Total);
    let needs_text = matches!(kind, LossKind::Text | LossKind::Cross | LossKind::Intrinsic | LossKind::Total);

    let mut img_losses = Vec::new();
    let mut txt_losses = Vec::new();
    let mut intr_terms = Vec::new();
    let mut pooled_i = Vec::new();
    let mut pooled_t = Vec::new();
    for s in &batch.samples {
        if needs_image {
            let (loss, intr, pooled) = build_pass_on(g, bound, cfg, s, PassKind::Image)?;
            img_losses.push(loss);
            intr_terms.extend(intr);
            let d = g.value(pooled).numel();
            pooled_i.push(g.reshape(pooled, vec![1, d])?);
        }
        if needs_text {
            let (loss, intr, pooled) = build_pass_on(g, bound, cfg, s, PassKind::Text)?;
            txt_losses.push(loss);
            intr_terms.extend(intr);
            let d = g.value(pooled).numel();
            pooled_t.push(g.reshape(pooled, vec![1, d])?);
        }
    }

    let mean_of = |g: &mut Graph<T>, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        g.scale(acc, inv_n)
    };

    match kind {
        LossKind::Image => mean_of(g, &img_losses),
        LossKind::Text => mean_of(g, &txt_losses),
        LossKind::Cross => {
            let i_o = g.concat_rows(&pooled_i)?;
            let t_o = g.concat_rows(&pooled_t)?;
            contrastive_loss_graph(g, i_o, t_o, train.temperature)
        }
        LossKind::Intrinsic => {
            if intr_terms.is_empty() {
                return Ok(g.scalar_const(T::zero()));
            }
            let mut acc = intr_terms[0];
            for &t in &intr_terms[1..] {
                acc = g.add(acc, t)?;
            }
            g.scale(acc, -inv_n)
        }
        LossKind::Total => {
            let l_img = mean_of(g, &img_losses)?;
            let l_txt = mean_of(g, &txt_losses)?;
            let i_o = g.concat_rows(&pooled_i)?;
            let t_o = g.concat_rows(&pooled_t)?;
            let l_cross = contrastive_loss_graph(g, i_o, t_o, train.temperature)?;
            let l_intr = if intr_terms.is_empty() {
                g.scalar_const(T::zero())
            } else {
                let mut acc = intr_terms[0];
                for &t in &intr_terms[1..] {
                    acc = g.add(acc, t)?;
                }
                g.scale(acc, -inv_n)?
            };
            let t1 = g.scale(l_txt, T::from_f64(train.lambda1))?;
            let t2 = g.scale(l_cross, T::from_f64(train.lambda2))?;
            let t3 = g.scale(l_intr, T::from_f64(train.lambda3))?;
            let s = g.add(l_img, t1)?;
            let s = g.add(s, t2)?;
            g.add(s, t3)
        }
    }
}

// ---- production two-phase route ---------------------------------------------

struct PassGraph<T: Scalar> {
    graph: Graph<T>,
    bound: BoundParams,
    loss: Var,
    intr: Option<Var>,
    pooled: Var,
    loss_value: f64,
    intr_value: f64,
}

fn build_pass<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    sample: &BatchSample<T>,
    kind: PassKind,
) -> Result<PassGraph<T>> {
    let mut graph = Graph::new();
    let bound = BoundParams::bind(&mut graph, params);
    let (loss, intr, pooled) = build_pass_on(&mut graph, &bound, cfg, sample, kind)?;
    let loss_value = graph.value(loss).item().as_f64();
    let intr_value = intr.map_or(0.0, |v| graph.value(v).item().as_f64());
    Ok(PassGraph { graph, bound, loss, intr, pooled, loss_value, intr_value })
}

pub struct StepOutput<T> {
    pub breakdown: LossBreakdown,
    pub grads: GradMap<T>,
}

/// Forward both passes, couple the batch through the contrastive term, and
/// return Eq.-5 gradients plus the loss breakdown.
pub fn compute_grads<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    train: &TrainConfig,
    batch: &Batch<T>,
) -> Result<StepOutput<T>> {
    let n = batch.samples.len();
    if n == 0 {
        return Err(Error::shape("training_step", "empty batch".to_string()));
    }
    // two forward invocations per step: one image pass, one text pass
    instrument::count_forward();
    instrument::count_forward();

    let jobs: Vec<(usize, PassKind)> = (0..n)
        .map(|i| (i, PassKind::Image))
        .chain((0..n).map(|i| (i, PassKind::Text)))
        .collect();
    let mut passes: Vec<PassGraph<T>> = jobs
        .par_iter()
        .map(|&(i, kind)| build_pass(params, cfg, &batch.samples[i], kind))
        .collect::<Result<_>>()?;
    let (img_passes, txt_passes) = passes.split_at_mut(n);

    // phase 2: the only cross-sample term
    let d_clip = params.get("pool.img.w")?.shape()[1];
    let stack = |items: &[PassGraph<T>], pick: fn(&PassGraph<T>) -> Var| -> Tensor<T> {
        let mut data = Vec::with_capacity(items.len() * d_clip);
        for p in items {
            data.extend_from_slice(p.graph.value(pick(p)).data());
        }
        Tensor::new(vec![items.len(), d_clip], data).expect("pooled stack")
    };
    let i_o = stack(img_passes, |p| p.pooled);
    let t_o = stack(txt_passes, |p| p.pooled);

    let (l_cross, cross_grads) = if n >= 2 && train.lambda2 > 0.0 {
        let mut cg = Graph::new();
        let iv = cg.leaf(i_o.clone().with_grad());
        let tv = cg.leaf(t_o.clone().with_grad());
        let loss = contrastive_loss_graph(&mut cg, iv, tv, train.temperature)?;
        let value = cg.value(loss).item().as_f64();
        cg.backward(loss)?;
        (value, Some((cg.grad_or_zero(iv), cg.grad_or_zero(tv))))
    } else if n >= 2 {
        (contrastive_loss_value(&i_o.cast::<f64>(), &t_o.cast::<f64>(), train.temperature), None)
    } else {
        (0.0, None)
    };

    // phase 1 backwards with Eq.-5 cotangents
    let inv_n = 1.0 / n as f64;
    let seed_scalar = |v: f64| Tensor::scalar(T::from_f64(v));
    let run_backward = |p: &mut PassGraph<T>,
                        loss_w: f64,
                        cross_row: Option<Tensor<T>>|
     -> Result<()> {
        let mut seeds = vec![(p.loss, seed_scalar(loss_w))];
        if let Some(intr) = p.intr {
            // L_intr = -(1/N) Σ terms, weighted by λ3
            seeds.push((intr, seed_scalar(-train.lambda3 * inv_n)));
        }
        if let Some(row) = cross_row {
            seeds.push((p.pooled, row));
        }
        p.graph.backward_seeded(&seeds)
    };
    let lambda2 = train.lambda2;
    img_passes
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let row = cross_grads.as_ref().map(|(gi, _)| {
                Tensor::from_fn(vec![d_clip], |j| {
                    gi.data()[i * d_clip + j] * T::from_f64(lambda2)
                })
            });
            run_backward(p, inv_n, row)
        })
        .collect::<Result<()>>()?;
    txt_passes
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let row = cross_grads.as_ref().map(|(_, gt)| {
                Tensor::from_fn(vec![d_clip], |j| {
                    gt.data()[i * d_clip + j] * T::from_f64(lambda2)
                })
            });
            run_backward(p, train.lambda1 * inv_n, row)
        })
        .collect::<Result<()>>()?;

    // fixed-order reduction: image passes then text passes, each in sample order
    let mut grads = params.zero_grads();
    for p in passes.iter() {
        for (name, &var) in p.bound.iter() {
            if let Some(g) = p.graph.grad(var) {
                grads.get_mut(name).expect("grads cover params").add_assign(g);
            }
        }
    }

    let l_img = passes[..n].iter().map(|p| p.loss_value).sum::<f64>() * inv_n;
    let l_txt = passes[n..].iter().map(|p| p.loss_value).sum::<f64>() * inv_n;
    let l_intr = -passes.iter().map(|p| p.intr_value).sum::<f64>() * inv_n;
    let breakdown = LossBreakdown::compose(l_img, l_txt, l_cross, l_intr, train);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { kernel: "training_step" });
    }
    Ok(StepOutput { breakdown, grads })
}

/// One optimizer update from one accumulation group of batches.
pub fn training_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    opt: &mut AdamWState<T>,
    cfg: &ModelConfig,
    train: &TrainConfig,
    batches: &[Batch<T>],
) -> Result<LossBreakdown> {
    debug_assert!(!batches.is_empty());
    let mut acc: Option<GradMap<T>> = None;
    let mut sums = [0.0f64; 4];
    for batch in batches {
        let out = compute_grads(params, cfg, train, batch)?;
        sums[0] += out.breakdown.l_img;
        sums[1] += out.breakdown.l_txt;
        sums[2] += out.breakdown.l_cross;
        sums[3] += out.breakdown.l_intr;
        match &mut acc {
            None => acc = Some(out.grads),
            Some(a) => {
                for (name, g) in &out.grads {
                    a.get_mut(name).expect("same keys").add_assign(g);
                }
            }
        }
    }
    let k = batches.len() as f64;
    let mut grads = acc.expect("non-empty group");
    if batches.len() > 1 {
        let scale = T::from_f64(1.0 / k);
        for g in grads.values_mut() {
            g.scale_assign(scale);
        }
    }
    let opt_cfg = AdamWConfig {
        lr: train.lr,
        weight_decay: train.weight_decay,
        ..AdamWConfig::default()
    };
    adamw_step(params, &grads, opt, &opt_cfg)?;
    Ok(LossBreakdown::compose(
        sums[0] / k,
        sums[1] / k,
        sums[2] / k,
        sums[3] / k,
        train,
    ))
}
