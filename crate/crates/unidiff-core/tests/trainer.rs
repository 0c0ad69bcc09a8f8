//! Trainer contracts: objective composition, gradient fidelity of the
//! production route, forward-count invariants, hook-depth gradient locality,
//! live conditioning, and bit-exact resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use unidiff_core::backbone::{init_model, load_checkpoint, Checkpoint, ModelConfig};
use unidiff_core::datagen::{
    derive_task_pair, generate_dataset, grammar_vocabulary, sample_scene, DatasetPlan, TaskKind,
};
use unidiff_core::instrument;
use unidiff_core::numerics::{
    finite_diff_gradcheck, forward_backward, ParameterStore, RngState, Scalar, Tensor,
};
use unidiff_core::trainer::{
    batch_loss_graph, batch_loss_graph_kind, compute_grads, read_metrics, run_pipeline, run_stage,
    Batch, CorruptionStreams, LossKind, RunConfig, StageSpec, TrainConfig,
};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        n_blocks: 2,
        n_heads: 2,
        l_txt: 16,
        image_size: 16,
        patch: 2,
        vocab_size: grammar_vocabulary().size(),
        hook_depth: None,
        d_clip: 8,
        d_sem: 12,
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig { batch_size: 2, seed: 5, ..TrainConfig::default() }
}

/// Random batch of n t2i samples (optionally edit samples for conditioning).
fn make_batch<T: Scalar>(cfg: &ModelConfig, n: usize, seed: u64, task: TaskKind) -> Batch<T> {
    let vocab = grammar_vocabulary();
    let mut rng = RngState::new(seed);
    let mut streams = CorruptionStreams::new(seed ^ 0xABCD);
    let samples = (0..n)
        .map(|_| {
            let spec = sample_scene(&mut rng);
            let rec = derive_task_pair(&spec, task, cfg.image_size, &mut rng).unwrap();
            unidiff_core::trainer::build_sample(&rec, cfg, &vocab, 0.0, &mut streams).unwrap()
        })
        .collect();
    Batch { task, samples }
}

/// Init with every zero-initialized tensor replaced by small noise, so tests
/// that need live attention/modulation paths are meaningful.
fn randomized_params(cfg: &ModelConfig, seed: u64) -> ParameterStore<f64> {
    let mut params: ParameterStore<f64> = init_model(cfg, &mut RngState::new(seed)).unwrap();
    let mut rng = RngState::new(seed ^ 0x55);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let t = params.get_mut(&name).unwrap();
        if t.data().iter().all(|&x| x == 0.0) {
            *t = Tensor::trunc_normal(t.shape().to_vec(), 0.05, &mut rng).with_grad();
        }
    }
    params
}

#[test]
fn degenerate_weights_make_total_equal_image_loss_bit_exactly() {
    let cfg = tiny_config();
    let params: ParameterStore<f64> = init_model(&cfg, &mut RngState::new(1)).unwrap();
    let train =
        TrainConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, batch_size: 2, ..train_cfg() };
    let batch = make_batch::<f64>(&cfg, 2, 11, TaskKind::T2i);
    let out = compute_grads(&params, &cfg, &train, &batch).unwrap();
    assert_eq!(out.breakdown.total.to_bits(), out.breakdown.l_img.to_bits());
}

#[test]
fn composition_is_exact_for_paper_weights() {
    let cfg = tiny_config();
    let params = randomized_params(&cfg, 2);
    let train = train_cfg();
    let batch = make_batch::<f64>(&cfg, 3, 13, TaskKind::T2i);
    let out = compute_grads(&params, &cfg, &train, &batch).unwrap();
    let b = out.breakdown;
    let recomputed = b.l_img + 0.2 * b.l_txt + 0.05 * b.l_cross + 0.1 * b.l_intr;
    assert!((b.total - recomputed).abs() < 1e-12);
}

#[test]
fn exactly_two_forward_invocations_per_step() {
    let cfg = tiny_config();
    let params: ParameterStore<f64> = init_model(&cfg, &mut RngState::new(3)).unwrap();
    let batch = make_batch::<f64>(&cfg, 2, 17, TaskKind::T2i);
    instrument::reset();
    let _ = compute_grads(&params, &cfg, &train_cfg(), &batch).unwrap();
    let c = instrument::snapshot();
    assert_eq!(c.forward_evals, 2, "one image pass + one text pass");
}

#[test]
fn two_route_gradients_agree() {
    // production two-phase route vs the single-graph total
    let cfg = tiny_config();
    let params = randomized_params(&cfg, 4);
    let train = train_cfg();
    let batch = make_batch::<f64>(&cfg, 2, 19, TaskKind::T2i);
    let out = compute_grads(&params, &cfg, &train, &batch).unwrap();
    let (loss_single, grads_single) = forward_backward(&params, |g, b| {
        batch_loss_graph(g, b, &cfg, &train, &batch)
    })
    .unwrap();
    assert!(
        (loss_single - out.breakdown.total).abs() <= 1e-9 * loss_single.abs().max(1.0),
        "loss mismatch: {loss_single} vs {}",
        out.breakdown.total
    );
    for (name, g1) in &out.grads {
        let g2 = grads_single.get(name).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            let scale = a.abs().max(b.abs()).max(1e-6);
            assert!((a - b).abs() / scale < 1e-8, "`{name}`: {a} vs {b}");
        }
    }
}

#[test]
fn gradcheck_total_loss_small_model() {
    let cfg = tiny_config();
    let params = randomized_params(&cfg, 6);
    let train = train_cfg();
    let batch = make_batch::<f64>(&cfg, 2, 23, TaskKind::T2i);
    let report = finite_diff_gradcheck(
        &params,
        |g, b| batch_loss_graph(g, b, &cfg, &train, &batch),
        1e-5,
        1e-4,
        8,
    )
    .unwrap();
    for f in report.failures() {
        eprintln!("gradcheck fail: {} rel {:.3e} coord {}", f.name, f.max_rel_err, f.worst_coord);
    }
    assert!(report.pass, "max rel err {:.3e}", report.max_rel_err());
}

#[test]
fn intrinsic_gradients_vanish_above_hook_depth() {
    let cfg = tiny_config(); // hook = ceil(2/2) = 1, so block1 is "deeper"
    assert_eq!(cfg.hook(), 1);
    let params = randomized_params(&cfg, 7);
    let train = train_cfg();
    let batch = make_batch::<f64>(&cfg, 2, 29, TaskKind::T2i);
    let (_, grads) = forward_backward(&params, |g, b| {
        batch_loss_graph_kind(g, b, &cfg, &train, &batch, LossKind::Intrinsic)
    })
    .unwrap();
    for (name, g) in &grads {
        let deep = name.starts_with("block1.")
            || name.starts_with("head.")
            || name.starts_with("pool.");
        if deep {
            assert!(
                g.data().iter().all(|&x| x == 0.0),
                "gradient leaked into `{name}`"
            );
        }
    }
    // and it does flow into the heads M and shallow blocks
    let m_grad = grads.get("align.img.fc2.w").unwrap();
    assert!(m_grad.data().iter().any(|&x| x != 0.0));
    let b0 = grads.get("block0.attn.wq").unwrap();
    assert!(b0.data().iter().any(|&x| x != 0.0));
}

#[test]
fn caption_conditioning_is_live() {
    // permuting captions against their images changes L_img on a randomized
    // model (attention mixes text into the image slice)
    let cfg = tiny_config();
    let params = randomized_params(&cfg, 8);
    let train =
        TrainConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, batch_size: 2, ..train_cfg() };
    let batch = make_batch::<f64>(&cfg, 2, 31, TaskKind::T2i);
    let mut permuted = batch.clone();
    let t0 = permuted.samples[0].image_pass_text.clone();
    permuted.samples[0].image_pass_text = permuted.samples[1].image_pass_text.clone();
    permuted.samples[1].image_pass_text = t0;
    let a = compute_grads(&params, &cfg, &train, &batch).unwrap().breakdown.l_img;
    let b = compute_grads(&params, &cfg, &train, &permuted).unwrap().breakdown.l_img;
    assert!((a - b).abs() > 1e-12, "caption permutation did not change L_img: {a} vs {b}");
}

#[test]
fn edit_batches_carry_uniform_condition_tokens() {
    let cfg = tiny_config();
    let batch = make_batch::<f64>(&cfg, 3, 37, TaskKind::Edit);
    assert!(batch.samples.iter().all(|s| s.condition_tokens.is_some()));
    let params = randomized_params(&cfg, 9);
    let out = compute_grads(&params, &cfg, &train_cfg(), &batch).unwrap();
    assert!(out.breakdown.total.is_finite());
}

// ---- stage / pipeline tests -------------------------------------------------

fn tmp(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("unidiff_trainer_{tag}"));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn small_run_config(data_dir: &Path, steps: u64) -> RunConfig {
    RunConfig {
        model: tiny_config(),
        train: TrainConfig {
            batch_size: 2,
            log_every: 2,
            ckpt_every: 3,
            seed: 42,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        stages: vec![StageSpec {
            name: "pretrain".into(),
            steps,
            mix: [("t2i".to_string(), 0.5), ("i2t".to_string(), 0.5)].into_iter().collect(),
            datasets: vec!["pairs".into()],
        }],
        data_dir: data_dir.display().to_string(),
        sample: Default::default(),
        datasets: vec![],
    }
}

fn gen_pairs(dir: &Path) {
    generate_dataset(dir, "pairs", DatasetPlan::Pairs, 24, 16, 3).unwrap();
}

#[test]
fn zero_step_stage_leaves_params_unchanged() {
    let data = tmp("zerostep_data");
    gen_pairs(&data);
    let out = tmp("zerostep_out");
    let run = small_run_config(&data, 0);
    let ckpt = run_pipeline::<f32>(&run, None, &out).unwrap();
    let mut rng = RngState::new(run.train.seed).substream("init");
    let fresh: ParameterStore<f32> = init_model(&run.model, &mut rng).unwrap();
    assert_eq!(ckpt.params, fresh);
    assert_eq!(ckpt.global_step, 0);
}

#[test]
fn metrics_file_has_header_plus_steps_over_log_every_lines() {
    let data = tmp("metrics_data");
    gen_pairs(&data);
    let out = tmp("metrics_out");
    let run = small_run_config(&data, 6);
    run_pipeline::<f32>(&run, None, &out).unwrap();
    let (header, lines) = read_metrics(&out.join("metrics_stage0.jsonl")).unwrap();
    assert_eq!(header.steps, 6);
    assert_eq!(lines.len(), 3, "6 steps / log_every 2");
    for l in &lines {
        let recomputed = l.l_img + 0.2 * l.l_txt + 0.05 * l.l_cross + 0.1 * l.l_intr;
        assert!((l.total - recomputed).abs() < 1e-6);
    }
}

#[test]
fn interrupted_resume_equals_uninterrupted_run_bit_exactly() {
    let data = tmp("resume_data");
    gen_pairs(&data);

    // uninterrupted: 6 steps
    let out_full = tmp("resume_full");
    let run6 = small_run_config(&data, 6);
    let full = run_pipeline::<f32>(&run6, None, &out_full).unwrap();

    // interrupted: run 3 steps at the stage level, then resume to 6
    let out_part = tmp("resume_part");
    let vocab = grammar_vocabulary();
    let mut rng = RngState::new(run6.train.seed).substream("init");
    let params = init_model::<f32>(&run6.model, &mut rng).unwrap();
    let mut ckpt = Checkpoint::fresh(run6.model.clone(), params);
    let run3 = small_run_config(&data, 3);
    let pools = unidiff_core::trainer::load_stage_pools(std::path::Path::new(&run3.data_dir), &run3.stages[0]).unwrap();
    run_stage(&mut ckpt, &run3, 0, &pools, &vocab, &out_part).unwrap();
    drop(ckpt);

    let mut resumed: Checkpoint<f32> = load_checkpoint(&out_part.join("ckpt_latest")).unwrap();
    assert_eq!(resumed.counters.get("stage_step"), Some(&3));
    run_stage(&mut resumed, &run6, 0, &pools, &vocab, &out_part).unwrap();

    assert_eq!(resumed.params, full.params, "resumed parameters differ");
    assert_eq!(resumed.opt, full.opt, "optimizer state differs");
}

#[test]
fn same_seed_pipeline_is_bit_identical() {
    let data = tmp("det_data");
    gen_pairs(&data);
    let out1 = tmp("det_out1");
    let out2 = tmp("det_out2");
    let run = small_run_config(&data, 4);
    let a = run_pipeline::<f32>(&run, None, &out1).unwrap();
    let b = run_pipeline::<f32>(&run, None, &out2).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.opt, b.opt);
    let blob1 = std::fs::read(out1.join("ckpt_final/blob.bin")).unwrap();
    let blob2 = std::fs::read(out2.join("ckpt_final/blob.bin")).unwrap();
    assert_eq!(blob1, blob2);
}

#[test]
fn shared_weight_store_is_single_and_complete_after_steps() {
    let data = tmp("shared_data");
    gen_pairs(&data);
    let out = tmp("shared_out");
    let run = small_run_config(&data, 2);
    let ckpt = run_pipeline::<f32>(&run, None, &out).unwrap();
    let inventory = unidiff_core::backbone::parameter_inventory(&run.model);
    assert_eq!(ckpt.params.len(), inventory.len());
    let names: BTreeMap<String, ()> =
        inventory.into_iter().map(|(n, _, _)| (n, ())).collect();
    for name in ckpt.params.names() {
        assert!(names.contains_key(name), "unexpected parameter `{name}`");
    }
}
