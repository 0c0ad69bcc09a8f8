//! Backbone contracts: init counts, determinism, adaLN-zero behaviour, shape
//! and norm guarantees, checkpoint integrity.

use unidiff_core::backbone::{
    forward, init_model, load_checkpoint, save_checkpoint, Checkpoint, ForwardInputs, Mode,
    ModelConfig,
};
use unidiff_core::numerics::{ParameterStore, RngState, Tensor};
use unidiff_core::tokenization::{encode_text, BOS, MASK, PAD};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        n_blocks: 2,
        n_heads: 2,
        l_txt: 8,
        image_size: 16,
        patch: 2,
        vocab_size: 26,
        hook_depth: None,
        d_clip: 8,
        d_sem: 12,
    }
}

fn tiny_inputs(rng: &mut RngState) -> (Vec<usize>, Tensor<f64>) {
    let ids: Vec<usize> = vec![BOS, 5, 9, 3, 7, PAD, PAD, PAD];
    let img = Tensor::randn(vec![64, 12], rng);
    (ids, img)
}

/// Closed-form parameter count from the layer inventory.
fn expected_param_count(c: &ModelConfig) -> usize {
    let d = c.embed_dim;
    let v = c.vocab_size;
    let pd = c.patch * c.patch * 3;
    let grid = c.image_size / c.patch;
    let mlp = 4 * d;
    let embeddings = v * d          // text table
        + pd * d + d                // image linear-in
        + 3 * d                     // modality vectors
        + c.l_txt * d               // 1-D text positions
        + 2 * grid * d;             // factored 2-D image positions
    let time = 2 * (d * d + d);
    let per_block = 4 * (d * d + d)          // q,k,v,o
        + (d * mlp + mlp) + (mlp * d + d)    // mlp
        + d * 6 * d + 6 * d;                 // adaLN modulation
    let heads = (d * 2 * d + 2 * d)          // velocity modulation
        + d * pd + pd                        // velocity proj
        + d * v + v;                         // logit proj
    let align = 2 * ((d * 2 * d + 2 * d) + (2 * d * c.d_sem + c.d_sem));
    let pools = 2 * d * c.d_clip;
    embeddings + time + c.n_blocks * per_block + heads + align + pools
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = tiny_config();
    let store: ParameterStore<f64> = init_model(&cfg, &mut RngState::new(1)).unwrap();
    assert_eq!(store.total_elements(), expected_param_count(&cfg));
    let desk = ModelConfig { vocab_size: 26, ..ModelConfig::default() };
    let store: ParameterStore<f32> = init_model(&desk, &mut RngState::new(1)).unwrap();
    assert_eq!(store.total_elements(), expected_param_count(&desk));
}

#[test]
fn equal_seeds_give_bit_identical_stores() {
    let cfg = tiny_config();
    let a: ParameterStore<f32> = init_model(&cfg, &mut RngState::new(7)).unwrap();
    let b: ParameterStore<f32> = init_model(&cfg, &mut RngState::new(7)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_init_adaln_makes_outputs_time_independent() {
    let cfg = tiny_config();
    let params: ParameterStore<f64> = init_model(&cfg, &mut RngState::new(3)).unwrap();
    let mut rng = RngState::new(4);
    let (ids, img) = tiny_inputs(&mut rng);
    let run = |t: f64| {
        forward(
            &params,
            &cfg,
            &ForwardInputs {
                text_ids: &ids,
                image_tokens: &img,
                condition_tokens: None,
                t_img: t,
                mode: Mode::ImageDenoise,
            },
        )
        .unwrap()
    };
    let a = run(0.1);
    let b = run(0.9);
    assert_eq!(a.velocity, b.velocity);
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.final_hidden, b.final_hidden);
}

#[test]
fn forward_shapes_and_unit_norms() {
    let cfg = tiny_config();
    let params: ParameterStore<f64> = init_model(&cfg, &mut RngState::new(5)).unwrap();
    let mut rng = RngState::new(6);
    let (ids, img) = tiny_inputs(&mut rng);
    let tr = forward(
        &params,
        &cfg,
        &ForwardInputs {
            text_ids: &ids,
            image_tokens: &img,
            condition_tokens: None,
            t_img: 0.4,
            mode: Mode::ImageDenoise,
        },
    )
    .unwrap();
    assert_eq!(tr.velocity.shape(), &[64, 12]);
    assert_eq!(tr.logits.shape(), &[8, 26]);
    assert_eq!(tr.pooled_image.shape(), &[8]);
    assert_eq!(tr.pooled_text.shape(), &[8]);
    assert_eq!(tr.hook_image.shape(), &[64, 16]);
    assert_eq!(tr.hook_text.shape(), &[8, 16]);
    for pooled in [&tr.pooled_image, &tr.pooled_text] {
        let n: f64 = pooled.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "norm {n}");
    }
}

#[test]
fn condition_shape_mismatch_is_rejected() {
    let cfg = tiny_config();
    let params: ParameterStore<f64> = init_model(&cfg, &mut RngState::new(8)).unwrap();
    let mut rng = RngState::new(9);
    let (ids, img) = tiny_inputs(&mut rng);
    let bad = Tensor::randn(vec![32, 12], &mut rng);
    let err = forward(
        &params,
        &cfg,
        &ForwardInputs {
            text_ids: &ids,
            image_tokens: &img,
            condition_tokens: Some(&bad),
            t_img: 0.2,
            mode: Mode::ImageDenoise,
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("condition"), "{err}");
}

#[test]
fn per_sample_independence_under_batch_permutation() {
    // forwards are per-sample: any batch ordering is just a reordering of
    // identical single-sample computations
    let cfg = tiny_config();
    let params: ParameterStore<f64> = init_model(&cfg, &mut RngState::new(10)).unwrap();
    let mut rng = RngState::new(11);
    let samples: Vec<(Vec<usize>, Tensor<f64>)> = (0..4)
        .map(|i| {
            let mut ids = vec![BOS, 3 + i, 4 + i, PAD, PAD, PAD, PAD, PAD];
            ids.truncate(8);
            (ids, Tensor::randn(vec![64, 12], &mut rng))
        })
        .collect();
    let run = |s: &(Vec<usize>, Tensor<f64>)| {
        forward(
            &params,
            &cfg,
            &ForwardInputs {
                text_ids: &s.0,
                image_tokens: &s.1,
                condition_tokens: None,
                t_img: 0.5,
                mode: Mode::ImageDenoise,
            },
        )
        .unwrap()
        .velocity
    };
    let direct: Vec<_> = samples.iter().map(run).collect();
    let permuted: Vec<_> = [3usize, 0, 2, 1].iter().map(|&i| run(&samples[i])).collect();
    for (j, &i) in [3usize, 0, 2, 1].iter().enumerate() {
        assert_eq!(direct[i], permuted[j]);
    }
}

#[test]
fn both_modes_read_the_same_parameter_store() {
    // one store serves both passes; masked text + clean image vs clean text
    // + noised image traverse the identical parameter set
    let cfg = tiny_config();
    let params: ParameterStore<f64> = init_model(&cfg, &mut RngState::new(12)).unwrap();
    let before = params.clone();
    let mut rng = RngState::new(13);
    let (ids, img) = tiny_inputs(&mut rng);
    let masked: Vec<usize> = ids.iter().map(|&i| if i == 5 { MASK } else { i }).collect();
    let _img_pass = forward(
        &params,
        &cfg,
        &ForwardInputs {
            text_ids: &ids,
            image_tokens: &img,
            condition_tokens: None,
            t_img: 0.7,
            mode: Mode::ImageDenoise,
        },
    )
    .unwrap();
    let _txt_pass = forward(
        &params,
        &cfg,
        &ForwardInputs {
            text_ids: &masked,
            image_tokens: &img,
            condition_tokens: None,
            t_img: 0.0,
            mode: Mode::TextDenoise,
        },
    )
    .unwrap();
    assert_eq!(params, before, "forward must not mutate parameters");
    assert_eq!(params.len(), before.len());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny_config();
    let params: ParameterStore<f32> = init_model(&cfg, &mut RngState::new(14)).unwrap();
    let mut ckpt = Checkpoint::fresh(cfg, params);
    ckpt.global_step = 123;
    ckpt.stage_index = 1;
    ckpt.rng_streams.insert("data".into(), RngState { seed: 9, counter: 42 });
    ckpt.counters.insert("epoch.t2i".into(), 3);
    let dir = std::env::temp_dir().join("unidiff_ckpt_rt");
    let _ = std::fs::remove_dir_all(&dir);
    save_checkpoint(&ckpt, &dir).unwrap();
    let back: Checkpoint<f32> = load_checkpoint(&dir).unwrap();
    assert_eq!(back, ckpt);
}

#[test]
fn corrupted_blob_hash_fails_load() {
    let cfg = tiny_config();
    let params: ParameterStore<f32> = init_model(&cfg, &mut RngState::new(15)).unwrap();
    let ckpt = Checkpoint::fresh(cfg, params);
    let dir = std::env::temp_dir().join("unidiff_ckpt_corrupt");
    let _ = std::fs::remove_dir_all(&dir);
    save_checkpoint(&ckpt, &dir).unwrap();
    // flip one bit in the blob
    let blob_path = dir.join("blob.bin");
    let mut blob = std::fs::read(&blob_path).unwrap();
    blob[17] ^= 1;
    std::fs::write(&blob_path, blob).unwrap();
    let err = load_checkpoint::<f32>(&dir).unwrap_err();
    assert!(err.to_string().contains("hash"), "{err}");
}

#[test]
fn missing_tensor_is_a_schema_error_naming_it() {
    let cfg = tiny_config();
    let params: ParameterStore<f32> = init_model(&cfg, &mut RngState::new(16)).unwrap();
    let ckpt = Checkpoint::fresh(cfg, params);
    let dir = std::env::temp_dir().join("unidiff_ckpt_schema");
    let _ = std::fs::remove_dir_all(&dir);
    save_checkpoint(&ckpt, &dir).unwrap();
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).unwrap();
    // drop the velocity head entry from the tensor table
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let tensors = json["tensors"].as_array_mut().unwrap();
    tensors.retain(|t| t["name"] != "param.head.vel.w");
    std::fs::write(&mpath, serde_json::to_string(&json).unwrap()).unwrap();
    let err = load_checkpoint::<f32>(&dir).unwrap_err();
    assert!(err.to_string().contains("head.vel.w"), "{err}");
}

#[test]
fn null_text_sequence_encodes_to_all_pad() {
    let vocab = unidiff_core::datagen::grammar_vocabulary();
    let seq = encode_text("", &vocab, 8).unwrap();
    assert_eq!(seq.ids[0], BOS);
    assert!(seq.ids[1..].iter().all(|&i| i == PAD));
}
