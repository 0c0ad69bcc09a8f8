//! Manual diagnostics against a trained checkpoint; not part of the default
//! test pass. Run with:
//!   UNIDIFF_PROBE_CKPT=path cargo test --test probe -- --ignored --nocapture

use unidiff_core::backbone::{forward, load_checkpoint, Checkpoint, ForwardInputs, Mode};
use unidiff_core::datagen::{caption_scene_canonical, oracle_parse, render_scene, sample_scene};
use unidiff_core::diffusion::flow_corrupt;
use unidiff_core::numerics::{RngState, Tensor};
use unidiff_core::tokenization::{encode_text, grid_from_tokens, patchify, unpatchify};

#[test]
#[ignore = "diagnostic; needs UNIDIFF_PROBE_CKPT"]
fn denoise_reconstruction_fidelity() {
    let path = std::env::var("UNIDIFF_PROBE_CKPT").expect("set UNIDIFF_PROBE_CKPT");
    let ckpt: Checkpoint<f32> = load_checkpoint(std::path::Path::new(&path)).unwrap();
    let vocab = unidiff_core::datagen::grammar_vocabulary();
    let cfg = &ckpt.config;
    let mut rng = RngState::new(99);
    for &t in &[0.2f64, 0.4, 0.6, 0.8] {
        let mut err_sum = 0.0;
        let mut parse_hits = 0;
        let n = 20;
        for i in 0..n {
            let spec = sample_scene(&mut rng);
            let img = render_scene(&spec, cfg.image_size).unwrap();
            let caption = caption_scene_canonical(&spec);
            let text = encode_text(&caption, &vocab, cfg.l_txt).unwrap();
            let clean = patchify::<f32>(&img, cfg.patch).unwrap().tokens;
            let mut frng = RngState::new(1000 + i);
            let fs = flow_corrupt(&clean, t, &mut frng);
            let tr = forward(
                &ckpt.params,
                cfg,
                &ForwardInputs {
                    text_ids: &text.ids,
                    image_tokens: &fs.corrupted,
                    condition_tokens: None,
                    t_img: t,
                    mode: Mode::ImageDenoise,
                },
            )
            .unwrap();
            // x0_hat = x_t - t * v_hat
            let x0 = Tensor::from_fn(clean.shape().to_vec(), |j| {
                fs.corrupted.data()[j] - (t as f32) * tr.velocity.data()[j]
            });
            let mse: f64 = x0
                .data()
                .iter()
                .zip(clean.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / clean.numel() as f64;
            err_sum += mse;
            let mut rec =
                unpatchify(&grid_from_tokens(x0, cfg.grid(), cfg.grid(), cfg.patch).unwrap());
            rec.clamp();
            if oracle_parse(&rec).spec == spec {
                parse_hits += 1;
            }
        }
        println!(
            "t={t:.1}: recon MSE {:.4}, exact parse {}/{}",
            err_sum / n as f64,
            parse_hits,
            n
        );
    }
}

#[test]
#[ignore = "diagnostic; needs UNIDIFF_PROBE_CKPT"]
fn velocity_field_error_along_euler_path() {
    let path = std::env::var("UNIDIFF_PROBE_CKPT").expect("set UNIDIFF_PROBE_CKPT");
    let ckpt: Checkpoint<f32> = load_checkpoint(std::path::Path::new(&path)).unwrap();
    let vocab = unidiff_core::datagen::grammar_vocabulary();
    let cfg = &ckpt.config;
    let mut rng = RngState::new(5);
    let spec = sample_scene(&mut rng);
    let caption = caption_scene_canonical(&spec);
    let text = encode_text(&caption, &vocab, cfg.l_txt).unwrap();
    // the three background variants this caption is consistent with
    let modes: Vec<Tensor<f32>> = unidiff_core::datagen::scene::BACKGROUNDS
        .iter()
        .map(|&b| {
            let s = unidiff_core::datagen::SceneSpec::new(spec.objects.clone(), b);
            patchify::<f32>(&render_scene(&s, cfg.image_size).unwrap(), cfg.patch)
                .unwrap()
                .tokens
        })
        .collect();
    let steps = 20;
    let mut x = Tensor::<f32>::randn(vec![cfg.l_img(), cfg.patch_dim()], &mut rng);
    for s in (1..=steps).rev() {
        let t = s as f64 / steps as f64;
        let tr = forward(
            &ckpt.params,
            cfg,
            &ForwardInputs {
                text_ids: &text.ids,
                image_tokens: &x,
                condition_tokens: None,
                t_img: t,
                mode: Mode::ImageDenoise,
            },
        )
        .unwrap();
        // exact posterior velocity over the 3 background modes
        let tf = t as f32;
        let mut weights = Vec::new();
        for m in &modes {
            let d2: f64 = x
                .data()
                .iter()
                .zip(m.data())
                .map(|(xi, mi)| (((xi - (1.0 - tf) * mi) / tf) as f64).powi(2))
                .sum();
            weights.push(-0.5 * d2);
        }
        let mx = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = weights.iter().map(|w| (w - mx).exp()).collect();
        let wsum: f64 = ws.iter().sum();
        let oracle = Tensor::<f32>::from_fn(x.shape().to_vec(), |j| {
            let mut v = 0.0f64;
            for (k, m) in modes.iter().enumerate() {
                let eps = (x.data()[j] - (1.0 - tf) * m.data()[j]) / tf;
                v += ws[k] / wsum * f64::from(eps - m.data()[j]);
            }
            v as f32
        });
        let err: f64 = tr
            .velocity
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / oracle.numel() as f64;
        let vnorm: f64 = oracle.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
            / oracle.numel() as f64;
        println!("t={t:.2}: velocity MSE {err:.4} (oracle power {vnorm:.3})");
        x = Tensor::from_fn(x.shape().to_vec(), |j| {
            x.data()[j] - (1.0 / steps as f32) * tr.velocity.data()[j]
        });
    }
    let mut img = unpatchify(&grid_from_tokens(x, cfg.grid(), cfg.grid(), cfg.patch).unwrap());
    img.clamp();
    let parsed = oracle_parse(&img);
    println!("final parse: {:?} vs target {:?}", parsed.spec, spec);
}
