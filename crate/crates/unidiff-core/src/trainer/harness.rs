//! Gradient-fidelity harness: finite-difference checks of every loss term
//! and the weighted total on a small model, shared by the CLI `gradcheck`
//! command and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::backbone::{init_model, ModelConfig};
use crate::datagen::{derive_task_pair, grammar_vocabulary, sample_scene, TaskKind};
use crate::error::Result;
use crate::numerics::{finite_diff_gradcheck, ParameterStore, RngState, Tensor};

use super::batch::{build_sample, Batch, CorruptionStreams};
use super::config::TrainConfig;
use super::step::{batch_loss_graph_kind, LossKind};

pub fn harness_model_config() -> ModelConfig {
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
        d_sem: crate::datagen::ATTRIBUTE_DIM,
    }
}

/// Init with zero-initialized tensors replaced by small noise so modulation
/// and gating paths carry gradient.
pub fn randomized_params(cfg: &ModelConfig, seed: u64) -> ParameterStore<f64> {
    let mut params: ParameterStore<f64> =
        init_model(cfg, &mut RngState::new(seed)).expect("valid harness config");
    let mut rng = RngState::new(seed ^ 0x55);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let t = params.get_mut(&name).expect("listed");
        if t.data().iter().all(|&x| x == 0.0) {
            *t = Tensor::trunc_normal(t.shape().to_vec(), 0.05, &mut rng).with_grad();
        }
    }
    params
}

/// Deterministic batch of task records for the harness.
pub fn harness_batch(cfg: &ModelConfig, n: usize, seed: u64, task: TaskKind) -> Batch<f64> {
    let vocab = grammar_vocabulary();
    let mut rng = RngState::new(seed);
    let mut streams = CorruptionStreams::new(seed ^ 0xABCD);
    let samples = (0..n)
        .map(|_| {
            let spec = sample_scene(&mut rng);
            let rec = derive_task_pair(&spec, task, cfg.image_size, &mut rng).expect("render");
            build_sample(&rec, cfg, &vocab, 0.0, &mut streams).expect("encode")
        })
        .collect();
    Batch { task, samples }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCheckResult {
    pub loss: String,
    pub max_rel_err: f64,
    pub checked_params: usize,
    pub pass: bool,
}

/// Check one loss kind at the given tolerance on >= `coords` coordinates per
/// parameter (64-bit, central differences with step 1e-5).
pub fn check_loss(
    kind: LossKind,
    seed: u64,
    coords: usize,
    tolerance: f64,
    task: TaskKind,
) -> Result<LossCheckResult> {
    let cfg = harness_model_config();
    let params = randomized_params(&cfg, seed);
    let train = TrainConfig { batch_size: 2, ..TrainConfig::default() };
    let batch = harness_batch(&cfg, 2, seed ^ 0x77, task);
    let report = finite_diff_gradcheck(
        &params,
        |g, b| batch_loss_graph_kind(g, b, &cfg, &train, &batch, kind),
        1e-5,
        tolerance,
        coords,
    )?;
    Ok(LossCheckResult {
        loss: format!("{kind:?}"),
        max_rel_err: report.max_rel_err(),
        checked_params: report.params.len(),
        pass: report.pass,
    })
}

pub const CHECKED_LOSSES: [LossKind; 5] = [
    LossKind::Image,
    LossKind::Text,
    LossKind::Cross,
    LossKind::Intrinsic,
    LossKind::Total,
];
