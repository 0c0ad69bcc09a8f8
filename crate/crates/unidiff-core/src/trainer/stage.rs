//! Stage execution: step loop, JSON-lines metrics, periodic checkpoints,
//! bit-exact resume, and the multi-stage pipeline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{init_model, save_checkpoint, Checkpoint};
use crate::datagen::load_dataset;
use crate::error::{Error, Result};
use crate::numerics::{RngState, Scalar};
use crate::tokenization::Vocabulary;

use super::batch::{hybrid_batch_sample, Batch, CorruptionStreams, DataPools, SamplerState};
use super::config::{RunConfig, StageSpec};
use super::step::training_step;

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub stage: String,
    pub stage_index: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub stage: String,
    #[serde(rename = "L_img")]
    pub l_img: f64,
    #[serde(rename = "L_txt")]
    pub l_txt: f64,
    #[serde(rename = "L_cross")]
    pub l_cross: f64,
    #[serde(rename = "L_intr")]
    pub l_intr: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn read_metrics(path: &Path) -> Result<(MetricsHeader, Vec<MetricsLine>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: MetricsHeader = serde_json::from_str(
        lines.next().ok_or_else(|| Error::Corrupt { detail: "empty metrics".into() })?,
    )
    .map_err(|e| Error::Corrupt { detail: e.to_string() })?;
    let entries = lines
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Corrupt { detail: e.to_string() }))
        .collect::<Result<Vec<MetricsLine>>>()?;
    Ok((header, entries))
}

/// Load every dataset a stage references into task pools.
pub fn load_stage_pools(data_dir: &Path, stage: &StageSpec) -> Result<DataPools> {
    let datasets = stage
        .datasets
        .iter()
        .map(|name| load_dataset(data_dir, name))
        .collect::<Result<Vec<_>>>()?;
    let pools = DataPools::from_datasets(datasets)?;
    for task in stage.mix.keys() {
        pools.pool(task)?; // configuration error if a requested pool is empty
    }
    Ok(pools)
}

fn save_with_state<T: Scalar>(
    ckpt: &mut Checkpoint<T>,
    sampler: &SamplerState,
    streams: &CorruptionStreams,
    stage_step: u64,
    dir: &Path,
) -> Result<()> {
    let mut counters = BTreeMap::new();
    sampler.to_counters(&mut counters);
    streams.to_counters(&mut counters);
    counters.insert("stage_step".into(), stage_step);
    ckpt.counters = counters;
    save_checkpoint(ckpt, dir)
}

/// Execute (the rest of) one stage. Returns the metrics file path.
pub fn run_stage<T: Scalar>(
    ckpt: &mut Checkpoint<T>,
    run: &RunConfig,
    stage_index: usize,
    pools: &DataPools,
    vocab: &Vocabulary,
    out_dir: &Path,
) -> Result<PathBuf> {
    let stage = &run.stages[stage_index];
    let train = &run.train;
    std::fs::create_dir_all(out_dir)?;

    let base_data_seed = train.data_seed.unwrap_or(train.seed);
    let stage_seed = ckpt.counters.get("stage_seed").copied().unwrap_or(base_data_seed);
    let mut sampler = SamplerState::from_counters(stage_seed, &ckpt.counters);
    let mut streams = CorruptionStreams::from_counters(stage_seed, &ckpt.counters);
    let mut stage_step = ckpt.counters.get("stage_step").copied().unwrap_or(0);

    let metrics_path = out_dir.join(format!("metrics_stage{stage_index}.jsonl"));
    let mut metrics = std::io::BufWriter::new(if stage_step == 0 {
        let mut f = std::fs::File::create(&metrics_path)?;
        let header = MetricsHeader {
            stage: stage.name.clone(),
            stage_index,
            steps: stage.steps,
            batch_size: train.batch_size,
            lr: train.lr,
            seed: train.seed,
        };
        writeln!(f, "{}", serde_json::to_string(&header).unwrap())?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    });

    let last_ckpt_dir = out_dir.join("ckpt_latest");
    while stage_step < stage.steps {
        let group: Vec<Batch<T>> = (0..train.accum_steps)
            .map(|_| {
                hybrid_batch_sample(
                    stage,
                    pools,
                    &ckpt.config,
                    vocab,
                    train.null_text_dropout,
                    &mut sampler,
                    &mut streams,
                    train.batch_size,
                )
            })
            .collect::<Result<_>>()?;
        let breakdown = training_step(&mut ckpt.params, &mut ckpt.opt, &ckpt.config, train, &group)
            .map_err(|e| Error::Aborted {
                step: ckpt.global_step,
                detail: e.to_string(),
                last_checkpoint: last_ckpt_dir.display().to_string(),
            })?;
        stage_step += 1;
        ckpt.global_step += 1;

        if stage_step % train.log_every == 0 {
            let line = MetricsLine {
                step: stage_step,
                stage: stage.name.clone(),
                l_img: breakdown.l_img,
                l_txt: breakdown.l_txt,
                l_cross: breakdown.l_cross,
                l_intr: breakdown.l_intr,
                total: breakdown.total,
                lr: train.lr,
            };
            writeln!(metrics, "{}", serde_json::to_string(&line).unwrap())?;
            metrics.flush()?;
        }
        if stage_step % train.ckpt_every == 0 && stage_step < stage.steps {
            save_with_state(ckpt, &sampler, &streams, stage_step, &last_ckpt_dir)?;
        }
    }
    save_with_state(ckpt, &sampler, &streams, stage_step, &last_ckpt_dir)?;
    Ok(metrics_path)
}

/// Chain all stages; optimizer state carries across stage boundaries, data
/// cursors reset per stage.
pub fn run_pipeline<T: Scalar>(
    run: &RunConfig,
    resume: Option<Checkpoint<T>>,
    out_dir: &Path,
) -> Result<Checkpoint<T>> {
    run.validate()?;
    let vocab = crate::datagen::grammar_vocabulary();
    if run.model.vocab_size != vocab.size() {
        return Err(Error::config(
            "model.vocab_size",
            format!("must equal the grammar vocabulary size {}", vocab.size()),
        ));
    }
    let mut ckpt = match resume {
        Some(c) => c,
        None => {
            let mut rng = RngState::new(run.train.seed).substream("init");
            let params = init_model::<T>(&run.model, &mut rng)?;
            Checkpoint::fresh(run.model.clone(), params)
        }
    };
    let data_dir = Path::new(&run.data_dir);
    while ckpt.stage_index < run.stages.len() {
        let idx = ckpt.stage_index;
        let pools = load_stage_pools(data_dir, &run.stages[idx])?;
        run_stage(&mut ckpt, run, idx, &pools, &vocab, out_dir)?;
        ckpt.stage_index += 1;
        // new stage: fresh data cursors, fresh corruption counters, same optimizer
        let keep_seed = run.train.data_seed.unwrap_or(run.train.seed)
            ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let sampler = SamplerState::new(keep_seed);
        let streams = CorruptionStreams::new(keep_seed);
        let mut counters = BTreeMap::new();
        sampler.to_counters(&mut counters);
        streams.to_counters(&mut counters);
        counters.insert("stage_step".into(), 0);
        ckpt.counters = counters;
        ckpt.counters.insert("stage_seed".into(), keep_seed);
        save_checkpoint(&ckpt, &out_dir.join(format!("ckpt_stage{idx}")))?;
    }
    save_checkpoint(&ckpt, &out_dir.join("ckpt_final"))?;
    Ok(ckpt)
}
