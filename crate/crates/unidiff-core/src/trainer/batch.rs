//! Hybrid batch sampling: the task type is drawn per batch from the stage
//! proportions, records are drawn without replacement within an epoch, and
//! every cursor is checkpointable.

use std::collections::BTreeMap;

use crate::alignment::{teacher_features, TeacherFeatures};
use crate::backbone::ModelConfig;
use crate::datagen::{Dataset, TaskKind, TaskRecord};
use crate::diffusion::{flow_corrupt, mask_corrupt, FlowSample, MaskSample};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Scalar, Tensor};
use crate::tokenization::{encode_text, patchify, TextSequence, Vocabulary};

use super::config::StageSpec;

/// All loaded records, grouped by task.
pub struct DataPools {
    pools: BTreeMap<&'static str, Vec<TaskRecord>>,
    pub image_size: usize,
}

impl DataPools {
    pub fn from_datasets(datasets: Vec<Dataset>) -> Result<Self> {
        let mut pools: BTreeMap<&'static str, Vec<TaskRecord>> = BTreeMap::new();
        let mut image_size = 0;
        for ds in datasets {
            image_size = ds.manifest.image_size;
            for rec in ds.records {
                pools.entry(rec.task.name()).or_default().push(rec);
            }
        }
        Ok(DataPools { pools, image_size })
    }

    pub fn pool(&self, task: &str) -> Result<&[TaskRecord]> {
        match self.pools.get(task) {
            Some(p) if !p.is_empty() => Ok(p),
            _ => Err(Error::EmptyDataset { task: task.to_string() }),
        }
    }

    pub fn len(&self, task: &str) -> usize {
        self.pools.get(task).map_or(0, Vec::len)
    }
}

/// Without-replacement cursor over one task pool; the permutation for epoch e
/// is a pure function of (data seed, task, e), so (epoch, pos) fully resumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochCursor {
    pub epoch: u64,
    pub pos: usize,
}

impl EpochCursor {
    fn permutation(&self, data_seed: u64, task: &str, n: usize) -> Vec<usize> {
        let mut rng = RngState::new(data_seed).substream(&format!("perm/{task}/{}", self.epoch));
        rng.permutation(n)
    }
}

/// Checkpointable sampler state: a counter-based task stream plus one cursor
/// per task.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub data_seed: u64,
    pub task_stream: RngState,
    pub cursors: BTreeMap<String, EpochCursor>,
}

impl SamplerState {
    pub fn new(data_seed: u64) -> Self {
        SamplerState {
            data_seed,
            task_stream: RngState::new(data_seed).substream("task"),
            cursors: BTreeMap::new(),
        }
    }

    /// Flatten into checkpoint counters.
    pub fn to_counters(&self, counters: &mut BTreeMap<String, u64>) {
        counters.insert("sampler.task_stream".into(), self.task_stream.counter);
        for (task, c) in &self.cursors {
            counters.insert(format!("sampler.{task}.epoch"), c.epoch);
            counters.insert(format!("sampler.{task}.pos"), c.pos as u64);
        }
    }

    pub fn from_counters(data_seed: u64, counters: &BTreeMap<String, u64>) -> Self {
        let mut s = SamplerState::new(data_seed);
        if let Some(&c) = counters.get("sampler.task_stream") {
            s.task_stream.counter = c;
        }
        for task in ["t2i", "i2t", "edit", "perception"] {
            let (ek, pk) = (format!("sampler.{task}.epoch"), format!("sampler.{task}.pos"));
            if let (Some(&e), Some(&p)) = (counters.get(&ek), counters.get(&pk)) {
                s.cursors.insert(task.to_string(), EpochCursor { epoch: e, pos: p as usize });
            }
        }
        s
    }

    fn draw_task<'a>(&mut self, stage: &'a StageSpec) -> &'a str {
        let u = self.task_stream.uniform_f64();
        let mut acc = 0.0;
        let mut last = "t2i";
        for (task, p) in &stage.mix {
            acc += p;
            last = task;
            if u < acc {
                return task;
            }
        }
        last
    }

    fn take_indices(&mut self, task: &str, pool_len: usize, n: usize) -> Vec<usize> {
        let cursor = self
            .cursors
            .entry(task.to_string())
            .or_insert(EpochCursor { epoch: 0, pos: 0 });
        let mut out = Vec::with_capacity(n);
        let mut perm = cursor.permutation(self.data_seed, task, pool_len);
        while out.len() < n {
            if cursor.pos >= pool_len {
                cursor.epoch += 1;
                cursor.pos = 0;
                perm = cursor.permutation(self.data_seed, task, pool_len);
            }
            out.push(perm[cursor.pos]);
            cursor.pos += 1;
        }
        out
    }
}

/// One aligned training sample: both corrupted views plus conditioning and
/// frozen teacher features.
#[derive(Debug, Clone)]
pub struct BatchSample<T> {
    pub clean_text: TextSequence,
    pub mask: MaskSample,
    /// Text context of the image pass (instruction; all-PAD under dropout).
    pub image_pass_text: Vec<usize>,
    pub clean_image_tokens: Tensor<T>,
    pub flow: FlowSample<T>,
    pub condition_tokens: Option<Tensor<T>>,
    pub teacher: TeacherFeatures<T>,
    pub t_img: f64,
    pub t_txt: f64,
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub task: TaskKind,
    pub samples: Vec<BatchSample<T>>,
}

/// RNG streams that feed batch corruption; all checkpointable.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionStreams {
    pub flow: RngState,
    pub mask: RngState,
    pub dropout: RngState,
}

impl CorruptionStreams {
    pub fn new(seed: u64) -> Self {
        let root = RngState::new(seed);
        CorruptionStreams {
            flow: root.substream("flow"),
            mask: root.substream("mask"),
            dropout: root.substream("dropout"),
        }
    }

    pub fn to_counters(&self, counters: &mut BTreeMap<String, u64>) {
        counters.insert("rng.flow".into(), self.flow.counter);
        counters.insert("rng.mask".into(), self.mask.counter);
        counters.insert("rng.dropout".into(), self.dropout.counter);
    }

    pub fn from_counters(seed: u64, counters: &BTreeMap<String, u64>) -> Self {
        let mut s = CorruptionStreams::new(seed);
        if let Some(&c) = counters.get("rng.flow") {
            s.flow.counter = c;
        }
        if let Some(&c) = counters.get("rng.mask") {
            s.mask.counter = c;
        }
        if let Some(&c) = counters.get("rng.dropout") {
            s.dropout.counter = c;
        }
        s
    }
}

pub fn build_sample<T: Scalar>(
    rec: &TaskRecord,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    null_text_dropout: f64,
    streams: &mut CorruptionStreams,
) -> Result<BatchSample<T>> {
    let clean_text = encode_text(&rec.caption, vocab, cfg.l_txt)?;
    let clean_image_tokens = patchify::<T>(&rec.target, cfg.patch)?.tokens;

    let t_img = streams.flow.uniform_f64();
    let flow = flow_corrupt(&clean_image_tokens, t_img, &mut streams.flow);

    let t_txt = 1.0 - streams.mask.uniform_f64(); // (0, 1]
    let mask = mask_corrupt(&clean_text, t_txt, &mut streams.mask);

    let instr_seq = encode_text(&rec.instruction, vocab, cfg.l_txt)?;
    let image_pass_text = if streams.dropout.uniform_f64() < null_text_dropout {
        TextSequence::null(cfg.l_txt).ids
    } else {
        instr_seq.ids
    };

    let condition_tokens = match &rec.source {
        Some(src) => Some(patchify::<T>(src, cfg.patch)?.tokens),
        None => None,
    };

    // teacher reads the target image and its caption, never the source
    let teacher = teacher_features::<T>(&rec.target, &rec.caption);

    Ok(BatchSample {
        clean_text,
        mask,
        image_pass_text,
        clean_image_tokens,
        flow,
        condition_tokens,
        teacher,
        t_img,
        t_txt,
    })
}

/// Draw one whole-batch task type, then `n` records without replacement.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_batch_sample<T: Scalar>(
    stage: &StageSpec,
    pools: &DataPools,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    null_text_dropout: f64,
    state: &mut SamplerState,
    streams: &mut CorruptionStreams,
    n: usize,
) -> Result<Batch<T>> {
    let task = state.draw_task(stage).to_string();
    let pool = pools.pool(&task)?;
    let indices = state.take_indices(&task, pool.len(), n);
    let mut samples = Vec::with_capacity(n);
    for i in indices {
        samples.push(build_sample(&pool[i], cfg, vocab, null_text_dropout, streams)?);
    }
    Ok(Batch { task: pool[0].task, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, load_dataset, DatasetPlan};
    use std::path::PathBuf;

    fn tmp(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("unidiff_batch_{tag}"));
        let _ = std::fs::remove_dir_all(&d);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn stage(mix: &[(&str, f64)]) -> StageSpec {
        StageSpec {
            name: "s".into(),
            steps: 10,
            mix: mix.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            datasets: vec!["x".into()],
        }
    }

    fn pools(dir: &std::path::Path) -> DataPools {
        generate_dataset(dir, "pairs", DatasetPlan::Pairs, 60, 16, 3).unwrap();
        generate_dataset(dir, "edit", DatasetPlan::Edit, 40, 16, 4).unwrap();
        generate_dataset(dir, "perc", DatasetPlan::Perception, 40, 16, 5).unwrap();
        let ds = vec![
            load_dataset(dir, "pairs").unwrap(),
            load_dataset(dir, "edit").unwrap(),
            load_dataset(dir, "perc").unwrap(),
        ];
        DataPools::from_datasets(ds).unwrap()
    }

    #[test]
    fn stage1_mix_only_yields_pair_batches() {
        let dir = tmp("s1");
        let pools = pools(&dir);
        let cfg = ModelConfig {
            vocab_size: crate::datagen::grammar_vocabulary().size(),
            embed_dim: 16,
            n_blocks: 2,
            n_heads: 2,
            l_txt: 16,
            ..ModelConfig::default()
        };
        let vocab = crate::datagen::grammar_vocabulary();
        let mut state = SamplerState::new(1);
        let mut streams = CorruptionStreams::new(1);
        let st = stage(&[("t2i", 0.5), ("i2t", 0.5)]);
        for _ in 0..20 {
            let b: Batch<f32> =
                hybrid_batch_sample(&st, &pools, &cfg, &vocab, 0.1, &mut state, &mut streams, 4)
                    .unwrap();
            assert!(matches!(b.task, TaskKind::T2i | TaskKind::I2t));
            for s in &b.samples {
                assert!(s.condition_tokens.is_none());
            }
        }
    }

    #[test]
    fn batch_task_frequencies_match_proportions() {
        let dir = tmp("freq");
        let pools = pools(&dir);
        let st = stage(&[("t2i", 0.5), ("edit", 0.3), ("perception", 0.2)]);
        let mut state = SamplerState::new(7);
        let n = 10_000;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for _ in 0..n {
            let task = state.draw_task(&st).to_string();
            // drive cursors too so the draw distribution is the live one
            let _ = state.take_indices(&task, pools.pool(&task).unwrap().len(), 1);
            *counts.entry(match task.as_str() {
                "t2i" => "t2i",
                "edit" => "edit",
                _ => "perception",
            })
            .or_default() += 1;
        }
        for (task, p) in [("t2i", 0.5), ("edit", 0.3), ("perception", 0.2)] {
            let c = counts[task] as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c - n as f64 * p).abs() <= 3.0 * sigma, "{task}: {c}");
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let dir = tmp("det");
        let pools = pools(&dir);
        let cfg = ModelConfig {
            vocab_size: crate::datagen::grammar_vocabulary().size(),
            embed_dim: 16,
            n_blocks: 2,
            n_heads: 2,
            l_txt: 16,
            ..ModelConfig::default()
        };
        let vocab = crate::datagen::grammar_vocabulary();
        let st = stage(&[("t2i", 0.6), ("edit", 0.4)]);
        let run = || {
            let mut state = SamplerState::new(11);
            let mut streams = CorruptionStreams::new(11);
            let mut out = Vec::new();
            for _ in 0..10 {
                let b: Batch<f32> = hybrid_batch_sample(
                    &st, &pools, &cfg, &vocab, 0.1, &mut state, &mut streams, 3,
                )
                .unwrap();
                out.push((b.task, b.samples[0].flow.corrupted.clone(), b.samples[0].mask.clone()));
            }
            out
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
            assert_eq!(x.2, y.2);
        }
    }

    #[test]
    fn without_replacement_within_epoch() {
        let mut state = SamplerState::new(5);
        let seen = state.take_indices("t2i", 30, 30);
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 30, "every record exactly once per epoch");
        assert_eq!(state.cursors["t2i"].epoch, 0);
        let _ = state.take_indices("t2i", 30, 1);
        assert_eq!(state.cursors["t2i"].epoch, 1);
    }

    #[test]
    fn missing_pool_is_a_configuration_error() {
        let dir = tmp("missing");
        generate_dataset(&dir, "pairs", DatasetPlan::Pairs, 10, 16, 3).unwrap();
        let pools =
            DataPools::from_datasets(vec![load_dataset(&dir, "pairs").unwrap()]).unwrap();
        let err = pools.pool("edit").unwrap_err();
        assert!(err.to_string().contains("edit"), "{err}");
    }

    #[test]
    fn sampler_state_roundtrips_through_counters() {
        let mut state = SamplerState::new(13);
        let st = stage(&[("t2i", 1.0)]);
        for _ in 0..17 {
            let t = state.draw_task(&st).to_string();
            let _ = state.take_indices(&t, 23, 2);
        }
        let mut counters = BTreeMap::new();
        state.to_counters(&mut counters);
        let restored = SamplerState::from_counters(13, &counters);
        assert_eq!(restored, state);
    }
}
