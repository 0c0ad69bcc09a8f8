//! The one structured-text run configuration: model, training, stage plan,
//! and sampler defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub null_text_dropout: f64,
    pub temperature: f64,
    pub seed: u64,
    /// When set, data order and corruption draws come from this seed instead
    /// of `seed`, so runs can vary initialization under identical data order.
    pub data_seed: Option<u64>,
    pub log_every: u64,
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.2,
            lambda2: 0.05,
            lambda3: 0.1,
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 8,
            accum_steps: 1,
            null_text_dropout: 0.1,
            temperature: 0.07,
            seed: 0,
            data_seed: None,
            log_every: 50,
            ckpt_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in
            [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)]
        {
            if v < 0.0 {
                return Err(Error::config(format!("train.{k}"), "weights must be >= 0"));
            }
        }
        if self.lr <= 0.0 {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.lambda2 > 0.0 && self.batch_size < 2 {
            return Err(Error::config(
                "train.batch_size",
                "contrastive loss needs at least 2 samples when lambda2 > 0",
            ));
        }
        if self.accum_steps == 0 {
            return Err(Error::config("train.accum_steps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.null_text_dropout) {
            return Err(Error::config("train.null_text_dropout", "must be in [0, 1]"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("train.temperature", "must be positive"));
        }
        if self.log_every == 0 || self.ckpt_every == 0 {
            return Err(Error::config("train.log_every", "log/ckpt intervals must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub steps: u64,
    /// Task-name -> proportion; must sum to 1.
    pub mix: BTreeMap<String, f64>,
    /// Dataset names (without extension) under the data directory.
    pub datasets: Vec<String>,
}

impl StageSpec {
    pub fn validate(&self, index: usize) -> Result<()> {
        let sum: f64 = self.mix.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                format!("stages[{index}].mix"),
                format!("proportions sum to {sum}, expected 1"),
            ));
        }
        for (task, p) in &self.mix {
            if *p < 0.0 {
                return Err(Error::config(format!("stages[{index}].mix.{task}"), "negative"));
            }
            if !matches!(task.as_str(), "t2i" | "i2t" | "edit" | "perception") {
                return Err(Error::config(
                    format!("stages[{index}].mix.{task}"),
                    "unknown task",
                ));
            }
        }
        if index == 0 {
            for task in self.mix.keys() {
                if !matches!(task.as_str(), "t2i" | "i2t") {
                    return Err(Error::config(
                        format!("stages[0].mix.{task}"),
                        "stage 1 may contain only t2i/i2t",
                    ));
                }
            }
        }
        if self.datasets.is_empty() {
            return Err(Error::config(format!("stages[{index}].datasets"), "empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub image_steps: usize,
    pub text_steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { image_steps: 20, text_steps: 8, guidance: 1.0, seed: 0 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_steps == 0 {
            return Err(Error::config("sample.image_steps", "must be >= 1"));
        }
        if self.text_steps == 0 {
            return Err(Error::config("sample.text_steps", "must be >= 1"));
        }
        if self.guidance < 0.0 {
            return Err(Error::config("sample.guidance", "must be >= 0"));
        }
        Ok(())
    }
}

/// One dataset file to generate: which derivation plan and how many records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    /// "pairs" | "edit" | "perception" | "canonical_pairs"
    pub plan: String,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_data_dir")]
    pub data_dir: String,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
}

fn default_data_dir() -> String {
    "data".to_string()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        if self.stages.is_empty() {
            return Err(Error::config("stages", "at least one stage required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if !matches!(d.plan.as_str(), "pairs" | "edit" | "perception" | "canonical_pairs") {
                return Err(Error::config(
                    format!("datasets[{i}].plan"),
                    format!("unknown plan `{}`", d.plan),
                ));
            }
        }
        Ok(())
    }

    /// Parse and validate; config errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "model": {"embed_dim": 16, "n_blocks": 2, "n_heads": 2, "l_txt": 8,
                      "image_size": 16, "patch": 2, "vocab_size": 26,
                      "hook_depth": null, "d_clip": 8, "d_sem": 12},
            "stages": [{"name": "s1", "steps": 10,
                        "mix": {"t2i": 0.5, "i2t": 0.5}, "datasets": ["pairs"]}]
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_json(&minimal_json()).unwrap();
        assert_eq!(cfg.train.lambda1, 0.2);
        assert_eq!(cfg.train.lambda2, 0.05);
        assert_eq!(cfg.train.lambda3, 0.1);
        assert_eq!(cfg.train.weight_decay, 1e-2);
        assert_eq!(cfg.sample.image_steps, 20);
        assert_eq!(cfg.sample.text_steps, 8);
    }

    #[test]
    fn bad_key_is_named() {
        let text = minimal_json().replace("\"n_heads\": 2", "\"n_heads\": \"two\"");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("n_heads"), "{err}");
    }

    #[test]
    fn stage_one_rejects_conditional_tasks() {
        let text = minimal_json().replace(
            "\"mix\": {\"t2i\": 0.5, \"i2t\": 0.5}",
            "\"mix\": {\"t2i\": 0.5, \"edit\": 0.5}",
        );
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("stages[0]"), "{err}");
    }

    #[test]
    fn mix_must_sum_to_one() {
        let text = minimal_json().replace("\"t2i\": 0.5", "\"t2i\": 0.7");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("mix"), "{err}");
    }

    #[test]
    fn contrastive_needs_two_samples() {
        let mut cfg = RunConfig::from_json(&minimal_json()).unwrap();
        cfg.train.batch_size = 1;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
    }
}
