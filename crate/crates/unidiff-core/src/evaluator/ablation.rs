//! Alignment ablation: four loss variants trained under identical data
//! order across several init seeds, compared on compositional IC.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::grammar_vocabulary;
use crate::error::Result;
use crate::numerics::Scalar;
use crate::trainer::{run_pipeline, RunConfig};

use super::benchmark::{run_benchmark, NetworkModel, Suite};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: &'static str,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// The four rows of the comparison table, in fixed order.
pub fn ablation_variants(lambda2: f64, lambda3: f64) -> [AblationVariant; 4] {
    [
        AblationVariant { name: "both", lambda2, lambda3 },
        AblationVariant { name: "cross_only", lambda2, lambda3: 0.0 },
        AblationVariant { name: "intrinsic_only", lambda2: 0.0, lambda3 },
        AblationVariant { name: "neither", lambda2: 0.0, lambda3: 0.0 },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub mean_ic: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub eval_suite: String,
    pub eval_n: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn mean_ic(&self, variant: &str) -> f64 {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .map(|c| c.mean_ic)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn cell(&self, variant: &str, seed: u64) -> f64 {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.seed == seed)
            .map(|c| c.mean_ic)
            .expect("cell exists")
    }

    /// Seeds on which `variant` does at least as well as `neither`.
    pub fn wins_vs_neither(&self, variant: &str) -> usize {
        self.seeds
            .iter()
            .filter(|&&s| self.cell(variant, s) >= self.cell("neither", s))
            .count()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16}", "variant"));
        for s in &self.seeds {
            out.push_str(&format!("  seed {s:<10}"));
        }
        out.push_str("  mean\n");
        for v in ["both", "cross_only", "intrinsic_only", "neither"] {
            out.push_str(&format!("{v:<16}"));
            for &s in &self.seeds {
                out.push_str(&format!("  {:<15.3}", self.cell(v, s)));
            }
            out.push_str(&format!("  {:.3}\n", self.mean_ic(v)));
        }
        out
    }
}

/// Train every (variant, seed) pair with identical data order and score each
/// on the compositional suite. Always emits the full 4-row table.
pub fn run_ablation<T: Scalar>(
    base: &RunConfig,
    seeds: &[u64],
    eval_n: usize,
    eval_seed: u64,
    out_dir: &Path,
) -> Result<AblationTable> {
    let vocab = grammar_vocabulary();
    let data_seed = base.train.data_seed.unwrap_or(base.train.seed);
    let mut cells = Vec::new();
    for variant in ablation_variants(base.train.lambda2, base.train.lambda3) {
        for &seed in seeds {
            let mut run = base.clone();
            run.train.lambda2 = variant.lambda2;
            run.train.lambda3 = variant.lambda3;
            run.train.seed = seed;
            run.train.data_seed = Some(data_seed);
            let dir = out_dir.join(format!("{}_seed{seed}", variant.name));
            let ckpt = run_pipeline::<T>(&run, None, &dir)?;
            let model = NetworkModel {
                params: &ckpt.params,
                config: &ckpt.config,
                vocab: &vocab,
                sample: run.sample,
            };
            let report = run_benchmark(
                &model,
                Suite::T2iCompositional,
                eval_n,
                eval_seed,
                run.model.image_size,
                "ablation",
                variant.name,
            )?;
            cells.push(AblationCell {
                variant: variant.name.to_string(),
                seed,
                mean_ic: report.aggregate.mean_ic,
            });
        }
    }
    let table = AblationTable {
        eval_suite: Suite::T2iCompositional.name().into(),
        eval_n,
        seeds: seeds.to_vec(),
        cells,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&table).unwrap(),
    )?;
    std::fs::write(out_dir.join("ablation.txt"), table.render_text())?;
    Ok(table)
}
