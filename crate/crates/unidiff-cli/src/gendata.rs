//! `gen-data`: materialize every dataset declared in the config plus the
//! vocabulary file.

use std::path::Path;

use unidiff_core::datagen::{generate_dataset, grammar_vocabulary, DatasetPlan};
use unidiff_core::error::{Error, Result};
use unidiff_core::numerics::RngState;
use unidiff_core::trainer::RunConfig;

fn parse_plan(name: &str) -> Result<DatasetPlan> {
    match name {
        "pairs" => Ok(DatasetPlan::Pairs),
        "edit" => Ok(DatasetPlan::Edit),
        "perception" => Ok(DatasetPlan::Perception),
        "canonical_pairs" => Ok(DatasetPlan::CanonicalPairs),
        other => Err(Error::config("datasets.plan", format!("unknown plan `{other}`"))),
    }
}

pub fn generate_all(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Vec<String>> {
    if cfg.datasets.is_empty() {
        return Err(Error::config("datasets", "no datasets declared in config"));
    }
    std::fs::create_dir_all(out)?;
    let mut outputs = Vec::new();
    for spec in &cfg.datasets {
        let plan = parse_plan(&spec.plan)?;
        // per-dataset seed derived from (run seed, dataset name)
        let ds_seed = RngState::new(seed).substream(&spec.name).seed;
        let path = generate_dataset(
            out,
            &spec.name,
            plan,
            spec.count,
            cfg.model.image_size,
            ds_seed,
        )?;
        outputs.push(path.display().to_string());
    }
    let vocab_path = out.join("vocab.txt");
    grammar_vocabulary().save(&vocab_path)?;
    outputs.push(vocab_path.display().to_string());
    Ok(outputs)
}
