//! Single executable over the whole pipeline: data generation, training,
//! sampling, captioning, editing, perception, evaluation, gradient checking,
//! and the alignment ablation.
//!
//! Exit codes: 0 success, 2 configuration error (message names the offending
//! key), 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unidiff_core::backbone::{load_checkpoint, Checkpoint};
use unidiff_core::datagen::grammar_vocabulary;
use unidiff_core::error::Error;
use unidiff_core::evaluator::{run_ablation, run_benchmark, NetworkModel, Suite};
use unidiff_core::sampler::{generate_caption, generate_image, run_conditional};
use unidiff_core::tokenization::Image;
use unidiff_core::trainer::{run_pipeline, RunConfig, SampleConfig};

mod gendata;
mod gradcheck;
mod manifest;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "unidiff",
    version,
    about = "Unified dual-stream diffusion: one shared-weight transformer for image \
             generation, captioning, editing and perception"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset files declared in the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the multi-stage training pipeline (or one named stage).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run only the stage with this name.
        #[arg(long)]
        stage: Option<String>,
        /// Override the step count of every selected stage.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Text-to-image sampling; writes a P6 image plus a JSON sidecar.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Caption an image (P6 input).
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Instruction-based editing of a source image.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Perception rendering ("edge map" or "silhouette") of a source image.
    Perceive {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a benchmark suite and write JSON + CSV reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Samples per suite.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference validation of every kernel and every loss term.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the four alignment variants across seeds and compare IC.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override per-stage step counts for the ablation runs.
        #[arg(long)]
        steps: Option<u64>,
    },
}

fn init_threads() -> usize {
    let threads = std::env::var("UNIDIFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    threads
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config { .. } | Error::EmptyDataset { .. } => ExitCode::from(2),
        Error::NonFinite { .. } | Error::Aborted { .. } => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn sample_config(config: Option<&PathBuf>, seed: Option<u64>) -> Result<SampleConfig, Error> {
    let mut sc = match config {
        Some(path) => RunConfig::from_file(path)?.sample,
        None => SampleConfig::default(),
    };
    if let Some(s) = seed {
        sc.seed = s;
    }
    Ok(sc)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint<f32>, Error> {
    load_checkpoint::<f32>(path)
}

fn run(cli: Cli, threads: usize) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let run_cfg = RunConfig::from_file(&config)?;
            let seed = seed.unwrap_or(run_cfg.train.seed);
            let outputs = gendata::generate_all(&run_cfg, seed, &out)?;
            RunManifest::new("gen-data", Some(&config), Some(seed), threads, outputs)
                .write(&out)?;
            Ok(())
        }
        Command::Train { config, out, checkpoint, stage, steps, seed } => {
            let mut run_cfg = RunConfig::from_file(&config)?;
            if let Some(s) = seed {
                run_cfg.train.seed = s;
            }
            if let Some(n) = steps {
                for st in &mut run_cfg.stages {
                    st.steps = n;
                }
            }
            let resume = match &checkpoint {
                Some(p) => Some(load_ckpt(p)?),
                None => None,
            };
            let ckpt = match stage {
                None => run_pipeline::<f32>(&run_cfg, resume, &out)?,
                Some(name) => {
                    let idx = run_cfg
                        .stages
                        .iter()
                        .position(|s| s.name == name)
                        .ok_or_else(|| Error::config("stage", format!("no stage `{name}`")))?;
                    run_cfg.validate()?;
                    let vocab = grammar_vocabulary();
                    let mut ckpt = match resume {
                        Some(c) => c,
                        None => {
                            let mut rng =
                                unidiff_core::numerics::RngState::new(run_cfg.train.seed)
                                    .substream("init");
                            let params = unidiff_core::backbone::init_model::<f32>(
                                &run_cfg.model,
                                &mut rng,
                            )?;
                            Checkpoint::fresh(run_cfg.model.clone(), params)
                        }
                    };
                    let pools = unidiff_core::trainer::load_stage_pools(
                        Path::new(&run_cfg.data_dir),
                        &run_cfg.stages[idx],
                    )?;
                    unidiff_core::trainer::run_stage(
                        &mut ckpt, &run_cfg, idx, &pools, &vocab, &out,
                    )?;
                    unidiff_core::backbone::save_checkpoint(&ckpt, &out.join("ckpt_final"))?;
                    ckpt
                }
            };
            let outputs = vec![
                out.join("ckpt_final").display().to_string(),
                format!("global_step={}", ckpt.global_step),
            ];
            RunManifest::new("train", Some(&config), Some(run_cfg.train.seed), threads, outputs)
                .write(&out)?;
            Ok(())
        }
        Command::Sample { checkpoint, prompt, out, seed, config } => {
            let ckpt = load_ckpt(&checkpoint)?;
            let sc = sample_config(config.as_ref(), seed)?;
            let vocab = grammar_vocabulary();
            let img = generate_image(&ckpt.params, &ckpt.config, &vocab, &prompt, None, &sc)?;
            std::fs::create_dir_all(&out)?;
            let img_path = out.join("sample.ppm");
            img.write_ppm(&img_path)?;
            write_sidecar(&out.join("sample.json"), &prompt, &sc)?;
            RunManifest::new(
                "sample",
                config.as_deref(),
                Some(sc.seed),
                threads,
                vec![img_path.display().to_string()],
            )
            .write(&out)?;
            Ok(())
        }
        Command::Caption { checkpoint, source, out, seed, config } => {
            let ckpt = load_ckpt(&checkpoint)?;
            let sc = sample_config(config.as_ref(), seed)?;
            let vocab = grammar_vocabulary();
            let img = Image::read_ppm(&source)?;
            let caption = generate_caption(&ckpt.params, &ckpt.config, &vocab, &img, &sc)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("caption.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&serde_json::json!({
                    "caption": caption,
                    "source": source.display().to_string(),
                    "seed": sc.seed,
                    "cfg": sc,
                }))
                .unwrap(),
            )?;
            println!("{caption}");
            RunManifest::new(
                "caption",
                config.as_deref(),
                Some(sc.seed),
                threads,
                vec![path.display().to_string()],
            )
            .write(&out)?;
            Ok(())
        }
        cmd @ (Command::Edit { .. } | Command::Perceive { .. }) => {
            let name = if matches!(cmd, Command::Edit { .. }) { "edit" } else { "perceive" };
            let (Command::Edit { checkpoint, source, prompt, out, seed, config }
            | Command::Perceive { checkpoint, source, prompt, out, seed, config }) = cmd
            else {
                unreachable!()
            };
            let ckpt = load_ckpt(&checkpoint)?;
            let sc = sample_config(config.as_ref(), seed)?;
            let vocab = grammar_vocabulary();
            let src = Image::read_ppm(&source)?;
            let img = run_conditional(&ckpt.params, &ckpt.config, &vocab, &src, &prompt, &sc)?;
            std::fs::create_dir_all(&out)?;
            let img_path = out.join("output.ppm");
            img.write_ppm(&img_path)?;
            write_sidecar(&out.join("output.json"), &prompt, &sc)?;
            RunManifest::new(
                name,
                config.as_deref(),
                Some(sc.seed),
                threads,
                vec![img_path.display().to_string()],
            )
            .write(&out)?;
            Ok(())
        }
        Command::Eval { checkpoint, suite, out, seed, steps, config } => {
            let ckpt = load_ckpt(&checkpoint)?;
            let sc = sample_config(config.as_ref(), None)?;
            let suite = Suite::parse(&suite)?;
            let seed = seed.unwrap_or(0);
            let vocab = grammar_vocabulary();
            let model = NetworkModel {
                params: &ckpt.params,
                config: &ckpt.config,
                vocab: &vocab,
                sample: sc,
            };
            let ckpt_hash = manifest::file_sha256(&checkpoint.join("blob.bin"))?;
            let cfg_hash = config
                .as_ref()
                .map(|p| manifest::file_sha256(p))
                .transpose()?
                .unwrap_or_default();
            let report = run_benchmark(
                &model,
                suite,
                steps,
                seed,
                ckpt.config.image_size,
                &cfg_hash,
                &ckpt_hash,
            )?;
            std::fs::create_dir_all(&out)?;
            let json = out.join(format!("report_{}.json", suite.name()));
            let csv = out.join(format!("report_{}.csv", suite.name()));
            report.write_json(&json)?;
            report.write_csv(&csv)?;
            println!(
                "{}: n={} mean IC {:.3} mean PQ {:.3} mean overall {:.3}",
                suite.name(),
                report.n,
                report.aggregate.mean_ic,
                report.aggregate.mean_pq,
                report.aggregate.mean_overall
            );
            RunManifest::new(
                "eval",
                config.as_deref(),
                Some(seed),
                threads,
                vec![json.display().to_string(), csv.display().to_string()],
            )
            .write(&out)?;
            Ok(())
        }
        Command::Gradcheck { config, out, seed } => {
            let out_dir = out.unwrap_or_else(|| PathBuf::from("gradcheck_out"));
            let report = gradcheck::run_full_gradcheck(seed.unwrap_or(0))?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(
                out_dir.join("gradcheck.json"),
                serde_json::to_string_pretty(&report).unwrap(),
            )?;
            for line in &report.lines {
                println!("{line}");
            }
            RunManifest::new(
                "gradcheck",
                config.as_deref(),
                seed,
                threads,
                vec![out_dir.join("gradcheck.json").display().to_string()],
            )
            .write(&out_dir)?;
            if report.pass {
                Ok(())
            } else {
                Err(Error::NonFinite { kernel: "gradcheck" })
            }
        }
        Command::Ablate { config, out, seed, steps } => {
            let mut run_cfg = RunConfig::from_file(&config)?;
            if let Some(n) = steps {
                for st in &mut run_cfg.stages {
                    st.steps = n;
                }
            }
            let base = seed.unwrap_or(run_cfg.train.seed);
            let seeds = [base, base + 1, base + 2];
            let table = run_ablation::<f32>(&run_cfg, &seeds, 60, base ^ 0xE7A1, &out)?;
            print!("{}", table.render_text());
            RunManifest::new(
                "ablate",
                Some(&config),
                Some(base),
                threads,
                vec![out.join("ablation.json").display().to_string()],
            )
            .write(&out)?;
            Ok(())
        }
    }
}

fn write_sidecar(path: &Path, prompt: &str, sc: &SampleConfig) -> Result<(), Error> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(&serde_json::json!({
            "instruction": prompt,
            "seed": sc.seed,
            "cfg": sc,
        }))
        .unwrap(),
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = init_threads();
    match run(cli, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
