//! Benchmark suites over deterministic prompt sets, with per-sample records,
//! recomputable aggregates, and JSON/CSV report files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::datagen::{
    caption_scene_canonical, mutate_spec, render_scene, sample_scene, SceneSpec,
};
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, RngState, Scalar};
use crate::sampler::{generate_caption, generate_image, run_conditional};
use crate::tokenization::{Image, Vocabulary};
use crate::trainer::SampleConfig;

use super::score::{
    edit_flip_succeeded, overall_score, score_caption, score_edit, score_generation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    T2iSimple,
    T2iCompositional,
    EditSingle,
    EditMulti,
    Caption,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::T2iSimple => "t2i_simple",
            Suite::T2iCompositional => "t2i_compositional",
            Suite::EditSingle => "edit_single",
            Suite::EditMulti => "edit_multi",
            Suite::Caption => "caption",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "t2i_simple" => Ok(Suite::T2iSimple),
            "t2i_compositional" => Ok(Suite::T2iCompositional),
            "edit_single" => Ok(Suite::EditSingle),
            "edit_multi" => Ok(Suite::EditMulti),
            "caption" => Ok(Suite::Caption),
            other => Err(Error::config("suite", format!("unknown suite `{other}`"))),
        }
    }

    pub const ALL: [Suite; 5] = [
        Suite::T2iSimple,
        Suite::T2iCompositional,
        Suite::EditSingle,
        Suite::EditMulti,
        Suite::Caption,
    ];
}

/// Anything that can act as the model under evaluation. The network is the
/// real implementation; an oracle renderer provides the harness self-test
/// upper bound.
pub trait GenerativeModel {
    fn t2i(&self, caption: &str, seed: u64) -> Result<Image>;
    fn caption(&self, image: &Image) -> Result<String>;
    fn conditioned(&self, source: &Image, instruction: &str, seed: u64) -> Result<Image>;
}

pub struct NetworkModel<'a, T> {
    pub params: &'a ParameterStore<T>,
    pub config: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
    pub sample: SampleConfig,
}

impl<T: Scalar> GenerativeModel for NetworkModel<'_, T> {
    fn t2i(&self, caption: &str, seed: u64) -> Result<Image> {
        let cfg = SampleConfig { seed, ..self.sample };
        generate_image(self.params, self.config, self.vocab, caption, None, &cfg)
    }

    fn caption(&self, image: &Image) -> Result<String> {
        generate_caption(self.params, self.config, self.vocab, image, &self.sample)
    }

    fn conditioned(&self, source: &Image, instruction: &str, seed: u64) -> Result<Image> {
        let cfg = SampleConfig { seed, ..self.sample };
        run_conditional(self.params, self.config, self.vocab, source, instruction, &cfg)
    }
}

/// Bypasses the network entirely: renders the prompt's spec (or applies the
/// instruction symbolically). IC must come out 10.0 on every suite.
pub struct OracleRenderModel {
    pub image_size: usize,
}

impl GenerativeModel for OracleRenderModel {
    fn t2i(&self, caption: &str, _seed: u64) -> Result<Image> {
        let objects = crate::datagen::parse_caption(caption);
        let spec = SceneSpec::parsed(objects, crate::datagen::Background::Black);
        render_scene(&spec, self.image_size)
    }

    fn caption(&self, image: &Image) -> Result<String> {
        Ok(caption_scene_canonical(&crate::datagen::oracle_parse(image).spec))
    }

    fn conditioned(&self, source: &Image, instruction: &str, _seed: u64) -> Result<Image> {
        let pre = crate::datagen::oracle_parse(source).spec;
        let post = apply_instruction(&pre, instruction);
        render_scene(&post, self.image_size)
    }
}

/// Symbolic application of an edit instruction, used by the oracle model.
pub fn apply_instruction(pre: &SceneSpec, instruction: &str) -> SceneSpec {
    use crate::datagen::{Color, Position, Shape};
    let words: Vec<&str> = instruction.split_whitespace().collect();
    let mut objects = pre.objects.clone();
    // templates: "change the {color} {shape} to {color|a shape}",
    //            "move the {color} {shape} to the {position}"
    let find_object = |color: Color, shape: Shape| {
        objects.iter().position(|o| o.color == color && o.shape == shape)
    };
    let color_at = |i: usize| words.get(i).and_then(|w| Color::from_word(w));
    let shape_at = |i: usize| words.get(i).and_then(|w| Shape::from_word(w));
    if words.first() == Some(&"change") || words.first() == Some(&"move") {
        if let (Some(color), Some(shape)) = (color_at(2), shape_at(3)) {
            if let Some(idx) = find_object(color, shape) {
                let tail = &words[4..];
                if let Some(p) = tail.iter().find_map(|w| Position::from_word(w)) {
                    objects[idx].position = p;
                } else if let Some(c) = tail.iter().find_map(|w| Color::from_word(w)) {
                    objects[idx].color = c;
                } else if let Some(s) = tail.iter().find_map(|w| Shape::from_word(w)) {
                    objects[idx].shape = s;
                }
            }
        }
    }
    SceneSpec::new(objects, pre.background)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub task: String,
    pub prompt: String,
    pub parsed: Option<SceneSpec>,
    pub target: Option<SceneSpec>,
    pub ic: f64,
    pub pq: f64,
    pub overall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locality_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_succeeded: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_ic: f64,
    pub mean_pq: f64,
    pub mean_overall: f64,
}

impl Aggregate {
    pub fn from_records(records: &[SampleScore]) -> Self {
        if records.is_empty() {
            return Aggregate::default();
        }
        let n = records.len() as f64;
        Aggregate {
            count: records.len(),
            mean_ic: records.iter().map(|r| r.ic).sum::<f64>() / n,
            mean_pq: records.iter().map(|r| r.pq).sum::<f64>() / n,
            mean_overall: records.iter().map(|r| r.overall).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub seed: u64,
    pub n: usize,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub records: Vec<SampleScore>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "index,task,ic,pq,overall,locality_rmse,flip_succeeded,prompt")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{},{},{},{},{},{},\"{}\"",
                r.index,
                r.task,
                r.ic,
                r.pq,
                r.overall,
                r.locality_rmse.map_or(String::new(), |v| v.to_string()),
                r.flip_succeeded.map_or(String::new(), |v| v.to_string()),
                r.prompt.replace('"', "'"),
            )?;
        }
        Ok(())
    }
}

fn suite_scene(suite: Suite, rng: &mut RngState) -> SceneSpec {
    loop {
        let spec = sample_scene(rng);
        let want_two = matches!(suite, Suite::T2iCompositional);
        if (spec.objects.len() == 2) == want_two || matches!(suite, Suite::EditSingle | Suite::EditMulti | Suite::Caption) {
            return spec;
        }
    }
}

/// Run one suite: a deterministic prompt set per (suite, seed), per-sample
/// scores, and recomputed aggregates.
pub fn run_benchmark(
    model: &dyn GenerativeModel,
    suite: Suite,
    n: usize,
    seed: u64,
    image_size: usize,
    config_hash: &str,
    checkpoint_hash: &str,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = RngState::new(seed).substream(&format!("{}/{i}", suite.name()));
        let gen_seed = rng.next_u64();
        let spec = suite_scene(suite, &mut rng);
        let record = match suite {
            Suite::T2iSimple | Suite::T2iCompositional => {
                let prompt = caption_scene_canonical(&spec);
                let out = model.t2i(&prompt, gen_seed)?;
                let (ic, pq) = score_generation(&out, &spec);
                SampleScore {
                    index: i,
                    task: suite.name().into(),
                    prompt,
                    parsed: Some(crate::datagen::oracle_parse(&out).spec),
                    target: Some(spec),
                    ic,
                    pq,
                    overall: overall_score(ic, pq),
                    locality_rmse: None,
                    flip_succeeded: None,
                }
            }
            Suite::EditSingle => {
                let (post, instruction, _) = mutate_spec(&spec, &mut rng);
                let source = render_scene(&spec, image_size)?;
                let out = model.conditioned(&source, &instruction, gen_seed)?;
                let (ic, rmse) = score_edit(&source, &out, &spec, &post);
                let (_, pq) = score_generation(&out, &post);
                SampleScore {
                    index: i,
                    task: suite.name().into(),
                    prompt: instruction,
                    parsed: Some(crate::datagen::oracle_parse(&out).spec),
                    target: Some(post.clone()),
                    ic,
                    pq,
                    overall: overall_score(ic, pq),
                    locality_rmse: Some(rmse),
                    flip_succeeded: Some(edit_flip_succeeded(&out, &post)),
                }
            }
            Suite::EditMulti => {
                // two sequential instructions; the second applies to the
                // intermediate spec
                let (mid, instr1, _) = mutate_spec(&spec, &mut rng);
                let (post, instr2, _) = mutate_spec(&mid, &mut rng);
                let source = render_scene(&spec, image_size)?;
                let step1 = model.conditioned(&source, &instr1, gen_seed)?;
                let step2 = model.conditioned(&step1, &instr2, gen_seed ^ 1)?;
                let (ic, rmse) = score_edit(&source, &step2, &spec, &post);
                let (_, pq) = score_generation(&step2, &post);
                SampleScore {
                    index: i,
                    task: suite.name().into(),
                    prompt: format!("{instr1} ; {instr2}"),
                    parsed: Some(crate::datagen::oracle_parse(&step2).spec),
                    target: Some(post.clone()),
                    ic,
                    pq,
                    overall: overall_score(ic, pq),
                    locality_rmse: Some(rmse),
                    flip_succeeded: Some(edit_flip_succeeded(&step2, &post)),
                }
            }
            Suite::Caption => {
                let source = render_scene(&spec, image_size)?;
                let out = model.caption(&source)?;
                let acc = score_caption(&out, &spec);
                let ic = 10.0 * acc;
                // grammatical well-formedness stands in for PQ on text
                let pq = if crate::datagen::parse_caption(&out).is_empty() { 0.0 } else { 10.0 };
                SampleScore {
                    index: i,
                    task: suite.name().into(),
                    prompt: out,
                    parsed: None,
                    target: Some(spec),
                    ic,
                    pq,
                    overall: overall_score(ic, pq),
                    locality_rmse: None,
                    flip_succeeded: None,
                }
            }
        };
        records.push(record);
    }
    let aggregate = Aggregate::from_records(&records);
    Ok(EvalReport {
        suite: suite.name().into(),
        seed,
        n,
        config_hash: config_hash.into(),
        checkpoint_hash: checkpoint_hash.into(),
        records,
        aggregate,
    })
}
