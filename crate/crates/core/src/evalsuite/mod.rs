//! Evaluation of prompt-phase models: forward-task RMSE, Fréchet distance on
//! fixed random features, cycle consistency, held-out-task generalization
//! against a mismatched-example control, two-step editing, the ablation grid
//! and the single-task baseline contrast.
//!
//! Example pairs come from one fixed donor record per run. Each evaluated
//! record samples with its own seed, so results do not depend on batching.

mod frechet;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub use frechet::{frechet_distance, frechet_gaussian, frechet_proxy, FeatureExtractor, FEATURE_DIM, MIN_FRECHET_SET};

use crate::checkpoint::{weights_hash, CheckpointMeta};
use crate::corpus::{apply_transform, Corpus, Image, TransformKind};
use crate::diffusion::{chain_seed, sample_chains, NoiseSchedule, SamplerConfig, TextBranch};
use crate::error::{Error, Result};
use crate::network::{Model, PromptImages, TextTokens};
use crate::prompting::{build_prompt, Direction, TaskId, TextGuidance, VisionLanguagePrompt};

/// Anything that turns prompts into images, one seed per prompt.
pub trait ImageGenerator {
    fn generate(&mut self, prompts: &[VisionLanguagePrompt], seeds: &[u64]) -> Result<Vec<Image>>;
}

/// Samples a prompt-phase model with classifier-free guidance on the text;
/// the image prompt is given to both guidance branches.
pub struct ModelGenerator<'a> {
    model: &'a Model<f32>,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    pub batch: usize,
}

impl<'a> ModelGenerator<'a> {
    pub fn new(model: &'a Model<f32>, schedule: NoiseSchedule, sampler: SamplerConfig) -> Result<Self> {
        sampler.validate(&schedule)?;
        Ok(Self {
            model,
            schedule,
            sampler,
            batch: 16,
        })
    }
}

impl ImageGenerator for ModelGenerator<'_> {
    fn generate(&mut self, prompts: &[VisionLanguagePrompt], seeds: &[u64]) -> Result<Vec<Image>> {
        if prompts.len() != seeds.len() {
            return Err(Error::ShapeMismatch(format!("{} prompts, {} seeds", prompts.len(), seeds.len())));
        }
        let res = self.model.config.resolution;
        let mut out = Vec::with_capacity(prompts.len());
        for (chunk, chunk_seeds) in prompts.chunks(self.batch.max(1)).zip(seeds.chunks(self.batch.max(1))) {
            if let Some(p) = chunk.iter().find(|p| p.query.size() != res) {
                return Err(Error::ShapeMismatch(format!(
                    "prompt images are {}x{}, the model expects {res}x{res}",
                    p.query.size(),
                    p.query.size()
                )));
            }
            let stack = |f: &dyn Fn(&VisionLanguagePrompt) -> &Image| Image::batch(&chunk.iter().map(f).collect::<Vec<_>>());
            let src = stack(&|p| &p.example_source);
            let tgt = stack(&|p| &p.example_target);
            let query = stack(&|p| &p.query);
            let images = PromptImages {
                example_source: &src,
                example_target: &tgt,
                query: &query,
            };
            let texts: Vec<&str> = chunk.iter().map(|p| p.text.text()).collect();
            let cond = TextTokens::encode(&texts, self.model.config.text_len)?;
            let uncond = cond.nulled();
            let n = chunk.len();
            let model = self.model;
            let mut predictor = |x: &crate::tensor::Tensor<f32>, t: usize, branch: TextBranch| {
                let tokens = match branch {
                    TextBranch::Conditional => &cond,
                    TextBranch::Unconditional => &uncond,
                };
                model.forward(x, &vec![t; n], tokens, Some(&images))
            };
            let x = sample_chains(&mut predictor, [n, 3, res, res], &self.sampler, &self.schedule, chunk_seeds)?;
            out.extend(Image::unbatch(&x));
        }
        Ok(out)
    }
}

/// Mean squared error after mapping both images from `[-1, 1]` to `[0, 1]`.
pub fn unit_mse(a: &Image, b: &Image) -> f64 {
    let n = a.data().len();
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 2.0;
            d * d
        })
        .sum::<f64>()
        / n as f64
}

/// Root mean squared error over every pixel of every pair, in `[0, 1]` units.
pub fn unit_rmse(a: &[Image], b: &[Image]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} images", a.len(), b.len())));
    }
    Ok((a.iter().zip(b).map(|(x, y)| unit_mse(x, y)).sum::<f64>() / a.len() as f64).sqrt())
}

/// Agreement between a generated image's recomputed condition and the input
/// condition, as a unit-range RMSE.
pub fn cycle_error(generated: &Image, condition: &Image, kind: TransformKind) -> f64 {
    let regenerated = Image::from_u8(generated.size(), &generated.to_u8());
    unit_mse(&apply_transform(&regenerated, kind), condition).sqrt()
}

/// The records and donor of one evaluation run.
#[derive(Clone)]
pub struct EvalSet<'a> {
    pub corpus: &'a Corpus,
    /// Corpus slot that supplies every example pair.
    pub donor: usize,
    /// Evaluated corpus slots.
    pub records: Vec<usize>,
    pub seed: u64,
}

impl<'a> EvalSet<'a> {
    /// The first `records` test records, with the `donor`-th training record
    /// as donor.
    pub fn new(corpus: &'a Corpus, records: usize, donor: usize, seed: u64) -> Result<Self> {
        let test = corpus.test_indices();
        if test.is_empty() {
            return Err(Error::Eval("the corpus has no test records".into()));
        }
        let donor = *corpus
            .train_indices()
            .get(donor)
            .ok_or_else(|| Error::Eval(format!("donor index {donor} is outside the training split")))?;
        Ok(Self {
            corpus,
            donor,
            records: test[..records.min(test.len())].to_vec(),
            seed,
        })
    }

    pub fn record_seed(&self, slot: usize) -> u64 {
        chain_seed(self.seed, self.corpus.record(slot).id() as usize)
    }

    pub fn donor_id(&self) -> u64 {
        self.corpus.record(self.donor).id()
    }
}

/// Which example pair accompanies the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Examples {
    /// The donor's pair for the evaluated task.
    Matched,
    /// The donor's pair for the same map in the opposite direction, so the
    /// example source no longer matches the query in type.
    Mismatched,
}

/// Per-record scores of one task and the generated images.
#[derive(Clone, Debug)]
pub struct TaskScore {
    pub per_record: Vec<f64>,
    /// RMSE over all pixels of all records.
    pub value: f64,
    pub generated: Vec<Image>,
}

pub fn task_prompt(set: &EvalSet<'_>, slot: usize, task: TaskId, examples: Examples) -> Result<(VisionLanguagePrompt, Image)> {
    let (mut prompt, target) = build_prompt(set.corpus, slot, set.donor, task)?;
    if examples == Examples::Mismatched {
        let (other, _) = build_prompt(set.corpus, slot, set.donor, task.flipped())?;
        prompt.example_source = other.example_source;
        prompt.example_target = other.example_target;
    }
    Ok((prompt, target))
}

/// Forward tasks: RMSE of the generated map against the reference. Inverse
/// tasks: cycle consistency of the generated image against the query map.
pub fn score_task(gen: &mut dyn ImageGenerator, set: &EvalSet<'_>, task: TaskId, examples: Examples) -> Result<TaskScore> {
    if set.records.is_empty() {
        return Err(Error::Eval("no records to evaluate".into()));
    }
    let mut prompts = Vec::with_capacity(set.records.len());
    let mut targets = Vec::with_capacity(set.records.len());
    for &slot in &set.records {
        let (p, t) = task_prompt(set, slot, task, examples)?;
        prompts.push(p);
        targets.push(t);
    }
    let seeds: Vec<u64> = set.records.iter().map(|&s| set.record_seed(s)).collect();
    let generated = gen.generate(&prompts, &seeds)?;
    let kind = task.transform();
    let per_record: Vec<f64> = match task.direction() {
        Direction::Forward => generated.iter().zip(&targets).map(|(g, t)| unit_mse(g, t).sqrt()).collect(),
        Direction::Inverse => generated.iter().zip(&prompts).map(|(g, p)| cycle_error(g, &p.query, kind)).collect(),
    };
    let value = (per_record.iter().map(|v| v * v).sum::<f64>() / per_record.len() as f64).sqrt();
    if !value.is_finite() {
        return Err(Error::Eval(format!("non-finite score for {task}")));
    }
    Ok(TaskScore {
        per_record,
        value,
        generated,
    })
}

pub fn rmse_forward(gen: &mut dyn ImageGenerator, set: &EvalSet<'_>, task: TaskId) -> Result<f64> {
    if task.direction() != Direction::Forward {
        return Err(Error::Eval(format!("{task} is not a forward task")));
    }
    Ok(score_task(gen, set, task, Examples::Matched)?.value)
}

pub fn cycle_consistency(gen: &mut dyn ImageGenerator, set: &EvalSet<'_>, task: TaskId) -> Result<f64> {
    if task.direction() != Direction::Inverse {
        return Err(Error::Eval(format!("{task} is not an inverse task")));
    }
    Ok(score_task(gen, set, task, Examples::Matched)?.value)
}

/// One-sided paired t-test of `mean(control - treated) > 0`; returns the
/// p-value.
pub fn paired_t_test(control: &[f64], treated: &[f64]) -> Result<f64> {
    if control.len() != treated.len() || control.len() < 2 {
        return Err(Error::Eval("paired test needs two equally long samples of at least 2".into()));
    }
    let n = control.len() as f64;
    let d: Vec<f64> = control.iter().zip(treated).map(|(c, t)| c - t).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Eval(e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutResult {
    pub task: TaskId,
    pub prompted: f64,
    pub control: f64,
    pub p_value: f64,
    pub records: usize,
}

/// Scores a held-out task with matched and with mismatched example pairs.
pub fn heldout_generalization(
    gen: &mut dyn ImageGenerator,
    set: &EvalSet<'_>,
    task: TaskId,
    meta: &CheckpointMeta,
) -> Result<HeldOutResult> {
    if task.is_training() || meta.trained_tasks.contains(&task) {
        return Err(Error::Eval(format!("{task} was in the training set")));
    }
    if meta.heldout_exposed {
        return Err(Error::Eval("the model's training read held-out condition maps".into()));
    }
    let prompted = score_task(gen, set, task, Examples::Matched)?;
    let control = score_task(gen, set, task, Examples::Mismatched)?;
    Ok(HeldOutResult {
        task,
        prompted: prompted.value,
        control: control.value,
        p_value: paired_t_test(&control.per_record, &prompted.per_record)?,
        records: set.records.len(),
    })
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub condition: Image,
    pub edited: Image,
}

/// Extracts `forward_task`'s map from `image`, then generates a new image from
/// that map and `new_text` with the matching inverse task.
pub fn two_step_edit(
    gen: &mut dyn ImageGenerator,
    set: &EvalSet<'_>,
    image: &Image,
    forward_task: TaskId,
    new_text: &str,
    seed: u64,
) -> Result<EditResult> {
    if forward_task.direction() != Direction::Forward {
        return Err(Error::Eval(format!("{forward_task} is not a forward task")));
    }
    let kind = forward_task.transform();
    let donor_image = set.corpus.image(set.donor);
    let donor_map = set.corpus.condition(set.donor, kind)?;
    let step1 = VisionLanguagePrompt {
        text: TextGuidance::Label(forward_task.label()),
        example_source: donor_image.clone(),
        example_target: donor_map.clone(),
        query: image.clone(),
    };
    let condition = gen.generate(&[step1], &[chain_seed(seed, 0)])?.remove(0);
    let step2 = VisionLanguagePrompt {
        text: TextGuidance::Caption(new_text.to_string()),
        example_source: donor_map,
        example_target: donor_image,
        query: condition.clone(),
    };
    let edited = gen.generate(&[step2], &[chain_seed(seed, 1)])?.remove(0);
    Ok(EditResult { condition, edited })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub task: TaskId,
    /// Cycle error of edits that keep the original caption, against the
    /// step-1 map.
    pub edit_cycle: f64,
    pub direct_cycle: f64,
    pub ratio: f64,
    pub records: usize,
}

/// Runs the two-step edit with the original captions on the evaluation
/// records and compares its cycle error to the direct inverse task's.
pub fn edit_consistency(
    gen: &mut dyn ImageGenerator,
    set: &EvalSet<'_>,
    forward_task: TaskId,
    direct_cycle: f64,
) -> Result<EditSummary> {
    let kind = forward_task.transform();
    let mut sq = 0.0;
    for &slot in &set.records {
        let image = set.corpus.image(slot);
        let caption = set.corpus.record(slot).caption().to_string();
        let edit = two_step_edit(gen, set, &image, forward_task, &caption, set.record_seed(slot))?;
        sq += cycle_error(&edit.edited, &edit.condition, kind).powi(2);
    }
    let edit_cycle = (sq / set.records.len() as f64).sqrt();
    Ok(EditSummary {
        task: forward_task.flipped(),
        edit_cycle,
        direct_cycle,
        ratio: edit_cycle / direct_cycle,
        records: set.records.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Different donors for the example pair; text and query fixed.
    A,
    /// Different queries; donor and text fixed.
    B,
    /// Different captions; donor and query fixed.
    C,
    /// Queries of a different type than the example source.
    D,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::A, AblationMode::B, AblationMode::C, AblationMode::D];

    pub fn letter(self) -> char {
        match self {
            AblationMode::A => 'a',
            AblationMode::B => 'b',
            AblationMode::C => 'c',
            AblationMode::D => 'd',
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "a" => Ok(AblationMode::A),
            "b" => Ok(AblationMode::B),
            "c" => Ok(AblationMode::C),
            "d" => Ok(AblationMode::D),
            other => Err(Error::Config(format!("unknown ablation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub prompt: VisionLanguagePrompt,
    pub output: Image,
    /// Cycle error against the row's query, read as a map of the task's type.
    pub cycle: f64,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub mode: AblationMode,
    pub rows: Vec<AblationRow>,
    /// Mean pairwise unit RMSE between the row outputs.
    pub variation: f64,
    pub mean_cycle: f64,
}

impl AblationResult {
    /// Contact-sheet rows: example source, example target, query, output.
    pub fn sheet(&self) -> Vec<Vec<Image>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.prompt.example_source.clone(),
                    r.prompt.example_target.clone(),
                    r.prompt.query.clone(),
                    r.output.clone(),
                ]
            })
            .collect()
    }
}

fn mean_pairwise(images: &[Image]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            sum += unit_mse(&images[i], &images[j]).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Varies one part of an inverse-task prompt for `slot` at a time, with the
/// same seed for every row. `variants` rows per mode (mode D has one row per
/// other map type plus the raw image, at most `variants`).
pub fn ablation_grid(
    gen: &mut dyn ImageGenerator,
    set: &EvalSet<'_>,
    slot: usize,
    task: TaskId,
    modes: &[AblationMode],
    variants: usize,
) -> Result<Vec<AblationResult>> {
    if task.direction() != Direction::Inverse {
        return Err(Error::Eval(format!("ablations use an inverse task, got {task}")));
    }
    let corpus = set.corpus;
    let kind = task.transform();
    let seed = set.record_seed(slot);
    let (base, _) = build_prompt(corpus, slot, set.donor, task)?;
    let others = |pool: &[usize]| -> Vec<usize> {
        pool.iter().copied().filter(|&s| s != slot && s != set.donor).take(variants).collect()
    };
    let mut results = Vec::new();
    for &mode in modes {
        let prompts: Vec<VisionLanguagePrompt> = match mode {
            AblationMode::A => others(corpus.train_indices())
                .into_iter()
                .map(|d| {
                    let (p, _) = build_prompt(corpus, slot, d, task)?;
                    Ok(p)
                })
                .collect::<Result<_>>()?,
            AblationMode::B => others(corpus.test_indices())
                .into_iter()
                .map(|q| {
                    let (p, _) = build_prompt(corpus, q, set.donor, task)?;
                    Ok(VisionLanguagePrompt {
                        text: base.text.clone(),
                        ..p
                    })
                })
                .collect::<Result<_>>()?,
            AblationMode::C => others(corpus.test_indices())
                .into_iter()
                .map(|s| VisionLanguagePrompt {
                    text: TextGuidance::Caption(corpus.record(s).caption().to_string()),
                    ..base.clone()
                })
                .collect(),
            AblationMode::D => {
                let mut queries: Vec<Image> = TransformKind::TRAINING
                    .iter()
                    .filter(|&&k| k != kind)
                    .map(|&k| corpus.condition(slot, k))
                    .collect::<Result<_>>()?;
                queries.push(corpus.image(slot));
                queries
                    .into_iter()
                    .take(variants.max(1))
                    .map(|q| VisionLanguagePrompt {
                        query: q,
                        ..base.clone()
                    })
                    .collect()
            }
        };
        let seeds = vec![seed; prompts.len()];
        let outputs = gen.generate(&prompts, &seeds)?;
        let rows: Vec<AblationRow> = prompts
            .into_iter()
            .zip(outputs)
            .map(|(prompt, output)| {
                let cycle = cycle_error(&output, &prompt.query, kind);
                AblationRow { prompt, output, cycle }
            })
            .collect();
        let images: Vec<Image> = rows.iter().map(|r| r.output.clone()).collect();
        let mean_cycle = rows.iter().map(|r| r.cycle).sum::<f64>() / rows.len().max(1) as f64;
        results.push(AblationResult {
            mode,
            variation: mean_pairwise(&images),
            mean_cycle,
            rows,
        });
    }
    Ok(results)
}

/// Cycle consistency of a single-task baseline on its own and on other
/// inverse tasks, next to the joint model's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineContrast {
    pub own_task: TaskId,
    pub baseline: BTreeMap<TaskId, f64>,
    pub joint: BTreeMap<TaskId, f64>,
    /// Smallest cross-task baseline score over its own-task score.
    pub baseline_degradation: f64,
    /// Largest over smallest joint score across the same tasks.
    pub joint_spread: f64,
}

pub fn baseline_contrast(own_task: TaskId, baseline: BTreeMap<TaskId, f64>, joint: BTreeMap<TaskId, f64>) -> Result<BaselineContrast> {
    let own = *baseline
        .get(&own_task)
        .ok_or_else(|| Error::Eval(format!("baseline has no score on its own task {own_task}")))?;
    let cross = baseline
        .iter()
        .filter(|(t, _)| **t != own_task)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let hi = joint.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = joint.values().copied().fold(f64::INFINITY, f64::min);
    Ok(BaselineContrast {
        own_task,
        baseline_degradation: cross / own,
        joint_spread: hi / lo,
        baseline,
        joint,
    })
}

/// One row of a report, shaped like a results table: forward tasks carry an
/// RMSE, inverse tasks a Fréchet distance and a cycle error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: TaskId,
    pub rmse: Option<f64>,
    pub frechet: Option<f64>,
    pub cycle: Option<f64>,
    /// Same metric with mismatched example pairs.
    pub control: Option<f64>,
    pub p_value: Option<f64>,
    pub records: usize,
}

impl TaskRow {
    /// RMSE for forward tasks, cycle error for inverse tasks.
    pub fn headline(&self) -> f64 {
        self.rmse.or(self.cycle).unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub weights_hash: String,
    pub sampler: SamplerConfig,
    pub corpus_fingerprint: String,
    pub seed: u64,
    pub extractor_seed: u64,
    pub donor_id: u64,
    pub rows: Vec<TaskRow>,
    /// Effective configuration of the evaluation.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn row(&self, task: TaskId) -> Option<&TaskRow> {
        self.rows.iter().find(|r| r.task == task)
    }

    pub fn check_finite(&self) -> Result<()> {
        for r in &self.rows {
            for v in [r.rmse, r.frechet, r.cycle, r.control, r.p_value].into_iter().flatten() {
                if !v.is_finite() {
                    return Err(Error::Eval(format!("non-finite metric for {}", r.task)));
                }
            }
        }
        Ok(())
    }
}

/// What [`evaluate`] computes.
#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub tasks: Vec<TaskId>,
    /// Score inverse training tasks with mismatched examples too.
    pub controls: bool,
    pub frechet: bool,
    pub extractor_seed: u64,
}

/// Scores `plan.tasks` on `set` and checks that sampling left the weights
/// untouched.
pub fn evaluate(
    model_id: &str,
    model: &Model<f32>,
    meta: &CheckpointMeta,
    set: &EvalSet<'_>,
    sampler: &SamplerConfig,
    plan: &EvalPlan,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let hash = weights_hash(model);
    let schedule = meta.schedule.build()?;
    let mut gen = ModelGenerator::new(model, schedule, *sampler)?;
    let extractor = FeatureExtractor::new(plan.extractor_seed);
    let mut rows = Vec::new();
    for &task in &plan.tasks {
        log::info!("evaluating {model_id} on {task}");
        let row = if !task.is_training() {
            let r = heldout_generalization(&mut gen, set, task, meta)?;
            TaskRow {
                task,
                rmse: (task.direction() == Direction::Forward).then_some(r.prompted),
                frechet: None,
                cycle: (task.direction() == Direction::Inverse).then_some(r.prompted),
                control: Some(r.control),
                p_value: Some(r.p_value),
                records: r.records,
            }
        } else {
            let score = score_task(&mut gen, set, task, Examples::Matched)?;
            match task.direction() {
                Direction::Forward => TaskRow {
                    task,
                    rmse: Some(score.value),
                    frechet: None,
                    cycle: None,
                    control: None,
                    p_value: None,
                    records: set.records.len(),
                },
                Direction::Inverse => {
                    let frechet = if plan.frechet && set.records.len() >= MIN_FRECHET_SET {
                        let reference: Vec<Image> = set.records.iter().map(|&s| set.corpus.image(s)).collect();
                        Some(frechet_proxy(&score.generated, &reference, &extractor)?)
                    } else {
                        None
                    };
                    let (control, p_value) = if plan.controls {
                        let c = score_task(&mut gen, set, task, Examples::Mismatched)?;
                        (Some(c.value), Some(paired_t_test(&c.per_record, &score.per_record)?))
                    } else {
                        (None, None)
                    };
                    TaskRow {
                        task,
                        rmse: None,
                        frechet,
                        cycle: Some(score.value),
                        control,
                        p_value,
                        records: set.records.len(),
                    }
                }
            }
        };
        rows.push(row);
    }
    if weights_hash(model) != hash {
        return Err(Error::Eval("evaluation changed the model weights".into()));
    }
    let report = EvalReport {
        model_id: model_id.to_string(),
        weights_hash: hash,
        sampler: *sampler,
        corpus_fingerprint: set.corpus.fingerprint().to_string(),
        seed: set.seed,
        extractor_seed: extractor.seed,
        donor_id: set.donor_id(),
        rows,
        config,
    };
    report.check_finite()?;
    Ok(report)
}

/// Reports compared against each other must share the Fréchet features.
pub fn check_comparable(a: &EvalReport, b: &EvalReport) -> Result<()> {
    if a.extractor_seed != b.extractor_seed {
        return Err(Error::Eval(format!(
            "feature extractor seeds differ: {} vs {}",
            a.extractor_seed, b.extractor_seed
        )));
    }
    if a.donor_id != b.donor_id || a.seed != b.seed {
        return Err(Error::Eval("reports use different donors or seeds".into()));
    }
    Ok(())
}
