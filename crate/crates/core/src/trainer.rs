//! Two-phase training: text-to-image pretraining of the base denoiser, then
//! joint prompt finetuning of the control branch with the base encoder locked.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, OptimizerState};
use crate::corpus::{Corpus, Image};
use crate::diffusion::{chain_seed, q_sample, training_loss, training_loss_grad, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, IoContext, Result};
use crate::network::{Model, NetworkConfig, Phase, PromptImages, TextTokens};
use crate::nn::Parameterized;
use crate::prompting::{make_batch, make_caption_batch, CaptionItem, PromptItem, TaskId, TEXT_DROP_P};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Minibatches accumulated into one optimizer update.
    pub grad_accumulation: usize,
    /// Optimizer updates in the phase.
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub text_dropout_p: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight averaging decay; `None` disables it.
    pub ema_decay: Option<f64>,
    /// Prompt-phase task subset; the six training tasks when unset.
    pub tasks: Option<Vec<TaskId>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Base,
            learning_rate: 1e-4,
            batch_size: 32,
            grad_accumulation: 4,
            max_steps: 4000,
            checkpoint_every: 500,
            seed: 0,
            text_dropout_p: TEXT_DROP_P,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: None,
            tasks: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 || self.grad_accumulation == 0 || self.max_steps == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, grad_accumulation, max_steps and checkpoint_every must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.text_dropout_p) {
            return bad("text_dropout_p must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("ema_decay must lie in [0, 1)");
            }
        }
        if let Some(tasks) = &self.tasks {
            if tasks.is_empty() {
                return bad("task subset is empty");
            }
            if let Some(t) = tasks.iter().find(|t| !t.is_training()) {
                return Err(Error::HeldOutTask(t.name()));
            }
        }
        Ok(())
    }

    fn task_set(&self) -> Vec<TaskId> {
        self.tasks.clone().unwrap_or_else(|| TaskId::TRAINING.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean loss of this update's items, per task.
    pub task_losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub elapsed_s: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let file = File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.at(path)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Adam without weight decay; frozen parameters get no state and no update.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            state: OptimizerState::empty(),
        }
    }

    pub fn with_state(config: &TrainConfig, state: OptimizerState) -> Self {
        Self { state, ..Self::new(config) }
    }

    /// One update from the accumulated gradients.
    pub fn step(&mut self, model: &mut Model<f32>) -> Result<()> {
        let st = &mut self.state;
        if st.step == 0 && st.names.is_empty() {
            model.visit("", &mut |name, p| {
                if p.trainable() {
                    st.names.push(name.to_string());
                    st.shapes.push(p.shape.clone());
                    st.m.push(vec![0.0; p.len()]);
                    st.v.push(vec![0.0; p.len()]);
                }
            });
        }
        st.step += 1;
        let t = st.step as i32;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut k = 0;
        let mut mismatch = None;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable() || mismatch.is_some() {
                return;
            }
            if st.names.get(k).map(String::as_str) != Some(name) {
                mismatch = Some(name.to_string());
                return;
            }
            let (m, v) = (&mut st.m[k], &mut st.v[k]);
            for i in 0..p.len() {
                let g = p.grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.value[i] = (p.value[i] as f64 - update) as f32;
            }
            k += 1;
        });
        match mismatch {
            Some(name) => Err(Error::Config(format!("optimizer state does not match parameter {name}"))),
            None if k != st.names.len() => Err(Error::Config("optimizer state has extra parameters".into())),
            None => Ok(()),
        }
    }
}

/// One minibatch in model-ready form.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x0: Tensor<f32>,
    pub eps: Tensor<f32>,
    pub t: Vec<usize>,
    pub texts: Vec<String>,
    /// Example source, example target and query.
    pub prompt: Option<[Tensor<f32>; 3]>,
    pub tasks: Vec<Option<TaskId>>,
}

fn stack(images: impl Iterator<Item = Image>) -> Tensor<f32> {
    let images: Vec<Image> = images.collect();
    Image::batch(&images.iter().collect::<Vec<_>>())
}

impl TrainBatch {
    pub fn from_captions(items: &[CaptionItem]) -> Self {
        let x0 = stack(items.iter().map(|i| i.image.clone()));
        let eps = Tensor::from_vec(x0.shape(), items.iter().flat_map(|i| i.eps.iter().copied()).collect());
        Self {
            x0,
            eps,
            t: items.iter().map(|i| i.t).collect(),
            texts: items.iter().map(|i| i.text.text().to_string()).collect(),
            prompt: None,
            tasks: vec![None; items.len()],
        }
    }

    pub fn from_prompts(items: &[PromptItem]) -> Self {
        let x0 = stack(items.iter().map(|i| i.target.clone()));
        let eps = Tensor::from_vec(x0.shape(), items.iter().flat_map(|i| i.eps.iter().copied()).collect());
        Self {
            x0,
            eps,
            t: items.iter().map(|i| i.t).collect(),
            texts: items.iter().map(|i| i.prompt.text.text().to_string()).collect(),
            prompt: Some([
                stack(items.iter().map(|i| i.prompt.example_source.clone())),
                stack(items.iter().map(|i| i.prompt.example_target.clone())),
                stack(items.iter().map(|i| i.prompt.query.clone())),
            ]),
            tasks: items.iter().map(|i| Some(i.task)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Mean-squared error of one minibatch, with per-item losses.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub per_item: Vec<f64>,
}

/// Forward and backward on one minibatch; the loss gradient is multiplied by
/// `scale` before accumulating into the parameter gradients.
pub fn accumulate_gradients(
    model: &mut Model<f32>,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    scale: f64,
) -> Result<BatchLoss> {
    let per = batch.x0.len() / batch.len().max(1);
    let mut xt = Vec::with_capacity(batch.x0.len());
    for (i, &t) in batch.t.iter().enumerate() {
        xt.extend(q_sample(batch.x0.item(i), t, batch.eps.item(i), schedule)?);
    }
    let xt = Tensor::from_vec(batch.x0.shape(), xt);
    let tokens = TextTokens::encode(&batch.texts, model.config.text_len)?;
    let prompt = batch.prompt.as_ref().map(|[s, g, q]| PromptImages {
        example_source: s,
        example_target: g,
        query: q,
    });
    let (eps_hat, cache) = model.forward_train(&xt, &batch.t, &tokens, prompt.as_ref())?;
    let loss = training_loss(eps_hat.data(), batch.eps.data())?;
    let per_item = (0..batch.len())
        .map(|i| training_loss(&eps_hat.data()[i * per..(i + 1) * per], batch.eps.item(i)))
        .collect::<Result<Vec<_>>>()?;
    if loss.is_finite() {
        let grad = training_loss_grad(eps_hat.data(), batch.eps.data(), scale);
        model.backward(&cache, &Tensor::from_vec(eps_hat.shape(), grad));
    }
    Ok(BatchLoss { loss, per_item })
}

/// Artifacts under a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn last_checkpoint(&self, phase: Phase) -> PathBuf {
        self.checkpoints().join(format!("{phase}-last.ckpt"))
    }

    pub fn step_checkpoint(&self, phase: Phase, step: u64) -> PathBuf {
        self.checkpoints().join(format!("{phase}-{step:06}.ckpt"))
    }

    pub fn log(&self, phase: Phase) -> PathBuf {
        self.logs().join(format!("{phase}.jsonl"))
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Distinct data streams for the two phases under one seed.
fn phase_salt(phase: Phase) -> u64 {
    match phase {
        Phase::Base => 0x6261_7365,
        Phase::Prompt => 0x7072_6f6d_7074,
    }
}

/// The minibatch for `(step, micro)`; a pure function of the seed, so resumed
/// and uninterrupted runs see the same data.
pub fn step_batch(
    corpus: &Corpus,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    step: u64,
    micro: usize,
) -> Result<TrainBatch> {
    let index = (step as usize - 1) * config.grad_accumulation + micro;
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(config.seed ^ phase_salt(config.phase), index));
    match config.phase {
        Phase::Base => {
            let items = make_caption_batch(corpus, config.batch_size, &mut rng, schedule, config.text_dropout_p)?;
            Ok(TrainBatch::from_captions(&items))
        }
        Phase::Prompt => {
            let tasks = config.task_set();
            let batch = make_batch(
                corpus,
                config.batch_size,
                &mut rng,
                schedule,
                config.text_dropout_p,
                Some(&tasks),
            )?;
            Ok(TrainBatch::from_prompts(&batch.items))
        }
    }
}

struct State {
    model: Model<f32>,
    adam: Adam,
    ema: Option<Vec<Vec<f32>>>,
    meta: CheckpointMeta,
}

impl State {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.meta.clone(),
            model: self.model.clone(),
            optimizer: Some(self.adam.state.clone()),
            ema: self.ema.clone(),
        }
    }
}

fn ema_init(model: &Model<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    model.visit("", &mut |_, p| out.push(p.value.clone()));
    out
}

fn all_grads_finite(model: &Model<f32>) -> bool {
    let mut ok = true;
    model.visit("", &mut |_, p| ok &= p.grad.iter().all(|g| g.is_finite()));
    ok
}

/// Keeps only log records up to `step`, so a resumed run appends cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<TrainLogRecord> = read_log(path)?.into_iter().filter(|r| r.step <= step).collect();
    let mut f = File::create(path).at(path)?;
    for r in kept {
        writeln!(f, "{}", serde_json::to_string(&r)?).at(path)?;
    }
    Ok(())
}

fn resume_state(paths: &RunPaths, config: &TrainConfig) -> Result<Option<State>> {
    let path = paths.last_checkpoint(config.phase);
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load_phase(&path, config.phase)?;
    let optimizer = ckpt
        .optimizer
        .ok_or_else(|| Error::CorruptCheckpoint(format!("{} has no optimizer state to resume from", path.display())))?;
    log::info!("resuming {} from step {}", config.phase, ckpt.meta.step);
    Ok(Some(State {
        model: ckpt.model,
        adam: Adam::with_state(config, optimizer),
        ema: ckpt.ema,
        meta: ckpt.meta,
    }))
}

fn run(mut state: State, corpus: &Corpus, config: &TrainConfig, paths: &RunPaths) -> Result<TrainOutcome> {
    let schedule = state.meta.schedule.build()?;
    let phase = config.phase;
    fs::create_dir_all(paths.logs()).at(paths.logs())?;
    let log_path = paths.log(phase);
    truncate_log(&log_path, state.meta.step)?;
    let mut log_file = OpenOptions::new().create(true).append(true).open(&log_path).at(&log_path)?;
    let started = Instant::now();
    let scale = 1.0 / config.grad_accumulation as f64;
    state.meta.train = serde_json::to_value(config)?;

    if config.ema_decay.is_some() && state.ema.is_none() {
        state.ema = Some(ema_init(&state.model));
    }
    let last = paths.last_checkpoint(phase);
    while state.meta.step < config.max_steps {
        let step = state.meta.step + 1;
        state.model.zero_grad();
        let mut loss = 0.0;
        let mut task_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for micro in 0..config.grad_accumulation {
            let batch = step_batch(corpus, config, &schedule, step, micro)?;
            let out = accumulate_gradients(&mut state.model, &batch, &schedule, scale)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    detail: format!("minibatch {micro} loss {}; last good checkpoint {}", out.loss, last.display()),
                });
            }
            loss += out.loss * scale;
            for (task, l) in batch.tasks.iter().zip(&out.per_item) {
                if let Some(task) = task {
                    let e = task_sums.entry(task.name()).or_insert((0.0, 0));
                    e.0 += l;
                    e.1 += 1;
                }
            }
        }
        if !all_grads_finite(&state.model) {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                detail: format!("non-finite gradient; last good checkpoint {}", last.display()),
            });
        }
        state.adam.step(&mut state.model)?;
        if let (Some(decay), Some(ema)) = (config.ema_decay, state.ema.as_mut()) {
            let mut it = ema.iter_mut();
            state.model.visit("", &mut |_, p| {
                let e = it.next().expect("one average per parameter");
                for (a, &v) in e.iter_mut().zip(&p.value) {
                    *a = (decay * *a as f64 + (1.0 - decay) * v as f64) as f32;
                }
            });
        }
        state.meta.step = step;
        state.meta.heldout_exposed |= corpus.heldout_accessed();
        let record = TrainLogRecord {
            step,
            loss,
            task_losses: task_sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            lr: config.learning_rate,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        writeln!(log_file, "{}", serde_json::to_string(&record)?).at(&log_path)?;
        if step % 50 == 0 {
            log::info!("{phase} step {step}/{} loss {loss:.5}", config.max_steps);
        }
        if step % config.checkpoint_every == 0 || step == config.max_steps {
            let ckpt = state.checkpoint();
            ckpt.save(&paths.step_checkpoint(phase, step))?;
            ckpt.save(&last)?;
        }
    }
    if !last.exists() {
        state.checkpoint().save(&last)?;
    }
    log_file.flush().at(&log_path)?;
    Ok(TrainOutcome {
        checkpoint: state.checkpoint(),
        checkpoint_path: last,
        log_path,
    })
}

fn check_phase(config: &TrainConfig, phase: Phase) -> Result<()> {
    config.validate()?;
    if config.phase != phase {
        return Err(Error::PhaseMismatch {
            expected: phase.to_string(),
            found: config.phase.to_string(),
        });
    }
    Ok(())
}

/// Phase 1: text-conditioned denoising without a control branch.
pub fn pretrain_base(
    corpus: &Corpus,
    network: &NetworkConfig,
    schedule: &ScheduleConfig,
    config: &TrainConfig,
    paths: &RunPaths,
    resume: bool,
) -> Result<TrainOutcome> {
    check_phase(config, Phase::Base)?;
    schedule.build()?;
    let resumed = if resume { resume_state(paths, config)? } else { None };
    let state = match resumed {
        Some(s) => s,
        None => State {
            model: Model::new_base(network, config.seed)?,
            adam: Adam::new(config),
            ema: None,
            meta: CheckpointMeta {
                phase: Phase::Base,
                network: network.clone(),
                schedule: *schedule,
                step: 0,
                corpus_fingerprint: corpus.fingerprint().to_string(),
                locked: false,
                trained_tasks: Vec::new(),
                heldout_exposed: false,
                train: serde_json::Value::Null,
            },
        },
    };
    run(state, corpus, config, paths)
}

/// The prompt-phase model at step 0: base weights (averaged ones if the base
/// kept them), control branch copied from the base encoder, encoder locked.
pub fn init_prompt_model(base: &Checkpoint, config: &TrainConfig) -> Result<Model<f32>> {
    if base.meta.phase != Phase::Base {
        return Err(Error::PhaseMismatch {
            expected: Phase::Base.to_string(),
            found: base.meta.phase.to_string(),
        });
    }
    let mut model = base.inference_model().init_control_from_base(chain_seed(config.seed, 1))?;
    model.lock_encoder();
    Ok(model)
}

/// The untrained prompt-phase checkpoint that [`finetune_prompt`] starts from.
pub fn initial_prompt_checkpoint(
    base: &Checkpoint,
    corpus_fingerprint: &str,
    config: &TrainConfig,
    example_pair: bool,
) -> Result<Checkpoint> {
    let mut base = base.clone();
    base.model.config.example_pair = example_pair;
    let model = init_prompt_model(&base, config)?;
    Ok(Checkpoint {
        meta: CheckpointMeta {
            phase: Phase::Prompt,
            network: model.config.clone(),
            schedule: base.meta.schedule,
            step: 0,
            corpus_fingerprint: corpus_fingerprint.to_string(),
            locked: true,
            trained_tasks: config.task_set(),
            heldout_exposed: base.meta.heldout_exposed,
            train: serde_json::to_value(config)?,
        },
        model,
        optimizer: None,
        ema: None,
    })
}

/// Phase 2: joint finetuning on prompt batches with the encoder locked.
/// `example_pair = false` gives a query-only control branch.
pub fn finetune_prompt(
    base: &Checkpoint,
    corpus: &Corpus,
    config: &TrainConfig,
    paths: &RunPaths,
    resume: bool,
    example_pair: bool,
) -> Result<TrainOutcome> {
    check_phase(config, Phase::Prompt)?;
    if base.meta.corpus_fingerprint != corpus.fingerprint() {
        log::warn!(
            "base checkpoint was trained on corpus {} but this corpus is {}",
            base.meta.corpus_fingerprint,
            corpus.fingerprint()
        );
    }
    let resumed = if resume { resume_state(paths, config)? } else { None };
    let state = match resumed {
        Some(s) => s,
        None => {
            let start = initial_prompt_checkpoint(base, corpus.fingerprint(), config, example_pair)?;
            State {
                model: start.model,
                adam: Adam::new(config),
                ema: None,
                meta: start.meta,
            }
        }
    };
    run(state, corpus, config, paths)
}
