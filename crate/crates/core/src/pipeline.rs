//! Run directories and the end-to-end steps on them: corpus, both training
//! phases, the single-task baseline and evaluation reports.
//!
//! Layout of `runs/<name>/`:
//!
//! ```text
//! config.toml          effective RunConfig
//! corpus/              unless corpus_dir points elsewhere
//! checkpoints/ logs/   joint model, both phases
//! baseline/            single-task model, same layout
//! samples/ reports/
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{build_corpus, AccessMode, Corpus, CorpusSummary};
use crate::error::{Error, IoContext, Result};
use crate::evalsuite::{
    self, ablation_grid, check_comparable, evaluate, AblationMode, BaselineContrast, EvalPlan, EvalReport, EvalSet,
    ModelGenerator,
};
use crate::imageio;
use crate::network::Phase;
use crate::prompting::{Direction, TaskId};
use crate::trainer::{finetune_prompt, initial_prompt_checkpoint, pretrain_base, RunPaths, TrainOutcome};

pub const CONFIG_FILE: &str = "config.toml";
/// Environment variable that overrides the runs root.
pub const RUNS_DIR_ENV: &str = "PD_RUNS_DIR";

/// `$PD_RUNS_DIR`, or `runs` in the working directory.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// The models a run can evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Jointly finetuned prompt model.
    Prompt,
    /// Prompt model at step 0: the base with a zero-output control branch.
    Untrained,
    /// Query-only control branch finetuned on one task.
    Baseline,
}

impl ModelKind {
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Prompt => "prompt",
            ModelKind::Untrained => "untrained",
            ModelKind::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub paths: RunPaths,
}

impl Run {
    /// Creates or reopens `runs_root/<name>` and persists `config` there.
    pub fn create(runs_root: &Path, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let root = runs_root.join(&config.name);
        fs::create_dir_all(&root).at(&root)?;
        let path = root.join(CONFIG_FILE);
        if path.exists() && RunConfig::load(&path).ok().as_ref() != Some(&config) {
            log::warn!("replacing the stored config of run {}", config.name);
        }
        config.save(&path)?;
        Ok(Self {
            config,
            paths: RunPaths::new(root),
        })
    }

    /// Opens an existing run from its stored config.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(CONFIG_FILE);
        if !path.exists() {
            return Err(Error::Config(format!("{} is not a run directory (no {CONFIG_FILE})", root.display())));
        }
        Ok(Self {
            config: RunConfig::load(&path)?,
            paths: RunPaths::new(root),
        })
    }

    pub fn root(&self) -> &Path {
        &self.paths.root
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root().join(&self.config.corpus_dir)
    }

    pub fn baseline_paths(&self) -> RunPaths {
        RunPaths::new(self.root().join("baseline"))
    }

    /// Builds the corpus unless it is already on disk.
    pub fn ensure_corpus(&self) -> Result<Option<CorpusSummary>> {
        let dir = self.corpus_dir();
        if dir.join("manifest.jsonl").exists() {
            return Ok(None);
        }
        log::info!("building corpus in {}", dir.display());
        build_corpus(&self.config.corpus, &dir, false).map(Some)
    }

    /// Loads the corpus and checks it matches the config.
    pub fn corpus(&self, mode: AccessMode) -> Result<Corpus> {
        let dir = self.corpus_dir();
        if !dir.join("manifest.jsonl").exists() {
            return Err(Error::Config(format!("no corpus at {}; run gen-data first", dir.display())));
        }
        let corpus = Corpus::load(&dir, mode)?;
        if corpus.config() != &self.config.corpus {
            return Err(Error::Config(format!(
                "corpus at {} was built with {:?}, the run wants {:?}",
                dir.display(),
                corpus.config(),
                self.config.corpus
            )));
        }
        Ok(corpus)
    }

    pub fn train_base(&self, resume: bool) -> Result<TrainOutcome> {
        let corpus = self.corpus(AccessMode::Training)?;
        let c = &self.config;
        pretrain_base(&corpus, &c.network, &c.diffusion, &c.base, &self.paths, resume)
    }

    fn base_checkpoint(&self, base: Option<&Path>) -> Result<Checkpoint> {
        let path = base.map(Path::to_path_buf).unwrap_or_else(|| self.paths.last_checkpoint(Phase::Base));
        if !path.exists() {
            return Err(Error::Config(format!(
                "no base checkpoint at {}; train the base phase first or pass --base",
                path.display()
            )));
        }
        Checkpoint::load_phase(&path, Phase::Base)
    }

    pub fn train_prompt(&self, base: Option<&Path>, resume: bool) -> Result<TrainOutcome> {
        let base = self.base_checkpoint(base)?;
        let corpus = self.corpus(AccessMode::Training)?;
        finetune_prompt(&base, &corpus, &self.config.prompt, &self.paths, resume, true)
    }

    pub fn train_baseline(&self, base: Option<&Path>, resume: bool) -> Result<TrainOutcome> {
        let base = self.base_checkpoint(base)?;
        let corpus = self.corpus(AccessMode::Training)?;
        finetune_prompt(&base, &corpus, &self.config.baseline, &self.baseline_paths(), resume, false)
    }

    pub fn checkpoint_path(&self, kind: ModelKind) -> PathBuf {
        match kind {
            ModelKind::Prompt => self.paths.last_checkpoint(Phase::Prompt),
            ModelKind::Untrained => self.paths.last_checkpoint(Phase::Base),
            ModelKind::Baseline => self.baseline_paths().last_checkpoint(Phase::Prompt),
        }
    }

    /// Loads a model for evaluation, with averaged weights swapped in.
    pub fn model(&self, kind: ModelKind) -> Result<Checkpoint> {
        let path = self.checkpoint_path(kind);
        if !path.exists() {
            return Err(Error::Config(format!("no {} checkpoint at {}", kind.id(), path.display())));
        }
        let mut ckpt = match kind {
            ModelKind::Prompt | ModelKind::Baseline => Checkpoint::load_phase(&path, Phase::Prompt)?,
            ModelKind::Untrained => {
                let base = Checkpoint::load_phase(&path, Phase::Base)?;
                let fingerprint = base.meta.corpus_fingerprint.clone();
                initial_prompt_checkpoint(&base, &fingerprint, &self.config.prompt, true)?
            }
        };
        ckpt.model = ckpt.inference_model();
        Ok(ckpt)
    }

    pub fn eval_set<'a>(&self, corpus: &'a Corpus) -> Result<EvalSet<'a>> {
        let e = &self.config.eval;
        EvalSet::new(corpus, e.records, e.donor, e.seed)
    }

    /// Evaluates `kind` on `tasks` and writes the report to
    /// `reports/<model>-<label>-s<seed>.json`. `controls` turns the
    /// mismatched-example scores of inverse training tasks on or off.
    pub fn evaluate(
        &self,
        corpus: &Corpus,
        kind: ModelKind,
        tasks: &[TaskId],
        label: &str,
        controls: bool,
    ) -> Result<(EvalReport, PathBuf)> {
        let ckpt = self.model(kind)?;
        if ckpt.model.config.resolution != corpus.resolution() {
            return Err(Error::ShapeMismatch(format!(
                "model resolution {} differs from corpus resolution {}",
                ckpt.model.config.resolution,
                corpus.resolution()
            )));
        }
        let set = self.eval_set(corpus)?;
        let e = &self.config.eval;
        let plan = EvalPlan {
            tasks: tasks.to_vec(),
            controls,
            frechet: e.frechet,
            extractor_seed: e.extractor_seed,
        };
        let config = serde_json::to_value(&self.config)?;
        let report = evaluate(kind.id(), &ckpt.model, &ckpt.meta, &set, &self.config.sampler, &plan, config)?;
        let path = self.paths.reports().join(format!("{}-{label}-s{}.json", kind.id(), e.seed));
        self.write_report(&path, &report)?;
        Ok((report, path))
    }

    /// Scores the single-task baseline on every inverse training task and
    /// sets it against the joint model's `joint` report.
    pub fn baseline_contrast(&self, corpus: &Corpus, joint: &EvalReport) -> Result<(BaselineContrast, PathBuf)> {
        let own = self.config.baseline_task()?;
        let inverse: Vec<TaskId> = TaskId::TRAINING.into_iter().filter(|t| t.direction() == Direction::Inverse).collect();
        let (baseline, _) = self.evaluate(corpus, ModelKind::Baseline, &inverse, "inverse", false)?;
        check_comparable(&baseline, joint)?;
        let cycles = |r: &EvalReport| -> Result<BTreeMap<TaskId, f64>> {
            inverse
                .iter()
                .map(|&t| {
                    r.row(t)
                        .and_then(|row| row.cycle)
                        .map(|c| (t, c))
                        .ok_or_else(|| Error::Eval(format!("report {} has no cycle error for {t}", r.model_id)))
                })
                .collect()
        };
        let contrast = evalsuite::baseline_contrast(own, cycles(&baseline)?, cycles(joint)?)?;
        let path = self.paths.reports().join(format!("baseline-contrast-s{}.json", self.config.eval.seed));
        self.write_report(&path, &contrast)?;
        Ok((contrast, path))
    }

    /// Runs the ablation grids for `task` on one test record and writes one
    /// contact sheet per mode plus a JSON summary.
    pub fn ablate(&self, corpus: &Corpus, kind: ModelKind, modes: &[AblationMode]) -> Result<AblationOutput> {
        let e = &self.config.eval;
        let ckpt = self.model(kind)?;
        let set = self.eval_set(corpus)?;
        let slot = *corpus
            .test_indices()
            .get(e.ablation_record)
            .ok_or_else(|| Error::Eval(format!("ablation record {} is outside the test split", e.ablation_record)))?;
        let mut gen = ModelGenerator::new(&ckpt.model, ckpt.meta.schedule.build()?, self.config.sampler)?;
        let results = ablation_grid(&mut gen, &set, slot, e.ablation_task, modes, e.ablation_variants)?;
        let mut sheets = Vec::new();
        let mut summary = Vec::new();
        for r in &results {
            let path = self.paths.samples().join(format!(
                "{}-{}-ablate-{}-s{}.png",
                kind.id(),
                e.ablation_task,
                r.mode.letter(),
                e.seed
            ));
            let (w, h, rgb) = imageio::contact_sheet(&r.sheet());
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).at(dir)?;
            }
            imageio::write_rgb_png(&path, w, h, &rgb)?;
            sheets.push(path);
            summary.push(AblationSummary {
                mode: r.mode,
                variation: r.variation,
                mean_cycle: r.mean_cycle,
                cycles: r.rows.iter().map(|row| row.cycle).collect(),
            });
        }
        let report = self
            .paths
            .reports()
            .join(format!("{}-{}-ablate-s{}.json", kind.id(), e.ablation_task, e.seed));
        self.write_report(&report, &summary)?;
        Ok(AblationOutput { summary, sheets, report })
    }

    pub fn write_report(&self, path: &Path, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub mode: AblationMode,
    pub variation: f64,
    pub mean_cycle: f64,
    pub cycles: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationOutput {
    pub summary: Vec<AblationSummary>,
    pub sheets: Vec<PathBuf>,
    pub report: PathBuf,
}
