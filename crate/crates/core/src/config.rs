//! Run configuration: every setting of an experiment in one TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusConfig, MAX_CAPTION_TOKENS};
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{Error, IoContext, Result};
use crate::network::{NetworkConfig, Phase};
use crate::prompting::{Direction, TaskId};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test records per task.
    pub records: usize,
    /// Index into the training split of the record that supplies example pairs.
    pub donor: usize,
    pub seed: u64,
    pub extractor_seed: u64,
    /// Score inverse training tasks with mismatched examples as well.
    pub controls: bool,
    pub frechet: bool,
    pub heldout_tasks: Vec<TaskId>,
    pub edit_records: usize,
    /// Index into the test split of the record the ablation grids vary.
    pub ablation_record: usize,
    pub ablation_task: TaskId,
    pub ablation_variants: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            records: 128,
            donor: 0,
            seed: 0,
            extractor_seed: 0,
            controls: true,
            frechet: true,
            heldout_tasks: vec![TaskId::InvCanny],
            edit_records: 16,
            ablation_record: 0,
            ablation_task: TaskId::InvDepth,
            ablation_variants: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    /// Corpus location; relative paths resolve against the run directory.
    pub corpus_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub diffusion: ScheduleConfig,
    pub network: NetworkConfig,
    pub base: TrainConfig,
    pub prompt: TrainConfig,
    /// Single-task model: query-only control branch finetuned on one task.
    pub baseline: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            corpus_dir: "corpus".into(),
            corpus: CorpusConfig::default(),
            diffusion: ScheduleConfig::default(),
            network: NetworkConfig::default(),
            base: TrainConfig {
                phase: Phase::Base,
                max_steps: 2000,
                ..TrainConfig::default()
            },
            prompt: TrainConfig {
                phase: Phase::Prompt,
                max_steps: 4000,
                ..TrainConfig::default()
            },
            baseline: TrainConfig {
                phase: Phase::Prompt,
                max_steps: 4000,
                tasks: Some(vec![TaskId::InvDepth]),
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file. Keys it leaves out, including keys inside a
    /// section, take their values from [`RunConfig::default`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let given: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, given);
        let config: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Digest of the serialized config, stable across load/save.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(&Sha256::digest(self.to_toml()?.as_bytes())[..8]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("invalid run name {:?}", self.name)));
        }
        self.corpus.validate()?;
        self.network.validate()?;
        if self.network.resolution != self.corpus.resolution {
            return Err(Error::Config(format!(
                "network resolution {} differs from corpus resolution {}",
                self.network.resolution, self.corpus.resolution
            )));
        }
        if self.network.text_len < MAX_CAPTION_TOKENS {
            return Err(Error::Config(format!(
                "text_len {} is shorter than the longest caption ({MAX_CAPTION_TOKENS} tokens)",
                self.network.text_len
            )));
        }
        self.sampler.validate(&self.diffusion.build()?)?;
        for (section, train, phase) in [
            ("base", &self.base, Phase::Base),
            ("prompt", &self.prompt, Phase::Prompt),
            ("baseline", &self.baseline, Phase::Prompt),
        ] {
            if train.phase != phase {
                return Err(Error::Config(format!("[{section}] must have phase = \"{phase}\"")));
            }
            train.validate()?;
        }
        self.baseline_task()?;
        if let Some(t) = self.eval.heldout_tasks.iter().find(|t| t.is_training()) {
            return Err(Error::Config(format!("{t} is a training task, not a held-out one")));
        }
        if self.eval.records == 0 {
            return Err(Error::Config("eval.records must be positive".into()));
        }
        Ok(())
    }

    /// The one inverse task the single-task baseline is trained on.
    pub fn baseline_task(&self) -> Result<TaskId> {
        match self.baseline.tasks.as_deref() {
            Some([t]) if t.direction() == Direction::Inverse => Ok(*t),
            _ => Err(Error::Config("[baseline] tasks must name exactly one inverse task".into())),
        }
    }

    /// Writes the config atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("toml.tmp");
        fs::write(&tmp, self.to_toml()?).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (key, value) in from {
        match (into.get_mut(&key), value) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, value) => {
                into.insert(key, value);
            }
        }
    }
}
