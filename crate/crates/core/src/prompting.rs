//! Vision-language prompts: `{text, example source -> example target, query}`,
//! the tasks they encode, and training batches built from them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{AccessMode, Corpus, Image, TransformKind};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

/// Default probability of dropping the text guidance during training.
pub const TEXT_DROP_P: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Image -> condition map.
    Forward,
    /// Condition map -> image.
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TaskId {
    InvDepth,
    InvHed,
    InvSeg,
    FwdDepth,
    FwdHed,
    FwdSeg,
    InvCanny,
    InvNormal,
    InvScribble,
    FwdCanny,
    FwdNormal,
    FwdScribble,
}

impl TaskId {
    pub const TRAINING: [TaskId; 6] = [
        TaskId::InvDepth,
        TaskId::InvHed,
        TaskId::InvSeg,
        TaskId::FwdDepth,
        TaskId::FwdHed,
        TaskId::FwdSeg,
    ];
    pub const HELD_OUT: [TaskId; 6] = [
        TaskId::InvCanny,
        TaskId::InvNormal,
        TaskId::InvScribble,
        TaskId::FwdCanny,
        TaskId::FwdNormal,
        TaskId::FwdScribble,
    ];

    pub fn new(direction: Direction, kind: TransformKind) -> Self {
        use TransformKind as K;
        match (direction, kind) {
            (Direction::Inverse, K::DepthProxy) => TaskId::InvDepth,
            (Direction::Inverse, K::HedProxy) => TaskId::InvHed,
            (Direction::Inverse, K::SegProxy) => TaskId::InvSeg,
            (Direction::Inverse, K::CannyProxy) => TaskId::InvCanny,
            (Direction::Inverse, K::NormalProxy) => TaskId::InvNormal,
            (Direction::Inverse, K::ScribbleProxy) => TaskId::InvScribble,
            (Direction::Forward, K::DepthProxy) => TaskId::FwdDepth,
            (Direction::Forward, K::HedProxy) => TaskId::FwdHed,
            (Direction::Forward, K::SegProxy) => TaskId::FwdSeg,
            (Direction::Forward, K::CannyProxy) => TaskId::FwdCanny,
            (Direction::Forward, K::NormalProxy) => TaskId::FwdNormal,
            (Direction::Forward, K::ScribbleProxy) => TaskId::FwdScribble,
        }
    }

    pub fn transform(self) -> TransformKind {
        use TransformKind as K;
        match self {
            TaskId::InvDepth | TaskId::FwdDepth => K::DepthProxy,
            TaskId::InvHed | TaskId::FwdHed => K::HedProxy,
            TaskId::InvSeg | TaskId::FwdSeg => K::SegProxy,
            TaskId::InvCanny | TaskId::FwdCanny => K::CannyProxy,
            TaskId::InvNormal | TaskId::FwdNormal => K::NormalProxy,
            TaskId::InvScribble | TaskId::FwdScribble => K::ScribbleProxy,
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            TaskId::InvDepth
            | TaskId::InvHed
            | TaskId::InvSeg
            | TaskId::InvCanny
            | TaskId::InvNormal
            | TaskId::InvScribble => Direction::Inverse,
            _ => Direction::Forward,
        }
    }

    pub fn is_training(self) -> bool {
        self.transform().is_training()
    }

    /// The same transform in the opposite direction.
    pub fn flipped(self) -> Self {
        let dir = match self.direction() {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        };
        TaskId::new(dir, self.transform())
    }

    /// Fixed text guidance of the forward task, e.g. `"hed maps"`.
    pub fn label(self) -> String {
        format!("{} maps", self.transform().name())
    }

    pub fn name(self) -> String {
        let prefix = match self.direction() {
            Direction::Forward => "fwd",
            Direction::Inverse => "inv",
        };
        format!("{prefix}-{}", self.transform().name())
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dir, kind) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("task {s:?} is not of the form inv-<map> or fwd-<map>")))?;
        let direction = match dir {
            "inv" => Direction::Inverse,
            "fwd" => Direction::Forward,
            _ => return Err(Error::Config(format!("unknown task direction {dir:?}"))),
        };
        let kind = TransformKind::from_name(kind).ok_or_else(|| Error::Config(format!("unknown condition {kind:?}")))?;
        Ok(TaskId::new(direction, kind))
    }
}

impl From<TaskId> for String {
    fn from(t: TaskId) -> String {
        t.name()
    }
}

impl TryFrom<String> for TaskId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TextGuidance {
    Caption(String),
    /// Fixed task label of a forward task.
    Label(String),
    Dropped,
}

impl TextGuidance {
    /// Text fed to the encoder; empty when dropped.
    pub fn text(&self) -> &str {
        match self {
            TextGuidance::Caption(s) | TextGuidance::Label(s) => s,
            TextGuidance::Dropped => "",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionLanguagePrompt {
    pub text: TextGuidance,
    pub example_source: Image,
    pub example_target: Image,
    pub query: Image,
}

/// Builds the prompt and target for `task` from two distinct corpus slots.
///
/// Inverse task on map `X`: example `(X(I2), I2)`, query `X(I1)`, caption of
/// `I1`, target `I1`. Forward task: example `(I2, X(I2))`, query `I1`, the fixed
/// label, target `X(I1)`.
pub fn build_prompt(
    corpus: &Corpus,
    query_slot: usize,
    example_slot: usize,
    task: TaskId,
) -> Result<(VisionLanguagePrompt, Image)> {
    if corpus.record(query_slot).id() == corpus.record(example_slot).id() {
        return Err(Error::InvalidPrompt(format!(
            "query and example both come from record {}",
            corpus.record(query_slot).id()
        )));
    }
    if !task.is_training() && corpus.mode() == AccessMode::Training {
        return Err(Error::HeldOutTask(task.name()));
    }
    let kind = task.transform();
    let (i1, i2) = (corpus.image(query_slot), corpus.image(example_slot));
    let (x1, x2) = (corpus.condition(query_slot, kind)?, corpus.condition(example_slot, kind)?);
    Ok(match task.direction() {
        Direction::Inverse => (
            VisionLanguagePrompt {
                text: TextGuidance::Caption(corpus.record(query_slot).caption().to_string()),
                example_source: x2,
                example_target: i2,
                query: x1,
            },
            i1,
        ),
        Direction::Forward => (
            VisionLanguagePrompt {
                text: TextGuidance::Label(task.label()),
                example_source: i2,
                example_target: x2,
                query: i1,
            },
            x1,
        ),
    })
}

/// Uniform over the six training tasks.
pub fn sample_task(rng: &mut ChaCha8Rng) -> TaskId {
    TaskId::TRAINING[rng.random_range(0..TaskId::TRAINING.len())]
}

/// Replaces the text guidance with the dropped marker with probability `p`.
/// Image parts are never touched.
pub fn drop_text(mut prompt: VisionLanguagePrompt, p: f64, rng: &mut ChaCha8Rng) -> VisionLanguagePrompt {
    if rng.random_bool(p.clamp(0.0, 1.0)) {
        prompt.text = TextGuidance::Dropped;
    }
    prompt
}

#[derive(Clone, Debug)]
pub struct PromptItem {
    pub prompt: VisionLanguagePrompt,
    pub target: Image,
    pub task: TaskId,
    pub query_id: u64,
    pub example_id: u64,
    pub t: usize,
    pub eps: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct PromptBatch {
    pub items: Vec<PromptItem>,
}

/// Two distinct train-split slots, uniformly.
fn sample_pair(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let train = corpus.train_indices();
    if train.len() < 2 {
        return Err(Error::InvalidPrompt("prompts need at least two training records".into()));
    }
    let q = rng.random_range(0..train.len());
    let mut e = rng.random_range(0..train.len() - 1);
    if e >= q {
        e += 1;
    }
    Ok((train[q], train[e]))
}

pub fn sample_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Per item: a task, two distinct records, the prompt, text dropout, a
/// timestep uniform in `[1, T]` and Gaussian noise. `tasks` defaults to the six
/// training tasks.
pub fn make_batch(
    corpus: &Corpus,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    schedule: &NoiseSchedule,
    drop_p: f64,
    tasks: Option<&[TaskId]>,
) -> Result<PromptBatch> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut items = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let task = match tasks {
            Some(ts) => ts[rng.random_range(0..ts.len())],
            None => sample_task(rng),
        };
        assert!(
            task.is_training() || corpus.mode() != AccessMode::Training,
            "training batch drew held-out task {task}"
        );
        let (q, e) = sample_pair(corpus, rng)?;
        let (prompt, target) = build_prompt(corpus, q, e, task)?;
        let prompt = drop_text(prompt, drop_p, rng);
        let t = rng.random_range(1..=schedule.timesteps());
        let eps = sample_noise(target.data().len(), rng);
        items.push(PromptItem {
            prompt,
            target,
            task,
            query_id: corpus.record(q).id(),
            example_id: corpus.record(e).id(),
            t,
            eps,
        });
    }
    Ok(PromptBatch { items })
}

/// Text-to-image item for the base phase.
#[derive(Clone, Debug)]
pub struct CaptionItem {
    pub text: TextGuidance,
    pub image: Image,
    pub t: usize,
    pub eps: Vec<f32>,
}

pub fn make_caption_batch(
    corpus: &Corpus,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    schedule: &NoiseSchedule,
    drop_p: f64,
) -> Result<Vec<CaptionItem>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let train = corpus.train_indices();
    if train.is_empty() {
        return Err(Error::Config("corpus has no training records".into()));
    }
    (0..batch_size)
        .map(|_| {
            let slot = train[rng.random_range(0..train.len())];
            let image = corpus.image(slot);
            let text = if rng.random_bool(drop_p.clamp(0.0, 1.0)) {
                TextGuidance::Dropped
            } else {
                TextGuidance::Caption(corpus.record(slot).caption().to_string())
            };
            let t = rng.random_range(1..=schedule.timesteps());
            let eps = sample_noise(image.data().len(), rng);
            Ok(CaptionItem { text, image, t, eps })
        })
        .collect()
}
