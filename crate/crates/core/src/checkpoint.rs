//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then little-endian `f32` blobs. The header's tensor index maps each
//! name to a byte offset into the blob section and a shape. Model weights come
//! first in parameter order, then optimizer moments (`adam.m.*`, `adam.v.*`)
//! and weight averages (`ema.*`) when present.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, IoContext, Result};
use crate::network::{Model, NetworkConfig, Phase};
use crate::nn::Parameterized;
use crate::prompting::TaskId;

pub const MAGIC: [u8; 8] = *b"PDIFCKPT";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE: usize = 8 + 4 + 8;

/// Everything in a checkpoint besides the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub network: NetworkConfig,
    pub schedule: ScheduleConfig,
    /// Optimizer updates applied so far in this phase.
    pub step: u64,
    pub corpus_fingerprint: String,
    pub locked: bool,
    pub trained_tasks: Vec<TaskId>,
    /// Set if any training phase behind these weights read a held-out map.
    pub heldout_exposed: bool,
    /// Effective training configuration, stored verbatim.
    pub train: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Adam moments for the trainable parameters, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn empty() -> Self {
        Self {
            step: 0,
            names: Vec::new(),
            shapes: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Exponential moving average of every parameter, in parameter order.
    pub ema: Option<Vec<Vec<f32>>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// The architecture described by `meta`, with placeholder weights and the
/// freeze flags the phase implies.
fn skeleton(meta: &CheckpointMeta) -> Result<Model<f32>> {
    let base = Model::new_base(&meta.network, 0)?;
    let mut model = match meta.phase {
        Phase::Base => base,
        Phase::Prompt => base.init_control_from_base(0)?,
    };
    if meta.locked {
        model.lock_encoder();
    }
    Ok(model)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut params = Vec::new();
        self.model.visit("", &mut |name, p| params.push((name.to_string(), p.shape.clone())));
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, shape: &[usize]| {
            tensors.push(TensorEntry {
                name,
                offset,
                shape: shape.to_vec(),
            });
            offset += 4 * shape.iter().product::<usize>() as u64;
        };
        for (name, shape) in &params {
            push(name.clone(), shape);
        }
        if let Some(opt) = &self.optimizer {
            for (name, shape) in opt.names.iter().zip(&opt.shapes) {
                push(format!("adam.m.{name}"), shape);
            }
            for (name, shape) in opt.names.iter().zip(&opt.shapes) {
                push(format!("adam.v.{name}"), shape);
            }
        }
        if let Some(ema) = &self.ema {
            if ema.len() != params.len() {
                return Err(Error::ShapeMismatch("EMA does not cover every parameter".into()));
            }
            for (name, shape) in &params {
                push(format!("ema.{name}"), shape);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |data: &[f32]| data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.model.visit("", &mut |_, p| put(&p.value));
        if let Some(opt) = &self.optimizer {
            opt.m.iter().chain(&opt.v).for_each(|d| put(d));
        }
        if let Some(ema) = &self.ema {
            ema.iter().for_each(|d| put(d));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(corrupt(format!("{} bytes is shorter than the preamble", bytes.len())));
        }
        if bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let body = &bytes[PREAMBLE..];
        if header_len > body.len() as u64 {
            return Err(corrupt(format!("header of {header_len} bytes but only {} remain", body.len())));
        }
        let (json, data) = body.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let meta = header.meta;

        let mut expected = 0u64;
        for e in &header.tensors {
            if e.offset != expected {
                return Err(corrupt(format!("tensor {} at offset {} (expected {expected})", e.name, e.offset)));
            }
            expected += 4 * e.shape.iter().product::<usize>() as u64;
        }
        if expected != data.len() as u64 {
            return Err(corrupt(format!("index needs {expected} data bytes, file has {}", data.len())));
        }
        let read = |e: &TensorEntry| -> Vec<f32> {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            data[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };

        let mut model = skeleton(&meta)?;
        let mut entries = header.tensors.iter();
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match entries.next() {
                Some(e) if e.name == name && e.shape == p.shape => p.value = read(e),
                Some(e) => failure = Some(format!("expected {name} {:?}, found {} {:?}", p.shape, e.name, e.shape)),
                None => failure = Some(format!("missing tensor {name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(corrupt(msg));
        }
        let rest: Vec<&TensorEntry> = entries.collect();
        let moments: Vec<&&TensorEntry> = rest.iter().filter(|e| e.name.starts_with("adam.")).collect();
        let ema_entries: Vec<&&TensorEntry> = rest.iter().filter(|e| e.name.starts_with("ema.")).collect();
        if moments.len() + ema_entries.len() != rest.len() {
            return Err(corrupt("unknown tensors after the model weights"));
        }

        let optimizer = match header.optimizer_step {
            None if moments.is_empty() => None,
            None => return Err(corrupt("optimizer moments without an optimizer step")),
            Some(step) => {
                if moments.len() % 2 != 0 {
                    return Err(corrupt("unpaired optimizer moments"));
                }
                let (ms, vs) = moments.split_at(moments.len() / 2);
                let mut state = OptimizerState::empty();
                state.step = step;
                for (m, v) in ms.iter().zip(vs) {
                    let name = m
                        .name
                        .strip_prefix("adam.m.")
                        .ok_or_else(|| corrupt(format!("unexpected tensor {}", m.name)))?;
                    if v.name.strip_prefix("adam.v.") != Some(name) || v.shape != m.shape {
                        return Err(corrupt(format!("moments for {name} do not match")));
                    }
                    state.names.push(name.to_string());
                    state.shapes.push(m.shape.clone());
                    state.m.push(read(m));
                    state.v.push(read(v));
                }
                Some(state)
            }
        };
        let ema = if ema_entries.is_empty() {
            None
        } else {
            let mut names = Vec::new();
            model.visit("", &mut |name, p| names.push((format!("ema.{name}"), p.shape.clone())));
            if names.len() != ema_entries.len()
                || names.iter().zip(&ema_entries).any(|((n, s), e)| *n != e.name || *s != e.shape)
            {
                return Err(corrupt("EMA tensors do not match the model"));
            }
            Some(ema_entries.iter().map(|e| read(e)).collect())
        };
        Ok(Self {
            meta,
            model,
            optimizer,
            ema,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp).at(&tmp)?;
            f.write_all(&bytes).at(&tmp)?;
            f.sync_all().at(&tmp)?;
        }
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }

    /// Loads and requires the given phase.
    pub fn load_phase(path: &Path, phase: Phase) -> Result<Self> {
        Self::load(path)?.expect_phase(phase)
    }

    pub fn expect_phase(self, phase: Phase) -> Result<Self> {
        if self.meta.phase != phase {
            return Err(Error::PhaseMismatch {
                expected: phase.to_string(),
                found: self.meta.phase.to_string(),
            });
        }
        Ok(self)
    }

    /// The model with its averaged weights swapped in, if it has any.
    pub fn ema_model(&self) -> Option<Model<f32>> {
        let ema = self.ema.as_ref()?;
        let mut model = self.model.clone();
        let mut it = ema.iter();
        model.visit_mut("", &mut |_, p| p.value.clone_from(it.next().expect("validated on load")));
        Some(model)
    }

    /// The weights to sample with: the averaged ones when present.
    pub fn inference_model(&self) -> Model<f32> {
        self.ema_model().unwrap_or_else(|| self.model.clone())
    }
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn weights_hash(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    model.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        for &d in &p.shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
