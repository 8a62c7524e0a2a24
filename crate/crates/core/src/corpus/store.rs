use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{apply_transform, caption, render_scene, Image, SceneSpec, TransformKind};
use crate::error::{Error, IoContext, Result};
use crate::imageio;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: usize,
    pub test: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 4096,
            test: 512,
            resolution: super::DEFAULT_RESOLUTION,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 {
            return Err(Error::Config("corpus needs at least one training record".into()));
        }
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a multiple of 4 and at least 8, got {}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.test
    }

    /// Per-record scene seed.
    pub fn record_seed(&self, id: u64) -> u64 {
        self.seed ^ id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub split: Split,
    pub caption: String,
    pub seed: u64,
}

/// A captioned image with its condition maps, held as 8-bit planar pixels.
#[derive(Clone, Debug)]
pub struct CorpusRecord {
    pub entry: ManifestEntry,
    image: Vec<u8>,
    conditions: [Option<Vec<u8>>; 6],
}

impl CorpusRecord {
    pub fn generate(id: u64, split: Split, config: &CorpusConfig) -> Result<Self> {
        let seed = config.record_seed(id);
        let spec = SceneSpec::random(seed, config.resolution);
        let image = render_scene(&spec)?;
        let mut conditions: [Option<Vec<u8>>; 6] = Default::default();
        for kind in TransformKind::ALL {
            conditions[kind.index()] = Some(apply_transform(&image, kind).to_u8());
        }
        Ok(Self {
            entry: ManifestEntry {
                id,
                split,
                caption: caption(&spec),
                seed,
            },
            image: image.to_u8(),
            conditions,
        })
    }

    pub fn id(&self) -> u64 {
        self.entry.id
    }

    pub fn caption(&self) -> &str {
        &self.entry.caption
    }
}

/// Who is reading the corpus. Training readers may not touch held-out maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    Training,
    Evaluation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub records: usize,
    pub train: usize,
    pub test: usize,
    pub resolution: usize,
    pub fingerprint: String,
}

pub struct Corpus {
    config: CorpusConfig,
    records: Vec<CorpusRecord>,
    train: Vec<usize>,
    test: Vec<usize>,
    mode: AccessMode,
    heldout_touched: AtomicBool,
    fingerprint: String,
}

fn header_bytes(config: &CorpusConfig) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(config).expect("config serializes");
    bytes.push(b'\n');
    bytes
}

fn manifest_bytes<'a>(entries: impl Iterator<Item = &'a ManifestEntry>) -> Vec<u8> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("entry serializes");
        out.push(b'\n');
    }
    out
}

/// Hex digest over the corpus header and manifest.
pub fn corpus_fingerprint(header: &[u8], manifest: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(header);
    h.update(manifest);
    hex::encode(&h.finalize()[..16])
}

fn split_of(id: u64, config: &CorpusConfig) -> Split {
    if (id as usize) < config.train {
        Split::Train
    } else {
        Split::Test
    }
}

/// Renders every record and writes images, condition maps and the manifest.
pub fn build_corpus(config: &CorpusConfig, root: &Path, force: bool) -> Result<CorpusSummary> {
    config.validate()?;
    let manifest_path = root.join("manifest.jsonl");
    if manifest_path.exists() || root.join("corpus.json").exists() {
        if !force {
            return Err(Error::CorpusExists(root.to_path_buf()));
        }
        for split in [Split::Train, Split::Test] {
            let dir = root.join(split.name());
            if dir.exists() {
                fs::remove_dir_all(&dir).at(&dir)?;
            }
        }
        if manifest_path.exists() {
            fs::remove_file(&manifest_path).at(&manifest_path)?;
        }
    }
    fs::create_dir_all(root).at(root)?;
    let mut entries = Vec::with_capacity(config.total());
    for id in 0..config.total() as u64 {
        let record = CorpusRecord::generate(id, split_of(id, config), config)?;
        let dir = record_dir(root, &record.entry);
        fs::create_dir_all(&dir).at(&dir)?;
        let n = config.resolution;
        imageio::write_png(&dir.join("image.png"), &Image::from_u8(n, &record.image))?;
        for kind in TransformKind::ALL {
            let px = record.conditions[kind.index()].as_ref().unwrap();
            imageio::write_png(&dir.join(format!("{}.png", kind.name())), &Image::from_u8(n, px))?;
        }
        entries.push(record.entry);
    }
    let header = header_bytes(config);
    let manifest = manifest_bytes(entries.iter());
    let header_path = root.join("corpus.json");
    fs::write(&header_path, &header).at(&header_path)?;
    let tmp = root.join("manifest.jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(&manifest).at(&tmp)?;
    }
    fs::rename(&tmp, &manifest_path).at(&manifest_path)?;
    Ok(CorpusSummary {
        records: entries.len(),
        train: config.train,
        test: config.test,
        resolution: config.resolution,
        fingerprint: corpus_fingerprint(&header, &manifest),
    })
}

fn record_dir(root: &Path, e: &ManifestEntry) -> PathBuf {
    root.join(e.split.name()).join(e.id.to_string())
}

impl Corpus {
    /// Builds the corpus in memory; records are identical to what
    /// [`build_corpus`] persists.
    pub fn generate(config: &CorpusConfig, mode: AccessMode) -> Result<Self> {
        config.validate()?;
        let mut records = Vec::with_capacity(config.total());
        for id in 0..config.total() as u64 {
            let split = split_of(id, config);
            if mode == AccessMode::Training && split == Split::Test {
                continue;
            }
            let mut r = CorpusRecord::generate(id, split, config)?;
            if mode == AccessMode::Training {
                for kind in TransformKind::HELD_OUT {
                    r.conditions[kind.index()] = None;
                }
            }
            records.push(r);
        }
        let entries: Vec<ManifestEntry> = (0..config.total() as u64)
            .map(|id| ManifestEntry {
                id,
                split: split_of(id, config),
                caption: caption(&SceneSpec::random(config.record_seed(id), config.resolution)),
                seed: config.record_seed(id),
            })
            .collect();
        let header = header_bytes(config);
        let manifest = manifest_bytes(entries.iter());
        Ok(Self::assemble(config.clone(), records, mode, corpus_fingerprint(&header, &manifest)))
    }

    /// Loads a persisted corpus. Training readers load only the train split and
    /// the training condition maps.
    pub fn load(root: &Path, mode: AccessMode) -> Result<Self> {
        let header_path = root.join("corpus.json");
        let header = fs::read(&header_path).at(&header_path)?;
        let config: CorpusConfig = serde_json::from_slice(&header)?;
        let manifest_path = root.join("manifest.jsonl");
        let manifest = fs::read(&manifest_path).at(&manifest_path)?;
        let mut records = Vec::new();
        for line in BufReader::new(manifest.as_slice()).lines() {
            let line = line.at(&manifest_path)?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)?;
            if mode == AccessMode::Training && entry.split == Split::Test {
                continue;
            }
            let dir = record_dir(root, &entry);
            let (n, image) = imageio::read_png_planar(&dir.join("image.png"))?;
            if n != config.resolution {
                return Err(Error::ShapeMismatch(format!(
                    "record {} has resolution {n}, corpus declares {}",
                    entry.id, config.resolution
                )));
            }
            let mut conditions: [Option<Vec<u8>>; 6] = Default::default();
            for kind in TransformKind::ALL {
                if mode == AccessMode::Training && !kind.is_training() {
                    continue;
                }
                let (_, px) = imageio::read_png_planar(&dir.join(format!("{}.png", kind.name())))?;
                conditions[kind.index()] = Some(px);
            }
            records.push(CorpusRecord {
                entry,
                image,
                conditions,
            });
        }
        Ok(Self::assemble(config, records, mode, corpus_fingerprint(&header, &manifest)))
    }

    fn assemble(config: CorpusConfig, records: Vec<CorpusRecord>, mode: AccessMode, fingerprint: String) -> Self {
        let train = (0..records.len()).filter(|&i| records[i].entry.split == Split::Train).collect();
        let test = (0..records.len()).filter(|&i| records[i].entry.split == Split::Test).collect();
        Self {
            config,
            records,
            train,
            test,
            mode,
            heldout_touched: AtomicBool::new(false),
            fingerprint,
        }
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record slots belonging to the train split.
    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn record(&self, slot: usize) -> &CorpusRecord {
        &self.records[slot]
    }

    pub fn image(&self, slot: usize) -> Image {
        Image::from_u8(self.config.resolution, &self.records[slot].image)
    }

    /// Condition map of a record. Training readers asking for a held-out map
    /// trip the audit flag and get an error.
    pub fn condition(&self, slot: usize, kind: TransformKind) -> Result<Image> {
        if !kind.is_training() && self.mode == AccessMode::Training {
            self.heldout_touched.store(true, Ordering::SeqCst);
            return Err(Error::HeldOutTask(kind.name().to_string()));
        }
        let px = self.records[slot].conditions[kind.index()]
            .as_ref()
            .ok_or_else(|| Error::Eval(format!("condition {} not loaded", kind.name())))?;
        Ok(Image::from_u8(self.config.resolution, px))
    }

    /// True once any held-out condition was requested through this handle.
    pub fn heldout_accessed(&self) -> bool {
        self.heldout_touched.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train: 6,
            test: 3,
            resolution: 32,
            seed: 7,
        }
    }

    #[test]
    fn build_is_reproducible_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let sa = build_corpus(&small(), &a, false).unwrap();
        let sb = build_corpus(&small(), &b, false).unwrap();
        assert_eq!(
            fs::read(a.join("manifest.jsonl")).unwrap(),
            fs::read(b.join("manifest.jsonl")).unwrap()
        );
        assert_eq!(sa.fingerprint, sb.fingerprint);
        assert_eq!(sa.records, 9);
        assert!(matches!(build_corpus(&small(), &a, false), Err(Error::CorpusExists(_))));
        assert!(build_corpus(&small(), &a, true).is_ok());
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let c = Corpus::generate(&small(), AccessMode::Evaluation).unwrap();
        assert_eq!(c.train_indices().len(), 6);
        assert_eq!(c.test_indices().len(), 3);
        let train_ids: Vec<u64> = c.train_indices().iter().map(|&i| c.record(i).id()).collect();
        assert!(c.test_indices().iter().all(|&i| !train_ids.contains(&c.record(i).id())));
    }

    #[test]
    fn zero_training_records_is_an_error() {
        let cfg = CorpusConfig { train: 0, ..small() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn loaded_corpus_matches_generated_and_fingerprint_agrees() {
        let dir = tempfile::tempdir().unwrap();
        let summary = build_corpus(&small(), dir.path(), false).unwrap();
        let loaded = Corpus::load(dir.path(), AccessMode::Evaluation).unwrap();
        let generated = Corpus::generate(&small(), AccessMode::Evaluation).unwrap();
        assert_eq!(loaded.fingerprint(), summary.fingerprint);
        assert_eq!(generated.fingerprint(), summary.fingerprint);
        for slot in 0..loaded.len() {
            assert_eq!(loaded.image(slot), generated.image(slot));
            for kind in TransformKind::ALL {
                assert_eq!(loaded.condition(slot, kind).unwrap(), generated.condition(slot, kind).unwrap());
            }
        }
        let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), 9);
        assert!(dir.path().join("test/8/scribble.png").exists());
    }

    #[test]
    fn training_reader_trips_the_audit_on_held_out_maps() {
        let c = Corpus::generate(&small(), AccessMode::Training).unwrap();
        assert!(c.test_indices().is_empty());
        assert!(c.condition(0, TransformKind::HedProxy).is_ok());
        assert!(!c.heldout_accessed());
        assert!(matches!(c.condition(0, TransformKind::CannyProxy), Err(Error::HeldOutTask(_))));
        assert!(c.heldout_accessed());
    }
}
