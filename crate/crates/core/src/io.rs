//! On-disk formats.
//!
//! Tensor files are a JSON manifest plus a sidecar `.bin` holding every
//! tensor as little-endian f64, back to back at the manifest's offsets.
//! Logs and figure tables are CSV with a header row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::a2c::EpisodeSummary;
use crate::error::{Error, Result};
use crate::memory::{EpisodicStore, StoreMode};
use crate::model::{ModelConfig, ModelParams, TensorSpec};

pub const TENSOR_FORMAT: &str = "eph-tensors-1";

/// The `.bin` file that sits next to a manifest.
pub fn sidecar(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub format: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub episodes: usize,
    pub tensors: Vec<TensorSpec>,
}

fn write_f64s(path: &Path, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{} has {} bytes, not a whole number of f64 values",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Writes a manifest and its payload. The tensors must tile `data` exactly.
pub fn write_tensor_file(path: &Path, manifest: &TensorManifest, data: &[f64]) -> Result<()> {
    check_tiling(&manifest.tensors, data.len())?;
    write_json(path, manifest)?;
    write_f64s(&sidecar(path), data)
}

pub fn read_tensor_file(path: &Path) -> Result<(TensorManifest, Vec<f64>)> {
    let manifest: TensorManifest = read_json(path)?;
    if manifest.format != TENSOR_FORMAT {
        return Err(Error::Format(format!("unknown tensor format {:?}", manifest.format)));
    }
    let data = read_f64s(&sidecar(path))?;
    check_tiling(&manifest.tensors, data.len())?;
    Ok((manifest, data))
}

fn check_tiling(tensors: &[TensorSpec], len: usize) -> Result<()> {
    let mut at = 0;
    for t in tensors {
        if t.offset != at {
            return Err(Error::Format(format!("tensor {} starts at {}, expected {at}", t.name, t.offset)));
        }
        at += t.len();
    }
    if at != len {
        return Err(Error::Format(format!("tensors cover {at} values, payload has {len}")));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64, episodes: usize) -> Result<()> {
    let manifest = TensorManifest {
        format: TENSOR_FORMAT.into(),
        config: serde_json::to_value(params.config())?,
        seed,
        episodes,
        tensors: params.tensors().to_vec(),
    };
    write_tensor_file(path, &manifest, &params.data)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TensorManifest)> {
    let (manifest, data) = read_tensor_file(path)?;
    let config: ModelConfig = serde_json::from_value(manifest.config.clone())?;
    let params = ModelParams::from_data(&config, data)?;
    if params.tensors() != manifest.tensors.as_slice() {
        return Err(Error::Format("checkpoint tensor table does not match its model config".into()));
    }
    Ok((params, manifest))
}

/// Row-major `episodes × hidden` gate history.
pub fn save_gate_history(path: &Path, history: &[f64], hidden: usize, seed: u64) -> Result<()> {
    let episodes = history.len() / hidden.max(1);
    let manifest = TensorManifest {
        format: TENSOR_FORMAT.into(),
        config: serde_json::json!({ "hidden": hidden }),
        seed,
        episodes,
        tensors: vec![TensorSpec {
            name: "gate_history".into(),
            shape: vec![episodes, hidden],
            offset: 0,
        }],
    };
    write_tensor_file(path, &manifest, history)
}

/// Returns the history and its row width.
pub fn load_gate_history(path: &Path) -> Result<(Vec<f64>, usize)> {
    let (manifest, data) = read_tensor_file(path)?;
    match manifest.tensors.as_slice() {
        [t] if t.name == "gate_history" && t.shape.len() == 2 => Ok((data, t.shape[1])),
        _ => Err(Error::Format("expected a single gate_history tensor".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub task_id: u32,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryManifest {
    pub format: String,
    pub width: usize,
    pub mode: StoreMode,
    pub sparse_indices: Option<Vec<usize>>,
    pub entries: Vec<MemoryEntry>,
    pub tensors: Vec<TensorSpec>,
}

pub fn save_memory(path: &Path, store: &EpisodicStore) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (task_id, value) in store.entries() {
        entries.push(MemoryEntry {
            task_id,
            offset: payload.len(),
        });
        payload.extend_from_slice(value);
    }
    let manifest = MemoryManifest {
        format: TENSOR_FORMAT.into(),
        width: store.width(),
        mode: store.mode(),
        sparse_indices: store.sparse_indices().map(<[usize]>::to_vec),
        entries,
        tensors: vec![TensorSpec {
            name: "memory.payload".into(),
            shape: vec![payload.len()],
            offset: 0,
        }],
    };
    write_json(path, &manifest)?;
    write_f64s(&sidecar(path), &payload)
}

pub fn load_memory(path: &Path) -> Result<EpisodicStore> {
    let manifest: MemoryManifest = read_json(path)?;
    if manifest.format != TENSOR_FORMAT {
        return Err(Error::Format(format!("unknown tensor format {:?}", manifest.format)));
    }
    let payload = read_f64s(&sidecar(path))?;
    check_tiling(&manifest.tensors, payload.len())?;
    let mut store = match manifest.mode {
        StoreMode::Dense => EpisodicStore::dense(manifest.width),
        StoreMode::Sparse => EpisodicStore::sparse(manifest.width, manifest.sparse_indices.clone())?,
    };
    let ends = manifest
        .entries
        .iter()
        .skip(1)
        .map(|e| e.offset)
        .chain(std::iter::once(payload.len()));
    for (entry, end) in manifest.entries.iter().zip(ends) {
        if entry.offset > end || end > payload.len() {
            return Err(Error::Format(format!("memory entry {} has a bad offset", entry.task_id)));
        }
        store.insert_packed(entry.task_id, payload[entry.offset..end].to_vec())?;
    }
    Ok(store)
}

/// One CSV row per trial of every episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub episode: usize,
    pub trial: usize,
    pub reward: f64,
    pub steps_to_fixation: Option<usize>,
    pub task_id: u32,
    pub exposure_count: usize,
    /// Empty when the trial was not completed.
    pub correct: Option<bool>,
    pub episode_steps: usize,
}

pub fn trial_rows(log: &[EpisodeSummary]) -> impl Iterator<Item = TrialRow> + '_ {
    log.iter().flat_map(|s| {
        (0..s.choices.len()).map(move |k| TrialRow {
            episode: s.episode,
            trial: k,
            reward: s.trial_rewards[k],
            steps_to_fixation: s.fixation_steps[k],
            task_id: s.task_id,
            exposure_count: s.exposure_count,
            correct: s.choices[k],
            episode_steps: s.steps,
        })
    })
}

pub fn write_episode_log(path: &Path, log: &[EpisodeSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trial_rows(log) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds episode summaries from a per-trial log.
pub fn read_episode_log(path: &Path) -> Result<Vec<EpisodeSummary>> {
    let mut out: Vec<EpisodeSummary> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: TrialRow = row?;
        let fresh = out.last().is_none_or(|s| s.episode != row.episode);
        if fresh {
            if row.trial != 0 {
                return Err(Error::Format(format!("episode {} does not start at trial 0", row.episode)));
            }
            out.push(EpisodeSummary {
                episode: row.episode,
                task_id: row.task_id,
                exposure_count: row.exposure_count,
                steps: row.episode_steps,
                total_reward: 0.0,
                choices: Vec::new(),
                fixation_steps: Vec::new(),
                trial_rewards: Vec::new(),
            });
        }
        let s = out.last_mut().expect("pushed above");
        if row.trial != s.choices.len() {
            return Err(Error::Format(format!("episode {} trial {} out of order", row.episode, row.trial)));
        }
        s.total_reward += row.reward;
        s.choices.push(row.correct);
        s.fixation_steps.push(row.steps_to_fixation);
        s.trial_rewards.push(row.reward);
    }
    Ok(out)
}

/// Writes any serializable rows as a CSV table.
pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_json(path)
}
