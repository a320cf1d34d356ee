//! Checkpoints: a human-readable JSON manifest next to a raw little-endian
//! f64 blob.
//!
//! ```text
//! <dir>/manifest.json   format_version, config hash, config, step, tensor table
//! <dir>/params.bin      tensors concatenated in table order
//! <dir>/resume.json     optional: counters and replay buffer
//! <dir>/state.bin       optional: target network and Adam moments
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};
use crate::training::{LossReport, ReplayBuffer};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PARAMS_BLOB: &str = "params.bin";
const RESUME: &str = "resume.json";
const STATE_MANIFEST: &str = "state.json";
const STATE_BLOB: &str = "state.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub step: u64,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Everything besides the online parameters needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub env_steps: u64,
    pub episodes: u64,
    pub train_steps: u64,
    pub adam_t: u64,
    pub next_eval: u64,
    pub next_checkpoint: u64,
    /// Loss reports since the last evaluation row.
    pub pending: Vec<LossReport>,
    pub buffer: ReplayBuffer,
}

/// Target network and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerTensors {
    pub target: ParameterSet,
    pub adam_m: ParameterSet,
    pub adam_v: ParameterSet,
}

fn encode(params: &ParameterSet) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut table = Vec::with_capacity(params.len());
    let mut bytes = Vec::with_capacity(8 * params.scalar_count());
    let mut offset = 0;
    for (name, t) in params.iter() {
        table.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            trainable: t.requires_grad,
        });
        offset += t.len();
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    (table, bytes)
}

fn decode(table: &[TensorEntry], bytes: &[u8]) -> Result<ParameterSet> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Integrity(format!(
            "blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    let words = bytes.len() / 8;
    let mut params = ParameterSet::new();
    let mut expected = 0;
    for e in table {
        let len: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(Error::Integrity(format!(
                "tensor `{}` starts at {} but the previous one ends at {expected}",
                e.name, e.offset
            )));
        }
        let end = e.offset + len;
        if end > words {
            return Err(Error::Integrity(format!(
                "tensor `{}` overruns the blob ({end} > {words} values)",
                e.name
            )));
        }
        let data = bytes[8 * e.offset..8 * end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut t = Tensor::new(&e.shape, data)?;
        t.requires_grad = e.trainable;
        params.insert(e.name.clone(), t)?;
        expected = end;
    }
    if expected != words {
        return Err(Error::Integrity(format!(
            "blob holds {words} values but the table covers {expected}"
        )));
    }
    Ok(params)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `params` into `dir`, creating it if needed.
pub fn save_checkpoint(
    params: &ParameterSet,
    config: &RunConfig,
    step: u64,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tensors, bytes) = encode(params);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config.hash(),
        config: config.clone(),
        step,
        blob: PARAMS_BLOB.into(),
        blob_sha256: sha256_hex(&bytes),
        tensors,
    };
    write_atomic(&dir.join(PARAMS_BLOB), &bytes)?;
    write_atomic(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Refused(format!(
            "format_version {version:?} in {}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let hash = manifest.config.hash();
    if hash != manifest.config_hash {
        return Err(Error::Refused(format!(
            "config hash mismatch in {}: manifest says {}, config hashes to {hash}",
            path.display(),
            manifest.config_hash
        )));
    }
    Ok(manifest)
}

fn read_blob(dir: &Path, manifest: &Manifest) -> Result<ParameterSet> {
    let bytes = fs::read(dir.join(&manifest.blob))?;
    let params = decode(&manifest.tensors, &bytes)?;
    if sha256_hex(&bytes) != manifest.blob_sha256 {
        return Err(Error::Integrity(format!(
            "{} does not match its recorded checksum",
            manifest.blob
        )));
    }
    Ok(params)
}

/// Parameters, config and step stored in `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<(ParameterSet, RunConfig, u64)> {
    let manifest = read_manifest(&dir.join(MANIFEST))?;
    let params = read_blob(dir, &manifest)?;
    Ok((params, manifest.config, manifest.step))
}

/// Adds target network, optimizer moments, counters and the replay buffer to
/// an existing checkpoint directory.
pub fn save_resume_state(
    dir: &Path,
    config: &RunConfig,
    tensors: &TrainerTensors,
    state: &ResumeState,
) -> Result<()> {
    let mut joint = ParameterSet::new();
    for (prefix, set) in [
        ("target", &tensors.target),
        ("adam_m", &tensors.adam_m),
        ("adam_v", &tensors.adam_v),
    ] {
        for (name, t) in set.iter() {
            joint.insert(format!("{prefix}/{name}"), t.clone())?;
        }
    }
    let (table, bytes) = encode(&joint);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config.hash(),
        config: config.clone(),
        step: state.env_steps,
        blob: STATE_BLOB.into(),
        blob_sha256: sha256_hex(&bytes),
        tensors: table,
    };
    write_atomic(&dir.join(STATE_BLOB), &bytes)?;
    write_atomic(
        &dir.join(STATE_MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    write_atomic(&dir.join(RESUME), serde_json::to_string(state)?.as_bytes())?;
    Ok(())
}

pub fn has_resume_state(dir: &Path) -> bool {
    dir.join(RESUME).is_file() && dir.join(STATE_MANIFEST).is_file()
}

pub fn load_resume_state(dir: &Path) -> Result<(TrainerTensors, ResumeState)> {
    let manifest = read_manifest(&dir.join(STATE_MANIFEST))?;
    let joint = read_blob(dir, &manifest)?;
    let mut target = ParameterSet::new();
    let mut adam_m = ParameterSet::new();
    let mut adam_v = ParameterSet::new();
    for (name, t) in joint.iter() {
        let (prefix, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::Integrity(format!("unexpected state tensor `{name}`")))?;
        let set = match prefix {
            "target" => &mut target,
            "adam_m" => &mut adam_m,
            "adam_v" => &mut adam_v,
            _ => return Err(Error::Integrity(format!("unexpected state tensor `{name}`"))),
        };
        set.insert(rest, t.clone())?;
    }
    let state: ResumeState = serde_json::from_str(&fs::read_to_string(dir.join(RESUME))?)?;
    Ok((
        TrainerTensors {
            target,
            adam_m,
            adam_v,
        },
        state,
    ))
}

/// `<run_dir>/checkpoints/step_<step>`.
pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:08}"))
}

/// Latest checkpoint under `<run_dir>/checkpoints` that carries resume state.
pub fn latest_resumable(run_dir: &Path) -> Result<Option<PathBuf>> {
    let root = run_dir.join("checkpoints");
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(&root)? {
        let path = entry?.path();
        let is_step = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("step_"));
        if is_step && has_resume_state(&path) && best.as_ref().is_none_or(|b| path > *b) {
            best = Some(path);
        }
    }
    Ok(best)
}
