//! Checkpoint container: one JSON header line (format, version, payload
//! length and SHA-256) followed by a JSON payload. Tensors are stored as
//! base64 of their little-endian f64 bytes, so round-trips are bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{DualEncoder, EncoderConfig, EncoderParams};
use crate::error::{MvrError, Result};
use crate::io::atomic_write;
use crate::text::Vocab;

use super::{EpochAccumulator, OptimizerConfig, OptimizerState, TrainConfig, TrainState};

pub const CHECKPOINT_FORMAT: &str = "mvr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    payload_len: usize,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Payload {
    train_config: TrainConfig,
    encoder_config: EncoderConfig,
    vocab: String,
    epoch: usize,
    step_in_epoch: usize,
    global_step: u64,
    tau: f64,
    accum: EpochAccumulator,
    optimizer_config: OptimizerConfig,
    optimizer_step: u64,
    optimizer_m: Vec<String>,
    optimizer_v: Vec<String>,
    query: Vec<String>,
    doc: Vec<String>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn encode_tensor(t: &[f64]) -> String {
    let bytes: Vec<u8> = t.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_tensor(s: &str, expected: usize, what: &str, path: &Path) -> Result<Vec<f64>> {
    let corrupt = |message: String| MvrError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let bytes = B64
        .decode(s)
        .map_err(|e| corrupt(format!("{what}: bad base64: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(corrupt(format!("{what}: {} bytes, expected {}", bytes.len(), expected * 8)));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn fill_params(params: &mut EncoderParams, stored: &[String], side: &str, path: &Path) -> Result<()> {
    let names = params.tensor_names();
    let tensors = params.tensors_mut();
    if tensors.len() != stored.len() {
        return Err(MvrError::Corrupt {
            path: path.to_path_buf(),
            message: format!("{side}: {} tensors, expected {}", stored.len(), tensors.len()),
        });
    }
    for ((t, s), name) in tensors.into_iter().zip(stored).zip(names) {
        let v = decode_tensor(s, t.len(), &format!("{side}.{name}"), path)?;
        t.copy_from_slice(&v);
    }
    Ok(())
}

fn decode_moments(stored: &[String], like: &DualEncoder, what: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let lens: Vec<usize> = like.tensors().iter().map(|t| t.len()).collect();
    if stored.len() != lens.len() {
        return Err(MvrError::Corrupt {
            path: path.to_path_buf(),
            message: format!("{what}: {} tensors, expected {}", stored.len(), lens.len()),
        });
    }
    stored
        .iter()
        .zip(lens)
        .enumerate()
        .map(|(i, (s, n))| decode_tensor(s, n, &format!("{what}[{i}]"), path))
        .collect()
}

/// Writes `state` atomically to `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let payload = Payload {
        train_config: state.config.clone(),
        encoder_config: state.model.config.clone(),
        vocab: state.vocab.to_text(),
        epoch: state.epoch,
        step_in_epoch: state.step_in_epoch,
        global_step: state.global_step,
        tau: state.tau,
        accum: state.accum.clone(),
        optimizer_config: state.optimizer.config,
        optimizer_step: state.optimizer.step,
        optimizer_m: state.optimizer.m.iter().map(|t| encode_tensor(t)).collect(),
        optimizer_v: state.optimizer.v.iter().map(|t| encode_tensor(t)).collect(),
        query: state.model.query.tensors().into_iter().map(encode_tensor).collect(),
        doc: state.model.doc.tensors().into_iter().map(encode_tensor).collect(),
    };
    let body = serde_json::to_vec(&payload)?;
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        payload_len: body.len(),
        payload_sha256: sha256_hex(&body),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&body);
    atomic_write(path, &out)
}

/// Reads a checkpoint, verifying format, version, length and checksum before
/// any state is built.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| MvrError::io(path, e))?;
    let corrupt = |message: String| MvrError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("unknown format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(MvrError::Version {
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    let body = &bytes[nl + 1..];
    if body.len() != header.payload_len {
        return Err(corrupt(format!(
            "payload is {} bytes, header says {}",
            body.len(),
            header.payload_len
        )));
    }
    if sha256_hex(body) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch".into()));
    }
    let p: Payload = serde_json::from_slice(body).map_err(|e| corrupt(format!("bad payload: {e}")))?;

    p.encoder_config.validate()?;
    p.train_config.validate()?;
    let vocab = Vocab::from_text(&p.vocab)?;
    if vocab.len() != p.encoder_config.vocab_size {
        return Err(corrupt(format!(
            "vocab has {} tokens, encoder expects {}",
            vocab.len(),
            p.encoder_config.vocab_size
        )));
    }
    let mut query = EncoderParams::zeros(&p.encoder_config);
    fill_params(&mut query, &p.query, "query", path)?;
    let mut doc = EncoderParams::zeros(&p.encoder_config);
    fill_params(&mut doc, &p.doc, "doc", path)?;
    let model = DualEncoder {
        config: p.encoder_config,
        query,
        doc,
    };
    let (m, v) = match p.optimizer_config {
        OptimizerConfig::Adam { .. } => (
            decode_moments(&p.optimizer_m, &model, "optimizer.m", path)?,
            decode_moments(&p.optimizer_v, &model, "optimizer.v", path)?,
        ),
        OptimizerConfig::Sgd => (Vec::new(), Vec::new()),
    };
    Ok(TrainState {
        config: p.train_config,
        vocab,
        model,
        optimizer: OptimizerState {
            config: p.optimizer_config,
            step: p.optimizer_step,
            m,
            v,
        },
        epoch: p.epoch,
        step_in_epoch: p.step_in_epoch,
        global_step: p.global_step,
        tau: p.tau,
        accum: p.accum,
    })
}

/// SHA-256 of a checkpoint file's bytes, recorded in index manifests.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| MvrError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
