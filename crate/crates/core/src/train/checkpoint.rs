//! Binary checkpoint: magic, version, JSON header, then little-endian f64
//! payload (parameters, optimizer moments, selection matrix, normalization).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig, TrainState};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::grid::{ChannelLayout, GridSpec};
use crate::mot::SelectionMatrix;
use crate::net::NetConfig;
use crate::objectives::LossConfig;

const MAGIC: &[u8; 8] = b"OCNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    loss: LossConfig,
    train: TrainConfig,
    grid: GridSpec,
    layout: ChannelLayout,
    iteration: usize,
    optimizer_steps: u64,
    n_params: usize,
    selection_shape: (usize, usize),
    selection_momentum: f64,
    selection_k: usize,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    payload_sha256: String,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn push_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn payload(state: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    push_f64s(&mut buf, &state.params);
    push_f64s(&mut buf, &state.optimizer.m);
    push_f64s(&mut buf, &state.optimizer.v);
    push_f64s(&mut buf, state.selection.values().as_slice().expect("standard layout"));
    push_f64s(&mut buf, &state.norm.mean);
    push_f64s(&mut buf, &state.norm.std);
    buf
}

/// Serialized checkpoint bytes.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let body = payload(state);
    let header = Header {
        net: state.net_config.clone(),
        loss: state.loss_config.clone(),
        train: state.train_config.clone(),
        grid: state.grid.clone(),
        layout: state.layout.clone(),
        iteration: state.iteration,
        optimizer_steps: state.optimizer.steps,
        n_params: state.params.len(),
        selection_shape: state.selection.values().dim(),
        selection_momentum: state.selection.momentum(),
        selection_k: state.selection.k(),
        rng_seed: hex::encode(state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        payload_sha256: hex::encode(Sha256::digest(&body)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| ck("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..body_start]).map_err(|e| ck(format!("corrupt header: {e}")))?;
    let body = &bytes[body_start..];
    let c = header.layout.total_channels();
    let (vr, vc) = header.selection_shape;
    let counts = [header.n_params, header.n_params, header.n_params, vr * vc, c, c];
    let expected: usize = counts.iter().sum::<usize>() * 8;
    if body.len() != expected {
        return Err(ck(format!("payload has {} bytes, expected {expected}", body.len())));
    }
    if hex::encode(Sha256::digest(body)) != header.payload_sha256 {
        return Err(ck("payload hash mismatch"));
    }
    let mut at = 0;
    let mut take = |n: usize| -> Vec<f64> {
        let v = body[at..at + 8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        at += 8 * n;
        v
    };
    let params = take(header.n_params);
    let m = take(header.n_params);
    let v = take(header.n_params);
    let sel = take(vr * vc);
    let mean = take(c);
    let std = take(c);
    let selection = SelectionMatrix::from_values(
        Array2::from_shape_vec((vr, vc), sel).map_err(|e| ck(e.to_string()))?,
        header.selection_momentum,
        header.selection_k,
    )?;
    let seed: [u8; 32] = hex::decode(&header.rng_seed)
        .ok()
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| ck("bad rng seed"))?;
    let word_pos: u128 = header.rng_word_pos.parse().map_err(|_| ck("bad rng position"))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(word_pos);
    let t = &header.train;
    let optimizer = AdamW {
        beta1: t.beta1,
        beta2: t.beta2,
        eps: t.adam_eps,
        weight_decay: t.weight_decay,
        steps: header.optimizer_steps,
        m,
        v,
    };
    Ok(TrainState {
        net_config: header.net,
        loss_config: header.loss,
        train_config: header.train,
        grid: header.grid,
        layout: header.layout,
        norm: NormStats::new(mean, std)?,
        params,
        optimizer,
        selection,
        iteration: header.iteration,
        rng,
    })
}

/// Writes atomically (temporary file, then rename). Returns the file's
/// SHA-256 digest in hex.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<String> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Hex SHA-256 of a checkpoint file, as returned by [`save_checkpoint`].
pub fn checkpoint_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    checkpoint: String,
    sha256: String,
    format_version: u32,
    stage: &'a str,
    iteration: usize,
    seed: u64,
    config_sha256: String,
    net: &'a NetConfig,
    loss: &'a LossConfig,
    train: &'a TrainConfig,
}

/// Sha256 of the JSON serialization of the run's configs.
pub fn config_hash(state: &TrainState) -> Result<String> {
    let v = serde_json::to_vec(&(&state.net_config, &state.loss_config, &state.train_config))?;
    Ok(hex::encode(Sha256::digest(v)))
}

/// Writes `manifest.json` describing a saved checkpoint next to it.
pub fn write_manifest(state: &TrainState, checkpoint: &Path, sha256: &str) -> Result<()> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let m = Manifest {
        checkpoint: checkpoint
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256.to_string(),
        format_version: CHECKPOINT_VERSION,
        stage: state.train_config.stage.as_str(),
        iteration: state.iteration,
        seed: state.train_config.seed,
        config_sha256: config_hash(state)?,
        net: &state.net_config,
        loss: &state.loss_config,
        train: &state.train_config,
    };
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&m)?)?;
    fs::rename(tmp, dir.join("manifest.json"))?;
    Ok(())
}
