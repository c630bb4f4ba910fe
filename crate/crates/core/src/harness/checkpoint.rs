//! Checkpoint framing.
//!
//! Layout: magic `BNCK`, `u32` version, `u64` payload length (little-endian),
//! a JSON payload, then the SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Parameter, RunningStats};
use crate::optimizers::AdamState;
use crate::telemetry::TelemetryRecord;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Hash of the configuration fields that shape the run.
    pub fingerprint: String,
    pub params: Vec<(String, Parameter)>,
    pub running: Vec<RunningStats>,
    /// Adam state keyed by parameter index.
    pub adam: BTreeMap<usize, AdamState>,
    /// Number of completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub shuffle_rng: ChaCha8Rng,
    pub records: Vec<TelemetryRecord>,
    pub schedule_rows: Vec<(u64, Vec<f64>)>,
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(state).map_err(|e| Error::State(format!("cannot serialize checkpoint: {e}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Integrity(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = (HEADER_LEN as u64).checked_add(len).and_then(|n| n.checked_add(DIGEST_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::Integrity(format!(
            "payload length {len} does not match file size {}",
            bytes.len()
        )));
    }
    let body_end = HEADER_LEN + len as usize;
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    serde_json::from_slice(&bytes[HEADER_LEN..body_end]).map_err(|e| Error::Integrity(format!("malformed payload: {e}")))
}

pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
