//! Checkpoint container, all little-endian:
//!
//! | offset | size | field                                 |
//! |--------|------|---------------------------------------|
//! | 0      | 4    | magic `QCK1`                          |
//! | 4      | 2    | version (1)                           |
//! | 6      | 2    | dtype code (0 = f32 LE)               |
//! | 8      | 4    | `n`, length of the JSON header        |
//! | 12     | n    | UTF-8 JSON [`CheckpointMeta`]         |
//! | 12+n   | ...  | tensors in header order, f32 values   |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Arch, ModelConfig, ParamSpec};
use super::{ModelState, INIT_SCHEME};
use crate::error::{Error, Result};
use crate::io::{DTYPE_F32, FORMAT_VERSION};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"QCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub init: String,
    pub tensors: Vec<ParamSpec>,
    /// Set on checkpoints written when training aborts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn new(state: ModelState, seed: u64, step: u64) -> Self {
        let arch = state.arch();
        Self {
            meta: CheckpointMeta {
                fingerprint: state.config().fingerprint(),
                config: *state.config(),
                seed,
                step,
                init: INIT_SCHEME.to_string(),
                tensors: arch.specs().to_vec(),
                note: None,
            },
            state,
        }
    }

    /// Errors unless the checkpoint was written for `cfg`.
    pub fn expect_config(&self, cfg: &ModelConfig) -> Result<()> {
        let want = cfg.fingerprint();
        if want != self.meta.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: want,
                found: self.meta.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ck.meta)?;
    let n: usize = ck.state.params().iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 4 * n);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in ck.state.params() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = u16::from_le_bytes([bytes[6], bytes[7]]);
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = bytes.get(12..12 + n).ok_or(Error::Truncated {
        expected: 12 + n,
        found: bytes.len(),
    })?;
    let meta: CheckpointMeta = serde_json::from_slice(header)?;
    meta.config.validate()?;
    if meta.fingerprint != meta.config.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: meta.config.fingerprint(),
            found: meta.fingerprint,
        });
    }
    let arch = Arch::new(&meta.config)?;
    if arch.specs() != meta.tensors.as_slice() {
        return Err(Error::Checkpoint("tensor table does not match the architecture".into()));
    }
    let body = &bytes[12 + n..];
    let total: usize = meta.tensors.iter().map(ParamSpec::len).sum();
    if body.len() < 4 * total {
        return Err(Error::Truncated {
            expected: 12 + n + 4 * total,
            found: bytes.len(),
        });
    }
    if body.len() > 4 * total {
        return Err(Error::TrailingData(body.len() - 4 * total));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let params = meta
        .tensors
        .iter()
        .map(|t| values.by_ref().take(t.len()).collect())
        .collect();
    let state = ModelState::from_params(&meta.config, params)?;
    Ok(Checkpoint { meta, state })
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            depth: 2,
            ..Default::default()
        };
        Checkpoint::new(ModelState::init(&cfg, &RandomSource::new(1)).unwrap(), 1, 42)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.meta.step, 42);
    }

    #[test]
    fn config_mismatch_is_reported() {
        let ck = sample();
        assert!(ck.expect_config(ck.state.config()).is_ok());
        let err = ck.expect_config(&ModelConfig::default()).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
    }

    #[test]
    fn damaged_files_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::TrailingData(1))));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic { .. })));
    }
}
