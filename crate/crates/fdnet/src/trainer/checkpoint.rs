//! Checkpoint container.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic "FDCK" | version u32
//! model digest | data digest | loss digest     (u32 length + utf8 bytes each)
//! model config JSON                            (u32 length + utf8 bytes)
//! iteration u64
//! adam: lr f64, beta1 f64, beta2 f64, eps f64, step u64
//! record count u32
//! record: name_len u32, name, dtype u8, rank u32, dims u32*rank, payload
//! ```
//!
//! Records hold `param.<name>`, `adam.m.<name>` and `adam.v.<name>` tensors,
//! always stored as f32. Loading refuses digest mismatches unless forced and
//! treats any truncation or inconsistency as corruption (no partial state).

use super::adam::{AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::tensor::{Element, Tensor};
use std::collections::HashMap;
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"FDCK";
pub const CKPT_VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

/// Digests of the configs a checkpoint was produced under.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ConfigDigests {
    pub model: String,
    pub data: String,
    pub loss: String,
}

/// Hex SHA-256 of a canonical JSON rendering.
pub fn digest_of<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct Checkpoint<E: Element> {
    pub version: u32,
    pub digests: ConfigDigests,
    pub params: ModelParams<E>,
    pub adam: AdamState<E>,
    pub iteration: u64,
}

// --- encoding ------------------------------------------------------------------

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_record<E: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<E>) {
    put_bytes(out, name.as_bytes());
    out.push(0u8); // dtype tag: f32
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint<E: Element>(ckpt: &Checkpoint<E>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    put_bytes(&mut out, ckpt.digests.model.as_bytes());
    put_bytes(&mut out, ckpt.digests.data.as_bytes());
    put_bytes(&mut out, ckpt.digests.loss.as_bytes());
    let config_json = serde_json::to_string(&ckpt.params.config).expect("config serializes");
    put_bytes(&mut out, config_json.as_bytes());
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());
    out.extend_from_slice(&ckpt.adam.hyper.lr.to_le_bytes());
    out.extend_from_slice(&ckpt.adam.hyper.beta1.to_le_bytes());
    out.extend_from_slice(&ckpt.adam.hyper.beta2.to_le_bytes());
    out.extend_from_slice(&ckpt.adam.hyper.eps.to_le_bytes());
    out.extend_from_slice(&ckpt.adam.step.to_le_bytes());

    let named = ckpt.params.named();
    let count = named.len() * 3;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (i, (name, t)) in named.iter().enumerate() {
        put_record(&mut out, &format!("param.{name}"), t);
        put_record(&mut out, &format!("adam.m.{name}"), &ckpt.adam.m[i]);
        put_record(&mut out, &format!("adam.v.{name}"), &ckpt.adam.v[i]);
    }
    out
}

// --- decoding ------------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, limit: usize) -> Result<String> {
        let len = self.u32()? as usize;
        if len > limit {
            return Err(Error::Checkpoint(format!("string of {len} bytes exceeds limit")));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 string".into()))
    }
}

/// Raw decoded checkpoint (before parameter-tree reconstruction).
pub struct RawCheckpoint {
    pub version: u32,
    pub digests: ConfigDigests,
    pub config_json: String,
    pub iteration: u64,
    pub hyper: AdamHyper,
    pub adam_step: u64,
    pub records: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CKPT_VERSION})"
        )));
    }
    let digests = ConfigDigests {
        model: c.string(1024)?,
        data: c.string(1024)?,
        loss: c.string(1024)?,
    };
    let config_json = c.string(1 << 20)?;
    let iteration = c.u64()?;
    let hyper = AdamHyper {
        lr: c.f64()?,
        beta1: c.f64()?,
        beta2: c.f64()?,
        eps: c.f64()?,
    };
    for (name, v) in [
        ("lr", hyper.lr),
        ("beta1", hyper.beta1),
        ("beta2", hyper.beta2),
        ("eps", hyper.eps),
    ] {
        if !v.is_finite() {
            return Err(Error::Checkpoint(format!("non-finite adam hyper {name}")));
        }
    }
    let adam_step = c.u64()?;
    let count = c.u32()? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        let name = c.string(MAX_NAME)?;
        let dtype = c.u8()?;
        if dtype != 0 {
            return Err(Error::Checkpoint(format!("unsupported dtype tag {dtype}")));
        }
        let rank = c.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("rank {rank} exceeds limit")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = c.u32()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
            dims.push(d);
        }
        let payload = c.take(numel.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint("payload size overflow".into())
        })?)?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push((name, dims, values));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            bytes.len() - c.pos
        )));
    }
    Ok(RawCheckpoint {
        version,
        digests,
        config_json,
        iteration,
        hyper,
        adam_step,
        records,
    })
}

impl<E: Element> Checkpoint<E> {
    /// Rebuilds the typed checkpoint; every parameter of the stored config
    /// must be present with the right shape, with no extras left over.
    pub fn from_raw(raw: RawCheckpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&raw.config_json)
            .map_err(|e| Error::Checkpoint(format!("embedded model config: {e}")))?;
        let mut params: ModelParams<E> = init_params(&config, 0)?;
        let mut by_name: HashMap<String, (Vec<usize>, Vec<f32>)> = raw
            .records
            .into_iter()
            .map(|(n, d, v)| (n, (d, v)))
            .collect();

        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<E>> {
            let (dims, values) = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
            if dims != shape {
                return Err(Error::Checkpoint(format!(
                    "record {name} has shape {dims:?}, expected {shape:?}"
                )));
            }
            Tensor::from_vec(shape, values.into_iter().map(|v| E::from_f64(v as f64)).collect())
        };

        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut err = None;
        params.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let shape = t.shape().to_vec();
            match (
                take(&format!("param.{name}"), &shape),
                take(&format!("adam.m.{name}"), &shape),
                take(&format!("adam.v.{name}"), &shape),
            ) {
                (Ok(p), Ok(mi), Ok(vi)) => {
                    *t = p;
                    m.push(mi);
                    v.push(vi);
                }
                (a, b, c) => err = [a.err(), b.err(), c.err()].into_iter().flatten().next(),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected record {extra}")));
        }
        Ok(Checkpoint {
            version: raw.version,
            digests: raw.digests,
            params,
            adam: AdamState {
                hyper: raw.hyper,
                step: raw.adam_step,
                m,
                v,
            },
            iteration: raw.iteration,
        })
    }
}

pub fn save_checkpoint<E: Element>(path: &Path, ckpt: &Checkpoint<E>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads and validates a checkpoint. With `expected` digests the load is
/// refused on mismatch unless `force` is set.
pub fn load_checkpoint<E: Element>(
    path: &Path,
    expected: Option<&ConfigDigests>,
    force: bool,
) -> Result<Checkpoint<E>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let raw = decode_checkpoint(&bytes)?;
    if let Some(want) = expected {
        if !force && raw.digests != *want {
            return Err(Error::Checkpoint(format!(
                "config digests differ from the current run \
                 (model {} vs {}, data {} vs {}, loss {} vs {}); pass force to override",
                raw.digests.model,
                want.model,
                raw.digests.data,
                want.data,
                raw.digests.loss,
                want.loss
            )));
        }
    }
    Checkpoint::from_raw(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_config() -> ModelConfig {
        crate::model::tests::tiny_config()
    }

    fn fresh_checkpoint(seed: u64) -> Checkpoint<f32> {
        let config = small_config();
        let params: ModelParams<f32> = init_params(&config, seed).unwrap();
        let adam = AdamState::new(AdamHyper::default(), &params.named());
        Checkpoint {
            version: CKPT_VERSION,
            digests: ConfigDigests {
                model: digest_of(&config),
                data: "d".repeat(8),
                loss: "l".repeat(8),
            },
            params,
            adam,
            iteration: 17,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = fresh_checkpoint(3);
        let bytes = encode_checkpoint(&ckpt);
        let back: Checkpoint<f32> = Checkpoint::from_raw(decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(back.iteration, 17);
        assert_eq!(back.adam.step, 0);
        assert_eq!(back.digests, ckpt.digests);
        let a = ckpt.params.named();
        let b = back.params.named();
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert!(crate::tensor::bitwise_eq(ta, tb), "{na} changed in round trip");
        }
        // Second encode of the decoded state is byte-identical.
        assert_eq!(bytes, encode_checkpoint(&back));
    }

    #[test]
    fn truncated_file_is_corruption() {
        let bytes = encode_checkpoint(&fresh_checkpoint(4));
        for cut in [3, 10, 50, bytes.len() / 2, bytes.len() - 1] {
            let r = decode_checkpoint(&bytes[..cut]);
            assert!(r.is_err(), "cut at {cut} decoded");
        }
    }

    #[test]
    fn digest_mismatch_is_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.fdck");
        let ckpt = fresh_checkpoint(5);
        save_checkpoint(&path, &ckpt).unwrap();
        let other = ConfigDigests {
            model: "nope".into(),
            data: "nope".into(),
            loss: "nope".into(),
        };
        assert!(load_checkpoint::<f32>(&path, Some(&other), false).is_err());
        assert!(load_checkpoint::<f32>(&path, Some(&other), true).is_ok());
        assert!(load_checkpoint::<f32>(&path, Some(&ckpt.digests), false).is_ok());
    }

    #[test]
    fn tampered_record_name_is_rejected() {
        let ckpt = fresh_checkpoint(6);
        let mut bytes = encode_checkpoint(&ckpt);
        // Flip one byte inside the first record name region.
        let idx = bytes
            .windows(6)
            .position(|w| w == b"param.")
            .expect("record name present");
        bytes[idx] = b'q';
        let raw = decode_checkpoint(&bytes).unwrap();
        assert!(Checkpoint::<f32>::from_raw(raw).is_err());
    }

    #[test]
    fn digest_is_stable_for_equal_configs() {
        assert_eq!(digest_of(&small_config()), digest_of(&small_config()));
        let other = ModelConfig {
            flow_hidden: 7,
            ..small_config()
        };
        assert_ne!(digest_of(&small_config()), digest_of(&other));
    }
}
