//! Binary checkpoint format.
//!
//! ```text
//! "FNOC" | u32 version | u64 header length | header JSON
//! u32 blob count | blobs...
//! blob: u32 name length | name | u8 dtype (0 = f64, 1 = complex f64)
//!       | u32 rank | u64 dims... | little-endian payload
//! ```
//!
//! The header carries configs, normalization statistics, progress and the
//! loss history; blobs carry parameters and the Adam moments
//! (`adam.m.<name>`, `adam.v.<name>`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::NormStats;
use super::optim::AdamState;
use super::{EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::nnops::{ParamKind, ParamStore};
use crate::operator::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"FNOC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub stats: NormStats,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    stats: NormStats,
    epoch: usize,
    adam_step: u64,
    /// Epoch `e` draws from stream `e` of a generator seeded with `seed`.
    rng: RngState,
    history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    next_stream: u64,
}

fn put_blob(out: &mut Vec<u8>, name: &str, kind: ParamKind, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(match kind {
        ParamKind::Real => 0,
        ParamKind::Complex => 1,
    });
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        model: ck.model.config().clone(),
        train: ck.train.clone(),
        stats: ck.stats.clone(),
        epoch: ck.epoch,
        adam_step: ck.adam.t,
        rng: RngState {
            seed: ck.train.seed,
            next_stream: ck.epoch as u64,
        },
        history: ck.history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let params = ck.model.params();
    out.extend_from_slice(&((3 * params.len()) as u32).to_le_bytes());
    for (prefix, store) in [("", params), ("adam.m.", &ck.adam.m), ("adam.v.", &ck.adam.v)] {
        for p in store.iter() {
            put_blob(&mut out, &format!("{prefix}{}", p.name), p.kind, &p.shape, &p.data);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("length overflows usize"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.len()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let count = r.u32()? as usize;
    let mut blobs = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::format("blob name is not UTF-8"))?
            .to_string();
        let kind = match r.take(1)?[0] {
            0 => ParamKind::Real,
            1 => ParamKind::Complex,
            t => return Err(Error::format(format!("unknown dtype tag {t} in blob {name}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(if kind == ParamKind::Complex { 2usize } else { 1 }, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("blob size overflows"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format("blob size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs
            .push(name, kind, shape, data)
            .map_err(|e| Error::format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    let split = |prefix: &str| -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for p in blobs.iter() {
            let rest = match prefix {
                "" if !p.name.starts_with("adam.") => Some(p.name.as_str()),
                "" => None,
                _ => p.name.strip_prefix(prefix),
            };
            if let Some(n) = rest {
                s.push(n, p.kind, p.shape.clone(), p.data.clone())?;
            }
        }
        Ok(s)
    };
    let params = split("")?;
    let m = split("adam.m.")?;
    let v = split("adam.v.")?;
    if !params.same_layout(&m) || !params.same_layout(&v) {
        return Err(Error::format("optimizer moments do not match the parameters"));
    }
    if header.rng.seed != header.train.seed || header.rng.next_stream != header.epoch as u64 {
        return Err(Error::format("checkpoint rng state is inconsistent with its progress"));
    }
    let model = Model::from_params(header.model, params).map_err(|e| Error::format(e.to_string()))?;
    Ok(Checkpoint {
        model,
        train: header.train,
        stats: header.stats,
        epoch: header.epoch,
        adam: AdamState {
            m,
            v,
            t: header.adam_step,
        },
        history: header.history,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
