use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::{AdamState, ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACLC";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_PREFIX: &str = "adam.";

/// Serializes named tensors in name order with 64-bit values.
pub fn encode_checkpoint(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Data("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("tensor name too long: {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Data(format!("rank of {name:?} exceeds 255")))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Data(format!("extent of {name:?} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos as u64, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::format(r.pos as u64, format!("extents of {name:?} overflow")))?;
        let raw = r.take(numel * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::format(at, format!("duplicate tensor {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let tensors = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let bytes = encode_checkpoint(&tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Model parameters stored at `path`; optimizer tensors are skipped.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut params = ModelParams::new();
    for (name, t) in decode_checkpoint(&bytes)? {
        if !name.starts_with(ADAM_PREFIX) {
            params.insert(name, t);
        }
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs (XE) or steps (SCST).
    pub epoch: usize,
    pub seed: u64,
    pub adam_step: u64,
}

/// Parameters, optimizer moments and the sidecar metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: BTreeMap<String, Tensor> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.extend(self.adam.export(&self.params)?);
        fs::write(path, encode_checkpoint(&tensors)?).map_err(|e| Error::io(path, e))?;
        let meta = sidecar_path(path);
        let mut json = serde_json::to_string_pretty(&self.meta)?;
        json.push('\n');
        fs::write(&meta, json).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = decode_checkpoint(&bytes)?;
        let meta_path = sidecar_path(path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let mut params = ModelParams::new();
        let mut moments = BTreeMap::new();
        for (name, t) in tensors {
            if name.starts_with(ADAM_PREFIX) {
                moments.insert(name, t);
            } else {
                params.insert(name, t);
            }
        }
        let adam = AdamState::import(meta.train.adam(), meta.adam_step, &moments);
        Ok(Checkpoint { params, adam, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), Tensor::vector(vec![1.5, -0.0, f64::MIN_POSITIVE]).unwrap());
        m.insert("a".to_string(), Tensor::matrix(1, 2, vec![0.1, 1e300]).unwrap());
        m
    }

    #[test]
    fn golden_bytes() {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::vector(vec![1.0]).unwrap());
        let bytes = encode_checkpoint(&m).unwrap();
        let mut want = b"ACLC".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend([1, 0, b'w', 1, 1, 0, 0, 0]);
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let back = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for (k, t) in &m {
            let b = &back[k];
            assert_eq!(b.shape(), t.shape());
            let bits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, want);
        }
    }

    #[test]
    fn format_errors_carry_offsets() {
        let good = encode_checkpoint(&sample()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(
            decode_checkpoint(&good[..good.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut long = good;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format { .. })));
    }
}
