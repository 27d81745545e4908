//! Binary checkpoint format.
//!
//! ```text
//! magic    "AUECRL1\n"
//! u32      tensor count
//! per tensor:
//!   u32    name length, then UTF-8 name bytes
//!   u32    rank, then rank × u32 dims
//!   f64    values, row-major
//! ```
//!
//! All integers and floats are little-endian with no padding. Two metadata
//! tensors ride along: `meta.stage` and `meta.config_hash`.

use std::fs;
use std::path::Path;

use crate::diffcore::{Param, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::knowledge::PriorMatrix;
use crate::model::{ModelConfig, ModelState};

pub const MAGIC: &[u8; 8] = b"AUECRL1\n";
pub const META_STAGE: &str = "meta.stage";
pub const META_CONFIG_HASH: &str = "meta.config_hash";

pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let params = model.params();
    let count = params.len() + 2;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let mut put = |name: &str, t: &Tensor| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in params.iter() {
        put(p.name(), p.value());
    }
    put(META_STAGE, &Tensor::filled(&[1], f64::from(model.stage())));
    put(
        META_CONFIG_HASH,
        &Tensor::filled(&[1], f64::from(model.config().shape_hash())),
    );
    out
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
            None => Err(Error::Format(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Raw `(name, tensor)` records in file order.
pub fn read_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic: not a checkpoint".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32("tensor count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        let n: usize = shape.iter().product();
        if rank == 0 || n == 0 || n > bytes.len() / 8 {
            return Err(Error::Format(format!("tensor `{name}` has invalid shape {shape:?}")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64(&name)?);
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        records.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

/// Restores a model saved with the same configuration. Every parameter the
/// configuration defines must be present with the expected shape.
pub fn from_bytes(bytes: &[u8], config: &ModelConfig, prior: &PriorMatrix) -> Result<ModelState> {
    let records = read_records(bytes)?;
    let template = ModelState::init(config, prior, 0)?;
    let mut store = ParamStore::new();
    let mut stage = 0;
    let mut hash = None;
    let mut loaded = std::collections::BTreeMap::new();
    for (name, t) in records {
        if name == META_STAGE || name == META_CONFIG_HASH {
            if t.len() != 1 {
                return Err(Error::shape(format!("`{name}` must hold one value")));
            }
            if name == META_STAGE {
                stage = t.item() as u32;
            } else {
                hash = Some(t.item());
            }
            continue;
        }
        if loaded.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    for p in template.params().iter() {
        let t = loaded
            .remove(p.name())
            .ok_or_else(|| Error::shape(format!("missing tensor `{}`", p.name())))?;
        if t.shape() != p.value().shape() {
            return Err(Error::shape(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                p.name(),
                t.shape(),
                p.value().shape()
            )));
        }
        let mut restored = Param::new(p.name(), t);
        if let Some((lo, hi)) = p.bounds() {
            restored = restored.with_bounds(lo, hi);
        }
        store.insert(restored)?;
    }
    if let Some(name) = loaded.keys().next() {
        return Err(Error::shape(format!("unexpected tensor `{name}`")));
    }
    if let Some(h) = hash {
        if h != f64::from(config.shape_hash()) {
            return Err(Error::shape(format!(
                "`{META_CONFIG_HASH}` is {h}, configuration hashes to {}",
                config.shape_hash()
            )));
        }
    }
    Ok(ModelState::from_parts(config.clone(), store, stage))
}

pub fn save(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>, config: &ModelConfig, prior: &PriorMatrix) -> Result<ModelState> {
    from_bytes(&fs::read(path)?, config, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::KnowledgeBase;

    fn model() -> (ModelConfig, PriorMatrix, ModelState) {
        let kb = KnowledgeBase::builtin();
        let prior = kb.prior();
        let config = ModelConfig::default();
        let m = ModelState::init(&config, &prior, 3).unwrap();
        (config, prior, m)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (config, prior, mut m) = model();
        m.set_stage(2);
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes, &config, &prior).unwrap();
        assert_eq!(back.stage(), 2);
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name(), b.name());
            assert!(a.value().bit_eq(b.value()));
            assert_eq!(a.bounds(), b.bounds());
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let (_, _, m) = model();
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..8], b"AUECRL1\n");
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, m.params().len() + 2);
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], crate::model::names::ENC_EXPR_W.as_bytes());
    }

    #[test]
    fn bad_magic() {
        let (config, prior, m) = model();
        let mut bytes = to_bytes(&m);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes, &config, &prior), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"", &config, &prior), Err(Error::Format(_))));
    }

    #[test]
    fn truncated() {
        let (config, prior, m) = model();
        let bytes = to_bytes(&m);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(cut, &config, &prior), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let (_, prior, m) = model();
        let bytes = to_bytes(&m);
        let other = ModelConfig {
            d_a: 8,
            ..ModelConfig::default()
        };
        match from_bytes(&bytes, &other, &prior) {
            Err(Error::Shape(msg)) => assert!(msg.contains("encoder.au0.weight"), "{msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let records = read_records(&bytes).unwrap();
        assert_eq!(records.last().unwrap().0, META_CONFIG_HASH);
    }
}
