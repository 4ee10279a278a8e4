// SPDX-License-Identifier: Apache-2.0

//! Binary checkpoint format.
//!
//! ```text
//! "SPKT" | u32 version | u64 len | config JSON | u64 count
//! per tensor: u64 len | name | u64 rank | u64 dims... | f32 payload
//! ```
//! Tensors are ordered by name. All integers and floats are little-endian.
//! Running normalization
//! statistics are stored alongside learnable tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"SPKT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(&model.cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    // Sorted by name so the bytes do not depend on insertion history.
    let mut entries: Vec<_> = model.store.iter().collect();
    entries.sort_by(|a, b| a.1.name.cmp(&b.1.name));
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (_, e) in entries {
        out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u64).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Io {
                path: Default::default(),
                source: std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("checkpoint truncated while reading {what}")),
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in memory")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let n = r.len("config length")?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::Format(format!("config blob is not a valid model config: {e}")))?;
    let mut model = Model::<f32>::build(&cfg).map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
    let count = r.len("tensor count")?;
    let live = model.store.iter().count();
    if count != live {
        return Err(Error::Format(format!("checkpoint holds {count} tensors, the configured model has {live}")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let n = r.len("tensor name length")?;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
        let rank = r.len("tensor rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.len("tensor dims")).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        let target = model.store.value_mut(id);
        if target.shape() != dims.as_slice() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {dims:?}, the configured model expects {:?}",
                target.shape()
            )));
        }
        let bytes = r.take(target.numel() * 4, "tensor payload")?;
        for (dst, src) in target.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after the tensor table", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ModelConfig::minimal(3);
        cfg.seed = 11;
        let m = Model::<f32>::build(&cfg).unwrap();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.store, m.store);
        assert_eq!(back.count_params(), m.count_params());
    }

    #[test]
    fn bad_magic_and_version() {
        let m = Model::<f32>::build(&ModelConfig::minimal(2)).unwrap();
        let mut b = to_bytes(&m).unwrap();
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Error::Format(_))));
        let mut b = to_bytes(&m).unwrap();
        b[4] = 9;
        assert!(matches!(from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_io_error() {
        let m = Model::<f32>::build(&ModelConfig::minimal(2)).unwrap();
        let b = to_bytes(&m).unwrap();
        assert!(matches!(from_bytes(&b[..b.len() - 3]), Err(Error::Io { .. })));
    }

    #[test]
    fn folded_model_round_trips() {
        let mut m = Model::<f32>::build(&ModelConfig::minimal(2)).unwrap();
        m.fold().unwrap();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert!(back.cfg.repconv_folded);
        for (_, e) in m.store.iter() {
            let id = back.store.find(&e.name).unwrap();
            assert_eq!(back.store.value(id), &e.value, "{}", e.name);
        }
    }
}
