//! `UDPC` checkpoint container.
//!
//! Layout: magic `UDPC`, `u32` version, `u64` header length, a JSON header,
//! then every tensor as little-endian `f64` in directory order. The header
//! holds a config echo, its hash, free-form metadata and the tensor
//! directory (name, shape, byte offset into the payload).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ultradp_autodiff::Tensor;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UDPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub config_hash: String,
    pub meta: BTreeMap<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Value,
    config_hash: String,
    meta: BTreeMap<String, Value>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry { name: name.clone(), shape: t.shape(), offset };
                offset += t.len() * 8;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing UDPC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(&e.to_string()))?;
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0usize;
        for e in header.tensors {
            let len = e.shape[0].checked_mul(e.shape[1]).ok_or_else(|| bad("shape overflows"))?;
            if e.offset != expected {
                return Err(bad(&format!("tensor `{}` at offset {}, expected {expected}", e.name, e.offset)));
            }
            let end = e.offset.checked_add(len * 8).filter(|&x| x <= payload.len()).ok_or_else(|| bad("truncated payload"))?;
            let data = payload[e.offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::new(e.shape[0], e.shape[1], data)?));
            expected = end;
        }
        if expected != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self { config: header.config, config_hash: header.config_hash, meta: header.meta, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let ctx = |what: &str| format!("{what} {}", path.display());
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(ctx("staging"), e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(ctx("writing"), e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
        tmp.persist(path).map_err(|e| Error::io(ctx("renaming into"), e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), Value::from(3));
        Checkpoint {
            config: serde_json::json!({"tasks": ["edge", "knn"]}),
            config_hash: "abc".into(),
            meta,
            tensors: vec![
                ("a".into(), Tensor::new(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::zeros(0, 3)),
                ("c".into(), Tensor::row(&[0.1, 0.2, 0.3])),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.tensor("a").unwrap()), bits(c.tensor("a").unwrap()));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.udpc");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format(_))));
        let mut m = bytes;
        m[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&m), Err(Error::Format(_))));
    }
}
