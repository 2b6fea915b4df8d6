//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CSCKPT\0\0"
//! version u32
//! hlen    u64      length of the JSON header in bytes
//! header  hlen     JSON: format_version, step, rng_state, meta, params[]
//! payload          for each header param, in order: rows*cols f64 values,
//!                  followed by the frozen base block when `has_base`
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{Param, ParamStore};

pub const MAGIC: &[u8; 8] = b"CSCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    has_base: bool,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    rng_state: serde_json::Value,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng_state: serde_json::Value,
    pub meta: serde_json::Value,
    pub params: Vec<Param>,
}

impl Checkpoint {
    pub fn new(step: u64, rng_state: serde_json::Value, meta: serde_json::Value) -> Self {
        Self {
            step,
            rng_state,
            meta,
            params: Vec::new(),
        }
    }

    /// Appends every parameter of `store`. Names must stay unique across stores.
    pub fn with_store(mut self, store: &ParamStore) -> Self {
        self.params.extend(store.iter().map(|(_, p)| p.clone()));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Copies values (and bases) into every same-named parameter of `store`.
    /// Every store parameter must be present with a matching shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let saved = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` not in checkpoint")))?;
            if saved.value.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                    saved.value.shape(),
                    store.value(id).shape()
                )));
            }
            let p = store.get_mut(id);
            p.value = saved.value.clone();
            p.base = saved.base.clone();
            p.trainable = saved.trainable;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            step: self.step,
            rng_state: self.rng_state.clone(),
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    has_base: p.base.is_some(),
                    trainable: p.trainable,
                })
                .collect(),
        };
        let hbytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + hbytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&hbytes);
        for p in &self.params {
            write_block(&mut out, &p.value);
            if let Some(base) = &p.base {
                write_block(&mut out, base);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(cur.take(hlen)?)?;
        let mut params = Vec::with_capacity(header.params.len());
        for e in header.params {
            let value = cur.block(e.rows, e.cols)?;
            let base = if e.has_base {
                Some(cur.block(e.rows, e.cols)?)
            } else {
                None
            };
            params.push(Param {
                name: e.name,
                value,
                base,
                trainable: e.trainable,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self {
            step: header.step,
            rng_state: header.rng_state,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_block(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

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

    fn block(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(rows, cols, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, state_json};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f64::ANY, 6), step in any::<u64>()) {
            let mut store = ParamStore::new();
            store.add("a.w", Tensor::from_vec(2, 3, vals.clone()));
            let b = store.add("b", Tensor::from_vec(3, 2, vals.iter().rev().cloned().collect()));
            store.get_mut(b).base = Some(Tensor::filled(3, 2, -0.0));
            store.get_mut(b).trainable = false;
            let ck = Checkpoint::new(step, state_json(&seeded(1)), serde_json::json!({"k": 1}))
                .with_store(&store);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.step, step);
            prop_assert_eq!(back.params.len(), 2);
            for (x, y) in ck.params.iter().zip(&back.params) {
                prop_assert_eq!(&x.name, &y.name);
                let xb: Vec<u64> = x.value.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
                prop_assert_eq!(x.base.as_ref().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()),
                                y.base.as_ref().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
                prop_assert_eq!(x.trainable, y.trainable);
            }
            prop_assert_eq!(back.rng_state, ck.rng_state);
        }
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::filled(2, 2, 1.0));
        let bytes = Checkpoint::new(0, serde_json::Value::Null, serde_json::Value::Null)
            .with_store(&store)
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::filled(2, 2, 1.0));
        let ck = Checkpoint::new(0, serde_json::Value::Null, serde_json::Value::Null).with_store(&a);
        let mut b = ParamStore::new();
        let id = b.add("w", Tensor::zeros(2, 2));
        ck.restore_into(&mut b).unwrap();
        assert_eq!(b.value(id), &Tensor::filled(2, 2, 1.0));
        let mut c = ParamStore::new();
        c.add("w", Tensor::zeros(1, 2));
        assert!(ck.restore_into(&mut c).is_err());
        let mut d = ParamStore::new();
        d.add("other", Tensor::zeros(2, 2));
        assert!(ck.restore_into(&mut d).is_err());
    }
}
