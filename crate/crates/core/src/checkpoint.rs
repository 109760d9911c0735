//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XFLD" | version: u8 | count: u64
//! per tensor: name_len: u32 | name (UTF-8) | rank: u8 | extents: u64 × rank | data: f64 × numel
//! ```
//!
//! Trainable parameters come first, then buffers, each sorted by name.
//! Optimizer moments are not stored.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"XFLD";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 8;

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8], seed: u64) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "bad magic, expected \"XFLD\"".into(),
        });
    }
    let at = r.pos;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: at,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u64("tensor count")?;
    let mut store = ParamStore::new(seed);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at + 4,
                detail: "name is not UTF-8".into(),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Parse {
                offset: at,
                detail: format!("duplicate tensor `{name}`"),
            });
        }
        let at = r.pos;
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Parse {
                offset: at,
                detail: format!("rank {rank} outside 1..={MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.pos;
            let e = r.u64("extent")?;
            if e == 0 || e > u32::MAX as u64 {
                return Err(Error::Parse {
                    offset: at,
                    detail: format!("implausible extent {e}"),
                });
            }
            shape.push(e as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(8usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Parse {
                offset: at,
                detail: format!("tensor {shape:?} is too large"),
            })?;
        let raw = r.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert_raw(name, Tensor::new(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Parse {
            offset: r.pos,
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_bytes(&std::fs::read(path)?, 0)
}

/// Checks that a loaded store has exactly the names and shapes of `expected`.
pub fn check_compatible(loaded: &ParamStore, expected: &ParamStore) -> Result<()> {
    let a: Vec<_> = loaded.tensors().map(|(n, t)| (n, t.shape())).collect();
    let b: Vec<_> = expected.tensors().map(|(n, t)| (n, t.shape())).collect();
    if a != b {
        let missing: Vec<_> = b.iter().filter(|x| !a.contains(x)).map(|x| x.0).take(3).collect();
        let extra: Vec<_> = a.iter().filter(|x| !b.contains(x)).map(|x| x.0).take(3).collect();
        return Err(Error::Input(format!(
            "checkpoint does not match the configured model (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    Ok(())
}
