//! Flat binary parameter container.
//!
//! Layout (all integers u64 little-endian):
//!
//! ```text
//! magic "CMILCKP1" | count
//! per parameter: name_len name | component_len component | rank extents.. | f64 LE data..
//! ```
//!
//! A sidecar `<path>.index` lists parameter names one per line, in order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CMILCKP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index");
    PathBuf::from(s)
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    put_u64(&mut buf, store.len() as u64);
    for (_, p) in store.iter() {
        put_str(&mut buf, &p.name);
        put_str(&mut buf, &p.component);
        put_u64(&mut buf, p.value.rank() as u64);
        for &e in p.value.shape() {
            put_u64(&mut buf, e as u64);
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "truncated at byte {}",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(8)? != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let count = cur.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = cur.string()?;
        let component = cur.string()?;
        let rank = cur.u64()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value =
            Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        store.register_component(&component);
        store
            .add(&name, &component, value)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    if cur.at != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(store)
}

pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    fs::File::create(path)?.write_all(&encode(store))?;
    let mut index = String::new();
    for (_, p) in store.iter() {
        index.push_str(&p.name);
        index.push('\n');
    }
    fs::write(index_path(path), index)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let store = decode(&bytes)?;
    if let Ok(index) = fs::read_to_string(index_path(path)) {
        let names: Vec<&str> = index.lines().collect();
        let expected: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        if names != expected {
            return Err(CheckpointError::Malformed(
                "index does not match container".into(),
            ));
        }
    }
    Ok(store)
}
