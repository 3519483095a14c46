//! Versioned binary container: a key-value manifest followed by named
//! tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"STMSCKPT"  u32 version
//! u64 manifest_len, manifest bytes ("key=value\n" lines, UTF-8)
//! u64 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STMSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(buf)
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_key_values(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.manifest.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.manifest.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.manifest
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing manifest key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for (k, v) in &self.manifest {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("manifest entry `{k}` is not a single key=value line")));
            }
        }
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let manifest = format_key_values(&self.manifest);
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic = read_bytes(r, 8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mlen = read_u64(r)? as usize;
        let text = String::from_utf8(read_bytes(r, mlen)?)
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let manifest = parse_key_values(&text)?;
        let count = read_u64(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?;
        Self::read_from(&mut BufReader::new(file))
    }
}
