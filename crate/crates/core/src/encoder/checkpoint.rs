//! Binary checkpoint: a text header followed by raw little-endian `f64`s.
//!
//! ```text
//! MINF1\n
//! config <byte length>\n
//! <canonical key = value lines, keys sorted>
//! manifest <tensor count>\n
//! <name> <d0>x<d1>... <element count>\n     (one line per tensor)
//! data\n
//! <f64 LE values, tensors in manifest order>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MINF1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes `config` and `params` into `out`.
pub fn write_checkpoint<T: Real, W: Write>(
    out: &mut W,
    config: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<()> {
    params.check(config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(b'\n');
    let cfg = config.to_kv().to_string();
    buf.extend_from_slice(format!("config {}\n", cfg.len()).as_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let tensors = params.named_tensors();
    buf.extend_from_slice(format!("manifest {}\n", tensors.len()).as_bytes());
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        buf.extend_from_slice(format!("{name} {} {}\n", dims.join("x"), t.len()).as_bytes());
    }
    buf.extend_from_slice(b"data\n");
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| bad(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(bad("truncated data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn tagged(line: &str, tag: &str) -> Result<usize> {
    line.strip_prefix(tag)
        .and_then(|r| r.strip_prefix(' '))
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| bad(format!("expected '{tag} <n>', found '{line}'")))
}

/// Parses a checkpoint. The parameter structure is rebuilt from the stored
/// config and every manifest line must match it.
pub fn read_checkpoint<T: Real, R: Read>(input: &mut R) -> Result<(ModelConfig, ModelParams<T>)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| bad(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.line()?.as_bytes() != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let cfg_len = tagged(cur.line()?, "config")?;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len)?).map_err(|_| bad("config is not UTF-8"))?;
    let kv = KeyValues::parse(cfg_text)?;
    let config = ModelConfig::from_kv(&kv, ModelConfig::mnist())?;
    let mut params = ModelParams::<T>::init(&config)?;

    let count = tagged(cur.line()?, "manifest")?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if count != expected.len() {
        return Err(bad(format!("manifest lists {count} tensors, config implies {}", expected.len())));
    }
    for (name, shape) in &expected {
        let line = cur.line()?;
        let mut parts = line.split(' ');
        let (n, dims, len) = (parts.next(), parts.next(), parts.next());
        let dims: Option<Vec<usize>> = dims.map(|d| d.split('x').filter_map(|v| v.parse().ok()).collect());
        let len: Option<usize> = len.and_then(|l| l.parse().ok());
        if n != Some(name.as_str()) || dims.as_ref() != Some(shape) || len != Some(shape.iter().product()) {
            return Err(bad(format!("manifest line '{line}' does not match expected {name} {shape:?}")));
        }
    }
    if cur.line()? != "data" {
        return Err(bad("missing data marker"));
    }
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            let raw: [u8; 8] = cur.take(8)?.try_into().expect("8 bytes");
            *v = T::lit(f64::from_le_bytes(raw));
        }
    }
    if cur.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok((config, params))
}

pub fn save_checkpoint<T: Real>(path: &Path, config: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, params)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}
