//! Parameter file: the 8-byte magic `SPCLVQA1`, a text manifest of
//! `name f64 d0,d1,...` lines ended by a blank line, then every tensor's values as
//! little-endian `f64` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SPCLVQA1";

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("bad magic: not a model file")]
    BadMagic,
    #[error("version mismatch: file has format version {found:?}, expected {expected:?}")]
    VersionMismatch { found: char, expected: char },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("truncated file: expected {expected} bytes of values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("shape mismatch for {key}: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch { key: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter {0} is missing from the file")]
    MissingKey(String),
    #[error("parameter {0} in the file is not part of the model")]
    UnexpectedKey(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn write_params<W: Write>(params: &ParamStore, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "{name} f64 {}", dims.join(","))?;
    }
    writeln!(out)?;
    for (_, t) in params.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_params(params: &ParamStore, path: &Path) -> Result<(), ModelFileError> {
    let mut buf = Vec::new();
    write_params(params, &mut buf).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|source| ModelFileError::Io { path: path.display().to_string(), source })
}

/// Parses a parameter file without reference to a model.
pub fn read_params(bytes: &[u8]) -> Result<ParamStore, ModelFileError> {
    if bytes.len() < MAGIC.len() || bytes[..7] != MAGIC[..7] {
        return Err(ModelFileError::BadMagic);
    }
    if bytes[7] != MAGIC[7] {
        return Err(ModelFileError::VersionMismatch { found: bytes[7] as char, expected: MAGIC[7] as char });
    }
    let mut pos = MAGIC.len();
    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    let mut line_no = 0;
    loop {
        line_no += 1;
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or(ModelFileError::Manifest {
            line: line_no,
            reason: "manifest is not terminated by a blank line".into(),
        })?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| ModelFileError::Manifest { line: line_no, reason: "not UTF-8".into() })?;
        pos += end + 1;
        if line.is_empty() {
            break;
        }
        let bad = |reason: String| ModelFileError::Manifest { line: line_no, reason };
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected `name dtype shape`, got {line:?}")));
        }
        if fields[1] != "f64" {
            return Err(bad(format!("unsupported dtype {:?}", fields[1])));
        }
        let shape = fields[2]
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("invalid dimension {d:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        entries.push((fields[0].to_string(), shape));
    }
    let expected: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>() * 8).sum();
    let found = bytes.len() - pos;
    if found < expected {
        return Err(ModelFileError::Truncated { expected, found });
    }
    if found > expected {
        return Err(ModelFileError::TrailingBytes { extra: found - expected });
    }
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let data = bytes[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        pos += n * 8;
        store.insert(name, Tensor::new(shape, data).expect("length from shape"));
    }
    Ok(store)
}

/// Reads a parameter file and checks it against `template`, key by key.
pub fn load_params(path: &Path, template: &ParamStore) -> Result<ParamStore, ModelFileError> {
    let bytes = fs::read(path).map_err(|source| ModelFileError::Io { path: path.display().to_string(), source })?;
    let store = read_params(&bytes)?;
    for (name, t) in template.iter() {
        let found = store.get(name).map_err(|_| ModelFileError::MissingKey(name.to_string()))?;
        if found.shape() != t.shape() {
            return Err(ModelFileError::ShapeMismatch { key: name.to_string(), expected: t.shape().to_vec(), found: found.shape().to_vec() });
        }
    }
    if let Some(extra) = store.names().find(|n| !template.contains(n)) {
        return Err(ModelFileError::UnexpectedKey(extra.to_string()));
    }
    Ok(store)
}
