//! On-disk layout shared by datasets, checkpoints and rollout records: a TOML
//! manifest next to flat little-endian `f32` arrays, one file per field.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32-le";

/// One flat array referenced from a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl ArrayEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let name = name.into();
        Self {
            file: format!("{name}.f32"),
            name,
            shape,
            dtype: DTYPE.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn write_f32s(path: &Path, data: impl IntoIterator<Item = f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in data {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f32s(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::format(
            path,
            format!("expected {} values, found {} bytes", expected_len, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `entry`'s data into `dir` after checking the length against its shape.
pub fn write_entry(dir: &Path, entry: &ArrayEntry, data: &[f64]) -> Result<()> {
    if data.len() != entry.len() {
        return Err(Error::Contract(format!(
            "{}: {} values for shape {:?}",
            entry.name,
            data.len(),
            entry.shape
        )));
    }
    write_f32s(&dir.join(&entry.file), data.iter().copied())
}

pub fn read_entry(dir: &Path, entry: &ArrayEntry) -> Result<Vec<f32>> {
    let path = dir.join(&entry.file);
    if entry.dtype != DTYPE {
        return Err(Error::format(&path, format!("unsupported dtype {}", entry.dtype)));
    }
    read_f32s(&path, entry.len())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn find_entry<'a>(
    entries: &'a [ArrayEntry],
    name: &str,
    manifest: &Path,
) -> Result<&'a ArrayEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::format(manifest, format!("missing array `{name}`")))
}
