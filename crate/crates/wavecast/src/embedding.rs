//! Embedding table files: a little-endian `u64` row count and `u64` width,
//! then row-major `f64` values, with one vocabulary word per line in a
//! sidecar `<path>.vocab`.

use std::fs;
use std::path::{Path, PathBuf};

use wavecast_core::substrate::Tensor;
use wavecast_core::t2t::EmbeddingTable;

use crate::error::{AppError, AppResult};

pub fn vocab_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

pub fn write_table(path: &Path, table: &EmbeddingTable) -> AppResult<()> {
    let mut bytes = Vec::with_capacity(16 + table.vectors.len() * 8);
    bytes.extend_from_slice(&(table.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(table.dim() as u64).to_le_bytes());
    for v in table.vectors.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))?;
    let vp = vocab_path(path);
    let mut words = table.words.join("\n");
    words.push('\n');
    fs::write(&vp, words).map_err(|e| AppError::io(vp, e))
}

pub fn read_table(path: &Path) -> AppResult<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let bad = |m: String| AppError::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("truncated header".into()));
    }
    let w = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let expected = w.checked_mul(d).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(bad(format!("{} bytes do not hold a {w} × {d} table", bytes.len())));
    }
    let data = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let vp = vocab_path(path);
    let text = fs::read_to_string(&vp).map_err(|e| AppError::io(&vp, e))?;
    let words: Vec<String> = text.lines().map(str::to_string).collect();
    if words.len() != w {
        return Err(bad(format!("{} vocabulary lines for {w} rows", words.len())));
    }
    Ok(EmbeddingTable::new(Tensor::new([w, d], data)?, words)?)
}
