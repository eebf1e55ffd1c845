//! Binary matrix (`FSKE`) and label (`FSKL`) files.
//!
//! Both formats are little-endian:
//!
//! ```text
//! FSKE: "FSKE" | u32 version=1 | u64 rows | u64 cols        | rows·cols × f32 (row-major)
//! FSKL: "FSKL" | u32 version=1 | u64 rows | u32 num_classes | rows × u16
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, EmbeddingSource, EmbeddingStore, Split};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"FSKE";
pub const LABELS_MAGIC: &[u8; 4] = b"FSKL";
pub const FORMAT_VERSION: u32 = 1;

/// Raw contents of an `FSKE` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl RawMatrix {
    pub fn from_matrix(m: &Matrix) -> Self {
        RawMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated on decode")
    }
}

/// Contents of an `FSKL` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFile {
    pub num_classes: usize,
    pub labels: Vec<usize>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "truncated file: wanted {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        let got = self.take(4)?;
        if got != magic {
            return Err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                std::str::from_utf8(magic).unwrap()
            ));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            ));
        }
        Ok(())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            ));
        }
        Ok(())
    }
}

pub fn encode_matrix(m: &RawMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * m.data.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> std::result::Result<RawMatrix, String> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(MATRIX_MAGIC)?;
    let rows = usize::try_from(r.u64()?).map_err(|e| e.to_string())?;
    let cols = usize::try_from(r.u64()?).map_err(|e| e.to_string())?;
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or("matrix dimensions overflow")?;
    let payload = r.take(count * 4)?;
    r.finish()?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(format!(
            "non-finite entry at row {}, column {}",
            pos / cols.max(1),
            pos % cols.max(1)
        ));
    }
    Ok(RawMatrix { rows, cols, data })
}

pub fn encode_labels(l: &LabelFile) -> Result<Vec<u8>> {
    if l.num_classes > usize::from(u16::MAX) + 1 {
        return Err(Error::config("too many classes for u16 labels"));
    }
    let mut out = Vec::with_capacity(20 + 2 * l.labels.len());
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(l.labels.len() as u64).to_le_bytes());
    out.extend_from_slice(&(l.num_classes as u32).to_le_bytes());
    for &y in &l.labels {
        if y >= l.num_classes {
            return Err(Error::config(format!(
                "label {y} out of range for {} classes",
                l.num_classes
            )));
        }
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> std::result::Result<LabelFile, String> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(LABELS_MAGIC)?;
    let rows = usize::try_from(r.u64()?).map_err(|e| e.to_string())?;
    let num_classes = r.u32()? as usize;
    if rows.checked_mul(2).map_or(true, |n| n > bytes.len()) {
        return Err(format!("truncated file: header announces {rows} labels"));
    }
    let labels = (0..rows)
        .map(|_| r.u16().map(usize::from))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    r.finish()?;
    if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(format!("label {bad} out of range for {num_classes} classes"));
    }
    Ok(LabelFile {
        num_classes,
        labels,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, message: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message,
    }
}

pub fn read_raw_matrix(path: impl AsRef<Path>) -> Result<RawMatrix> {
    let path = path.as_ref();
    decode_matrix(&read(path)?).map_err(|m| format_err(path, m))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    Ok(read_raw_matrix(path)?.to_matrix())
}

/// Writes `m` as `FSKE`, rounding entries to `f32`.
pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_raw_matrix(path, &RawMatrix::from_matrix(m))
}

pub fn write_raw_matrix(path: impl AsRef<Path>, m: &RawMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelFile> {
    let path = path.as_ref();
    decode_labels(&read(path)?).map_err(|m| format_err(path, m))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize], num_classes: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_labels(&LabelFile {
        num_classes,
        labels: labels.to_vec(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads an `FSKE` file as frozen SSL embeddings (rows normalized).
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    EmbeddingStore::from_raw(read_matrix(path)?, EmbeddingSource::File)
}

/// Loads features plus clean labels, and optionally a second label file
/// holding externally corrupted labels.
pub fn load_dataset(
    features_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    noisy_labels_path: Option<&Path>,
    split: Split,
) -> Result<Dataset> {
    let features = read_matrix(features_path)?;
    let clean = read_labels(labels_path)?;
    let dataset = Dataset::new(features, clean.labels, clean.num_classes, split)?;
    match noisy_labels_path {
        Some(p) => {
            let noisy = read_labels(p)?;
            if noisy.num_classes != clean.num_classes {
                return Err(format_err(
                    p,
                    format!(
                        "{} classes, clean labels have {}",
                        noisy.num_classes, clean.num_classes
                    ),
                ));
            }
            dataset.with_noisy_labels(noisy.labels)
        }
        None => Ok(dataset),
    }
}
