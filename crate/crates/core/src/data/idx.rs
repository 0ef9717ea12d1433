//! IDX image and label files, optionally gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

use super::LabelledExample;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, needs {expected} bytes but has {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let need = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: need,
            found: bytes.len(),
        });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: need,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..dims)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize)
        .collect();
    let total = need + dims.iter().product::<usize>();
    if bytes.len() < total {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: total,
            found: bytes.len(),
        });
    }
    Ok(dims)
}

/// `(count, rows, cols, pixels)` from an image file's bytes.
pub fn parse_idx_images(
    bytes: &[u8],
    path: &Path,
) -> Result<(usize, usize, usize, Vec<u8>), IdxError> {
    let d = header(bytes, path, IMAGE_MAGIC, 3)?;
    let n = d.iter().product::<usize>();
    Ok((d[0], d[1], d[2], bytes[16..16 + n].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, IdxError> {
    let d = header(bytes, path, LABEL_MAGIC, 1)?;
    Ok(bytes[8..8 + d[0]].to_vec())
}

/// Reads an image/label file pair. Pixels are scaled to `[0, 1]`; ids are
/// assigned consecutively from `first_id`.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    first_id: u64,
) -> Result<Vec<LabelledExample>, IdxError> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let plane = rows * cols;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let data = pixels[i * plane..(i + 1) * plane]
                .iter()
                .map(|&p| p as f64 / 255.0)
                .collect();
            LabelledExample {
                id: first_id + i as u64,
                label: label as usize,
                image: Tensor::new(vec![1, rows, cols], data).expect("finite pixels"),
            }
        })
        .collect())
}

pub fn write_idx_images(
    path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> std::io::Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut f = fs::File::create(path)?;
    f.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    for d in [n, rows, cols] {
        f.write_all(&(d as u32).to_be_bytes())?;
    }
    f.write_all(pixels)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&LABEL_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)
}
