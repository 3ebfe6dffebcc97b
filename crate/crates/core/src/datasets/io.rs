//! On-disk formats: IDX image/label files (big-endian, bit-exact), binary
//! PGM export, and the line-oriented manifest pairing each image index with
//! its label and nuisance id.

use super::LabeledImageSet;
use crate::linalg::Tensor;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("bad magic at byte offset 0: got {got:#010x}, expected {want:#010x}")]
    BadMagic { got: u32, want: u32 },
    #[error("truncated file at byte offset {offset}: expected {expected} more bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn read_be_u32(data: &[u8], offset: usize) -> Result<u32, DataIoError> {
    if data.len() < offset + 4 {
        return Err(DataIoError::Truncated {
            offset,
            expected: 4,
            actual: data.len().saturating_sub(offset),
        });
    }
    Ok(u32::from_be_bytes([
        data[offset],
        data[offset + 1],
        data[offset + 2],
        data[offset + 3],
    ]))
}

/// Write images as IDX: magic, count, rows, cols (all big-endian u32), then
/// raw u8 pixels. Values are rounded and clamped to [0, 255].
pub fn write_idx_images(set: &LabeledImageSet, path: &Path) -> Result<(), DataIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(set.len() as u32).to_be_bytes())?;
    w.write_all(&(set.side as u32).to_be_bytes())?;
    w.write_all(&(set.side as u32).to_be_bytes())?;
    for &v in set.images.data() {
        w.write_all(&[v.round().clamp(0.0, 255.0) as u8])?;
    }
    Ok(())
}

pub fn write_idx_labels(set: &LabeledImageSet, path: &Path) -> Result<(), DataIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(set.len() as u32).to_be_bytes())?;
    for &label in &set.labels {
        w.write_all(&[label as u8])?;
    }
    Ok(())
}

/// Raw image payload: (pixels, count, rows, cols).
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize), DataIoError> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    let magic = read_be_u32(&data, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataIoError::BadMagic {
            got: magic,
            want: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_be_u32(&data, 4)? as usize;
    let rows = read_be_u32(&data, 8)? as usize;
    let cols = read_be_u32(&data, 12)? as usize;
    let expected = count * rows * cols;
    let payload = &data[16..];
    if payload.len() < expected {
        return Err(DataIoError::Truncated {
            offset: 16,
            expected,
            actual: payload.len(),
        });
    }
    Ok((payload[..expected].to_vec(), count, rows, cols))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataIoError> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    let magic = read_be_u32(&data, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataIoError::BadMagic {
            got: magic,
            want: IDX_LABELS_MAGIC,
        });
    }
    let count = read_be_u32(&data, 4)? as usize;
    let payload = &data[8..];
    if payload.len() < count {
        return Err(DataIoError::Truncated {
            offset: 8,
            expected: count,
            actual: payload.len(),
        });
    }
    Ok(payload[..count].to_vec())
}

/// Load a paired image/label file set; counts must agree. Nuisance ids are
/// not part of the IDX format and come back as zeros (see the manifest).
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet, DataIoError> {
    let (pixels, count, rows, cols) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(DataIoError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    assert_eq!(rows, cols, "square images expected");
    let images = Tensor::from_vec(
        count,
        rows * cols,
        pixels.iter().map(|&p| f64::from(p)).collect(),
    )
    .expect("length from header");
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(LabeledImageSet {
        images,
        side: rows,
        labels,
        nuisance_ids: vec![0; count],
        classes,
    })
}

/// Binary PGM (P5), maxval 255. Header is exactly `P5\n<w> <h>\n255\n`.
pub fn export_pgm(img: &Tensor, path: &Path) -> Result<(), DataIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.cols(), img.rows())?;
    for &v in img.data() {
        w.write_all(&[v.round().clamp(0.0, 255.0) as u8])?;
    }
    Ok(())
}

/// One line per sample: `<index> <label> <nuisance_id>`.
pub fn write_manifest(set: &LabeledImageSet, path: &Path) -> Result<(), DataIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..set.len() {
        writeln!(w, "{} {} {}", i, set.labels[i], set.nuisance_ids[i])?;
    }
    Ok(())
}

/// Parse a manifest back into (index, label, nuisance_id) triples.
pub fn read_manifest(path: &Path) -> Result<Vec<(usize, usize, usize)>, DataIoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(DataIoError::BadManifest {
                line: lineno + 1,
                reason: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|e| DataIoError::BadManifest {
                line: lineno + 1,
                reason: format!("bad integer '{s}': {e}"),
            })
        };
        out.push((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
    }
    Ok(out)
}
