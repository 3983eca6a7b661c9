//! IDX file reader (the MNIST distribution format).
//!
//! Layout: 4-byte big-endian magic, one big-endian `u32` per dimension, then
//! the unsigned-byte payload in row-major order.

use std::path::Path;
use std::sync::Arc;

use super::{Dataset, Result, TrainingError};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Number of classes in the digit datasets the reader targets.
pub const IDX_CLASSES: usize = 10;

fn read_u32(bytes: &[u8], offset: usize, file: &'static str) -> Result<u32> {
    let chunk = bytes
        .get(offset..offset + 4)
        .ok_or(TrainingError::Truncated {
            file,
            expected: offset + 4,
            actual: bytes.len(),
        })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, file: &'static str) -> Result<()> {
    let found = read_u32(bytes, 0, file)?;
    if found != expected {
        return Err(TrainingError::BadMagic {
            file,
            offset: 0,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, file: &'static str) -> Result<()> {
    if bytes.len() != expected {
        return Err(TrainingError::Truncated {
            file,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Parses in-memory IDX image and label files into a dataset with pixels
/// scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    check_magic(images, IMAGES_MAGIC, "images")?;
    let count = read_u32(images, 4, "images")? as usize;
    let rows = read_u32(images, 8, "images")? as usize;
    let cols = read_u32(images, 12, "images")? as usize;
    let feature_dim = rows * cols;
    check_len(images, 16 + count * feature_dim, "images")?;

    check_magic(labels, LABELS_MAGIC, "labels")?;
    let label_count = read_u32(labels, 4, "labels")? as usize;
    check_len(labels, 8 + label_count, "labels")?;
    if label_count != count {
        return Err(TrainingError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let label_bytes = &labels[8..];
    if let Some(index) = label_bytes.iter().position(|&l| l as usize >= IDX_CLASSES) {
        return Err(TrainingError::LabelOutOfRange {
            offset: 8 + index,
            label: label_bytes[index],
            classes: IDX_CLASSES,
        });
    }

    let features = images[16..].iter().map(|&p| f32::from(p) / 255.0).collect();
    Dataset::new(
        Arc::new(features),
        feature_dim,
        label_bytes.to_vec(),
        IDX_CLASSES,
    )
}

/// Reads an image file and its label file from disk.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| TrainingError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    let images = read(images.as_ref())?;
    let labels = read(labels.as_ref())?;
    parse_idx(&images, &labels)
}

#[cfg(test)]
pub(crate) fn encode_idx(
    pixels: &[u8],
    count: usize,
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let mut img = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = LABELS_MAGIC.to_be_bytes().to_vec();
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    (img, lbl)
}
