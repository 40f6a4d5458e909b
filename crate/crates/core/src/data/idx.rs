//! IDX files as distributed for MNIST and Fashion-MNIST.
//!
//! Layout: a big-endian magic word (`0x00000803` for `u8` image cubes,
//! `0x00000801` for `u8` label vectors), one big-endian `u32` per
//! dimension, then the raw bytes. The payload must be exactly the size the
//! header implies.

use std::fs;
use std::path::Path;

use crate::data::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::parse(
                offset as u64,
                format!("truncated header: missing {what} ({} bytes in file)", bytes.len()),
            )
        })
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_be_u32(bytes, 0, "magic number")?;
    if magic != want {
        return Err(Error::parse(0, format!("bad magic 0x{magic:08x}, expected 0x{want:08x}")));
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("truncated payload: header implies {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(Error::parse(
            (header + expected) as u64,
            format!("{} trailing bytes after the payload", actual - expected),
        ));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, "column count")? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::parse(4, "dimensions overflow"))?;
    check_payload(bytes, 16, expected)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_be_u32(bytes, 4, "label count")? as usize;
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a single-channel dataset with pixels scaled to `[0, 1]`.
/// The class count is `max(label) + 1`, at least 2.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<LabeledDataset> {
    if images.count != labels.len() {
        return Err(Error::parse(
            4,
            format!("label file holds {} records but image file holds {}", labels.len(), images.count),
        ));
    }
    let data = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let tensor = Tensor::from_vec(vec![images.count, 1, images.rows, images.cols], data)?;
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    LabeledDataset::new(tensor, labels.iter().map(|&l| l as usize).collect(), k)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    dataset_from_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 51, 102, 7, 9, 1, 2, 3, 4, 5, 255],
        };
        (encode_idx_images(&images), encode_idx_labels(&[3, 1]))
    }

    #[test]
    fn fixture_round_trip_exact() {
        let (img, lab) = fixture();
        let images = parse_idx_images(&img).unwrap();
        let labels = parse_idx_labels(&lab).unwrap();
        let ds = dataset_from_idx(&images, &labels).unwrap();
        assert_eq!(ds.image_shape(), [1, 2, 3]);
        assert_eq!(ds.labels, vec![3, 1]);
        assert_eq!(ds.num_classes, 4);
        assert_eq!(ds.images.data()[1], 1.0);
        assert_eq!(ds.images.data()[2], 0.2);
        assert_eq!(encode_idx_images(&images), img);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let (mut img, _) = fixture();
        img[3] = 0x01;
        match parse_idx_images(&img) {
            Err(Error::Parse { offset: 0, message }) => assert!(message.contains("magic")),
            other => panic!("unexpected {other:?}"),
        }
        let (img, _) = fixture();
        assert!(matches!(parse_idx_labels(&img), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn truncated_and_oversized_payloads() {
        let (img, lab) = fixture();
        assert!(matches!(
            parse_idx_images(&img[..img.len() - 1]),
            Err(Error::Parse { offset: 27, .. })
        ));
        let mut long = lab.clone();
        long.push(0);
        assert!(matches!(parse_idx_labels(&long), Err(Error::Parse { offset: 10, .. })));
        assert!(matches!(parse_idx_images(&img[..10]), Err(Error::Parse { offset: 8, .. })));
    }

    #[test]
    fn label_count_mismatch() {
        let (img, _) = fixture();
        let images = parse_idx_images(&img).unwrap();
        let labels = parse_idx_labels(&encode_idx_labels(&[1])).unwrap();
        assert!(matches!(dataset_from_idx(&images, &labels), Err(Error::Parse { offset: 4, .. })));
    }
}
