//! IDX (MNIST-style) image and label files.
//!
//! Layout: big-endian `u32` magic (`0x00000803` images, `0x00000801`
//! labels), big-endian `u32` dimensions, then unsigned bytes.

use alloc::format;
use alloc::vec::Vec;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated IDX header at byte {at}")))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::Format(format!(
            "bad IDX magic {magic:#010x}, expected {want:#010x}"
        )));
    }
    Ok(())
}

/// Decoded image file: `count` images of `rows x cols` bytes each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated IDX image payload: {} of {need} bytes",
            payload.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..need].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "truncated IDX label payload: {} of {count} bytes",
            payload.len()
        )));
    }
    Ok(payload[..count].to_vec())
}

/// Labelled `[1, rows, cols]` samples with pixels scaled to `[0, 1]`. Sample
/// ids are `{prefix}{index}`.
pub fn load_idx(images: &[u8], labels: &[u8], prefix: &str) -> Result<Vec<Sample>> {
    let img = parse_images(images)?;
    let lab = parse_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::Format(format!(
            "IDX image count {} does not match label count {}",
            img.count,
            lab.len()
        )));
    }
    let per = img.rows * img.cols;
    img.pixels
        .chunks_exact(per.max(1))
        .take(img.count)
        .zip(lab)
        .enumerate()
        .map(|(i, (px, label))| {
            let data = px.iter().map(|p| f64::from(*p) / 255.0).collect();
            Ok(Sample {
                id: format!("{prefix}{i}"),
                image: Tensor::new(&[1, img.rows, img.cols], data)?,
                label: usize::from(label),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn images_fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 204]);
        b
    }

    fn labels_fixture() -> Vec<u8> {
        vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3]
    }

    #[test]
    fn two_hand_encoded_images() {
        let s = load_idx(&images_fixture(), &labels_fixture(), "mnist_").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].image.shape(), &[1, 2, 2]);
        assert_eq!(s[0].image.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(s[1].image.data(), &[1.0, 0.0, 0.0, 0.8]);
        assert_eq!((s[0].label, s[1].label), (7, 3));
        assert_eq!(s[1].id, "mnist_1");
    }

    #[test]
    fn count_mismatch() {
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 3, 7, 3, 1];
        assert!(matches!(
            load_idx(&images_fixture(), &labels, ""),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn empty_and_bad_magic() {
        assert!(matches!(parse_images(&[]), Err(Error::Format(_))));
        assert!(matches!(parse_labels(&[]), Err(Error::Format(_))));
        assert!(parse_images(&labels_fixture()).is_err());
    }

    #[test]
    fn truncated_payload() {
        let mut b = images_fixture();
        b.pop();
        assert!(matches!(parse_images(&b), Err(Error::Format(_))));
    }
}
