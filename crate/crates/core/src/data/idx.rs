//! Big-endian IDX files (MNIST layout).

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    /// `[count, rows·cols]`, pixels mapped by `p -> 2·(p/255) - 1`.
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub rows: usize,
    pub cols: usize,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Format { offset: bytes.len() as u64, msg: format!("truncated header: need byte {}", at + 4) })
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        msg: format!("truncated payload: expected {} bytes, file ends after {}", start + len, bytes.len()),
    })
}

/// Decodes an image file held in memory.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Tensor, usize, usize)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let px = payload(bytes, 16, n * rows * cols)?;
    let values = px.iter().map(|&p| 2.0 * (p as f64 / 255.0) - 1.0).collect();
    Ok((Tensor::new(vec![n, rows * cols], values)?, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.to_vec())
}

pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<IdxImages> {
    let (images, rows, cols) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(&std::fs::read(p)?)?;
            if l.len() != images.rows() {
                return Err(Error::Format {
                    offset: 4,
                    msg: format!("{} labels for {} images", l.len(), images.rows()),
                });
            }
            Some(l)
        }
        None => None,
    };
    Ok(IdxImages { images, labels, rows, cols })
}
