//! IDX (MNIST-style) image and label files.

use std::path::Path;

use super::{Dataset, SampleId};
use crate::error::{Error, Result};

/// Magic number of an unsigned-byte, rank-3 IDX file.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic number of an unsigned-byte, rank-1 IDX file.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn header(bytes: &[u8], path: &Path, words: usize) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(format_err(path, "file shorter than its header"));
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Loads an image file and its label file. Pixels are scaled by `1/255` and
/// each image is flattened row-major.
pub fn load_idx_images(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images)?;
    let lbl_bytes = std::fs::read(labels)?;

    let h = header(&img_bytes, images, 4)?;
    if h[0] != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images,
            format!("magic {:#010x}, expected {IDX_IMAGES_MAGIC:#010x}", h[0]),
        ));
    }
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    if rows == 0 || cols == 0 {
        return Err(format_err(images, "zero image dimension"));
    }
    let pixels = n * rows * cols;
    if img_bytes.len() - 16 != pixels {
        return Err(format_err(
            images,
            format!(
                "{n} images of {rows}x{cols} need {pixels} bytes, found {}",
                img_bytes.len() - 16
            ),
        ));
    }

    let h = header(&lbl_bytes, labels, 2)?;
    if h[0] != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels,
            format!("magic {:#010x}, expected {IDX_LABELS_MAGIC:#010x}", h[0]),
        ));
    }
    if h[1] as usize != n {
        return Err(format_err(
            labels,
            format!("{} labels for {n} images", h[1]),
        ));
    }
    if lbl_bytes.len() - 8 != n {
        return Err(format_err(
            labels,
            format!("expected {n} label bytes, found {}", lbl_bytes.len() - 8),
        ));
    }
    if n == 0 {
        return Err(format_err(images, "no images"));
    }

    let features = img_bytes[16..]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels_vec: Vec<usize> = lbl_bytes[8..].iter().map(|&l| l as usize).collect();
    let num_classes = labels_vec.iter().max().map_or(2, |m| (m + 1).max(2));
    let ids = (0..n as u64).map(SampleId).collect();
    let name = images
        .file_stem()
        .map_or_else(|| "idx".to_owned(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, rows * cols, num_classes, ids, features, labels_vec)
}
