//! IDX (MNIST) file parsing.

use std::path::Path;

use xbprune_core::{Dataset, Shape3};

use crate::error::{CliError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// A parsed image file: `count x rows x cols` unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CliError::Idx {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail: format!("header truncated: need {} bytes, file has {}", offset + 4, bytes.len()),
        })
}

fn check_len(bytes: &[u8], header: usize, payload: usize, path: &Path) -> Result<()> {
    let expected = header + payload;
    if bytes.len() != expected {
        return Err(CliError::Idx {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            detail: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(CliError::Idx {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    check_len(bytes, 16, count * rows * cols, path)?;
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..].to_vec() })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(CliError::Idx {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    check_len(bytes, 8, count, path)?;
    Ok(bytes[8..].to_vec())
}

pub fn load_images(path: &Path) -> Result<IdxImages> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_images(&bytes, path)
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_labels(&bytes, path)
}

/// Loads a paired image/label file set, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = load_images(images)?;
    let lab = load_labels(labels)?;
    if img.count != lab.len() {
        return Err(CliError::Idx {
            path: labels.to_path_buf(),
            offset: 4,
            detail: format!("{} labels for {} images", lab.len(), img.count),
        });
    }
    let pixels = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Dataset::new(Shape3::new(1, img.rows, img.cols), pixels, lab)?)
}

/// Encodes images in IDX format (used for fixtures and exports).
pub fn encode_images(img: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len());
    for v in [IMAGES_MAGIC, img.count as u32, img.rows as u32, img.cols as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend(&img.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

/// Standard MNIST file names inside `dir`, for `train` or `t10k`.
pub fn mnist_paths(dir: &Path, split: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{split}-images-idx3-ubyte")),
        dir.join(format!("{split}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: &str) -> Result<Dataset> {
    let (i, l) = mnist_paths(dir, split);
    load_idx(&i, &l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> IdxImages {
        IdxImages { count: 1, rows: 2, cols: 3, pixels: vec![0, 51, 102, 153, 204, 255] }
    }

    #[test]
    fn single_image_round_trips_exactly() {
        let bytes = encode_images(&fixture());
        let parsed = parse_images(&bytes, Path::new("x")).unwrap();
        assert_eq!(parsed, fixture());
    }

    #[test]
    fn truncated_file_names_expected_and_actual_length() {
        let bytes = encode_images(&fixture());
        let err = parse_images(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 22 bytes, found 21"), "{msg}");
        assert!(matches!(err, CliError::Idx { offset: 21, .. }));
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let mut bytes = encode_labels(&[1, 2]);
        bytes[3] = 0x03;
        assert!(matches!(parse_labels(&bytes, Path::new("x")), Err(CliError::Idx { offset: 0, .. })));
        assert!(parse_images(&encode_labels(&[1]), Path::new("x")).is_err());
    }

    #[test]
    fn count_mismatch_between_images_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&i, encode_images(&fixture())).unwrap();
        std::fs::write(&l, encode_labels(&[1, 2])).unwrap();
        assert!(load_idx(&i, &l).is_err());
        std::fs::write(&l, encode_labels(&[7])).unwrap();
        let d = load_idx(&i, &l).unwrap();
        assert_eq!(d.labels, vec![7]);
        assert_eq!(d.images, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    }
}
