//! IDX files: big-endian magic, big-endian u32 dimensions, u8 payload.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(format_err(path, "file too short to hold a magic number"));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let found = word(0);
    if found != magic {
        return Err(format_err(
            path,
            format!("wrong magic number 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    if bytes.len() < 4 * (1 + dims) {
        return Err(format_err(path, "file shorter than its header"));
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dims = read_header(path, &bytes, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let payload = &bytes[16..];
    if payload.len() != count * rows * cols {
        return Err(format_err(
            path,
            format!(
                "payload has {} bytes, header declares {count}x{rows}x{cols}",
                payload.len()
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let count = read_header(path, &bytes, LABELS_MAGIC, 1)?[0];
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(format_err(
            path,
            format!("payload has {} bytes, header declares {count}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Loads an image/label IDX pair. Pixels are scaled to `[0, 1]` and each
/// image flattened row-major; the class count is `max(label) + 1`.
pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_idx_images(images_path.as_ref())?;
    let labels = read_idx_labels(labels_path.as_ref())?;
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} declares {} images but {} declares {} labels",
            images_path.as_ref().display(),
            images.count,
            labels_path.as_ref().display(),
            labels.len()
        )));
    }
    let dim = images.rows * images.cols;
    let features = Matrix::from_vec(
        images.count,
        dim,
        images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(features, None, labels, num_classes)
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    let path = path.as_ref();
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::invalid("pixel buffer does not match declared dimensions"));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_white_image_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx_images(
            &ip,
            &IdxImages {
                count: 1,
                rows: 28,
                cols: 28,
                pixels: vec![255; 784],
            },
        )
        .unwrap();
        write_idx_labels(&lp, &[3]).unwrap();
        let ds = read_idx(&ip, &lp).unwrap();
        assert_eq!(ds.dim(), 784);
        assert!(ds.features().row(0).iter().all(|&v| v == 1.0));
        assert_eq!(ds.observed_labels(), &[3]);
        assert!(ds.true_labels().is_none());
    }

    #[test]
    fn header_is_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        write_idx_images(
            &ip,
            &IdxImages {
                count: 2,
                rows: 1,
                cols: 3,
                pixels: vec![0, 1, 2, 3, 4, 5],
            },
        )
        .unwrap();
        let raw = fs::read(&ip).unwrap();
        assert_eq!(&raw[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 3]);
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx_images(
            &ip,
            &IdxImages {
                count: 10,
                rows: 2,
                cols: 2,
                pixels: vec![7; 40],
            },
        )
        .unwrap();
        write_idx_labels(&lp, &[0; 9]).unwrap();
        assert!(matches!(read_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn wrong_magic_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx_labels(&ip, &[0; 4]).unwrap();
        write_idx_labels(&lp, &[0; 4]).unwrap();
        match read_idx(&ip, &lp) {
            Err(Error::Format { path, message }) => {
                assert_eq!(path, ip);
                assert!(message.contains("magic"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("lbl");
        let mut raw = LABELS_MAGIC.to_be_bytes().to_vec();
        raw.extend_from_slice(&5u32.to_be_bytes());
        raw.extend_from_slice(&[1, 2]);
        fs::write(&lp, raw).unwrap();
        assert!(matches!(read_idx_labels(&lp), Err(Error::Format { .. })));
    }
}
