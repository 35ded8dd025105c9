//! Binary dataset container.
//!
//! Layout, all integers little-endian:
//!
//! | field            | type           |
//! |------------------|----------------|
//! | magic            | `b"RMLD"`      |
//! | version          | u32            |
//! | N                | u64            |
//! | d                | u64            |
//! | c                | u32            |
//! | flags            | u8 (bit 0: true labels present) |
//! | features         | N·d f64, row-major |
//! | observed labels  | N u8           |
//! | true labels      | N u8, if flagged |

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CONTAINER_MAGIC: &[u8; 4] = b"RMLD";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4 + 1;

pub fn write_container(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    if dataset.num_classes() > 256 {
        return Err(Error::invalid("container stores labels as bytes; at most 256 classes"));
    }
    let (n, d) = dataset.features().shape();
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * 8 + 2 * n);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.num_classes() as u32).to_le_bytes());
    out.push(u8::from(dataset.true_labels().is_some()));
    for v in dataset.features().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(dataset.observed_labels().iter().map(|&y| y as u8));
    if let Some(t) = dataset.true_labels() {
        out.extend(t.iter().map(|&y| y as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != CONTAINER_MAGIC {
        return Err(bad("not a dataset container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
    let has_true = bytes[28] & 1 == 1;
    let expected = HEADER_LEN + n * d * 8 + n * (1 + usize::from(has_true));
    if bytes.len() != expected {
        return Err(bad(format!("{} bytes, header implies {expected}", bytes.len())));
    }
    let feat_end = HEADER_LEN + n * d * 8;
    let data = bytes[HEADER_LEN..feat_end]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let observed = bytes[feat_end..feat_end + n].iter().map(|&b| usize::from(b)).collect();
    let true_labels = has_true.then(|| bytes[feat_end + n..].iter().map(|&b| usize::from(b)).collect());
    Dataset::new(Matrix::from_vec(n, d, data)?, true_labels, observed, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::numerics::RngStream;

    #[test]
    fn round_trip_with_and_without_true_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.bin");
        let ds = make_blobs(3, 5, 4, 2.0, &mut RngStream::new(1, 1)).unwrap();
        let noisy = ds
            .with_observed_labels((0..15).map(|i| (i + 1) % 3).collect())
            .unwrap();
        write_container(&p, &noisy).unwrap();
        assert_eq!(read_container(&p).unwrap(), noisy);

        let unlabeled = Dataset::new(ds.features().clone(), None, ds.observed_labels().to_vec(), 3).unwrap();
        write_container(&p, &unlabeled).unwrap();
        assert_eq!(read_container(&p).unwrap(), unlabeled);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        fs::write(&p, b"not a container at all, clearly").unwrap();
        assert!(matches!(read_container(&p), Err(Error::Format { .. })));
    }
}
