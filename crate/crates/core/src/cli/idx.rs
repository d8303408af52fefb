//! IDX files (the MNIST distribution format): big-endian magic, dimension sizes, then bytes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::nn::Dataset;
use crate::quant::RealTensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: magic {found:#010x}, expected {expected:#010x}")]
    Magic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated at byte {at}, needed {needed} bytes")]
    Truncated { path: PathBuf, at: usize, needed: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], IdxError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(IdxError::Truncated { path: self.path.to_path_buf(), at: self.bytes.len(), needed: self.pos + n });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IdxError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn parse(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>), IdxError> {
    let mut r = Reader { path, bytes, pos: 0 };
    let found = r.u32()?;
    if found != magic {
        return Err(IdxError::Magic { path: path.to_path_buf(), expected: magic, found });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let data = r.take(dims.iter().product())?.to_vec();
    Ok((dims, data))
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io { path: path.to_path_buf(), source })
}

/// Images as `[n, rows, cols]` scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<RealTensor, IdxError> {
    let (dims, data) = parse(path, &read(path)?, IMAGES_MAGIC)?;
    let values = data.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(RealTensor::new(dims, values).expect("dims match payload"))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    Ok(parse(path, &read(path)?, LABELS_MAGIC)?.1)
}

/// Images and labels, with counts cross-checked.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(RealTensor, Vec<u8>), IdxError> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if x.shape()[0] != y.len() {
        return Err(IdxError::CountMismatch { images: x.shape()[0], labels: y.len() });
    }
    Ok((x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads one MNIST split from the standard file names in `dir`, as `[1, 28, 28]` samples.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset, IdxError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let (x, y) = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    let shape = vec![1, x.shape()[1], x.shape()[2]];
    Ok(Dataset::new(x.into_values(), y, shape).expect("counts checked"))
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len() % (rows * cols), 0, "pixel count is a multiple of the image size");
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [pixels.len() / (rows * cols), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
