//! Classic IDX binary arrays: a big-endian magic `0x0000_08NN` (unsigned
//! bytes, `NN` dimensions), `NN` big-endian `u32` sizes, then raw bytes.

use std::fs;
use std::io;
use std::path::Path;

use resq_core::data::Dataset;

use crate::error::{Error, Result};

const UNSIGNED_BYTE: u8 = 0x08;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        u32::from(UNSIGNED_BYTE) << 8 | self.dims.len() as u32
    }
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

/// Decodes an unsigned-byte IDX array. `path` only labels errors.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let magic = bytes.get(..4).ok_or_else(|| truncated(path, "header"))?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != UNSIGNED_BYTE || magic[3] == 0 {
        return Err(Error::format(
            path,
            format!(
                "bad IDX magic 0x{:08x}",
                u32::from_be_bytes([magic[0], magic[1], magic[2], magic[3]])
            ),
        ));
    }
    let ndims = usize::from(magic[3]);
    let header = 4 + 4 * ndims;
    let dim_bytes = bytes
        .get(4..header)
        .ok_or_else(|| truncated(path, "dimension list"))?;
    let dims: Vec<u32> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::format(path, "IDX dimensions overflow"))?;
    let payload = &bytes[header..];
    if payload.len() < len {
        return Err(truncated(path, "payload"));
    }
    if payload.len() > len {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after IDX payload", payload.len() - len),
        ));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len());
    out.extend_from_slice(&arr.magic().to_be_bytes());
    for d in &arr.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(arr)).map_err(|e| Error::io(path, e))
}

/// Builds a dataset from an image array (`[N,H,W]` or `[N,C,H,W]`) and a
/// label array (`[N]`). Without `num_classes` the class count is one more
/// than the largest label.
pub fn dataset_from_idx(
    images: &IdxArray,
    labels: &IdxArray,
    num_classes: Option<usize>,
    path: &Path,
) -> Result<Dataset> {
    let shape: [usize; 3] = match images.dims[..] {
        [_, h, w] => [1, h as usize, w as usize],
        [_, c, h, w] => [c as usize, h as usize, w as usize],
        _ => {
            return Err(Error::format(
                path,
                format!("images need 3 or 4 dimensions, found {}", images.dims.len()),
            ))
        }
    };
    if labels.dims.len() != 1 {
        return Err(Error::format(path, "labels must be one-dimensional"));
    }
    if labels.dims[0] != images.dims[0] {
        return Err(Error::format(
            path,
            format!("{} labels for {} images", labels.dims[0], images.dims[0]),
        ));
    }
    let labels: Vec<usize> = labels.data.iter().map(|&l| usize::from(l)).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Ok(Dataset::new(shape, images.data.clone(), labels, classes)?)
}

/// Loads images and labels, scaling pixels by 1/255.
pub fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let img = read_idx(images)?;
    if !matches!(img.dims.len(), 3 | 4) {
        return Err(Error::format(
            images,
            format!(
                "expected image magic 0x{IMAGE_MAGIC:08x} (or four dimensions), found 0x{:08x}",
                img.magic()
            ),
        ));
    }
    let lab = read_idx(labels)?;
    if lab.magic() != LABEL_MAGIC {
        return Err(Error::format(
            labels,
            format!(
                "expected label magic 0x{LABEL_MAGIC:08x}, found 0x{:08x}",
                lab.magic()
            ),
        ));
    }
    dataset_from_idx(&img, &lab, num_classes, labels)
}

/// IDX arrays for a dataset; single-channel images use three dimensions.
pub fn dataset_to_idx(ds: &Dataset) -> (IdxArray, IdxArray) {
    let [c, h, w] = ds.image_shape();
    let n = ds.len() as u32;
    let dims = if c == 1 {
        vec![n, h as u32, w as u32]
    } else {
        vec![n, c as u32, h as u32, w as u32]
    };
    (
        IdxArray {
            dims,
            data: ds.pixels().to_vec(),
        },
        IdxArray {
            dims: vec![n],
            data: ds.labels().iter().map(|&l| l as u8).collect(),
        },
    )
}

pub fn save_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    if ds.num_classes() > 256 {
        return Err(Error::format(
            labels,
            "labels above 255 do not fit IDX bytes",
        ));
    }
    let (img, lab) = dataset_to_idx(ds);
    write_idx(images, &img)?;
    write_idx(labels, &lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn decodes_single_image() {
        let bytes = [
            0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64,
        ];
        let arr = parse_idx(&bytes, p()).unwrap();
        let lab = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 3], p()).unwrap();
        assert_eq!(lab.data, [3]);
        let ds = dataset_from_idx(&arr, &lab, None, p()).unwrap();
        assert_eq!(ds.labels(), [3]);
        assert_eq!(ds.image(0).data(), [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(encode_idx(&arr), bytes);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let r = parse_idx(&[0, 0, 9, 1, 0, 0, 0, 1, 3], p());
        assert!(matches!(r, Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_is_io_error() {
        let r = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 5, 3], p());
        assert!(matches!(r, Err(Error::Io { .. })));
        assert!(matches!(parse_idx(&[0, 0], p()), Err(Error::Io { .. })));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let img = parse_idx(&[0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7], p()).unwrap();
        let lab = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 5], p()).unwrap();
        assert!(dataset_from_idx(&img, &lab, Some(3), p()).is_err());
    }
}
