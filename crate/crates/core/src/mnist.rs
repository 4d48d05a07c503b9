//! MNIST in the IDX container: big-endian magic and sizes, then unsigned
//! bytes. Pixels are scaled by 1/255 and images flattened row-major.

use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<DVector<f64>>,
    pub labels: Vec<u8>,
    /// Pixels per image (`rows * cols`).
    pub image_len: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let s = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        what: format!("{what} header"),
        expected: at + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(s.try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{what}: magic {magic:#010x}, expected {expected:#010x}"
        )));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let body = &bytes[header..];
    if body.len() < len {
        return Err(Error::Truncated {
            what: format!("{what} payload"),
            expected: len,
            actual: body.len(),
        });
    }
    Ok(&body[..len])
}

/// Parses an IDX image file; returns the images and the pixel count.
pub fn parse_images(bytes: &[u8]) -> Result<(Vec<DVector<f64>>, usize)> {
    check_magic(bytes, IMAGES_MAGIC, "images")?;
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let len = rows * cols;
    let data = payload(bytes, 16, count * len, "images")?;
    let images = data
        .chunks_exact(len.max(1))
        .take(count)
        .map(|px| DVector::from_iterator(len, px.iter().map(|&p| p as f64 / 255.0)))
        .collect();
    Ok((images, len))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, "labels")?;
    let count = be_u32(bytes, 4, "labels")? as usize;
    let data = payload(bytes, 8, count, "labels")?;
    if let Some(bad) = data.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("label {bad} outside 0..9")));
    }
    Ok(data.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (images, image_len) = parse_images(&read(images.as_ref())?)?;
    let labels = parse_labels(&read(labels.as_ref())?)?;
    if images.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "image and label counts".into(),
            expected: images.len(),
            actual: labels.len(),
        });
    }
    Ok(Dataset {
        images,
        labels,
        image_len,
    })
}

/// Finds the image and label files in `dir`, preferring the test split
/// (`t10k-*`) when both splits are present.
pub fn find_idx_files(dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let pick = |part: &str| -> Result<PathBuf> {
        let matches: Vec<&PathBuf> = names
            .iter()
            .filter(|p| {
                let n = p.file_name().unwrap().to_string_lossy();
                n.contains(part) && !n.ends_with(".gz")
            })
            .collect();
        matches
            .iter()
            .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("t10k"))
            .or(matches.first())
            .map(|p| (*p).clone())
            .ok_or_else(|| Error::Format(format!("{}: no uncompressed IDX {part} file", dir.display())))
    };
    Ok((pick("images")?, pick("labels")?))
}

/// Loads the dataset in `dir` (see [`find_idx_files`]).
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Dataset> {
    let (images, labels) = find_idx_files(dir)?;
    load_idx(images, labels)
}

/// Encodes images (values in [0, 1]) and labels as IDX files.
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut im = Vec::new();
    im.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        im.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for img in images {
        im.extend_from_slice(img);
    }
    let mut lb = Vec::new();
    lb.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    (im, lb)
}
