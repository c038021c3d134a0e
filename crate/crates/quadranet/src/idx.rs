//! IDX binary files: a big-endian `u32` magic (`0x0000_08RR`, `u8` payload of
//! rank `RR`), one big-endian `u32` per dimension, then the raw bytes.

use std::path::Path;

use quadranet_core::data::LabeledDataset;
use quadranet_core::Tensor;

use crate::error::{AppError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn fmt_err(what: &'static str, offset: usize, detail: String) -> AppError {
    AppError::Format { what, offset, detail }
}

fn read_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(fmt_err(
            what,
            bytes.len(),
            format!("truncated header: need {} bytes, file has {}", offset + 4, bytes.len()),
        )),
    }
}

/// Checks the magic and returns the dimensions and payload.
fn parse<'a>(bytes: &'a [u8], magic: u32, what: &'static str) -> Result<(Vec<usize>, &'a [u8])> {
    let got = read_u32(bytes, 0, what)?;
    if got != magic {
        return Err(fmt_err(what, 0, format!("bad magic 0x{got:08x}, expected 0x{magic:08x}")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i, what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let need = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
    let have = bytes.len() - start;
    if have < need {
        return Err(fmt_err(
            what,
            bytes.len(),
            format!("truncated payload: dimensions {dims:?} need {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(fmt_err(what, start + need, format!("{} trailing bytes after payload", have - need)));
    }
    Ok((dims, &bytes[start..]))
}

/// Images as `(N, 1, H, W)` scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, payload) = parse(bytes, IMAGES_MAGIC, "idx images")?;
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new([dims[0], 1, dims[1], dims[2]], data)?)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, "idx labels")?;
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Pairs images with labels. `num_classes` defaults to the largest label plus one.
pub fn dataset_from_bytes(images: &[u8], labels: &[u8], num_classes: Option<usize>) -> Result<LabeledDataset> {
    let x = parse_images(images)?;
    let y = parse_labels(labels)?;
    if x.shape()[0] != y.len() {
        return Err(AppError::Usage(format!(
            "image file holds {} images but label file holds {} labels",
            x.shape()[0],
            y.len()
        )));
    }
    let classes = num_classes.unwrap_or_else(|| y.iter().max().map_or(1, |m| m + 1));
    Ok(LabeledDataset::new(x, y, classes)?)
}

pub fn read_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let xi = std::fs::read(images).map_err(|e| AppError::io(images, e))?;
    let yl = std::fs::read(labels).map_err(|e| AppError::io(labels, e))?;
    dataset_from_bytes(&xi, &yl, num_classes)
}

fn header(magic: u32, dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| AppError::Usage(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    Ok(out)
}

/// Encodes single-channel images whose pixels are exact multiples of `1/255`.
pub fn encode_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = images.dims4()?;
    if c != 1 {
        return Err(AppError::Usage(format!("IDX images are single-channel, got C={c}")));
    }
    let mut out = header(IMAGES_MAGIC, &[n, h, w])?;
    for (i, &v) in images.data().iter().enumerate() {
        let q = (v * 255.0).round();
        if !(0.0..=255.0).contains(&q) || q / 255.0 != v {
            return Err(AppError::Usage(format!("pixel {i} = {v} is not representable as u8/255")));
        }
        out.push(q as u8);
    }
    Ok(out)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = header(LABELS_MAGIC, &[labels.len()])?;
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| AppError::Usage(format!("label {l} exceeds 255")))?);
    }
    Ok(out)
}

pub fn write_idx(data: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    std::fs::write(images, encode_images(&data.inputs)?).map_err(|e| AppError::io(images, e))?;
    std::fs::write(labels, encode_labels(&data.labels)?).map_err(|e| AppError::io(labels, e))?;
    Ok(())
}
