//! Image loading and saving.
//!
//! PNGs (8-bit gray or RGB) are scaled to `[0, 1]`. The raw container
//! (`.mcrf`) stores `f32` pixels losslessly: magic `MCRF`, a little-endian
//! `u32` version (1), `u32` height, width and channels, then `h * w * c`
//! little-endian `f32` values in `(row, col, channel)` order.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};
use ndarray::Array3;

use crate::error::{McrError, Result};

const RAW_MAGIC: &[u8; 4] = b"MCRF";
const RAW_VERSION: u32 = 1;

pub type Image = Array3<f32>;

pub fn load_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mcrf") => load_raw(path),
        _ => load_png(path),
    }
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mcrf") => save_raw(path, img),
        _ => save_png(path, img),
    }
}

fn image_err(path: &Path, reason: impl ToString) -> McrError {
    McrError::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn load_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| McrError::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Ok(Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
            g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        })),
        DynamicImage::ImageRgb8(rgb) => Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })),
        other => Err(image_err(
            path,
            format!("unsupported pixel format {:?}", other.color()),
        )),
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.dim();
    let res = match c {
        1 => {
            let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([to_u8(img[[y as usize, x as usize, 0]])])
            });
            buf.save(path)
        }
        3 => {
            let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let p = |ch| to_u8(img[[y as usize, x as usize, ch]]);
                image::Rgb([p(0), p(1), p(2)])
            });
            buf.save(path)
        }
        _ => return Err(image_err(path, format!("PNG needs 1 or 3 channels, got {c}"))),
    };
    res.map_err(|e| image_err(path, e))
}

fn save_raw(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.dim();
    let mut bytes = Vec::with_capacity(20 + img.len() * 4);
    bytes.extend_from_slice(RAW_MAGIC);
    for v in [RAW_VERSION, h as u32, w as u32, c as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in img.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| McrError::io(path, e))
}

fn load_raw(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| McrError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != RAW_MAGIC {
        return Err(image_err(path, "not an MCRF container"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != RAW_VERSION {
        return Err(image_err(path, format!("unsupported version {}", word(0))));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let data = &bytes[20..];
    if data.len() != h * w * c * 4 {
        return Err(image_err(path, "payload length does not match header"));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((h, w, c), values).map_err(|e| image_err(path, e))
}
