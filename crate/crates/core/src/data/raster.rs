//! PNG encodings for images, disparity maps and class maps.
//!
//! Disparity is stored as 16-bit grayscale holding `round(d · 256)`; a stored
//! zero marks a pixel without ground truth.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DISPARITY_SCALE: f32 = 256.0;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads an RGB image as a `3×H×W` tensor with values in [0, 255].
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0f32; 3 * hw];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = p[c] as f32;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_rgb(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let [c, h, w] = dims3(t, path)?;
    if c != 3 {
        return Err(format_err(path, format!("expected 3 channels, got {c}")));
    }
    let hw = h * w;
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| d[c * hw + i].round().clamp(0.0, 255.0) as u8))
    });
    save(DynamicImage::ImageRgb8(img), path)
}

fn dims3(t: &Tensor<f32>, path: &Path) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format_err(path, format!("expected a C×H×W tensor, got {:?}", t.shape()))),
    }
}

/// Reads a disparity map as a `1×H×W` tensor plus its validity mask.
pub fn read_disparity(path: &Path) -> Result<(Tensor<f32>, Vec<bool>)> {
    let img = match open(path)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(format_err(
                path,
                format!("disparity must be 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let valid = raw.iter().map(|&v| v != 0).collect();
    let data = raw.iter().map(|&v| v as f32 / DISPARITY_SCALE).collect();
    Ok((Tensor::new(vec![1, h, w], data)?, valid))
}

/// Writes a disparity map; masked-out pixels are stored as invalid.
pub fn write_disparity(t: &Tensor<f32>, valid: &[bool], path: &Path) -> Result<()> {
    let [c, h, w] = dims3(t, path)?;
    if c != 1 || valid.len() != h * w {
        return Err(format_err(path, "disparity must be 1×H×W with a matching mask"));
    }
    let max = u16::MAX as f32 / DISPARITY_SCALE;
    let mut raw = Vec::with_capacity(h * w);
    for (&d, &m) in t.data().iter().zip(valid) {
        if !m {
            raw.push(0);
            continue;
        }
        if !(0.0..=max).contains(&d) {
            return Err(format_err(path, format!("disparity {d} not representable")));
        }
        // a valid zero would read back as invalid
        raw.push(((d * DISPARITY_SCALE).round() as u16).max(1));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("extents");
    save(DynamicImage::ImageLuma16(img), path)
}

/// Reads an 8-bit class map; returns `(height, width, ids)`.
pub fn read_classes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = match open(path)? {
        DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(format_err(
                path,
                format!("class map must be 8-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw()))
}

pub fn write_classes(ids: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, ids.to_vec())
        .ok_or_else(|| format_err(path, "class map length does not match extents"))?;
    save(DynamicImage::ImageLuma8(img), path)
}
