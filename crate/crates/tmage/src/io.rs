//! PNG images and masks, JSON documents and atomic file writes.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tmage_core::image::CHANNELS;
use tmage_core::tensor::Tensor;
use tmage_core::FundusImage;

use crate::error::{AppError, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| AppError::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| AppError::io(path, e))?;
    reader.decode().map_err(|source| AppError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn is_16bit(img: &DynamicImage) -> bool {
    img.color().bytes_per_pixel() / img.color().channel_count() > 1
}

/// Reads an 8- or 16-bit PNG as RGB in `[0, 1]` (grey is replicated, alpha
/// dropped).
pub fn read_image(path: &Path) -> Result<FundusImage> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = if is_16bit(&img) {
        img.to_rgb16().into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()
    };
    Ok(FundusImage::new(h, w, pixels)?)
}

/// Reads a single-channel mask as a `1 x H x W` tensor in `[0, 1]`.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = if is_16bit(&img) {
        img.to_luma16().into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect()
    } else {
        img.to_luma8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()
    };
    Ok(Tensor::from_vec(&[1, h, w], data))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_err(path: &Path, source: image::ImageError) -> AppError {
    AppError::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes an 8-bit RGB PNG, rounding to the nearest code value.
pub fn write_image(path: &Path, img: &FundusImage) -> Result<()> {
    let raw: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("pixel buffer matches the image size");
    ensure_parent(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| encode_err(path, e))
}

/// Writes the first plane of a `C x H x W` tensor as an 8-bit grey PNG.
pub fn write_mask(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = t.chw();
    let raw: Vec<u8> = t.data()[..h * w].iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("plane matches the mask size");
    ensure_parent(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| encode_err(path, e))
}

/// Planar `3 x H x W` tensor to an image, clipping to `[0, 1]`.
pub fn tensor_image(t: &Tensor<f32>) -> Result<FundusImage> {
    let (c, h, w) = t.chw();
    debug_assert_eq!(c, CHANNELS);
    let clipped: Vec<f32> = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(FundusImage::from_planar(h, w, &clipped)?)
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| AppError::io(dir, e))?.path();
        let png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// File name without its extension.
pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| AppError::json(path, e))?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| AppError::json(path, e))
}
