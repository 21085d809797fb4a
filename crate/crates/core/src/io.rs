//! PNG frames and frame directories.
//!
//! A sequence is a directory of PNG files whose stems are frame numbers
//! (`0001.png`, `0002.png`, ...). Samples are quantized to 8 bits on write.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::color::{rgb_to_gray, ColorSpace, Image};
use crate::error::{Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::new(
        h as usize,
        w as usize,
        ColorSpace::Rgb,
        img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
    )
}

/// Reads a PNG as gray; color files are converted with BT.601 luma.
pub fn read_gray(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|e| image_err(path, e))?;
    if dynamic.color().has_color() {
        return rgb_to_gray(&read_rgb(path)?);
    }
    let img = dynamic.to_luma8();
    let (w, h) = img.dimensions();
    Image::new(
        h as usize,
        w as usize,
        ColorSpace::Gray,
        img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
    )
}

/// Writes an RGB or gray image as an 8-bit PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let saved = match img.space() {
        ColorSpace::Rgb => RgbImage::from_raw(w, h, raw).map(|i| i.save(path)),
        ColorSpace::Gray => GrayImage::from_raw(w, h, raw).map(|i| i.save(path)),
        other => {
            return Err(crate::error::contract_err!(
                "cannot store a {other:?} image as PNG"
            ))
        }
    };
    saved.expect("buffer size matches dims").map_err(|e| image_err(path, e))
}

/// Rounds samples to the 8-bit grid a PNG round trip would produce.
pub fn quantized(img: &Image) -> Image {
    let data = img.data().iter().map(|&v| quantize(v) as f32 / 255.0).collect();
    Image::new(img.height(), img.width(), img.space(), data).expect("same dims")
}

pub fn frame_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// PNG files of `dir` whose stem is a number, sorted by that number.
pub fn list_frames(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        if let Some(index) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            frames.push((index, path));
        }
    }
    frames.sort();
    Ok(frames)
}

pub fn read_sequence_rgb(dir: &Path) -> Result<Vec<Image>> {
    list_frames(dir)?.iter().map(|(_, p)| read_rgb(p)).collect()
}

pub fn read_sequence_gray(dir: &Path) -> Result<Vec<Image>> {
    list_frames(dir)?.iter().map(|(_, p)| read_gray(p)).collect()
}

/// Writes frames as `0001.png`, `0002.png`, ... creating `dir` if needed.
pub fn write_sequence(dir: &Path, frames: &[Image]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(frame_name(i + 1)), f)?;
    }
    Ok(())
}
