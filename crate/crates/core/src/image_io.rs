//! Reading and writing 8-bit PNG and binary PGM/PPM images.
//!
//! Images load as `[0, 255]` floats. Grayscale files become single-channel
//! volumes unless [`load_rgb`] is used, which replicates the gray plane.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{FeatureVolume, Image};

fn open(path: &Path) -> Result<DynamicImage> {
    let fmt = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
    {
        Some(e) if e == "png" => ImageFormat::Png,
        Some(e) if matches!(e.as_str(), "pgm" | "ppm" | "pnm") => ImageFormat::Pnm,
        _ => {
            return Err(Error::Image(format!(
                "{}: only PNG and binary PGM/PPM are supported",
                path.display()
            )))
        }
    };
    let bytes = std::fs::read(path)?;
    image::load_from_memory_with_format(&bytes, fmt).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn gray_volume(g: &GrayImage) -> Image {
    let (w, h) = g.dimensions();
    FeatureVolume::from_fn(w as usize, h as usize, 1, |_, x, y| {
        g.get_pixel(x as u32, y as u32)[0] as f32
    })
}

fn rgb_volume(rgb: &RgbImage) -> Image {
    let (w, h) = rgb.dimensions();
    FeatureVolume::from_fn(w as usize, h as usize, 3, |c, x, y| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32
    })
}

/// Loads an image keeping gray files single-channel; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let img = open(path.as_ref())?;
    Ok(if img.color().has_color() {
        rgb_volume(&img.to_rgb8())
    } else {
        gray_volume(&img.to_luma8())
    })
}

/// Loads an image as three channels.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Image> {
    Ok(rgb_volume(&open(path.as_ref())?.to_rgb8()))
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Saves a 1- or 3-channel volume, rounding and clamping to 8 bits. The
/// format follows the extension (`png`, `pgm`, `ppm`).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynimg = match img.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| {
            image::Luma([to_u8(img.get(0, x as usize, y as usize))])
        })),
        3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([0, 1, 2].map(|c| to_u8(img.get(c, x as usize, y as usize))))
        })),
        n => return Err(Error::Image(format!("cannot save a {n}-channel volume as an image"))),
    };
    let fmt = ImageFormat::from_path(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    dynimg
        .save_with_format(path, fmt)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
