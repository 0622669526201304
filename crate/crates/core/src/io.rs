//! PNG/PNM reading and writing for image inputs and exported maps.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an 8-bit three-channel image scaled to `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<FeatureMap> {
    match open(path)? {
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            FeatureMap::new(h as usize, w as usize, 3, data)
        }
        other => Err(Error::Format(format!(
            "{}: expected an 8-bit 3-channel RGB image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Loads an 8- or 16-bit single-channel image scaled to `[0, 1]`.
pub fn load_thermal(path: &Path) -> Result<FeatureMap> {
    let (w, h, data): (u32, u32, Vec<f32>) = match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            (w, h, img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            (w, h, img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        other => {
            return Err(Error::Format(format!(
                "{}: expected an 8- or 16-bit single-channel thermal image, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    FeatureMap::new(h as usize, w as usize, 1, data)
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn quantize(v: f32, lo: f32, hi: f32, max: f32) -> f32 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (t.clamp(0.0, 1.0) * max).round()
}

/// Writes channel 0 of `map` as an 8-bit grayscale PNG, mapping `[lo, hi]`
/// linearly onto `[0, 255]`.
pub fn save_gray8(map: &FeatureMap, path: &Path, lo: f32, hi: f32) -> Result<()> {
    let img = GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([quantize(map.get(y as usize, x as usize, 0), lo, hi, 255.0) as u8])
    });
    save(DynamicImage::ImageLuma8(img), path)
}

/// Writes channel 0 of a `[0, 1]` map as a 16-bit grayscale PNG.
pub fn save_gray16(map: &FeatureMap, path: &Path) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([quantize(map.get(y as usize, x as usize, 0), 0.0, 1.0, 65535.0) as u16])
    });
    save(DynamicImage::ImageLuma16(img), path)
}

/// Writes a three-channel `[0, 1]` map as an 8-bit RGB PNG.
pub fn save_rgb8(map: &FeatureMap, path: &Path) -> Result<()> {
    if map.channels() != 3 {
        return Err(Error::shape("save_rgb8", "3 channels", map.channels()));
    }
    let data = map.data().iter().map(|&v| quantize(v, 0.0, 1.0, 255.0) as u8).collect();
    let img = RgbImage::from_raw(map.width() as u32, map.height() as u32, data).expect("buffer sized from map");
    save(DynamicImage::ImageRgb8(img), path)
}
