//! PNG input/output. Pixels map to `[0,1]` as `v / 255` and back as
//! `round(clamp(x, 0, 1) * 255)`.

use std::fs;
use std::path::{Path, PathBuf};

use fusion_core::Tensor;
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::error::{CliError, Result};

pub fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape matches buffer")
}

pub fn to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(CliError::usage(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (d[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(img.to_rgb8())
}

pub fn load(path: &Path) -> Result<Tensor> {
    Ok(to_tensor(&load_rgb(path)?))
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    to_image(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Bilinear resize to `size x size`.
pub fn resize(img: &RgbImage, size: u32) -> RgbImage {
    image::imageops::resize(img, size, size, FilterType::Triangle)
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Final path component as a string.
pub fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_8bit_values() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([(x * 50) as u8, (y * 80) as u8, 255]));
        let t = to_tensor(&img);
        assert_eq!(t.shape(), &[3, 3, 5]);
        assert_eq!(to_image(&t).unwrap(), img);
    }

    #[test]
    fn encoding_clamps_and_rounds() {
        let t = Tensor::new(&[3, 1, 2], vec![-0.5, 1.5, 0.5, 0.001, 0.999, 0.002]).unwrap();
        let img = to_image(&t).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 128, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [255, 0, 1]);
    }
}
