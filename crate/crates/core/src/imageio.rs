//! PNG/PPM image I/O shared by the dataset writer, readout overlays, and
//! the CLI.
//!
//! Images in memory are `3 x H x W` tensors with values in `[0, 1]`; on disk
//! they are 8-bit. The format is chosen by file extension (`.png` or
//! `.ppm`/`.pgm`).

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{FloweError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Quantize a unit-range value to 8 bits, clamping.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a `3 x H x W` tensor with values in `[0, 1]` (clamped) as an 8-bit
/// RGB image.
pub fn save_rgb<S: Scalar>(path: impl AsRef<Path>, img: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(FloweError::dim(
            "imageio::save_rgb",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(to_u8(img.at3(ch, y, x).as_f64()));
            }
        }
    }
    let out = RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions by construction");
    out.save(path).map_err(|e| FloweError::image(path, e))
}

/// Load an 8-bit RGB image as a `3 x H x W` tensor scaled to `[0, 1]`.
pub fn load_rgb<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| FloweError::io(path, e))?
        .decode()
        .map_err(|e| FloweError::image(path, e))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn3(3, h, w, |c, y, x| {
        S::from_f64(raw[(y * w + x) * 3 + c] as f64 / 255.0)
    }))
}

/// Save a plane of 8-bit values (labels, masks) as a grayscale image.
pub fn save_gray(path: impl AsRef<Path>, h: usize, w: usize, data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if data.len() != h * w {
        return Err(FloweError::dim(
            "imageio::save_gray",
            format!("{h}x{w} needs {} bytes, got {}", h * w, data.len()),
        ));
    }
    let out = GrayImage::from_raw(w as u32, h as u32, data.to_vec())
        .expect("buffer size matches dimensions by construction");
    out.save(path).map_err(|e| FloweError::image(path, e))
}

/// Load a grayscale image as raw 8-bit values.
pub fn load_gray(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| FloweError::io(path, e))?
        .decode()
        .map_err(|e| FloweError::image(path, e))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f64>::from_fn3(3, 4, 6, |c, y, x| {
            ((c * 83 + y * 19 + x * 7) % 256) as f64 / 255.0
        });
        for ext in ["png", "ppm"] {
            let path = dir.path().join(format!("img.{ext}"));
            save_rgb(&path, &img).unwrap();
            let back = load_rgb::<f64>(&path).unwrap();
            assert_eq!(back.shape(), img.shape());
            for (a, b) in back.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 0.5 / 255.0 + 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gray_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.png");
        let data: Vec<u8> = (0..12).map(|i| (i * 3) as u8).collect();
        save_gray(&path, 3, 4, &data).unwrap();
        let (h, w, back) = load_gray(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_rgb::<f32>("/nonexistent/image.png").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/image.png"));
    }
}
