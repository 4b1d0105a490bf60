//! PNG load/save with [0, 1] normalization.

use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Round-half-up quantization to 8 bits.
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Round-half-up quantization to 16 bits.
pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

/// Loads a PNG as RGB, normalized by the source bit depth (8 or 16).
/// Grayscale and alpha variants are widened to RGB.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynamic = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
    let sixteen = matches!(
        dynamic,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    if sixteen {
        let buf = dynamic.to_rgb16();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let data = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        Image::from_vec(h, w, 3, data)
    } else {
        let buf = dynamic.to_rgb8();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::from_vec(h, w, 3, data)
    }
}

/// Saves as 8-bit RGB PNG. Values outside [0, 1] are clamped.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    require_rgb(img, "save_image")?;
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize8(v)).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))
}

/// Saves as 16-bit RGB PNG for near-lossless round trips.
pub fn save_image16(img: &Image, path: &Path) -> Result<()> {
    require_rgb(img, "save_image16")?;
    let raw: Vec<u16> = img.data().iter().map(|&v| quantize16(v)).collect();
    let buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_raw(
        img.width() as u32,
        img.height() as u32,
        raw,
    )
    .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))
}

fn require_rgb(img: &Image, op: &'static str) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::shape(op, format!("need 3 channels, got {}", img.channels())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn eight_bit_round_trip_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = random_image(9, 13, 1);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (9, 13, 3));
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn sixteen_bit_round_trip_is_tighter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x16.png");
        let img = random_image(8, 8, 2);
        save_image16(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 65535.0 + 1e-12);
    }

    #[test]
    fn known_pixel_values_normalize_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let buf = image::RgbImage::from_pixel(2, 2, image::Rgb([128, 128, 128]));
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.at(0, 0, 0), 128.0 / 255.0);
        let black = image::RgbImage::from_pixel(2, 2, image::Rgb([0, 0, 0]));
        black.save(&path).unwrap();
        assert!(load_image(&path).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize8(0.0), 0);
        assert_eq!(quantize8(1.0), 255);
        assert_eq!(quantize8(1.5 / 255.0), 2);
        assert_eq!(quantize8(1.4999 / 255.0), 1);
        assert_eq!(quantize8(-0.3), 0);
        assert_eq!(quantize8(2.0), 255);
    }

    #[test]
    fn unreadable_file_is_a_structured_error() {
        let err = load_image(Path::new("/nonexistent/zzz.png")).unwrap_err();
        assert!(matches!(err, Error::Image(_)));
    }

    #[test]
    fn grayscale_png_widens_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let buf = image::GrayImage::from_pixel(3, 3, image::Luma([51]));
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.at(1, 1, 2), 0.2);
    }
}
