use std::path::Path;

use super::atomic_write;
use crate::error::{Error, Result};
use crate::frame::Image;

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Loads an 8-bit image as linear RGB.
pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = super::read_bytes(path)?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let lut: Vec<f64> = (0..256).map(|v| srgb_to_linear(v as f64 / 255.0)).collect();
    let data = rgb.into_raw().into_iter().map(|v| lut[v as usize]).collect();
    Image::from_data(w, h, data)
}

pub fn encode_srgb8(img: &Image) -> Vec<u8> {
    img.data.iter().map(|v| (linear_to_srgb(*v) * 255.0).round() as u8).collect()
}

/// Writes linear RGB as an 8-bit sRGB PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut buf,
        &encode_srgb8(img),
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    atomic_write(path, buf.get_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_curve_round_trips_every_code() {
        for v in 0..256 {
            let c = v as f64 / 255.0;
            assert_eq!((linear_to_srgb(srgb_to_linear(c)) * 255.0).round() as u32, v);
        }
        assert!((srgb_to_linear(1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| srgb_to_linear((i * 7 % 256) as f64 / 255.0)).collect();
        let img = Image::from_data(4, 3, data).unwrap();
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(read_png(&path), Err(Error::Image { .. })));
    }
}
