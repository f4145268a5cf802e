//! 8-bit RGB PNG exchange.

use std::path::Path;

use crate::attacks::quantize_u8;
use crate::error::Result;
use crate::model::ImageBuffer;

/// Reads any image the decoder understands as 3-channel `[0, 1]` floats.
pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageBuffer::new(
        h as usize,
        w as usize,
        3,
        rgb.into_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Writes an 8-bit RGB PNG; single-channel images are replicated to RGB.
pub fn save_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let bytes: Vec<u8> = match img.channels {
        3 => img.pixels.iter().map(|&v| quantize_u8(v)).collect(),
        _ => img.pixels.iter().flat_map(|&v| [quantize_u8(v); 3]).collect(),
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

/// The image as it reads back after an 8-bit round trip.
pub fn quantized(img: &ImageBuffer) -> ImageBuffer {
    img.with_pixels(img.pixels.iter().map(|&v| quantize_u8(v) as f64 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ImageBuffer::new(2, 3, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back, quantized(&img));
        assert!(img.linf_distance(&back).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn gray_is_written_as_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = ImageBuffer::new(2, 2, 1, vec![0.0, 0.2, 0.6, 1.0]).unwrap();
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.get(1, 0, 2), quantize_u8(0.6) as f64 / 255.0);
    }
}
