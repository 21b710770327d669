//! RGB8 raster I/O. Outputs are always PNG.

use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, ImageError, RgbImage};

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImageError> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

/// Decodes PNG or JPEG bytes into RGB8, dropping any alpha channel.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    Ok(image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()?
        .decode()?
        .to_rgb8())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, ImageError> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<(), ImageError> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(ImageError::IoError)
}
