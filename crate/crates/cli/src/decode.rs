use std::path::Path;

use image::{ColorType, ImageReader};
use ynet_core::data::{Decoder, PpmDecoder, RgbImage};
use ynet_core::Error;

/// PPM through the native decoder, everything else through `image`.
/// Only 8-bit, three-channel images are accepted.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImageDecoder;

impl Decoder for ImageDecoder {
    fn decode(&self, path: &Path) -> ynet_core::Result<RgbImage> {
        let is_ppm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        if is_ppm {
            return PpmDecoder.decode(path);
        }
        let fail = |reason: String| Error::Decode {
            path: path.to_path_buf(),
            reason,
        };
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| fail(e.to_string()))?;
        if img.color() != ColorType::Rgb8 {
            return Err(fail(format!("expected 8-bit RGB, found {:?}", img.color())));
        }
        let rgb = img.into_rgb8();
        let (w, h) = rgb.dimensions();
        RgbImage::new(w as usize, h as usize, rgb.into_raw()).map_err(|e| fail(e.to_string()))
    }
}
