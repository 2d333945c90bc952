use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reads an 8-bit grayscale or RGB PNG as `H×W×C` values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported pixel format {:?}; expected 8-bit gray or RGB",
                path.display(),
                other.color()
            )))
        }
    };
    Tensor::new(&[h, w, c], raw.into_iter().map(|v| v as f32 / 255.0).collect())
}
