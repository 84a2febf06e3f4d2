//! 8-bit image files to and from `3 × h × w` tensors in `[0, 1]`.

use std::path::Path;

use fadpnet_core::{Scalar, Tensor};
use image::{ImageReader, RgbImage};

use crate::error::{HarnessError, Result};

pub fn read_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = ImageReader::open(path)
        .map_err(|e| HarnessError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| HarnessError::io(path, e))?
        .decode()
        .map_err(|e| HarnessError::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::from_f64(raw[p * 3 + c] as f64 / 255.0)
    })
}

/// Clamps to `[0, 1]` and rounds to 8 bits.
pub fn to_rgb8<T: Scalar>(img: &Tensor<T>) -> Result<RgbImage> {
    let &[3, h, w] = img.shape() else {
        return Err(HarnessError::Data(format!("expected a 3 x h x w image, got {:?}", img.shape())));
    };
    let d = img.data();
    let mut buf = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            buf[p * 3 + c] = (d[c * h * w + p].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized above"))
}

pub fn write_png<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    to_rgb8(img)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| HarnessError::Data(format!("cannot write {}: {e}", path.display())))
}
