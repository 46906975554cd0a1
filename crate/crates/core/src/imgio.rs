//! Image containers and PNG I/O.
//!
//! Pipeline math runs on `f64` arrays in `[0, 1]`; files are 8-bit PNGs
//! (RGB for documents, RGBA for stamps, grayscale `{0, 255}` for masks).
//! Quantization is round-to-nearest, so u8 -> f64 -> u8 round-trips exactly.

use image::{GrayImage, ImageReader, RgbImage, RgbaImage};
use ndarray::{Array2, Array3, Array4};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("image decode failure on {path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
    #[error("image encode failure on {path}: {source}")]
    Encode {
        path: String,
        source: image::ImageError,
    },
}

/// RGB image as `[3, H, W]` f64 in `[0, 1]`.
pub type RgbTensor = Array3<f64>;

pub fn height(img: &RgbTensor) -> usize {
    img.shape()[1]
}

pub fn width(img: &RgbTensor) -> usize {
    img.shape()[2]
}

pub fn u8_to_f64(v: u8) -> f64 {
    v as f64 / 255.0
}

pub fn f64_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Convert an 8-bit RGB buffer into the f64 tensor layout.
pub fn rgb_image_to_tensor(img: &RgbImage) -> RgbTensor {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = u8_to_f64(p.0[c]);
        }
    }
    out
}

/// Quantize an f64 tensor to an 8-bit RGB buffer.
pub fn tensor_to_rgb_image(t: &RgbTensor) -> RgbImage {
    let (h, w) = (height(t), width(t));
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                f64_to_u8(t[[0, y, x]]),
                f64_to_u8(t[[1, y, x]]),
                f64_to_u8(t[[2, y, x]]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

pub fn save_rgb(t: &RgbTensor, path: &Path) -> Result<(), ImgError> {
    tensor_to_rgb_image(t).save(path).map_err(|source| ImgError::Encode {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbTensor, ImgError> {
    let img = ImageReader::open(path)
        .map_err(|source| ImgError::Io {
            path: path.display().to_string(),
            source,
        })?
        .decode()
        .map_err(|source| ImgError::Decode {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_image_to_tensor(&img))
}

/// Binary mask stored as 8-bit `{0, 255}`.
pub fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<(), ImgError> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([if mask[[y, x]] { 255 } else { 0 }]));
        }
    }
    img.save(path).map_err(|source| ImgError::Encode {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>, ImgError> {
    let img = ImageReader::open(path)
        .map_err(|source| ImgError::Io {
            path: path.display().to_string(),
            source,
        })?
        .decode()
        .map_err(|source| ImgError::Decode {
            path: path.display().to_string(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] >= 128;
    }
    Ok(out)
}

/// RGBA stamp raster, 8-bit channels. Alpha is ink coverage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbaRaster {
    pub height: usize,
    pub width: usize,
    /// Row-major `[r, g, b, a]` per pixel.
    pub data: Vec<u8>,
}

impl RgbaRaster {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 4],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 4] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, px: [u8; 4]) {
        let i = (y * self.width + x) * 4;
        self.data[i..i + 4].copy_from_slice(&px);
    }

    #[inline]
    pub fn alpha(&self, y: usize, x: usize) -> u8 {
        self.data[(y * self.width + x) * 4 + 3]
    }

    pub fn save(&self, path: &Path) -> Result<(), ImgError> {
        let img = RgbaImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("raster buffer matches dimensions");
        img.save(path).map_err(|source| ImgError::Encode {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Stack `[3, H, W]` images into a `[B, 3, H, W]` batch.
pub fn stack_batch(images: &[RgbTensor]) -> Array4<f64> {
    assert!(!images.is_empty());
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}

/// Arrange a list of equally sized images into a grid (row-major).
pub fn image_grid(images: &[RgbTensor], cols: usize) -> RgbTensor {
    assert!(!images.is_empty() && cols >= 1);
    let (c, h, w) = images[0].dim();
    let rows = images.len().div_ceil(cols);
    let mut out = Array3::from_elem((c, rows * h, cols * w), 1.0);
    for (i, img) in images.iter().enumerate() {
        let (r, k) = (i / cols, i % cols);
        out.slice_mut(ndarray::s![.., r * h..(r + 1) * h, k * w..(k + 1) * w])
            .assign(img);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rgb_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Array3::zeros((3, 5, 7));
        for (i, v) in t.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let path = dir.path().join("t.png");
        save_rgb(&t, &path).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn mask_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Array2::from_elem((4, 6), false);
        m[[1, 2]] = true;
        m[[3, 5]] = true;
        let path = dir.path().join("m.png");
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }
}
