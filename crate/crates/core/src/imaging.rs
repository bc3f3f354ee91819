//! Floating-point RGB images and 8-bit PNG input/output.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `3 x H x W` image with values in `[-1, 1]` (pixel `p` maps to `p / 127.5 - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    data: Tensor<f32>,
}

impl ImageBuffer {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::InvalidParameter(format!("image tensor must be [3, H, W], got {shape:?}")));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { data: Tensor::full(&[3, height, width], value) }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    /// View as a batch of one, `[1, 3, H, W]`.
    pub fn to_batch(&self) -> Tensor<f32> {
        self.data.clone().reshape(&[1, 3, self.height(), self.width()])
    }

    /// Image `index` of an NCHW batch.
    pub fn from_batch(batch: &Tensor<f32>, index: usize) -> Self {
        let (_, c, h, w) = batch.dims4();
        Self { data: batch.batch_item(index).reshape(&[c, h, w]) }
    }

    pub fn batch(images: &[ImageBuffer]) -> Tensor<f32> {
        let items: Vec<Tensor<f32>> = images.iter().map(|i| i.to_batch()).collect();
        Tensor::stack(&items)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Self { data: Tensor::from_vec(&[3, h, w], data) }
    }

    /// Quantize to 8 bits per channel with rounding and clamping.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| to_u8(self.get(c, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized(&self) -> Self {
        Self { data: self.data.map(|v| to_u8(v) as f32 / 127.5 - 1.0) }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Write atomically through a temporary sibling file.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let tmp = temp_sibling(path);
        self.to_rgb8().save_with_format(&tmp, image::ImageFormat::Png)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub(crate) fn temp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Write `bytes` to `path` via temp file + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
