//! RGB image buffer shared across rendering, augmentation, and models.
//!
//! Pixels are `f32` in `[0, 1]`, stored row-major HWC (height, width,
//! channel). PNG round-trips quantize through 8-bit, so an image loaded
//! from disk always has values on the `k / 255` lattice; in-memory
//! transforms may produce arbitrary values in range.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// Owned RGB image, `f32` HWC in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Creates an image filled with a constant grey level.
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    /// Wraps an existing HWC buffer. Length must be `height * width * 3`
    /// and every sample must be finite and in `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::validation(format!(
                "image buffer holds {} samples, expected {}x{}x3 = {}",
                data.len(),
                height,
                width,
                height * width * 3
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "image sample {i} is {v}, outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flat HWC sample buffer.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Reads one channel sample.
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Writes one channel sample, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    /// Reads an RGB pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes an RGB pixel, clamping into `[0, 1]`.
    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0].clamp(0.0, 1.0);
        self.data[i + 1] = rgb[1].clamp(0.0, 1.0);
        self.data[i + 2] = rgb[2].clamp(0.0, 1.0);
    }

    /// Mean value per channel over the whole image.
    pub fn channel_means(&self) -> [f32; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            sums[0] += f64::from(px[0]);
            sums[1] += f64::from(px[1]);
            sums[2] += f64::from(px[2]);
        }
        let n = (self.height * self.width) as f64;
        [
            (sums[0] / n) as f32,
            (sums[1] / n) as f32,
            (sums[2] / n) as f32,
        ]
    }

    /// Converts to a `(3, H, W)` f32 tensor.
    pub fn to_chw_tensor(&self, device: &Device) -> Result<Tensor> {
        let mut chw = vec![0.0f32; self.data.len()];
        let plane = self.height * self.width;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * 3;
                let dst = y * self.width + x;
                chw[dst] = self.data[src];
                chw[plane + dst] = self.data[src + 1];
                chw[2 * plane + dst] = self.data[src + 2];
            }
        }
        Ok(Tensor::from_vec(
            chw,
            (3, self.height, self.width),
            device,
        )?)
    }

    /// Builds an image from a `(3, H, W)` tensor, clamping into `[0, 1]`.
    pub fn from_chw_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::validation(format!(
                "expected 3 channels, tensor has {c}"
            )));
        }
        let chw = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        let mut data = vec![0.0f32; chw.len()];
        for y in 0..h {
            for x in 0..w {
                let src = y * w + x;
                let dst = (y * w + x) * 3;
                data[dst] = chw[src].clamp(0.0, 1.0);
                data[dst + 1] = chw[plane + src].clamp(0.0, 1.0);
                data[dst + 2] = chw[2 * plane + src].clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Stacks a batch of equally sized images into a `(B, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[Image], device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor_refs(&images.iter().collect::<Vec<_>>(), device)
    }

    /// [`batch_to_tensor`](Self::batch_to_tensor) over borrowed images.
    pub fn batch_to_tensor_refs(images: &[&Image], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::validation("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut flat = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::validation(format!(
                    "batch mixes sizes {}x{} and {}x{}",
                    h, w, img.height, img.width
                )));
            }
            let plane = h * w;
            let mut chw = vec![0.0f32; 3 * plane];
            for y in 0..h {
                for x in 0..w {
                    let src = (y * w + x) * 3;
                    let dst = y * w + x;
                    chw[dst] = img.data[src];
                    chw[plane + dst] = img.data[src + 1];
                    chw[2 * plane + dst] = img.data[src + 2];
                }
            }
            flat.extend_from_slice(&chw);
        }
        Ok(Tensor::from_vec(flat, (images.len(), 3, h, w), device)?)
    }

    /// Saves as an 8-bit RGB PNG. Values are rounded to the nearest
    /// `k / 255` level, so save/load round-trips are exact on that lattice.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        let buf: image::RgbImage =
            image::ImageBuffer::from_vec(self.width as u32, self.height as u32, bytes)
                .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(format!("png encode {}: {e}", path.display())))?;
        Ok(())
    }

    /// Loads an 8-bit RGB PNG, mapping samples to `v / 255`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::format(format!("png open {}: {e}", path.display())))?
            .decode()
            .map_err(|e| Error::format(format!("png decode {}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| f32::from(b) / 255.0)
            .collect();
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}
