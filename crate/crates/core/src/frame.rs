use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "frame buffer of {} values does not hold 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }

    /// ITU-R 601 luma, row-major.
    pub fn luma(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|p| 0.299 * self.data[p] as f64 + 0.587 * self.data[plane + p] as f64 + 0.114 * self.data[2 * plane + p] as f64)
            .collect()
    }

    pub fn to_tensor(&self, device: &Device) -> candle_core::Result<Tensor> {
        Tensor::from_vec(self.data.clone(), (3, self.height, self.width), device)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let plane = self.height * self.width;
        let mut buf = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                buf.push((self.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized from dimensions")
            .save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let plane = h * w;
        let mut data = vec![0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = raw[3 * p + c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }
}
