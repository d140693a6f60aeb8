use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, ParamStore};

/// Strides of the three pyramid levels relative to the input.
pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

/// Feature maps at strides 8, 16 and 32, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
}

/// Strided convolutional backbone with a top-down feature pyramid.
///
/// Each output level also sees the input pixels sampled on its own grid
/// (top-left anchor, like the mask downsampling), so a pooled region vector
/// has direct access to the colours under its sampling sites.
pub struct Encoder {
    resolution: usize,
    width: usize,
    stem: Vec<Conv2d>,
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, resolution: usize, base: usize, width: usize) -> Result<Self> {
        if resolution < 32 || resolution % 32 != 0 {
            return Err(Error::Config(format!("encoder resolution {resolution} is not a multiple of 32")));
        }
        let chans = [3, base, 2 * base, 4 * base, 4 * base, 4 * base];
        let stem = (0..5)
            .map(|i| Conv2d::new(ps, &format!("enc.stem{i}"), chans[i], chans[i + 1], 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let lateral = (0..3)
            .map(|i| Conv2d::new(ps, &format!("enc.lateral{i}"), chans[i + 3], width, 1, 1, 0))
            .collect::<Result<Vec<_>>>()?;
        let output = (0..3)
            .map(|i| Conv2d::new(ps, &format!("enc.out{i}"), width + 3, width, 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { resolution, width, stem, lateral, output })
    }

    /// Channel count of every pyramid level.
    pub fn widths(&self) -> [usize; 3] {
        [self.width; 3]
    }

    /// `[B, 3, H, W]` images in `[0, 1]` to the three-level pyramid.
    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if (c, h, w) != (3, self.resolution, self.resolution) {
            return Err(Error::invalid(format!(
                "encoder expects 3x{r}x{r} images, got {c}x{h}x{w}",
                r = self.resolution
            )));
        }
        let mut x = (images - 0.5)?;
        let mut levels = Vec::new();
        for (i, conv) in self.stem.iter().enumerate() {
            x = leaky_relu(&conv.forward(&x)?)?;
            if i >= 2 {
                levels.push(x.clone());
            }
        }
        let mut maps = vec![None, None, None];
        let mut top: Option<Tensor> = None;
        for i in (0..3).rev() {
            let mut p = self.lateral[i].forward(&levels[i])?;
            if let Some(t) = &top {
                let (_, _, ph, pw) = p.dims4()?;
                p = (p + t.upsample_nearest2d(ph, pw)?)?;
            }
            top = Some(p.clone());
            let pixels = sample_grid(images, PYRAMID_STRIDES[i])?;
            maps[i] = Some(leaky_relu(&self.output[i].forward(&Tensor::cat(&[&p, &pixels], 1)?)?)?);
        }
        Ok(FeaturePyramid { maps: maps.into_iter().map(|m| m.expect("filled")).collect() })
    }
}

/// Pixels at `(stride·i, stride·j)`.
fn sample_grid(images: &Tensor, stride: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = images.dims4()?;
    let rows = Tensor::arange_step(0u32, h as u32, stride as u32, &Device::Cpu)?;
    let cols = Tensor::arange_step(0u32, w as u32, stride as u32, &Device::Cpu)?;
    images.index_select(&rows, 2)?.index_select(&cols, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn stride_contract() {
        let mut ps = ParamStore::new(0, DType::F32);
        let enc = Encoder::new(&mut ps, 64, 8, 12).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let p = enc.forward(&x).unwrap();
        let dims: Vec<_> = p.maps.iter().map(|m| m.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 12, 8, 8], vec![2, 12, 4, 4], vec![2, 12, 2, 2]]);
        assert_eq!(enc.widths(), [12; 3]);
        let again = enc.forward(&x).unwrap();
        for (a, b) in p.maps.iter().zip(&again.maps) {
            assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
        assert!(enc.forward(&Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn grid_sampling_is_top_left() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let s = sample_grid(&x, 2).unwrap();
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0.0, 2.0, 8.0, 10.0]);
    }
}
