//! Segmentation-guided texture generator.
//!
//! An image is encoded into a three-level feature pyramid; features are
//! averaged per region under the (downsampled) mask, and a shared MLP turns
//! each region's pooled vector into one style code per generator layer. The
//! generator reads the code of every pixel's region from a per-layer style
//! map, so editing one region's code only changes pixels near that region.

mod encoder;
mod generator;
mod model;
mod providers;
mod train;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::mask::{downsample, Region, SegmentationMap};

pub use encoder::{Encoder, FeaturePyramid, PYRAMID_STRIDES};
pub use generator::{Generator, LayerKind, LayerSpec};
pub use model::Sgi;
pub use providers::{
    Discriminator, FaceParser, IdEmbedder, IdentityEmbedder, PaletteParser, PerceptualProvider, SgiProviders,
};
pub use train::{
    code_similarity, reconstruction_psnr, sgi_loss, train_sgi, LossWeights, RegionSimilarity, SgiLossReport, SgiReport, SgiSettings,
    SgiClip, SgiTrainer,
};

pub const MODULE: &str = "sgi";
/// Frames on either side of the target that prior learning may draw a mask from.
pub const PRIOR_WINDOW: usize = 15;

/// Number of style-modulated layers for a square output of `resolution`.
pub fn layer_count(resolution: usize) -> usize {
    2 * resolution.trailing_zeros() as usize - 2
}

/// Region features pooled at every pyramid scale.
#[derive(Debug, Clone)]
pub struct RegionFeature {
    /// `[B, C, N·F]`: the per-scale vectors of each region, concatenated.
    pub u: Tensor,
    /// `present[b][scale][region]`.
    pub present: Vec<Vec<Vec<bool>>>,
}

/// Mean of `features` (`[B, F, h, w]`) over the sites of each label in
/// `masks` (already at `h×w`). Returns `[B, C, F]` sums divided by counts and
/// the `[B, C]` counts; absent regions get zeros.
pub fn region_means(features: &Tensor, masks: &[SegmentationMap], classes: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let (b, f, h, w) = features.dims4()?;
    if masks.len() != b || masks.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::invalid(format!("{} masks do not match {b} feature maps of {h}x{w}", masks.len())));
    }
    let onehot = one_hot_flat(masks, classes, features.dtype())?;
    let sums = onehot.matmul(&features.reshape((b, f, h * w))?.transpose(1, 2)?.contiguous()?)?;
    let counts: Vec<Vec<usize>> = masks.iter().map(|m| (0..classes).map(|c| m.count(c as u8)).collect()).collect();
    let inv: Vec<f32> = counts.iter().flatten().map(|&n| 1.0 / n.max(1) as f32).collect();
    let inv = Tensor::from_vec(inv, (b, classes, 1), features.device())?.to_dtype(features.dtype())?;
    Ok((sums.broadcast_mul(&inv)?, counts))
}

/// `[B, C, h·w]` one-hot rows of a batch of maps.
pub(crate) fn one_hot_flat(masks: &[SegmentationMap], classes: usize, dtype: DType) -> Result<Tensor> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut data = vec![0f32; masks.len() * classes * h * w];
    for (b, m) in masks.iter().enumerate() {
        for (p, &l) in m.labels().iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::invalid(format!("label {l} is not below class count {classes}")));
            }
            data[(b * classes + l as usize) * h * w + p] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (masks.len(), classes, h * w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-region average pooling of every pyramid level under the mask
/// downsampled to that level. `defaults` is `[N, C, F]`; regions without any
/// site at a level take their default vector.
pub fn pool_regions(
    pyramid: &FeaturePyramid,
    masks: &[SegmentationMap],
    defaults: &Tensor,
    classes: usize,
) -> Result<RegionFeature> {
    let mut per_scale = Vec::with_capacity(pyramid.maps.len());
    let mut present = vec![Vec::with_capacity(pyramid.maps.len()); masks.len()];
    for (i, map) in pyramid.maps.iter().enumerate() {
        let (_, _, h, w) = map.dims4()?;
        let down = masks.iter().map(|m| downsample(m, h, w)).collect::<Result<Vec<_>>>()?;
        let (means, counts) = region_means(map, &down, classes)?;
        let flags: Vec<f32> = counts.iter().flatten().map(|&n| if n > 0 { 1.0 } else { 0.0 }).collect();
        let flags = Tensor::from_vec(flags, (masks.len(), classes, 1), map.device())?.to_dtype(map.dtype())?;
        let default = defaults.get(i)?.unsqueeze(0)?;
        let u = (means.broadcast_mul(&flags)? + default.broadcast_mul(&(1.0 - &flags)?)?)?;
        per_scale.push(u);
        for (b, c) in counts.iter().enumerate() {
            present[b].push(c.iter().map(|&n| n > 0).collect());
        }
    }
    Ok(RegionFeature { u: Tensor::cat(&per_scale, 2)?, present })
}

/// One style code per region and generator layer: `C × L × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCodes {
    classes: usize,
    layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl StyleCodes {
    pub fn new(classes: usize, layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != classes * layers * dim {
            return Err(Error::invalid(format!("{} values for {classes}x{layers}x{dim} style codes", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("style codes must be finite"));
        }
        Ok(Self { classes, layers, dim, data })
    }

    /// Splits a `[B, C, L, D]` tensor into one set of codes per batch item.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (b, c, l, d) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks_exact(c * l * d).take(b).map(|v| Self::new(c, l, d, v.to_vec())).collect()
    }

    /// Stacks codes into `[B, C, L, D]`.
    pub fn to_batch(codes: &[Self]) -> Result<Tensor> {
        let first = codes.first().ok_or_else(|| Error::invalid("no style codes"))?;
        if codes.iter().any(|c| c.shape() != first.shape()) {
            return Err(Error::invalid("style codes in one batch must share a shape"));
        }
        let data: Vec<f32> = codes.iter().flat_map(|c| c.data.iter().copied()).collect();
        let (c, l, d) = first.shape();
        Ok(Tensor::from_vec(data, (codes.len(), c, l, d), &Device::Cpu)?)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.classes, self.layers, self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// All `L×D` values of one region.
    pub fn row(&self, region: usize) -> &[f32] {
        let n = self.layers * self.dim;
        &self.data[region * n..(region + 1) * n]
    }

    pub fn row_mut(&mut self, region: usize) -> &mut [f32] {
        let n = self.layers * self.dim;
        &mut self.data[region * n..(region + 1) * n]
    }

    /// The code of `region` at `layer`.
    pub fn code(&self, region: usize, layer: usize) -> &[f32] {
        let start = (region * self.layers + layer) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Replaces the codes of `region` with those of `reference`.
pub fn swap_region_codes(src: &StyleCodes, reference: &StyleCodes, region: usize) -> Result<StyleCodes> {
    if src.shape() != reference.shape() {
        return Err(Error::invalid(format!("style code shapes {:?} and {:?} differ", src.shape(), reference.shape())));
    }
    if region >= src.classes {
        return Err(Error::invalid(format!("region {region} is not below class count {}", src.classes)));
    }
    let mut out = src.clone();
    out.row_mut(region).copy_from_slice(reference.row(region));
    Ok(out)
}

/// Hard composite: BACKGROUND pixels come from `background`, every other
/// pixel is copied from `frame`.
pub fn swap_background(frame: &RgbFrame, mask: &SegmentationMap, background: &RgbFrame) -> Result<RgbFrame> {
    let (h, w) = (frame.height(), frame.width());
    if (mask.height(), mask.width()) != (h, w) || (background.height(), background.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "frame {h}x{w}, mask {}x{} and background {}x{} must match",
            mask.height(),
            mask.width(),
            background.height(),
            background.width()
        )));
    }
    let bg = Region::Background.id();
    let mut out = frame.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == bg {
                for c in 0..3 {
                    out.set(c, y, x, background.get(c, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel `D`-dim style vectors of one generator layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major `[h][w][D]`.
    pub data: Vec<f32>,
}

impl StyleMap {
    /// Broadcasts each region's code for `layer` onto the sites of that
    /// region in the mask downsampled to `size×size`.
    pub fn assemble(mask: &SegmentationMap, codes: &StyleCodes, layer: usize, size: usize) -> Result<Self> {
        if layer >= codes.layers {
            return Err(Error::invalid(format!("layer {layer} of {}", codes.layers)));
        }
        let down = downsample(mask, size, size)?;
        let mut data = Vec::with_capacity(size * size * codes.dim);
        for &l in down.labels() {
            if l as usize >= codes.classes {
                return Err(Error::invalid(format!("label {l} has no style code")));
            }
            data.extend_from_slice(codes.code(l as usize, layer));
        }
        Ok(Self { height: size, width: size, dim: codes.dim, data })
    }

    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Draws the frame whose mask drives the generator during prior learning:
/// uniform over `[target − 15, target + 15]` clipped to the clip, optionally
/// excluding the target itself.
pub fn prior_mask_sample(clip_len: usize, target: usize, include_target: bool, rng: &mut impl Rng) -> Result<usize> {
    if clip_len < 2 || target >= clip_len {
        return Err(Error::invalid(format!("cannot sample around frame {target} of a {clip_len}-frame clip")));
    }
    let lo = target.saturating_sub(PRIOR_WINDOW);
    let hi = (target + PRIOR_WINDOW).min(clip_len - 1);
    if include_target {
        return Ok(rng.random_range(lo..=hi));
    }
    let idx = rng.random_range(lo..hi);
    Ok(if idx >= target { idx + 1 } else { idx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, labels: Vec<u8>, c: usize) -> SegmentationMap {
        SegmentationMap::new(h, w, c, labels).unwrap()
    }

    #[test]
    fn two_pixel_means() {
        let f = Tensor::from_vec(vec![1f32, 3.0, 5.0, 7.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let (u, counts) = region_means(&f, &[map(2, 2, vec![0, 0, 1, 1], 2)], 2).unwrap();
        assert_eq!(u.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![2.0, 6.0]);
        assert_eq!(counts, vec![vec![2, 2]]);
    }

    #[test]
    fn absent_regions_take_defaults() {
        let maps = vec![Tensor::ones((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap()];
        let pyramid = FeaturePyramid { maps };
        let defaults = Tensor::from_vec(vec![9f32, 9.0, 8.0, 8.0, 7.0, 7.0], (1, 3, 2), &Device::Cpu).unwrap();
        let rf = pool_regions(&pyramid, &[map(4, 4, vec![0; 16], 3)], &defaults, 3).unwrap();
        let u = rf.u.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(u, vec![1.0, 1.0, 8.0, 8.0, 7.0, 7.0]);
        assert_eq!(rf.present[0][0], vec![true, false, false]);
    }

    #[test]
    fn swaps_touch_one_row() {
        let a = StyleCodes::new(3, 2, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        let b = StyleCodes::new(3, 2, 2, (0..12).map(|v| -(v as f32)).collect()).unwrap();
        let s = swap_region_codes(&a, &b, 1).unwrap();
        assert_eq!(s.row(0), a.row(0));
        assert_eq!(s.row(1), b.row(1));
        assert_eq!(s.row(2), a.row(2));
        assert_eq!(swap_region_codes(&a, &a, 2).unwrap(), a);
        assert!(swap_region_codes(&a, &b, 3).is_err());
        let all = (0..3).fold(a.clone(), |acc, r| swap_region_codes(&acc, &b, r).unwrap());
        assert_eq!(all, b);
    }

    #[test]
    fn background_composite_degenerate_cases() {
        let fg = RgbFrame::filled(2, 2, [0.2, 0.4, 0.6]);
        let bg = RgbFrame::filled(2, 2, [1.0, 0.0, 0.5]);
        let face = map(2, 2, vec![1; 4], 12);
        assert_eq!(swap_background(&fg, &face, &bg).unwrap(), fg);
        let all_bg = map(2, 2, vec![0; 4], 12);
        assert_eq!(swap_background(&fg, &all_bg, &bg).unwrap(), bg);
        assert!(swap_background(&fg, &all_bg, &RgbFrame::filled(4, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn prior_window_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let i = prior_mask_sample(1000, 100, false, &mut rng).unwrap();
            assert!((85..=115).contains(&i) && i != 100);
            assert!(prior_mask_sample(1000, 0, true, &mut rng).unwrap() <= 15);
            assert!(prior_mask_sample(1000, 999, true, &mut rng).unwrap() >= 984);
        }
        assert!(prior_mask_sample(1, 0, true, &mut rng).is_err());
    }

    #[test]
    fn layer_counts() {
        assert_eq!(layer_count(64), 10);
        assert_eq!(layer_count(1024), 18);
    }
}
