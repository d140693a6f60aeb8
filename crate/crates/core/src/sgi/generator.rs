use candle_core::{DType, Tensor};

use super::{layer_count, one_hot_flat};
use crate::error::{Error, Result};
use crate::mask::{downsample, SegmentationMap};
use crate::nn::{leaky_relu, Linear, ParamStore};

const DEMOD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Modulated convolution at the current resolution.
    Conv { kernel: usize },
    /// Modulated stride-2 transposed convolution (kernel 2), doubling the resolution.
    Up,
    /// Modulated 1×1 projection to RGB; its output is upsampled and summed into the image.
    ToRgb,
}

/// One style-consuming layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Index of the style code this layer reads.
    pub style: usize,
    /// Resolution of the layer input, where modulation is applied.
    pub style_res: usize,
    pub cin: usize,
    pub cout: usize,
}

struct ModLayer {
    spec: LayerSpec,
    affine: Linear,
    weight: Tensor,
    bias: Tensor,
}

impl ModLayer {
    fn new(ps: &mut ParamStore, name: &str, spec: LayerSpec, dim: usize) -> Result<Self> {
        let affine = Linear::with_bias(ps, &format!("{name}.affine"), dim, spec.cin, 1.0)?;
        let weight = match spec.kind {
            LayerKind::Conv { kernel } => {
                ps.he(&format!("{name}.weight"), &[spec.cout, spec.cin, kernel, kernel], spec.cin * kernel * kernel)?
            }
            LayerKind::Up => ps.he(&format!("{name}.weight"), &[spec.cin, spec.cout, 2, 2], spec.cin)?,
            LayerKind::ToRgb => ps.uniform(&format!("{name}.weight"), &[spec.cout, spec.cin, 1, 1], (1.0 / spec.cin as f64).sqrt())?,
        };
        let bias = ps.constant(&format!("{name}.bias"), &[spec.cout], 0.0)?;
        Ok(Self { spec, affine, weight, bias })
    }

    /// `smap` is the `[B, Cin, h, w]` modulation at the layer input.
    fn forward(&self, x: &Tensor, smap: &Tensor) -> candle_core::Result<Tensor> {
        let xm = (x * smap)?;
        let cout = self.spec.cout;
        let bias = self.bias.reshape((1, cout, 1, 1))?;
        match self.spec.kind {
            LayerKind::Conv { kernel } => {
                let y = xm.conv2d(&self.weight, kernel / 2, 1, 1, 1)?;
                let wsq = self.weight.sqr()?.sum_keepdim(3)?.sum_keepdim(2)?;
                let d = (smap.sqr()?.conv2d(&wsq, 0, 1, 1, 1)? + DEMOD_EPS)?.powf(-0.5)?;
                leaky_relu(&(y * d)?.broadcast_add(&bias)?)
            }
            LayerKind::Up => {
                let y = xm.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
                // [Cin, Cout, 2, 2] → [Cout, Cin, 1, 1] summed over taps.
                let wsq = self.weight.sqr()?.sum_keepdim(3)?.sum_keepdim(2)?.transpose(0, 1)?.contiguous()?;
                let d = (smap.sqr()?.conv2d(&wsq, 0, 1, 1, 1)? + DEMOD_EPS)?.powf(-0.5)?;
                let (_, _, h, w) = d.dims4()?;
                leaky_relu(&(y * d.upsample_nearest2d(2 * h, 2 * w)?)?.broadcast_add(&bias)?)
            }
            LayerKind::ToRgb => xm.conv2d(&self.weight, 0, 1, 1, 1)?.broadcast_add(&bias),
        }
    }
}

/// Style-based generator whose modulation varies per pixel with the mask.
///
/// A learned 4×4 constant is refined by one convolution per resolution and
/// doubled by transposed convolutions; every resolution emits an RGB skip
/// that is nearest-upsampled and summed. Layer `l` reads style code `l` of
/// each pixel's region from the mask downsampled to the layer input size.
pub struct Generator {
    resolution: usize,
    classes: usize,
    dim: usize,
    constant: Tensor,
    /// Main-path layers interleaved with their RGB skips, in execution order.
    layers: Vec<ModLayer>,
}

fn channels(res: usize, base: usize) -> usize {
    match res {
        0..=8 => base,
        9..=32 => (base / 2).max(8),
        _ => (base / 4).max(8),
    }
}

fn kernel_at(res: usize) -> usize {
    if res <= 8 {
        1
    } else {
        3
    }
}

impl Generator {
    pub fn new(ps: &mut ParamStore, resolution: usize, classes: usize, dim: usize, base: usize) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 8 {
            return Err(Error::Config(format!("generator resolution {resolution} is not a power of two ≥ 8")));
        }
        let mut specs = Vec::new();
        let mut res = 4;
        let mut style = 0;
        let c4 = channels(4, base);
        specs.push(LayerSpec { kind: LayerKind::Conv { kernel: kernel_at(4) }, style, style_res: 4, cin: c4, cout: c4 });
        style += 1;
        while res < resolution {
            let (cin, cout) = (channels(res, base), channels(2 * res, base));
            // The RGB skip of this resolution shares the code of the next layer.
            specs.push(LayerSpec { kind: LayerKind::ToRgb, style, style_res: res, cin, cout: 3 });
            specs.push(LayerSpec { kind: LayerKind::Up, style, style_res: res, cin, cout });
            style += 1;
            res *= 2;
            specs.push(LayerSpec { kind: LayerKind::Conv { kernel: kernel_at(res) }, style, style_res: res, cin: cout, cout });
            style += 1;
        }
        specs.push(LayerSpec { kind: LayerKind::ToRgb, style, style_res: res, cin: channels(res, base), cout: 3 });
        debug_assert_eq!(style + 1, layer_count(resolution));
        let constant = ps.uniform("gen.const", &[1, c4, 4, 4], 1.0)?;
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| ModLayer::new(ps, &format!("gen.layer{i}"), s, dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { resolution, classes, dim, constant, layers })
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn num_styles(&self) -> usize {
        layer_count(self.resolution)
    }

    /// Largest max-norm distance (in output pixels) over which one region's
    /// codes can influence the image.
    ///
    /// A style site at input resolution `r` covers a block of `res/r` output
    /// pixels anchored at a pixel of its region; every later convolution with
    /// kernel `k` at resolution `r'` widens the footprint by `(k−1)/2·res/r'`.
    /// RGB skips are 1×1 and nearest-upsampled, so they add nothing.
    pub fn receptive_radius(&self) -> usize {
        let specs = self.layers();
        let spread = |from: usize| -> usize {
            specs[from..]
                .iter()
                .map(|s| match s.kind {
                    LayerKind::Conv { kernel } => (kernel - 1) / 2 * (self.resolution / s.style_res),
                    _ => 0,
                })
                .sum()
        };
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let block = self.resolution / s.style_res - 1;
                match s.kind {
                    LayerKind::ToRgb => block,
                    _ => block + spread(i),
                }
            })
            .max()
            .unwrap_or(0)
    }

    /// Masks and `[B, C, L, D]` codes to `[B, 3, H, W]` images in `(0, 1)`.
    pub fn forward(&self, masks: &[SegmentationMap], codes: &Tensor) -> Result<Tensor> {
        let (b, c, l, d) = codes.dims4()?;
        if (c, l, d) != (self.classes, self.num_styles(), self.dim) || b != masks.len() {
            return Err(Error::invalid(format!(
                "codes {:?} for {} masks; generator expects [B, {}, {}, {}]",
                codes.dims(),
                masks.len(),
                self.classes,
                self.num_styles(),
                self.dim
            )));
        }
        if let Some(m) = masks.iter().find(|m| m.height() != self.resolution || m.width() != self.resolution) {
            return Err(Error::invalid(format!(
                "mask is {}x{}, generator renders {r}x{r}",
                m.height(),
                m.width(),
                r = self.resolution
            )));
        }
        let mut onehots: Vec<(usize, Tensor)> = Vec::new();
        let mut res = 4;
        while res <= self.resolution {
            let down = masks.iter().map(|m| downsample(m, res, res)).collect::<Result<Vec<_>>>()?;
            onehots.push((res, one_hot_flat(&down, self.classes, codes.dtype())?));
            res *= 2;
        }
        let style_map = |spec: &LayerSpec, affine: &Linear| -> Result<Tensor> {
            let per_region = affine.forward(&codes.narrow(2, spec.style, 1)?.squeeze(2)?)?;
            let (_, oh) = onehots.iter().find(|(r, _)| *r == spec.style_res).expect("every resolution has a one-hot");
            let r = spec.style_res;
            Ok(per_region.transpose(1, 2)?.contiguous()?.matmul(oh)?.reshape((b, spec.cin, r, r))?)
        };
        let mut x = self.constant.broadcast_as((b, self.constant.dim(1)?, 4, 4))?.contiguous()?;
        let mut image: Option<Tensor> = None;
        for layer in &self.layers {
            let smap = style_map(&layer.spec, &layer.affine)?;
            let y = layer.forward(&x, &smap)?;
            if layer.spec.kind == LayerKind::ToRgb {
                let up = y.upsample_nearest2d(self.resolution, self.resolution)?;
                image = Some(match image {
                    Some(acc) => (acc + up)?,
                    None => up,
                });
            } else {
                x = y;
            }
        }
        Ok(candle_nn::ops::sigmoid(&image.expect("at least one RGB skip"))?)
    }

    pub fn dtype(&self) -> DType {
        self.constant.dtype()
    }
}
