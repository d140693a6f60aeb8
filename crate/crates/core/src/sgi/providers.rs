//! Networks the texture losses are measured with. Each sits behind a small
//! trait so a pretrained stand-in can be swapped in.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::region_means;
use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::mask::SegmentationMap;
use crate::nn::{adam, leaky_relu, step, Conv2d, Linear, ParamStore};

/// Feature stack for a perceptual distance.
pub trait PerceptualProvider {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// Identity embedding, `[B, 3, H, W]` → `[B, E]`.
pub trait IdentityEmbedder {
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

/// Face parser, `[B, 3, H, W]` → `[B, C, H, W]` logits.
pub trait FaceParser {
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

/// Providers handed to the loss; a missing one is only allowed when its weight is zero.
#[derive(Default, Clone, Copy)]
pub struct SgiProviders<'a> {
    pub perceptual: Option<&'a dyn PerceptualProvider>,
    pub id: Option<&'a dyn IdentityEmbedder>,
    pub parser: Option<&'a dyn FaceParser>,
    pub discriminator: Option<&'a Discriminator>,
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

/// Strided convolutional critic; its hidden activations double as the
/// perceptual feature space.
pub struct Discriminator {
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Discriminator {
    pub fn new(seed: u64, resolution: usize, base: usize) -> Result<Self> {
        if resolution < 16 || resolution % 16 != 0 {
            return Err(Error::Config(format!("discriminator resolution {resolution} is not a multiple of 16")));
        }
        let mut ps = ParamStore::new(seed, DType::F32);
        let chans = [3, base, 2 * base, 4 * base, 4 * base];
        let convs = (0..4)
            .map(|i| Conv2d::new(&mut ps, &format!("disc.conv{i}"), chans[i], chans[i + 1], 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let side = resolution / 16;
        let head = Linear::new(&mut ps, "disc.head", 4 * base * side * side, 1)?;
        Ok(Self { store: ps, convs, head })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Hidden activations of the first three blocks and the `[B]` realness logits.
    pub fn forward(&self, images: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut x = ((images - 0.5)? * 2.0)?;
        let mut feats = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            x = leaky_relu(&c.forward(&x)?)?;
            if i < 3 {
                feats.push(x.clone());
            }
        }
        let logits = self.head.forward(&x.flatten_from(1)?)?.squeeze(1)?;
        Ok((feats, logits))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images)?.1)
    }
}

impl PerceptualProvider for Discriminator {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.forward(images)?.0)
    }
}

/// Small convolutional embedder trained to tell the training identities apart.
pub struct IdEmbedder {
    store: ParamStore,
    convs: Vec<Conv2d>,
    proj: Linear,
    head: Linear,
}

impl IdEmbedder {
    pub fn new(seed: u64, identities: usize, dim: usize) -> Result<Self> {
        if identities < 2 {
            return Err(Error::Config("identity embedder needs at least two identities".into()));
        }
        let mut ps = ParamStore::new(seed, DType::F32);
        let chans = [3, 16, 32, 32];
        let convs = (0..3)
            .map(|i| Conv2d::new(&mut ps, &format!("id.conv{i}"), chans[i], chans[i + 1], 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let proj = Linear::new(&mut ps, "id.proj", 32, dim)?;
        let head = Linear::new(&mut ps, "id.head", dim, identities)?;
        Ok(Self { store: ps, convs, proj, head })
    }

    fn embed_inner(&self, images: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = (images - 0.5)?;
        for c in &self.convs {
            x = leaky_relu(&c.forward(&x)?)?;
        }
        self.proj.forward(&x.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Trains the classification head on `(frame, identity)` pairs; returns
    /// the final training accuracy.
    pub fn train(&self, samples: &[(&RgbFrame, usize)], steps: usize, batch: usize, seed: u64) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::invalid("identity embedder needs training frames"));
        }
        let mut opt = adam(self.store.vars(), 1e-3, 0.9, 0.999)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = 0.0;
        for it in 0..steps {
            let picks: Vec<_> = (0..batch).map(|_| samples[rng.random_range(0..samples.len())]).collect();
            let x = Tensor::stack(&picks.iter().map(|(f, _)| f.to_tensor(&Device::Cpu)).collect::<candle_core::Result<Vec<_>>>()?, 0)?;
            let y = Tensor::from_vec(picks.iter().map(|(_, i)| *i as u32).collect::<Vec<_>>(), batch, &Device::Cpu)?;
            let logits = self.head.forward(&self.embed_inner(&x)?)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let pred = logits.argmax(1)?.to_vec1::<u32>()?;
            acc = pred.iter().zip(&picks).filter(|(p, (_, i))| **p as usize == *i).count() as f64 / batch as f64;
            step(&mut opt, &loss, "id_embedder", it + 1)?;
        }
        Ok(acc)
    }
}

impl IdentityEmbedder for IdEmbedder {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.embed_inner(images)?)
    }
}

/// Inverse of the flat-colour renderer: each pixel's class logit is the
/// negative squared distance to that class's mean colour in a reference
/// image, divided by a temperature. Classes absent from the reference never win.
pub struct PaletteParser {
    /// `[B, C, 3]`.
    palette: Tensor,
    /// `[B, C, 1]`, 1 where the class is absent.
    absent: Tensor,
    temperature: f64,
}

impl PaletteParser {
    pub const TEMPERATURE: f64 = 0.005;

    /// Palettes from `[B, 3, H, W]` reference images and their masks.
    pub fn fit(images: &Tensor, masks: &[SegmentationMap], classes: usize) -> Result<Self> {
        let (palette, counts) = region_means(&images.detach(), masks, classes)?;
        let absent: Vec<f32> = counts.iter().flatten().map(|&n| if n == 0 { 1.0 } else { 0.0 }).collect();
        let absent = Tensor::from_vec(absent, (masks.len(), classes, 1), &Device::Cpu)?.to_dtype(images.dtype())?;
        Ok(Self { palette, absent, temperature: Self::TEMPERATURE })
    }
}

impl FaceParser for PaletteParser {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (b, ch, h, w) = images.dims4()?;
        let (pb, c, _) = self.palette.dims3()?;
        if pb != b || ch != 3 {
            return Err(Error::invalid(format!("parser fitted on {pb} images, asked to parse {b}")));
        }
        let x = images.reshape((b, 1, 3, h * w))?;
        let p = self.palette.unsqueeze(3)?;
        let d2 = x.broadcast_sub(&p)?.sqr()?.sum(2)?;
        // Absent classes sit far away in colour space.
        let d2 = d2.broadcast_add(&(&self.absent * 1e3)?)?;
        Ok((d2 / -self.temperature)?.reshape((b, c, h, w))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_closed_form() {
        let x = Tensor::new(&[-30f32, -1.0, 0.0, 2.0, 40.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in [-30f32, -1.0, 0.0, 2.0, 40.0].iter().zip(y) {
            let want = if *a > 20.0 { *a } else { a.exp().ln_1p() };
            assert!((want - b).abs() < 1e-5, "{a}: {want} vs {b}");
        }
    }

    #[test]
    fn palette_parser_recovers_flat_masks() {
        let labels: Vec<u8> = (0..64).map(|p| ((p / 8) / 3) as u8).collect();
        let mask = SegmentationMap::new(8, 8, 4, labels).unwrap();
        let colors = [[0.1f32, 0.2, 0.3], [0.9, 0.1, 0.1], [0.2, 0.8, 0.4]];
        let mut frame = RgbFrame::filled(8, 8, [0.0; 3]);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    frame.set(c, y, x, colors[mask.get(y, x) as usize][c]);
                }
            }
        }
        let img = frame.to_tensor(&Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let parser = PaletteParser::fit(&img, std::slice::from_ref(&mask), 4).unwrap();
        let decoded = crate::tsg::decode_logits(&parser.logits(&img).unwrap()).unwrap();
        assert_eq!(decoded[0].labels(), mask.labels());
    }

    #[test]
    fn discriminator_shapes() {
        let d = Discriminator::new(0, 32, 4).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let (f, l) = d.forward(&x).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(l.dims(), &[2]);
    }
}
