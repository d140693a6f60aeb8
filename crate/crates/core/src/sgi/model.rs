use candle_core::{DType, Device, Tensor};

use super::{layer_count, pool_regions, Encoder, Generator, RegionFeature, SgiSettings, StyleCodes, MODULE};
use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::harness::checkpoint::{Checkpoint, CheckpointHeader, Expect};
use crate::mask::SegmentationMap;
use crate::nn::{leaky_relu, Linear, ParamStore};

/// Encoder, per-region defaults, style MLP and generator.
pub struct Sgi {
    store: ParamStore,
    settings: SgiSettings,
    encoder: Encoder,
    /// `[N, C, F]` stand-ins for regions with no site at a pyramid level.
    defaults: Tensor,
    mlp: [Linear; 2],
    generator: Generator,
}

impl Sgi {
    pub fn new(settings: &SgiSettings) -> Result<Self> {
        let s = settings;
        let mut ps = ParamStore::new(s.seed ^ 0x5610, DType::F32);
        let encoder = Encoder::new(&mut ps, s.resolution, s.enc_base, s.fpn_width)?;
        let defaults = ps.uniform("pool.defaults", &[3, s.classes, s.fpn_width], 0.1)?;
        let layers = layer_count(s.resolution);
        let mlp = [
            Linear::new(&mut ps, "mlp.0", 3 * s.fpn_width, s.mlp_hidden)?,
            Linear::with_bias(&mut ps, "mlp.1", s.mlp_hidden, layers * s.style_dim, 0.0)?,
        ];
        let generator = Generator::new(&mut ps, s.resolution, s.classes, s.style_dim, s.gen_base)?;
        Ok(Self { store: ps, settings: settings.clone(), encoder, defaults, mlp, generator })
    }

    pub fn settings(&self) -> &SgiSettings {
        &self.settings
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn defaults(&self) -> &Tensor {
        &self.defaults
    }

    /// Pooled region features of `[B, 3, H, W]` images under their masks.
    pub fn region_features(&self, images: &Tensor, masks: &[SegmentationMap]) -> Result<RegionFeature> {
        let pyramid = self.encoder.forward(images)?;
        pool_regions(&pyramid, masks, &self.defaults, self.settings.classes)
    }

    /// Shared MLP over each region's concatenated pyramid vector: `[B, C, 3F]` → `[B, C, L, D]`.
    pub fn style_mlp(&self, u: &Tensor) -> Result<Tensor> {
        let (b, c, _) = u.dims3()?;
        let h = leaky_relu(&self.mlp[0].forward(u)?)?;
        let out = self.mlp[1].forward(&h)?;
        Ok(out.reshape((b, c, layer_count(self.settings.resolution), self.settings.style_dim))?)
    }

    /// Style codes of a batch of images: `[B, C, L, D]`.
    pub fn encode(&self, images: &Tensor, masks: &[SegmentationMap]) -> Result<Tensor> {
        self.style_mlp(&self.region_features(images, masks)?.u)
    }

    pub fn generate(&self, masks: &[SegmentationMap], codes: &Tensor) -> Result<Tensor> {
        self.generator.forward(masks, codes)
    }

    /// Codes of a single reference frame.
    pub fn codes_for(&self, frame: &RgbFrame, mask: &SegmentationMap) -> Result<StyleCodes> {
        let x = frame.to_tensor(&Device::Cpu)?.unsqueeze(0)?;
        Ok(StyleCodes::from_batch(&self.encode(&x, std::slice::from_ref(mask))?)?.remove(0))
    }

    /// Renders one frame per mask, each with its own codes; batched internally.
    pub fn render(&self, masks: &[SegmentationMap], codes: &[StyleCodes]) -> Result<Vec<RgbFrame>> {
        if masks.len() != codes.len() {
            return Err(Error::invalid(format!("{} masks but {} code sets", masks.len(), codes.len())));
        }
        let mut out = Vec::with_capacity(masks.len());
        for (m, c) in masks.chunks(16).zip(codes.chunks(16)) {
            let img = self.generate(m, &StyleCodes::to_batch(c)?)?;
            for i in 0..m.len() {
                out.push(RgbFrame::from_tensor(&img.get(i)?)?);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, step: usize, config_hash: &str, palette_hash: &str) -> Result<Checkpoint> {
        let mut header = CheckpointHeader::new(MODULE, step, config_hash, palette_hash, self.settings.classes, 1);
        header.metadata.insert("resolution".into(), self.settings.resolution.to_string());
        Checkpoint::from_store(header, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, expect: Expect<'_>, settings: &SgiSettings) -> Result<Self> {
        ck.verify(expect)?;
        if ck.header.classes != settings.classes {
            return Err(Error::Checkpoint(format!(
                "sgi checkpoint has C={}, run uses C={}",
                ck.header.classes, settings.classes
            )));
        }
        let model = Self::new(settings)?;
        model.store.import(&ck.tensors)?;
        Ok(model)
    }
}
