use candle_core::{Device, Tensor, D};
use candle_nn::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::providers::softplus;
use super::{prior_mask_sample, Discriminator, IdEmbedder, PaletteParser, Sgi, SgiProviders, StyleCodes, MODULE};
use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::harness::config::Config;
use crate::harness::log::MetricsLog;
use crate::losses::ce_loss;
use crate::mask::SegmentationMap;
use crate::metrics::psnr;
use crate::nn::{adam, scalar, step};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pixel: f64,
    pub perceptual: f64,
    pub id: f64,
    pub parsing: f64,
    pub adversarial: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgiSettings {
    pub resolution: usize,
    pub classes: usize,
    pub enc_base: usize,
    pub fpn_width: usize,
    pub style_dim: usize,
    pub mlp_hidden: usize,
    pub gen_base: usize,
    pub disc_base: usize,
    pub lr: f64,
    /// Cosine decay ends at `lr * lr_floor` on the last step.
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub weights: LossWeights,
    pub r1_gamma: f64,
    pub r1_every: usize,
    /// Per-region colour gain/offset range; 0 disables the augmentation.
    pub color_jitter: f64,
    /// Drive the generator with a mask from up to 15 frames away.
    pub prior: bool,
    pub id_steps: usize,
    pub eval_every: usize,
    pub eval_frames: usize,
    pub seed: u64,
}

impl SgiSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            resolution: cfg.usize("resolution")?,
            classes: cfg.usize("classes")?,
            enc_base: cfg.usize("sgi.enc_base")?,
            fpn_width: cfg.usize("sgi.fpn_width")?,
            style_dim: cfg.usize("sgi.style_dim")?,
            mlp_hidden: cfg.usize("sgi.mlp_hidden")?,
            gen_base: cfg.usize("sgi.gen_base")?,
            disc_base: cfg.usize("sgi.disc_base")?,
            lr: cfg.float("sgi.lr")?,
            lr_floor: cfg.float("sgi.lr_floor")?,
            beta1: cfg.float("sgi.beta1")?,
            beta2: cfg.float("sgi.beta2")?,
            batch: cfg.usize("sgi.batch")?,
            steps: cfg.usize("sgi.steps")?,
            weights: LossWeights {
                pixel: cfg.float("sgi.w_pixel")?,
                perceptual: cfg.float("sgi.w_perceptual")?,
                id: cfg.float("sgi.w_id")?,
                parsing: cfg.float("sgi.w_parsing")?,
                adversarial: cfg.float("sgi.w_adversarial")?,
            },
            r1_gamma: cfg.float("sgi.r1_gamma")?,
            r1_every: cfg.usize("sgi.r1_every")?,
            color_jitter: cfg.float("sgi.color_jitter")?,
            prior: cfg.bool("sgi.prior")?,
            id_steps: cfg.usize("sgi.id_steps")?,
            eval_every: cfg.usize("sgi.eval_every")?,
            eval_frames: cfg.usize("sgi.eval_frames")?,
            seed: cfg.u64("seed")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SgiLossReport {
    pub pixel: f64,
    pub perceptual: f64,
    pub id: f64,
    pub parsing: f64,
    pub adversarial: f64,
    pub total: f64,
}

fn missing(name: &str) -> Error {
    Error::Config(format!("{name} loss has a nonzero weight but no provider is registered"))
}

fn labels_tensor(masks: &[SegmentationMap]) -> Result<Tensor> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let data: Vec<u32> = masks.iter().flat_map(|m| m.labels().iter().map(|&l| l as u32)).collect();
    Ok(Tensor::from_vec(data, (masks.len(), h, w), &Device::Cpu)?)
}

/// Weighted texture loss of `output` against `target` (both `[B, 3, H, W]`),
/// with `masks` the target segmentation. Terms with zero weight are skipped
/// (reported as 0) and need no provider.
pub fn sgi_loss(
    output: &Tensor,
    target: &Tensor,
    masks: &[SegmentationMap],
    providers: &SgiProviders<'_>,
    w: &LossWeights,
) -> Result<(Tensor, SgiLossReport)> {
    if output.dims() != target.dims() {
        return Err(Error::invalid(format!("output {:?} and target {:?} differ", output.dims(), target.dims())));
    }
    let target = target.detach();
    let mut report = SgiLossReport::default();
    let pixel = (output - &target)?.abs()?.mean_all()?;
    report.pixel = scalar(&pixel)?;
    let mut total = (&pixel * w.pixel)?;
    if w.perceptual != 0.0 {
        let p = providers.perceptual.ok_or_else(|| missing("perceptual"))?;
        let (fa, fb) = (p.features(output)?, p.features(&target)?);
        let mut acc = Tensor::zeros((), output.dtype(), output.device())?;
        for (a, b) in fa.iter().zip(&fb) {
            acc = (acc + (a - b.detach())?.sqr()?.mean_all()?)?;
        }
        let term = (acc / fa.len().max(1) as f64)?;
        report.perceptual = scalar(&term)?;
        total = (total + (term * w.perceptual)?)?;
    }
    if w.id != 0.0 {
        let e = providers.id.ok_or_else(|| missing("id"))?;
        let (a, b) = (e.embed(output)?, e.embed(&target)?.detach());
        let dot = (&a * &b)?.sum(D::Minus1)?;
        let norms = (a.sqr()?.sum(D::Minus1)?.sqrt()? * b.sqr()?.sum(D::Minus1)?.sqrt()?)?.maximum(1e-8)?;
        let term = (1.0 - (dot / norms)?.mean_all()?)?;
        report.id = scalar(&term)?;
        total = (total + (term * w.id)?)?;
    }
    if w.parsing != 0.0 {
        let p = providers.parser.ok_or_else(|| missing("parsing"))?;
        let term = ce_loss(&p.logits(output)?, &labels_tensor(masks)?)?;
        report.parsing = scalar(&term)?;
        total = (total + (term * w.parsing)?)?;
    }
    if w.adversarial != 0.0 {
        let d = providers.discriminator.ok_or_else(|| missing("adversarial"))?;
        let term = softplus(&d.logits(output)?.neg()?)?.mean_all()?;
        report.adversarial = scalar(&term)?;
        total = (total + (term * w.adversarial)?)?;
    }
    report.total = scalar(&total)?;
    Ok((total, report))
}

/// Frames and masks of one clip, with the index of its identity.
#[derive(Debug, Clone, Copy)]
pub struct SgiClip<'a> {
    pub frames: &'a [RgbFrame],
    pub masks: &'a [SegmentationMap],
    pub identity: usize,
}

/// Recolours every region of both frames with one random gain/offset per
/// region and channel, so source and target stay consistent.
fn jitter_pair(
    rng: &mut ChaCha8Rng,
    frames: [&RgbFrame; 2],
    masks: [&SegmentationMap; 2],
    strength: f64,
    classes: usize,
) -> [RgbFrame; 2] {
    let s = strength as f32;
    let params: Vec<[(f32, f32); 3]> = (0..classes)
        .map(|_| std::array::from_fn(|_| (rng.random_range(1.0 - s..1.0 + s), rng.random_range(-s / 3.0..s / 3.0))))
        .collect();
    std::array::from_fn(|k| {
        let (f, m) = (frames[k], masks[k]);
        let mut out = f.clone();
        for y in 0..f.height() {
            for x in 0..f.width() {
                let p = &params[m.get(y, x) as usize];
                for c in 0..3 {
                    out.set(c, y, x, (f.get(c, y, x) * p[c].0 + p[c].1).clamp(0.0, 1.0));
                }
            }
        }
        out
    })
}

fn stack(frames: &[RgbFrame]) -> Result<Tensor> {
    let ts = frames.iter().map(|f| f.to_tensor(&Device::Cpu)).collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Generator-side and critic-side optimisation state.
pub struct SgiTrainer<'a> {
    model: &'a Sgi,
    disc: Discriminator,
    id: Option<IdEmbedder>,
    g_opt: candle_nn::AdamW,
    d_opt: candle_nn::AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> SgiTrainer<'a> {
    /// Builds the critic and, when its weight is nonzero, trains the identity embedder.
    pub fn new(model: &'a Sgi, clips: &[SgiClip<'_>]) -> Result<Self> {
        let s = model.settings().clone();
        let disc = Discriminator::new(s.seed ^ 0xd15c, s.resolution, s.disc_base)?;
        let id = if s.weights.id != 0.0 {
            let ids = clips.iter().map(|c| c.identity).max().map_or(0, |m| m + 1);
            let emb = IdEmbedder::new(s.seed ^ 0x1d, ids, 64)?;
            let samples: Vec<(&RgbFrame, usize)> =
                clips.iter().flat_map(|c| c.frames.iter().map(move |f| (f, c.identity))).collect();
            let acc = emb.train(&samples, s.id_steps, 16, s.seed ^ 0x1d1d)?;
            log::info!("identity embedder training accuracy {acc:.3}");
            Some(emb)
        } else {
            None
        };
        Ok(Self {
            model,
            g_opt: adam(model.store().vars(), s.lr, s.beta1, s.beta2)?,
            d_opt: adam(disc.store().vars(), s.lr, s.beta1, s.beta2)?,
            disc,
            id,
            rng: ChaCha8Rng::seed_from_u64(s.seed ^ 0x5617),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Gaussian directions of unit norm per sample, drawn from the trainer's stream.
    fn unit_directions(&mut self, dims: &[usize]) -> Result<Tensor> {
        let per: usize = dims[1..].iter().product();
        let mut v = Vec::with_capacity(dims[0] * per);
        for _ in 0..dims[0] {
            let d: Vec<f32> = (0..per).map(|_| StandardNormal.sample(&mut self.rng)).collect();
            let n = d.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            v.extend(d.into_iter().map(|x| x / n));
        }
        Ok(Tensor::from_vec(v, dims, &Device::Cpu)?)
    }

    pub fn train_step(&mut self, clips: &[SgiClip<'_>]) -> Result<SgiLossReport> {
        let s = self.model.settings().clone();
        self.step += 1;
        let lr = cosine_lr(s.lr, s.lr_floor, self.step - 1, s.steps);
        self.g_opt.set_learning_rate(lr);
        self.d_opt.set_learning_rate(lr);
        let (mut src, mut tgt, mut src_masks, mut tgt_masks) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..s.batch {
            let clip = clips[self.rng.random_range(0..clips.len())];
            let n = clip.frames.len();
            let t = self.rng.random_range(0..n);
            let target = if s.prior { prior_mask_sample(n, t, true, &mut self.rng)? } else { t };
            let pair = [&clip.frames[t], &clip.frames[target]];
            let masks = [&clip.masks[t], &clip.masks[target]];
            let [a, b] = if s.color_jitter > 0.0 {
                jitter_pair(&mut self.rng, pair, masks, s.color_jitter, s.classes)
            } else {
                [pair[0].clone(), pair[1].clone()]
            };
            src.push(a);
            tgt.push(b);
            src_masks.push(masks[0].clone());
            tgt_masks.push(masks[1].clone());
        }
        let (src, tgt) = (stack(&src)?, stack(&tgt)?);
        let codes = self.model.encode(&src, &src_masks)?;
        let out = self.model.generate(&tgt_masks, &codes)?;
        let parser = PaletteParser::fit(&tgt, &tgt_masks, s.classes)?;
        let providers = SgiProviders {
            perceptual: Some(&self.disc),
            id: self.id.as_ref().map(|e| e as &dyn super::IdentityEmbedder),
            parser: Some(&parser),
            discriminator: Some(&self.disc),
        };
        let (total, mut report) = sgi_loss(&out, &tgt, &tgt_masks, &providers, &s.weights)?;
        report.total = step(&mut self.g_opt, &total, MODULE, self.step)?;

        if s.weights.adversarial != 0.0 || s.weights.perceptual != 0.0 {
            let fake = out.detach();
            let d_loss = (softplus(&self.disc.logits(&fake)?)?.mean_all()? + softplus(&self.disc.logits(&tgt)?.neg()?)?.mean_all()?)?;
            let d_loss = if s.r1_every > 0 && self.step % s.r1_every == 0 && s.r1_gamma > 0.0 {
                // ‖∇D‖² from a central difference along a random unit direction:
                // E[(u·g)²] = ‖g‖²/n for u uniform on the sphere.
                let h = 0.05;
                let u = self.unit_directions(tgt.dims())?;
                let plus = self.disc.logits(&(&tgt + (&u * h)?)?)?;
                let minus = self.disc.logits(&(&tgt - (&u * h)?)?)?;
                let dir = ((plus - minus)? / (2.0 * h))?;
                let n = (tgt.elem_count() / tgt.dim(0)?) as f64;
                let r1 = (dir.sqr()?.mean_all()? * n)?;
                (d_loss + (r1 * (s.r1_gamma / 2.0 * s.r1_every as f64))?)?
            } else {
                d_loss
            };
            step(&mut self.d_opt, &d_loss, "sgi_discriminator", self.step)?;
        }
        Ok(report)
    }
}

/// Cosine interpolation from `lr` at step 0 to `lr * floor` at `total - 1`.
fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Mean reconstruction PSNR over up to `frames` evenly spaced frames per clip:
/// each frame is encoded and regenerated under its own mask.
pub fn reconstruction_psnr(model: &Sgi, clips: &[SgiClip<'_>], frames: usize) -> Result<f64> {
    let mut values = Vec::new();
    for clip in clips {
        let n = clip.frames.len();
        let idx: Vec<usize> = (0..frames.min(n)).map(|k| k * n / frames.min(n)).collect();
        let imgs: Vec<RgbFrame> = idx.iter().map(|&i| clip.frames[i].clone()).collect();
        let masks: Vec<SegmentationMap> = idx.iter().map(|&i| clip.masks[i].clone()).collect();
        for (chunk_i, chunk_m) in imgs.chunks(16).zip(masks.chunks(16)) {
            let out = model.generate(chunk_m, &model.encode(&stack(chunk_i)?, chunk_m)?)?;
            for (k, frame) in chunk_i.iter().enumerate() {
                values.push(psnr(&RgbFrame::from_tensor(&out.get(k)?)?, frame, 1.0)?);
            }
        }
    }
    if values.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgiReport {
    pub steps: usize,
    pub last: SgiLossReport,
    /// Held-out reconstruction PSNR after the final step.
    pub psnr: f64,
}

pub fn train_sgi(model: &Sgi, train: &[SgiClip<'_>], held_out: &[SgiClip<'_>], log: &mut MetricsLog) -> Result<SgiReport> {
    if train.is_empty() {
        return Err(Error::invalid("texture training needs at least one clip"));
    }
    let s = model.settings().clone();
    let mut trainer = SgiTrainer::new(model, train)?;
    let mut last = SgiLossReport::default();
    let mut psnr_value = f64::NAN;
    for _ in 0..s.steps {
        last = trainer.train_step(train)?;
        let it = trainer.steps_done();
        let eval = it == s.steps || (s.eval_every > 0 && it % s.eval_every == 0);
        if eval {
            if !held_out.is_empty() {
                psnr_value = reconstruction_psnr(model, held_out, s.eval_frames)?;
            }
            log.record(json!({
                "module": MODULE, "step": it,
                "pixel": last.pixel, "perceptual": last.perceptual, "id": last.id,
                "parsing": last.parsing, "adversarial": last.adversarial, "total": last.total,
                "psnr_held_out": if psnr_value.is_finite() { json!(psnr_value) } else { json!(null) },
            }))?;
        }
    }
    Ok(SgiReport { steps: trainer.steps_done(), last, psnr: psnr_value })
}

/// Within- versus across-identity cosine similarity of one region's codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSimilarity {
    pub region: usize,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

impl RegionSimilarity {
    pub fn separated(&self) -> bool {
        matches!((self.intra, self.inter), (Some(a), Some(b)) if a > b)
    }
}

/// For every region, mean cosine similarity of its flattened codes over
/// pairs of frames from the same identity and from different identities.
/// Only frames where the region is visible in the mask take part.
pub fn code_similarity(entries: &[(usize, StyleCodes, &SegmentationMap)], classes: usize) -> Vec<RegionSimilarity> {
    (0..classes)
        .map(|region| {
            let rows: Vec<(usize, Vec<f64>)> = entries
                .iter()
                .filter(|(_, _, m)| m.count(region as u8) > 0)
                .map(|(id, codes, _)| {
                    let v: Vec<f64> = codes.row(region).iter().map(|&x| x as f64).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    (*id, v.into_iter().map(|x| x / n).collect())
                })
                .collect();
            let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
            for i in 0..rows.len() {
                for j in i + 1..rows.len() {
                    let c: f64 = rows[i].1.iter().zip(&rows[j].1).map(|(a, b)| a * b).sum();
                    let acc = if rows[i].0 == rows[j].0 { &mut intra } else { &mut inter };
                    acc.0 += c;
                    acc.1 += 1;
                }
            }
            let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
            RegionSimilarity { region, intra: mean(intra), inter: mean(inter) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::cosine_lr;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2e-3, 0.05, 0, 600), 2e-3);
        assert!((cosine_lr(2e-3, 0.05, 599, 600) - 1e-4).abs() < 1e-15);
        let mid = cosine_lr(1.0, 0.0, 50, 101);
        assert!((mid - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(1.0, 0.1, 5, 1), 1.0);
    }
}
