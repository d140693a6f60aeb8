//! Lip-sync expert in the segmentation domain.
//!
//! Two convolutional towers map five consecutive lower-half one-hot masks
//! and a 0.2 s mel window into a shared 512-d space. The clamped cosine
//! between the two embeddings is the sync probability; training uses binary
//! cross-entropy over aligned and misaligned pairs.

use candle_core::{DType, Device, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::audio::{normalize_mel, window_for_frame, AudioWindow, MelSpectrogram, N_MELS, WINDOW_ROWS};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{Checkpoint, CheckpointHeader, Expect};
use crate::harness::config::Config;
use crate::harness::log::MetricsLog;
use crate::losses::{sync_loss, sync_probability};
use crate::mask::SegmentationMap;
use crate::nn::{adam, leaky_relu, scalar, step, Conv2d, Linear, ParamStore};

pub const MODULE: &str = "sync_expert";
/// Mask frames per sample.
pub const T_V: usize = 5;
pub const EMBED_DIM: usize = 512;
/// Smallest misalignment, in video frames, that counts as a negative.
pub const MIN_SHIFT: usize = 5;

const MASK_WIDTHS: [usize; 4] = [32, 64, 128, 128];
const SPEECH_WIDTHS: [usize; 4] = [32, 64, 128, 128];

/// One clip as the expert sees it.
#[derive(Debug, Clone, Copy)]
pub struct SyncVideo<'a> {
    pub masks: &'a [SegmentationMap],
    pub mel: &'a MelSpectrogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSource {
    Aligned,
    /// Speech taken this many frames away in the same clip.
    Shifted(i64),
    /// Speech taken from another clip.
    OtherClip(usize),
}

#[derive(Debug, Clone)]
pub struct SyncSample {
    /// `T_V·C × H/2 × W`, frame-major channel blocks.
    pub mask_window: Vec<f32>,
    pub speech: AudioWindow,
    pub label: bool,
    pub source: PairSource,
}

/// Lower halves of `T_V` consecutive masks as stacked one-hot channels.
pub fn mask_window(masks: &[SegmentationMap], start: usize, classes: usize) -> Result<Vec<f32>> {
    if start + T_V > masks.len() {
        return Err(Error::invalid(format!(
            "mask window [{start}, {}) exceeds {} frames",
            start + T_V,
            masks.len()
        )));
    }
    let (h, w) = (masks[start].height(), masks[start].width());
    let top = h / 2;
    let rows = h - top;
    let mut out = vec![0f32; T_V * classes * rows * w];
    for k in 0..T_V {
        let m = &masks[start + k];
        for y in top..h {
            for x in 0..w {
                let c = m.get(y, x) as usize;
                if c >= classes {
                    return Err(Error::invalid(format!("label {c} is not below {classes}")));
                }
                out[((k * classes + c) * rows + (y - top)) * w + x] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Lower halves of per-frame `[B, C, H, W]` maps stacked to `[B, T_V·C, H/2, W]`.
pub fn stack_lower_halves(frames: &[Tensor]) -> Result<Tensor> {
    if frames.len() != T_V {
        return Err(Error::invalid(format!("expected {T_V} frames, got {}", frames.len())));
    }
    let h = frames[0].dim(2)?;
    let halves = frames.iter().map(|f| f.narrow(2, h / 2, h - h / 2)).collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&halves, 1)?)
}

/// Draws an aligned pair or a misaligned one with equal probability.
///
/// Misaligned speech comes from a shift of at least [`MIN_SHIFT`] frames in
/// the same clip or from a different clip, again 50/50. Returns `None` when
/// the clip is too short to host both kinds.
pub fn sample_pair(
    videos: &[SyncVideo<'_>],
    clip: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<Option<SyncSample>> {
    let Some(video) = videos.get(clip) else {
        return Err(Error::invalid(format!("clip {clip} out of range ({} clips)", videos.len())));
    };
    let n = video.masks.len();
    if n < T_V + 2 * MIN_SHIFT {
        return Ok(None);
    }
    let last = n - T_V;
    let start = rng.random_range(0..=last);
    let positive = rng.random_bool(0.5);
    let (speech, source) = if positive {
        (window_for_frame(video.mel, start)?, PairSource::Aligned)
    } else {
        let others: Vec<usize> = (0..videos.len()).filter(|&i| i != clip && videos[i].masks.len() >= T_V).collect();
        if !others.is_empty() && rng.random_bool(0.5) {
            let &o = others.choose(rng).expect("non-empty");
            let f = rng.random_range(0..=videos[o].masks.len() - T_V);
            (window_for_frame(videos[o].mel, f)?, PairSource::OtherClip(o))
        } else {
            let offsets: Vec<i64> = (-(start as i64)..=(last - start) as i64)
                .filter(|o| o.unsigned_abs() as usize >= MIN_SHIFT)
                .collect();
            let &o = offsets.choose(rng).expect("clip length guarantees a valid shift");
            (window_for_frame(video.mel, (start as i64 + o) as usize)?, PairSource::Shifted(o))
        }
    };
    Ok(Some(SyncSample { mask_window: mask_window(video.masks, start, classes)?, speech, label: positive, source }))
}

pub struct SyncExpert {
    store: ParamStore,
    classes: usize,
    resolution: usize,
    mask_convs: Vec<Conv2d>,
    mask_proj: Linear,
    speech_convs: Vec<Conv2d>,
    speech_proj: Linear,
}

impl SyncExpert {
    pub fn new(seed: u64, classes: usize, resolution: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("sync expert needs at least one class".into()));
        }
        if resolution == 0 || resolution % 32 != 0 {
            return Err(Error::Config(format!("sync expert resolution {resolution} must be a multiple of 32")));
        }
        let mut ps = ParamStore::new(seed, DType::F32);
        let mut mask_convs = Vec::new();
        let mut cin = T_V * classes;
        for (i, &w) in MASK_WIDTHS.iter().enumerate() {
            mask_convs.push(Conv2d::new(&mut ps, &format!("mask.conv{i}"), cin, w, 3, 2, 1)?);
            cin = w;
        }
        // Lower half is H/2 × W; four stride-2 convolutions divide both by 16.
        let flat = cin * (resolution / 32) * (resolution / 16);
        let mask_proj = Linear::new(&mut ps, "mask.proj", flat, EMBED_DIM)?;

        let mut speech_convs = Vec::new();
        let mut cin = 1;
        for (i, &w) in SPEECH_WIDTHS.iter().enumerate() {
            speech_convs.push(Conv2d::new(&mut ps, &format!("speech.conv{i}"), cin, w, 3, 2, 1)?);
            cin = w;
        }
        let flat = cin * (WINDOW_ROWS / 16) * N_MELS.div_ceil(16);
        let speech_proj = Linear::new(&mut ps, "speech.proj", flat, EMBED_DIM)?;
        Ok(Self { store: ps, classes, resolution, mask_convs, mask_proj, speech_convs, speech_proj })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `[B, T_V·C, H/2, W]` to `[B, 512]` non-negative embeddings.
    pub fn embed_masks(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let want = (T_V * self.classes, self.resolution / 2, self.resolution);
        if (c, h, w) != want {
            return Err(Error::invalid(format!("mask window is {c}x{h}x{w}, expert expects {want:?}")));
        }
        let mut h = x.clone();
        for conv in &self.mask_convs {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        Ok(self.mask_proj.forward(&h.flatten_from(1)?)?.relu()?)
    }

    /// `[B, 1, 16, 80]` raw log-mel windows to `[B, 512]` non-negative embeddings.
    pub fn embed_speech(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (1, WINDOW_ROWS, N_MELS) {
            return Err(Error::invalid(format!("speech window is {c}x{h}x{w}, expected 1x{WINDOW_ROWS}x{N_MELS}")));
        }
        let mut h = normalize_mel(x)?;
        for conv in &self.speech_convs {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        Ok(self.speech_proj.forward(&h.flatten_from(1)?)?.relu()?)
    }

    pub fn probability(&self, masks: &Tensor, speech: &Tensor) -> Result<Tensor> {
        sync_probability(&self.embed_speech(speech)?, &self.embed_masks(masks)?)
    }

    pub fn to_checkpoint(&self, step: usize, config_hash: &str, palette_hash: &str) -> Result<Checkpoint> {
        let mut header = CheckpointHeader::new(MODULE, step, config_hash, palette_hash, self.classes, T_V);
        header.metadata.insert("resolution".into(), self.resolution.to_string());
        Checkpoint::from_store(header, &self.store)
    }

    /// Rebuilds an expert from a checkpoint; class count and window length must match.
    pub fn from_checkpoint(ck: &Checkpoint, expect: Expect<'_>, classes: usize) -> Result<Self> {
        ck.verify(expect)?;
        if ck.header.classes != classes || ck.header.t_v != T_V {
            return Err(Error::Checkpoint(format!(
                "expert was trained for C={} T_v={}, run uses C={classes} T_v={T_V}",
                ck.header.classes, ck.header.t_v
            )));
        }
        let resolution = ck
            .header
            .metadata
            .get("resolution")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Checkpoint("expert checkpoint lacks its resolution".into()))?;
        let expert = Self::new(0, classes, resolution)?;
        expert.store.import(&ck.tensors)?;
        Ok(expert)
    }
}

/// Stacks samples into `(masks, speech, labels)` tensors.
pub fn batch_tensors(samples: &[&SyncSample], classes: usize, resolution: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let dev = Device::Cpu;
    let b = samples.len();
    let masks: Vec<f32> = samples.iter().flat_map(|s| s.mask_window.iter().copied()).collect();
    let speech: Vec<f32> = samples.iter().flat_map(|s| s.speech.segment.iter().copied()).collect();
    let labels: Vec<f32> = samples.iter().map(|s| if s.label { 1.0 } else { 0.0 }).collect();
    Ok((
        Tensor::from_vec(masks, (b, T_V * classes, resolution / 2, resolution), &dev)?,
        Tensor::from_vec(speech, (b, 1, WINDOW_ROWS, N_MELS), &dev)?,
        Tensor::from_vec(labels, b, &dev)?,
    ))
}

/// Fixed evaluation pairs drawn round-robin over clips.
pub fn draw_pairs(videos: &[SyncVideo<'_>], count: usize, classes: usize, seed: u64) -> Result<Vec<SyncSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut clip = 0;
    let mut misses = 0;
    while out.len() < count {
        match sample_pair(videos, clip % videos.len(), classes, &mut rng)? {
            Some(s) => out.push(s),
            None => {
                misses += 1;
                if misses > videos.len() {
                    return Err(Error::invalid("no clip is long enough for sync pairs"));
                }
            }
        }
        clip += 1;
    }
    Ok(out)
}

/// Fraction of pairs classified correctly at `p > 0.5`.
pub fn accuracy(expert: &SyncExpert, pairs: &[SyncSample]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in pairs.chunks(64) {
        let refs: Vec<&SyncSample> = chunk.iter().collect();
        let (m, s, _) = batch_tensors(&refs, expert.classes, expert.resolution)?;
        let p = expert.probability(&m, &s)?.to_vec1::<f32>()?;
        correct += p.iter().zip(chunk).filter(|(p, s)| (**p > 0.5) == s.label).count();
    }
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eval_every: usize,
    pub eval_pairs: usize,
    pub seed: u64,
}

impl ExpertSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            steps: cfg.usize("sync.steps")?,
            batch: cfg.usize("sync.batch")?,
            lr: cfg.float("sync.lr")?,
            beta1: cfg.float("sync.beta1")?,
            beta2: cfg.float("sync.beta2")?,
            eval_every: cfg.usize("sync.eval_every")?,
            eval_pairs: cfg.usize("sync.eval_pairs")?,
            seed: cfg.u64("seed")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertReport {
    pub steps: usize,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Trains on `train` clips and reports held-out accuracy on `test` clips.
pub fn train_expert(
    expert: &SyncExpert,
    train: &[SyncVideo<'_>],
    test: &[SyncVideo<'_>],
    settings: &ExpertSettings,
    log: &mut MetricsLog,
) -> Result<ExpertReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("sync expert needs both training and held-out clips"));
    }
    let classes = expert.classes;
    let eval = draw_pairs(test, settings.eval_pairs, classes, settings.seed ^ 0xe7a1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5c);
    let mut opt = adam(expert.store.vars(), settings.lr, settings.beta1, settings.beta2)?;
    let mut loss_value = f64::NAN;
    let mut acc = accuracy(expert, &eval)?;
    for it in 1..=settings.steps {
        let mut batch = Vec::with_capacity(settings.batch);
        while batch.len() < settings.batch {
            let clip = rng.random_range(0..train.len());
            if let Some(s) = sample_pair(train, clip, classes, &mut rng)? {
                batch.push(s);
            }
        }
        let refs: Vec<&SyncSample> = batch.iter().collect();
        let (m, s, y) = batch_tensors(&refs, classes, expert.resolution)?;
        let loss = sync_loss(&expert.probability(&m, &s)?, &y)?;
        loss_value = step(&mut opt, &loss, MODULE, it)?;
        if it % settings.eval_every == 0 || it == settings.steps {
            acc = accuracy(expert, &eval)?;
            log.record(json!({"module": MODULE, "step": it, "loss": loss_value, "accuracy": acc}))?;
        }
    }
    Ok(ExpertReport { steps: settings.steps, final_loss: loss_value, accuracy: acc })
}

/// Mean sync probability over every aligned window of a mask sequence.
pub fn sync_confidence(expert: &SyncExpert, masks: &[SegmentationMap], mel: &MelSpectrogram) -> Result<f64> {
    if masks.len() < T_V {
        return Err(Error::invalid(format!("{} frames is shorter than the {T_V}-frame sync window", masks.len())));
    }
    let samples = (0..=masks.len() - T_V)
        .map(|f| {
            Ok(SyncSample {
                mask_window: mask_window(masks, f, expert.classes)?,
                speech: window_for_frame(mel, f)?,
                label: true,
                source: PairSource::Aligned,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0f64;
    for chunk in samples.chunks(64) {
        let refs: Vec<&SyncSample> = chunk.iter().collect();
        let (m, s, _) = batch_tensors(&refs, expert.classes, expert.resolution)?;
        total += scalar(&expert.probability(&m, &s)?.to_dtype(DType::F64)?.sum_all()?)?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{compute_mel, SAMPLES_PER_FRAME};

    fn clip(frames: usize, label_shift: u8) -> (Vec<SegmentationMap>, MelSpectrogram) {
        let masks = (0..frames)
            .map(|f| {
                let labels = (0..32 * 32).map(|p| (((p + f) % 3) as u8 + label_shift) % 12).collect();
                SegmentationMap::new(32, 32, 12, labels).unwrap()
            })
            .collect();
        let wave: Vec<f32> = (0..frames * SAMPLES_PER_FRAME).map(|i| (i as f32 * 0.05).sin() * 0.1).collect();
        (masks, compute_mel(&wave, 16_000).unwrap())
    }

    #[test]
    fn mask_window_layout() {
        let (masks, _) = clip(6, 0);
        let w = mask_window(&masks, 1, 12).unwrap();
        assert_eq!(w.len(), T_V * 12 * 16 * 32);
        // Frame k, class of pixel (16 + y, x) is set and nothing else per pixel.
        for k in 0..T_V {
            for y in 0..16 {
                for x in 0..32 {
                    let c = masks[1 + k].get(16 + y, x) as usize;
                    let total: f32 = (0..12).map(|cc| w[((k * 12 + cc) * 16 + y) * 32 + x]).sum();
                    assert_eq!(total, 1.0);
                    assert_eq!(w[((k * 12 + c) * 16 + y) * 32 + x], 1.0);
                }
            }
        }
        assert!(mask_window(&masks, 2, 12).is_err());
    }

    #[test]
    fn pairs_follow_labelling_rules() {
        let (m0, a0) = clip(40, 0);
        let (m1, a1) = clip(40, 5);
        let videos = [SyncVideo { masks: &m0, mel: &a0 }, SyncVideo { masks: &m1, mel: &a1 }];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut positives = 0;
        let n = 10_000;
        let (mut shifted, mut other) = (0, 0);
        for _ in 0..n {
            let s = sample_pair(&videos, 0, 12, &mut rng).unwrap().unwrap();
            match s.source {
                PairSource::Aligned => {
                    assert!(s.label);
                    positives += 1;
                }
                PairSource::Shifted(o) => {
                    assert!(!s.label);
                    assert!(o.unsigned_abs() >= MIN_SHIFT as u64);
                    shifted += 1;
                }
                PairSource::OtherClip(c) => {
                    assert!(!s.label);
                    assert_eq!(c, 1);
                    other += 1;
                }
            }
        }
        let frac = positives as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "positive fraction {frac}");
        assert!((shifted as f64 / (shifted + other) as f64 - 0.5).abs() < 0.05);
    }

    #[test]
    fn short_clips_are_skipped() {
        let (m, a) = clip(T_V + 2 * MIN_SHIFT - 1, 0);
        let videos = [SyncVideo { masks: &m, mel: &a }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_pair(&videos, 0, 12, &mut rng).unwrap().is_none());
    }

    #[test]
    fn wrong_class_count_fails_loudly() {
        let expert = SyncExpert::new(0, 12, 32).unwrap();
        let x = Tensor::zeros((1, T_V * 11, 16, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(expert.embed_masks(&x).is_err());
        let ck = expert.to_checkpoint(0, "h", "p").unwrap();
        let expect = Expect { module: MODULE, config_hash: "h", palette_hash: "p" };
        assert!(SyncExpert::from_checkpoint(&ck, expect, 11).is_err());
        let back = SyncExpert::from_checkpoint(&ck, expect, 12).unwrap();
        assert_eq!(back.store().export().unwrap(), expert.store().export().unwrap());
        assert!(SyncExpert::new(0, 12, 48).is_err());
    }

    #[test]
    fn untrained_expert_is_near_chance() {
        let (m0, a0) = clip(60, 0);
        let (m1, a1) = clip(60, 5);
        let videos = [SyncVideo { masks: &m0, mel: &a0 }, SyncVideo { masks: &m1, mel: &a1 }];
        let pairs = draw_pairs(&videos, 400, 12, 3).unwrap();
        let expert = SyncExpert::new(9, 12, 32).unwrap();
        let acc = accuracy(&expert, &pairs).unwrap();
        let positives = pairs.iter().filter(|p| p.label).count() as f64 / 400.0;
        // Untrained embeddings are either all above or all below threshold,
        // so accuracy tracks the positive fraction.
        assert!((acc - 0.5).abs() <= 0.05 + (positives - 0.5).abs(), "accuracy {acc}");
        let conf = sync_confidence(&expert, &m0[..T_V], &a0).unwrap();
        assert!((0.0..=1.0).contains(&conf));
        assert!(sync_confidence(&expert, &m0[..T_V - 1], &a0).is_err());
    }
}
