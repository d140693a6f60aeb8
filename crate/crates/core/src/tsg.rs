//! Talking segmentation generator: speech plus a mask pair to the next mask.
//!
//! A U-Net encodes the pose source (lower half occluded) stacked with an
//! identity reference. The fused speech embedding — a local 0.2 s window
//! encoding and a contextual 3 s chunk encoding — is broadcast and
//! concatenated at the bottleneck. Transposed convolutions upsample back to
//! full resolution, where the raw input is concatenated once more so the
//! visible upper half can be copied through.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::audio::{
    chunk_summaries, window_centered_on, window_for_frame, AttentionContext, ChunkSummary, ContextualEmbeddingProvider,
    MelExtractor, MelSpectrogram, ZeroContext, CHUNK_FRAMES, N_MELS, WINDOW_ROWS,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{Checkpoint, CheckpointHeader, Expect};
use crate::harness::config::Config;
use crate::harness::log::MetricsLog;
use crate::losses::{ce_loss, l1_label_loss, sync_loss, sync_probability, weighted_ce_loss};
use crate::mask::{compute_class_weights, MaskPair, RegionWeights, SegmentationMap};
use crate::nn::{adam, leaky_relu, scalar, step, Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::sync_expert::{SyncExpert, T_V};

pub const MODULE: &str = "tsg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegLoss {
    Ce,
    Wce,
    /// L1 between softmax output and one-hot labels (ablation baseline).
    L1,
}

impl FromStr for SegLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(SegLoss::Ce),
            "wce" => Ok(SegLoss::Wce),
            "l1" => Ok(SegLoss::L1),
            _ => Err(Error::Config(format!("unknown segmentation loss `{s}` (ce, wce, l1)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextKind {
    Attention,
    Zero,
}

impl FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(ContextKind::Attention),
            "zero" => Ok(ContextKind::Zero),
            _ => Err(Error::Config(format!("unknown context provider `{s}` (attention, zero)"))),
        }
    }
}

/// Where the pose source of frame `t` comes from during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseMode {
    /// Ground-truth mask of frame `t`.
    SelfDriven,
    /// The model's own output for frame `t − 1` (ground truth for the first frame).
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsgSettings {
    pub resolution: usize,
    pub classes: usize,
    pub depth: usize,
    pub base_width: usize,
    pub d_local: usize,
    pub d_ctx: usize,
    pub ctx_inner: usize,
    pub context: ContextKind,
    pub loss: SegLoss,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub lambda_sync: f64,
    pub sync_windows: usize,
    /// Score decoded masks in the sync term (straight-through gradients).
    pub sync_hard: bool,
    pub eval_every: usize,
    pub seed: u64,
}

impl TsgSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            resolution: cfg.usize("resolution")?,
            classes: cfg.usize("classes")?,
            depth: cfg.usize("tsg.depth")?,
            base_width: cfg.usize("tsg.base_width")?,
            d_local: cfg.usize("audio.d_local")?,
            d_ctx: cfg.usize("audio.d_ctx")?,
            ctx_inner: cfg.usize("audio.ctx_inner")?,
            context: cfg.string("tsg.context")?.parse()?,
            loss: cfg.string("tsg.loss")?.parse()?,
            lr: cfg.float("tsg.lr")?,
            beta1: cfg.float("tsg.beta1")?,
            beta2: cfg.float("tsg.beta2")?,
            batch: cfg.usize("tsg.batch")?,
            phase1_steps: cfg.usize("tsg.phase1_steps")?,
            phase2_steps: cfg.usize("tsg.phase2_steps")?,
            lambda_sync: cfg.float("tsg.lambda_sync")?,
            sync_windows: cfg.usize("tsg.sync_windows")?,
            sync_hard: cfg.bool("tsg.sync_hard")?,
            eval_every: cfg.usize("tsg.eval_every")?,
            seed: cfg.u64("seed")?,
        })
    }
}

/// Fused speech features for a batch of frames.
#[derive(Debug, Clone)]
pub struct SpeechEmbedding {
    /// `[B, d_local]` from the 0.2 s window.
    pub local: Tensor,
    /// `[B, d_ctx]` from the 3 s chunk.
    pub contextual: Tensor,
}

impl SpeechEmbedding {
    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> candle_core::Result<Self> {
        Ok(Self { local: self.local.zeros_like()?, contextual: self.contextual.zeros_like()? })
    }

    pub fn fused(&self) -> candle_core::Result<Tensor> {
        Tensor::cat(&[&self.local, &self.contextual], 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsgLossReport {
    /// Segmentation term (weighted cross-entropy unless configured otherwise).
    pub wce: f64,
    pub sync: f64,
    pub total: f64,
}

/// Audio side of one clip, prepared once.
#[derive(Debug, Clone)]
pub struct TsgAudio {
    pub mel: MelSpectrogram,
    pub chunks: Vec<ChunkSummary>,
}

impl TsgAudio {
    pub fn new(mel: MelSpectrogram, waveform: &[f32], extractor: &MelExtractor) -> Result<Self> {
        Ok(Self { mel, chunks: chunk_summaries(extractor, waveform)? })
    }

    fn summary_for(&self, frame: usize) -> Result<(&[f32], usize)> {
        let chunk = self
            .chunks
            .get(frame / CHUNK_FRAMES)
            .ok_or_else(|| Error::invalid(format!("frame {frame} lies beyond the audio")))?;
        Ok((&chunk.frames, frame % CHUNK_FRAMES))
    }
}

/// A clip as the segmentation generator sees it.
#[derive(Debug, Clone, Copy)]
pub struct TsgClip<'a> {
    pub masks: &'a [SegmentationMap],
    pub audio: &'a TsgAudio,
}

/// One frame to predict: pose source, identity reference and the frame index for speech.
struct Item<'a> {
    pose: &'a SegmentationMap,
    reference: &'a SegmentationMap,
    audio: &'a TsgAudio,
    frame: usize,
}

struct Inputs {
    pair: Tensor,
    windows: Tensor,
    summaries: Tensor,
    positions: Vec<usize>,
}

fn assemble(items: &[Item<'_>], classes: usize) -> Result<Inputs> {
    let dev = Device::Cpu;
    let b = items.len();
    let (h, w) = (items[0].pose.height(), items[0].pose.width());
    let mut pair = Vec::with_capacity(b * 2 * classes * h * w);
    let mut windows = Vec::with_capacity(b * WINDOW_ROWS * N_MELS);
    let mut summaries = Vec::with_capacity(b * CHUNK_FRAMES * N_MELS);
    let mut positions = Vec::with_capacity(b);
    for it in items {
        pair.extend(MaskPair::new(it.pose, it.reference, classes)?.to_input());
        windows.extend(window_centered_on(&it.audio.mel, it.frame)?.segment);
        let (s, pos) = it.audio.summary_for(it.frame)?;
        summaries.extend_from_slice(s);
        positions.push(pos);
    }
    Ok(Inputs {
        pair: Tensor::from_vec(pair, (b, 2 * classes, h, w), &dev)?,
        windows: Tensor::from_vec(windows, (b, 1, WINDOW_ROWS, N_MELS), &dev)?,
        summaries: Tensor::from_vec(summaries, (b, CHUNK_FRAMES, N_MELS), &dev)?,
        positions,
    })
}

fn targets(maps: &[&SegmentationMap]) -> Result<Tensor> {
    let (h, w) = (maps[0].height(), maps[0].width());
    let data: Vec<u32> = maps.iter().flat_map(|m| m.labels().iter().map(|&l| l as u32)).collect();
    Ok(Tensor::from_vec(data, (maps.len(), h, w), &Device::Cpu)?)
}

/// Per-pixel argmax of `[B, C, H, W]` logits.
pub fn decode_logits(logits: &Tensor) -> Result<Vec<SegmentationMap>> {
    let (b, c, h, w) = logits.dims4()?;
    let idx = logits.argmax(1)?.to_dtype(DType::U8)?.flatten_all()?.to_vec1::<u8>()?;
    (0..b).map(|i| SegmentationMap::new(h, w, c, idx[i * h * w..(i + 1) * h * w].to_vec())).collect()
}

struct SpeechEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl SpeechEncoder {
    fn new(ps: &mut ParamStore, dim: usize) -> Result<Self> {
        let widths = [16, 32, 64];
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(ps, &format!("speech.conv{i}"), cin, w, 3, 2, 1)?);
            cin = w;
        }
        // 16×80 → 2×10 after three stride-2 convolutions.
        let proj = Linear::new(ps, "speech.proj", cin * (WINDOW_ROWS / 8) * (N_MELS / 8), dim)?;
        Ok(Self { convs, proj })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = crate::audio::normalize_mel(x)?;
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?)?;
        }
        self.proj.forward(&h.flatten_from(1)?)?.relu()
    }
}

pub struct Tsg {
    store: ParamStore,
    settings: TsgSettings,
    down: Vec<Conv2d>,
    mid: Vec<Option<Conv2d>>,
    speech_in: Linear,
    bottleneck: Conv2d,
    up: Vec<ConvTranspose2d>,
    merge: Vec<Conv2d>,
    last_up: ConvTranspose2d,
    head: Conv2d,
    local: SpeechEncoder,
    context: Box<dyn ContextualEmbeddingProvider>,
}

impl Tsg {
    pub fn new(settings: &TsgSettings) -> Result<Self> {
        let s = settings;
        if s.depth < 2 || s.resolution % (1 << s.depth) != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a multiple of 2^{} (U-Net depth)",
                s.resolution, s.depth
            )));
        }
        if s.classes == 0 || s.base_width == 0 {
            return Err(Error::Config("class count and base width must be positive".into()));
        }
        let mut ps = ParamStore::new(s.seed ^ 0x7560, DType::F32);
        let width = |level: usize| s.base_width << (level - 1);
        let mut down = Vec::new();
        let mut mid = Vec::new();
        let mut cin = 2 * s.classes;
        for level in 1..=s.depth {
            let w = width(level);
            down.push(Conv2d::new(&mut ps, &format!("down{level}"), cin, w, 3, 2, 1)?);
            // The half-resolution level stays thin: it only needs to carry
            // structure to the full-resolution head.
            mid.push(if level > 1 { Some(Conv2d::new(&mut ps, &format!("mid{level}"), w, w, 3, 1, 1)?) } else { None });
            cin = w;
        }
        let wb = width(s.depth);
        let speech_in = Linear::new(&mut ps, "bottleneck.speech", s.d_local + s.d_ctx, wb)?;
        let bottleneck = Conv2d::new(&mut ps, "bottleneck.conv", 2 * wb, wb, 3, 1, 1)?;
        let mut up = Vec::new();
        let mut merge = Vec::new();
        for level in (1..s.depth).rev() {
            let w = width(level);
            up.push(ConvTranspose2d::new(&mut ps, &format!("up{level}"), width(level + 1), w, 2, 2, 0)?);
            merge.push(Conv2d::new(&mut ps, &format!("merge{level}"), 2 * w, w, 3, 1, 1)?);
        }
        let w1 = width(1);
        let last_up = ConvTranspose2d::new(&mut ps, "up0", w1, w1, 2, 2, 0)?;
        let head_in = w1 + 2 * s.classes;
        let head = Conv2d::new(&mut ps, "head", head_in, s.classes, 1, 1, 0)?;
        // Start the head as a copier: visible pose-source labels dominate,
        // the identity reference fills the occluded half.
        let mut hw = ps.export()?.into_iter().find(|(n, _, _)| n == "head.weight").expect("registered").2;
        for c in 0..s.classes {
            hw[c * head_in + w1 + c] += 4.0;
            hw[c * head_in + w1 + s.classes + c] += 2.0;
        }
        ps.overwrite("head.weight", hw.into_iter().map(f64::from).collect())?;
        let local = SpeechEncoder::new(&mut ps, s.d_local)?;
        let context: Box<dyn ContextualEmbeddingProvider> = match s.context {
            ContextKind::Attention => Box::new(AttentionContext::new(&mut ps, "context", s.ctx_inner, s.d_ctx)?),
            ContextKind::Zero => Box::new(ZeroContext { dim: s.d_ctx }),
        };
        Ok(Self {
            store: ps,
            settings: settings.clone(),
            down,
            mid,
            speech_in,
            bottleneck,
            up,
            merge,
            last_up,
            head,
            local,
            context,
        })
    }

    pub fn settings(&self) -> &TsgSettings {
        &self.settings
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Local and contextual speech features; `positions[b]` picks the frame within chunk `b`.
    pub fn speech_embedding(&self, windows: &Tensor, summaries: &Tensor, positions: &[usize]) -> Result<SpeechEmbedding> {
        let local = self.local.forward(windows)?;
        let ctx = self.context.forward(summaries)?;
        let (b, t, d) = ctx.dims3()?;
        let idx: Vec<u32> = positions.iter().enumerate().map(|(i, &p)| (i * t + p) as u32).collect();
        let idx = Tensor::from_vec(idx, b, ctx.device())?;
        let contextual = ctx.reshape((b * t, d))?.index_select(&idx, 0)?;
        Ok(SpeechEmbedding { local, contextual })
    }

    /// `[B, 2C, H, W]` mask pairs and speech to `[B, C, H, W]` logits.
    pub fn forward(&self, pair: &Tensor, speech: &SpeechEmbedding) -> Result<Tensor> {
        let s = &self.settings;
        let (_, c, h, w) = pair.dims4()?;
        if (c, h, w) != (2 * s.classes, s.resolution, s.resolution) {
            return Err(Error::invalid(format!(
                "mask pair is {c}x{h}x{w}, model expects {}x{r}x{r}",
                2 * s.classes,
                r = s.resolution
            )));
        }
        let mut skips = Vec::new();
        let mut x = pair.clone();
        for (d, m) in self.down.iter().zip(&self.mid) {
            x = leaky_relu(&d.forward(&x)?)?;
            if let Some(m) = m {
                x = leaky_relu(&m.forward(&x)?)?;
            }
            skips.push(x.clone());
        }
        let (b, _, bh, bw) = x.dims4()?;
        let sp = leaky_relu(&self.speech_in.forward(&speech.fused()?)?)?;
        let sp = sp.reshape((b, sp.dim(1)?, 1, 1))?.broadcast_as((b, sp.dim(1)?, bh, bw))?;
        x = leaky_relu(&self.bottleneck.forward(&Tensor::cat(&[&x, &sp.contiguous()?], 1)?)?)?;
        for (i, (u, m)) in self.up.iter().zip(&self.merge).enumerate() {
            let skip = &skips[s.depth - 2 - i];
            x = leaky_relu(&u.forward(&x)?)?;
            x = leaky_relu(&m.forward(&Tensor::cat(&[&x, skip], 1)?)?)?;
        }
        x = leaky_relu(&self.last_up.forward(&x)?)?;
        Ok(self.head.forward(&Tensor::cat(&[&x, pair], 1)?)?)
    }

    fn forward_items(&self, items: &[Item<'_>]) -> Result<Tensor> {
        let inp = assemble(items, self.settings.classes)?;
        let speech = self.speech_embedding(&inp.windows, &inp.summaries, &inp.positions)?;
        self.forward(&inp.pair, &speech)
    }

    pub fn to_checkpoint(&self, step: usize, config_hash: &str, palette_hash: &str) -> Result<Checkpoint> {
        let header = CheckpointHeader::new(MODULE, step, config_hash, palette_hash, self.settings.classes, T_V);
        Checkpoint::from_store(header, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, expect: Expect<'_>, settings: &TsgSettings) -> Result<Self> {
        ck.verify(expect)?;
        if ck.header.classes != settings.classes {
            return Err(Error::Checkpoint(format!(
                "tsg checkpoint has C={}, run uses C={}",
                ck.header.classes, settings.classes
            )));
        }
        let tsg = Self::new(settings)?;
        tsg.store.import(&ck.tensors)?;
        Ok(tsg)
    }
}

/// Segmentation loss of the configured kind.
pub fn segmentation_loss(kind: SegLoss, logits: &Tensor, target: &Tensor, weights: &Tensor) -> Result<Tensor> {
    match kind {
        SegLoss::Ce => ce_loss(logits, target),
        SegLoss::Wce => weighted_ce_loss(logits, target, weights),
        SegLoss::L1 => l1_label_loss(logits, target),
    }
}

/// Soft sync loss of generated windows against their aligned speech.
///
/// `probs` is `[N·T_V, C, H, W]` softmax output, window-major; `speech` is `[N, 1, 16, 80]`.
pub fn soft_sync_loss(expert: &SyncExpert, probs: &Tensor, speech: &Tensor) -> Result<Tensor> {
    let (nt, c, h, w) = probs.dims4()?;
    if nt % T_V != 0 {
        return Err(Error::invalid(format!("{nt} frames do not form whole {T_V}-frame windows")));
    }
    let n = nt / T_V;
    let lower = probs.narrow(2, h / 2, h - h / 2)?.contiguous()?.reshape((n, T_V * c, h - h / 2, w))?;
    let p = sync_probability(&expert.embed_speech(speech)?, &expert.embed_masks(&lower)?)?;
    let ones = Tensor::ones(n, p.dtype(), p.device())?;
    sync_loss(&p, &ones)
}

/// One-hot of the per-pixel argmax of `[N, C, H, W]` logits.
fn hard_one_hot(logits: &Tensor) -> Result<Tensor> {
    let c = logits.dim(1)?;
    let idx = logits.argmax_keepdim(1)?;
    let classes = Tensor::arange(0u32, c as u32, logits.device())?.reshape((1, c, 1, 1))?;
    Ok(idx.broadcast_eq(&classes)?.to_dtype(logits.dtype())?)
}

/// Optimiser state and sampling for the two-phase schedule.
pub struct TsgTrainer<'a> {
    tsg: &'a Tsg,
    opt: candle_nn::AdamW,
    weights: Tensor,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> TsgTrainer<'a> {
    pub fn new(tsg: &'a Tsg, weights: &RegionWeights) -> Result<Self> {
        let s = &tsg.settings;
        if weights.len() != s.classes {
            return Err(Error::invalid(format!("{} class weights for {} classes", weights.len(), s.classes)));
        }
        let w: Vec<f32> = weights.as_slice().iter().map(|&v| v as f32).collect();
        Ok(Self {
            tsg,
            opt: adam(tsg.store.vars(), s.lr, s.beta1, s.beta2)?,
            weights: Tensor::from_vec(w, s.classes, &Device::Cpu)?,
            rng: ChaCha8Rng::seed_from_u64(s.seed ^ 0x75a1),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn reference_for(&mut self, n: usize, avoid: std::ops::Range<usize>) -> usize {
        loop {
            let r = self.rng.random_range(0..n);
            if !avoid.contains(&r) || n <= avoid.len() {
                return r;
            }
        }
    }

    /// One update on `batch` independently drawn frames. With an expert and
    /// `λ_sync > 0`, whole `T_V`-frame windows are appended to the batch and
    /// the sync term is computed on them.
    pub fn train_step(&mut self, clips: &[TsgClip<'_>], expert: Option<&SyncExpert>, lambda_sync: f64) -> Result<TsgLossReport> {
        let s = self.tsg.settings.clone();
        self.step += 1;
        let mut items = Vec::new();
        let mut target_maps = Vec::new();
        let mut speech = Vec::new();
        let use_sync = expert.is_some() && lambda_sync > 0.0;
        for _ in 0..s.batch {
            let clip = clips[self.rng.random_range(0..clips.len())];
            let n = clip.masks.len();
            let f = self.rng.random_range(0..n);
            let r = self.reference_for(n, f..f + 1);
            items.push(Item { pose: &clip.masks[f], reference: &clip.masks[r], audio: clip.audio, frame: f });
            target_maps.push(&clip.masks[f]);
        }
        if use_sync {
            for _ in 0..s.sync_windows {
                let clip = clips[self.rng.random_range(0..clips.len())];
                let n = clip.masks.len();
                if n < T_V + 1 {
                    return Err(Error::invalid(format!("clip of {n} frames is too short for sync windows")));
                }
                let start = self.rng.random_range(0..=n - T_V);
                let r = self.reference_for(n, start..start + T_V);
                for f in start..start + T_V {
                    items.push(Item { pose: &clip.masks[f], reference: &clip.masks[r], audio: clip.audio, frame: f });
                    target_maps.push(&clip.masks[f]);
                }
                speech.extend(window_for_frame(&clip.audio.mel, start)?.segment);
            }
        }
        let logits = self.tsg.forward_items(&items)?;
        let target = targets(&target_maps)?;
        let seg = segmentation_loss(s.loss, &logits, &target, &self.weights)?;
        let (total, sync_value) = match (use_sync, expert) {
            (true, Some(expert)) => {
                let window_logits = logits.narrow(0, s.batch, s.sync_windows * T_V)?;
                let probs = candle_nn::ops::softmax(&window_logits, 1)?;
                // Straight-through: the expert scores the decoded one-hot masks,
                // gradients flow through the softmax.
                let probs = if s.sync_hard { (hard_one_hot(&window_logits)? - &probs)?.detach() + &probs } else { Ok(probs) }?;
                let sp = Tensor::from_vec(speech, (s.sync_windows, 1, WINDOW_ROWS, N_MELS), &Device::Cpu)?;
                let sync = soft_sync_loss(expert, &probs, &sp)?;
                let v = scalar(&sync)?;
                ((&seg + (sync * lambda_sync)?)?, v)
            }
            _ => (seg.clone(), 0.0),
        };
        let seg_value = scalar(&seg)?;
        let total_value = step(&mut self.opt, &total, MODULE, self.step)?;
        Ok(TsgLossReport { wce: seg_value, sync: sync_value, total: total_value })
    }
}

/// Two-phase training: segmentation only, then segmentation plus sync.
pub fn train_tsg(
    tsg: &Tsg,
    clips: &[TsgClip<'_>],
    expert: Option<&SyncExpert>,
    log: &mut MetricsLog,
) -> Result<TsgLossReport> {
    let s = tsg.settings.clone();
    let all: Vec<SegmentationMap> = clips.iter().flat_map(|c| c.masks.iter().cloned()).collect();
    let weights = compute_class_weights(&all, s.classes)?;
    let mut trainer = TsgTrainer::new(tsg, &weights)?;
    let mut last = TsgLossReport { wce: f64::NAN, sync: 0.0, total: f64::NAN };
    for i in 0..s.phase1_steps + s.phase2_steps {
        let phase = if i < s.phase1_steps { 1 } else { 2 };
        let lambda = if phase == 1 { 0.0 } else { s.lambda_sync };
        last = trainer.train_step(clips, expert, lambda)?;
        let it = trainer.steps_done();
        if it % s.eval_every == 0 || it == s.phase1_steps + s.phase2_steps {
            log.record(json!({
                "module": MODULE, "step": it, "phase": phase,
                "seg": last.wce, "sync": last.sync, "total": last.total,
            }))?;
        }
    }
    Ok(last)
}

/// Generates one mask per frame for `frames` frames of a clip.
///
/// `ground_truth` supplies the pose source in self-driven mode (and the first
/// frame in autoregressive mode); `reference` is the identity reference.
pub fn generate_sequence(
    tsg: &Tsg,
    ground_truth: &[SegmentationMap],
    reference: &SegmentationMap,
    audio: &TsgAudio,
    frames: usize,
    mode: PoseMode,
) -> Result<Vec<SegmentationMap>> {
    let last_start = crate::audio::window_start_row(frames as i64 - 3);
    if frames == 0 || audio.chunks.len() * CHUNK_FRAMES < frames || last_start >= audio.mel.num_frames() as i64 {
        return Err(Error::invalid(format!(
            "audio of {} mel rows does not cover {frames} frames",
            audio.mel.num_frames()
        )));
    }
    let needed = if mode == PoseMode::SelfDriven { frames } else { 1 };
    if ground_truth.len() < needed {
        return Err(Error::invalid(format!("{} pose frames for {frames} requested", ground_truth.len())));
    }
    match mode {
        PoseMode::SelfDriven => {
            let mut out = Vec::with_capacity(frames);
            for start in (0..frames).step_by(25) {
                let items: Vec<Item<'_>> = (start..(start + 25).min(frames))
                    .map(|f| Item { pose: &ground_truth[f], reference, audio, frame: f })
                    .collect();
                out.extend(decode_logits(&tsg.forward_items(&items)?)?);
            }
            Ok(out)
        }
        PoseMode::Autoregressive => {
            let mut out: Vec<SegmentationMap> = Vec::with_capacity(frames);
            for f in 0..frames {
                let pose = if f == 0 { &ground_truth[0] } else { &out[f - 1] };
                let item = [Item { pose, reference, audio, frame: f }];
                let m = decode_logits(&tsg.forward_items(&item)?)?.remove(0);
                out.push(m);
            }
            Ok(out)
        }
    }
}

/// Fraction of upper-half pixels where two maps agree.
pub fn upper_half_agreement(a: &SegmentationMap, b: &SegmentationMap) -> f64 {
    let (h, w) = (a.height(), a.width());
    let same = (0..h / 2).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| a.get(y, x) == b.get(y, x)).count();
    same as f64 / ((h / 2) * w) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_settings() -> TsgSettings {
        TsgSettings {
            resolution: 32,
            classes: 4,
            depth: 3,
            base_width: 8,
            d_local: 8,
            d_ctx: 8,
            ctx_inner: 8,
            context: ContextKind::Attention,
            loss: SegLoss::Wce,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            batch: 2,
            phase1_steps: 1,
            phase2_steps: 1,
            lambda_sync: 0.03,
            sync_windows: 1,
            sync_hard: true,
            eval_every: 1,
            seed: 3,
        }
    }

    #[test]
    fn shape_contract_and_determinism() {
        let tsg = Tsg::new(&tiny_settings()).unwrap();
        let dev = Device::Cpu;
        let pair = Tensor::zeros((2, 8, 32, 32), DType::F32, &dev).unwrap();
        let sp = SpeechEmbedding {
            local: Tensor::ones((2, 8), DType::F32, &dev).unwrap(),
            contextual: Tensor::zeros((2, 8), DType::F32, &dev).unwrap(),
        };
        let a = tsg.forward(&pair, &sp).unwrap();
        assert_eq!(a.dims(), &[2, 4, 32, 32]);
        let b = tsg.forward(&pair, &sp).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let bad = Tensor::zeros((1, 8, 16, 16), DType::F32, &dev).unwrap();
        assert!(tsg.forward(&bad, &sp).is_err());
    }

    #[test]
    fn construction_rejects_bad_resolution() {
        let mut s = tiny_settings();
        s.resolution = 36;
        assert!(Tsg::new(&s).is_err());
        assert!("focal".parse::<SegLoss>().is_err());
        assert_eq!("l1".parse::<SegLoss>().unwrap(), SegLoss::L1);
    }

    #[test]
    fn decode_is_argmax() {
        let v = vec![0.0f32, 5.0, 1.0, 0.0, 2.0, 3.0];
        let logits = Tensor::from_vec(v, (1, 3, 1, 2), &Device::Cpu).unwrap();
        let m = decode_logits(&logits).unwrap().remove(0);
        assert_eq!(m.labels(), &[2, 0]);
    }
}
