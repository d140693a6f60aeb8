//! Speech features: log-mel spectrograms, per-video-frame mel windows, and
//! the contextual embedding provider that supplies long-range features.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use candle_core::{Tensor, D};
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP_SAMPLES: usize = 200;
pub const WINDOW_SAMPLES: usize = 800;
pub const N_MELS: usize = 80;
pub const VIDEO_FPS: usize = 25;
/// Audio samples per video frame.
pub const SAMPLES_PER_FRAME: usize = SAMPLE_RATE as usize / VIDEO_FPS;
/// Mel rows in a 0.2 s window.
pub const WINDOW_ROWS: usize = 16;
/// Video frames per 3 s contextual chunk.
pub const CHUNK_FRAMES: usize = 75;
pub const CHUNK_SAMPLES: usize = 3 * SAMPLE_RATE as usize;
pub const DEFAULT_LOG_FLOOR: f32 = 1e-5;

/// `T × 80` natural-log mel energies at a 12.5 ms hop.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<f32>,
    num_frames: usize,
}

impl MelSpectrogram {
    pub fn from_rows(num_frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != num_frames * N_MELS {
            return Err(Error::invalid(format!(
                "mel buffer of {} values does not hold {num_frames} x {N_MELS}",
                data.len()
            )));
        }
        Ok(Self { data, num_frames })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    /// Little-endian `f32` payload behind an 8-byte `(T, 80)` header.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + self.data.len() * 4);
        buf.extend((self.num_frames as u32).to_le_bytes());
        buf.extend((N_MELS as u32).to_le_bytes());
        for v in &self.data {
            buf.extend(v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 8 {
            return Err(Error::invalid("mel cache shorter than its header"));
        }
        let t = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let bins = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        if bins != N_MELS || buf.len() != 8 + t * bins * 4 {
            return Err(Error::invalid(format!("mel cache header ({t}, {bins}) does not match payload")));
        }
        let data = buf[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_rows(t, data)
    }
}

/// Number of mel rows produced for `num_samples` input samples.
pub fn mel_frame_count(num_samples: usize) -> usize {
    if num_samples < WINDOW_SAMPLES {
        0
    } else {
        (num_samples - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let logstep = 6.4f64.ln() / 27.0;
    if f < min_log_hz {
        f / f_sp
    } else {
        min_log_hz / f_sp + (f / min_log_hz).ln() / logstep
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_mel = 1000.0 / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m < min_log_mel {
        m * f_sp
    } else {
        1000.0 * ((m - min_log_mel) * logstep).exp()
    }
}

/// Slaney-style triangular filters with area normalisation, `N_MELS × (n_fft/2+1)`.
fn mel_filterbank(n_fft: usize) -> Vec<f32> {
    let bins = n_fft / 2 + 1;
    let sr = SAMPLE_RATE as f64;
    let (mlo, mhi) = (hz_to_mel(0.0), hz_to_mel(sr / 2.0));
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut w = vec![0f32; N_MELS * bins];
    for m in 0..N_MELS {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..bins {
            let f = k as f64 * sr / n_fft as f64;
            let v = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0);
            w[m * bins + k] = (v * norm) as f32;
        }
    }
    w
}

/// Reusable mel extractor (periodic Hann window, magnitude spectrum).
pub struct MelExtractor {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filters: Vec<f32>,
    log_floor: f32,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_LOG_FLOOR)
    }
}

impl MelExtractor {
    pub fn new(log_floor: f32) -> Self {
        let n = WINDOW_SAMPLES;
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        Self { fft: FftPlanner::new().plan_fft_forward(n), window, filters: mel_filterbank(n), log_floor }
    }

    pub fn log_floor(&self) -> f32 {
        self.log_floor
    }

    pub fn compute(&self, waveform: &[f32], sample_rate: u32) -> Result<MelSpectrogram> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!("expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")));
        }
        if waveform.len() < WINDOW_SAMPLES {
            return Err(Error::invalid(format!(
                "{} samples is shorter than one {WINDOW_SAMPLES}-sample window",
                waveform.len()
            )));
        }
        let frames = mel_frame_count(waveform.len());
        let bins = WINDOW_SAMPLES / 2 + 1;
        let floor_log = self.log_floor.ln();
        let mut data = Vec::with_capacity(frames * N_MELS);
        let mut buf = vec![Complex32::new(0.0, 0.0); WINDOW_SAMPLES];
        let mut mag = vec![0f32; bins];
        for t in 0..frames {
            let start = t * HOP_SAMPLES;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex32::new(waveform[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, m) in mag.iter_mut().enumerate() {
                *m = buf[k].norm();
            }
            for m in 0..N_MELS {
                let filt = &self.filters[m * bins..(m + 1) * bins];
                let e: f32 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
                data.push(if e > self.log_floor { e.ln() } else { floor_log });
            }
        }
        MelSpectrogram::from_rows(frames, data)
    }
}

pub fn compute_mel(waveform: &[f32], sample_rate: u32) -> Result<MelSpectrogram> {
    MelExtractor::default().compute(waveform, sample_rate)
}

/// 16 mel rows (0.2 s) for one video-frame position.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    pub segment: Vec<f32>,
    pub start_row: i64,
    /// Frame whose centre coincides with the window centre.
    pub center_video_frame: i64,
    pub padded: bool,
}

/// `round_half_up(frame × 3.2)`, in exact integer arithmetic.
pub fn window_start_row(frame: i64) -> i64 {
    (32 * frame + 5).div_euclid(10)
}

fn slice_rows(mel: &MelSpectrogram, start: i64) -> (Vec<f32>, bool) {
    let mut segment = vec![0f32; WINDOW_ROWS * N_MELS];
    let mut padded = false;
    for r in 0..WINDOW_ROWS {
        let row = start + r as i64;
        if row >= 0 && (row as usize) < mel.num_frames() {
            segment[r * N_MELS..(r + 1) * N_MELS].copy_from_slice(mel.row(row as usize));
        } else {
            padded = true;
        }
    }
    (segment, padded)
}

/// Window starting at row `round(frame × 3.2)`: the speech for the five-frame
/// span `[frame, frame + 5)`, centred on frame `frame + 2`. A tail that runs
/// past the spectrogram is zero-filled and flagged.
pub fn window_for_frame(mel: &MelSpectrogram, frame: usize) -> Result<AudioWindow> {
    let start = window_start_row(frame as i64);
    if start as usize >= mel.num_frames() {
        return Err(Error::invalid(format!(
            "window for frame {frame} starts at mel row {start}, past the last row {}",
            mel.num_frames().saturating_sub(1)
        )));
    }
    let (segment, padded) = slice_rows(mel, start);
    Ok(AudioWindow { segment, start_row: start, center_video_frame: frame as i64 + 2, padded })
}

/// Window centred on `frame` itself; rows before the clip start are zero-filled.
pub fn window_centered_on(mel: &MelSpectrogram, frame: usize) -> Result<AudioWindow> {
    let start = window_start_row(frame as i64 - 2);
    if start >= mel.num_frames() as i64 {
        return Err(Error::invalid(format!("frame {frame} lies beyond the spectrogram")));
    }
    let (segment, padded) = slice_rows(mel, start);
    Ok(AudioWindow { segment, start_row: start, center_video_frame: frame as i64, padded })
}

/// Number of whole video frames covered by `num_samples` of audio.
pub fn video_frames_for(num_samples: usize) -> usize {
    num_samples / SAMPLES_PER_FRAME
}

/// Per-video-frame mel summaries of one zero-padded 3 s chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSummary {
    /// `75 × 80`, row-major.
    pub frames: Vec<f32>,
    pub padded: Vec<bool>,
}

/// Splits a waveform into 3 s chunks (the last one zero-padded) and
/// summarises each chunk as one 80-d mel vector per video frame.
pub fn chunk_summaries(extractor: &MelExtractor, waveform: &[f32]) -> Result<Vec<ChunkSummary>> {
    let chunks = waveform.len().div_ceil(CHUNK_SAMPLES).max(1);
    (0..chunks)
        .map(|c| {
            let start = c * CHUNK_SAMPLES;
            let end = (start + CHUNK_SAMPLES).min(waveform.len());
            summarize_chunk(extractor, &waveform[start.min(end)..end])
        })
        .collect()
}

/// Summarises a chunk of at most 3 s; shorter input is zero-padded.
pub fn summarize_chunk(extractor: &MelExtractor, chunk: &[f32]) -> Result<ChunkSummary> {
    if chunk.len() > CHUNK_SAMPLES {
        return Err(Error::invalid(format!("chunk of {} samples exceeds 3 s", chunk.len())));
    }
    let mut padded_wave = chunk.to_vec();
    padded_wave.resize(CHUNK_SAMPLES, 0.0);
    let mel = extractor.compute(&padded_wave, SAMPLE_RATE)?;
    let t = mel.num_frames();
    let mut frames = Vec::with_capacity(CHUNK_FRAMES * N_MELS);
    let mut padded = Vec::with_capacity(CHUNK_FRAMES);
    for k in 0..CHUNK_FRAMES {
        let s = window_start_row(k as i64) as usize;
        let (lo, hi) = (s.saturating_sub(2), (s + 2).min(t));
        for m in 0..N_MELS {
            let sum: f32 = (lo..hi).map(|r| mel.row(r)[m]).sum();
            frames.push(sum / (hi - lo) as f32);
        }
        padded.push(k * SAMPLES_PER_FRAME >= chunk.len());
    }
    Ok(ChunkSummary { frames, padded })
}

/// Long-range speech context: per-video-frame feature vectors for a 3 s chunk.
pub trait ContextualEmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// `[B, 75, 80]` chunk summaries to `[B, 75, dim]` features.
    fn forward(&self, summaries: &Tensor) -> candle_core::Result<Tensor>;
}

/// Features for one waveform chunk (up to 3 s) with per-frame padding flags.
#[derive(Debug, Clone)]
pub struct ContextualFeatures {
    pub vectors: Vec<Vec<f32>>,
    pub padded: Vec<bool>,
}

pub fn contextual_features(
    provider: &dyn ContextualEmbeddingProvider,
    extractor: &MelExtractor,
    chunk: &[f32],
) -> Result<ContextualFeatures> {
    let summary = summarize_chunk(extractor, chunk)?;
    let dev = candle_core::Device::Cpu;
    let x = Tensor::from_vec(summary.frames, (1, CHUNK_FRAMES, N_MELS), &dev)?;
    let y = provider.forward(&x)?.squeeze(0)?.to_dtype(candle_core::DType::F32)?;
    Ok(ContextualFeatures { vectors: y.to_vec2::<f32>()?, padded: summary.padded })
}

/// Centring applied to log-mel values before they enter a network.
pub fn normalize_mel(x: &Tensor) -> candle_core::Result<Tensor> {
    (x + 4.0)? / 4.0
}

/// Constant-zero provider; useful as an ablation and a shape oracle.
pub struct ZeroContext {
    pub dim: usize,
}

impl ContextualEmbeddingProvider for ZeroContext {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, summaries: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, _) = summaries.dims3()?;
        Tensor::zeros((b, t, self.dim), summaries.dtype(), summaries.device())
    }
}

/// Small trainable sequence encoder: per-frame projection, sinusoidal
/// positions, one single-head self-attention block and a feed-forward block
/// at a narrow inner width, then a projection to the output width.
pub struct AttentionContext {
    dim: usize,
    inner: usize,
    input: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ff1: Linear,
    ff2: Linear,
    proj: Linear,
    positions: Tensor,
}

impl AttentionContext {
    pub fn new(ps: &mut ParamStore, name: &str, inner: usize, dim: usize) -> crate::Result<Self> {
        let mut pos = vec![0f64; CHUNK_FRAMES * inner];
        for t in 0..CHUNK_FRAMES {
            for i in 0..inner {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / inner as f64);
                let a = t as f64 * rate;
                pos[t * inner + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
            }
        }
        let positions = Tensor::from_vec(pos, (1, CHUNK_FRAMES, inner), ps.device())?.to_dtype(ps.dtype())?;
        Ok(Self {
            dim,
            inner,
            input: Linear::new(ps, &format!("{name}.input"), N_MELS, inner)?,
            query: Linear::new(ps, &format!("{name}.query"), inner, inner)?,
            key: Linear::new(ps, &format!("{name}.key"), inner, inner)?,
            value: Linear::new(ps, &format!("{name}.value"), inner, inner)?,
            out: Linear::with_bias(ps, &format!("{name}.out"), inner, inner, 0.0)?,
            ff1: Linear::new(ps, &format!("{name}.ff1"), inner, inner)?,
            ff2: Linear::with_bias(ps, &format!("{name}.ff2"), inner, inner, 0.0)?,
            proj: Linear::new(ps, &format!("{name}.proj"), inner, dim)?,
            positions,
        })
    }
}

impl ContextualEmbeddingProvider for AttentionContext {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, summaries: &Tensor) -> candle_core::Result<Tensor> {
        let x = normalize_mel(summaries)?;
        let h = self.input.forward(&x)?.relu()?.broadcast_add(&self.positions)?;
        let q = self.query.forward(&h)?;
        let k = self.key.forward(&h)?;
        let v = self.value.forward(&h)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.inner as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?.matmul(&v)?;
        let h = (h + self.out.forward(&attn)?)?;
        let h = (&h + self.ff2.forward(&self.ff1.forward(&h)?.relu()?)?)?;
        self.proj.forward(&h)
    }
}

/// Reads 16-bit mono PCM.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::invalid(format!(
            "expected 16-bit mono PCM, got {} channel(s) at {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<f32>, _>>()?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Quantises samples the way a 16-bit WAV round trip does.
pub fn quantize_pcm16(samples: &[f32]) -> Vec<f32> {
    samples
        .iter()
        .map(|&s| (s.clamp(-1.0, 1.0) * 32767.0).round() / 32768.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    fn tone(n: usize) -> Vec<f32> {
        (0..n).map(|i| (i as f32 * 0.05).sin() * 0.3).collect()
    }

    #[test]
    fn frame_count_examples() {
        let mel = compute_mel(&tone(16_000), SAMPLE_RATE).unwrap();
        assert_eq!(mel.num_frames(), 77);
        assert_eq!(compute_mel(&tone(800), SAMPLE_RATE).unwrap().num_frames(), 1);
    }

    #[test]
    fn frame_count_formula_random_lengths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ex = MelExtractor::default();
        for _ in 0..100 {
            let n = rng.random_range(800..6000);
            let mel = ex.compute(&vec![0.01; n], SAMPLE_RATE).unwrap();
            assert_eq!(mel.num_frames(), (n - 800) / 200 + 1);
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let mel = compute_mel(&vec![0.0; 4000], SAMPLE_RATE).unwrap();
        assert!(mel.data().iter().all(|&v| v == DEFAULT_LOG_FLOOR.ln()));
    }

    #[test]
    fn rejects_bad_audio() {
        assert!(compute_mel(&tone(16_000), 22_050).is_err());
        assert!(compute_mel(&tone(799), SAMPLE_RATE).is_err());
    }

    #[test]
    fn tone_energy_lands_in_the_right_band() {
        // 1 kHz sine: strongest mel bin must sit near 1 kHz.
        let wave: Vec<f32> = (0..8000)
            .map(|i| (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 16000.0).sin())
            .collect();
        let mel = compute_mel(&wave, SAMPLE_RATE).unwrap();
        let row = mel.row(3);
        let best = (0..N_MELS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let centre = mel_to_hz(hz_to_mel(0.0) + (hz_to_mel(8000.0) - hz_to_mel(0.0)) * (best + 1) as f64 / 81.0);
        assert!((centre - 1000.0).abs() < 150.0, "peak at {centre} Hz");
    }

    fn ramp_mel(rows: usize) -> MelSpectrogram {
        MelSpectrogram::from_rows(rows, (0..rows * N_MELS).map(|i| (i / N_MELS) as f32 + 1.0).collect()).unwrap()
    }

    #[test]
    fn window_positions() {
        let mel = ramp_mel(100);
        let w0 = window_for_frame(&mel, 0).unwrap();
        assert_eq!((w0.start_row, w0.padded), (0, false));
        assert_eq!(w0.segment[0], 1.0);
        let w10 = window_for_frame(&mel, 10).unwrap();
        assert_eq!(w10.start_row, 32);
        assert_eq!(w10.segment[15 * N_MELS], 48.0);
    }

    #[test]
    fn window_tail_padding() {
        let mel = ramp_mel(42);
        // frame 10 starts at row 32 and only 10 rows remain
        let w = window_for_frame(&mel, 10).unwrap();
        assert!(w.padded);
        assert_eq!(w.segment[9 * N_MELS], 42.0);
        assert!(w.segment[10 * N_MELS..].iter().all(|&v| v == 0.0));
        assert!(window_for_frame(&mel, 14).is_err());
    }

    #[test]
    fn windows_track_video_time() {
        // 10 s clip: consecutive starts advance by 3 or 4 rows and the
        // window centre stays within one hop of its video frame centre.
        let mel = ramp_mel(mel_frame_count(160_000));
        let hop_s = HOP_SAMPLES as f64 / SAMPLE_RATE as f64;
        for f in 0..245 {
            let w = window_for_frame(&mel, f).unwrap();
            let centre = (w.start_row as f64 + WINDOW_ROWS as f64 / 2.0) * hop_s;
            let frame_centre = (w.center_video_frame as f64 + 0.5) / VIDEO_FPS as f64;
            assert!((centre - frame_centre).abs() < hop_s, "frame {f}");
            if f > 0 {
                let d = w.start_row - window_for_frame(&mel, f - 1).unwrap().start_row;
                assert!(d == 3 || d == 4);
            }
        }
    }

    #[test]
    fn centred_window_pads_the_front() {
        let mel = ramp_mel(100);
        let w = window_centered_on(&mel, 0).unwrap();
        assert!(w.padded && w.start_row < 0);
        assert_eq!(w.start_row, window_start_row(-2));
        assert_eq!(window_centered_on(&mel, 10).unwrap().start_row, window_for_frame(&mel, 8).unwrap().start_row);
    }

    #[test]
    fn mel_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mel = compute_mel(&tone(4000), SAMPLE_RATE).unwrap();
        let path = dir.path().join("a.mel");
        mel.write_cache(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], &(mel.num_frames() as u32).to_le_bytes());
        assert_eq!(&bytes[4..8], &80u32.to_le_bytes());
        assert_eq!(MelSpectrogram::read_cache(&path).unwrap(), mel);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let wave = tone(1600);
        write_wav(&path, &wave).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, SAMPLE_RATE);
        assert_eq!(back, quantize_pcm16(&wave));
    }

    fn provider() -> AttentionContext {
        let mut ps = ParamStore::new(5, DType::F32);
        AttentionContext::new(&mut ps, "ctx", 8, 16).unwrap()
    }

    #[test]
    fn contextual_lengths_and_padding() {
        let ex = MelExtractor::default();
        let p = provider();
        let full = contextual_features(&p, &ex, &tone(CHUNK_SAMPLES)).unwrap();
        assert_eq!(full.vectors.len(), 75);
        assert!(full.padded.iter().all(|&f| !f));
        let short = contextual_features(&p, &ex, &tone(16_000)).unwrap();
        assert_eq!(short.vectors.len(), 75);
        assert_eq!(short.padded.iter().filter(|&&f| f).count(), 50);
        assert!(short.padded[25..].iter().all(|&f| f));
        let again = contextual_features(&p, &ex, &tone(16_000)).unwrap();
        assert_eq!(short.vectors, again.vectors);
    }

    #[test]
    fn zero_provider_keeps_shapes() {
        let ex = MelExtractor::default();
        let real = contextual_features(&provider(), &ex, &tone(20_000)).unwrap();
        let zero = contextual_features(&ZeroContext { dim: 16 }, &ex, &tone(20_000)).unwrap();
        assert_eq!(real.vectors.len(), zero.vectors.len());
        assert_eq!(real.vectors[0].len(), zero.vectors[0].len());
        assert_eq!(real.padded, zero.padded);
        assert!(zero.vectors.iter().flatten().all(|&v| v == 0.0));
        let x = Tensor::zeros((2, 75, 80), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(provider().forward(&x).unwrap().dims(), &[2, 75, 16]);
    }

    #[test]
    fn chunking_covers_the_waveform() {
        let ex = MelExtractor::default();
        let chunks = chunk_summaries(&ex, &tone(CHUNK_SAMPLES + 16_000)).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[1].padded.iter().filter(|&&f| !f).count(), 25);
    }
}
