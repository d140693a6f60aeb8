//! Procedurally rendered talking faces with exact masks and matching audio.
//!
//! Each identity is a fixed 2-D layout of ellipses and bars (one shape
//! family per region) with its own colours. A per-frame articulation value
//! `a ∈ [0, 1]` opens the mouth and drops the jaw; the same value drives the
//! loudness, pitch and brightness of a harmonic tone, so the audio carries
//! what the lips do.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{self, MelExtractor, MelSpectrogram, SAMPLES_PER_FRAME, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::harness::config::Config;
use crate::mask::{frame_filename, ClassPalette, Region, SegmentationMap, NUM_REGIONS};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PALETTE_FILE: &str = "palette.txt";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClipSpec {
    pub identity_seed: u64,
    pub num_frames: usize,
    pub articulation: Vec<f32>,
    pub resolution: usize,
}

impl SyntheticClipSpec {
    /// A spec whose articulation is a syllable-like track drawn from the identity seed.
    pub fn speaking(identity_seed: u64, num_frames: usize, resolution: usize) -> Self {
        Self {
            identity_seed,
            num_frames,
            articulation: articulation_track(identity_seed ^ 0x5eed_a11c, num_frames),
            resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(Error::invalid(format!("resolution {} must be a positive multiple of 16", self.resolution)));
        }
        if self.num_frames < 2 {
            return Err(Error::invalid("a clip needs at least 2 frames"));
        }
        if self.articulation.len() != self.num_frames {
            return Err(Error::invalid(format!(
                "articulation has {} values for {} frames",
                self.articulation.len(),
                self.num_frames
            )));
        }
        if let Some(a) = self.articulation.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid(format!("articulation value {a} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Syllables of 4–9 frames with random peaks, separated by occasional pauses.
pub fn articulation_track(seed: u64, num_frames: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_frames);
    while out.len() < num_frames {
        if rng.random::<f32>() < 0.15 {
            let pause = rng.random_range(3..10);
            out.extend(std::iter::repeat_n(0.0, pause));
            continue;
        }
        let len = rng.random_range(4..10);
        let peak: f32 = rng.random_range(0.3..1.0);
        for i in 0..len {
            let phase = (i as f32 + 0.5) / len as f32;
            out.push(peak * (PI * phase).sin().powi(2));
        }
    }
    out.truncate(num_frames);
    out
}

/// Geometry (in units of a 64-pixel canvas) and colours of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    cx: f32,
    cy: f32,
    face_rx: f32,
    face_ry: f32,
    hair_ry: f32,
    hair_rx: f32,
    hair_cy: f32,
    fringe_y: f32,
    neck_hw: f32,
    brow_y: f32,
    brow_dx: f32,
    brow_rx: f32,
    eye_y: f32,
    eye_rx: f32,
    eye_ry: f32,
    glasses: bool,
    nose_y: f32,
    mouth_y: f32,
    mouth_hw: f32,
    lip_upper: f32,
    lip_lower: f32,
    max_open: f32,
    colors: [[f32; 3]; NUM_REGIONS],
    teeth: [f32; 3],
    shade: f32,
    pitch: f32,
}

fn jitter(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    rng.random_range(lo..hi)
}

fn scale(c: [f32; 3], k: f32) -> [f32; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [jitter(rng, lo, hi), jitter(rng, lo, hi), jitter(rng, lo, hi)]
}

impl FaceParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut r;
        // Facial features straddle the stride-8 sampling grid (rows 16, 24,
        // 32, 40, 48; columns 16, 24, 32, 40, 48) so the coarsest pooled
        // encoder scale still sees brows, eyes, nose, ears and both lips.
        let cx = 32.5 + jitter(rng, -0.4, 0.4);
        let cy = 30.0 + jitter(rng, -0.5, 0.5);
        let face_rx = jitter(rng, 13.5, 15.2);
        let face_ry = jitter(rng, 22.0, 24.0);
        let brow_y = 16.5 + jitter(rng, -0.2, 0.2);
        let eye_y = 24.5 + jitter(rng, -0.3, 0.3);
        let t = jitter(rng, 0.0, 1.0);
        let skin = [0.95 - 0.5 * t, 0.78 - 0.45 * t, 0.66 - 0.42 * t];
        let hair = random_color(rng, 0.05, 0.85);
        let lips = [jitter(rng, 0.55, 0.85), jitter(rng, 0.15, 0.35), jitter(rng, 0.2, 0.4)];
        let mut colors = [[0f32; 3]; NUM_REGIONS];
        colors[Region::Background.id() as usize] = random_color(rng, 0.15, 0.95);
        colors[Region::Skin.id() as usize] = skin;
        colors[Region::Brow.id() as usize] = scale(hair, 0.6);
        colors[Region::Eye.id() as usize] = random_color(rng, 0.05, 0.35);
        colors[Region::Glasses.id() as usize] = random_color(rng, 0.0, 0.6);
        colors[Region::Ear.id() as usize] = scale(skin, 0.9);
        colors[Region::Nose.id() as usize] = scale(skin, 0.85);
        colors[Region::InnerMouth.id() as usize] = [jitter(rng, 0.2, 0.4), 0.05, jitter(rng, 0.05, 0.15)];
        colors[Region::UpperLip.id() as usize] = lips;
        colors[Region::LowerLip.id() as usize] = scale(lips, 1.15);
        colors[Region::Neck.id() as usize] = scale(skin, 0.8);
        colors[Region::Hair.id() as usize] = hair;

        Self {
            cx,
            cy,
            face_rx,
            face_ry,
            hair_rx: face_rx + jitter(rng, 2.0, 5.0),
            hair_ry: face_ry * 0.8 + jitter(rng, 0.0, 3.0),
            hair_cy: cy - face_ry * 0.3,
            fringe_y: jitter(rng, 10.0, 13.5),
            neck_hw: jitter(rng, 6.0, 9.0),
            brow_y,
            brow_dx: 8.0 + jitter(rng, -0.3, 0.3),
            brow_rx: jitter(rng, 4.0, 5.5),
            eye_y,
            eye_rx: jitter(rng, 3.0, 4.0),
            eye_ry: jitter(rng, 1.6, 2.3),
            glasses: rng.random::<f32>() < 0.5,
            nose_y: eye_y + jitter(rng, 6.0, 7.5),
            mouth_y: 44.5 + jitter(rng, -0.2, 0.3),
            mouth_hw: jitter(rng, 6.5, 8.5),
            lip_upper: jitter(rng, 4.4, 5.0),
            lip_lower: jitter(rng, 4.4, 5.0),
            max_open: jitter(rng, 5.0, 6.5),
            colors,
            teeth: [0.93, 0.92, 0.86],
            shade: jitter(rng, 0.04, 0.1),
            pitch: jitter(rng, 100.0, 180.0),
        }
    }

    pub fn has_glasses(&self) -> bool {
        self.glasses
    }

    /// Label of the pixel centred at `(x, y)` (64-canvas units) with mouth opening `open` pixels.
    fn label_at(&self, x: f32, y: f32, open: f32) -> (Region, bool) {
        let ell = |cx: f32, cy: f32, rx: f32, ry: f32| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0;
        let jaw = if y > self.cy { self.face_ry + open } else { self.face_ry };
        let in_face = ell(self.cx, self.cy, self.face_rx, jaw);

        // Mouth: upper lip above the mouth line, lower lip below it, an inner
        // opening between them whose lower edge drops with the jaw.
        let u = (x - self.cx) / self.mouth_hw;
        if u.abs() < 1.0 {
            let profile = (1.0 - u * u).sqrt();
            let top = self.mouth_y - self.lip_upper * profile;
            let inner_bottom = self.mouth_y + open * profile;
            let bottom = inner_bottom + self.lip_lower * profile;
            if y >= top && y < bottom {
                if open > 0.0 && y >= self.mouth_y && y < inner_bottom {
                    let teeth = y < self.mouth_y + 1.0 && u.abs() < 0.7;
                    return (Region::InnerMouth, teeth);
                }
                return (if y < self.mouth_y { Region::UpperLip } else { Region::LowerLip }, false);
            }
        }
        if in_face {
            if y < self.fringe_y {
                return (Region::Hair, false);
            }
            for side in [-1.0, 1.0] {
                let ex = self.cx + side * self.brow_dx;
                if ell(ex, self.eye_y, self.eye_rx, self.eye_ry) {
                    return (Region::Eye, false);
                }
                if self.glasses {
                    let (hx, hy) = (self.eye_rx + 2.5, self.eye_ry + 2.5);
                    let (dx, dy) = ((x - ex).abs(), (y - self.eye_y).abs());
                    if dx < hx && dy < hy && (dx >= hx - 1.0 || dy >= hy - 1.0) {
                        return (Region::Glasses, false);
                    }
                }
                if ell(ex, self.brow_y, self.brow_rx, 1.3) {
                    return (Region::Brow, false);
                }
            }
            if self.glasses && (y - self.eye_y).abs() < 0.5 && (x - self.cx).abs() < self.brow_dx - self.eye_rx - 2.0 {
                return (Region::Glasses, false);
            }
            let nose_h = 4.0;
            if y >= self.nose_y - nose_h && y < self.nose_y + nose_h {
                let half = 1.0 + 1.8 * (y - (self.nose_y - nose_h)) / (2.0 * nose_h);
                if (x - self.cx).abs() < half {
                    return (Region::Nose, false);
                }
            }
            return (Region::Skin, false);
        }
        for side in [-1.0, 1.0] {
            if ell(self.cx + side * self.face_rx, self.cy + 1.0, 3.5, 4.5) {
                return (Region::Ear, false);
            }
        }
        if ell(self.cx, self.hair_cy, self.hair_rx, self.hair_ry) {
            return (Region::Hair, false);
        }
        if y > self.cy + self.face_ry * 0.6 && (x - self.cx).abs() < self.neck_hw {
            return (Region::Neck, false);
        }
        (Region::Background, false)
    }

    /// Renders one frame and its exact mask.
    pub fn render(&self, articulation: f32, resolution: usize) -> (RgbFrame, SegmentationMap) {
        let s = 64.0 / resolution as f32;
        let open = articulation.clamp(0.0, 1.0) * self.max_open;
        let plane = resolution * resolution;
        let mut labels = vec![0u8; plane];
        let mut data = vec![0f32; 3 * plane];
        for py in 0..resolution {
            let y = (py as f32 + 0.5) * s;
            let light = 1.0 + self.shade * (0.5 - y / 64.0);
            for px in 0..resolution {
                let x = (px as f32 + 0.5) * s;
                let (region, teeth) = self.label_at(x, y, open);
                let p = py * resolution + px;
                labels[p] = region.id();
                let base = if teeth { self.teeth } else { self.colors[region.id() as usize] };
                for c in 0..3 {
                    data[c * plane + p] = (base[c] * light).clamp(0.0, 1.0);
                }
            }
        }
        let frame = RgbFrame::new(resolution, resolution, data).expect("sized buffer").quantized();
        let mask = SegmentationMap::new(resolution, resolution, NUM_REGIONS, labels).expect("labels < C");
        (frame, mask)
    }
}

/// Harmonic tone plus breath noise whose loudness, pitch and brightness follow
/// the articulation.
pub fn synthesize_audio(face: &FaceParams, articulation: &[f32], noise_seed: u64) -> Vec<f32> {
    let n = articulation.len() * SAMPLES_PER_FRAME;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0f32, 0.003).expect("valid sigma");
    let sr = SAMPLE_RATE as f32;
    let mut phase = 0f32;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Articulation is defined at frame centres; interpolate linearly.
        let u = (i as f32 / SAMPLES_PER_FRAME as f32 - 0.5).max(0.0);
        let f = (u.floor() as usize).min(articulation.len() - 1);
        let g = (f + 1).min(articulation.len() - 1);
        let a = articulation[f] + (articulation[g] - articulation[f]) * (u - f as f32).min(1.0);
        let f0 = face.pitch * (1.0 + 0.5 * a);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        let amp = 0.02 * (3.0 * a).exp();
        let tilt = 1.6 - a;
        let mut v = 0f32;
        let mut norm = 0f32;
        for k in 1..=8 {
            let w = (k as f32).powf(-tilt);
            v += w * (k as f32 * phase).sin();
            norm += w;
        }
        // Breath noise follows the tone's loudness so every mel band tracks it.
        let breath = 0.3 * (2.0 * rng.random::<f32>() - 1.0);
        out.push(amp * (v / norm + breath) + noise.sample(&mut rng));
    }
    audio::quantize_pcm16(&out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub name: String,
    pub identity_seed: u64,
    pub split: Split,
    pub articulation: Vec<f32>,
    pub frames: Vec<RgbFrame>,
    pub masks: Vec<SegmentationMap>,
    pub audio: Vec<f32>,
    pub mel: MelSpectrogram,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn render(name: String, spec: &SyntheticClipSpec, split: Split, extractor: &MelExtractor) -> Result<Self> {
        spec.validate()?;
        let face = FaceParams::from_seed(spec.identity_seed);
        let (frames, masks) = spec.articulation.iter().map(|&a| face.render(a, spec.resolution)).unzip();
        let audio = synthesize_audio(&face, &spec.articulation, spec.identity_seed.wrapping_add(1));
        let mel = extractor.compute(&audio, SAMPLE_RATE)?;
        Ok(Self {
            name,
            identity_seed: spec.identity_seed,
            split,
            articulation: spec.articulation.clone(),
            frames,
            masks,
            audio,
            mel,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    pub identity_seed: u64,
    pub num_frames: usize,
    pub split: Split,
    pub frames_dir: String,
    pub masks_dir: String,
    pub wav: String,
    pub mel: String,
    pub articulation: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub classes: usize,
    pub palette_hash: String,
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSettings {
    pub identities: usize,
    pub frames: usize,
    pub test_clips: usize,
    pub seed: u64,
    pub resolution: usize,
    pub log_floor: f32,
}

impl CorpusSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            identities: cfg.usize("corpus.identities")?,
            frames: cfg.usize("corpus.frames")?,
            test_clips: cfg.usize("corpus.test_clips")?,
            seed: cfg.u64("corpus.seed")?,
            resolution: cfg.usize("resolution")?,
            log_floor: cfg.float("audio.log_floor")? as f32,
        })
    }

    pub fn specs(&self) -> Vec<SyntheticClipSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.identities)
            .map(|_| SyntheticClipSpec::speaking(rng.random(), self.frames, self.resolution))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub resolution: usize,
    pub clips: Vec<Clip>,
}

impl Corpus {
    /// Renders all clips (one thread per clip); the last `test_clips` are held out.
    pub fn synthesize(settings: &CorpusSettings) -> Result<Self> {
        if settings.test_clips >= settings.identities {
            return Err(Error::invalid(format!(
                "{} test clips leave no training clips out of {}",
                settings.test_clips, settings.identities
            )));
        }
        let specs = settings.specs();
        let extractor = MelExtractor::new(settings.log_floor);
        let first_test = settings.identities - settings.test_clips;
        let clips = std::thread::scope(|scope| {
            let handles: Vec<_> = specs
                .iter()
                .enumerate()
                .map(|(i, spec)| {
                    let extractor = &extractor;
                    scope.spawn(move || {
                        let split = if i >= first_test { Split::Test } else { Split::Train };
                        Clip::render(format!("clip_{i:03}"), spec, split, extractor)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("render thread panicked")).collect::<Result<Vec<_>>>()
        })?;
        Ok(Self { seed: settings.seed, resolution: settings.resolution, clips })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Clip)> {
        self.clips.iter().enumerate().filter(move |(_, c)| c.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.split(split).map(|(i, _)| i).collect()
    }

    pub fn manifest(&self, palette: &ClassPalette) -> CorpusManifest {
        CorpusManifest {
            version: MANIFEST_VERSION,
            seed: self.seed,
            resolution: self.resolution,
            classes: palette.num_classes(),
            palette_hash: palette.hash(),
            clips: self
                .clips
                .iter()
                .map(|c| ClipEntry {
                    name: c.name.clone(),
                    identity_seed: c.identity_seed,
                    num_frames: c.len(),
                    split: c.split,
                    frames_dir: format!("{}/frames", c.name),
                    masks_dir: format!("{}/masks", c.name),
                    wav: format!("{}/audio.wav", c.name),
                    mel: format!("{}/audio.mel", c.name),
                    articulation: c.articulation.clone(),
                })
                .collect(),
        }
    }

    /// Writes frames, masks, WAVs, mel caches, the palette and the manifest.
    pub fn write(&self, dir: impl AsRef<Path>, palette: &ClassPalette) -> Result<CorpusManifest> {
        let dir = dir.as_ref();
        let manifest = self.manifest(palette);
        for (clip, entry) in self.clips.iter().zip(&manifest.clips) {
            let frames_dir = dir.join(&entry.frames_dir);
            let masks_dir = dir.join(&entry.masks_dir);
            std::fs::create_dir_all(&frames_dir)?;
            std::fs::create_dir_all(&masks_dir)?;
            for (i, (f, m)) in clip.frames.iter().zip(&clip.masks).enumerate() {
                f.save_png(frames_dir.join(frame_filename(i)))?;
                m.save_png(masks_dir.join(frame_filename(i)))?;
            }
            audio::write_wav(dir.join(&entry.wav), &clip.audio)?;
            clip.mel.write_cache(dir.join(&entry.mel))?;
        }
        std::fs::write(dir.join(PALETTE_FILE), palette.to_manifest())?;
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(manifest)
    }

    /// Loads a corpus written by [`Corpus::write`], checking the palette hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ClassPalette)> {
        let dir = dir.as_ref();
        let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!("unsupported corpus manifest version {}", manifest.version)));
        }
        let palette = ClassPalette::from_manifest(&std::fs::read_to_string(dir.join(PALETTE_FILE))?)?;
        if palette.hash() != manifest.palette_hash {
            return Err(Error::invalid(format!(
                "palette hash {} does not match manifest {}",
                palette.hash(),
                manifest.palette_hash
            )));
        }
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for e in &manifest.clips {
            let frames = load_frames(&dir.join(&e.frames_dir), e.num_frames)?;
            let masks = load_masks(&dir.join(&e.masks_dir), e.num_frames, manifest.classes)?;
            let (audio, sr) = audio::read_wav(dir.join(&e.wav))?;
            if sr != SAMPLE_RATE {
                return Err(Error::invalid(format!("{}: sample rate {sr}, expected {SAMPLE_RATE}", e.wav)));
            }
            let mel = MelSpectrogram::read_cache(dir.join(&e.mel))?;
            clips.push(Clip {
                name: e.name.clone(),
                identity_seed: e.identity_seed,
                split: e.split,
                articulation: e.articulation.clone(),
                frames,
                masks,
                audio,
                mel,
            });
        }
        Ok((Self { seed: manifest.seed, resolution: manifest.resolution, clips }, palette))
    }
}

fn frame_paths(dir: &Path, count: usize) -> Vec<PathBuf> {
    (0..count).map(|i| dir.join(frame_filename(i))).collect()
}

pub fn load_frames(dir: &Path, count: usize) -> Result<Vec<RgbFrame>> {
    frame_paths(dir, count).iter().map(RgbFrame::load_png).collect()
}

pub fn load_masks(dir: &Path, count: usize, classes: usize) -> Result<Vec<SegmentationMap>> {
    frame_paths(dir, count).iter().map(|p| SegmentationMap::load_png(p, classes)).collect()
}

/// Number of consecutively named `frame_NNNNN.png` files in a directory.
pub fn count_frames(dir: &Path) -> usize {
    (0..).take_while(|&i| dir.join(frame_filename(i)).is_file()).count()
}

/// Mean vertical extent of the mouth over the columns it spans, in pixels.
pub fn mouth_height(mask: &SegmentationMap) -> f64 {
    let mouth: Vec<u8> = Region::MOUTH.iter().map(|r| r.id()).collect();
    match mask.bbox_of(&mouth) {
        Some((_, x0, _, x1)) => {
            let area: usize = (x0..=x1)
                .map(|x| (0..mask.height()).filter(|&y| mouth.contains(&mask.get(y, x))).count())
                .sum();
            area as f64 / (x1 - x0 + 1) as f64
        }
        None => 0.0,
    }
}
