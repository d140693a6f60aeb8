//! Stage runners shared by the command-line verbs and the end-to-end loop.
//!
//! Every trained stage writes `checkpoints/<stage>-<hash>.ckpt`, where the
//! hash covers the config sections the stage depends on. A rerun finds the
//! checkpoint and skips training, so ablations that only touch the TSG
//! section reuse the expert and the texture generator.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{Checkpoint, Expect};
use super::config::Config;
use super::corpus::{Clip, Corpus, CorpusSettings, Split, MANIFEST_FILE};
use super::log::MetricsLog;
use crate::audio::MelExtractor;
use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::mask::{apply_edit, frame_filename, ClassPalette, EditKind, EditPayload, EditSpec, Region, SegmentationMap};
use crate::metrics::{
    frame_frechet, mouth_iou, mouth_miou, psnr, sequence_landmark_distance, ssim, sync_confidence, temporal_consistency,
    video_frechet, BlockMeanEmbedder, LandmarkScope, MetricRecord,
};
use crate::sgi::{code_similarity, reconstruction_psnr, swap_background, swap_region_codes, train_sgi, Sgi, SgiClip, SgiSettings, StyleCodes};
use crate::sync_expert::{train_expert, ExpertSettings, SyncExpert, SyncVideo};
use crate::tsg::{generate_sequence, train_tsg, upper_half_agreement, PoseMode, Tsg, TsgAudio, TsgClip, TsgSettings};

pub const EXPERT_SECTIONS: &[&str] = &["corpus.", "audio.", "sync."];
pub const TSG_SECTIONS: &[&str] = &["corpus.", "audio.", "sync.", "tsg.", "pipeline.no_syncnet"];
pub const SGI_SECTIONS: &[&str] = &["corpus.", "sgi."];

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint(&self, stage: &str, hash: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}-{hash}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn inference(&self, tag: &str) -> PathBuf {
        self.root.join("infer").join(tag)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.jsonl")
    }
}

/// A loaded corpus with everything the stages derive from it.
pub struct Dataset {
    pub corpus: Corpus,
    pub palette: ClassPalette,
    pub audio: Vec<TsgAudio>,
}

impl Dataset {
    pub fn new(corpus: Corpus, palette: ClassPalette, log_floor: f32) -> Result<Self> {
        let extractor = MelExtractor::new(log_floor);
        let audio =
            corpus.clips.iter().map(|c| TsgAudio::new(c.mel.clone(), &c.audio, &extractor)).collect::<Result<Vec<_>>>()?;
        Ok(Self { corpus, palette, audio })
    }

    pub fn clips(&self, split: Split) -> Vec<(usize, &Clip)> {
        self.corpus.split(split).collect()
    }

    fn sync_videos(&self, split: Split) -> Vec<SyncVideo<'_>> {
        self.corpus.split(split).map(|(_, c)| SyncVideo { masks: &c.masks, mel: &c.mel }).collect()
    }

    fn tsg_clips(&self, split: Split) -> Vec<TsgClip<'_>> {
        self.corpus.split(split).map(|(i, c)| TsgClip { masks: &c.masks, audio: &self.audio[i] }).collect()
    }

    /// Identity labels are positions within the split.
    fn sgi_clips(&self, split: Split) -> Vec<SgiClip<'_>> {
        self.corpus
            .split(split)
            .enumerate()
            .map(|(k, (_, c))| SgiClip { frames: &c.frames, masks: &c.masks, identity: k })
            .collect()
    }

    /// Training clips split in time: everything before the last `holdout`
    /// frames trains the generator, the tail is its held-out slice.
    fn sgi_frame_split(&self, holdout: usize) -> Result<(Vec<SgiClip<'_>>, Vec<SgiClip<'_>>)> {
        let mut fit = Vec::new();
        let mut tail = Vec::new();
        for (k, (_, c)) in self.corpus.split(Split::Train).enumerate() {
            let n = c.frames.len();
            if holdout == 0 || holdout >= n {
                return Err(Error::Config(format!("sgi.holdout_frames must be in 1..{n}, got {holdout}")));
            }
            let cut = n - holdout;
            fit.push(SgiClip { frames: &c.frames[..cut], masks: &c.masks[..cut], identity: k });
            tail.push(SgiClip { frames: &c.frames[cut..], masks: &c.masks[cut..], identity: k });
        }
        Ok((fit, tail))
    }
}

/// Synthesises the corpus into `dir`, or loads it if a matching one is there.
pub fn prepare_data(cfg: &Config, dir: &Path) -> Result<Dataset> {
    let settings = CorpusSettings::from_config(cfg)?;
    let palette = ClassPalette::default();
    if dir.join(MANIFEST_FILE).is_file() {
        let (corpus, loaded_palette) = Corpus::load(dir)?;
        let matches = corpus.seed == settings.seed
            && corpus.resolution == settings.resolution
            && corpus.clips.len() == settings.identities
            && corpus.clips.iter().all(|c| c.len() == settings.frames)
            && corpus.split(Split::Test).count() == settings.test_clips;
        if matches {
            log::info!("reusing corpus in {}", dir.display());
            return Dataset::new(corpus, loaded_palette, settings.log_floor);
        }
        log::info!("corpus in {} does not match the config; regenerating", dir.display());
    }
    let corpus = Corpus::synthesize(&settings)?;
    std::fs::create_dir_all(dir)?;
    corpus.write(dir, &palette)?;
    Dataset::new(corpus, palette, settings.log_floor)
}

/// What a stage did and how to find its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub resumed: bool,
    pub seconds: f64,
}

fn stage_error(stage: &str, hash: &str) -> impl FnOnce(Error) -> Error {
    let (stage, hash) = (stage.to_string(), hash.to_string());
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage, config_hash: hash, source: Box::new(other) },
    }
}

fn metadata_f64(ck: &Checkpoint, key: &str) -> Result<f64> {
    ck.header
        .metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks `{key}`", ck.header.module)))
}

/// Loads a stage checkpoint if one with the expected hashes exists.
fn resume(path: &Path, expect: Expect<'_>) -> Result<Option<Checkpoint>> {
    if !path.is_file() {
        return Ok(None);
    }
    Checkpoint::load_verified(path, expect).map(Some)
}

pub struct ExpertStage {
    pub expert: SyncExpert,
    pub accuracy: f64,
    pub outcome: StageOutcome,
}

pub fn expert_stage(cfg: &Config, data: &Dataset, layout: &RunLayout, log: &mut MetricsLog) -> Result<ExpertStage> {
    const STAGE: &str = "sync_expert";
    let hash = cfg.section_hash(EXPERT_SECTIONS);
    let mut run = || -> Result<ExpertStage> {
        let t = Instant::now();
        let path = layout.checkpoint(STAGE, &hash);
        let palette_hash = data.palette.hash();
        let expect = Expect { module: STAGE, config_hash: &hash, palette_hash: &palette_hash };
        let classes = cfg.usize("classes")?;
        let (expert, accuracy, resumed) = match resume(&path, expect)? {
            Some(ck) => (SyncExpert::from_checkpoint(&ck, expect, classes)?, metadata_f64(&ck, "accuracy")?, true),
            None => {
                let expert = SyncExpert::new(cfg.u64("seed")?, classes, cfg.usize("resolution")?)?;
                let settings = ExpertSettings::from_config(cfg)?;
                let report =
                    train_expert(&expert, &data.sync_videos(Split::Train), &data.sync_videos(Split::Test), &settings, log)?;
                let mut ck = expert.to_checkpoint(report.steps, &hash, &palette_hash)?;
                ck.header.metadata.insert("accuracy".into(), format!("{:?}", report.accuracy));
                ck.save(&path)?;
                (expert, report.accuracy, false)
            }
        };
        let outcome =
            StageOutcome { stage: STAGE.into(), config_hash: hash.clone(), checkpoint: path, resumed, seconds: t.elapsed().as_secs_f64() };
        Ok(ExpertStage { expert, accuracy, outcome })
    };
    run().map_err(stage_error(STAGE, &hash))
}

pub struct TsgStage {
    pub tsg: Tsg,
    pub outcome: StageOutcome,
}

/// Trains the segmentation generator; `pipeline.no_syncnet` drops the sync term.
pub fn tsg_stage(cfg: &Config, data: &Dataset, expert: &SyncExpert, layout: &RunLayout, log: &mut MetricsLog) -> Result<TsgStage> {
    const STAGE: &str = "tsg";
    let hash = cfg.section_hash(TSG_SECTIONS);
    let mut run = || -> Result<TsgStage> {
        let t = Instant::now();
        let path = layout.checkpoint(STAGE, &hash);
        let palette_hash = data.palette.hash();
        let expect = Expect { module: STAGE, config_hash: &hash, palette_hash: &palette_hash };
        let settings = TsgSettings::from_config(cfg)?;
        let (tsg, resumed) = match resume(&path, expect)? {
            Some(ck) => (Tsg::from_checkpoint(&ck, expect, &settings)?, true),
            None => {
                let tsg = Tsg::new(&settings)?;
                let use_expert = !cfg.bool("pipeline.no_syncnet")?;
                train_tsg(&tsg, &data.tsg_clips(Split::Train), use_expert.then_some(expert), log)?;
                tsg.to_checkpoint(settings.phase1_steps + settings.phase2_steps, &hash, &palette_hash)?.save(&path)?;
                (tsg, false)
            }
        };
        let outcome =
            StageOutcome { stage: STAGE.into(), config_hash: hash.clone(), checkpoint: path, resumed, seconds: t.elapsed().as_secs_f64() };
        Ok(TsgStage { tsg, outcome })
    };
    run().map_err(stage_error(STAGE, &hash))
}

pub struct SgiStage {
    pub sgi: Sgi,
    pub outcome: StageOutcome,
}

pub fn sgi_stage(cfg: &Config, data: &Dataset, layout: &RunLayout, log: &mut MetricsLog) -> Result<SgiStage> {
    const STAGE: &str = "sgi";
    let hash = cfg.section_hash(SGI_SECTIONS);
    let mut run = || -> Result<SgiStage> {
        let t = Instant::now();
        let path = layout.checkpoint(STAGE, &hash);
        let palette_hash = data.palette.hash();
        let expect = Expect { module: STAGE, config_hash: &hash, palette_hash: &palette_hash };
        let settings = SgiSettings::from_config(cfg)?;
        let (sgi, resumed) = match resume(&path, expect)? {
            Some(ck) => (Sgi::from_checkpoint(&ck, expect, &settings)?, true),
            None => {
                let sgi = Sgi::new(&settings)?;
                let (fit, tail) = data.sgi_frame_split(cfg.usize("sgi.holdout_frames")?)?;
                let report = train_sgi(&sgi, &fit, &tail, log)?;
                sgi.to_checkpoint(report.steps, &hash, &palette_hash)?.save(&path)?;
                (sgi, false)
            }
        };
        let outcome =
            StageOutcome { stage: STAGE.into(), config_hash: hash.clone(), checkpoint: path, resumed, seconds: t.elapsed().as_secs_f64() };
        Ok(SgiStage { sgi, outcome })
    };
    run().map_err(stage_error(STAGE, &hash))
}

/// Masks and frames generated for one clip.
#[derive(Debug, Clone)]
pub struct Inference {
    pub masks: Vec<SegmentationMap>,
    pub frames: Vec<RgbFrame>,
}

impl Inference {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let (md, fd) = (dir.join("masks"), dir.join("frames"));
        std::fs::create_dir_all(&md)?;
        std::fs::create_dir_all(&fd)?;
        for (i, (m, f)) in self.masks.iter().zip(&self.frames).enumerate() {
            m.save_png(md.join(frame_filename(i)))?;
            f.save_png(fd.join(frame_filename(i)))?;
        }
        Ok(())
    }
}

/// Self-driven generation: TSG masks from the clip's poses and speech, with
/// frame 0 as the identity reference for both structure and texture.
pub fn infer_clip(tsg: &Tsg, sgi: &Sgi, clip: &Clip, audio: &TsgAudio) -> Result<Inference> {
    let masks = generate_sequence(tsg, &clip.masks, &clip.masks[0], audio, clip.len(), PoseMode::SelfDriven)?;
    let codes = sgi.codes_for(&clip.frames[0], &clip.masks[0])?;
    let frames = sgi.render(&masks, &vec![codes; masks.len()])?;
    Ok(Inference { masks, frames })
}

/// Reference images an edit record can point at with `ref=<i>`.
pub struct EditReference {
    pub frame: RgbFrame,
    pub mask: SegmentationMap,
}

/// Applies edit records to a generated mask sequence and renders it.
///
/// Blinks rewrite the masks; texture swaps replace one region's codes with
/// those of a reference image; background swaps composite the reference
/// image behind the face. `background`, if given, is composited on every frame.
/// All records are checked before any frame is produced.
pub fn edit_session(
    sgi: &Sgi,
    masks: &[SegmentationMap],
    codes: &StyleCodes,
    specs: &[EditSpec],
    references: &[EditReference],
    background: Option<&RgbFrame>,
) -> Result<Vec<RgbFrame>> {
    let classes = sgi.settings().classes;
    for spec in specs {
        spec.validate(classes)?;
        match (spec.kind, &spec.payload) {
            (EditKind::Blink, EditPayload::Stencil(_)) => {}
            (EditKind::RegionTextureSwap | EditKind::BackgroundSwap, EditPayload::Reference(i)) if *i < references.len() => {}
            (EditKind::RegionTextureSwap | EditKind::BackgroundSwap, EditPayload::Reference(i)) => {
                return Err(Error::invalid(format!("edit refers to reference {i}, only {} supplied", references.len())))
            }
            (kind, _) => return Err(Error::invalid(format!("{} edits do not take that payload", kind.name()))),
        }
    }
    let ref_codes = references.iter().map(|r| sgi.codes_for(&r.frame, &r.mask)).collect::<Result<Vec<_>>>()?;
    let mut edited_masks = Vec::with_capacity(masks.len());
    let mut frame_codes = Vec::with_capacity(masks.len());
    for (f, mask) in masks.iter().enumerate() {
        let mut m = mask.clone();
        let mut c = codes.clone();
        for spec in specs.iter().filter(|s| s.applies_to(f)) {
            match (spec.kind, &spec.payload) {
                (EditKind::Blink, _) => m = apply_edit(&m, spec)?,
                (EditKind::RegionTextureSwap, EditPayload::Reference(i)) => {
                    c = swap_region_codes(&c, &ref_codes[*i], spec.region_id as usize)?
                }
                _ => {}
            }
        }
        edited_masks.push(m);
        frame_codes.push(c);
    }
    let mut frames = sgi.render(&edited_masks, &frame_codes)?;
    for (f, frame) in frames.iter_mut().enumerate() {
        if let Some(bg) = background {
            *frame = swap_background(frame, &edited_masks[f], bg)?;
        }
        for spec in specs.iter().filter(|s| s.kind == EditKind::BackgroundSwap && s.applies_to(f)) {
            if let EditPayload::Reference(i) = spec.payload {
                *frame = swap_background(frame, &edited_masks[f], &references[i].frame)?;
            }
        }
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub lmd_penalty: f64,
    pub fid_grid: usize,
    pub fvd_grid: usize,
    pub fvd_window: usize,
    pub similarity_frames: usize,
    pub psnr_frames: usize,
}

impl EvalSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            lmd_penalty: cfg.float("eval.lmd_penalty")?,
            fid_grid: cfg.usize("eval.fid_grid")?,
            fvd_grid: cfg.usize("eval.fvd_grid")?,
            fvd_window: cfg.usize("eval.fvd_window")?,
            similarity_frames: cfg.usize("eval.similarity_frames")?,
            psnr_frames: cfg.usize("sgi.eval_frames")?,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Every metric of a generated clip set against its ground truth.
pub fn evaluate(
    settings: &EvalSettings,
    expert: &SyncExpert,
    clips: &[(&Clip, &Inference)],
) -> Result<Vec<MetricRecord>> {
    if clips.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let (mut p, mut s, mut flmd, mut mlmd, mut conf, mut gt_conf) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    let (mut iou, mut miou, mut upper, mut tmean, mut tmax, mut tarea) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (clip, inf) in clips {
        if inf.masks.len() != clip.len() || inf.frames.len() != clip.len() {
            return Err(Error::invalid(format!("{}: {} generated frames for {}", clip.name, inf.frames.len(), clip.len())));
        }
        let per_frame = |f: &dyn Fn(&RgbFrame, &RgbFrame) -> Result<f64>| -> Result<f64> {
            Ok(mean(&inf.frames.iter().zip(&clip.frames).map(|(a, b)| f(a, b)).collect::<Result<Vec<_>>>()?))
        };
        p.push(per_frame(&|a, b| psnr(a, b, 1.0))?);
        s.push(per_frame(&|a, b| ssim(a, b, 1.0))?);
        flmd.push(sequence_landmark_distance(&inf.masks, &clip.masks, LandmarkScope::Face, settings.lmd_penalty)?);
        mlmd.push(sequence_landmark_distance(&inf.masks, &clip.masks, LandmarkScope::Mouth, settings.lmd_penalty)?);
        conf.push(sync_confidence(expert, &inf.masks, &clip.mel)?);
        gt_conf.push(sync_confidence(expert, &clip.masks, &clip.mel)?);
        iou.push(mouth_iou(&inf.masks, &clip.masks)?);
        miou.push(mouth_miou(&inf.masks, &clip.masks)?);
        upper.push(mean(&inf.masks.iter().zip(&clip.masks).map(|(a, b)| upper_half_agreement(a, b)).collect::<Vec<_>>()));
        let t = temporal_consistency(&inf.frames, Some(&inf.masks))?;
        tmean.push(t.mean_diff);
        tmax.push(t.max_diff);
        tarea.push(t.mouth_area_smoothness.unwrap_or(0.0));
    }
    let real: Vec<RgbFrame> = clips.iter().flat_map(|(c, _)| c.frames.iter().cloned()).collect();
    let fake: Vec<RgbFrame> = clips.iter().flat_map(|(_, i)| i.frames.iter().cloned()).collect();
    let fid = frame_frechet(&real, &fake, &BlockMeanEmbedder { grid: settings.fid_grid })?;
    let real_v: Vec<Vec<RgbFrame>> = clips.iter().map(|(c, _)| c.frames.clone()).collect();
    let fake_v: Vec<Vec<RgbFrame>> = clips.iter().map(|(_, i)| i.frames.clone()).collect();
    let fvd = video_frechet(&real_v, &fake_v, settings.fvd_window, &BlockMeanEmbedder { grid: settings.fvd_grid })?;
    Ok(vec![
        MetricRecord::new("psnr", "test", mean(&p)),
        MetricRecord::new("ssim", "test", mean(&s)),
        MetricRecord::new("lmd", "face", mean(&flmd)),
        MetricRecord::new("lmd", "mouth", mean(&mlmd)),
        MetricRecord::new("sync_confidence", "test", mean(&conf)),
        MetricRecord::new("sync_confidence", "ground_truth", mean(&gt_conf)),
        MetricRecord::new("mouth_iou", "test", mean(&iou)),
        MetricRecord::new("mouth_miou", "test", mean(&miou)),
        MetricRecord::new("upper_half_agreement", "test", mean(&upper)),
        MetricRecord::new("frechet_frame", "test", fid),
        MetricRecord::new("frechet_video", "test", fvd),
        MetricRecord::new("temporal_mean_diff", "test", mean(&tmean)),
        MetricRecord::new("temporal_max_diff", "test", mean(&tmax)),
        MetricRecord::new("mouth_area_smoothness", "test", mean(&tarea)),
    ])
}

/// Per-region intra/inter identity code similarity over evenly spaced
/// frames of every clip, plus the number of regions that separate.
pub fn disentanglement(sgi: &Sgi, corpus: &Corpus, frames_per_clip: usize) -> Result<Vec<MetricRecord>> {
    let mut entries = Vec::new();
    for (id, clip) in corpus.clips.iter().enumerate() {
        let n = clip.len();
        let k = frames_per_clip.min(n).max(1);
        for j in 0..k {
            let f = j * n / k;
            entries.push((id, sgi.codes_for(&clip.frames[f], &clip.masks[f])?, &clip.masks[f]));
        }
    }
    let sims = code_similarity(&entries, sgi.settings().classes);
    let mut out = Vec::new();
    for s in &sims {
        let name = Region::from_id(s.region as u8).map(|r| r.name()).unwrap_or("unknown");
        if let (Some(a), Some(b)) = (s.intra, s.inter) {
            out.push(MetricRecord::new("code_similarity_intra", name, a));
            out.push(MetricRecord::new("code_similarity_inter", name, b));
        }
    }
    out.push(MetricRecord::new("disentangled_regions", "all", sims.iter().filter(|s| s.separated()).count() as f64));
    Ok(out)
}

/// Run provenance, written as the first report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub corpus_seed: u64,
    pub palette_hash: String,
    pub no_syncnet: bool,
    pub stages: Vec<StageOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub run: RunInfo,
    pub metrics: Vec<MetricRecord>,
}

impl Report {
    pub fn get(&self, metric: &str, scope: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == metric && m.scope == scope).map(|m| m.value)
    }

    /// Records whose values must reproduce across runs.
    pub fn deterministic(&self) -> Vec<&MetricRecord> {
        self.metrics.iter().filter(|m| m.deterministic).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string(&json!({ "run": self.run }))?;
        text.push('\n');
        for m in &self.metrics {
            text.push_str(&serde_json::to_string(m)?);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| Error::invalid("empty report"))?)?;
        let run: RunInfo = serde_json::from_value(first.get("run").cloned().ok_or_else(|| Error::invalid("report lacks run info"))?)?;
        let metrics = lines.map(|l| Ok(serde_json::from_str(l)?)).collect::<Result<Vec<_>>>()?;
        Ok(Self { run, metrics })
    }
}

fn timing(stage: &str, seconds: f64) -> MetricRecord {
    MetricRecord { metric: "runtime_seconds".into(), scope: stage.into(), value: seconds, deterministic: false }
}

/// prepare → sync expert → TSG → SGI → inference on held-out clips → eval.
pub fn run_pipeline(cfg: &Config, layout: &RunLayout) -> Result<Report> {
    let start = Instant::now();
    let mut log = MetricsLog::append(layout.metrics())?;
    let t = Instant::now();
    let data = prepare_data(cfg, &layout.corpus())?;
    let prepare_seconds = t.elapsed().as_secs_f64();
    let expert = expert_stage(cfg, &data, layout, &mut log)?;
    let tsg = tsg_stage(cfg, &data, &expert.expert, layout, &mut log)?;
    let sgi = sgi_stage(cfg, &data, layout, &mut log)?;
    let eval_settings = EvalSettings::from_config(cfg)?;

    let t = Instant::now();
    let tag = format!("{}-{}", tsg.outcome.config_hash, sgi.outcome.config_hash);
    let test = data.clips(Split::Test);
    let inferred = test
        .iter()
        .map(|(i, clip)| {
            let inf = infer_clip(&tsg.tsg, &sgi.sgi, clip, &data.audio[*i])?;
            inf.write(&layout.inference(&tag).join(&clip.name))?;
            Ok(inf)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(stage_error("infer", &tag))?;
    let infer_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let eval = || -> Result<Vec<MetricRecord>> {
        let pairs: Vec<(&Clip, &Inference)> = test.iter().map(|(_, c)| *c).zip(&inferred).collect();
        let mut m = evaluate(&eval_settings, &expert.expert, &pairs)?;
        m.push(MetricRecord::new("expert_accuracy", "held_out", expert.accuracy));
        let held_out = data.sgi_clips(Split::Test);
        let (_, tail) = data.sgi_frame_split(cfg.usize("sgi.holdout_frames")?)?;
        m.push(MetricRecord::new("sgi_reconstruction_psnr", "held_out_frames", reconstruction_psnr(&sgi.sgi, &tail, eval_settings.psnr_frames)?));
        m.push(MetricRecord::new("sgi_reconstruction_psnr", "held_out_identities", reconstruction_psnr(&sgi.sgi, &held_out, eval_settings.psnr_frames)?));
        m.extend(disentanglement(&sgi.sgi, &data.corpus, eval_settings.similarity_frames)?);
        Ok(m)
    };
    let mut metrics = eval().map_err(stage_error("eval", &cfg.hash()))?;
    metrics.push(timing("prepare", prepare_seconds));
    for o in [&expert.outcome, &tsg.outcome, &sgi.outcome] {
        metrics.push(timing(&o.stage, o.seconds));
    }
    metrics.push(timing("infer", infer_seconds));
    metrics.push(timing("eval", t.elapsed().as_secs_f64()));
    metrics.push(timing("total", start.elapsed().as_secs_f64()));
    let report = Report {
        run: RunInfo {
            config_hash: cfg.hash(),
            corpus_seed: data.corpus.seed,
            palette_hash: data.palette.hash(),
            no_syncnet: cfg.bool("pipeline.no_syncnet")?,
            stages: vec![expert.outcome, tsg.outcome, sgi.outcome],
        },
        metrics,
    };
    report.write(&layout.report())?;
    Ok(report)
}
