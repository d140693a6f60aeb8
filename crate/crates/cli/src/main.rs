use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use masktalk::audio::{read_wav, MelExtractor, MelSpectrogram};
use masktalk::frame::RgbFrame;
use masktalk::harness::checkpoint::{Checkpoint, Expect};
use masktalk::harness::config::Config;
use masktalk::harness::corpus::{count_frames, load_frames, load_masks, Clip, Split};
use masktalk::harness::log::MetricsLog;
use masktalk::harness::pipeline::{
    edit_session, evaluate, expert_stage, prepare_data, run_pipeline, sgi_stage, tsg_stage, EditReference, EvalSettings,
    Inference, Report, RunInfo, RunLayout, EXPERT_SECTIONS, SGI_SECTIONS, TSG_SECTIONS,
};
use masktalk::mask::{frame_filename, parse_edit_file, ClassPalette, SegmentationMap};
use masktalk::metrics::MetricRecord;
use masktalk::sgi::{Sgi, SgiSettings};
use masktalk::sync_expert::SyncExpert;
use masktalk::tsg::{generate_sequence, PoseMode, Tsg, TsgAudio, TsgSettings};
use masktalk::{Error, Result};

/// Speech-driven talking faces through segmentation masks.
///
/// Config keys can be overridden with `--set key=value` or with environment
/// variables named `MASKTALK_<KEY>` (dots become underscores).
#[derive(Parser)]
#[command(name = "masktalk", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file merged over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set tsg.lr=5e-4`. Applied after environment variables.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run directory holding the corpus, checkpoints, logs and reports.
    #[arg(long, default_value = "run", global = true)]
    run: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise the corpus (frames, masks, WAVs, mel caches, manifest).
    PrepareData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the segmentation-domain sync expert.
    TrainSyncnet,
    /// Train the talking segmentation generator.
    TrainTsg {
        /// Expert checkpoint; defaults to the run's own.
        #[arg(long)]
        expert: Option<PathBuf>,
    },
    /// Train the segmentation-guided texture generator.
    TrainSgi,
    /// Render a mask directory with the textures of a reference image.
    Infer {
        /// Directory of `frame_NNNNN.png` masks (the pose source when `--wav` is given).
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Mask of the reference image; defaults to the first mask.
        #[arg(long)]
        reference_mask: Option<PathBuf>,
        /// Drive the lips from this 16 kHz WAV with the trained TSG.
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply an edit file while rendering a mask directory.
    Edit {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        reference_mask: Option<PathBuf>,
        /// Text records `kind region payload [frames=a-b]`.
        #[arg(long)]
        spec: PathBuf,
        /// Images addressed by `ref=<i>`, in order; each needs a matching `--ref-mask`.
        #[arg(long = "ref-image")]
        ref_images: Vec<PathBuf>,
        #[arg(long = "ref-mask")]
        ref_masks: Vec<PathBuf>,
        /// Background plate composited behind every frame.
        #[arg(long)]
        background: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a generated clip against ground truth.
    Eval {
        /// Directory with `masks/` and `frames/`.
        #[arg(long)]
        pred: PathBuf,
        /// Directory with `masks/`, `frames/` and `audio.mel` (or `audio.wav`).
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// prepare → train ×3 → infer → eval, resuming finished stages.
    Pipeline {
        /// Train the TSG without the sync loss.
        #[arg(long)]
        no_syncnet: bool,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::defaults(),
    };
    cfg.apply_env()?;
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("`{kv}` is not KEY=VALUE")))?;
        let k = k.trim();
        if !cfg.keys().any(|known| known == k) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        cfg.set_str(k, v.trim())?;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path, module: &str, hash: &str, palette: &ClassPalette) -> Result<Checkpoint> {
    let palette_hash = palette.hash();
    Checkpoint::load_verified(path, Expect { module, config_hash: hash, palette_hash: &palette_hash })
}

fn expect<'a>(module: &'a str, hash: &'a str, palette_hash: &'a str) -> Expect<'a> {
    Expect { module, config_hash: hash, palette_hash }
}

fn load_sgi(cfg: &Config, layout: &RunLayout, palette: &ClassPalette) -> Result<Sgi> {
    let hash = cfg.section_hash(SGI_SECTIONS);
    let ck = load_checkpoint(&layout.checkpoint("sgi", &hash), "sgi", &hash, palette)?;
    Sgi::from_checkpoint(&ck, expect("sgi", &hash, &palette.hash()), &SgiSettings::from_config(cfg)?)
}

fn load_tsg(cfg: &Config, layout: &RunLayout, palette: &ClassPalette) -> Result<Tsg> {
    let hash = cfg.section_hash(TSG_SECTIONS);
    let ck = load_checkpoint(&layout.checkpoint("tsg", &hash), "tsg", &hash, palette)?;
    Tsg::from_checkpoint(&ck, expect("tsg", &hash, &palette.hash()), &TsgSettings::from_config(cfg)?)
}

fn mask_dir(dir: &Path, classes: usize) -> Result<Vec<SegmentationMap>> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("mask directory {} not found", dir.display()),
        )));
    }
    let n = count_frames(dir);
    if n == 0 {
        return Err(Error::InvalidInput(format!("no {} files in {}", frame_filename(0), dir.display())));
    }
    load_masks(dir, n, classes)
}

fn write_frames(dir: &Path, frames: &[RgbFrame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(dir.join(frame_filename(i)))?;
    }
    Ok(())
}

/// Masks to render: the directory as is, or TSG output driven by a WAV.
fn driven_masks(cfg: &Config, layout: &RunLayout, palette: &ClassPalette, masks: Vec<SegmentationMap>, wav: Option<&Path>) -> Result<Vec<SegmentationMap>> {
    let Some(wav) = wav else { return Ok(masks) };
    let (samples, rate) = read_wav(wav)?;
    let extractor = MelExtractor::new(cfg.float("audio.log_floor")? as f32);
    let mel = extractor.compute(&samples, rate)?;
    let audio = TsgAudio::new(mel, &samples, &extractor)?;
    let tsg = load_tsg(cfg, layout, palette)?;
    let frames = masks.len().min(masktalk::audio::video_frames_for(samples.len()));
    generate_sequence(&tsg, &masks, &masks[0], &audio, frames, PoseMode::SelfDriven)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let layout = RunLayout::new(&cli.common.run);
    let classes = cfg.usize("classes")?;
    let palette = ClassPalette::default();
    match cli.command {
        Command::PrepareData { out } => {
            let dir = out.unwrap_or_else(|| layout.corpus());
            let data = prepare_data(&cfg, &dir)?;
            println!("{} clips in {}", data.corpus.clips.len(), dir.display());
        }
        Command::TrainSyncnet => {
            let data = prepare_data(&cfg, &layout.corpus())?;
            let mut log = MetricsLog::append(layout.metrics())?;
            let stage = expert_stage(&cfg, &data, &layout, &mut log)?;
            println!("held-out accuracy {:.4}; checkpoint {}", stage.accuracy, stage.outcome.checkpoint.display());
        }
        Command::TrainTsg { expert } => {
            let data = prepare_data(&cfg, &layout.corpus())?;
            let mut log = MetricsLog::append(layout.metrics())?;
            let expert = match expert {
                Some(path) => {
                    let hash = cfg.section_hash(EXPERT_SECTIONS);
                    let ck = load_checkpoint(&path, "sync_expert", &hash, &data.palette)?;
                    SyncExpert::from_checkpoint(&ck, expect("sync_expert", &hash, &data.palette.hash()), classes)?
                }
                None => expert_stage(&cfg, &data, &layout, &mut log)?.expert,
            };
            let stage = tsg_stage(&cfg, &data, &expert, &layout, &mut log)?;
            println!("checkpoint {}", stage.outcome.checkpoint.display());
        }
        Command::TrainSgi => {
            let data = prepare_data(&cfg, &layout.corpus())?;
            let mut log = MetricsLog::append(layout.metrics())?;
            let stage = sgi_stage(&cfg, &data, &layout, &mut log)?;
            println!("checkpoint {}", stage.outcome.checkpoint.display());
        }
        Command::Infer { masks, reference, reference_mask, wav, out } => {
            let input = mask_dir(&masks, classes)?;
            let ref_mask = match reference_mask {
                Some(p) => SegmentationMap::load_png(p, classes)?,
                None => input[0].clone(),
            };
            let ref_frame = RgbFrame::load_png(&reference)?;
            let masks = driven_masks(&cfg, &layout, &palette, input, wav.as_deref())?;
            let sgi = load_sgi(&cfg, &layout, &palette)?;
            let codes = sgi.codes_for(&ref_frame, &ref_mask)?;
            let frames = sgi.render(&masks, &vec![codes; masks.len()])?;
            Inference { masks, frames }.write(&out)?;
            println!("{} frames in {}", count_frames(&out.join("frames")), out.display());
        }
        Command::Edit { masks, reference, reference_mask, spec, ref_images, ref_masks, background, out } => {
            let specs = parse_edit_file(&std::fs::read_to_string(&spec)?, &palette)?;
            if ref_images.len() != ref_masks.len() {
                return Err(Error::InvalidInput(format!(
                    "{} --ref-image but {} --ref-mask",
                    ref_images.len(),
                    ref_masks.len()
                )));
            }
            let references = ref_images
                .iter()
                .zip(&ref_masks)
                .map(|(i, m)| Ok(EditReference { frame: RgbFrame::load_png(i)?, mask: SegmentationMap::load_png(m, classes)? }))
                .collect::<Result<Vec<_>>>()?;
            let input = mask_dir(&masks, classes)?;
            let ref_mask = match reference_mask {
                Some(p) => SegmentationMap::load_png(p, classes)?,
                None => input[0].clone(),
            };
            let background = background.map(RgbFrame::load_png).transpose()?;
            let sgi = load_sgi(&cfg, &layout, &palette)?;
            let codes = sgi.codes_for(&RgbFrame::load_png(&reference)?, &ref_mask)?;
            let frames = edit_session(&sgi, &input, &codes, &specs, &references, background.as_ref())?;
            write_frames(&out.join("frames"), &frames)?;
            println!("{} edited frames in {}", frames.len(), out.display());
        }
        Command::Eval { pred, gt, expert, report } => {
            let hash = cfg.section_hash(EXPERT_SECTIONS);
            let ck = load_checkpoint(&expert, "sync_expert", &hash, &palette)?;
            let expert = SyncExpert::from_checkpoint(&ck, expect("sync_expert", &hash, &palette.hash()), classes)?;
            let gt_masks = mask_dir(&gt.join("masks"), classes)?;
            let n = gt_masks.len();
            let mel = if gt.join("audio.mel").is_file() {
                MelSpectrogram::read_cache(gt.join("audio.mel"))?
            } else {
                let (samples, rate) = read_wav(gt.join("audio.wav"))?;
                MelExtractor::new(cfg.float("audio.log_floor")? as f32).compute(&samples, rate)?
            };
            let clip = Clip {
                name: gt.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                identity_seed: 0,
                split: Split::Test,
                articulation: Vec::new(),
                frames: load_frames(&gt.join("frames"), n)?,
                masks: gt_masks,
                audio: Vec::new(),
                mel,
            };
            let pred_masks = mask_dir(&pred.join("masks"), classes)?;
            let inference = Inference { frames: load_frames(&pred.join("frames"), pred_masks.len())?, masks: pred_masks };
            let metrics: Vec<MetricRecord> = evaluate(&EvalSettings::from_config(&cfg)?, &expert, &[(&clip, &inference)])?;
            let out = Report {
                run: RunInfo {
                    config_hash: cfg.hash(),
                    corpus_seed: cfg.u64("corpus.seed")?,
                    palette_hash: palette.hash(),
                    no_syncnet: cfg.bool("pipeline.no_syncnet")?,
                    stages: Vec::new(),
                },
                metrics,
            };
            out.write(&report)?;
            for m in &out.metrics {
                println!("{:<24} {:<14} {:.4}", m.metric, m.scope, m.value);
            }
        }
        Command::Pipeline { no_syncnet } => {
            let mut cfg = cfg;
            if no_syncnet {
                cfg.set_str("pipeline.no_syncnet", "true")?;
            }
            let report = run_pipeline(&cfg, &layout)?;
            for m in &report.metrics {
                println!("{:<24} {:<14} {:.4}", m.metric, m.scope, m.value);
            }
            println!("report: {}", layout.report().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
