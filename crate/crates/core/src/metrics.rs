//! Frame, mask, distribution and temporal metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::mask::{Region, SegmentationMap};

pub use crate::sync_expert::sync_confidence;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Luma weights used to grey images before SSIM.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn same_shape(a: &RgbFrame, b: &RgbFrame) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn psnr(a: &RgbFrame, b: &RgbFrame, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).clamp(0.0, PSNR_CAP))
}

fn grey(f: &RgbFrame) -> Vec<f64> {
    let hw = f.height() * f.width();
    let d = f.data();
    (0..hw).map(|p| (0..3).map(|c| LUMA[c] * f64::from(d[c * hw + p])).sum()).collect()
}

/// Mean SSIM over all `8×8` windows (stride 1, uniform weights, population moments).
pub fn ssim(a: &RgbFrame, b: &RgbFrame, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    ssim_grey(&grey(a), &grey(b), a.height(), a.width(), max_val)
}

/// SSIM of two row-major greyscale images.
pub fn ssim_grey(a: &[f64], b: &[f64], height: usize, width: usize, max_val: f64) -> Result<f64> {
    let w = SSIM_WINDOW;
    if a.len() != height * width || b.len() != a.len() {
        return Err(Error::invalid("greyscale buffers do not match the stated size"));
    }
    if height < w || width < w {
        return Err(Error::invalid(format!("{height}x{width} image is smaller than the {w}x{w} SSIM window")));
    }
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - w {
        for x0 in 0..=width - w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + w {
                for x in x0..x0 + w {
                    let (p, q) = (a[y * width + x], b[y * width + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkScope {
    Face,
    Mouth,
}

impl LandmarkScope {
    pub fn regions(self) -> &'static [Region] {
        match self {
            Self::Face => &[Region::UpperLip, Region::LowerLip, Region::InnerMouth, Region::Eye, Region::Brow, Region::Nose],
            Self::Mouth => &[Region::UpperLip, Region::LowerLip, Region::InnerMouth],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Face => "face",
            Self::Mouth => "mouth",
        }
    }
}

/// Keypoints per landmark region: centroid, then the mean position of the
/// top, bottom, left and right extremal pixels. Coordinates are `(y, x)`.
pub const KEYPOINTS_PER_REGION: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    /// `(region, keypoints)` for the landmark regions present in the mask.
    pub regions: Vec<(Region, [(f64, f64); KEYPOINTS_PER_REGION])>,
}

impl LandmarkSet {
    pub fn extract(mask: &SegmentationMap) -> Self {
        let regions = LandmarkScope::Face
            .regions()
            .iter()
            .filter_map(|&r| region_keypoints(mask, r.id()).map(|k| (r, k)))
            .collect();
        Self { regions }
    }

    pub fn get(&self, region: Region) -> Option<&[(f64, f64); KEYPOINTS_PER_REGION]> {
        self.regions.iter().find(|(r, _)| *r == region).map(|(_, k)| k)
    }
}

fn region_keypoints(mask: &SegmentationMap, id: u8) -> Option<[(f64, f64); KEYPOINTS_PER_REGION]> {
    let mut pts = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == id {
                pts.push((y as f64, x as f64));
            }
        }
    }
    if pts.is_empty() {
        return None;
    }
    let mean = |v: &[(f64, f64)]| {
        let n = v.len() as f64;
        (v.iter().map(|p| p.0).sum::<f64>() / n, v.iter().map(|p| p.1).sum::<f64>() / n)
    };
    let extreme = |key: fn(&(f64, f64)) -> f64, want_min: bool| {
        let best = pts.iter().map(key).fold(if want_min { f64::INFINITY } else { f64::NEG_INFINITY }, |a, b| {
            if want_min {
                a.min(b)
            } else {
                a.max(b)
            }
        });
        let sel: Vec<_> = pts.iter().copied().filter(|p| key(p) == best).collect();
        mean(&sel)
    };
    Some([
        mean(&pts),
        extreme(|p| p.0, true),
        extreme(|p| p.0, false),
        extreme(|p| p.1, true),
        extreme(|p| p.1, false),
    ])
}

/// Mean Euclidean distance between corresponding keypoints of the scope
/// regions present in `gt`. A region missing from `pred` contributes
/// `penalty` for each of its keypoints.
pub fn landmark_distance(pred: &SegmentationMap, gt: &SegmentationMap, scope: LandmarkScope, penalty: f64) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::invalid("landmark masks differ in size"));
    }
    let (p, g) = (LandmarkSet::extract(pred), LandmarkSet::extract(gt));
    let mut total = 0.0;
    let mut n = 0usize;
    for &r in scope.regions() {
        let Some(gk) = g.get(r) else { continue };
        match p.get(r) {
            Some(pk) => {
                for (a, b) in pk.iter().zip(gk) {
                    total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                }
            }
            None => total += penalty * KEYPOINTS_PER_REGION as f64,
        }
        n += KEYPOINTS_PER_REGION;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(format!("ground truth has none of the {} landmark regions", scope.name())));
    }
    Ok(total / n as f64)
}

/// Mean landmark distance over paired sequences, skipping frames whose ground
/// truth has no scope region. Undefined if every frame is skipped.
pub fn sequence_landmark_distance(
    pred: &[SegmentationMap],
    gt: &[SegmentationMap],
    scope: LandmarkScope,
    penalty: f64,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predicted masks vs {} ground truth", pred.len(), gt.len())));
    }
    let mut vals = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        match landmark_distance(p, g, scope, penalty) {
            Ok(v) => vals.push(v),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(Error::UndefinedMetric(format!("no frame has a {} landmark region", scope.name())));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean and covariance of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::invalid(format!("covariance {:?} for a {d}-dimensional mean", cov.shape())));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-9 * (1.0 + cov.abs().max()) {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance; needs at least two samples.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::UndefinedMetric(format!("{n} embeddings are too few for a covariance")));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::invalid("embeddings differ in dimension"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centred = x;
        for j in 0..d {
            let m = mean[j];
            centred.column_mut(j).add_scalar_mut(-m);
        }
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigenvalues below this are treated as numerical noise of a PSD matrix.
pub const EIGEN_CLIP: f64 = -1e-8;

/// Square root of a symmetric PSD matrix by eigendecomposition.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.abs().max().max(1.0);
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < EIGEN_CLIP * scale) {
        return Err(Error::invalid(format!("matrix is not positive semi-definite (eigenvalue {l:e})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μp − μq‖² + tr(Σp + Σq − 2(ΣpΣq)^{1/2})`.
///
/// The trace of `(ΣpΣq)^{1/2}` equals that of `(Σp^{1/2} Σq Σp^{1/2})^{1/2}`,
/// which is symmetric, so both roots come from symmetric eigendecompositions.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::invalid(format!("Fréchet distance between {}-d and {}-d stats", p.dim(), q.dim())));
    }
    let dm = (&p.mean - &q.mean).norm_squared();
    let sp = psd_sqrt(&p.cov)?;
    let inner = psd_sqrt(&(&sp * &q.cov * &sp))?;
    let d = dm + p.cov.trace() + q.cov.trace() - 2.0 * inner.trace();
    Ok(d.max(0.0))
}

/// Maps a frame to an embedding vector for Fréchet scores.
pub trait FrameEmbedder {
    fn embed(&self, frame: &RgbFrame) -> Vec<f64>;
}

/// Per-channel block means on a `grid × grid` layout: a cheap, fixed embedder
/// whose scores are only comparable with themselves.
#[derive(Debug, Clone, Copy)]
pub struct BlockMeanEmbedder {
    pub grid: usize,
}

impl FrameEmbedder for BlockMeanEmbedder {
    fn embed(&self, frame: &RgbFrame) -> Vec<f64> {
        let g = self.grid.max(1);
        let (h, w) = (frame.height(), frame.width());
        let mut out = vec![0.0; 3 * g * g];
        let mut counts = vec![0usize; g * g];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * g / h) * g + x * g / w;
                counts[cell] += 1;
                for c in 0..3 {
                    out[c * g * g + cell] += f64::from(frame.get(c, y, x));
                }
            }
        }
        for c in 0..3 {
            for cell in 0..g * g {
                out[c * g * g + cell] /= counts[cell].max(1) as f64;
            }
        }
        out
    }
}

/// Fréchet distance between per-frame embeddings of two frame sets.
pub fn frame_frechet(real: &[RgbFrame], fake: &[RgbFrame], embedder: &dyn FrameEmbedder) -> Result<f64> {
    let fit = |v: &[RgbFrame]| GaussianStats::fit(&v.iter().map(|f| embedder.embed(f)).collect::<Vec<_>>());
    frechet_distance(&fit(real)?, &fit(fake)?)
}

/// Fréchet distance between embeddings of sliding `window`-frame clips, each
/// the concatenation of its frame embeddings.
pub fn video_frechet(
    real: &[Vec<RgbFrame>],
    fake: &[Vec<RgbFrame>],
    window: usize,
    embedder: &dyn FrameEmbedder,
) -> Result<f64> {
    let clips = |v: &[Vec<RgbFrame>]| -> Result<GaussianStats> {
        let mut samples = Vec::new();
        for seq in v {
            for start in 0..seq.len().saturating_sub(window - 1) {
                samples.push(seq[start..start + window].iter().flat_map(|f| embedder.embed(f)).collect());
            }
        }
        GaussianStats::fit(&samples)
    };
    if window == 0 {
        return Err(Error::invalid("video window must be positive"));
    }
    frechet_distance(&clips(real)?, &clips(fake)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalStats {
    /// Mean over consecutive pairs of the mean absolute pixel difference.
    pub mean_diff: f64,
    /// Largest per-pair mean absolute pixel difference.
    pub max_diff: f64,
    /// Mean `|Δ area|` of the mouth regions in pixels, when masks are given.
    pub mouth_area_smoothness: Option<f64>,
}

pub fn temporal_consistency(frames: &[RgbFrame], masks: Option<&[SegmentationMap]>) -> Result<TemporalStats> {
    if frames.len() < 2 {
        return Err(Error::UndefinedMetric(format!("{} frames have no inter-frame difference", frames.len())));
    }
    let mut diffs = Vec::with_capacity(frames.len() - 1);
    for pair in frames.windows(2) {
        same_shape(&pair[0], &pair[1])?;
        let n = pair[0].data().len() as f64;
        let d: f64 = pair[0].data().iter().zip(pair[1].data()).map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs()).sum();
        diffs.push(d / n);
    }
    let mouth_area_smoothness = match masks {
        None => None,
        Some(m) => {
            if m.len() != frames.len() {
                return Err(Error::invalid(format!("{} masks for {} frames", m.len(), frames.len())));
            }
            let area = |s: &SegmentationMap| Region::MOUTH.iter().map(|r| s.count(r.id())).sum::<usize>() as f64;
            let areas: Vec<f64> = m.iter().map(area).collect();
            Some(areas.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (areas.len() - 1) as f64)
        }
    };
    Ok(TemporalStats {
        mean_diff: diffs.iter().sum::<f64>() / diffs.len() as f64,
        max_diff: diffs.iter().copied().fold(0.0, f64::max),
        mouth_area_smoothness,
    })
}

/// IoU of the union of the mouth regions, accumulated over a sequence.
pub fn mouth_iou(pred: &[SegmentationMap], gt: &[SegmentationMap]) -> Result<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    pair_check(pred, gt)?;
    let is_mouth = |l: u8| Region::MOUTH.iter().any(|r| r.id() == l);
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.labels().iter().zip(g.labels()) {
            let (a, b) = (is_mouth(*a), is_mouth(*b));
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
    }
    if union == 0 {
        return Err(Error::UndefinedMetric("no mouth pixels in either sequence".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Mean over the mouth classes of their sequence-accumulated IoU; a class
/// absent from both sequences is skipped.
pub fn mouth_miou(pred: &[SegmentationMap], gt: &[SegmentationMap]) -> Result<f64> {
    pair_check(pred, gt)?;
    let mut ious = Vec::new();
    for r in Region::MOUTH {
        let id = r.id();
        let (mut inter, mut union) = (0usize, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            for (a, b) in p.labels().iter().zip(g.labels()) {
                inter += usize::from(*a == id && *b == id);
                union += usize::from(*a == id || *b == id);
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        return Err(Error::UndefinedMetric("no mouth class in either sequence".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

fn pair_check(pred: &[SegmentationMap], gt: &[SegmentationMap]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!("{} predicted masks vs {} ground truth", pred.len(), gt.len())));
    }
    if pred.iter().zip(gt).any(|(p, g)| (p.height(), p.width()) != (g.height(), g.width())) {
        return Err(Error::invalid("predicted and ground-truth masks differ in size"));
    }
    Ok(())
}

/// One line of a JSON-lines metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub scope: String,
    pub value: f64,
    /// Whether repeated runs must reproduce the value exactly.
    pub deterministic: bool,
}

impl MetricRecord {
    pub fn new(metric: &str, scope: &str, value: f64) -> Self {
        Self { metric: metric.into(), scope: scope.into(), value, deterministic: true }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> RgbFrame {
        let mut d = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(c, y, x));
                }
            }
        }
        RgbFrame::new(h, w, d).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = frame(4, 4, |c, y, x| (c + y + x) as f32);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP);
        let b = frame(4, 4, |c, y, x| (c + y + x) as f32 + 1.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 1e-4);
        assert!(psnr(&a, &frame(4, 5, |_, _, _| 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = frame(12, 12, |_, y, x| ((y * 7 + x * 3) % 5) as f32 / 4.0);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let bin = frame(10, 10, |_, y, x| ((y + x) % 2) as f32);
        let inv = frame(10, 10, |_, y, x| 1.0 - ((y + x) % 2) as f32);
        assert!(ssim(&bin, &inv, 1.0).unwrap() < 0.0);
        let small = frame(7, 9, |_, _, _| 0.0);
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    #[test]
    fn ssim_constant_windows_match_closed_form() {
        let (c, d) = (0.3f64, 0.1f64);
        let a = frame(8, 8, |_, _, _| c as f32);
        let b = frame(8, 8, |_, _, _| (c + d) as f32);
        let (ga, gb) = (grey(&a)[0], grey(&b)[0]);
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let want = (2.0 * ga * gb + c1) / (ga * ga + gb * gb + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn frechet_closed_forms() {
        let p = GaussianStats::new(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let q = GaussianStats::new(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert!((frechet_distance(&p, &q).unwrap() - 1.0).abs() < 1e-9);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a = GaussianStats::new(DVector::from_vec(vec![1.0, 2.0]), cov.clone()).unwrap();
        let b = GaussianStats::new(DVector::from_vec(vec![4.0, -2.0]), cov).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-6);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        assert!(frechet_distance(&a, &p).is_err());
    }

    #[test]
    fn temporal_cases() {
        let f = frame(4, 4, |c, y, x| (c * y + x) as f32 / 10.0);
        let s = temporal_consistency(&[f.clone(), f.clone(), f.clone()], None).unwrap();
        assert_eq!((s.mean_diff, s.max_diff), (0.0, 0.0));
        let black = RgbFrame::filled(4, 4, [0.0; 3]);
        let white = RgbFrame::filled(4, 4, [1.0; 3]);
        let s = temporal_consistency(&[black.clone(), white.clone(), black, white], None).unwrap();
        assert_eq!(s.mean_diff, 1.0);
        assert!(temporal_consistency(&[f], None).is_err());
    }

    #[test]
    fn landmark_identity_and_shift() {
        let mut gt = SegmentationMap::filled(32, 32, 12, 0).unwrap();
        for y in 10..14 {
            for x in 8..20 {
                gt.set(y, x, Region::UpperLip.id());
            }
        }
        for y in 14..17 {
            for x in 9..18 {
                gt.set(y, x, Region::LowerLip.id());
            }
        }
        assert_eq!(landmark_distance(&gt, &gt, LandmarkScope::Mouth, 10.0).unwrap(), 0.0);
        let mut shifted = SegmentationMap::filled(32, 32, 12, 0).unwrap();
        for y in 0..28 {
            for x in 0..29 {
                shifted.set(y + 4, x + 3, gt.get(y, x));
            }
        }
        assert!((landmark_distance(&shifted, &gt, LandmarkScope::Mouth, 10.0).unwrap() - 5.0).abs() < 1e-12);
        let empty = SegmentationMap::filled(32, 32, 12, 0).unwrap();
        assert_eq!(landmark_distance(&empty, &gt, LandmarkScope::Mouth, 10.0).unwrap(), 10.0);
        assert!(matches!(landmark_distance(&gt, &empty, LandmarkScope::Face, 10.0), Err(Error::UndefinedMetric(_))));
    }
}
