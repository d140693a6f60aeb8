//! Differentiable losses shared by the segmentation generator, the sync
//! expert and the texture generator. All functions work in any float dtype;
//! gradient checks run them in `f64`.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::l2_norm_last;

/// Denominator guard in the cosine.
pub const COSINE_EPS: f64 = 1e-8;
/// Lower clamp on sync probabilities so every log term stays finite.
pub const PROB_EPS: f64 = 1e-7;

fn check_targets(logits: &Tensor, target: &Tensor) -> Result<usize> {
    let (b, c, h, w) = logits.dims4()?;
    if target.dims() != [b, h, w] {
        return Err(Error::invalid(format!(
            "target shape {:?} does not match logits {:?}",
            target.dims(),
            logits.dims()
        )));
    }
    let max = target.to_dtype(DType::U32)?.flatten_all()?.max(0)?.to_scalar::<u32>()?;
    if max as usize >= c {
        return Err(Error::invalid(format!("target label {max} is not below class count {c}")));
    }
    Ok(c)
}

/// Per-pixel `log softmax(logits)[target]`, shape `[B, H, W]`.
fn target_log_prob(logits: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let idx = target.to_dtype(DType::U32)?.unsqueeze(1)?;
    logp.gather(&idx.contiguous()?, 1)?.squeeze(1)
}

/// Mean negative log-likelihood of the target label per pixel.
///
/// `logits` is `[B, C, H, W]`, `target` is integer `[B, H, W]`.
pub fn ce_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_targets(logits, target)?;
    Ok(target_log_prob(logits, target)?.mean_all()?.neg()?)
}

/// Cross-entropy with each pixel scaled by the weight of its target class.
pub fn weighted_ce_loss(logits: &Tensor, target: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let c = check_targets(logits, target)?;
    if weights.dims() != [c] {
        return Err(Error::invalid(format!("expected {c} class weights, got {:?}", weights.dims())));
    }
    let lp = target_log_prob(logits, target)?;
    let idx = target.to_dtype(DType::U32)?.flatten_all()?;
    let w = weights.to_dtype(lp.dtype())?.index_select(&idx, 0)?.reshape(lp.shape())?;
    Ok((lp * w)?.mean_all()?.neg()?)
}

/// L1 distance between softmax probabilities and one-hot targets, averaged
/// over every element. Ablation baseline standing in for cross-entropy.
pub fn l1_label_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let c = check_targets(logits, target)?;
    let probs = candle_nn::ops::softmax(logits, 1)?;
    let onehot = one_hot_tensor(target, c, probs.dtype())?;
    Ok((probs - onehot)?.abs()?.mean_all()?)
}

/// `[B, H, W]` labels to `[B, C, H, W]` one-hot floats.
pub fn one_hot_tensor(target: &Tensor, classes: usize, dtype: DType) -> candle_core::Result<Tensor> {
    let t = target.to_dtype(DType::U32)?.unsqueeze(1)?;
    let ids = Tensor::arange(0u32, classes as u32, target.device())?.reshape((1, classes, 1, 1))?;
    t.broadcast_eq(&ids)?.to_dtype(dtype)
}

/// Cosine similarity clamped to `[PROB_EPS, 1]`; inputs are `[B, D]`, output `[B]`.
pub fn sync_probability(speech: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if speech.dims() != mask.dims() {
        return Err(Error::invalid(format!(
            "speech embedding {:?} and mask embedding {:?} differ",
            speech.dims(),
            mask.dims()
        )));
    }
    let dot = (speech * mask)?.sum(D::Minus1)?;
    let denom = (l2_norm_last(speech)? * l2_norm_last(mask)?)?.maximum(COSINE_EPS)?;
    Ok((dot / denom)?.clamp(PROB_EPS, 1.0)?)
}

/// Binary cross-entropy over sync probabilities: `-ln p` for synchronised
/// pairs, `-ln(1 - p)` for shifted ones, averaged over the batch.
pub fn sync_loss(prob: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let n = prob.elem_count();
    if n == 0 {
        return Err(Error::invalid("sync loss needs a non-empty batch"));
    }
    if labels.elem_count() != n {
        return Err(Error::invalid("one label per sync probability required"));
    }
    let y = labels.to_dtype(prob.dtype())?.reshape(prob.shape())?;
    let pos = (prob.log()? * &y)?;
    let neg = ((1.0 - prob)?.maximum(PROB_EPS)?.log()? * (1.0 - &y)?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// P_sync in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SyncScore(pub f64);

/// Scalar form of [`sync_probability`] for a single embedding pair.
pub fn sync_score(speech: &[f64], mask: &[f64]) -> Result<SyncScore> {
    if speech.len() != mask.len() {
        return Err(Error::invalid(format!(
            "embedding lengths differ: {} vs {}",
            speech.len(),
            mask.len()
        )));
    }
    let dot: f64 = speech.iter().zip(mask).map(|(a, b)| a * b).sum();
    let ns = speech.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nm = mask.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(SyncScore((dot / (ns * nm).max(COSINE_EPS)).clamp(PROB_EPS, 1.0)))
}

/// Scalar form of [`sync_loss`].
pub fn sync_loss_scalar(scores: &[SyncScore], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("sync loss needs a non-empty batch"));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid("one label per sync score required"));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(p, &y)| if y { -p.0.ln() } else { -(1.0 - p.0).max(PROB_EPS).ln() })
        .sum();
    Ok(total / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t4(v: Vec<f64>, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, c, h, w), &Device::Cpu).unwrap()
    }

    fn labels(v: Vec<u32>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, h, w), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn ce_uniform_logits() {
        let logits = t4(vec![0.0; 12 * 4], 12, 2, 2);
        let loss = val(&ce_loss(&logits, &labels(vec![0, 3, 7, 11], 2, 2)).unwrap());
        assert!((loss - 12f64.ln()).abs() < 1e-12);
        assert!((loss - 2.484907).abs() < 1e-6);
    }

    #[test]
    fn ce_confident_correct_is_zero() {
        let mut v = vec![-1e3; 3 * 2];
        v[0] = 1e3; // pixel 0 → class 0
        v[2 + 1] = 1e3; // pixel 1 → class 1
        let loss = val(&ce_loss(&t4(v, 3, 1, 2), &labels(vec![0, 1], 1, 2)).unwrap());
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ce_rejects_bad_targets() {
        let logits = t4(vec![0.0; 3 * 4], 3, 2, 2);
        assert!(ce_loss(&logits, &labels(vec![0, 1, 2, 3], 2, 2)).is_err());
        assert!(ce_loss(&logits, &labels(vec![0, 1], 1, 2)).is_err());
    }

    #[test]
    fn weighted_ce_reductions() {
        let v: Vec<f64> = (0..3 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let logits = t4(v, 3, 2, 2);
        let target = labels(vec![2, 0, 1, 2], 2, 2);
        let ones = Tensor::ones(3, DType::F64, &Device::Cpu).unwrap();
        let ce = val(&ce_loss(&logits, &target).unwrap());
        assert_eq!(val(&weighted_ce_loss(&logits, &target, &ones).unwrap()), ce);

        let only = labels(vec![1, 1, 1, 1], 2, 2);
        let base = val(&weighted_ce_loss(&logits, &only, &ones).unwrap());
        let w = Tensor::new(&[1.0f64, 2.0, 1.0], &Device::Cpu).unwrap();
        let doubled = val(&weighted_ce_loss(&logits, &only, &w).unwrap());
        assert!((doubled - 2.0 * base).abs() < 1e-12);
        assert!(weighted_ce_loss(&logits, &target, &Tensor::ones(2, DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn l1_label_loss_bounds() {
        let target = labels(vec![0, 1], 1, 2);
        let mut v = vec![-50.0; 2 * 2];
        v[0] = 50.0;
        v[3] = 50.0;
        assert!(val(&l1_label_loss(&t4(v, 2, 1, 2), &target).unwrap()) < 1e-12);
        let uniform = val(&l1_label_loss(&t4(vec![0.0; 4], 2, 1, 2), &target).unwrap());
        assert!((uniform - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sync_probability_examples() {
        let e = |v: Vec<f64>| Tensor::from_vec(v, (1, 3), &Device::Cpu).unwrap();
        let p = |a, b| sync_probability(&e(a), &e(b)).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((p(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
        assert_eq!(p(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]), PROB_EPS);
        assert_eq!(p(vec![0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]), PROB_EPS);
        let a = p(vec![0.3, 0.5, 0.1], vec![0.2, 0.1, 0.9]);
        let b = p(vec![3.0, 5.0, 1.0], vec![0.02, 0.01, 0.09]);
        assert!((a - b).abs() < 1e-12);
        assert!(sync_probability(&e(vec![1.0; 3]), &Tensor::ones((1, 4), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn sync_loss_examples() {
        let l = |p: Vec<f64>, y: Vec<f64>| {
            let n = p.len();
            val(&sync_loss(
                &Tensor::from_vec(p, n, &Device::Cpu).unwrap(),
                &Tensor::from_vec(y, n, &Device::Cpu).unwrap(),
            )
            .unwrap())
        };
        assert!((l(vec![0.5], vec![1.0]) - 0.693147).abs() < 1e-6);
        assert_eq!(l(vec![1.0], vec![1.0]), 0.0);
        assert!((l(vec![0.9, 0.1], vec![1.0, 0.0]) - 0.105361).abs() < 1e-6);
        assert!(l(vec![1.0], vec![0.0]).is_finite());
        let empty = Tensor::zeros(0, DType::F64, &Device::Cpu).unwrap();
        assert!(sync_loss(&empty, &empty).is_err());
    }

    #[test]
    fn sync_loss_monotone_in_probability() {
        let mut last_pos = f64::INFINITY;
        let mut last_neg = -f64::INFINITY;
        for i in 1..100 {
            let p = SyncScore(i as f64 / 100.0);
            let pos = sync_loss_scalar(&[p], &[true]).unwrap();
            let neg = sync_loss_scalar(&[p], &[false]).unwrap();
            assert!(pos < last_pos && neg > last_neg);
            last_pos = pos;
            last_neg = neg;
        }
        assert!(sync_loss_scalar(&[], &[]).is_err());
    }

    #[test]
    fn scalar_and_tensor_paths_agree() {
        let s = [0.4, 0.1, 0.7, 0.2];
        let m = [0.3, 0.9, 0.2, 0.5];
        let scalar = sync_score(&s, &m).unwrap().0;
        let st = Tensor::new(&[s], &Device::Cpu).unwrap();
        let mt = Tensor::new(&[m], &Device::Cpu).unwrap();
        let tensor = sync_probability(&st, &mt).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((scalar - tensor).abs() < 1e-12);
        assert!(sync_score(&s, &m[..3]).is_err());
    }
}
