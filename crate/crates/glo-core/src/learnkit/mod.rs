//! Training-objective kernels with analytic gradients, the learning-rate
//! schedule, and a toy gradient-checked encoder/predictor trainer with a
//! linear-probe protocol.
//!
//! Every gradient here is hand-derived and verified against central finite
//! differences in the tests, so the kernels double as numerical oracles
//! for any future backend implementation.

mod net;
mod train;

pub use net::{Mlp, SgdConfig, SgdState, ToyNet, ToyNetDims};
pub use train::{
    linear_probe, train_toy_simsiam, two_cluster_dataset, AugmentPolicy, LinearClassifier,
    LogEntry, ProbeOptions, ProbeResult, TrainOptions, TrainRun,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("target index {0} out of range for {1} classes")]
    TargetOutOfRange(usize, usize),
    #[error("probabilities must sum to 1 (got {0})")]
    BadProbabilities(f64),
    #[error("class weights must be positive and match the class count")]
    BadWeights,
    #[error("degenerate embedding: zero-norm vector")]
    DegenerateEmbedding,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("stratification failed: class {0} has no training samples at this fraction")]
    Stratification(usize),
    #[error("model serialization: {0}")]
    Serialization(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Probabilities below this floor are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Focal-loss parameters. The focusing exponent defaults to 2.5; class
/// weights default to 1 with an inverse-frequency option for callers that
/// want one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalLossParams {
    pub gamma: f64,
    /// Per-class multiplier on the target-class loss; `None` means all 1.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        FocalLossParams { gamma: 2.5, class_weights: None }
    }
}

impl FocalLossParams {
    pub fn with_gamma(gamma: f64) -> Self {
        FocalLossParams { gamma, class_weights: None }
    }

    /// Inverse-frequency weights normalized to mean 1.
    pub fn inverse_frequency(gamma: f64, class_counts: &[usize]) -> Self {
        let inv: Vec<f64> =
            class_counts.iter().map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 }).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        FocalLossParams {
            gamma,
            class_weights: Some(inv.into_iter().map(|w| w / mean).collect()),
        }
    }

    fn weight(&self, class: usize) -> f64 {
        match &self.class_weights {
            Some(w) => w[class],
            None => 1.0,
        }
    }
}

/// Focal loss `-w_t (1 - p_t)^gamma ln(p_t)` with its analytic gradient
/// with respect to the pre-softmax logits.
///
/// `probs` must already be a probability vector (softmax output); the
/// returned gradient assumes that correspondence.
pub fn focal_loss(
    probs: &[f64],
    target: usize,
    params: &FocalLossParams,
) -> Result<(f64, Vec<f64>), LearnError> {
    if target >= probs.len() {
        return Err(LearnError::TargetOutOfRange(target, probs.len()));
    }
    if params.gamma < 0.0 {
        return Err(LearnError::Config(format!("gamma {} must be >= 0", params.gamma)));
    }
    if let Some(w) = &params.class_weights {
        if w.len() != probs.len() || w.iter().any(|&v| v <= 0.0) {
            return Err(LearnError::BadWeights);
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(LearnError::BadProbabilities(sum));
    }

    let gamma = params.gamma;
    let w = params.weight(target);
    let pt = probs[target].max(PROB_FLOOR);
    let one_minus = (1.0 - pt).max(0.0);

    let loss = -w * one_minus.powf(gamma) * pt.ln();

    // dL/dp_t; the first term vanishes in the p_t -> 1 limit because
    // ln(p_t) -> 0 faster than (1-p_t)^(gamma-1) blows up.
    let term1 = if one_minus == 0.0 || gamma == 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * pt.ln()
    };
    let term2 = one_minus.powf(gamma) / pt;
    let dl_dpt = w * (term1 - term2);

    // Chain through softmax: dp_t/dz_j = p_t (delta_tj - p_j).
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            dl_dpt * pt * (delta - pj)
        })
        .collect();
    Ok((loss, grad))
}

/// Gradients of the symmetric negative-cosine objective under the
/// stop-gradient convention: the embedding inputs receive exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SimsiamGrads {
    pub loss: f64,
    pub grad_p1: Vec<f64>,
    pub grad_p2: Vec<f64>,
    /// Exactly zero: `z1` sits behind a stop-gradient.
    pub grad_z1: Vec<f64>,
    /// Exactly zero: `z2` sits behind a stop-gradient.
    pub grad_z2: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity and its gradient with respect to the first argument.
pub(crate) fn cosine_and_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    let cos = dot(a, b) / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect();
    (cos, grad)
}

/// Symmetric negative-cosine objective
/// `-cos(p1, stop(z2))/2 - cos(p2, stop(z1))/2`.
///
/// Gradients flow only into the predictor outputs; the stop-gradient
/// contract makes the embedding gradients exactly zero.
pub fn simsiam_loss(
    z1: &[f64],
    z2: &[f64],
    p1: &[f64],
    p2: &[f64],
) -> Result<SimsiamGrads, LearnError> {
    let d = z1.len();
    for v in [z2, p1, p2] {
        if v.len() != d {
            return Err(LearnError::DimMismatch(d, v.len()));
        }
    }
    for v in [z1, z2, p1, p2] {
        if norm(v) == 0.0 {
            return Err(LearnError::DegenerateEmbedding);
        }
    }
    let (cos1, g1) = cosine_and_grad(p1, z2);
    let (cos2, g2) = cosine_and_grad(p2, z1);
    Ok(SimsiamGrads {
        loss: -0.5 * cos1 - 0.5 * cos2,
        grad_p1: g1.into_iter().map(|g| -0.5 * g).collect(),
        grad_p2: g2.into_iter().map(|g| -0.5 * g).collect(),
        grad_z1: vec![0.0; d],
        grad_z2: vec![0.0; d],
    })
}

/// Cosine-decay learning-rate schedule with linear batch-size scaling:
/// the effective base is `base_lr * batch_size / 256`, decayed by
/// `0.5 (1 + cos(pi t / total_steps))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    /// Defaults matching the pretraining recipe: base 0.05, batch 64.
    pub fn pretrain_default(total_steps: usize) -> Self {
        CosineSchedule { base_lr: 0.05, batch_size: 64, total_steps }
    }

    pub fn effective_base(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = (step as f64 / self.total_steps as f64).min(1.0);
        self.effective_base() * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Mean per-dimension standard deviation of L2-normalized embeddings.
/// Healthy representations sit near `1/sqrt(d)`; collapsed ones near 0.
pub fn collapse_statistic(embeddings: &[Vec<f64>]) -> f64 {
    if embeddings.is_empty() {
        return 0.0;
    }
    let d = embeddings[0].len();
    let n = embeddings.len() as f64;
    let normalized: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|z| {
            let nz = norm(z);
            if nz == 0.0 {
                vec![0.0; d]
            } else {
                z.iter().map(|v| v / nz).collect()
            }
        })
        .collect();
    let mut total = 0.0;
    for dim in 0..d {
        let mean = normalized.iter().map(|z| z[dim]).sum::<f64>() / n;
        let var = normalized.iter().map(|z| (z[dim] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / d as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Central finite differences of `f` at `x`.
    pub(crate) fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            grad.push((up - down) / (2.0 * h));
        }
        grad
    }

    pub(crate) fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn focal_perfect_prediction_is_zero_loss() {
        let probs = [1.0 - 2e-13, 1e-13, 1e-13];
        let (loss, _) = focal_loss(&probs, 0, &FocalLossParams::default()).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = FocalLossParams::with_gamma(0.0);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let probs = softmax(&logits);
            let target = rng.gen_range(0..5);
            let (loss, grad) = focal_loss(&probs, target, &params).unwrap();
            let ce = -probs[target].ln();
            assert!((loss - ce).abs() < 1e-12);
            // Cross-entropy gradient is p - onehot.
            for (j, g) in grad.iter().enumerate() {
                let want = probs[j] - if j == target { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn focal_half_confidence_value() {
        // p_t = 0.5, gamma = 2.5: loss = 0.5^2.5 * ln 2 = 0.1225323.
        let probs = [0.5, 0.5];
        let (loss, _) = focal_loss(&probs, 0, &FocalLossParams::default()).unwrap();
        let want = 0.5f64.powf(2.5) * 2.0f64.ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.1225322679335684).abs() < 1e-12);
    }

    #[test]
    fn focal_target_out_of_range() {
        assert!(matches!(
            focal_loss(&[0.5, 0.5], 2, &FocalLossParams::default()),
            Err(LearnError::TargetOutOfRange(2, 2))
        ));
    }

    #[test]
    fn focal_rejects_unnormalized() {
        assert!(matches!(
            focal_loss(&[0.5, 0.6], 0, &FocalLossParams::default()),
            Err(LearnError::BadProbabilities(_))
        ));
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..200 {
            let gamma = [0.0, 1.0, 2.5][case % 3];
            let k = rng.gen_range(2..=6);
            let weights: Option<Vec<f64>> = if case % 2 == 0 {
                None
            } else {
                Some((0..k).map(|_| rng.gen_range(0.2..3.0)).collect())
            };
            let params = FocalLossParams { gamma, class_weights: weights };
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.5..2.5)).collect();
            let target = rng.gen_range(0..k);
            let (_, analytic) = focal_loss(&softmax(&logits), target, &params).unwrap();
            let numeric = finite_diff(&logits, 1e-5, |z| {
                focal_loss(&softmax(z), target, &params).unwrap().0
            });
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-5, "case {case} (gamma {gamma}): rel err {err}");
        }
    }

    #[test]
    fn simsiam_aligned_is_minus_one() {
        let z1 = vec![1.0, 2.0, 3.0];
        let z2 = vec![0.5, -1.0, 2.0];
        let got = simsiam_loss(&z1, &z2, &z2, &z1).unwrap();
        assert!((got.loss + 1.0).abs() < 1e-12);
    }

    #[test]
    fn simsiam_orthogonal_is_zero() {
        let z1 = vec![1.0, 0.0];
        let z2 = vec![0.0, 1.0];
        // p1 orthogonal to z2 and p2 orthogonal to z1.
        let got = simsiam_loss(&z1, &z2, &z1, &z2).unwrap();
        assert!(got.loss.abs() < 1e-12);
    }

    #[test]
    fn simsiam_rejects_degenerate() {
        let ok = vec![1.0, 1.0];
        let zero = vec![0.0, 0.0];
        assert!(matches!(
            simsiam_loss(&ok, &zero, &ok, &ok),
            Err(LearnError::DegenerateEmbedding)
        ));
        assert!(matches!(
            simsiam_loss(&ok, &ok, &ok, &[1.0, 2.0, 3.0]),
            Err(LearnError::DimMismatch(2, 3))
        ));
    }

    #[test]
    fn simsiam_loss_bounded_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = rng.gen_range(2..10);
            let v = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..d).map(|_| rng.gen_range(-2.0..2.0) + 0.01).collect()
            };
            let (z1, z2, p1, p2) = (v(&mut rng), v(&mut rng), v(&mut rng), v(&mut rng));
            let a = simsiam_loss(&z1, &z2, &p1, &p2).unwrap();
            assert!((-1.0..=1.0).contains(&a.loss));
            // Swapping (p1, z2) <-> (p2, z1) keeps the loss.
            let b = simsiam_loss(&z2, &z1, &p2, &p1).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn simsiam_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..200 {
            let d = 8;
            let v = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..d).map(|_| rng.gen_range(-1.5..1.5) + 0.05).collect()
            };
            let (z1, z2, p1, p2) = (v(&mut rng), v(&mut rng), v(&mut rng), v(&mut rng));
            let got = simsiam_loss(&z1, &z2, &p1, &p2).unwrap();
            assert!(got.grad_z1.iter().all(|&g| g == 0.0));
            assert!(got.grad_z2.iter().all(|&g| g == 0.0));

            let num_p1 = finite_diff(&p1, 1e-5, |p| simsiam_loss(&z1, &z2, p, &p2).unwrap().loss);
            let num_p2 = finite_diff(&p2, 1e-5, |p| simsiam_loss(&z1, &z2, &p1, p).unwrap().loss);
            let e1 = max_rel_err(&got.grad_p1, &num_p1);
            let e2 = max_rel_err(&got.grad_p2, &num_p2);
            assert!(e1 < 1e-6 && e2 < 1e-6, "case {case}: {e1} {e2}");
        }
    }

    #[test]
    fn schedule_endpoints_and_scaling() {
        let s = CosineSchedule { base_lr: 0.05, batch_size: 64, total_steps: 1000 };
        assert!((s.effective_base() - 0.0125).abs() < 1e-15);
        assert_eq!(s.lr(0), s.effective_base());
        assert!(s.lr(1000).abs() < 1e-12);
    }

    #[test]
    fn schedule_strictly_decreasing() {
        let s = CosineSchedule { base_lr: 0.1, batch_size: 128, total_steps: 500 };
        let mut prev = s.lr(0);
        for t in 1..=500 {
            let cur = s.lr(t);
            assert!(cur < prev, "lr not strictly decreasing at step {t}");
            prev = cur;
        }
    }

    #[test]
    fn collapse_statistic_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 16;
        // Random embeddings on the sphere: statistic close to 1/sqrt(d).
        let spread: Vec<Vec<f64>> =
            (0..800).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let healthy = collapse_statistic(&spread);
        let expected = 1.0 / (d as f64).sqrt();
        assert!((healthy - expected).abs() < 0.05 * expected * 4.0, "{healthy} vs {expected}");
        // Identical embeddings collapse to zero.
        let constant: Vec<Vec<f64>> = (0..800).map(|_| vec![1.0; d]).collect();
        assert_eq!(collapse_statistic(&constant), 0.0);
    }
}
