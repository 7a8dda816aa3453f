//! Toy contrastive training loop with collapse diagnostics, and the
//! frozen-encoder linear probe.
//!
//! The augmentations are the vector-data analogue of image crops and
//! color jitter: additive Gaussian noise plus random coordinate dropout.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{MlpGrads, SgdConfig, SgdState, ToyNet, ToyNetDims};
use super::{
    collapse_statistic, cosine_and_grad, focal_loss, CosineSchedule, FocalLossParams, LearnError,
};
use crate::metrics::{balanced_accuracy, Confusion};
use crate::splits::stratified_subsample;

/// Vector-data augmentation: additive noise, then each coordinate
/// independently zeroed with the dropout probability.
///
/// The defaults are deliberately aggressive: with weak views the toy
/// encoder can align per-image representations without the stop-gradient
/// and never exhibits the collapse the diagnostics are meant to surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub noise_sigma: f64,
    pub dropout_p: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { noise_sigma: 2.0, dropout_p: 0.4 }
    }
}

impl AugmentPolicy {
    fn view(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let noisy = v + rng.gen_range(-1.0..1.0) * self.noise_sigma * 3.0f64.sqrt();
                if rng.gen_range(0.0..1.0) < self.dropout_p {
                    0.0
                } else {
                    noisy
                }
            })
            .collect()
    }
}

/// Options for [`train_toy_simsiam`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    pub steps: usize,
    pub dims: ToyNetDims,
    pub sgd: SgdConfig,
    /// Disabling the stop-gradient reproduces representational collapse;
    /// exists for diagnostics only.
    pub stop_gradient: bool,
}

impl TrainOptions {
    pub fn new(seed: u64, steps: usize) -> Self {
        TrainOptions {
            seed,
            steps,
            dims: ToyNetDims::default(),
            sgd: SgdConfig::default(),
            stop_gradient: true,
        }
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub collapse_stat: f64,
}

/// Trained network plus collapse diagnostics.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: ToyNet,
    /// Mean per-dimension std of normalized embeddings after each epoch.
    pub collapse_per_epoch: Vec<f64>,
    pub final_collapse: f64,
    pub log: Vec<LogEntry>,
}

fn dataset_collapse(net: &ToyNet, data: &[Vec<f64>]) -> f64 {
    let embeddings: Vec<Vec<f64>> = data.iter().map(|x| net.embed(x)).collect();
    collapse_statistic(&embeddings)
}

/// Train the toy encoder/predictor with the symmetric negative-cosine
/// objective. Gradients flow through the predictor branch only while the
/// stop-gradient is enabled; disabling it lets the representation collapse.
pub fn train_toy_simsiam(
    dataset: &[Vec<f64>],
    augment: &AugmentPolicy,
    schedule: &CosineSchedule,
    opts: &TrainOptions,
) -> Result<TrainRun, LearnError> {
    if dataset.is_empty() {
        return Err(LearnError::Config("dataset must be non-empty".into()));
    }
    if opts.steps == 0 {
        return Err(LearnError::Config("steps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = ToyNet::init(opts.dims, &mut rng);
    let mut sgd = SgdState::new(net.param_count(), opts.sgd);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut collapse_per_epoch = Vec::new();
    let mut current_collapse = dataset_collapse(&net, dataset);
    let mut log = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let batch: Vec<usize> = (0..schedule.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                    collapse_per_epoch.push(dataset_collapse(&net, dataset));
                    current_collapse = *collapse_per_epoch.last().expect("just pushed");
                }
                let i = order[cursor];
                cursor += 1;
                i
            })
            .collect();

        let mut enc_grads = MlpGrads::zeros(&net.encoder);
        let mut pred_grads = MlpGrads::zeros(&net.predictor);
        let mut batch_loss = 0.0;

        for &i in &batch {
            let v1 = augment.view(&dataset[i], &mut rng);
            let v2 = augment.view(&dataset[i], &mut rng);
            let enc1 = net.encoder.forward(&v1);
            let enc2 = net.encoder.forward(&v2);
            let pred1 = net.predictor.forward(&enc1.output);
            let pred2 = net.predictor.forward(&enc2.output);
            let (z1, z2) = (&enc1.output, &enc2.output);
            let (p1, p2) = (&pred1.output, &pred2.output);

            let (cos1, gp1) = cosine_and_grad(p1, z2);
            let (cos2, gp2) = cosine_and_grad(p2, z1);
            batch_loss += -0.5 * cos1 - 0.5 * cos2;

            let grad_p1: Vec<f64> = gp1.iter().map(|g| -0.5 * g).collect();
            let grad_p2: Vec<f64> = gp2.iter().map(|g| -0.5 * g).collect();

            // Predictor branch: through the predictor into the encoder.
            let grad_z1_from_p1 = net.predictor.backward(&pred1, &grad_p1, &mut pred_grads);
            let grad_z2_from_p2 = net.predictor.backward(&pred2, &grad_p2, &mut pred_grads);

            let mut grad_z1 = grad_z1_from_p1;
            let mut grad_z2 = grad_z2_from_p2;
            if !opts.stop_gradient {
                // Direct cosine gradients into the embeddings.
                let (_, gz2) = cosine_and_grad(z2, p1);
                let (_, gz1) = cosine_and_grad(z1, p2);
                for (g, d) in grad_z2.iter_mut().zip(gz2) {
                    *g += -0.5 * d;
                }
                for (g, d) in grad_z1.iter_mut().zip(gz1) {
                    *g += -0.5 * d;
                }
            }
            net.encoder.backward(&enc1, &grad_z1, &mut enc_grads);
            net.encoder.backward(&enc2, &grad_z2, &mut enc_grads);
        }

        let scale = 1.0 / batch.len() as f64;
        enc_grads.scale(scale);
        pred_grads.scale(scale);
        batch_loss *= scale;
        if !batch_loss.is_finite() {
            return Err(LearnError::Diverged { step });
        }

        let mut grads_flat = Vec::with_capacity(net.param_count());
        enc_grads.flat(&mut grads_flat);
        pred_grads.flat(&mut grads_flat);
        let lr = schedule.lr(step);
        sgd.step_net(&mut net, &grads_flat, lr);

        log.push(LogEntry { step, lr, loss: batch_loss, collapse_stat: current_collapse });
    }

    let final_collapse = dataset_collapse(&net, dataset);
    collapse_per_epoch.push(final_collapse);
    Ok(TrainRun { net, collapse_per_epoch, final_collapse, log })
}

/// Linear classifier trained on frozen embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub n_classes: usize,
    pub embed_dim: usize,
    /// Row-major `n_classes x embed_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    fn zeros(n_classes: usize, embed_dim: usize) -> Self {
        LinearClassifier {
            n_classes,
            embed_dim,
            weights: vec![0.0; n_classes * embed_dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                self.bias[c]
                    + z.iter()
                        .enumerate()
                        .map(|(i, v)| self.weights[c * self.embed_dim + i] * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, z: &[f64]) -> usize {
        let logits = self.logits(z);
        logits
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.total_cmp(b).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("at least one class")
    }
}

/// Probe optimizer settings. Defaults follow the frozen-encoder recipe:
/// learning rate 30 (unscaled), no weight decay, momentum 0.9, batch 64,
/// with cosine decay over the probe run.
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of the labeled set held out for evaluation (stratified).
    pub eval_share: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            seed: 0,
            lr: 30.0,
            weight_decay: 0.0,
            momentum: 0.9,
            batch_size: 64,
            epochs: 60,
            eval_share: 0.25,
        }
    }
}

/// Probe outcome: the trained linear layer and held-out balanced accuracy.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub classifier: LinearClassifier,
    pub balanced_accuracy: f64,
    pub fraction: f64,
    pub train_size: usize,
    pub eval_size: usize,
}

fn normalized_embed(net: &ToyNet, x: &[f64]) -> Vec<f64> {
    let z = net.embed(x);
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        z
    } else {
        z.iter().map(|v| v / n).collect()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Train only a linear layer on frozen, L2-normalized encoder embeddings
/// using focal loss, then report balanced accuracy on a held-out
/// stratified split. The labeled training pool is subsampled to `fraction`
/// with monotone nesting, so probe runs across fractions are comparable.
///
/// The encoder is taken by shared reference and never modified.
pub fn linear_probe(
    encoder: &ToyNet,
    data: &[(Vec<f64>, usize)],
    n_classes: usize,
    fraction: f64,
    focal: &FocalLossParams,
    opts: &ProbeOptions,
) -> Result<ProbeResult, LearnError> {
    if data.is_empty() {
        return Err(LearnError::Config("labeled dataset must be non-empty".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LearnError::Config(format!("fraction {fraction} outside (0, 1]")));
    }

    // Stratified train-pool / eval split, fixed across fractions.
    let items: Vec<(String, usize)> =
        data.iter().enumerate().map(|(i, (_, label))| (format!("item_{i}"), *label)).collect();
    let pool_share = 1.0 - opts.eval_share;
    let pool_idx = stratified_subsample(&items, pool_share, opts.seed)
        .map_err(|e| LearnError::Config(e.to_string()))?;
    let pool_set: std::collections::HashSet<usize> = pool_idx.iter().copied().collect();
    let eval_idx: Vec<usize> = (0..data.len()).filter(|i| !pool_set.contains(i)).collect();

    // Fraction subsample inside the pool, nested across fractions.
    let pool_items: Vec<(String, usize)> =
        pool_idx.iter().map(|&i| (format!("item_{i}"), data[i].1)).collect();
    let chosen = stratified_subsample(&pool_items, fraction, opts.seed ^ 0x9e3779b97f4a7c15)
        .map_err(|e| LearnError::Config(e.to_string()))?;
    let train_idx: Vec<usize> = chosen.into_iter().map(|j| pool_idx[j]).collect();

    for class in 0..n_classes {
        if !train_idx.iter().any(|&i| data[i].1 == class) {
            return Err(LearnError::Stratification(class));
        }
    }

    // Frozen features.
    let features: Vec<Vec<f64>> =
        data.iter().map(|(x, _)| normalized_embed(encoder, x)).collect();
    let embed_dim = encoder.dims.embed_dim;

    let mut clf = LinearClassifier::zeros(n_classes, embed_dim);
    let param_count = clf.weights.len() + clf.bias.len();
    let mut sgd = SgdState::new(
        param_count,
        SgdConfig { momentum: opts.momentum, weight_decay: opts.weight_decay },
    );
    let steps_per_epoch = train_idx.len().div_ceil(opts.batch_size);
    let total_steps = steps_per_epoch * opts.epochs;
    // Probe keeps the raw lr (no /256 batch scaling) with cosine decay.
    let schedule =
        CosineSchedule { base_lr: opts.lr, batch_size: 256, total_steps: total_steps.max(1) };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    let mut order = train_idx.clone();
    let mut step = 0usize;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let mut grads = vec![0.0; param_count];
            for &i in batch {
                let z = &features[i];
                let target = data[i].1;
                let probs = softmax(&clf.logits(z));
                let (_, grad_logits) = focal_loss(&probs, target, focal)?;
                for c in 0..n_classes {
                    for (j, zv) in z.iter().enumerate() {
                        grads[c * embed_dim + j] += grad_logits[c] * zv;
                    }
                    grads[n_classes * embed_dim + c] += grad_logits[c];
                }
            }
            for g in grads.iter_mut() {
                *g /= batch.len() as f64;
            }
            let lr = schedule.lr(step);
            let mut params: Vec<f64> = clf.weights.iter().chain(clf.bias.iter()).copied().collect();
            sgd.step_flat(&mut params, &grads, lr);
            clf.weights.copy_from_slice(&params[..n_classes * embed_dim]);
            clf.bias.copy_from_slice(&params[n_classes * embed_dim..]);
            step += 1;
        }
    }

    let mut confusion = Confusion::new(n_classes);
    for &i in &eval_idx {
        confusion.record(data[i].1, clf.predict(&features[i]));
    }
    let bal = balanced_accuracy(&confusion)
        .map_err(|e| LearnError::Config(format!("evaluation failed: {e}")))?;
    Ok(ProbeResult {
        classifier: clf,
        balanced_accuracy: bal,
        fraction,
        train_size: train_idx.len(),
        eval_size: eval_idx.len(),
    })
}

/// Two Gaussian clusters in `dim` dimensions, linearly separable by
/// construction. Returns vectors and 0/1 labels, deterministic in the seed.
pub fn two_cluster_dataset(
    seed: u64,
    n: usize,
    dim: usize,
    separation: f64,
    noise: f64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Random unit direction for the cluster axis.
    let mut axis: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in axis.iter_mut() {
        *v /= norm;
    }
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 0 { -1.0 } else { 1.0 };
        let point: Vec<f64> = axis
            .iter()
            .map(|&a| sign * a * separation / 2.0 + rng.gen_range(-1.0..1.0) * noise * 3.0f64.sqrt())
            .collect();
        data.push(point);
        labels.push(label);
    }
    (data, labels)
}

/// The synthetic pretraining corpus used by the toy trainer and its tests:
/// 400 points, 16 dimensions, two well-separated clusters.
pub fn default_toy_dataset(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    two_cluster_dataset(seed, 400, 16, 6.0, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_schedule(steps: usize) -> CosineSchedule {
        CosineSchedule { base_lr: 0.05, batch_size: 64, total_steps: steps }
    }

    #[test]
    fn zero_steps_is_an_error() {
        let (data, _) = default_toy_dataset(1);
        let err = train_toy_simsiam(
            &data,
            &AugmentPolicy::default(),
            &quick_schedule(10),
            &TrainOptions::new(1, 0),
        )
        .unwrap_err();
        assert!(matches!(err, LearnError::Config(_)));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let err = train_toy_simsiam(
            &[],
            &AugmentPolicy::default(),
            &quick_schedule(10),
            &TrainOptions::new(1, 10),
        )
        .unwrap_err();
        assert!(matches!(err, LearnError::Config(_)));
    }

    #[test]
    fn training_is_deterministic() {
        let (data, _) = default_toy_dataset(3);
        let run = |_: ()| {
            train_toy_simsiam(
                &data,
                &AugmentPolicy::default(),
                &quick_schedule(40),
                &TrainOptions::new(5, 40),
            )
            .unwrap()
        };
        let a = run(());
        let b = run(());
        assert_eq!(a.net.params_flat(), b.net.params_flat());
        assert_eq!(a.final_collapse, b.final_collapse);
    }

    #[test]
    fn stop_gradient_keeps_embeddings_spread() {
        let (data, _) = default_toy_dataset(7);
        let schedule = quick_schedule(2000);
        let healthy = train_toy_simsiam(
            &data,
            &AugmentPolicy::default(),
            &schedule,
            &TrainOptions::new(7, 2000),
        )
        .unwrap();
        let mut no_stop = TrainOptions::new(7, 2000);
        no_stop.stop_gradient = false;
        let collapsed =
            train_toy_simsiam(&data, &AugmentPolicy::default(), &schedule, &no_stop).unwrap();

        let healthy_floor = 1.0 / (16.0f64).sqrt();
        assert!(
            healthy.final_collapse > 0.5 * healthy_floor,
            "healthy run collapsed: {} vs floor {healthy_floor}",
            healthy.final_collapse
        );
        // Recorded reference value 0.209 for this seed, +-20%.
        assert!(
            (healthy.final_collapse - 0.209).abs() < 0.2 * 0.209,
            "healthy statistic drifted: {}",
            healthy.final_collapse
        );
        assert!(
            collapsed.final_collapse < 0.1 * healthy_floor,
            "run without stop-gradient failed to collapse: {}",
            collapsed.final_collapse
        );
        assert!(
            healthy.final_collapse > 3.0 * collapsed.final_collapse,
            "no separation: healthy {} vs collapsed {}",
            healthy.final_collapse,
            collapsed.final_collapse
        );
    }

    #[test]
    fn probe_freezes_encoder_and_separates_clusters() {
        let (data, labels) = default_toy_dataset(11);
        let run = train_toy_simsiam(
            &data,
            &AugmentPolicy::default(),
            &quick_schedule(400),
            &TrainOptions::new(11, 400),
        )
        .unwrap();
        let before = run.net.params_flat();
        let labeled: Vec<(Vec<f64>, usize)> =
            data.iter().cloned().zip(labels.iter().copied()).collect();
        let probe = linear_probe(
            &run.net,
            &labeled,
            2,
            1.0,
            &FocalLossParams::default(),
            &ProbeOptions::default(),
        )
        .unwrap();
        assert_eq!(run.net.params_flat(), before, "encoder changed during probing");
        assert!(probe.balanced_accuracy >= 0.95, "balanced acc {}", probe.balanced_accuracy);
    }

    #[test]
    fn probe_accuracy_roughly_monotone_in_fraction() {
        let (data, labels) = default_toy_dataset(13);
        let run = train_toy_simsiam(
            &data,
            &AugmentPolicy::default(),
            &quick_schedule(400),
            &TrainOptions::new(13, 400),
        )
        .unwrap();
        let labeled: Vec<(Vec<f64>, usize)> =
            data.iter().cloned().zip(labels.iter().copied()).collect();
        let mut prev: Option<f64> = None;
        for f in [0.01, 0.05, 0.10, 0.25, 1.0] {
            let probe = linear_probe(
                &run.net,
                &labeled,
                2,
                f,
                &FocalLossParams::default(),
                &ProbeOptions::default(),
            )
            .unwrap();
            if let Some(p) = prev {
                assert!(
                    probe.balanced_accuracy >= p - 0.02,
                    "accuracy dropped from {p} to {} at fraction {f}",
                    probe.balanced_accuracy
                );
            }
            prev = Some(probe.balanced_accuracy);
        }
    }

    #[test]
    fn probe_rejects_fraction_starving_a_class() {
        let (data, _) = two_cluster_dataset(5, 40, 8, 6.0, 0.5);
        // Mislabel: class 2 never appears.
        let labeled: Vec<(Vec<f64>, usize)> = data.into_iter().map(|x| (x, 0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ToyNet::init(
            ToyNetDims { input_dim: 8, hidden_dim: 8, embed_dim: 8, predictor_hidden: 8 },
            &mut rng,
        );
        let err = linear_probe(
            &net,
            &labeled,
            2,
            1.0,
            &FocalLossParams::default(),
            &ProbeOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, LearnError::Stratification(1)));
    }

    #[test]
    fn cluster_dataset_is_deterministic_and_balanced() {
        let (a, la) = two_cluster_dataset(9, 100, 8, 4.0, 0.3);
        let (b, _) = two_cluster_dataset(9, 100, 8, 4.0, 0.3);
        assert_eq!(a, b);
        assert_eq!(la.iter().filter(|&&l| l == 0).count(), 50);
    }
}
