//! Loss stack, feature shuffling and the training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{clip_scale, global_grad_norm, poly_lr, sgd_step_scaled, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShuffleMode {
    Off,
    BackgroundOnly,
    TwoWay,
    Interpolate,
}

impl ShuffleMode {
    pub const ALL: [ShuffleMode; 4] = [
        ShuffleMode::Off,
        ShuffleMode::BackgroundOnly,
        ShuffleMode::TwoWay,
        ShuffleMode::Interpolate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShuffleMode::Off => "off",
            ShuffleMode::BackgroundOnly => "background_only",
            ShuffleMode::TwoWay => "two_way",
            ShuffleMode::Interpolate => "interpolate",
        }
    }
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShuffleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShuffleMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "shuffle_mode must be one of off, background_only, two_way, interpolate; got {s}"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// First (0-based) epoch with the shuffle loss switched on.
    pub t_aug: usize,
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub eps_log: f64,
    pub shuffle_mode: ShuffleMode,
    /// Beta(α, α) concentration for interpolate mode.
    pub alpha: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            t_aug: 6,
            lambda: 0.5,
            lr: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            batch_size: 16,
            eps_log: 1e-7,
            shuffle_mode: ShuffleMode::TwoWay,
            alpha: 1.0,
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be ≥ 1".into());
        }
        if self.t_aug > self.epochs {
            return fail(format!("t_aug {} exceeds epochs {}", self.t_aug, self.epochs));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.poly_power >= 0.0) {
            return fail("lr must be > 0, momentum in [0, 1), poly_power ≥ 0".into());
        }
        if !(self.eps_log > 0.0 && self.eps_log < 0.5) {
            return fail(format!("eps_log must lie in (0, 0.5), got {}", self.eps_log));
        }
        if self.batch_size == 0 || (self.shuffle_mode != ShuffleMode::Off && self.batch_size < 2) {
            return fail(format!(
                "batch_size {} too small (shuffling needs ≥ 2)",
                self.batch_size
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("grad_clip must be ≥ 0, got {}", self.grad_clip));
        }
        if self.shuffle_mode == ShuffleMode::Interpolate && !(self.alpha > 0.0) {
            return fail(format!("alpha must be > 0, got {}", self.alpha));
        }
        Ok(())
    }

    /// Whether the shuffle loss contributes during `epoch` (0-based).
    pub fn shuffle_active(&self, epoch: usize) -> bool {
        self.shuffle_mode != ShuffleMode::Off && epoch >= self.t_aug
    }
}

/// Sigmoid + binary cross-entropy, averaged over every element. `1 − p` is
/// evaluated as `σ(−z)` so saturated logits stay exact; both probabilities
/// are floored at `eps`.
pub fn bce_with_logits(logits: &Tensor, targets: &[f64], eps: f64) -> Result<Tensor> {
    if logits.numel() != targets.len() {
        return Err(Error::shape(
            "bce",
            format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
        ));
    }
    let shape = logits.shape().to_vec();
    let y = Tensor::new(&shape, targets.to_vec())?;
    let not_y = Tensor::new(&shape, targets.iter().map(|t| 1.0 - t).collect())?;
    let log_p = logits.sigmoid().clamp_min(eps).log()?;
    let log_q = logits.scalar_mul(-1.0).sigmoid().clamp_min(eps).log()?;
    Ok(y.mul(&log_p)?.add(&not_y.mul(&log_q)?)?.mean()?.scalar_mul(-1.0))
}

/// `BCE(f(z_o), y) + BCE(f(z_b), 0)`.
pub fn classification_loss(logits_o: &Tensor, logits_b: &Tensor, y: &[f64], eps: f64) -> Result<Tensor> {
    if logits_o.shape() != logits_b.shape() {
        return Err(Error::shape(
            "classification_loss",
            format!("{:?} vs {:?}", logits_o.shape(), logits_b.shape()),
        ));
    }
    let zeros = vec![0.0; y.len()];
    bce_with_logits(logits_o, y, eps)?.add(&bce_with_logits(logits_b, &zeros, eps)?)
}

/// `−mean log(max(1 − cos(z_o_i, z_b_i), eps))`.
pub fn contrastive_loss(z_o: &Tensor, z_b: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(z_o
        .cosine_similarity(z_b, eps)?
        .scalar_mul(-1.0)
        .add_scalar(1.0)
        .clamp_min(eps)
        .log()?
        .mean()?
        .scalar_mul(-1.0))
}

#[derive(Debug, Clone)]
pub struct ShuffledBatch {
    /// Row i: `[z_o_i, z_b_{perm_b(i)}]`.
    pub z_sb: Tensor,
    /// Row i: `[z_o_{perm_o(i)}, z_b_i]`.
    pub z_so: Tensor,
    pub perm_b: Vec<usize>,
    pub perm_o: Vec<usize>,
    /// `y_hat_i = y_{perm_o(i)}`, row-major `N×K`.
    pub y_hat: Vec<f64>,
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn gather_label_rows(y: &[f64], perm: &[usize]) -> Vec<f64> {
    let k = y.len() / perm.len();
    perm.iter()
        .flat_map(|&j| y[j * k..(j + 1) * k].iter().copied())
        .collect()
}

/// Builds both shuffled concatenations for the given permutations. The
/// background component is detached in both.
pub fn shuffle_with(
    z_o: &Tensor,
    z_b: &Tensor,
    y: &[f64],
    perm_b: Vec<usize>,
    perm_o: Vec<usize>,
) -> Result<ShuffledBatch> {
    let n = z_o.shape()[0];
    if n < 2 {
        return Err(Error::Config(format!("shuffling needs a batch of ≥ 2, got {n}")));
    }
    if z_b.shape() != z_o.shape() || !y.len().is_multiple_of(n) {
        return Err(Error::shape(
            "shuffle",
            format!("z_o {:?}, z_b {:?}, {} labels", z_o.shape(), z_b.shape(), y.len()),
        ));
    }
    for p in [&perm_b, &perm_o] {
        let mut seen = vec![false; n];
        if p.len() != n || !p.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true)) {
            return Err(Error::Contract(format!("not a permutation of 0..{n}: {p:?}")));
        }
    }
    let zb = z_b.detach();
    let z_sb = Tensor::concat(&[z_o.clone(), zb.gather_rows(&perm_b)?], 1)?;
    let z_so = Tensor::concat(&[z_o.gather_rows(&perm_o)?, zb], 1)?;
    let y_hat = gather_label_rows(y, &perm_o);
    Ok(ShuffledBatch {
        z_sb,
        z_so,
        perm_b,
        perm_o,
        y_hat,
    })
}

/// Draws independent Fisher–Yates permutations and shuffles.
pub fn shuffle_augment(z_o: &Tensor, z_b: &Tensor, y: &[f64], rng: &mut ChaCha8Rng) -> Result<ShuffledBatch> {
    let n = z_o.shape()[0];
    if n < 2 {
        return Err(Error::Config(format!("shuffling needs a batch of ≥ 2, got {n}")));
    }
    let perm_b = random_permutation(n, rng);
    let perm_o = random_permutation(n, rng);
    shuffle_with(z_o, z_b, y, perm_b, perm_o)
}

/// The two shuffle terms `(BCE(f_s(z_sb), y), BCE(f_s(z_so), y_hat))`.
pub fn shuffle_loss(model: &Model, sb: &ShuffledBatch, y: &[f64], eps: f64) -> Result<(Tensor, Tensor)> {
    let t1 = bce_with_logits(&model.classify_shuffled(&sb.z_sb)?, y, eps)?;
    let t2 = bce_with_logits(&model.classify_shuffled(&sb.z_so)?, &sb.y_hat, eps)?;
    Ok((t1, t2))
}

/// Feature-space interpolation: `z̃_i = δ_i z_i + (1 − δ_i) z_{perm(i)}` with
/// `z_i = [z_o_i, z_b_i]`, labels mixed the same way.
pub fn interpolate_with(
    z_o: &Tensor,
    z_b: &Tensor,
    y: &[f64],
    perm: &[usize],
    deltas: &[f64],
) -> Result<(Tensor, Vec<f64>)> {
    let n = z_o.shape()[0];
    if perm.len() != n || deltas.len() != n || !y.len().is_multiple_of(n) {
        return Err(Error::shape(
            "interpolate",
            format!(
                "batch {n}, perm {}, deltas {}, labels {}",
                perm.len(),
                deltas.len(),
                y.len()
            ),
        ));
    }
    let z = Tensor::concat(&[z_o.clone(), z_b.clone()], 1)?;
    let width = z.shape()[1];
    let row_scale = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        Tensor::new(
            &[n, width],
            deltas.iter().flat_map(|&d| std::iter::repeat_n(f(d), width)).collect(),
        )
    };
    let mixed = z
        .mul(&row_scale(&|d| d)?)?
        .add(&z.gather_rows(perm)?.mul(&row_scale(&|d| 1.0 - d)?)?)?;
    let k = y.len() / n;
    let mut y_mix = vec![0.0; y.len()];
    for i in 0..n {
        let (d, j) = (deltas[i], perm[i]);
        for c in 0..k {
            y_mix[i * k + c] = d * y[i * k + c] + (1.0 - d) * y[j * k + c];
        }
    }
    Ok((mixed, y_mix))
}

pub fn interpolate_combine(
    z_o: &Tensor,
    z_b: &Tensor,
    y: &[f64],
    rng: &mut ChaCha8Rng,
    alpha: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("alpha must be > 0, got {alpha}: {e}")))?;
    let n = z_o.shape()[0];
    let perm = random_permutation(n, rng);
    let deltas: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
    interpolate_with(z_o, z_b, y, &perm, &deltas)
}

/// `L_cls + λ·L_contr (+ L_shuffle from epoch t_aug on)`. A zero λ leaves
/// the contrastive term out of the graph entirely.
pub fn total_loss(
    cls: &Tensor,
    contr: &Tensor,
    shuffle: Option<&Tensor>,
    lambda: f64,
    epoch: usize,
    t_aug: usize,
) -> Result<Tensor> {
    let mut total = cls.clone();
    if lambda != 0.0 {
        total = total.add(&contr.scalar_mul(lambda))?;
    }
    if let (Some(s), true) = (shuffle, epoch >= t_aug) {
        total = total.add(s)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_contr: f64,
    pub loss_shuffle: f64,
    pub train_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_cls,loss_contr,loss_shuffle,train_acc";

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.lr, m.loss_cls, m.loss_contr, m.loss_shuffle, m.train_acc
        ));
    }
    out
}

/// Stacks the listed samples into an `N×3×H×W` tensor and a row-major label
/// matrix.
pub fn batch(samples: &[SampleRecord], idx: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let first = samples
        .get(idx[0])
        .ok_or_else(|| Error::Contract("batch index out of range".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(idx.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(idx.len() * first.label.len());
    for &i in idx {
        let s = &samples[i];
        if (s.height, s.width) != (h, w) {
            return Err(Error::shape("batch", "images differ in size".to_string()));
        }
        data.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.label);
    }
    Ok((Tensor::new(&[idx.len(), 3, h, w], data)?, labels))
}

/// Rows whose thresholded logits match every label.
fn exact_matches(logits: &[f64], y: &[f64], k: usize) -> usize {
    logits
        .chunks(k)
        .zip(y.chunks(k))
        .filter(|(l, t)| l.iter().zip(*t).all(|(&z, &t)| (z > 0.0) == (t > 0.5)))
        .count()
}

/// Runs the full schedule, mutating `model`. Deterministic in
/// `config.seed` and the sample order.
pub fn train(config: &TrainConfig, samples: &[SampleRecord], model: &mut Model) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let k = model.config.num_classes;
    if let Some(s) = samples.iter().find(|s| s.label.len() != k) {
        return Err(Error::Contract(format!(
            "sample has {} labels, model has {k} classes",
            s.label.len()
        )));
    }
    let bs = config.batch_size;
    let per_epoch = samples.len() / bs;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} samples cannot fill one batch of {bs}",
            samples.len()
        )));
    }
    let max_iter = per_epoch * config.epochs;
    let eps = config.eps_log;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut log = Vec::with_capacity(config.epochs);
    let mut iter = 0;
    for epoch in 0..config.epochs {
        let order = random_permutation(samples.len(), &mut rng);
        let active = config.shuffle_active(epoch);
        let (mut s_cls, mut s_contr, mut s_shuf) = (0.0, 0.0, 0.0);
        let mut correct = 0;
        let epoch_lr = poly_lr(config.lr, iter, max_iter, config.poly_power);
        for b in 0..per_epoch {
            let lr = poly_lr(config.lr, iter, max_iter, config.poly_power);
            let (x, y) = batch(samples, &order[b * bs..(b + 1) * bs])?;
            let feats = model.forward(&x)?;
            let logits_o = model.classify(&feats.z_o)?;
            let logits_b = model.classify(&feats.z_b)?;
            let cls = classification_loss(&logits_o, &logits_b, &y, eps)?;
            let contr = contrastive_loss(&feats.z_o, &feats.z_b, eps)?;
            let shuffle = if active {
                Some(match config.shuffle_mode {
                    ShuffleMode::BackgroundOnly | ShuffleMode::TwoWay => {
                        let sb = shuffle_augment(&feats.z_o, &feats.z_b, &y, &mut rng)?;
                        let (t1, t2) = shuffle_loss(model, &sb, &y, eps)?;
                        if config.shuffle_mode == ShuffleMode::TwoWay {
                            t1.add(&t2)?
                        } else {
                            t1
                        }
                    }
                    ShuffleMode::Interpolate => {
                        let (z, y_mix) = interpolate_combine(&feats.z_o, &feats.z_b, &y, &mut rng, config.alpha)?;
                        bce_with_logits(&model.classify_shuffled(&z)?, &y_mix, eps)?
                    }
                    ShuffleMode::Off => unreachable!("inactive"),
                })
            } else {
                None
            };
            let total = total_loss(&cls, &contr, shuffle.as_ref(), config.lambda, epoch, config.t_aug)?;
            total.backward()?;
            let scale = clip_scale(global_grad_norm(model.params()), config.grad_clip);
            sgd_step_scaled(
                model.params_mut().iter_mut().filter(|p| p.grad().is_some()),
                lr,
                config.momentum,
                scale,
            )?;

            s_cls += cls.item()?;
            s_contr += contr.item()?;
            s_shuf += shuffle.as_ref().map_or(Ok(0.0), Tensor::item)?;
            correct += exact_matches(logits_o.data(), &y, k);
            iter += 1;
        }
        let nb = per_epoch as f64;
        let m = EpochMetrics {
            epoch,
            lr: epoch_lr,
            loss_cls: s_cls / nb,
            loss_contr: s_contr / nb,
            loss_shuffle: s_shuf / nb,
            train_acc: correct as f64 / (per_epoch * bs) as f64,
        };
        if !(m.loss_cls.is_finite() && m.loss_contr.is_finite() && m.loss_shuffle.is_finite()) {
            return Err(Error::Contract(format!("non-finite loss in epoch {epoch}: {m:?}")));
        }
        log::info!(
            "epoch {epoch}: lr {:.4} cls {:.4} contr {:.4} shuffle {:.4} acc {:.3}",
            m.lr,
            m.loss_cls,
            m.loss_contr,
            m.loss_shuffle,
            m.train_acc
        );
        log.push(m);
    }
    Ok(log)
}

/// Logits of `f(z_o)` for every sample, evaluated in batches on a frozen
/// copy of the model.
pub fn predict(model: &Model, samples: &[SampleRecord], batch_size: usize) -> Result<Vec<f64>> {
    let frozen = model.frozen();
    let chunks: Vec<Vec<usize>> = (0..samples.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    let out = crate::par::map(chunks.len(), |c| -> Result<Vec<f64>> {
        let (x, _) = batch(samples, &chunks[c])?;
        let f = frozen.forward(&x)?;
        Ok(frozen.classify(&f.z_o)?.to_vec())
    });
    Ok(out.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Exact-match multi-label accuracy of `f(z_o)` at probability 0.5.
pub fn accuracy(model: &Model, samples: &[SampleRecord]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let k = model.config.num_classes;
    let logits = predict(model, samples, 32)?;
    let y: Vec<f64> = samples.iter().flat_map(|s| s.label.iter().copied()).collect();
    Ok(exact_matches(&logits, &y, k) as f64 / samples.len() as f64)
}
