//! Training arms and the per-arm measurements compared across them.

use std::time::Instant;

use crate::attribution::{self, AttributionConfig, AttributionResult, ClassRow};
use crate::dataset::SampleRecord;
use crate::error::Result;
use crate::localization;
use crate::model::{Model, ModelConfig};
use crate::sma::{self, EpochMetrics, ShuffleMode, TrainConfig};

/// A named training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub train: TrainConfig,
}

impl Arm {
    pub fn new(name: &str, base: &TrainConfig, mode: ShuffleMode, lambda: f64) -> Self {
        Arm {
            name: name.to_string(),
            train: TrainConfig {
                shuffle_mode: mode,
                lambda,
                ..*base
            },
        }
    }
}

/// The loss ablation ladder: no auxiliary losses, contrastive only,
/// background-only shuffling, two-way shuffling.
pub fn ablation_arms(base: &TrainConfig) -> Vec<Arm> {
    let lambda = base.lambda;
    vec![
        Arm::new("baseline", base, ShuffleMode::Off, 0.0),
        Arm::new("contrastive", base, ShuffleMode::Off, lambda),
        Arm::new("shuffle_background", base, ShuffleMode::BackgroundOnly, lambda),
        Arm::new("shuffle_two_way", base, ShuffleMode::TwoWay, lambda),
    ]
}

#[derive(Debug, Clone)]
pub struct TrainedArm {
    pub arm: Arm,
    pub seed: u64,
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub seconds: f64,
}

/// Trains `arm` from a fresh model; `seed` drives both initialization and
/// the run RNG.
pub fn train_arm(arm: &Arm, model_config: ModelConfig, seed: u64, train: &[SampleRecord]) -> Result<TrainedArm> {
    let start = Instant::now();
    let cfg = TrainConfig { seed, ..arm.train };
    let mut model = Model::new(model_config, seed)?;
    let metrics = sma::train(&cfg, train, &mut model)?;
    Ok(TrainedArm {
        arm: Arm {
            name: arm.name.clone(),
            train: cfg,
        },
        seed,
        model,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Bias-aligned and bias-conflicting subsets of a split.
pub fn bias_subsets(samples: &[SampleRecord]) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    samples.iter().cloned().partition(|s| s.bias_aligned)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationSummary {
    pub all: f64,
    pub aligned: f64,
    pub conflicting: f64,
}

pub fn localization_summary(model: &Model, samples: &[SampleRecord], tau: f64) -> Result<LocalizationSummary> {
    let (aligned, conflicting) = bias_subsets(samples);
    let score = |set: &[SampleRecord]| -> Result<f64> {
        if set.is_empty() {
            return Ok(f64::NAN);
        }
        Ok(localization::evaluate(model, set, tau)?.0.miou)
    };
    Ok(LocalizationSummary {
        all: score(samples)?,
        aligned: score(&aligned)?,
        conflicting: score(&conflicting)?,
    })
}

/// Per-class SUR/BAR over every bias-aligned sample.
pub fn aligned_attribution(
    model: &Model,
    samples: &[SampleRecord],
    cfg: &AttributionConfig,
) -> Result<(Vec<ClassRow>, Vec<AttributionResult>)> {
    let (aligned, _) = bias_subsets(samples);
    let ids: Vec<usize> = (0..aligned.len()).collect();
    let results = attribution::attribute_all(model, &aligned, &ids, cfg)?;
    Ok((
        attribution::summarize(&results, "aligned", model.config.num_classes),
        results,
    ))
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// True when `values` is strictly increasing except for at most
/// `allowed` adjacent inversions.
pub fn increasing_with_inversions(values: &[f64], allowed: usize) -> bool {
    values.windows(2).filter(|w| w[1] <= w[0] || w[1].is_nan()).count() <= allowed
}
