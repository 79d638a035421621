//! Integrated gradients and the object/background attribution ratios.

use std::collections::BTreeMap;

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::pnm::Image8;
use crate::tensor::Tensor;

/// Anything with differentiable per-class logits over image batches.
pub trait Attributable: Sync {
    fn num_classes(&self) -> usize;
    /// `N×C×H×W` → `N×K` logits.
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

/// Attribution runs through the `f(z_o)` branch.
impl Attributable for Model {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.classify(&self.forward(images)?.z_o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// All-zero (black) image.
    Zero,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributionConfig {
    /// Number of gradient evaluations `m`.
    pub steps: usize,
    pub baseline: Baseline,
    /// Interpolation points per forward/backward pass.
    pub batch: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            steps: 128,
            baseline: Baseline::Zero,
            batch: 16,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("IG steps and batch must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Shape of one image, `[C, H, W]`.
pub type ImageShape = [usize; 3];

fn baseline_image(b: Baseline, len: usize) -> Vec<f64> {
    match b {
        Baseline::Zero => vec![0.0; len],
        Baseline::Constant(v) => vec![v; len],
    }
}

fn target_sum(model: &(impl Attributable + ?Sized), x: &Tensor, target: usize) -> Result<Tensor> {
    let logits = model.logits(x)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut pick = vec![0.0; n * k];
    (0..n).for_each(|i| pick[i * k + target] = 1.0);
    logits.mul(&Tensor::new(&[n, k], pick)?)?.sum()
}

/// Target-class logits of a few images.
pub fn target_logits(
    model: &(impl Attributable + ?Sized),
    images: &[&[f64]],
    shape: ImageShape,
    target: usize,
) -> Result<Vec<f64>> {
    let data: Vec<f64> = images.concat();
    let x = Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)?;
    let logits = model.logits(&x)?;
    let k = logits.shape()[1];
    Ok(logits.data().chunks(k).map(|r| r[target]).collect())
}

/// Per-channel integrated gradients of the target logit:
/// `(x − x₀) · (1/m) Σ_{k=1..m} ∇f(x₀ + (k/m)(x − x₀))`.
pub fn integrated_gradients_full(
    model: &(impl Attributable + ?Sized),
    image: &[f64],
    shape: ImageShape,
    target: usize,
    cfg: &AttributionConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let len: usize = shape.iter().product();
    if image.len() != len {
        return Err(Error::shape(
            "integrated_gradients",
            format!("image has {} values for shape {shape:?}", image.len()),
        ));
    }
    if target >= model.num_classes() {
        return Err(Error::Contract(format!(
            "target class {target} out of range for {} classes",
            model.num_classes()
        )));
    }
    let base = baseline_image(cfg.baseline, len);
    let diff: Vec<f64> = image.iter().zip(&base).map(|(x, b)| x - b).collect();
    let m = cfg.steps;
    let mut acc = vec![0.0; len];
    let mut k = 1;
    while k <= m {
        let count = cfg.batch.min(m - k + 1);
        let mut pts = Vec::with_capacity(count * len);
        for j in 0..count {
            let a = (k + j) as f64 / m as f64;
            pts.extend(base.iter().zip(&diff).map(|(b, d)| b + a * d));
        }
        let x = Tensor::param(&[count, shape[0], shape[1], shape[2]], pts)?;
        target_sum(model, &x, target)?.backward()?;
        // a model that ignores its input leaves no gradient
        if let Some(g) = x.grad() {
            for row in g.chunks_exact(len) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        k += count;
    }
    Ok(acc.iter().zip(&diff).map(|(g, d)| d * g / m as f64).collect())
}

/// Channel-summed IG map, `H×W`.
pub fn integrated_gradients(
    model: &(impl Attributable + ?Sized),
    image: &[f64],
    shape: ImageShape,
    target: usize,
    cfg: &AttributionConfig,
) -> Result<Vec<f64>> {
    let full = integrated_gradients_full(model, image, shape, target, cfg)?;
    Ok(channel_sum(&full, shape))
}

pub fn channel_sum(full: &[f64], shape: ImageShape) -> Vec<f64> {
    let hw = shape[1] * shape[2];
    let mut map = vec![0.0; hw];
    for c in full.chunks_exact(hw) {
        map.iter_mut().zip(c).for_each(|(m, v)| *m += v);
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Completeness {
    /// `|Σ I − (f(x) − f(x₀))|`.
    pub gap: f64,
    /// `gap / |f(x) − f(x₀)|`, infinite when the difference is zero but the
    /// gap is not.
    pub relative: f64,
    pub delta_f: f64,
}

pub fn completeness_check(
    ig_map: &[f64],
    model: &(impl Attributable + ?Sized),
    image: &[f64],
    shape: ImageShape,
    target: usize,
    baseline: Baseline,
) -> Result<Completeness> {
    let base = baseline_image(baseline, image.len());
    let f = target_logits(model, &[image, &base], shape, target)?;
    let delta_f = f[0] - f[1];
    let gap = (ig_map.iter().sum::<f64>() - delta_f).abs();
    let relative = if gap == 0.0 {
        0.0
    } else if delta_f == 0.0 {
        f64::INFINITY
    } else {
        gap / delta_f.abs()
    };
    Ok(Completeness { gap, relative, delta_f })
}

/// Object and background pixel sets for one target class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub object: Vec<bool>,
    pub background: Vec<bool>,
}

impl RegionMask {
    /// `mask` holds class id + 1 per pixel, 0 for background. Pixels of
    /// other classes belong to neither region.
    pub fn for_class(mask: &[u8], target: usize) -> Self {
        RegionMask {
            object: mask.iter().map(|&m| m as usize == target + 1).collect(),
            background: mask.iter().map(|&m| m == 0).collect(),
        }
    }

    fn sums(&self, map: &[f64]) -> Result<(f64, f64)> {
        if map.len() != self.object.len() || map.len() != self.background.len() {
            return Err(Error::shape(
                "region",
                format!("map of {} pixels, mask of {}", map.len(), self.object.len()),
            ));
        }
        if !self.object.contains(&true) || !self.background.contains(&true) {
            return Err(Error::Contract("empty object or background region".into()));
        }
        let (mut o, mut b) = (0.0, 0.0);
        for ((v, &io), &ib) in map.iter().zip(&self.object).zip(&self.background) {
            let p = v.max(0.0);
            if io {
                o += p;
            } else if ib {
                b += p;
            }
        }
        Ok((o, b))
    }
}

pub const SUR_EPS: f64 = 1e-7;
pub const SUR_CAP: f64 = 1e6;

/// A ratio plus whether it fell into a degenerate regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub flagged: bool,
}

/// Positive object mass over positive background mass, denominator floored
/// at [`SUR_EPS`], capped at [`SUR_CAP`].
pub fn sur(ig_map: &[f64], region: &RegionMask) -> Result<Ratio> {
    let (o, b) = region.sums(ig_map)?;
    let value = (o / b.max(SUR_EPS)).min(SUR_CAP);
    Ok(Ratio {
        value,
        flagged: b < SUR_EPS || value >= SUR_CAP,
    })
}

/// Positive background mass over positive total mass; 0 and flagged when
/// there is no positive mass.
pub fn bar(ig_map: &[f64], region: &RegionMask) -> Result<Ratio> {
    let (o, b) = region.sums(ig_map)?;
    if o + b <= 0.0 {
        return Ok(Ratio {
            value: 0.0,
            flagged: true,
        });
    }
    Ok(Ratio {
        value: b / (o + b),
        flagged: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub sample: usize,
    pub target: usize,
    pub ig_map: Vec<f64>,
    pub sur: Ratio,
    pub bar: Ratio,
    pub completeness: Completeness,
}

pub fn attribute_sample(
    model: &(impl Attributable + ?Sized),
    sample: &SampleRecord,
    sample_id: usize,
    target: usize,
    cfg: &AttributionConfig,
) -> Result<AttributionResult> {
    let shape = [3, sample.height, sample.width];
    let ig_map = integrated_gradients(model, &sample.image, shape, target, cfg)?;
    let region = RegionMask::for_class(&sample.object_mask, target);
    Ok(AttributionResult {
        sample: sample_id,
        target,
        sur: sur(&ig_map, &region)?,
        bar: bar(&ig_map, &region)?,
        completeness: completeness_check(&ig_map, model, &sample.image, shape, target, cfg.baseline)?,
        ig_map,
    })
}

/// One row of the per-class table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: usize,
    pub split: String,
    pub n: usize,
    /// Means over unflagged results only.
    pub mean_sur: f64,
    pub mean_bar: f64,
    pub mean_completeness_gap: f64,
    pub flagged: usize,
}

pub const TABLE_HEADER: &str = "class,split,n,mean_sur,mean_bar,mean_completeness_gap";

pub fn table_csv(rows: &[ClassRow]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.class, r.split, r.n, r.mean_sur, r.mean_bar, r.mean_completeness_gap
        ));
    }
    out
}

/// IG for every (sample, present class) pair, parallel across pairs.
pub fn attribute_all(
    model: &Model,
    samples: &[SampleRecord],
    ids: &[usize],
    cfg: &AttributionConfig,
) -> Result<Vec<AttributionResult>> {
    let frozen = model.frozen();
    let jobs: Vec<(usize, usize)> = ids
        .iter()
        .flat_map(|&i| samples[i].classes().into_iter().map(move |c| (i, c)))
        .collect();
    par::map(jobs.len(), |j| {
        let (i, c) = jobs[j];
        attribute_sample(&frozen, &samples[i], i, c, cfg)
    })
    .into_iter()
    .collect()
}

/// Per-class means over one split's results.
pub fn summarize(results: &[AttributionResult], split: &str, num_classes: usize) -> Vec<ClassRow> {
    let mut by_class: BTreeMap<usize, Vec<&AttributionResult>> = BTreeMap::new();
    for r in results {
        by_class.entry(r.target).or_default().push(r);
    }
    let mut rows = Vec::new();
    for class in 0..num_classes {
        let Some(rs) = by_class.get(&class) else {
            log::warn!("class {class} has no {split} samples; skipped");
            continue;
        };
        let ok: Vec<_> = rs.iter().filter(|r| !r.sur.flagged && !r.bar.flagged).collect();
        let flagged = rs.len() - ok.len();
        if flagged > 0 {
            log::warn!("class {class} {split}: {flagged} degenerate attribution(s) left out of means");
        }
        let mean = |f: &dyn Fn(&AttributionResult) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        rows.push(ClassRow {
            class,
            split: split.to_string(),
            n: rs.len(),
            mean_sur: mean(&|r| r.sur.value),
            mean_bar: mean(&|r| r.bar.value),
            mean_completeness_gap: rs.iter().map(|r| r.completeness.gap).sum::<f64>() / rs.len() as f64,
            flagged,
        });
    }
    rows
}

/// Per-class SUR/BAR tables for the bias-aligned and bias-conflicting
/// splits, plus the raw results.
pub fn pair_analysis(
    model: &Model,
    samples: &[SampleRecord],
    cfg: &AttributionConfig,
) -> Result<(Vec<ClassRow>, Vec<AttributionResult>)> {
    let k = model.config.num_classes;
    let (aligned, conflicting): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].bias_aligned);
    let mut results = attribute_all(model, samples, &aligned, cfg)?;
    let mut rows = summarize(&results, "aligned", k);
    let conf = attribute_all(model, samples, &conflicting, cfg)?;
    rows.extend(summarize(&conf, "conflicting", k));
    results.extend(conf);
    Ok((rows, results))
}

/// Gray heatmap: 128 is zero, the largest magnitude maps to 1 or 255.
pub fn heatmap(ig_map: &[f64], width: usize, height: usize) -> Image8 {
    let peak = ig_map.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let px = ig_map
        .iter()
        .map(|&v| {
            let s = if peak > 0.0 { v / peak } else { 0.0 };
            (128.0 + 127.0 * s).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image8::new(width, height, 1, px)
}
