//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sma_core::attribution::{AttributionConfig, Baseline};
use sma_core::dataset::DatasetSpec;
use sma_core::localization::DEFAULT_TAU;
use sma_core::model::ModelConfig;
use sma_core::sma::TrainConfig;
use sma_core::{Error, Result};

/// Every accepted key, in template order.
pub const KEYS: &[&str] = &[
    "data_seed",
    "num_classes",
    "num_backgrounds",
    "bias_ratio",
    "image_size",
    "train_samples",
    "val_samples",
    "max_objects",
    "data_dir",
    "seed",
    "channels",
    "attn_dim",
    "epochs",
    "t_aug",
    "lambda",
    "lr",
    "momentum",
    "poly_power",
    "batch_size",
    "eps_log",
    "shuffle_mode",
    "alpha",
    "grad_clip",
    "ig_steps",
    "ig_baseline",
    "ig_batch",
    "heatmaps",
    "tau",
];

/// Keys that must appear in every config file.
pub const REQUIRED: &[&str] = &["data_seed", "data_dir", "seed"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub data_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    /// Heatmaps written per bias split by `analyze`.
    pub heatmaps: usize,
    pub tau: f64,
}

fn parse_baseline(v: &str) -> Option<Baseline> {
    if v == "zero" {
        return Some(Baseline::Zero);
    }
    let c: f64 = v.strip_prefix("constant:")?.parse().ok()?;
    c.is_finite().then_some(Baseline::Constant(c))
}

fn format_baseline(b: Baseline) -> String {
    match b {
        Baseline::Zero => "zero".into(),
        Baseline::Constant(c) => format!("constant:{c}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", no + 1)));
            }
            if values.insert(k, v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        for key in REQUIRED {
            if !values.contains_key(key) {
                return Err(Error::Config(format!("missing required key `{key}`")));
            }
        }

        let mut cfg = RunConfig {
            dataset: DatasetSpec::default(),
            data_dir: PathBuf::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            heatmaps: 8,
            tau: DEFAULT_TAU,
        };
        for (&k, &v) in &values {
            let bad = || Error::Config(format!("bad value for `{k}`: `{v}`"));
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            match k {
                "data_seed" => cfg.dataset.seed = num!(),
                "num_classes" => {
                    cfg.dataset.num_classes = num!();
                    cfg.model.num_classes = cfg.dataset.num_classes;
                }
                "num_backgrounds" => cfg.dataset.num_backgrounds = num!(),
                "bias_ratio" => cfg.dataset.bias_ratio = num!(),
                "image_size" => cfg.dataset.image_size = num!(),
                "train_samples" => cfg.dataset.train_samples = num!(),
                "val_samples" => cfg.dataset.val_samples = num!(),
                "max_objects" => cfg.dataset.max_objects = num!(),
                "data_dir" => cfg.data_dir = PathBuf::from(v),
                "seed" => cfg.train.seed = num!(),
                "channels" => cfg.model.channels = num!(),
                "attn_dim" => cfg.model.attn_dim = num!(),
                "epochs" => cfg.train.epochs = num!(),
                "t_aug" => cfg.train.t_aug = num!(),
                "lambda" => cfg.train.lambda = num!(),
                "lr" => cfg.train.lr = num!(),
                "momentum" => cfg.train.momentum = num!(),
                "poly_power" => cfg.train.poly_power = num!(),
                "batch_size" => cfg.train.batch_size = num!(),
                "eps_log" => cfg.train.eps_log = num!(),
                "shuffle_mode" => cfg.train.shuffle_mode = v.parse()?,
                "alpha" => cfg.train.alpha = num!(),
                "grad_clip" => cfg.train.grad_clip = num!(),
                "ig_steps" => cfg.attribution.steps = num!(),
                "ig_baseline" => cfg.attribution.baseline = parse_baseline(v).ok_or_else(bad)?,
                "ig_batch" => cfg.attribution.batch = num!(),
                "heatmaps" => cfg.heatmaps = num!(),
                "tau" => cfg.tau = num!(),
                _ => unreachable!("key list and parser disagree on `{k}`"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.attribution.validate()?;
        if self.model.channels == 0 || self.model.attn_dim == 0 {
            return Err(Error::Config("channels and attn_dim must be ≥ 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }

    /// Canonical text listing every key, parseable by [`RunConfig::parse`].
    pub fn echo(&self) -> String {
        let d = &self.dataset;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("data_seed", d.seed.to_string());
        kv("num_classes", d.num_classes.to_string());
        kv("num_backgrounds", d.num_backgrounds.to_string());
        kv("bias_ratio", d.bias_ratio.to_string());
        kv("image_size", d.image_size.to_string());
        kv("train_samples", d.train_samples.to_string());
        kv("val_samples", d.val_samples.to_string());
        kv("max_objects", d.max_objects.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("seed", t.seed.to_string());
        kv("channels", self.model.channels.to_string());
        kv("attn_dim", self.model.attn_dim.to_string());
        kv("epochs", t.epochs.to_string());
        kv("t_aug", t.t_aug.to_string());
        kv("lambda", t.lambda.to_string());
        kv("lr", t.lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("poly_power", t.poly_power.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("eps_log", t.eps_log.to_string());
        kv("shuffle_mode", t.shuffle_mode.name().to_string());
        kv("alpha", t.alpha.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("ig_steps", self.attribution.steps.to_string());
        kv("ig_baseline", format_baseline(self.attribution.baseline));
        kv("ig_batch", self.attribution.batch.to_string());
        kv("heatmaps", self.heatmaps.to_string());
        kv("tau", self.tau.to_string());
        out
    }

    /// Echo with the training seed removed, so seed sweeps of one
    /// configuration share a hash.
    pub fn echo_without_seed(&self) -> String {
        self.echo()
            .lines()
            .filter(|l| !l.starts_with("seed ="))
            .map(|l| format!("{l}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "data_seed = 1\ndata_dir = d\nseed = 3\n";

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.dataset.seed, 1);
        assert_eq!(
            cfg.train,
            TrainConfig {
                seed: 3,
                ..TrainConfig::default()
            }
        );
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
        for key in KEYS {
            assert!(cfg.echo().contains(&format!("{key} = ")), "{key} missing from echo");
        }
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("data_dir = d\nseed = 0\n").unwrap_err();
        assert!(err.to_string().contains("data_seed"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}lamda = 0.3\n")).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}lambda = x\n")).unwrap_err();
        assert!(matches!(err, Error::Config(_)) && err.to_string().contains("lambda"));
        assert!(RunConfig::parse(&format!("{MINIMAL}seed = 4\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}tau = 1.5\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}shuffle_mode = sideways\n")).is_err());
    }

    #[test]
    fn shipped_template_lists_every_key_at_its_default() {
        let text = include_str!("../../../configs/default.cfg");
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.dataset, DatasetSpec::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.attribution, AttributionConfig::default());
        for key in KEYS {
            assert!(text.contains(&format!("\n{key} = ")), "{key} missing from template");
        }
    }

    #[test]
    fn baselines_parse() {
        let cfg = RunConfig::parse(&format!("{MINIMAL}ig_baseline = constant:0.5\n")).unwrap();
        assert_eq!(cfg.attribution.baseline, Baseline::Constant(0.5));
        assert!(RunConfig::parse(&format!("{MINIMAL}ig_baseline = grey\n")).is_err());
    }

    #[test]
    fn seed_free_echo_ignores_the_seed() {
        let a = RunConfig::parse(MINIMAL).unwrap();
        let b = RunConfig::parse("data_seed = 1\ndata_dir = d\nseed = 9\n").unwrap();
        assert_eq!(a.echo_without_seed(), b.echo_without_seed());
        assert_ne!(a.echo(), b.echo());
    }
}
