//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sma_core::attribution::{self, AttributionResult};
use sma_core::dataset::{generate_dataset, load_all, Manifest, SampleRecord, Split};
use sma_core::localization;
use sma_core::model::Model;
use sma_core::pnm::Image8;
use sma_core::sma::{self, ShuffleMode};
use sma_core::{Error, Result};

use crate::config::RunConfig;
use crate::run::{
    create_dir, file_hash, run_name, write_atomic, RunManifest, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
};

fn secs(t: Instant) -> String {
    format!("{:.3}", t.elapsed().as_secs_f64())
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let t = Instant::now();
    let manifests = generate_dataset(&cfg.dataset, out)?;
    for m in &manifests {
        let path = Manifest::csv_path(out, &m.split);
        println!("{} {} rows, hash {}", path.display(), m.len(), file_hash(&path)?);
    }
    log::info!("dataset written to {} in {}s", out.display(), secs(t));
    Ok(())
}

/// Reads a manifest and checks that it was generated with the configured
/// dataset settings.
fn open_manifest(cfg: &RunConfig, path: &Path) -> Result<Manifest> {
    let m = Manifest::read(path)?;
    if m.spec != cfg.dataset {
        return Err(Error::Config(format!(
            "{} was generated with different dataset settings than the config \
             (dataset.cfg: {:?})",
            path.display(),
            m.spec
        )));
    }
    Ok(m)
}

pub fn train(cfg: &RunConfig, out_root: &Path) -> Result<PathBuf> {
    let dir = out_root.join(run_name(cfg));
    create_dir(&dir)?;
    let manifest_path = Manifest::csv_path(&cfg.data_dir, Split::Train.name());

    let t = Instant::now();
    let manifest = open_manifest(cfg, &manifest_path)?;
    let samples = load_all(&manifest)?;
    let load_time = secs(t);

    let t = Instant::now();
    let mut model = Model::new(cfg.model, cfg.train.seed)?;
    let metrics = sma::train(&cfg.train, &samples, &mut model)?;
    let train_time = secs(t);

    let t = Instant::now();
    model.save(&dir.join(CHECKPOINT_FILE))?;
    write_atomic(&dir.join(METRICS_FILE), sma::metrics_csv(&metrics).as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.echo().as_bytes())?;

    let mut rm = RunManifest::default();
    rm.set("run", dir.file_name().and_then(|s| s.to_str()).unwrap_or(""));
    rm.set("output_dir", dir.display());
    rm.set("config", CONFIG_FILE);
    rm.set("dataset_manifest", manifest_path.display());
    rm.set("dataset_hash", file_hash(&manifest_path)?);
    rm.set("checkpoint", CHECKPOINT_FILE);
    rm.set("time.load_seconds", load_time);
    rm.set("time.train_seconds", train_time);
    rm.set("time.save_seconds", secs(t));
    rm.add_outputs(&[CHECKPOINT_FILE.into(), METRICS_FILE.into(), CONFIG_FILE.into()]);
    rm.write(&dir)?;
    check_outputs(&dir)?;
    println!("{}", dir.display());
    Ok(dir)
}

fn load_eval_set(cfg: &RunConfig, manifest: Option<&Path>) -> Result<(PathBuf, Vec<SampleRecord>)> {
    let path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Manifest::csv_path(&cfg.data_dir, Split::Val.name()));
    let m = open_manifest(cfg, &path)?;
    Ok((path, load_all(&m)?))
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let model = Model::load(checkpoint)?;
    if model.config.num_classes != cfg.dataset.num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            model.config.num_classes, cfg.dataset.num_classes
        )));
    }
    Ok(model)
}

const ATTRIBUTION_HEADER: &str = "sample,class,split,sur,bar,flagged,completeness_gap,relative_gap";

fn attribution_rows(out: &mut String, results: &[AttributionResult], split: &str) {
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{split},{},{},{},{},{}",
            r.sample,
            r.target,
            r.sur.value,
            r.bar.value,
            r.sur.flagged || r.bar.flagged,
            r.completeness.gap,
            r.completeness.relative
        );
    }
}

pub fn analyze(cfg: &RunConfig, checkpoint: &Path, manifest: Option<&Path>, out: &Path) -> Result<()> {
    let t = Instant::now();
    let model = load_model(cfg, checkpoint)?;
    let (manifest_path, samples) = load_eval_set(cfg, manifest)?;
    let k = model.config.num_classes;
    let (aligned, conflicting): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].bias_aligned);

    create_dir(out)?;
    create_dir(&out.join("heatmaps"))?;
    let mut outputs = Vec::new();
    let mut per_sample = format!("{ATTRIBUTION_HEADER}\n");
    for (split, ids) in [("aligned", &aligned), ("conflicting", &conflicting)] {
        let results = attribution::attribute_all(&model, &samples, ids, &cfg.attribution)?;
        let rows = attribution::summarize(&results, split, k);
        let name = format!("sur_bar_{split}.csv");
        write_atomic(&out.join(&name), attribution::table_csv(&rows).as_bytes())?;
        outputs.push(name);
        attribution_rows(&mut per_sample, &results, split);
        for r in results.iter().take(cfg.heatmaps) {
            let s = &samples[r.sample];
            let name = format!("heatmaps/{split}_{:06}_c{}.pgm", r.sample, r.target);
            attribution::heatmap(&r.ig_map, s.width, s.height).write(&out.join(&name))?;
            outputs.push(name);
        }
        let ok = results.iter().filter(|r| r.completeness.relative < 0.01).count();
        log::info!(
            "{split}: {} attributions, {ok} with relative completeness gap < 1%",
            results.len()
        );
    }
    write_atomic(&out.join("attributions.csv"), per_sample.as_bytes())?;
    outputs.push("attributions.csv".into());

    let mut rm = RunManifest::read_or_default(out)?;
    rm.set("analyze.manifest", manifest_path.display());
    rm.set("analyze.checkpoint", checkpoint.display());
    rm.set("time.analyze_seconds", secs(t));
    rm.add_outputs(&outputs);
    rm.write(out)?;
    check_outputs(out)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, manifest: Option<&Path>, tau: f64, out: &Path) -> Result<()> {
    let t = Instant::now();
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let model = load_model(cfg, checkpoint)?;
    let (manifest_path, samples) = load_eval_set(cfg, manifest)?;
    let rows = Manifest::read(&manifest_path)?.rows;
    create_dir(&out.join("pseudo_masks"))?;

    let (all, per_image, masks) = localization::evaluate(&model, &samples, tau)?;
    let mut outputs = vec!["iou.csv".to_string()];
    write_atomic(&out.join("iou.csv"), localization::report_csv(&all).as_bytes())?;
    let (aligned, conflicting): (Vec<SampleRecord>, Vec<SampleRecord>) =
        samples.iter().cloned().partition(|s| s.bias_aligned);
    for (split, set) in [("aligned", &aligned), ("conflicting", &conflicting)] {
        if set.is_empty() {
            log::warn!("no {split} samples; iou_{split}.csv not written");
            continue;
        }
        let (r, _, _) = localization::evaluate(&model, set, tau)?;
        let name = format!("iou_{split}.csv");
        write_atomic(&out.join(&name), localization::report_csv(&r).as_bytes())?;
        outputs.push(name);
    }

    let mut per = String::from("image,bias_aligned,miou\n");
    for (((row, m), mask), s) in rows.iter().zip(&per_image).zip(&masks).zip(&samples) {
        let _ = writeln!(per, "{},{},{m}", row.image, row.bias_aligned);
        let stem = Path::new(&row.image)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("mask");
        Image8::new(s.width, s.height, 1, mask.clone()).write(&out.join(format!("pseudo_masks/{stem}.pgm")))?;
    }
    write_atomic(&out.join("per_image_iou.csv"), per.as_bytes())?;
    outputs.push("per_image_iou.csv".into());
    outputs.push("pseudo_masks".into());

    let (hits, pairs) = localization::peak_hits(&model, &aligned)?;
    let mut rm = RunManifest::read_or_default(out)?;
    rm.set("eval.manifest", manifest_path.display());
    rm.set("eval.checkpoint", checkpoint.display());
    rm.set("eval.tau", tau);
    rm.set("eval.cam_peak_in_object_aligned", format!("{hits}/{pairs}"));
    rm.set("time.eval_seconds", secs(t));
    rm.add_outputs(&outputs);
    rm.write(out)?;
    check_outputs(out)?;
    println!("miou {:.4} over {} images", all.miou, samples.len());
    Ok(())
}

/// Summary of one run directory for the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub name: String,
    pub mode: ShuffleMode,
    pub lambda: f64,
    pub t_aug: usize,
    pub seed: u64,
    pub train_acc: f64,
    pub miou: Option<f64>,
    pub miou_conflicting: Option<f64>,
    pub mean_sur: Option<f64>,
    pub mean_bar: Option<f64>,
}

fn read_csv(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(bytes.as_slice())
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn number(path: &Path, field: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("{}: `{field}` is not a number", path.display())))
}

fn optional<T>(path: &Path, read: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

fn miou_of(path: &Path) -> Result<f64> {
    let rows = read_csv(path)?;
    let row = rows
        .iter()
        .find(|r| r.get(0) == Some("miou"))
        .ok_or_else(|| Error::Format(format!("{} has no miou row", path.display())))?;
    number(path, &row[1])
}

/// Means over classes of the per-class SUR and BAR columns.
fn sur_bar_of(path: &Path) -> Result<(f64, f64)> {
    let rows = read_csv(path)?;
    let mut sums = (0.0, 0.0, 0usize);
    for r in &rows {
        let (s, b) = (number(path, &r[3])?, number(path, &r[4])?);
        if s.is_finite() && b.is_finite() {
            sums = (sums.0 + s, sums.1 + b, sums.2 + 1);
        }
    }
    if sums.2 == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((sums.0 / sums.2 as f64, sums.1 / sums.2 as f64))
}

pub fn summarize_run(dir: &Path) -> Result<ArmSummary> {
    let cfg = RunConfig::read(&dir.join(CONFIG_FILE))?;
    let metrics_path = dir.join(METRICS_FILE);
    let metrics = read_csv(&metrics_path)?;
    let last = metrics
        .last()
        .ok_or_else(|| Error::Format(format!("{} has no epochs", metrics_path.display())))?;
    let sur_bar = optional(&dir.join("sur_bar_aligned.csv"), sur_bar_of)?;
    Ok(ArmSummary {
        name: dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string(),
        mode: cfg.train.shuffle_mode,
        lambda: cfg.train.lambda,
        t_aug: cfg.train.t_aug,
        seed: cfg.train.seed,
        train_acc: number(&metrics_path, &last[5])?,
        miou: optional(&dir.join("iou.csv"), miou_of)?,
        miou_conflicting: optional(&dir.join("iou_conflicting.csv"), miou_of)?,
        mean_sur: sur_bar.map(|p| p.0),
        mean_bar: sur_bar.map(|p| p.1),
    })
}

fn mode_rank(m: ShuffleMode) -> usize {
    match m {
        ShuffleMode::Off => 0,
        ShuffleMode::BackgroundOnly => 1,
        ShuffleMode::TwoWay => 2,
        ShuffleMode::Interpolate => 3,
    }
}

/// Run directories under `dir` (or `dir` itself when it is a run).
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(crate::run::MANIFEST_FILE).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::run::MANIFEST_FILE).exists())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Format(format!("{} contains no run directories", dir.display())));
    }
    Ok(runs)
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

fn delta(v: Option<f64>, r: Option<f64>) -> String {
    match (v, r) {
        (Some(a), Some(b)) => format!("{:+.4}", a - b),
        _ => "-".to_string(),
    }
}

/// Text table of the arms; Δ columns compare against the first arm.
pub fn report_table(mut arms: Vec<ArmSummary>) -> String {
    arms.sort_by(|a, b| {
        (mode_rank(a.mode), a.lambda, &a.name)
            .partial_cmp(&(mode_rank(b.mode), b.lambda, &b.name))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let with_delta = arms.len() > 1;
    let mut head = vec![
        "arm",
        "mode",
        "lambda",
        "t_aug",
        "seed",
        "train_acc",
        "miou",
        "miou_conflicting",
        "mean_sur",
        "mean_bar",
    ];
    if with_delta {
        head.extend(["d_miou", "d_miou_conflicting", "d_sur", "d_bar"]);
    }
    let mut rows = vec![head.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let reference = arms[0].clone();
    for a in &arms {
        let mut row = vec![
            a.name.clone(),
            a.mode.name().to_string(),
            a.lambda.to_string(),
            a.t_aug.to_string(),
            a.seed.to_string(),
            format!("{:.4}", a.train_acc),
            cell(a.miou),
            cell(a.miou_conflicting),
            cell(a.mean_sur),
            cell(a.mean_bar),
        ];
        if with_delta {
            row.push(delta(a.miou, reference.miou));
            row.push(delta(a.miou_conflicting, reference.miou_conflicting));
            row.push(delta(a.mean_sur, reference.mean_sur));
            row.push(delta(a.mean_bar, reference.mean_bar));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    if with_delta {
        let _ = writeln!(out, "\nd_* columns: arm minus {}", reference.name);
    }
    out
}

pub fn report(dir: &Path) -> Result<String> {
    let arms = find_runs(dir)?
        .iter()
        .map(|d| summarize_run(d))
        .collect::<Result<Vec<_>>>()?;
    let text = report_table(arms);
    if !dir.join(crate::run::MANIFEST_FILE).exists() {
        write_atomic(&dir.join("report.txt"), text.as_bytes())?;
    }
    print!("{text}");
    Ok(text)
}

/// Confirms every output a run manifest lists is on disk.
pub fn check_outputs(dir: &Path) -> Result<()> {
    let missing = RunManifest::read(dir)?.missing_outputs(dir);
    if let Some(p) = missing.first() {
        return Err(Error::Contract(format!(
            "run manifest lists missing file {}",
            p.display()
        )));
    }
    Ok(())
}
