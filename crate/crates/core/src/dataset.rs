//! Synthetic shapes-on-textures dataset with a controllable object–background
//! co-occurrence bias and ground-truth object masks.
//!
//! Class `k` is paired with background `k`. Each object lands on its paired
//! background with probability `bias_ratio`, otherwise on a uniformly chosen
//! other background. Two-object images are split into a left and a right half,
//! one object per half, and each half carries the background drawn by its own
//! object's coin. Manifest rows therefore list one background per label entry.
//!
//! Every sample is a pure function of `(seed, split, index)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::pnm::Image8;

pub const SHAPE_NAMES: [&str; 5] = ["circle", "triangle", "square", "cross", "ring"];
pub const TEXTURE_NAMES: [&str; 5] = ["stripes", "checker", "noise", "gradient", "dots"];

/// Object coverage bounds (fraction of image pixels).
pub const MIN_COVERAGE: f64 = 0.04;
pub const MAX_COVERAGE: f64 = 0.40;

/// Probability that an image gets a second object when `max_objects ≥ 2`.
pub const TWO_OBJECT_PROB: f64 = 0.3;

// Jitter ranges.
const ROTATION_JITTER: f64 = 20.0 * std::f64::consts::PI / 180.0;
const SINGLE_RADIUS: (f64, f64) = (0.14, 0.30);
const PAIR_RADIUS: (f64, f64) = (0.11, 0.19);
const BRIGHTNESS_JITTER: f64 = 0.12;

const OBJECT_COLORS: [[f64; 3]; 5] = [
    [0.85, 0.22, 0.20],
    [0.92, 0.74, 0.18],
    [0.58, 0.28, 0.78],
    [0.93, 0.93, 0.88],
    [0.12, 0.12, 0.14],
];

const TEXTURE_COLORS: [[[f64; 3]; 2]; 5] = [
    [[0.30, 0.55, 0.90], [0.80, 0.88, 0.97]],
    [[0.25, 0.60, 0.25], [0.55, 0.80, 0.35]],
    [[0.45, 0.33, 0.20], [0.70, 0.58, 0.40]],
    [[0.05, 0.25, 0.45], [0.25, 0.65, 0.70]],
    [[0.55, 0.55, 0.58], [0.20, 0.20, 0.22]],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_backgrounds: usize,
    pub bias_ratio: f64,
    pub image_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 5,
            num_backgrounds: 5,
            bias_ratio: 0.9,
            image_size: 64,
            train_samples: 2000,
            val_samples: 500,
            max_objects: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00,
            Split::Val => 0x7661_6c00,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let (k, b) = (self.num_classes, self.num_backgrounds);
        if k < 2 || b < 2 {
            return fail(format!("num_classes and num_backgrounds must be ≥ 2 (got {k}, {b})"));
        }
        if k > SHAPE_NAMES.len() || b > TEXTURE_NAMES.len() {
            return fail(format!(
                "at most {} classes and backgrounds are available",
                SHAPE_NAMES.len()
            ));
        }
        if k > b {
            return fail(format!(
                "every class needs a paired background: {k} classes > {b} backgrounds"
            ));
        }
        if !(self.bias_ratio >= 1.0 / b as f64 - 1e-12 && self.bias_ratio <= 1.0) {
            return fail(format!("bias_ratio must lie in [1/{b}, 1], got {}", self.bias_ratio));
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(8) {
            return fail(format!(
                "image_size must be ≥ 32 and divisible by 8, got {}",
                self.image_size
            ));
        }
        if !(1..=2).contains(&self.max_objects) {
            return fail(format!("max_objects must be 1 or 2, got {}", self.max_objects));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return fail("sample counts must be positive".into());
        }
        Ok(())
    }

    pub fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
        }
    }

    /// `key = value` lines, the same syntax as run configs.
    pub fn to_config_text(&self) -> String {
        format!(
            "num_classes = {}\nnum_backgrounds = {}\nbias_ratio = {}\nimage_size = {}\n\
             train_samples = {}\nval_samples = {}\nmax_objects = {}\nseed = {}\n",
            self.num_classes,
            self.num_backgrounds,
            self.bias_ratio,
            self.image_size,
            self.train_samples,
            self.val_samples,
            self.max_objects,
            self.seed
        )
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut spec = DatasetSpec::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad dataset echo line: {line}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Format(format!("bad value for {k}: {v}"));
            match k {
                "num_classes" => spec.num_classes = v.parse().map_err(|_| bad())?,
                "num_backgrounds" => spec.num_backgrounds = v.parse().map_err(|_| bad())?,
                "bias_ratio" => spec.bias_ratio = v.parse().map_err(|_| bad())?,
                "image_size" => spec.image_size = v.parse().map_err(|_| bad())?,
                "train_samples" => spec.train_samples = v.parse().map_err(|_| bad())?,
                "val_samples" => spec.val_samples = v.parse().map_err(|_| bad())?,
                "max_objects" => spec.max_objects = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Format(format!("unknown dataset key {k}"))),
            }
        }
        Ok(spec)
    }
}

/// One rendered sample before it touches disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedSample {
    /// Interleaved RGB, `H·W·3`.
    pub rgb: Vec<u8>,
    /// Class id + 1 per pixel, 0 for background.
    pub mask: Vec<u8>,
    /// Sorted 0-based class ids present in the mask.
    pub classes: Vec<usize>,
    /// Background under each entry of `classes`.
    pub background_id: Vec<usize>,
    pub bias_aligned: bool,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ split.tag()) ^ index as u64))
}

fn inside_shape(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u * u + v * v <= 1.0,
        1 => {
            // equilateral triangle, circumradius 1, apex up
            let s3 = 3f64.sqrt();
            v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0
        }
        2 => u.abs() <= 0.8 && v.abs() <= 0.8,
        3 => (u.abs() <= 0.32 && v.abs() <= 1.0) || (v.abs() <= 0.32 && u.abs() <= 1.0),
        4 => {
            let r2 = u * u + v * v;
            (0.30..=1.0).contains(&r2)
        }
        _ => unreachable!("class {class} has no shape"),
    }
}

struct Placement {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

fn rasterize(p: &Placement, size: usize) -> Vec<usize> {
    let (sin, cos) = p.angle.sin_cos();
    let mut px = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - p.cx) / p.radius;
            // image y grows downward; flip so "up" is up
            let dy = -(y as f64 + 0.5 - p.cy) / p.radius;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if inside_shape(p.class, u, v) {
                px.push(y * size + x);
            }
        }
    }
    px
}

fn texture(bg: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let [c0, c1] = TEXTURE_COLORS[bg];
    let mix = |t: f64| -> [f64; 3] {
        [
            c0[0] + (c1[0] - c0[0]) * t,
            c0[1] + (c1[1] - c0[1]) * t,
            c0[2] + (c1[2] - c0[2]) * t,
        ]
    };
    let mut out = Vec::with_capacity(size * size);
    match bg {
        0 => {
            let phase: f64 = rng.random_range(0.0..8.0);
            for y in 0..size {
                let on = ((y as f64 + phase) / 4.0).floor() as i64 % 2 == 0;
                for _ in 0..size {
                    out.push(mix(if on { 0.0 } else { 1.0 }));
                }
            }
        }
        1 => {
            let (px, py): (usize, usize) = (rng.random_range(0..16), rng.random_range(0..16));
            for y in 0..size {
                for x in 0..size {
                    let on = ((x + px) / 8 + (y + py) / 8) % 2 == 0;
                    out.push(mix(if on { 0.0 } else { 1.0 }));
                }
            }
        }
        2 => {
            for _ in 0..size * size {
                out.push(mix(rng.random_range(0.0..1.0)));
            }
        }
        3 => {
            let offset: f64 = rng.random_range(-0.15..0.15);
            for y in 0..size {
                let t = (y as f64 / (size - 1) as f64 + offset).clamp(0.0, 1.0);
                for _ in 0..size {
                    out.push(mix(t));
                }
            }
        }
        4 => {
            let (ox, oy): (f64, f64) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
            for y in 0..size {
                for x in 0..size {
                    let fx = (x as f64 + ox).rem_euclid(10.0) - 5.0;
                    let fy = (y as f64 + oy).rem_euclid(10.0) - 5.0;
                    out.push(mix(if fx * fx + fy * fy <= 5.0 { 1.0 } else { 0.0 }));
                }
            }
        }
        _ => unreachable!("background {bg} has no texture"),
    }
    out
}

fn other_background(rng: &mut ChaCha8Rng, class: usize, b: usize) -> usize {
    let o = rng.random_range(0..b - 1);
    if o >= class {
        o + 1
    } else {
        o
    }
}

/// Renders sample `index` of `split`. Pure in `(spec.seed, split, index)`.
pub fn render_sample(spec: &DatasetSpec, split: Split, index: usize) -> RenderedSample {
    let mut rng = sample_rng(spec.seed, split, index);
    let (k, b, size) = (spec.num_classes, spec.num_backgrounds, spec.image_size);
    let two = spec.max_objects >= 2 && rng.random_bool(TWO_OBJECT_PROB);
    let first = rng.random_range(0..k);
    let second = two.then(|| {
        let c = rng.random_range(0..k - 1);
        if c >= first {
            c + 1
        } else {
            c
        }
    });
    let drawn: Vec<usize> = std::iter::once(first).chain(second).collect();
    let bgs: Vec<usize> = drawn
        .iter()
        .map(|&c| {
            if rng.random_bool(spec.bias_ratio) {
                c
            } else {
                other_background(&mut rng, c, b)
            }
        })
        .collect();
    // column ranges each object (and its background) owns
    let half = size / 2;
    let first_left = rng.random_bool(0.5);
    let cols: Vec<(usize, usize)> = if two {
        let (l, r) = ((0, half), (half, size));
        if first_left {
            vec![l, r]
        } else {
            vec![r, l]
        }
    } else {
        vec![(0, size)]
    };
    let mut pixels = texture(bgs[0], size, &mut rng);
    if two {
        let other = texture(bgs[1], size, &mut rng);
        let (x0, x1) = cols[1];
        for y in 0..size {
            pixels[y * size + x0..y * size + x1].copy_from_slice(&other[y * size + x0..y * size + x1]);
        }
    }

    let n_px = (size * size) as f64;
    let sz = size as f64;
    let (rmin, rmax) = if two { PAIR_RADIUS } else { SINGLE_RADIUS };
    let mut mask = vec![0u8; size * size];
    let mut placed = 0;
    for attempt in 0..200 {
        mask.fill(0);
        let mut ok = true;
        for (&class, &(x0, x1)) in drawn.iter().zip(&cols) {
            let radius = rng.random_range(rmin..rmax) * sz;
            let margin = radius + 1.0;
            let p = Placement {
                class,
                cx: rng.random_range(x0 as f64 + margin..x1 as f64 - margin),
                cy: rng.random_range(margin..sz - margin),
                radius,
                angle: rng.random_range(-ROTATION_JITTER..ROTATION_JITTER),
            };
            let px = rasterize(&p, size);
            if px.is_empty() || px.iter().any(|&i| mask[i] != 0 || !(x0..x1).contains(&(i % size))) {
                ok = false;
                break;
            }
            px.iter().for_each(|&i| mask[i] = class as u8 + 1);
        }
        let cover = mask.iter().filter(|&&m| m != 0).count() as f64 / n_px;
        if ok && (MIN_COVERAGE..=MAX_COVERAGE).contains(&cover) {
            placed = attempt + 1;
            break;
        }
    }
    assert!(placed > 0, "object placement failed for sample {index}");

    for &class in &drawn {
        let jitter = 1.0 + rng.random_range(-BRIGHTNESS_JITTER..BRIGHTNESS_JITTER);
        let color = OBJECT_COLORS[class].map(|c| (c * jitter).clamp(0.0, 1.0));
        for (i, m) in mask.iter().enumerate() {
            if *m as usize == class + 1 {
                pixels[i] = color;
            }
        }
    }

    let rgb = pixels
        .iter()
        .flat_map(|c| c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    let mut pairs: Vec<(usize, usize)> = drawn.iter().copied().zip(bgs).collect();
    pairs.sort_unstable();
    let bias_aligned = pairs.iter().all(|&(c, g)| c == g);
    RenderedSample {
        rgb,
        mask,
        classes: pairs.iter().map(|p| p.0).collect(),
        background_id: pairs.iter().map(|p| p.1).collect(),
        bias_aligned,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub label: Vec<usize>,
    /// One background per `label` entry, same order.
    pub background_id: Vec<usize>,
    pub bias_aligned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub split: String,
    pub spec: DatasetSpec,
    /// Directory that row paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_HEADER: [&str; 5] = ["image", "mask", "label", "background_id", "bias_aligned"];
pub const SPEC_ECHO_FILE: &str = "dataset.cfg";

fn format_ids(label: &[usize]) -> String {
    label.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

impl Manifest {
    pub fn csv_path(root: &Path, split: &str) -> PathBuf {
        root.join(format!("{split}.csv"))
    }

    pub fn to_csv(&self) -> String {
        let mut out = MANIFEST_HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.image,
                r.mask,
                format_ids(&r.label),
                format_ids(&r.background_id),
                r.bias_aligned
            );
        }
        out
    }

    /// Reads `<split>.csv` plus the spec echo next to it.
    pub fn read(csv_path: &Path) -> Result<Self> {
        let root = csv_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let split = csv_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("unknown")
            .to_string();
        let echo_path = root.join(SPEC_ECHO_FILE);
        let echo = fs::read_to_string(&echo_path).map_err(|e| Error::io(&echo_path, e))?;
        let spec = DatasetSpec::from_config_text(&echo)?;
        let text = fs::read(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut reader = csv::Reader::from_reader(text.as_slice());
        let headers = reader
            .headers()
            .map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Format(format!(
                "{}: expected header {}",
                csv_path.display(),
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
            let bad = |what: &str| Error::Format(format!("{}: bad {what} in row {:?}", csv_path.display(), rec));
            let ids = |field: &str, what: &str| -> Result<Vec<usize>> {
                if field.is_empty() {
                    return Ok(Vec::new());
                }
                field
                    .split(';')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(what))
            };
            let label = ids(&rec[2], "label")?;
            let background_id = ids(&rec[3], "background_id")?;
            if background_id.len() != label.len() {
                return Err(bad("background_id count"));
            }
            if let Some(&c) = label.iter().find(|&&c| c >= spec.num_classes) {
                return Err(Error::Integrity(format!(
                    "{}: label {c} out of range",
                    csv_path.display()
                )));
            }
            if let Some(&g) = background_id.iter().find(|&&g| g >= spec.num_backgrounds) {
                return Err(Error::Integrity(format!(
                    "{}: background_id {g} out of range",
                    csv_path.display()
                )));
            }
            rows.push(ManifestRow {
                image: rec[0].to_string(),
                mask: rec[1].to_string(),
                label,
                background_id,
                bias_aligned: rec[4].parse().map_err(|_| bad("bias_aligned"))?,
            });
        }
        Ok(Manifest {
            split,
            spec,
            root,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, keep: impl Fn(&ManifestRow) -> bool) -> Manifest {
        Manifest {
            split: self.split.clone(),
            spec: self.spec,
            root: self.root.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Renders both splits under `out_dir` and returns their manifests.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<Manifest>> {
    spec.validate()?;
    create_dir(out_dir)?;
    let echo = out_dir.join(SPEC_ECHO_FILE);
    fs::write(&echo, spec.to_config_text()).map_err(|e| Error::io(&echo, e))?;
    let mut manifests = Vec::new();
    for split in [Split::Train, Split::Val] {
        let name = split.name();
        create_dir(&out_dir.join(name).join("images"))?;
        create_dir(&out_dir.join(name).join("masks"))?;
        let size = spec.image_size;
        let rows = par::map(spec.samples(split), |i| -> Result<ManifestRow> {
            let s = render_sample(spec, split, i);
            let image = format!("{name}/images/{i:06}.ppm");
            let mask = format!("{name}/masks/{i:06}.pgm");
            Image8::new(size, size, 3, s.rgb).write(&out_dir.join(&image))?;
            Image8::new(size, size, 1, s.mask).write(&out_dir.join(&mask))?;
            Ok(ManifestRow {
                image,
                mask,
                label: s.classes,
                background_id: s.background_id,
                bias_aligned: s.bias_aligned,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            split: name.to_string(),
            spec: *spec,
            root: out_dir.to_path_buf(),
            rows,
        };
        let path = Manifest::csv_path(out_dir, name);
        fs::write(&path, manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// A decoded sample with `[0,1]` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `3×H×W`, channel-major.
    pub image: Vec<f64>,
    /// Multi-hot, length K.
    pub label: Vec<f64>,
    /// `H×W` class id + 1, 0 for background.
    pub object_mask: Vec<u8>,
    /// Background under each class of `classes()`, same order.
    pub background_id: Vec<usize>,
    pub bias_aligned: bool,
    pub height: usize,
    pub width: usize,
}

impl SampleRecord {
    pub fn classes(&self) -> Vec<usize> {
        self.label
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Reads and checks one manifest row.
pub fn load_sample(manifest: &Manifest, row: &ManifestRow) -> Result<SampleRecord> {
    let k = manifest.spec.num_classes;
    let img_path = manifest.root.join(&row.image);
    let mask_path = manifest.root.join(&row.mask);
    let img = Image8::read(&img_path)?;
    let mask = Image8::read(&mask_path)?;
    if img.channels != 3 {
        return Err(Error::Format(format!("{} is not an RGB image", img_path.display())));
    }
    if mask.channels != 1 {
        return Err(Error::Format(format!(
            "{} is not a grayscale mask",
            mask_path.display()
        )));
    }
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::Integrity(format!(
            "{} is {}×{} but its mask is {}×{}",
            row.image, img.width, img.height, mask.width, mask.height
        )));
    }
    if let Some(&bad) = mask.pixels.iter().find(|&&v| v as usize > k) {
        return Err(Error::Integrity(format!(
            "{}: mask value {bad} exceeds class count {k}",
            row.mask
        )));
    }
    let present: BTreeSet<usize> = mask
        .pixels
        .iter()
        .filter(|&&v| v != 0)
        .map(|&v| v as usize - 1)
        .collect();
    let present: Vec<usize> = present.into_iter().collect();
    let mut listed: Vec<(usize, usize)> = row
        .label
        .iter()
        .copied()
        .zip(row.background_id.iter().copied())
        .collect();
    listed.sort_unstable();
    if present != listed.iter().map(|p| p.0).collect::<Vec<_>>() {
        return Err(Error::Integrity(format!(
            "{}: manifest label {:?} but mask contains {:?}",
            row.image, row.label, present
        )));
    }
    let (h, w) = (img.height, img.width);
    let mut image = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            image[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    let mut label = vec![0.0; k];
    present.iter().for_each(|&c| label[c] = 1.0);
    Ok(SampleRecord {
        image,
        label,
        object_mask: mask.pixels,
        background_id: listed.iter().map(|p| p.1).collect(),
        bias_aligned: row.bias_aligned,
        height: h,
        width: w,
    })
}

pub fn load_all(manifest: &Manifest) -> Result<Vec<SampleRecord>> {
    par::map(manifest.rows.len(), |i| load_sample(manifest, &manifest.rows[i]))
        .into_iter()
        .collect()
}

/// Row indices of bias-aligned and bias-conflicting samples.
pub fn split_bias(rows: &[ManifestRow]) -> (Vec<usize>, Vec<usize>) {
    (0..rows.len()).partition(|&i| rows[i].bias_aligned)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoOccurrence {
    /// `K×B`; row k is the background distribution of images containing k.
    pub ratios: Vec<Vec<f64>>,
    /// Classes with no samples (their rows are all zero).
    pub empty_classes: Vec<usize>,
}

pub fn co_occurrence(rows: &[ManifestRow], num_classes: usize, num_backgrounds: usize) -> CoOccurrence {
    let mut counts = vec![vec![0usize; num_backgrounds]; num_classes];
    for r in rows {
        for (&c, &g) in r.label.iter().zip(&r.background_id) {
            counts[c][g] += 1;
        }
    }
    let mut empty_classes = Vec::new();
    let ratios = counts
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                empty_classes.push(k);
                vec![0.0; num_backgrounds]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    CoOccurrence { ratios, empty_classes }
}
