//! Class activation maps, thresholded pseudo-masks and mIoU.

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.25;

/// Per-class maps with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub num_classes: usize,
    /// `K×h×w`, max-normalized.
    pub scores: Vec<f64>,
    pub h: usize,
    pub w: usize,
    /// `K×H×W`, bilinear upsampling of `scores`.
    pub upsampled: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Classes allowed to claim pixels in [`threshold_mask`].
    pub active: Vec<usize>,
}

impl LocalizationMap {
    /// Builds the map from raw (non-negative) class responses.
    pub fn from_raw(
        mut scores: Vec<f64>,
        num_classes: usize,
        h: usize,
        w: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if scores.len() != num_classes * h * w {
            return Err(Error::shape(
                "cam",
                format!("{} scores for {num_classes}×{h}×{w}", scores.len()),
            ));
        }
        for map in scores.chunks_exact_mut(h * w) {
            let peak = map.iter().fold(0.0f64, |m, &v| m.max(v));
            if peak > 0.0 {
                map.iter_mut().for_each(|v| *v /= peak);
            }
        }
        let upsampled = scores
            .chunks_exact(h * w)
            .flat_map(|m| bilinear(m, h, w, height, width))
            .collect();
        Ok(LocalizationMap {
            num_classes,
            scores,
            h,
            w,
            upsampled,
            height,
            width,
            active: (0..num_classes).collect(),
        })
    }

    /// Only `classes` may appear in pseudo-masks.
    pub fn restrict_to(mut self, classes: &[usize]) -> Self {
        self.active = classes.to_vec();
        self
    }

    pub fn class_map(&self, class: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.upsampled[class * n..(class + 1) * n]
    }
}

/// Half-pixel-centre bilinear resize with edge clamping.
pub fn bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// `relu(W_f · deep)` per class for one deep map `C×h×w`.
pub fn cam_from_deep(w_f: &[f64], deep: &[f64], k: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * hw];
    for class in 0..k {
        let row = &w_f[class * c..(class + 1) * c];
        let dst = &mut out[class * hw..(class + 1) * hw];
        for (ch, &wc) in row.iter().enumerate() {
            let src = &deep[ch * hw..(ch + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wc * s);
        }
        dst.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// CAMs for a batch `N×3×H×W`.
pub fn cam_batch(model: &Model, images: &Tensor) -> Result<Vec<LocalizationMap>> {
    let (height, width) = (images.shape()[2], images.shape()[3]);
    let (_, deep) = model.backbone(images)?;
    let ds = deep.shape();
    let (n, c, h, w) = (ds[0], ds[1], ds[2], ds[3]);
    let k = model.config.num_classes;
    let w_f = model.param("head_f.weight").data();
    deep.data()
        .chunks_exact(c * h * w)
        .take(n)
        .map(|d| LocalizationMap::from_raw(cam_from_deep(w_f, d, k, c, h * w), k, h, w, height, width))
        .collect()
}

pub fn cam(model: &Model, image: &[f64], height: usize, width: usize) -> Result<LocalizationMap> {
    let x = Tensor::new(&[1, 3, height, width], image.to_vec())?;
    Ok(cam_batch(model, &x)?.remove(0))
}

/// CAMs for every sample, restricted to each sample's labelled classes.
pub fn cams_for(model: &Model, samples: &[SampleRecord], batch: usize) -> Result<Vec<LocalizationMap>> {
    let frozen = model.frozen();
    let idx: Vec<usize> = (0..samples.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch.max(1)).collect();
    let maps = par::map(chunks.len(), |ci| -> Result<Vec<LocalizationMap>> {
        let (x, _) = crate::sma::batch(samples, chunks[ci])?;
        let maps = cam_batch(&frozen, &x)?;
        Ok(maps
            .into_iter()
            .zip(chunks[ci])
            .map(|(m, &i)| m.restrict_to(&samples[i].classes()))
            .collect())
    });
    Ok(maps.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Label map with class id + 1 where the best active class exceeds `tau`,
/// else 0.
pub fn threshold_mask(loc: &LocalizationMap, tau: f64) -> Result<Vec<u8>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let n = loc.height * loc.width;
    let mut out = vec![0u8; n];
    for (p, o) in out.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &c in &loc.active {
            let v = loc.upsampled[c * n + p];
            if v > tau && best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        if let Some((c, _)) = best {
            *o = c as u8 + 1;
        }
    }
    Ok(out)
}

/// Confusion counts over labels `0..=K` (0 is background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub labels: usize,
    /// `counts[gt * labels + pred]`.
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        let labels = num_classes + 1;
        Confusion {
            labels,
            counts: vec![0; labels * labels],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "miou",
                format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
            ));
        }
        let l = self.labels;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= l) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} classes",
                l - 1
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * l + p as usize] += 1;
        }
        Ok(())
    }

    pub fn result(&self) -> SegEvalResult {
        let l = self.labels;
        let mut iou = vec![None; l];
        for (c, slot) in iou.iter_mut().enumerate() {
            let tp = self.counts[c * l + c];
            let fn_: u64 = (0..l).map(|p| self.counts[c * l + p]).sum::<u64>() - tp;
            let fp: u64 = (0..l).map(|g| self.counts[g * l + c]).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            if union > 0 {
                *slot = Some(tp as f64 / union as f64);
            }
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        SegEvalResult {
            iou,
            miou,
            confusion: self.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegEvalResult {
    /// Index 0 is background; `None` where the class is absent from both
    /// maps.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: Confusion,
}

pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<SegEvalResult> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, gt)?;
    Ok(c.result())
}

/// Pseudo-masks for every sample plus the dataset-level evaluation and
/// per-image mIoU.
pub fn evaluate(model: &Model, samples: &[SampleRecord], tau: f64) -> Result<(SegEvalResult, Vec<f64>, Vec<Vec<u8>>)> {
    let k = model.config.num_classes;
    let maps = cams_for(model, samples, 32)?;
    let mut total = Confusion::new(k);
    let mut per_image = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for (m, s) in maps.iter().zip(samples) {
        let pred = threshold_mask(m, tau)?;
        total.add(&pred, &s.object_mask)?;
        per_image.push(miou(&pred, &s.object_mask, k)?.miou);
        masks.push(pred);
    }
    Ok((total.result(), per_image, masks))
}

/// Counts (sample, labelled class) pairs whose CAM peak falls on a pixel of
/// that class. Returns `(hits, pairs)`.
pub fn peak_hits(model: &Model, samples: &[SampleRecord]) -> Result<(usize, usize)> {
    let maps = cams_for(model, samples, 32)?;
    let (mut hits, mut pairs) = (0, 0);
    for (m, s) in maps.iter().zip(samples) {
        for c in s.classes() {
            let map = m.class_map(c);
            let peak = (0..map.len()).fold(0, |best, p| if map[p] > map[best] { p } else { best });
            pairs += 1;
            if s.object_mask[peak] as usize == c + 1 {
                hits += 1;
            }
        }
    }
    Ok((hits, pairs))
}

pub fn report_csv(r: &SegEvalResult) -> String {
    let mut out = String::from("class,iou\n");
    for (c, v) in r.iou.iter().enumerate() {
        let v = v.map_or("nan".to_string(), |x| x.to_string());
        out.push_str(&format!("{c},{v}\n"));
    }
    out.push_str(&format!("miou,{}\n", r.miou));
    out
}
