//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sma_core::model::{Model, ModelConfig};
use sma_core::sma::{self, ShuffleMode};
use sma_core::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Uniform values with magnitude at least `gap`, so kinks at zero are never
/// straddled by a finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, scale: f64, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..scale);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Denominator floor for [`rel_err`]. Central differences at step 1e-5
/// carry about 1e-10 of rounding noise, so gradients that vanish in theory
/// would otherwise score a unit error.
pub const REL_FLOOR: f64 = 1e-3;

/// `‖a − b‖ / max(‖a‖, ‖b‖, REL_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(REL_FLOOR)
}

/// Central-difference check of `f` at the given inputs. Non-scalar outputs
/// are contracted with fixed random weights. Returns the worst relative
/// error over inputs.
pub fn check_grad(inputs: &[(Vec<usize>, Vec<f64>)], f: &dyn Fn(&[Tensor]) -> Result<Tensor>, seed: u64) -> f64 {
    let consts: Vec<Tensor> = inputs.iter().map(|(s, v)| Tensor::new(s, v.clone()).unwrap()).collect();
    let out_len = f(&consts).unwrap().numel();
    let weights = uniform(&mut rng(seed ^ 0xABCD), out_len, 1.0);
    let scalar = |ts: &[Tensor]| -> Tensor {
        let out = f(ts).unwrap();
        let w = Tensor::new(out.shape(), weights.clone()).unwrap();
        out.mul(&w).unwrap().sum().unwrap()
    };
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|(s, v)| Tensor::param(s, v.clone()).unwrap())
        .collect();
    scalar(&params).backward().unwrap();
    let mut worst = 0.0f64;
    for (i, (_, v)) in inputs.iter().enumerate() {
        let analytic = params[i].grad().unwrap_or_else(|| vec![0.0; v.len()]);
        let mut numeric = vec![0.0; v.len()];
        for j in 0..v.len() {
            let eval = |delta: f64| {
                let ts: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, (s, vals))| {
                        let mut vals = vals.clone();
                        if k == i {
                            vals[j] += delta;
                        }
                        Tensor::new(s, vals).unwrap()
                    })
                    .collect();
                scalar(&ts).item().unwrap()
            };
            numeric[j] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Direct nested-loop convolution, `N×C×H×W` by `O×C×kh×kw`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        num_classes: 3,
        stage_channels: [3, 4, 4],
        channels: 4,
        attn_dim: 2,
    }
}

/// Pre-activation signs of every backbone ReLU, used to discard
/// finite-difference steps that straddle a kink.
pub fn relu_pattern(model: &Model, x: &Tensor) -> Vec<bool> {
    let mut pattern = Vec::new();
    let mut h = x.clone();
    for (n, stride) in [(1, 1), (2, 2), (3, 2), (4, 2)] {
        let pre = h
            .conv2d(
                model.param(&format!("stage{n}.conv.weight")),
                Some(model.param(&format!("stage{n}.conv.bias"))),
                stride,
                1,
            )
            .unwrap();
        pattern.extend(pre.data().iter().map(|&v| v > 0.0));
        h = pre.relu();
    }
    pattern
}

/// Everything needed to evaluate the full training objective on one batch.
pub struct LossCase {
    pub x: Tensor,
    pub y: Vec<f64>,
    pub perm_b: Vec<usize>,
    pub perm_o: Vec<usize>,
    pub lambda: f64,
    pub mode: ShuffleMode,
}

impl LossCase {
    /// A random tiny model and batch. Draws whose `1 − cos(z_o, z_b)` comes
    /// near the contrastive floor are redrawn: the clamp is a kink there.
    pub fn random(seed: u64, mode: ShuffleMode) -> (Model, LossCase) {
        for attempt in 0.. {
            let (model, case) = Self::draw(seed * 1000 + attempt, mode);
            let f = model.forward(&case.x).unwrap();
            let cos = f.z_o.cosine_similarity(&f.z_b, 1e-7).unwrap();
            if cos.data().iter().all(|c| 1.0 - c > 1e-3) {
                return (model, case);
            }
        }
        unreachable!()
    }

    fn draw(seed: u64, mode: ShuffleMode) -> (Model, LossCase) {
        let cfg = tiny_config();
        let mut model = Model::new(cfg, seed).unwrap();
        // sharper attention so the two branches differ
        for name in ["agg_o.conv.weight", "agg_b.conv.weight"] {
            let p = model.param_mut(name).unwrap();
            let v = p.values().iter().map(|w| 4.0 * w).collect();
            p.set_values(v).unwrap();
        }
        let mut r = rng(seed);
        let n = 4;
        let x = Tensor::new(
            &[n, 3, 32, 32],
            (0..n * 3 * 1024).map(|_| r.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let y: Vec<f64> = (0..n * cfg.num_classes)
            .map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let mut perm_b: Vec<usize> = (0..n).collect();
        let mut perm_o: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm_b.shuffle(&mut r);
        perm_o.shuffle(&mut r);
        (
            model,
            LossCase {
                x,
                y,
                perm_b,
                perm_o,
                lambda: 0.5,
                mode,
            },
        )
    }

    /// `L_cls + λ L_contr + L_shuffle` with the shuffle gate open.
    pub fn total(&self, model: &Model) -> Tensor {
        self.total_with(model, None)
    }

    /// As [`total`](Self::total), but the shuffle term sees `frozen_zb`
    /// in place of the model's background representation. Finite
    /// differences of a stop-gradient graph hold the stopped value fixed.
    pub fn total_with(&self, model: &Model, frozen_zb: Option<&Tensor>) -> Tensor {
        let eps = 1e-7;
        let f = model.forward(&self.x).unwrap();
        let zb_shuffle = frozen_zb.cloned().unwrap_or_else(|| f.z_b.clone());
        let lo = model.classify(&f.z_o).unwrap();
        let lb = model.classify(&f.z_b).unwrap();
        let cls = sma::classification_loss(&lo, &lb, &self.y, eps).unwrap();
        let contr = sma::contrastive_loss(&f.z_o, &f.z_b, eps).unwrap();
        let shuffle = match self.mode {
            ShuffleMode::Off => None,
            ShuffleMode::BackgroundOnly | ShuffleMode::TwoWay => {
                let sb =
                    sma::shuffle_with(&f.z_o, &zb_shuffle, &self.y, self.perm_b.clone(), self.perm_o.clone()).unwrap();
                let (t1, t2) = sma::shuffle_loss(model, &sb, &self.y, eps).unwrap();
                Some(if self.mode == ShuffleMode::TwoWay {
                    t1.add(&t2).unwrap()
                } else {
                    t1
                })
            }
            ShuffleMode::Interpolate => {
                let deltas = [0.3, 0.8, 0.5, 1.0];
                let (z, ym) = sma::interpolate_with(&f.z_o, &f.z_b, &self.y, &self.perm_b, &deltas).unwrap();
                Some(sma::bce_with_logits(&model.classify_shuffled(&z).unwrap(), &ym, eps).unwrap())
            }
        };
        sma::total_loss(&cls, &contr, shuffle.as_ref(), self.lambda, 1, 0).unwrap()
    }
}

/// Finite-difference check of the full objective w.r.t. every model
/// parameter. Steps that flip a backbone ReLU are skipped. Returns
/// (worst relative error over parameter tensors, skipped, total).
pub fn check_model_loss(model: &Model, case: &LossCase) -> (f64, usize, usize) {
    model.zero_grad();
    case.total(model).backward().unwrap();
    let base_zb = model.frozen().forward(&case.x).unwrap().z_b;
    let base_pattern = relu_pattern(model, &case.x);
    let mut worst = 0.0f64;
    let (mut skipped, mut total) = (0, 0);
    for p in model.params() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.values().len()]);
        let mut a_kept = Vec::new();
        let mut n_kept = Vec::new();
        for j in 0..p.values().len() {
            total += 1;
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let slot = m.param_mut(&p.name).unwrap();
                let mut v = slot.values().to_vec();
                v[j] += delta;
                slot.set_values(v).unwrap();
                let flip = relu_pattern(&m, &case.x) != base_pattern;
                (case.total_with(&m.frozen(), Some(&base_zb)).item().unwrap(), flip)
            };
            let (fp, flip_p) = shifted(FD_STEP);
            let (fm, flip_m) = shifted(-FD_STEP);
            if flip_p || flip_m {
                skipped += 1;
                continue;
            }
            a_kept.push(analytic[j]);
            n_kept.push((fp - fm) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&a_kept, &n_kept));
    }
    (worst, skipped, total)
}

type Case = fn(u64) -> f64;

fn shape_of(r: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| r.random_range(1..4)).collect()
}

fn input(r: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), uniform(r, n, 1.0))
}

fn kink_free(r: &mut ChaCha8Rng, shape: &[usize], shift: f64) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    let v = away_from_zero(r, n, 1.0, 1e-3).into_iter().map(|x| x + shift).collect();
    (shape.to_vec(), v)
}

fn case_binary(seed: u64, which: u8) -> f64 {
    let mut r = rng(seed);
    let rank = r.random_range(1..4);
    let s = shape_of(&mut r, rank);
    let inputs = [input(&mut r, &s), input(&mut r, &s)];
    check_grad(
        &inputs,
        &move |t| match which {
            0 => t[0].add(&t[1]),
            1 => t[0].sub(&t[1]),
            _ => t[0].mul(&t[1]),
        },
        seed,
    )
}

fn case_add(seed: u64) -> f64 {
    case_binary(seed, 0)
}
fn case_sub(seed: u64) -> f64 {
    case_binary(seed, 1)
}
fn case_mul(seed: u64) -> f64 {
    case_binary(seed, 2)
}

fn case_add_broadcast(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 3);
    let suffix = s[r.random_range(0..3)..].to_vec();
    let inputs = [input(&mut r, &s), input(&mut r, &suffix)];
    check_grad(&inputs, &|t| t[0].add_broadcast(&t[1]), seed)
}

fn case_matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let batched = r.random_bool(0.5);
    let inputs = if batched {
        let b = r.random_range(1..4);
        [input(&mut r, &[b, m, k]), input(&mut r, &[b, k, n])]
    } else {
        [input(&mut r, &[m, k]), input(&mut r, &[k, n])]
    };
    check_grad(&inputs, &|t| t[0].matmul(&t[1]), seed)
}

fn case_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, o) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let k = [1, 3][r.random_range(0..2)];
    let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
    let hw = r.random_range(k.max(3)..7);
    let with_bias = r.random_bool(0.7);
    let mut inputs = vec![input(&mut r, &[n, c, hw, hw]), input(&mut r, &[o, c, k, k])];
    if with_bias {
        inputs.push(input(&mut r, &[o]));
    }
    check_grad(&inputs, &move |t| t[0].conv2d(&t[1], t.get(2), stride, pad), seed)
}

fn case_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 2);
    check_grad(&[kink_free(&mut r, &s, 0.0)], &|t| Ok(t[0].relu()), seed)
}

fn case_sigmoid(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 2);
    let inp = (s.clone(), uniform(&mut r, s.iter().product(), 6.0));
    check_grad(&[inp], &|t| Ok(t[0].sigmoid()), seed)
}

fn case_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 3);
    let axis = r.random_range(0..3);
    check_grad(&[input(&mut r, &s)], &move |t| t[0].softmax(axis), seed)
}

fn case_mean_axis(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 3);
    let axis = r.random_range(0..3);
    check_grad(&[input(&mut r, &s)], &move |t| t[0].mean_axis(axis), seed)
}

fn case_sum_mean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 2);
    let a = check_grad(&[input(&mut r, &s)], &|t| t[0].sum(), seed);
    let b = check_grad(&[input(&mut r, &s)], &|t| t[0].mean(), seed);
    a.max(b)
}

fn case_concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut s = shape_of(&mut r, 3);
    let axis = r.random_range(0..3);
    let a = input(&mut r, &s);
    s[axis] = r.random_range(1..4);
    let b = input(&mut r, &s);
    check_grad(&[a, b], &move |t| Tensor::concat(t, axis), seed)
}

fn case_reshape_transpose(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 3);
    let flat = vec![s[0], s[1] * s[2]];
    check_grad(
        &[input(&mut r, &s)],
        &move |t| t[0].transpose()?.reshape(&flat)?.transpose(),
        seed,
    )
}

fn case_scalar_ops(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 2);
    let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    check_grad(
        &[input(&mut r, &s)],
        &move |t| Ok(t[0].scalar_mul(a).add_scalar(b)),
        seed,
    )
}

fn case_log(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 2);
    let n = s.iter().product();
    let v = (0..n).map(|_| r.random_range(0.2..3.0)).collect();
    check_grad(&[(s, v)], &|t| t[0].log(), seed)
}

fn case_clamp_min(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape_of(&mut r, 2);
    let min = 0.1;
    check_grad(&[kink_free(&mut r, &s, min)], &move |t| Ok(t[0].clamp_min(min)), seed)
}

fn case_cosine(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = vec![r.random_range(1..5), r.random_range(2..6)];
    let inputs = [input(&mut r, &s), input(&mut r, &s)];
    check_grad(&inputs, &|t| t[0].cosine_similarity(&t[1], 1e-7), seed)
}

fn case_gather_rows(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = vec![r.random_range(1..5), r.random_range(1..4)];
    let idx: Vec<usize> = (0..r.random_range(1..7)).map(|_| r.random_range(0..s[0])).collect();
    check_grad(&[input(&mut r, &s)], &move |t| t[0].gather_rows(&idx), seed)
}

fn case_avg_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = r.random_range(1..4);
    let s = vec![r.random_range(1..3), r.random_range(1..3), 2 * k, 3 * k];
    check_grad(&[input(&mut r, &s)], &move |t| t[0].avg_pool2d(k), seed)
}

/// Every differentiable op with its randomized instance generator.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", case_add),
        ("sub", case_sub),
        ("mul", case_mul),
        ("add_broadcast", case_add_broadcast),
        ("matmul", case_matmul),
        ("conv2d", case_conv2d),
        ("relu", case_relu),
        ("sigmoid", case_sigmoid),
        ("softmax", case_softmax),
        ("mean_axis", case_mean_axis),
        ("sum_mean", case_sum_mean),
        ("concat", case_concat),
        ("reshape_transpose", case_reshape_transpose),
        ("scalar_ops", case_scalar_ops),
        ("log", case_log),
        ("clamp_min", case_clamp_min),
        ("cosine_similarity", case_cosine),
        ("gather_rows", case_gather_rows),
        ("avg_pool2d", case_avg_pool),
    ]
}

/// Verdict of one property check.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Plain-loop BCE: mean of `−[y ln max(σ(z), ε) + (1 − y) ln max(σ(−z), ε)]`.
pub fn bce_scalar(logits: &[f64], y: &[f64], eps: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(y)
        .map(|(&z, &t)| -(t * sigmoid_scalar(z).max(eps).ln() + (1.0 - t) * sigmoid_scalar(-z).max(eps).ln()))
        .sum();
    total / logits.len() as f64
}

pub fn contrastive_scalar(zo: &[f64], zb: &[f64], c: usize, eps: f64) -> f64 {
    let n = zo.len() / c;
    let mut total = 0.0;
    for i in 0..n {
        let a = &zo[i * c..(i + 1) * c];
        let b = &zb[i * c..(i + 1) * c];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
        total += -(1.0 - dot / (na * nb)).max(eps).ln();
    }
    total / n as f64
}

/// `x · Wᵀ + b` row by row.
pub fn affine_scalar(x: &[f64], w: &[f64], b: &[f64], width: usize) -> Vec<f64> {
    let k = b.len();
    x.chunks(width)
        .flat_map(|row| {
            (0..k).map(move |c| {
                b[c] + row
                    .iter()
                    .zip(&w[c * width..(c + 1) * width])
                    .map(|(p, q)| p * q)
                    .sum::<f64>()
            })
        })
        .collect()
}

/// Scalar reference for both shuffle terms with head weights `w`, `b`.
pub fn shuffle_scalar(
    zo: &[f64],
    zb: &[f64],
    y: &[f64],
    perm_b: &[usize],
    perm_o: &[usize],
    w: &[f64],
    b: &[f64],
    eps: f64,
) -> (f64, f64) {
    let n = perm_b.len();
    let c = zo.len() / n;
    let k = b.len();
    let mut sb = Vec::new();
    let mut so = Vec::new();
    let mut y_hat = Vec::new();
    for i in 0..n {
        sb.extend_from_slice(&zo[i * c..(i + 1) * c]);
        sb.extend_from_slice(&zb[perm_b[i] * c..(perm_b[i] + 1) * c]);
        so.extend_from_slice(&zo[perm_o[i] * c..(perm_o[i] + 1) * c]);
        so.extend_from_slice(&zb[i * c..(i + 1) * c]);
        y_hat.extend_from_slice(&y[perm_o[i] * k..(perm_o[i] + 1) * k]);
    }
    (
        bce_scalar(&affine_scalar(&sb, w, b, 2 * c), y, eps),
        bce_scalar(&affine_scalar(&so, w, b, 2 * c), &y_hat, eps),
    )
}

fn loss_model(k: usize, c: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        in_channels: 3,
        num_classes: k,
        stage_channels: [4, 4, 4],
        channels: c,
        attn_dim: 2,
    };
    Model::new(cfg, seed).unwrap()
}

/// Loss values against the scalar references on random `4×K` inputs, plus
/// the closed-form anchors.
pub fn loss_oracles(instances: u64) -> Outcome {
    let eps = 1e-7;
    let (n, k, c) = (4, 5, 6);
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(seed);
        let lo = uniform(&mut r, n * k, 4.0);
        let lb = uniform(&mut r, n * k, 4.0);
        let y: Vec<f64> = (0..n * k).map(|_| r.random_range(0..2) as f64).collect();
        let t = |v: &[f64], w: usize| Tensor::new(&[v.len() / w, w], v.to_vec()).unwrap();
        let got = sma::classification_loss(&t(&lo, k), &t(&lb, k), &y, eps)
            .unwrap()
            .item()
            .unwrap();
        let want = bce_scalar(&lo, &y, eps) + bce_scalar(&lb, &vec![0.0; n * k], eps);
        worst = worst.max((got - want).abs());

        let zo = uniform(&mut r, n * c, 2.0);
        let zb = uniform(&mut r, n * c, 2.0);
        let got = sma::contrastive_loss(&t(&zo, c), &t(&zb, c), eps)
            .unwrap()
            .item()
            .unwrap();
        worst = worst.max((got - contrastive_scalar(&zo, &zb, c, eps)).abs());

        let model = loss_model(k, c, seed);
        let perm = |r: &mut ChaCha8Rng| sma::random_permutation(n, r);
        let (pb, po) = (perm(&mut r), perm(&mut r));
        let sb = sma::shuffle_with(&t(&zo, c), &t(&zb, c), &y, pb.clone(), po.clone()).unwrap();
        let (t1, t2) = sma::shuffle_loss(&model, &sb, &y, eps).unwrap();
        let (w1, w2) = shuffle_scalar(
            &zo,
            &zb,
            &y,
            &pb,
            &po,
            model.param("head_fs.weight").data(),
            model.param("head_fs.bias").data(),
            eps,
        );
        worst = worst
            .max((t1.item().unwrap() - w1).abs())
            .max((t2.item().unwrap() - w2).abs());
    }
    let ln2 = std::f64::consts::LN_2;
    let zeros = Tensor::zeros(&[n, k]);
    let y: Vec<f64> = (0..n * k).map(|i| (i % 2) as f64).collect();
    let cls0 = sma::classification_loss(&zeros, &zeros, &y, eps)
        .unwrap()
        .item()
        .unwrap();
    let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let neg = sma::contrastive_loss(&a, &a.scalar_mul(-1.0), eps)
        .unwrap()
        .item()
        .unwrap();
    let model = loss_model(k, 1, 0);
    let mut m = model.clone();
    for name in ["head_fs.weight", "head_fs.bias"] {
        let p = m.param_mut(name).unwrap();
        let len = p.values().len();
        p.set_values(vec![0.0; len]).unwrap();
    }
    let z1 = Tensor::new(&[n, 1], vec![1.0; n]).unwrap();
    let sb = sma::shuffle_with(&z1, &z1, &y, vec![1, 2, 3, 0], vec![3, 0, 1, 2]).unwrap();
    let (s1, s2) = sma::shuffle_loss(&m, &sb, &y, eps).unwrap();
    let shuffle0 = s1.item().unwrap() + s2.item().unwrap();
    let ulps = |v: f64, want: f64| (v - want).abs() <= 4.0 * f64::EPSILON * want.abs();
    let anchors_exact = ulps(cls0, 2.0 * ln2) && ulps(neg, -ln2) && ulps(shuffle0, 2.0 * ln2);
    Outcome::new(
        worst < 1e-12 && anchors_exact,
        format!(
            "max |engine − scalar| = {worst:.2e} over {instances} instances; anchors L_cls={cls0}, L_contr={neg}, L_shuffle={shuffle0} (within 4 ulp: {anchors_exact})"
        ),
    )
}

/// ShuffledBatch invariants over random permutations, and the identity
/// case reducing to the unshuffled loss bit for bit.
pub fn shuffle_mechanics(trials: u64) -> Outcome {
    let (n, k, c) = (6, 5, 3);
    let mut r = rng(77);
    let mut failures = Vec::new();
    let zo_v = uniform(&mut r, n * c, 1.0);
    let zb_v = uniform(&mut r, n * c, 1.0);
    let y: Vec<f64> = (0..n * k).map(|_| r.random_range(0..2) as f64).collect();
    let zo = Tensor::param(&[n, c], zo_v.clone()).unwrap();
    let zb = Tensor::param(&[n, c], zb_v.clone()).unwrap();
    let row = |v: &[f64], i: usize| v[i * c..(i + 1) * c].to_vec();
    for trial in 0..trials {
        let sb = sma::shuffle_augment(&zo, &zb, &y, &mut r).unwrap();
        for p in [&sb.perm_b, &sb.perm_o] {
            let mut s = p.clone();
            s.sort_unstable();
            if s != (0..n).collect::<Vec<_>>() {
                failures.push(format!("trial {trial}: not a bijection {p:?}"));
            }
        }
        let (zsb, zso) = (sb.z_sb.data(), sb.z_so.data());
        for i in 0..n {
            let a = &zsb[i * 2 * c..(i + 1) * 2 * c];
            let b = &zso[i * 2 * c..(i + 1) * 2 * c];
            if a[..c] != row(&zo_v, i)[..]
                || a[c..] != row(&zb_v, sb.perm_b[i])[..]
                || b[..c] != row(&zo_v, sb.perm_o[i])[..]
                || b[c..] != row(&zb_v, i)[..]
                || sb.y_hat[i * k..(i + 1) * k] != y[sb.perm_o[i] * k..(sb.perm_o[i] + 1) * k]
            {
                failures.push(format!("trial {trial}: row {i} composition"));
            }
        }
        let mut bg: Vec<Vec<u64>> = (0..n)
            .map(|i| {
                zsb[i * 2 * c + c..(i + 1) * 2 * c]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..n)
            .map(|i| row(&zb_v, i).iter().map(|v| v.to_bits()).collect())
            .collect();
        bg.sort();
        orig.sort();
        if bg != orig {
            failures.push(format!("trial {trial}: background multiset changed"));
        }
    }
    let model = loss_model(k, c, 5);
    let id: Vec<usize> = (0..n).collect();
    let sb = sma::shuffle_with(&zo, &zb, &y, id.clone(), id).unwrap();
    let (t1, t2) = sma::shuffle_loss(&model, &sb, &y, 1e-7).unwrap();
    let plain = Tensor::concat(&[zo.clone(), zb.detach()], 1).unwrap();
    let direct = sma::bce_with_logits(&model.classify_shuffled(&plain).unwrap(), &y, 1e-7).unwrap();
    let identity_ok = t1.item().unwrap().to_bits() == direct.item().unwrap().to_bits()
        && t1.item().unwrap().to_bits() == t2.item().unwrap().to_bits()
        && sb.y_hat == y;
    if !identity_ok {
        failures.push("identity permutation differs from the unshuffled loss".into());
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{trials} random permutation pairs; identity case bit-exact")
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

/// Shuffle-only gradients: nothing reaches the background aggregator, while
/// `f_s`, the object aggregator and the backbone receive signal.
pub fn detach_invariant(seeds: u64) -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..seeds {
        for mode in [ShuffleMode::TwoWay, ShuffleMode::BackgroundOnly] {
            let (model, case) = LossCase::random(seed, mode);
            let f = model.forward(&case.x).unwrap();
            let sb = sma::shuffle_with(&f.z_o, &f.z_b, &case.y, case.perm_b.clone(), case.perm_o.clone()).unwrap();
            let (t1, t2) = sma::shuffle_loss(&model, &sb, &case.y, 1e-7).unwrap();
            let loss = if mode == ShuffleMode::TwoWay {
                t1.add(&t2).unwrap()
            } else {
                t1
            };
            loss.backward().unwrap();
            for p in model.params() {
                let g = p.grad();
                let zero = g.as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0));
                let background = p.name.starts_with("agg_b.");
                let must_flow =
                    p.name == "head_fs.weight" || p.name == "agg_o.conv.weight" || p.name.starts_with("stage4.");
                if background && !zero {
                    bad.push(format!("seed {seed} {mode}: {} received gradient", p.name));
                }
                if must_flow && zero {
                    bad.push(format!("seed {seed} {mode}: {} received none", p.name));
                }
            }
        }
    }
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            format!(
                "{} graphs: agg_b gradients absent, f_s / agg_o / backbone nonzero",
                seeds * 2
            )
        } else {
            bad.join("; ")
        },
    )
}

/// Brute-force IoU over one pair of label maps.
pub fn iou_bruteforce(pred: &[u8], gt: &[u8], k: usize) -> (Vec<Option<f64>>, f64) {
    let mut ious = Vec::new();
    for c in 0..=k as u8 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let u = tp + fp + fn_;
        ious.push((u > 0).then(|| tp as f64 / u as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let m = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (ious, m)
}

pub fn miou_oracle(pairs: u64) -> Outcome {
    use sma_core::localization::miou;
    let k = 5;
    let mut mismatches = 0;
    for seed in 0..pairs {
        let mut r = rng(seed + 1000);
        // blocky maps so classes overlap in nontrivial amounts
        let draw = |r: &mut ChaCha8Rng| -> Vec<u8> {
            let present: Vec<u8> = (0..=k as u8).filter(|_| r.random_bool(0.6)).collect();
            let present = if present.is_empty() { vec![0] } else { present };
            let blocks: Vec<u8> = (0..64).map(|_| present[r.random_range(0..present.len())]).collect();
            (0..64 * 64).map(|i| blocks[(i / 64 / 8) * 8 + (i % 64) / 8]).collect()
        };
        let (pred, gt) = (draw(&mut r), draw(&mut r));
        let got = miou(&pred, &gt, k).unwrap();
        let (want_iou, want_m) = iou_bruteforce(&pred, &gt, k);
        if got.iou != want_iou || got.miou != want_m {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("{pairs} random 64×64 pairs, {mismatches} mismatches"),
    )
}

/// Linear logits `x · Wᵀ + b` over flattened images.
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub dim: usize,
}

impl sma_core::attribution::Attributable for LinearModel {
    fn num_classes(&self) -> usize {
        self.b.len()
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let k = self.b.len();
        let w = Tensor::new(&[k, self.dim], self.w.clone())?;
        images
            .reshape(&[n, self.dim])?
            .matmul(&w.transpose()?)?
            .add_broadcast(&Tensor::new(&[k], self.b.clone())?)
    }
}

pub fn ig_linear_exactness() -> Outcome {
    use sma_core::attribution::{completeness_check, integrated_gradients, AttributionConfig, Baseline};
    let shape = [3, 8, 8];
    let dim = 3 * 64;
    let mut worst_map = 0.0f64;
    let mut worst_gap = 0.0f64;
    for seed in 0..5 {
        let mut r = rng(seed + 300);
        let model = LinearModel {
            w: uniform(&mut r, 3 * dim, 1.0),
            b: uniform(&mut r, 3, 1.0),
            dim,
        };
        let x: Vec<f64> = (0..dim).map(|_| r.random_range(0.0..1.0)).collect();
        let target = (seed % 3) as usize;
        let mut want = vec![0.0; 64];
        for ch in 0..3 {
            for p in 0..64 {
                want[p] += model.w[target * dim + ch * 64 + p] * x[ch * 64 + p];
            }
        }
        for m in [1, 8, 128] {
            let cfg = AttributionConfig {
                steps: m,
                ..Default::default()
            };
            let map = integrated_gradients(&model, &x, shape, target, &cfg).unwrap();
            let d = map.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_map = worst_map.max(d);
            let gap = completeness_check(&map, &model, &x, shape, target, Baseline::Zero)
                .unwrap()
                .gap;
            worst_gap = worst_gap.max(gap);
        }
    }
    Outcome::new(
        worst_map < 1e-10 && worst_gap < 1e-10,
        format!("max |I − w·x| = {worst_map:.2e}, max gap = {worst_gap:.2e} over m ∈ {{1, 8, 128}}"),
    )
}
