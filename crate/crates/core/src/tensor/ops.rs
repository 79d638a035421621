//! Forward kernels and their vector-Jacobian products.

use std::sync::Arc;

use super::gemm::{gemm, Layout};
use super::{OpKind, Tensor};
use crate::error::{Error, Result};
use crate::par;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.shape().len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// (outer, len, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn unary(
    t: &Tensor,
    kind: OpKind,
    f: impl Fn(f64) -> f64,
    backward: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
) -> Tensor {
    let output: Arc<Vec<f64>> = Arc::new(t.data().iter().map(|&x| f(x)).collect());
    let input = t.data_arc();
    Tensor::from_op(
        t.shape().to_vec(),
        Arc::clone(&output),
        kind,
        vec![t.clone()],
        Box::new(move |g, needs| vec![needs[0].then(|| backward(g, &input, &output))]),
    )
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
    fn in_len(&self) -> usize {
        self.ci * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.co * self.ho * self.wo
    }
}

/// Unfolds one sample into `col` (`Cin·kh·kw × Ho·Wo`), overwriting every entry.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let l = g.col_cols();
    for c in 0..g.ci {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..][..g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    if g.stride == 1 {
                        // contiguous run with zero padding at either end
                        let off = kj as isize - g.pad as isize;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *v = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let l = g.col_cols();
    for c in 0..g.ci {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same("add", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            OpKind::Add,
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same("sub", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            OpKind::Sub,
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same("mul", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.data_arc(), other.data_arc());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            OpKind::Mul,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
                ]
            }),
        ))
    }

    /// `self + other`, where `other`'s shape equals a trailing suffix of
    /// `self`'s shape and is repeated over the leading dims (bias add).
    pub fn add_broadcast(&self, other: &Tensor) -> Result<Tensor> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            return Err(Error::shape("add_broadcast", format!("{o:?} is not a suffix of {s:?}")));
        }
        let m = other.numel();
        let bias = other.data();
        let data: Vec<f64> = self.data().iter().enumerate().map(|(i, v)| v + bias[i % m]).collect();
        Ok(Tensor::from_op(
            s.to_vec(),
            data,
            OpKind::AddBroadcast,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; m];
                    for row in g.chunks(m) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Matrix product of `m×k` by `k×n`, or batched `b×m×k` by `b×k×n`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::shape("matmul", format!("{:?} x {:?}", self.shape(), other.shape()));
        let (batch, m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        let (a, b) = (self.data(), other.data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &a[i * m * k..][..m * k],
                Layout::row_major(k),
                &b[i * k * n..][..k * n],
                Layout::row_major(n),
                0.0,
                &mut out[i * m * n..][..m * n],
                Layout::row_major(n),
            );
        }
        let shape = if self.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let (a, b) = (self.data_arc(), other.data_arc());
        Ok(Tensor::from_op(
            shape,
            out,
            OpKind::MatMul,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[i * m * n..][..m * n],
                            Layout::row_major(n),
                            &b[i * k * n..][..k * n],
                            Layout::transposed(n),
                            0.0,
                            &mut ga[i * m * k..][..m * k],
                            Layout::row_major(k),
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &a[i * m * k..][..m * k],
                            Layout::transposed(k),
                            &g[i * m * n..][..m * n],
                            Layout::row_major(n),
                            0.0,
                            &mut gb[i * k * n..][..k * n],
                            Layout::row_major(n),
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `self`: `N×Cin×H×W`, `weight`: `Cout×Cin×kh×kw`, `bias`: `Cout`.
    /// Samples are processed independently, so a sample's output does not
    /// depend on the rest of the batch.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        let mismatch = |why: &str| {
            Error::shape(
                "conv2d",
                format!(
                    "{why}: input {xs:?}, weight {ws:?}, bias {:?}",
                    bias.map(|b| b.shape().to_vec())
                ),
            )
        };
        let ([n, ci, h, w], [co, ci2, kh, kw]) = (xs, ws) else {
            return Err(mismatch("expected 4-d input and weight"));
        };
        if ci != ci2 {
            return Err(mismatch("channel mismatch"));
        }
        if stride == 0 {
            return Err(mismatch("stride must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [*co] {
                return Err(mismatch("bias must have shape [Cout]"));
            }
        }
        if h + 2 * padding < *kh || w + 2 * padding < *kw {
            return Err(mismatch("kernel larger than padded input"));
        }
        let geom = Arc::new(ConvGeom {
            n: *n,
            ci: *ci,
            h: *h,
            w: *w,
            co: *co,
            kh: *kh,
            kw: *kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        });
        let keep_cols = weight.requires_grad();
        let x = self.data();
        let wt = weight.data();
        let bv = bias.map(|b| b.data());
        let (out_len, col_len) = (geom.out_len(), geom.col_rows() * geom.col_cols());
        let mut out = vec![0.0; geom.n * out_len];
        let mut cols = if keep_cols {
            vec![0.0; geom.n * col_len]
        } else {
            Vec::new()
        };
        let sample = |i: usize, out: &mut [f64], col: &mut [f64]| {
            let g = &*geom;
            im2col(&x[i * g.in_len()..][..g.in_len()], g, col);
            let l = g.col_cols();
            if let Some(bv) = bv {
                for (c, row) in out.chunks_mut(l).enumerate() {
                    row.fill(bv[c]);
                }
            }
            gemm(
                g.co,
                g.col_rows(),
                l,
                1.0,
                wt,
                Layout::row_major(g.col_rows()),
                col,
                Layout::row_major(l),
                if bv.is_some() { 1.0 } else { 0.0 },
                out,
                Layout::row_major(l),
            );
        };
        if keep_cols {
            par::for_each_chunk_pair_mut(&mut out, out_len, &mut cols, col_len, |i, o, c| sample(i, o, c));
        } else {
            par::for_each_chunk_mut(&mut out, out_len, |i, o| {
                let mut col = vec![0.0; col_len];
                sample(i, o, &mut col);
            });
        }
        let shape = vec![geom.n, geom.co, geom.ho, geom.wo];
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let wdata = weight.data_arc();
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            shape,
            out,
            OpKind::Conv2d,
            inputs,
            Box::new(move |gout, needs| {
                let g = &*geom;
                let l = g.col_cols();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.n * g.in_len()];
                    par::for_each_chunk_mut(&mut gx, g.in_len(), |i, gxi| {
                        let mut gcol = vec![0.0; g.col_rows() * l];
                        gemm(
                            g.col_rows(),
                            g.co,
                            l,
                            1.0,
                            &wdata,
                            Layout::transposed(g.col_rows()),
                            &gout[i * g.out_len()..][..g.out_len()],
                            Layout::row_major(l),
                            0.0,
                            &mut gcol,
                            Layout::row_major(l),
                        );
                        col2im_add(&gcol, g, gxi);
                    });
                    gx
                });
                let gw = needs[1].then(|| {
                    let partials = par::map(g.n, |i| {
                        let mut gw = vec![0.0; g.co * g.col_rows()];
                        gemm(
                            g.co,
                            l,
                            g.col_rows(),
                            1.0,
                            &gout[i * g.out_len()..][..g.out_len()],
                            Layout::row_major(l),
                            &cols[i * g.col_rows() * l..][..g.col_rows() * l],
                            Layout::transposed(l),
                            0.0,
                            &mut gw,
                            Layout::row_major(g.col_rows()),
                        );
                        gw
                    });
                    let mut acc = vec![0.0; g.co * g.col_rows()];
                    for p in partials {
                        acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![0.0; g.co];
                        for i in 0..g.n {
                            let sample = &gout[i * g.out_len()..][..g.out_len()];
                            for (c, row) in sample.chunks(l).enumerate() {
                                gb[c] += row.iter().sum::<f64>();
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        unary(
            self,
            OpKind::Relu,
            |x| x.max(0.0),
            |g, x, _| g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, OpKind::Sigmoid, sigmoid, |g, _, y| {
            g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()
        })
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Contract(format!("log of non-positive value {bad}; clamp first")));
        }
        Ok(unary(self, OpKind::Log, f64::ln, |g, x, _| {
            g.iter().zip(x).map(|(g, x)| g / x).collect()
        }))
    }

    /// `max(x, min)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&self, min: f64) -> Tensor {
        unary(
            self,
            OpKind::ClampMin,
            move |x| x.max(min),
            move |g, x, _| g.iter().zip(x).map(|(g, &x)| if x >= min { *g } else { 0.0 }).collect(),
        )
    }

    pub fn scalar_mul(&self, s: f64) -> Tensor {
        unary(
            self,
            OpKind::ScalarMul,
            move |x| x * s,
            move |g, _, _| g.iter().map(|g| g * s).collect(),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, OpKind::AddScalar, move |x| x + s, |g, _, _| g.to_vec())
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[idx(j)] /= total;
                }
            }
        }
        let ys = Arc::new(y);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            Arc::clone(&ys),
            OpKind::Softmax,
            vec![self.clone()],
            Box::new(move |g, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * ys[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] = ys[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    gx
                })]
            }),
        ))
    }

    /// Mean along `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &x[(o * len + j) * inner..][..inner];
                y[o * inner..][..inner].iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        let scale = 1.0 / len as f64;
        y.iter_mut().for_each(|v| *v *= scale);
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            shape,
            y,
            OpKind::Mean,
            vec![self.clone()],
            Box::new(move |g, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            gx[(o * len + j) * inner..][..inner]
                                .iter_mut()
                                .zip(&g[o * inner..][..inner])
                                .for_each(|(a, v)| *a = v * scale);
                        }
                    }
                    gx
                })]
            }),
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let s = self.data().iter().sum();
        Ok(Tensor::from_op(
            vec![1],
            vec![s],
            OpKind::Sum,
            vec![self.clone()],
            Box::new(move |g, needs| vec![needs[0].then(|| vec![g[0]; n])]),
        ))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Result<Tensor> {
        Ok(self.sum()?.scalar_mul(1.0 / self.numel() as f64))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        check_axis("concat", first, axis)?;
        let rank = first.shape().len();
        for p in parts {
            let ok = p.shape().len() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "{:?} along axis {axis}",
                        parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
                    ),
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..][..*w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            shape,
            data,
            OpKind::Concat,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let gi = need.then(|| {
                            let mut gi = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                gi.extend_from_slice(&g[o * total + offset..][..w]);
                            }
                            gi
                        });
                        offset += w;
                        gi
                    })
                    .collect()
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data_arc(),
            OpKind::Reshape,
            vec![self.clone()],
            Box::new(|g, needs| vec![needs[0].then(|| g.to_vec())]),
        ))
    }

    /// Swaps the last two axes (rank ≥ 2).
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank < 2: {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.numel() / (r * c);
        let swap = move |x: &[f64], rows: usize, cols: usize| {
            let mut y = vec![0.0; x.len()];
            for b in 0..batch {
                let (src, dst) = (&x[b * rows * cols..], &mut y[b * rows * cols..]);
                for i in 0..rows {
                    for j in 0..cols {
                        dst[j * rows + i] = src[i * cols + j];
                    }
                }
            }
            y
        };
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(Tensor::from_op(
            shape,
            swap(self.data(), r, c),
            OpKind::Transpose,
            vec![self.clone()],
            Box::new(move |g, needs| vec![needs[0].then(|| swap(g, c, r))]),
        ))
    }

    /// Row-wise cosine similarity over the last axis. Norms are clamped below
    /// at `eps`. A rank-1 input yields shape `[1]`.
    pub fn cosine_similarity(&self, other: &Tensor, eps: f64) -> Result<Tensor> {
        check_same("cosine_similarity", self, other)?;
        let s = self.shape();
        let d = s[s.len() - 1];
        let rows = self.numel() / d;
        let (a, b) = (self.data_arc(), other.data_arc());
        let mut dots = vec![0.0; rows];
        let mut na = vec![0.0; rows];
        let mut nb = vec![0.0; rows];
        for r in 0..rows {
            let (ar, br) = (&a[r * d..][..d], &b[r * d..][..d]);
            dots[r] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            na[r] = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
            nb[r] = br.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        let out: Vec<f64> = (0..rows).map(|r| dots[r] / (na[r].max(eps) * nb[r].max(eps))).collect();
        let cos = out.clone();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            shape,
            out,
            OpKind::CosineSimilarity,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                // d cos / d a = b/(|a|'|b|') - cos * a / (|a| |a|')   (second term only when |a| > eps)
                let side = |x: &[f64], y: &[f64], nx: &[f64], ny: &[f64]| {
                    let mut gx = vec![0.0; x.len()];
                    for r in 0..rows {
                        let (xr, yr) = (&x[r * d..][..d], &y[r * d..][..d]);
                        let (cx, cy) = (nx[r].max(eps), ny[r].max(eps));
                        let dst = &mut gx[r * d..][..d];
                        for k in 0..d {
                            let mut v = yr[k] / (cx * cy);
                            if nx[r] > eps {
                                v -= cos[r] * xr[k] / (nx[r] * cx);
                            }
                            dst[k] = g[r] * v;
                        }
                    }
                    gx
                };
                vec![
                    needs[0].then(|| side(&a, &b, &na, &nb)),
                    needs[1].then(|| side(&b, &a, &nb, &na)),
                ]
            }),
        ))
    }

    /// Selects rows along axis 0: `out[i] = self[index[i]]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let rows = self.shape()[0];
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {:?}", self.shape()),
            ));
        }
        let w = self.numel() / rows;
        let x = self.data();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(&x[i * w..][..w]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        let index = index.to_vec();
        Ok(Tensor::from_op(
            shape,
            data,
            OpKind::GatherRows,
            vec![self.clone()],
            Box::new(move |g, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![0.0; rows * w];
                    for (o, &i) in index.iter().enumerate() {
                        gx[i * w..][..w]
                            .iter_mut()
                            .zip(&g[o * w..][..w])
                            .for_each(|(a, v)| *a += v);
                    }
                    gx
                })]
            }),
        ))
    }

    /// Non-overlapping `k×k` average pooling of an `N×C×H×W` tensor.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let &[n, c, h, w] = self.shape() else {
            return Err(Error::shape(
                "avg_pool2d",
                format!("expected 4-d input, got {:?}", self.shape()),
            ));
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("window {k} does not tile {:?}", self.shape()),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let scale = 1.0 / (k * k) as f64;
        let x = self.data();
        let mut y = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += x[p * h * w + (oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    y[p * ho * wo + oy * wo + ox] = s * scale;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, ho, wo],
            y,
            OpKind::AvgPool2d,
            vec![self.clone()],
            Box::new(move |g, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        for iy in 0..h {
                            for ix in 0..w {
                                gx[p * h * w + iy * w + ix] = g[p * ho * wo + (iy / k) * wo + ix / k] * scale;
                            }
                        }
                    }
                    gx
                })]
            }),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
