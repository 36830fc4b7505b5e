//! Forward and backward numeric kernels behind the differentiable ops.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::{Shape, Tensor};

/// Which elements share normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// Per sample and channel, over (H, W).
    Instance,
    /// Per sample, over (H, W, C).
    Layer,
    /// Per sample and block of `C / g` consecutive channels.
    Group(usize),
    /// Per channel, over (N, H, W).
    Batch,
}

/// Resolved grouping: `stat = (per_sample ? n : 0) * groups + c / block`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StatLayout {
    per_sample: bool,
    groups: usize,
    block: usize,
    stats: usize,
    count: usize,
}

impl Grouping {
    pub(crate) fn layout(self, s: Shape) -> Result<StatLayout> {
        let c = s.c();
        let (per_sample, groups) = match self {
            Grouping::Instance => (true, c),
            Grouping::Layer => (true, 1),
            Grouping::Group(g) => {
                if g == 0 || c % g != 0 {
                    return Err(Error::GroupMismatch { groups: g, channels: c });
                }
                (true, g)
            }
            Grouping::Batch => {
                let nhw = s.n() * s.h() * s.w();
                if nhw < 2 {
                    return Err(Error::DegenerateBatch(nhw));
                }
                (false, c)
            }
        };
        let block = c / groups;
        let stats = if per_sample { s.n() * groups } else { groups };
        Ok(StatLayout {
            per_sample,
            groups,
            block,
            stats,
            count: s.numel() / stats,
        })
    }
}

impl StatLayout {
    /// Calls `f(stat, offset)` for every element in a fixed order.
    #[inline(always)]
    fn visit(&self, s: Shape, mut f: impl FnMut(usize, usize)) {
        let per_pixel = s.c() / self.block;
        let hw = s.h() * s.w();
        let mut off = 0;
        for n in 0..s.n() {
            let base = if self.per_sample { n * self.groups } else { 0 };
            for _ in 0..hw {
                for g in base..base + per_pixel {
                    for _ in 0..self.block {
                        f(g, off);
                        off += 1;
                    }
                }
            }
        }
    }
}

/// Output of [`normalize_forward`]: the normalized values plus the
/// per-statistic inverse standard deviations needed by the backward pass.
pub(crate) struct Normalized<T> {
    pub y: Tensor<T>,
    pub inv_std: Vec<f64>,
}

/// `(x - mean) / sqrt(var + eps)` with population statistics per group.
pub(crate) fn normalize_forward<T: Scalar>(x: &Tensor<T>, grouping: Grouping, eps: f64) -> Result<Normalized<T>> {
    let s = x.shape();
    let layout = grouping.layout(s)?;
    let xs = x.data();
    let mut sum = vec![0.0f64; layout.stats];
    layout.visit(s, |g, i| sum[g] += xs[i].as_f64());
    let mean: Vec<f64> = sum.iter().map(|v| v / layout.count as f64).collect();
    let mut sq = vec![0.0f64; layout.stats];
    layout.visit(s, |g, i| {
        let d = xs[i].as_f64() - mean[g];
        sq[g] += d * d;
    });
    let inv_std: Vec<f64> = sq
        .iter()
        .map(|v| 1.0 / (v / layout.count as f64 + eps).sqrt())
        .collect();
    let mut y = vec![T::zero(); xs.len()];
    layout.visit(s, |g, i| y[i] = T::of((xs[i].as_f64() - mean[g]) * inv_std[g]));
    Ok(Normalized {
        y: Tensor::from_parts(s, y),
        inv_std,
    })
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))` per group, where `y`
/// is the normalized forward output.
pub(crate) fn normalize_backward<T: Scalar>(
    y: &Tensor<T>,
    inv_std: &[f64],
    grouping: Grouping,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let s = y.shape();
    let layout = grouping.layout(s).expect("validated in forward");
    let (ys, dys) = (y.data(), dy.data());
    let mut mean_dy = vec![0.0f64; layout.stats];
    let mut mean_dyy = vec![0.0f64; layout.stats];
    layout.visit(s, |g, i| {
        let d = dys[i].as_f64();
        mean_dy[g] += d;
        mean_dyy[g] += d * ys[i].as_f64();
    });
    let inv_count = 1.0 / layout.count as f64;
    let mut dx = vec![T::zero(); ys.len()];
    layout.visit(s, |g, i| {
        let v = dys[i].as_f64() - mean_dy[g] * inv_count - ys[i].as_f64() * mean_dyy[g] * inv_count;
        dx[i] = T::of(v * inv_std[g]);
    });
    Tensor::from_parts(s, dx)
}

fn check_conv_shapes<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<usize> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.n();
    if ws.h() != k || k % 2 == 0 {
        return Err(Error::InvalidShape {
            shape: ws,
            reason: "convolution kernel must be square with odd size".into(),
        });
    }
    if ws.w() != xs.c() {
        return Err(Error::ShapeMismatch {
            lhs: xs,
            rhs: ws,
            context: "convolution input channels differ from the kernel's",
        });
    }
    if b.shape() != Shape::channels(ws.c()) {
        return Err(Error::ShapeMismatch {
            lhs: ws,
            rhs: b.shape(),
            context: "bias must be (1,1,1,C_out)",
        });
    }
    Ok(k)
}

/// Gathers `k x k` same-padded patches of sample `n` into rows of `col`.
fn im2col<T: Scalar>(x: &Tensor<T>, n: usize, k: usize, col: &mut [T]) {
    let s = x.shape();
    let (h, w, c) = (s.h(), s.w(), s.c());
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    let xs = x.data();
    for i in 0..h {
        for j in 0..w {
            let row = &mut col[(i * w + j) * row_len..(i * w + j + 1) * row_len];
            for ki in 0..k {
                let si = i as isize + ki as isize - pad;
                for kj in 0..k {
                    let sj = j as isize + kj as isize - pad;
                    let dst = &mut row[(ki * k + kj) * c..(ki * k + kj + 1) * c];
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let off = s.offset(n, si as usize, sj as usize, 0);
                        dst.copy_from_slice(&xs[off..off + c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], s: Shape, n: usize, k: usize, dx: &mut [T]) {
    let (h, w, c) = (s.h(), s.w(), s.c());
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    for i in 0..h {
        for j in 0..w {
            let row = &col[(i * w + j) * row_len..(i * w + j + 1) * row_len];
            for ki in 0..k {
                let si = i as isize + ki as isize - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let sj = j as isize + kj as isize - pad;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let off = s.offset(n, si as usize, sj as usize, 0);
                    let src = &row[(ki * k + kj) * c..(ki * k + kj + 1) * c];
                    for (d, &v) in dx[off..off + c].iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Stride-1 same-padded convolution. `w` is `(k, k, C_in, C_out)`, `b` is
/// `(1, 1, 1, C_out)`.
pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = check_conv_shapes(x, w, b)?;
    let s = x.shape();
    let (cin, cout) = (s.c(), w.shape().c());
    let hw = s.h() * s.w();
    let kk = k * k * cin;
    let out_shape = Shape::new(s.n(), s.h(), s.w(), cout);
    let mut out = Vec::with_capacity(out_shape.numel());
    for _ in 0..s.n() * hw {
        out.extend_from_slice(b.data());
    }
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); hw * kk] };
    for n in 0..s.n() {
        let dst = &mut out[n * hw * cout..(n + 1) * hw * cout];
        let src: &[T] = if k == 1 {
            &x.data()[n * hw * cin..(n + 1) * hw * cin]
        } else {
            im2col(x, n, k, &mut col);
            &col
        };
        gemm(Mat::new(src, hw, kk), Mat::new(w.data(), kk, cout), dst, true);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let s = x.shape();
    let k = w.shape().n();
    let (cin, cout) = (s.c(), w.shape().c());
    let hw = s.h() * s.w();
    let kk = k * k * cin;
    let mut dw = vec![T::zero(); kk * cout];
    let mut db = vec![T::zero(); cout];
    for px in dy.data().chunks_exact(cout) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d = *d + v;
        }
    }
    let mut dx = if need_dx { vec![T::zero(); s.numel()] } else { Vec::new() };
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); hw * kk] };
    let mut dcol = if need_dx && k > 1 { vec![T::zero(); hw * kk] } else { Vec::new() };
    for n in 0..s.n() {
        let dy_n = &dy.data()[n * hw * cout..(n + 1) * hw * cout];
        let src: &[T] = if k == 1 {
            &x.data()[n * hw * cin..(n + 1) * hw * cin]
        } else {
            im2col(x, n, k, &mut col);
            &col
        };
        gemm(Mat::new(src, hw, kk).t(), Mat::new(dy_n, hw, cout), &mut dw, true);
        if need_dx {
            if k == 1 {
                let dst = &mut dx[n * hw * cin..(n + 1) * hw * cin];
                gemm(Mat::new(dy_n, hw, cout), Mat::new(w.data(), kk, cout).t(), dst, true);
            } else {
                gemm(Mat::new(dy_n, hw, cout), Mat::new(w.data(), kk, cout).t(), &mut dcol, false);
                col2im_add(&dcol, s, n, k, &mut dx);
            }
        }
    }
    ConvGrads {
        dx: need_dx.then(|| Tensor::from_parts(s, dx)),
        dw: Tensor::from_parts(w.shape(), dw),
        db: Tensor::from_parts(Shape::channels(cout), db),
    }
}

fn check_up_shapes<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let ws = w.shape();
    if ws.n() != 2 || ws.h() != 2 || ws.w() != x.shape().c() {
        return Err(Error::ShapeMismatch {
            lhs: x.shape(),
            rhs: ws,
            context: "up-convolution kernel must be (2,2,C_in,C_out)",
        });
    }
    if b.shape() != Shape::channels(ws.c()) {
        return Err(Error::ShapeMismatch {
            lhs: ws,
            rhs: b.shape(),
            context: "bias must be (1,1,1,C_out)",
        });
    }
    Ok(())
}

/// 2x2 stride-2 transposed convolution: every input pixel `(i, j)` writes
/// the output block `(2i..2i+2, 2j..2j+2)`.
pub(crate) fn conv_transpose2_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_up_shapes(x, w, b)?;
    let s = x.shape();
    let (cin, cout) = (s.c(), w.shape().c());
    let (h, wd) = (s.h(), s.w());
    let hw = h * wd;
    let out_shape = Shape::new(s.n(), 2 * h, 2 * wd, cout);
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut tmp = vec![T::zero(); hw * cout];
    for n in 0..s.n() {
        let x_n = &x.data()[n * hw * cin..(n + 1) * hw * cin];
        for ab in 0..4 {
            let (a, bb) = (ab / 2, ab % 2);
            let w_ab = &w.data()[ab * cin * cout..(ab + 1) * cin * cout];
            gemm(Mat::new(x_n, hw, cin), Mat::new(w_ab, cin, cout), &mut tmp, false);
            for i in 0..h {
                for j in 0..wd {
                    let off = out_shape.offset(n, 2 * i + a, 2 * j + bb, 0);
                    let src = &tmp[(i * wd + j) * cout..(i * wd + j + 1) * cout];
                    for ((d, &v), &bias) in out[off..off + cout].iter_mut().zip(src).zip(b.data()) {
                        *d = v + bias;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn conv_transpose2_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let s = x.shape();
    let (cin, cout) = (s.c(), w.shape().c());
    let (h, wd) = (s.h(), s.w());
    let hw = h * wd;
    let ys = dy.shape();
    let mut dw = vec![T::zero(); 4 * cin * cout];
    let mut db = vec![T::zero(); cout];
    for px in dy.data().chunks_exact(cout) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d = *d + v;
        }
    }
    let mut dx = if need_dx { vec![T::zero(); s.numel()] } else { Vec::new() };
    let mut g = vec![T::zero(); hw * cout];
    for n in 0..s.n() {
        let x_n = &x.data()[n * hw * cin..(n + 1) * hw * cin];
        for ab in 0..4 {
            let (a, bb) = (ab / 2, ab % 2);
            for i in 0..h {
                for j in 0..wd {
                    let off = ys.offset(n, 2 * i + a, 2 * j + bb, 0);
                    g[(i * wd + j) * cout..(i * wd + j + 1) * cout].copy_from_slice(&dy.data()[off..off + cout]);
                }
            }
            let dw_ab = &mut dw[ab * cin * cout..(ab + 1) * cin * cout];
            gemm(Mat::new(x_n, hw, cin).t(), Mat::new(&g, hw, cout), dw_ab, true);
            if need_dx {
                let w_ab = &w.data()[ab * cin * cout..(ab + 1) * cin * cout];
                let dx_n = &mut dx[n * hw * cin..(n + 1) * hw * cin];
                gemm(Mat::new(&g, hw, cout), Mat::new(w_ab, cin, cout).t(), dx_n, true);
            }
        }
    }
    ConvGrads {
        dx: need_dx.then(|| Tensor::from_parts(s, dx)),
        dw: Tensor::from_parts(w.shape(), dw),
        db: Tensor::from_parts(Shape::channels(cout), db),
    }
}

/// 2x2 max pooling. Also returns, per output element, the window position
/// (0..4, row-major) of the first maximum.
pub(crate) fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let s = x.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "max pooling needs even H and W".into(),
        });
    }
    let out_shape = Shape::new(s.n(), s.h() / 2, s.w() / 2, s.c());
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    let xs = x.data();
    for n in 0..s.n() {
        for i in 0..out_shape.h() {
            for j in 0..out_shape.w() {
                for c in 0..s.c() {
                    let mut best = xs[s.offset(n, 2 * i, 2 * j, c)];
                    let mut best_k = 0u8;
                    for k in 1..4u8 {
                        let v = xs[s.offset(n, 2 * i + (k as usize) / 2, 2 * j + (k as usize) % 2, c)];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out.push(best);
                    arg.push(best_k);
                }
            }
        }
    }
    Ok((Tensor::from_parts(out_shape, out), arg))
}

pub(crate) fn max_pool2_backward<T: Scalar>(in_shape: Shape, arg: &[u8], dy: &Tensor<T>) -> Tensor<T> {
    let os = dy.shape();
    let mut dx = vec![T::zero(); in_shape.numel()];
    let mut idx = 0;
    for n in 0..os.n() {
        for i in 0..os.h() {
            for j in 0..os.w() {
                for c in 0..os.c() {
                    let k = arg[idx] as usize;
                    dx[in_shape.offset(n, 2 * i + k / 2, 2 * j + k % 2, c)] = dy.data()[idx];
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_parts(in_shape, dx)
}

/// Mean over pixels of `-log softmax(logits)[label]`. Returns the loss and
/// the per-pixel class probabilities.
pub(crate) fn cross_entropy_forward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    let k = s.c();
    let pixels = s.n() * s.h() * s.w();
    if labels.len() != pixels {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("expected {pixels} labels, got {}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let mut probs = vec![0.0f64; s.numel()];
    let mut total = 0.0f64;
    for (p, (row, &label)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_denom = denom.ln();
        total += -(row[label].as_f64() - max - log_denom);
        for (q, v) in probs[p * k..(p + 1) * k].iter_mut().zip(row) {
            *q = (v.as_f64() - max).exp() / denom;
        }
    }
    Ok((total / pixels as f64, probs))
}

pub(crate) fn cross_entropy_backward<T: Scalar>(shape: Shape, probs: &[f64], labels: &[usize], dloss: f64) -> Tensor<T> {
    let k = shape.c();
    let scale = dloss / labels.len() as f64;
    let mut g: Vec<T> = probs.iter().map(|&p| T::of(p * scale)).collect();
    for (p, &label) in labels.iter().enumerate() {
        let i = p * k + label;
        g[i] = T::of((probs[i] - 1.0) * scale);
    }
    Tensor::from_parts(shape, g)
}
