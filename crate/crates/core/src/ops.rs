//! Differentiable tensor operations.
//!
//! Every public function here computes a forward result and, when handed a
//! [`GradTape`], records what the backward pass will need. Numerical rules
//! that the whole engine relies on:
//!
//! * **Layout** is `[N, C, H, W]` row-major for image batches and `[rows,
//!   cols]` for matrices.
//! * **Summation order is fixed**: convolution accumulates over `(channel,
//!   kernel row, kernel col)` ascending, matrix products over the inner index
//!   ascending, reductions in element order. Identical inputs therefore give
//!   bitwise-identical outputs on every run.
//! * Convolution is **cross-correlation** (no kernel flip), the usual
//!   deep-learning convention. The fast path is im2col + matmul; the naive
//!   quadruple loop lives in the tests as an independent oracle and must
//!   produce bitwise-identical results.
//! * `same` padding keeps `ceil(size / stride)` output cells and pads
//!   asymmetrically (extra row/column at bottom/right when the total is odd);
//!   `valid` requires the window to fit and floors the output size.
//! * Pooling windows aggregate **in-bounds cells only**; padded cells are
//!   excluded from max and average alike.
//! * Operations that can produce overflow (convolution, matrix products,
//!   normalization, losses) validate their outputs and fail with a numeric
//!   error instead of storing non-finite values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Entry, GradTape};
use crate::tensor::Tensor;

/// Spatial padding rule for convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// No padding; the window must fit inside the input.
    Valid,
    /// Output size `ceil(input / stride)`; zero-pads (convolution) or shrinks
    /// the window (pooling), with the extra cell at the bottom/right.
    Same,
}

/// Pooling aggregation rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` inside the
/// cross-entropy loss, bounding a single-record loss by `-ln(BCE_EPSILON)`
/// (about 16.118).
pub const BCE_EPSILON: f32 = 1e-7;

/// Variance floor used by batch normalization.
pub const BN_EPSILON: f32 = 1e-5;

/// Largest `f32` strictly below 1; sigmoid outputs are clamped into
/// `[f32::MIN_POSITIVE, SIGMOID_MAX]` so they stay in the open interval (0, 1).
const SIGMOID_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

// ---------------------------------------------------------------------------
// shared kernels
// ---------------------------------------------------------------------------

fn ensure_finite(op: &str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: produced non-finite values")))
    }
}

/// `out = a × b` for row-major `a: [m, k]`, `b: [k, n]`. Accumulates over the
/// inner index ascending, one rounding per partial sum, for every output
/// element — the order the naive loops also use.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ × b` for row-major `a: [m, k]`, `b: [m, n]`, `out: [k, n]`.
pub(crate) fn matmul_at_b_accum(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major transpose of `src: [rows, cols]` into `[cols, rows]`.
pub(crate) fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut dst = vec![0.0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}

// ---------------------------------------------------------------------------
// convolution / pooling geometry
// ---------------------------------------------------------------------------

/// Resolved output geometry for one spatial windowed op.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WindowGeom {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn window_geometry(
    op: &str,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: Padding,
) -> Result<WindowGeom> {
    let (sh, sw) = stride;
    if sh == 0 || sw == 0 {
        return Err(Error::Invalid(format!("{op}: stride must be positive, got {stride:?}")));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::Invalid(format!("{op}: window must be positive, got {kh}x{kw}")));
    }
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::Shape(format!(
                    "{op}: {kh}x{kw} window exceeds {h}x{w} input with valid padding"
                )));
            }
            Ok(WindowGeom {
                out_h: (h - kh) / sh + 1,
                out_w: (w - kw) / sw + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            let out_h = h.div_ceil(sh);
            let out_w = w.div_ceil(sw);
            let pad_h = ((out_h - 1) * sh + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * sw + kw).saturating_sub(w);
            Ok(WindowGeom {
                out_h,
                out_w,
                // floor half on top/left; the odd extra cell goes bottom/right
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
    }
}

/// Unfolds one `[C, H, W]` item into a `[out_h * out_w, C * kh * kw]` matrix,
/// zero-filling out-of-bounds (padded) cells. Column order within a row is
/// `(channel, kernel row, kernel col)` ascending, which fixes the summation
/// order of the subsequent matrix product.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    g: &WindowGeom,
    col: &mut [f32],
) {
    let ckk = c * kh * kw;
    debug_assert_eq!(col.len(), g.out_h * g.out_w * ckk);
    for oy in 0..g.out_h {
        let iy0 = (oy * stride.0) as isize - g.pad_top as isize;
        for ox in 0..g.out_w {
            let ix0 = (ox * stride.1) as isize - g.pad_left as isize;
            let row = &mut col[(oy * g.out_w + ox) * ckk..(oy * g.out_w + ox + 1) * ckk];
            let mut idx = 0;
            for cc in 0..c {
                let plane = &x[cc * h * w..(cc + 1) * h * w];
                for i in 0..kh {
                    let iy = iy0 + i as isize;
                    let in_y = iy >= 0 && (iy as usize) < h;
                    for j in 0..kw {
                        let ix = ix0 + j as isize;
                        row[idx] = if in_y && ix >= 0 && (ix as usize) < w {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column-gradient matrix back onto one `[C, H, W]` item;
/// the inverse of [`im2col`] with accumulation at overlapping cells.
#[allow(clippy::too_many_arguments)]
fn col2im_accum(
    dcol: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    g: &WindowGeom,
    dx: &mut [f32],
) {
    let ckk = c * kh * kw;
    for oy in 0..g.out_h {
        let iy0 = (oy * stride.0) as isize - g.pad_top as isize;
        for ox in 0..g.out_w {
            let ix0 = (ox * stride.1) as isize - g.pad_left as isize;
            let row = &dcol[(oy * g.out_w + ox) * ckk..(oy * g.out_w + ox + 1) * ckk];
            let mut idx = 0;
            for cc in 0..c {
                let base = cc * h * w;
                for i in 0..kh {
                    let iy = iy0 + i as isize;
                    let in_y = iy >= 0 && (iy as usize) < h;
                    for j in 0..kw {
                        let ix = ix0 + j as isize;
                        if in_y && ix >= 0 && (ix as usize) < w {
                            dx[base + iy as usize * w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

fn conv_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("conv2d: input must be [N,C,H,W], got {:?}", x.shape())));
    }
    if w.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d: kernels must be [O,C,kh,kw], got {:?}",
            w.shape()
        )));
    }
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels but kernels expect {wc}"
        )));
    }
    if b.shape() != [o] {
        return Err(Error::Shape(format!(
            "conv2d: bias shape {:?} does not match {o} filters",
            b.shape()
        )));
    }
    Ok((n, c, h, wd, o, kh, kw))
}

/// 2-D cross-correlation with per-filter bias.
///
/// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]` → `[N, O, H', W']`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize),
    padding: Padding,
    tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    let (n, c, h, wd, o, kh, kw) = conv_shapes(x, w, b)?;
    let g = window_geometry("conv2d", h, wd, kh, kw, stride, padding)?;
    let (oh, ow) = (g.out_h, g.out_w);
    let ckk = c * kh * kw;
    let ohw = oh * ow;

    let xd = x.data();
    let wd_ = w.data();
    let bd = b.data();
    // kernels as [ckk, O] so the matmul inner loop runs contiguously over filters
    let wt = transpose(&wd_, o, ckk);

    let mut out = vec![0.0f32; n * o * ohw];
    let mut col = vec![0.0f32; ohw * ckk];
    let mut prod = vec![0.0f32; ohw * o];
    for item in 0..n {
        let xi = &xd[item * c * h * wd..(item + 1) * c * h * wd];
        im2col(xi, c, h, wd, kh, kw, stride, &g, &mut col);
        matmul_into(&col, &wt, ohw, ckk, o, &mut prod);
        let oi = &mut out[item * o * ohw..(item + 1) * o * ohw];
        for oc in 0..o {
            let bias = bd[oc];
            for pos in 0..ohw {
                oi[oc * ohw + pos] = prod[pos * o + oc] + bias;
            }
        }
    }
    ensure_finite("conv2d", &out)?;
    let y = Tensor::new_unchecked(vec![n, o, oh, ow], out);
    if let Some(t) = tape {
        t.push(Entry::Conv2d {
            x: x.clone(),
            w: w.clone(),
            b: b.clone(),
            out: y.clone(),
            stride,
            padding,
        });
    }
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to input, kernels, and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    gy: &[f32],
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let (n, c, h, wd, o, kh, kw) = conv_shapes(x, w, b)?;
    let g = window_geometry("conv2d", h, wd, kh, kw, stride, padding)?;
    let (oh, ow) = (g.out_h, g.out_w);
    let ckk = c * kh * kw;
    let ohw = oh * ow;

    let xd = x.data();
    let wd_ = w.data(); // [O, ckk] row-major view

    let mut dx = vec![0.0f32; n * c * h * wd];
    let mut dwt = vec![0.0f32; ckk * o];
    let mut db = vec![0.0f32; o];
    let mut col = vec![0.0f32; ohw * ckk];
    let mut g_hw_o = vec![0.0f32; ohw * o];
    let mut dcol = vec![0.0f32; ohw * ckk];
    for item in 0..n {
        let xi = &xd[item * c * h * wd..(item + 1) * c * h * wd];
        im2col(xi, c, h, wd, kh, kw, stride, &g, &mut col);
        let gi = &gy[item * o * ohw..(item + 1) * o * ohw];
        for oc in 0..o {
            for pos in 0..ohw {
                g_hw_o[pos * o + oc] = gi[oc * ohw + pos];
            }
        }
        for row in 0..ohw {
            let grow = &g_hw_o[row * o..(row + 1) * o];
            for (acc, &gv) in db.iter_mut().zip(grow) {
                *acc += gv;
            }
        }
        matmul_at_b_accum(&col, &g_hw_o, ohw, ckk, o, &mut dwt);
        matmul_into(&g_hw_o, &wd_, ohw, o, ckk, &mut dcol);
        col2im_accum(
            &dcol,
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            &g,
            &mut dx[item * c * h * wd..(item + 1) * c * h * wd],
        );
    }
    let dw = transpose(&dwt, ckk, o);
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Spatial max/average pooling over `[N, C, H, W]`.
///
/// Only in-bounds cells participate; with `same` padding a border window is
/// effectively smaller. Max pooling remembers the first maximal cell in scan
/// order, which is where its gradient flows on ties.
pub fn pool2d(
    x: &Tensor,
    mode: PoolMode,
    window: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
    tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("pool2d: input must be [N,C,H,W], got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let g = window_geometry("pool2d", h, w, window.0, window.1, stride, padding)?;
    let (oh, ow) = (g.out_h, g.out_w);

    let xd = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = match mode {
        PoolMode::Max => vec![0usize; n * c * oh * ow],
        PoolMode::Avg => Vec::new(),
    };
    for item in 0..n {
        for ch in 0..c {
            let plane_base = (item * c + ch) * h * w;
            let plane = &xd[plane_base..plane_base + h * w];
            let out_base = (item * c + ch) * oh * ow;
            for oy in 0..oh {
                let iy0 = (oy * stride.0) as isize - g.pad_top as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride.1) as isize - g.pad_left as isize;
                    let opos = out_base + oy * ow + ox;
                    match mode {
                        PoolMode::Max => {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = usize::MAX;
                            for i in 0..window.0 {
                                let iy = iy0 + i as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for j in 0..window.1 {
                                    let ix = ix0 + j as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let idx = iy as usize * w + ix as usize;
                                    let v = plane[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = plane_base + idx;
                                    }
                                }
                            }
                            out[opos] = best;
                            argmax[opos] = best_idx;
                        }
                        PoolMode::Avg => {
                            let mut sum = 0.0f32;
                            let mut count = 0u32;
                            for i in 0..window.0 {
                                let iy = iy0 + i as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for j in 0..window.1 {
                                    let ix = ix0 + j as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    sum += plane[iy as usize * w + ix as usize];
                                    count += 1;
                                }
                            }
                            out[opos] = sum / count as f32;
                        }
                    }
                }
            }
        }
    }
    let y = Tensor::new_unchecked(vec![n, c, oh, ow], out);
    if let Some(t) = tape {
        t.push(Entry::Pool2d {
            x: x.clone(),
            out: y.clone(),
            mode,
            window,
            stride,
            padding,
            argmax,
        });
    }
    Ok(y)
}

/// Gradient of average pooling (max pooling scatters via saved arg-max).
pub(crate) fn avg_pool_backward(
    x: &Tensor,
    gy: &[f32],
    window: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Vec<f32>> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let g = window_geometry("pool2d", h, w, window.0, window.1, stride, padding)?;
    let (oh, ow) = (g.out_h, g.out_w);
    let mut dx = vec![0.0f32; x.len()];
    for item in 0..n {
        for ch in 0..c {
            let plane_base = (item * c + ch) * h * w;
            let out_base = (item * c + ch) * oh * ow;
            for oy in 0..oh {
                let iy0 = (oy * stride.0) as isize - g.pad_top as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride.1) as isize - g.pad_left as isize;
                    let mut cells: [usize; 64] = [0; 64];
                    let mut count = 0usize;
                    for i in 0..window.0 {
                        let iy = iy0 + i as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for j in 0..window.1 {
                            let ix = ix0 + j as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            cells[count] = plane_base + iy as usize * w + ix as usize;
                            count += 1;
                        }
                    }
                    let share = gy[out_base + oy * ow + ox] / count as f32;
                    for &idx in &cells[..count] {
                        dx[idx] += share;
                    }
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// dense algebra
// ---------------------------------------------------------------------------

/// Matrix product of two rank-2 tensors: `[m, k] × [k, n] → [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor, tape: Option<&mut GradTape>) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape(format!(
            "matmul: expects rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul: inner dimensions disagree: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data(), &b.data(), m, k, n, &mut out);
    ensure_finite("matmul", &out)?;
    let y = Tensor::new_unchecked(vec![m, n], out);
    if let Some(t) = tape {
        t.push(Entry::Matmul {
            a: a.clone(),
            b: b.clone(),
            out: y.clone(),
        });
    }
    Ok(y)
}

/// Adds a `[F]` bias row to every row of `x: [N, F]`.
pub fn add_bias(x: &Tensor, b: &Tensor, tape: Option<&mut GradTape>) -> Result<Tensor> {
    if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "add_bias: cannot broadcast bias {:?} over {:?}",
            b.shape(),
            x.shape()
        )));
    }
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let bd = b.data();
    let mut out = vec![0.0f32; n * f];
    for row in 0..n {
        for col in 0..f {
            out[row * f + col] = xd[row * f + col] + bd[col];
        }
    }
    ensure_finite("add_bias", &out)?;
    let y = Tensor::new_unchecked(vec![n, f], out);
    if let Some(t) = tape {
        t.push(Entry::AddBias {
            x: x.clone(),
            b: b.clone(),
            out: y.clone(),
        });
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

fn sigmoid_scalar(x: f32) -> f32 {
    // Branch on sign so the exponential never overflows, then clamp into the
    // open interval (0, 1): downstream losses may divide by y and 1 - y.
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, SIGMOID_MAX)
}

/// Elementwise activation of any-shape input.
pub fn activate(x: &Tensor, f: Activation, tape: Option<&mut GradTape>) -> Result<Tensor> {
    let xd = x.data();
    let out: Vec<f32> = match f {
        Activation::Relu => xd.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Sigmoid => xd.iter().map(|&v| sigmoid_scalar(v)).collect(),
    };
    drop(xd);
    let y = Tensor::new_unchecked(x.shape().to_vec(), out);
    if let Some(t) = tape {
        t.push(match f {
            Activation::Relu => Entry::Relu {
                x: x.clone(),
                out: y.clone(),
            },
            Activation::Sigmoid => Entry::Sigmoid {
                x: x.clone(),
                out: y.clone(),
            },
        });
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

/// Concatenates tensors along `axis`. All other dimensions must agree.
pub fn concat(xs: &[Tensor], axis: usize, tape: Option<&mut GradTape>) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Invalid("concat: empty input list".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::Shape(format!("concat: axis {axis} out of range for rank {rank}")));
    }
    for x in xs {
        if x.rank() != rank {
            return Err(Error::Shape(format!(
                "concat: rank mismatch: {:?} vs {:?}",
                first.shape(),
                x.shape()
            )));
        }
        for d in 0..rank {
            if d != axis && x.shape()[d] != first.shape()[d] {
                return Err(Error::Shape(format!(
                    "concat: shapes {:?} and {:?} disagree off axis {axis}",
                    first.shape(),
                    x.shape()
                )));
            }
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let blocks: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * inner).collect();
    let total_axis: usize = xs.iter().map(|x| x.shape()[axis]).sum();

    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    let datas: Vec<_> = xs.iter().map(|x| x.data()).collect();
    for o in 0..outer {
        for (d, &block) in datas.iter().zip(&blocks) {
            out.extend_from_slice(&d[o * block..(o + 1) * block]);
        }
    }
    drop(datas);
    let y = Tensor::new_unchecked(shape, out);
    if let Some(t) = tape {
        t.push(Entry::Concat {
            xs: xs.to_vec(),
            axis,
            out: y.clone(),
        });
    }
    Ok(y)
}

/// Copies `x` under a new shape with the same element count.
pub fn reshape(x: &Tensor, shape: &[usize], tape: Option<&mut GradTape>) -> Result<Tensor> {
    let y = x.reshaped(shape)?;
    if let Some(t) = tape {
        t.push(Entry::Reshape {
            x: x.clone(),
            out: y.clone(),
        });
    }
    Ok(y)
}

/// Train-mode inverted dropout: each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`, so the expected
/// output equals the input and evaluation needs no compensation.
pub fn dropout_train(
    x: &Tensor,
    rate: f32,
    rng: &mut SeededRng,
    tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout: rate must be in [0, 1), got {rate}")));
    }
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..x.len())
        .map(|_| if rng.uniform01() >= rate { scale } else { 0.0 })
        .collect();
    let xd = x.data();
    let out: Vec<f32> = xd.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    drop(xd);
    let y = Tensor::new_unchecked(x.shape().to_vec(), out);
    if let Some(t) = tape {
        t.push(Entry::Dropout {
            x: x.clone(),
            mask,
            out: y.clone(),
        });
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Splits a batch-norm input into (batch, channels, per-channel inner size):
/// `[N, C]` normalizes per feature, `[N, C, H, W]` per channel plane.
pub(crate) fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Shape(format!(
            "batch_norm: expects [N,C] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

fn bn_check_params(gamma: &Tensor, beta: &Tensor, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm: scale {:?} / shift {:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Train-mode batch normalization using this batch's statistics.
///
/// Returns the normalized output plus the per-channel batch mean and biased
/// variance so the caller can maintain running statistics. The batch must
/// contain more than one value per channel.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    tape: Option<&mut GradTape>,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (n, c, inner) = bn_dims(x.shape())?;
    bn_check_params(gamma, beta, c)?;
    let m = n * inner;
    if m < 2 {
        return Err(Error::Invalid(format!(
            "batch_norm: needs at least 2 values per channel in train mode, got {m}"
        )));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for item in 0..n {
            let base = (item * c + ch) * inner;
            for i in 0..inner {
                sum += f64::from(xd[base + i]);
            }
        }
        let mu = sum / m as f64;
        let mut sq = 0.0f64;
        for item in 0..n {
            let base = (item * c + ch) * inner;
            for i in 0..inner {
                let d = f64::from(xd[base + i]) - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m as f64) as f32;
    }
    let mut out = vec![0.0f32; x.len()];
    for ch in 0..c {
        let istd = 1.0 / (var[ch] + BN_EPSILON).sqrt();
        let (g, b, mu) = (gd[ch], bd[ch], mean[ch]);
        for item in 0..n {
            let base = (item * c + ch) * inner;
            for i in 0..inner {
                out[base + i] = g * ((xd[base + i] - mu) * istd) + b;
            }
        }
    }
    drop((xd, gd, bd));
    ensure_finite("batch_norm", &out)?;
    let y = Tensor::new_unchecked(x.shape().to_vec(), out);
    if let Some(t) = tape {
        t.push(Entry::BatchNormTrain {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean: mean.clone(),
            var: var.clone(),
            out: y.clone(),
        });
    }
    Ok((y, mean, var))
}

/// Eval-mode batch normalization using fixed (running) statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    let (n, c, inner) = bn_dims(x.shape())?;
    bn_check_params(gamma, beta, c)?;
    if mean.shape() != [c] || var.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm: running stats {:?} / {:?} do not match {c} channels",
            mean.shape(),
            var.shape()
        )));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let md = mean.data();
    let vd = var.data();
    let mut out = vec![0.0f32; x.len()];
    for ch in 0..c {
        let istd = 1.0 / (vd[ch] + BN_EPSILON).sqrt();
        let (g, b, mu) = (gd[ch], bd[ch], md[ch]);
        for item in 0..n {
            let base = (item * c + ch) * inner;
            for i in 0..inner {
                out[base + i] = g * ((xd[base + i] - mu) * istd) + b;
            }
        }
    }
    drop((xd, gd, bd, md, vd));
    ensure_finite("batch_norm", &out)?;
    let y = Tensor::new_unchecked(x.shape().to_vec(), out);
    if let Some(t) = tape {
        t.push(Entry::BatchNormEval {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean: mean.clone(),
            var: var.clone(),
            out: y.clone(),
        });
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Mean over each channel plane: `[N, C, H, W] → [N, C]`.
pub fn global_avg_pool(x: &Tensor, tape: Option<&mut GradTape>) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "global_avg_pool: input must be [N,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0f32; n * c];
    for (plane_idx, slot) in out.iter_mut().enumerate() {
        let plane = &xd[plane_idx * hw..(plane_idx + 1) * hw];
        let mut sum = 0.0f32;
        for &v in plane {
            sum += v;
        }
        *slot = sum / hw as f32;
    }
    drop(xd);
    let y = Tensor::new_unchecked(vec![n, c], out);
    if let Some(t) = tape {
        t.push(Entry::GlobalAvgPool {
            x: x.clone(),
            out: y.clone(),
        });
    }
    Ok(y)
}

/// Elementwise product of same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor, tape: Option<&mut GradTape>) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul: shapes {:?} and {:?} disagree",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    ensure_finite("mul", &out)?;
    let y = Tensor::new_unchecked(a.shape().to_vec(), out);
    if let Some(t) = tape {
        t.push(Entry::Mul {
            a: a.clone(),
            b: b.clone(),
            out: y.clone(),
        });
    }
    Ok(y)
}

/// Sum of all elements, in element order, as a `[1]` tensor.
pub fn sum_all(x: &Tensor, tape: Option<&mut GradTape>) -> Result<Tensor> {
    let mut sum = 0.0f32;
    for &v in x.data().iter() {
        sum += v;
    }
    ensure_finite("sum_all", &[sum])?;
    let y = Tensor::new_unchecked(vec![1], vec![sum]);
    if let Some(t) = tape {
        t.push(Entry::SumAll {
            x: x.clone(),
            out: y.clone(),
        });
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy of predicted probabilities against 0/1 labels.
///
/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before the
/// logarithms, so one record contributes at most `-ln(BCE_EPSILON)` (~16.118)
/// and clamped records receive zero gradient.
pub fn bce_loss(scores: &Tensor, labels: &Tensor, tape: Option<&mut GradTape>) -> Result<Tensor> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "bce_loss: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Invalid("bce_loss: empty batch".into()));
    }
    let sd = scores.data();
    let ld = labels.data();
    for (i, &y) in ld.iter().enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::Invalid(format!(
                "bce_loss: label at index {i} is {y}, expected 0 or 1"
            )));
        }
    }
    for (i, &p) in sd.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Numeric(format!("bce_loss: score at index {i} is {p}")));
        }
    }
    let n = sd.len();
    let mut total = 0.0f64;
    for (&p, &y) in sd.iter().zip(ld.iter()) {
        let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let term = if y == 1.0 { -f64::from(p).ln() } else { -(1.0 - f64::from(p)).ln() };
        total += term;
    }
    let loss = (total / n as f64) as f32;
    ensure_finite("bce_loss", &[loss])?;
    let y = Tensor::new_unchecked(vec![1], vec![loss]);
    drop((sd, ld));
    if let Some(t) = tape {
        t.push(Entry::Bce {
            scores: scores.clone(),
            labels: labels.to_vec(),
            out: y.clone(),
        });
    }
    Ok(y)
}
