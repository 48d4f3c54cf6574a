//! Reverse-mode gradient tape.
//!
//! Forward operations append one [`Entry`] each, holding handles to their
//! operands plus whatever intermediate state backward needs (pooling arg-max
//! indices, dropout masks, batch statistics). [`GradTape::backward`] then
//! walks the entries once in reverse, accumulating gradients per tensor
//! identity and finally writing them onto every trainable leaf it saw.
//!
//! Determinism: entries replay in the fixed reverse order they were recorded,
//! and each tensor's gradient contributions are added in that same order, so
//! repeated runs produce bitwise-identical gradients.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::ops::{self, Padding, PoolMode};
use crate::tensor::Tensor;

/// One recorded forward operation.
pub(crate) enum Entry {
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        out: Tensor,
        stride: (usize, usize),
        padding: Padding,
    },
    Pool2d {
        x: Tensor,
        out: Tensor,
        mode: PoolMode,
        window: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        /// Max mode: absolute input index that won each output cell.
        argmax: Vec<usize>,
    },
    Matmul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    AddBias {
        x: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Relu {
        x: Tensor,
        out: Tensor,
    },
    Sigmoid {
        x: Tensor,
        out: Tensor,
    },
    Concat {
        xs: Vec<Tensor>,
        axis: usize,
        out: Tensor,
    },
    Reshape {
        x: Tensor,
        out: Tensor,
    },
    Dropout {
        x: Tensor,
        /// Per-element keep scale: 0 for dropped cells, 1/(1-rate) otherwise.
        mask: Vec<f32>,
        out: Tensor,
    },
    BatchNormTrain {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f32>,
        var: Vec<f32>,
        out: Tensor,
    },
    BatchNormEval {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Tensor,
        var: Tensor,
        out: Tensor,
    },
    GlobalAvgPool {
        x: Tensor,
        out: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    SumAll {
        x: Tensor,
        out: Tensor,
    },
    Bce {
        scores: Tensor,
        labels: Vec<f32>,
        out: Tensor,
    },
}

impl Entry {
    fn output_id(&self) -> u64 {
        match self {
            Entry::Conv2d { out, .. }
            | Entry::Pool2d { out, .. }
            | Entry::Matmul { out, .. }
            | Entry::AddBias { out, .. }
            | Entry::Relu { out, .. }
            | Entry::Sigmoid { out, .. }
            | Entry::Concat { out, .. }
            | Entry::Reshape { out, .. }
            | Entry::Dropout { out, .. }
            | Entry::BatchNormTrain { out, .. }
            | Entry::BatchNormEval { out, .. }
            | Entry::GlobalAvgPool { out, .. }
            | Entry::Mul { out, .. }
            | Entry::SumAll { out, .. }
            | Entry::Bce { out, .. } => out.id(),
        }
    }

    /// Operand handles, in a fixed order, for trainable-leaf discovery.
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Entry::Conv2d { x, w, b, .. } => vec![x, w, b],
            Entry::Pool2d { x, .. } => vec![x],
            Entry::Matmul { a, b, .. } => vec![a, b],
            Entry::AddBias { x, b, .. } => vec![x, b],
            Entry::Relu { x, .. } | Entry::Sigmoid { x, .. } => vec![x],
            Entry::Concat { xs, .. } => xs.iter().collect(),
            Entry::Reshape { x, .. } => vec![x],
            Entry::Dropout { x, .. } => vec![x],
            Entry::BatchNormTrain { x, gamma, beta, .. } => vec![x, gamma, beta],
            Entry::BatchNormEval { x, gamma, beta, .. } => vec![x, gamma, beta],
            Entry::GlobalAvgPool { x, .. } => vec![x],
            Entry::Mul { a, b, .. } => vec![a, b],
            Entry::SumAll { x, .. } => vec![x],
            Entry::Bce { scores, .. } => vec![scores],
        }
    }
}

/// Records forward operations and replays them in reverse to produce
/// gradients. One tape serves one forward/backward cycle; [`backward`]
/// consumes the recorded entries, leaving the tape empty for reuse.
///
/// [`backward`]: GradTape::backward
#[derive(Default)]
pub struct GradTape {
    entries: Vec<Entry>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Discards all recorded operations without running backward.
    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Runs reverse-mode differentiation from `loss`, which must be the
    /// scalar output of an operation recorded on this tape.
    ///
    /// Visits each recorded operation exactly once, in reverse; afterwards
    /// the tape is empty and every trainable tensor that participated has
    /// its gradient accumulated (added to any gradient already present).
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        if !self.entries.iter().any(|e| e.output_id() == loss.id()) {
            return Err(Error::Invalid(
                "backward: loss was not produced by an operation recorded on this tape".into(),
            ));
        }

        // Trainable leaves, deduplicated by identity, in first-seen order.
        let mut leaf_ids = HashSet::new();
        let mut leaves: Vec<Tensor> = Vec::new();
        for entry in &self.entries {
            for t in entry.inputs() {
                if t.trainable() && leaf_ids.insert(t.id()) {
                    leaves.push(t.clone());
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);

        for entry in self.entries.drain(..).rev() {
            let Some(gy) = grads.remove(&entry.output_id()) else {
                // Recorded but not on the path to the loss.
                continue;
            };
            match entry {
                Entry::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                    ..
                } => {
                    let (dx, dw, db) = ops::conv2d_backward(&x, &w, &b, &gy, stride, padding)?;
                    add_grad(&mut grads, &x, dx);
                    add_grad(&mut grads, &w, dw);
                    add_grad(&mut grads, &b, db);
                }
                Entry::Pool2d {
                    x,
                    mode,
                    window,
                    stride,
                    padding,
                    argmax,
                    ..
                } => {
                    let dx = match mode {
                        PoolMode::Max => {
                            let mut dx = vec![0.0f32; x.len()];
                            for (src, &g) in argmax.iter().zip(&gy) {
                                dx[*src] += g;
                            }
                            dx
                        }
                        PoolMode::Avg => ops::avg_pool_backward(&x, &gy, window, stride, padding)?,
                    };
                    add_grad(&mut grads, &x, dx);
                }
                Entry::Matmul { a, b, .. } => {
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let n = b.shape()[1];
                    let bt = ops::transpose(&b.data(), k, n);
                    let mut da = vec![0.0f32; m * k];
                    ops::matmul_into(&gy, &bt, m, n, k, &mut da);
                    let mut db = vec![0.0f32; k * n];
                    ops::matmul_at_b_accum(&a.data(), &gy, m, k, n, &mut db);
                    add_grad(&mut grads, &a, da);
                    add_grad(&mut grads, &b, db);
                }
                Entry::AddBias { x, b, .. } => {
                    let f = b.len();
                    let mut db = vec![0.0f32; f];
                    for row in gy.chunks_exact(f) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    add_grad(&mut grads, &x, gy);
                    add_grad(&mut grads, &b, db);
                }
                Entry::Relu { x, .. } => {
                    let xd = x.data();
                    let dx: Vec<f32> = gy
                        .iter()
                        .zip(xd.iter())
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    drop(xd);
                    add_grad(&mut grads, &x, dx);
                }
                Entry::Sigmoid { x, out } => {
                    let yd = out.data();
                    let dx: Vec<f32> =
                        gy.iter().zip(yd.iter()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                    drop(yd);
                    add_grad(&mut grads, &x, dx);
                }
                Entry::Concat { xs, axis, .. } => {
                    let outer: usize = xs[0].shape()[..axis].iter().product();
                    let inner: usize = xs[0].shape()[axis + 1..].iter().product();
                    let total: usize = xs.iter().map(|x| x.shape()[axis] * inner).sum();
                    let mut offset = 0;
                    for x in xs {
                        let block = x.shape()[axis] * inner;
                        let mut dx = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total + offset;
                            dx.extend_from_slice(&gy[start..start + block]);
                        }
                        offset += block;
                        add_grad(&mut grads, &x, dx);
                    }
                }
                Entry::Reshape { x, .. } => {
                    add_grad(&mut grads, &x, gy);
                }
                Entry::Dropout { x, mask, .. } => {
                    let dx: Vec<f32> = gy.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                    add_grad(&mut grads, &x, dx);
                }
                Entry::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    ..
                } => {
                    let (n, c, inner) = ops::bn_dims(x.shape())?;
                    let m = (n * inner) as f64;
                    let xd = x.data();
                    let gd = gamma.data();
                    let mut dx = vec![0.0f32; x.len()];
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    for ch in 0..c {
                        let istd = 1.0 / f64::from(var[ch] + ops::BN_EPSILON).sqrt();
                        let mu = f64::from(mean[ch]);
                        // dbeta = sum(dy), dgamma = sum(dy * x_hat)
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_xh = 0.0f64;
                        for item in 0..n {
                            let base = (item * c + ch) * inner;
                            for i in 0..inner {
                                let g = f64::from(gy[base + i]);
                                let xh = (f64::from(xd[base + i]) - mu) * istd;
                                sum_dy += g;
                                sum_dy_xh += g * xh;
                            }
                        }
                        dbeta[ch] = sum_dy as f32;
                        dgamma[ch] = sum_dy_xh as f32;
                        // dx = gamma * istd / m * (m*dy - sum_dy - x_hat * sum_dy_xh)
                        let scale = f64::from(gd[ch]) * istd / m;
                        for item in 0..n {
                            let base = (item * c + ch) * inner;
                            for i in 0..inner {
                                let g = f64::from(gy[base + i]);
                                let xh = (f64::from(xd[base + i]) - mu) * istd;
                                dx[base + i] = (scale * (m * g - sum_dy - xh * sum_dy_xh)) as f32;
                            }
                        }
                    }
                    drop((xd, gd));
                    add_grad(&mut grads, &x, dx);
                    add_grad(&mut grads, &gamma, dgamma);
                    add_grad(&mut grads, &beta, dbeta);
                }
                Entry::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    ..
                } => {
                    // Statistics are constants here, so each element is an
                    // independent affine map: dx = gamma * istd * dy.
                    let (n, c, inner) = ops::bn_dims(x.shape())?;
                    let gd = gamma.data();
                    let md = mean.data();
                    let vd = var.data();
                    let mut dx = vec![0.0f32; x.len()];
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    let xd = x.data();
                    for ch in 0..c {
                        let istd = 1.0 / (vd[ch] + ops::BN_EPSILON).sqrt();
                        let scale = gd[ch] * istd;
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_xh = 0.0f64;
                        for item in 0..n {
                            let base = (item * c + ch) * inner;
                            for i in 0..inner {
                                let g = gy[base + i];
                                dx[base + i] = scale * g;
                                sum_dy += f64::from(g);
                                sum_dy_xh +=
                                    f64::from(g) * f64::from((xd[base + i] - md[ch]) * istd);
                            }
                        }
                        dbeta[ch] = sum_dy as f32;
                        dgamma[ch] = sum_dy_xh as f32;
                    }
                    drop((xd, gd, md, vd));
                    add_grad(&mut grads, &x, dx);
                    add_grad(&mut grads, &gamma, dgamma);
                    add_grad(&mut grads, &beta, dbeta);
                }
                Entry::GlobalAvgPool { x, .. } => {
                    let (_, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                    let hw = h * w;
                    let mut dx = vec![0.0f32; x.len()];
                    for (plane_idx, &g) in gy.iter().enumerate() {
                        let share = g / hw as f32;
                        for cell in &mut dx[plane_idx * hw..(plane_idx + 1) * hw] {
                            *cell = share;
                        }
                    }
                    add_grad(&mut grads, &x, dx);
                }
                Entry::Mul { a, b, .. } => {
                    let da: Vec<f32> =
                        gy.iter().zip(b.data().iter()).map(|(&g, &v)| g * v).collect();
                    let db: Vec<f32> =
                        gy.iter().zip(a.data().iter()).map(|(&g, &v)| g * v).collect();
                    add_grad(&mut grads, &a, da);
                    add_grad(&mut grads, &b, db);
                }
                Entry::SumAll { x, .. } => {
                    add_grad(&mut grads, &x, vec![gy[0]; x.len()]);
                }
                Entry::Bce { scores, labels, .. } => {
                    let g = gy[0];
                    let sd = scores.data();
                    let n = sd.len() as f32;
                    let lo = ops::BCE_EPSILON;
                    let hi = 1.0 - ops::BCE_EPSILON;
                    let dx: Vec<f32> = sd
                        .iter()
                        .zip(&labels)
                        .map(|(&p, &y)| {
                            if p < lo || p > hi {
                                // Clamped flat region of the loss.
                                0.0
                            } else {
                                g * (p - y) / (p * (1.0 - p)) / n
                            }
                        })
                        .collect();
                    drop(sd);
                    add_grad(&mut grads, &scores, dx);
                }
            }
        }

        for leaf in leaves {
            if let Some(g) = grads.remove(&leaf.id()) {
                leaf.accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

fn add_grad(grads: &mut HashMap<u64, Vec<f32>>, t: &Tensor, contrib: Vec<f32>) {
    debug_assert_eq!(contrib.len(), t.len());
    grads
        .entry(t.id())
        .and_modify(|acc| {
            for (a, &c) in acc.iter_mut().zip(&contrib) {
                *a += c;
            }
        })
        .or_insert(contrib);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{activate, bce_loss, matmul, mul, sum_all, Activation};

    #[test]
    fn backward_rejects_non_scalar_and_off_tape_losses() {
        let mut tape = GradTape::new();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = matmul(&a, &b, Some(&mut tape)).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Invalid(_))));

        let stray = Tensor::scalar(1.0).unwrap();
        assert!(matches!(tape.backward(&stray), Err(Error::Invalid(_))));

        let mut empty = GradTape::new();
        assert!(matches!(empty.backward(&stray), Err(Error::Invalid(_))));
    }

    #[test]
    fn backward_consumes_the_tape_and_fills_leaf_gradients() {
        let mut tape = GradTape::new();
        let w = Tensor::from_vec(&[1, 2], vec![0.5, -0.25]).unwrap();
        w.set_trainable(true);
        let x = Tensor::from_vec(&[2, 1], vec![2.0, 4.0]).unwrap();
        let y = matmul(&w, &x, Some(&mut tape)).unwrap(); // [1,1] = 0.5*2 - 0.25*4
        let s = sum_all(&y, Some(&mut tape)).unwrap();
        assert_eq!(tape.len(), 2);
        tape.backward(&s).unwrap();
        assert!(tape.is_empty(), "backward must drain the tape");
        // dL/dw = x^T
        assert_eq!(w.take_grad(), Some(vec![2.0, 4.0]));
        // x is not trainable: no gradient is stored on it
        assert_eq!(x.grad(), None);
    }

    #[test]
    fn gradient_accumulates_when_a_tensor_is_used_twice() {
        // L = sum(w ⊙ w) → dL/dw = 2w via two product contributions.
        let mut tape = GradTape::new();
        let w = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        w.set_trainable(true);
        let p = mul(&w, &w, Some(&mut tape)).unwrap();
        let s = sum_all(&p, Some(&mut tape)).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(w.take_grad(), Some(vec![2.0, -4.0, 6.0]));
    }

    #[test]
    fn sigmoid_then_bce_gradient_matches_closed_form() {
        // d/dz BCE(sigmoid(z), y) = (sigmoid(z) - y) / n, a cancellation the
        // chained backward must reproduce through both recorded ops.
        let mut tape = GradTape::new();
        let z = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, -0.4]).unwrap();
        z.set_trainable(true);
        let labels = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let p = activate(&z, Activation::Sigmoid, Some(&mut tape)).unwrap();
        let loss = bce_loss(&p, &labels, Some(&mut tape)).unwrap();
        tape.backward(&loss).unwrap();
        let grad = z.take_grad().unwrap();
        let pv = p.to_vec();
        let lv = labels.to_vec();
        for i in 0..4 {
            let expect = (pv[i] - lv[i]) / 4.0;
            assert!(
                (grad[i] - expect).abs() < 1e-6,
                "element {i}: got {}, closed form {expect}",
                grad[i]
            );
        }
    }

    #[test]
    fn repeated_runs_produce_bitwise_identical_gradients() {
        let run = || {
            let mut tape = GradTape::new();
            let w = Tensor::from_vec(&[4, 4], (0..16).map(|v| v as f32 * 0.13 - 1.0).collect())
                .unwrap();
            w.set_trainable(true);
            let x = Tensor::from_vec(&[4, 4], (0..16).map(|v| (v as f32).sin()).collect()).unwrap();
            let y = matmul(&w, &x, Some(&mut tape)).unwrap();
            let r = activate(&y, Activation::Relu, Some(&mut tape)).unwrap();
            let s = sum_all(&r, Some(&mut tape)).unwrap();
            tape.backward(&s).unwrap();
            w.take_grad().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
