//! Finite-difference verification of the gradient tape.
//!
//! For every layer-level operation the engine trains through, this module
//! builds small random cases, computes analytic gradients via the tape, and
//! compares them against central differences of a scalar objective
//! `L = Σ f(x) ⊙ R` (random fixed weights `R`; the loss op is its own
//! objective). The comparison metric is the relative L2 distance
//! `‖a − n‖ / max(‖a‖, ‖n‖)` per checked tensor: single-precision forward
//! passes leave too much noise in any one finite-difference element, while
//! the norm over a whole gradient tensor exposes real defects (a sign flip
//! scores ≈ 2) and stays orders of magnitude below the pass threshold for
//! correct gradients.

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Padding, PoolMode};
use crate::rng::{derive_seed, SeededRng};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Finite-difference step. With inputs of order 1, central differences at
/// this step size leave truncation error ~1e-6 and f32 rounding noise well
/// below the pass threshold.
pub const FD_STEP: f32 = 1e-3;

/// Default pass threshold on the relative L2 error.
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// Every op the suite covers, in report order.
pub const OPS: &[&str] = &[
    "conv2d",
    "max_pool",
    "avg_pool",
    "dense",
    "flatten",
    "batch_norm",
    "dropout_eval",
    "concat",
    "relu",
    "sigmoid",
    "bce_sigmoid",
];

/// Outcome of all trials for one op.
#[derive(Clone, Debug)]
pub struct OpCheckResult {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

type Forward = Box<dyn Fn(&[Tensor], Option<&mut GradTape>) -> Result<Tensor>>;

struct Case {
    inputs: Vec<Tensor>,
    /// Which inputs receive gradient checking (e.g. labels do not).
    check: Vec<bool>,
    forward: Forward,
}

/// Runs `trials_per_op` finite-difference trials for every op in [`OPS`].
///
/// `flip` negates the analytic gradient of the named op before comparison —
/// a detector self-test that must produce a failure for that op alone.
/// Deterministic given `seed`.
pub fn check_all(
    seed: u64,
    trials_per_op: usize,
    threshold: f64,
    flip: Option<&str>,
) -> Result<Vec<OpCheckResult>> {
    let mut results = Vec::with_capacity(OPS.len());
    for (op_index, &op) in OPS.iter().enumerate() {
        let op_seed = derive_seed(seed, op_index as u64);
        let mut max_rel_err = 0.0f64;
        for trial in 0..trials_per_op {
            let mut rng = SeededRng::new(derive_seed(op_seed, trial as u64));
            let case = make_case(op, &mut rng);
            let err = run_trial(&case, &mut rng, flip == Some(op))?;
            max_rel_err = max_rel_err.max(err);
        }
        results.push(OpCheckResult {
            op,
            trials: trials_per_op,
            max_rel_err,
            pass: max_rel_err < threshold,
        });
    }
    Ok(results)
}

fn run_trial(case: &Case, rng: &mut SeededRng, flip: bool) -> Result<f64> {
    for (t, &checked) in case.inputs.iter().zip(&case.check) {
        t.set_trainable(checked);
        t.take_grad();
    }
    let mut tape = GradTape::new();
    let out = (case.forward)(&case.inputs, Some(&mut tape))?;
    let weights: Vec<f32> = (0..out.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let loss = if out.len() == 1 {
        out
    } else {
        let r = Tensor::from_vec(out.shape(), weights.clone())?;
        let weighted = ops::mul(&out, &r, Some(&mut tape))?;
        ops::sum_all(&weighted, Some(&mut tape))?
    };
    tape.backward(&loss)?;

    let mut worst = 0.0f64;
    for (idx, t) in case.inputs.iter().enumerate() {
        if !case.check[idx] {
            continue;
        }
        let mut analytic = t
            .take_grad()
            .ok_or_else(|| Error::Invalid("gradient check: analytic gradient missing".into()))?;
        if flip {
            for v in &mut analytic {
                *v = -*v;
            }
        }
        let numeric = central_differences(case, t, &weights)?;
        worst = worst.max(l2_rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// d objective / d t[i] for every element, via two evaluations per element.
fn central_differences(case: &Case, t: &Tensor, weights: &[f32]) -> Result<Vec<f64>> {
    let len = t.len();
    let mut numeric = vec![0.0f64; len];
    for i in 0..len {
        let orig = t.data()[i];
        t.write_data(|d| d[i] = orig + FD_STEP);
        let plus = objective(case, weights)?;
        t.write_data(|d| d[i] = orig - FD_STEP);
        let minus = objective(case, weights)?;
        t.write_data(|d| d[i] = orig);
        numeric[i] = (plus - minus) / (2.0 * f64::from(FD_STEP));
    }
    Ok(numeric)
}

fn objective(case: &Case, weights: &[f32]) -> Result<f64> {
    let out = (case.forward)(&case.inputs, None)?;
    if out.len() == 1 {
        return Ok(f64::from(out.scalar_value()?));
    }
    let data = out.data();
    Ok(data
        .iter()
        .zip(weights)
        .map(|(&o, &w)| f64::from(o) * f64::from(w))
        .sum())
}

fn l2_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = f64::from(a);
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom < 1e-9 {
        return 0.0; // both gradients are zero
    }
    diff.sqrt() / denom
}

fn fill(rng: &mut SeededRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect())
        .expect("element count matches by construction")
}

/// Values with pairwise gaps far larger than the finite-difference step, so
/// max-pool winners cannot change under perturbation.
fn fill_distinct(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.07 - (n as f32 * 0.035)).collect();
    rng.shuffle(&mut vals);
    Tensor::from_vec(shape, vals).expect("element count matches by construction")
}

fn rand_padding(rng: &mut SeededRng) -> Padding {
    if rng.index(2) == 0 {
        Padding::Valid
    } else {
        Padding::Same
    }
}

fn make_case(op: &str, rng: &mut SeededRng) -> Case {
    match op {
        "conv2d" => {
            let (n, c, o) = (1 + rng.index(2), 1 + rng.index(2), 1 + rng.index(3));
            let (h, w) = (3 + rng.index(3), 3 + rng.index(3));
            let padding = rand_padding(rng);
            let (kh, kw) = (1 + rng.index(3), 1 + rng.index(3));
            let stride = (1 + rng.index(2), 1 + rng.index(2));
            let x = fill(rng, &[n, c, h, w], -1.0, 1.0);
            let wt = fill(rng, &[o, c, kh, kw], -1.0, 1.0);
            let b = fill(rng, &[o], -0.5, 0.5);
            Case {
                inputs: vec![x, wt, b],
                check: vec![true, true, true],
                forward: Box::new(move |xs, tape| {
                    ops::conv2d(&xs[0], &xs[1], &xs[2], stride, padding, tape)
                }),
            }
        }
        "max_pool" | "avg_pool" => {
            let mode = if op == "max_pool" { PoolMode::Max } else { PoolMode::Avg };
            let (n, c) = (1 + rng.index(2), 1 + rng.index(2));
            let (h, w) = (4 + rng.index(2), 4 + rng.index(2));
            let window = (2 + rng.index(2), 2 + rng.index(2));
            let stride = (1 + rng.index(2), 1 + rng.index(2));
            let padding = rand_padding(rng);
            let x = if mode == PoolMode::Max {
                fill_distinct(rng, &[n, c, h, w])
            } else {
                fill(rng, &[n, c, h, w], -1.0, 1.0)
            };
            Case {
                inputs: vec![x],
                check: vec![true],
                forward: Box::new(move |xs, tape| {
                    ops::pool2d(&xs[0], mode, window, stride, padding, tape)
                }),
            }
        }
        "dense" => {
            let (m, k, n) = (1 + rng.index(3), 1 + rng.index(5), 1 + rng.index(4));
            let x = fill(rng, &[m, k], -1.0, 1.0);
            let w = fill(rng, &[k, n], -1.0, 1.0);
            let b = fill(rng, &[n], -0.5, 0.5);
            Case {
                inputs: vec![x, w, b],
                check: vec![true, true, true],
                forward: Box::new(|xs, mut tape| {
                    let y = ops::matmul(&xs[0], &xs[1], tape.as_deref_mut())?;
                    ops::add_bias(&y, &xs[2], tape)
                }),
            }
        }
        "flatten" => {
            let (n, c) = (1 + rng.index(2), 1 + rng.index(3));
            let x = fill(rng, &[n, c, 3, 3], -1.0, 1.0);
            Case {
                inputs: vec![x],
                check: vec![true],
                forward: Box::new(|xs, tape| {
                    let n = xs[0].shape()[0];
                    let flat = xs[0].len() / n;
                    ops::reshape(&xs[0], &[n, flat], tape)
                }),
            }
        }
        "batch_norm" => {
            let c = 1 + rng.index(2);
            let x = if rng.index(2) == 0 {
                let n = 2 + rng.index(2);
                let s = 2 + rng.index(2);
                fill(rng, &[n, c, s, s], -1.5, 1.5)
            } else {
                let n = 4 + rng.index(3);
                fill(rng, &[n, c], -1.5, 1.5)
            };
            let gamma = fill(rng, &[c], 0.5, 1.5);
            let beta = fill(rng, &[c], -0.5, 0.5);
            Case {
                inputs: vec![x, gamma, beta],
                check: vec![true, true, true],
                forward: Box::new(|xs, tape| {
                    Ok(ops::batch_norm_train(&xs[0], &xs[1], &xs[2], tape)?.0)
                }),
            }
        }
        "dropout_eval" => {
            let rows = 6 + rng.index(5);
            let x = fill(rng, &[rows, 5], -1.0, 1.0);
            Case {
                inputs: vec![x],
                check: vec![true],
                // Eval-mode dropout is an identity pass-through of the same
                // tensor handle; the gradient must arrive on it unchanged.
                forward: Box::new(|xs, _tape| Ok(xs[0].clone())),
            }
        }
        "concat" => {
            let parts = 2 + rng.index(2);
            let (n, h, w) = (1 + rng.index(2), 2 + rng.index(2), 2 + rng.index(2));
            let inputs: Vec<Tensor> = (0..parts)
                .map(|_| {
                    let c = 1 + rng.index(3);
                    fill(rng, &[n, c, h, w], -1.0, 1.0)
                })
                .collect();
            let check = vec![true; parts];
            Case {
                inputs,
                check,
                forward: Box::new(|xs, tape| ops::concat(xs, 1, tape)),
            }
        }
        "relu" => {
            // Keep inputs away from the kink at zero, where the derivative
            // is undefined and finite differences straddle it.
            let n = 20 + rng.index(20);
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    let mag = rng.uniform(0.05, 1.0);
                    if rng.index(2) == 0 {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let x = Tensor::from_vec(&[n], data).expect("constructed to match");
            Case {
                inputs: vec![x],
                check: vec![true],
                forward: Box::new(|xs, tape| ops::activate(&xs[0], Activation::Relu, tape)),
            }
        }
        "sigmoid" => {
            let n = 20 + rng.index(20);
            let x = fill(rng, &[n], -3.0, 3.0);
            Case {
                inputs: vec![x],
                check: vec![true],
                forward: Box::new(|xs, tape| ops::activate(&xs[0], Activation::Sigmoid, tape)),
            }
        }
        "bce_sigmoid" => {
            let n = 5 + rng.index(16);
            let z = fill(rng, &[n], -2.0, 2.0);
            let labels = Tensor::from_vec(
                &[n],
                (0..n).map(|_| rng.index(2) as f32).collect(),
            )
            .expect("constructed to match");
            Case {
                inputs: vec![z, labels],
                check: vec![true, false],
                forward: Box::new(|xs, mut tape| {
                    let p = ops::activate(&xs[0], Activation::Sigmoid, tape.as_deref_mut())?;
                    ops::bce_loss(&p, &xs[1], tape)
                }),
            }
        }
        other => unreachable!("unknown gradient-check op `{other}`"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_the_default_threshold() {
        let results = check_all(1234, 10, DEFAULT_THRESHOLD, None).unwrap();
        assert_eq!(results.len(), OPS.len());
        for r in &results {
            assert!(
                r.pass,
                "{} failed: max relative error {:.3e}",
                r.op, r.max_rel_err
            );
        }
    }

    #[test]
    fn a_sign_flipped_gradient_is_detected_for_exactly_that_op() {
        let results = check_all(1234, 5, DEFAULT_THRESHOLD, Some("conv2d")).unwrap();
        for r in &results {
            if r.op == "conv2d" {
                assert!(!r.pass, "flipped conv2d gradient must fail");
                assert!(r.max_rel_err > 1.0, "sign flip should score ~2, got {}", r.max_rel_err);
            } else {
                assert!(r.pass, "{} should be unaffected by the conv2d flip", r.op);
            }
        }
    }

    #[test]
    fn results_are_deterministic_for_a_seed() {
        let a = check_all(77, 5, DEFAULT_THRESHOLD, None).unwrap();
        let b = check_all(77, 5, DEFAULT_THRESHOLD, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits(), "op {}", x.op);
        }
    }
}
