//! Layer specifications, parameter initialization, and stateful forward
//! passes.
//!
//! A [`LayerSpec`] is a pure description (serializable into checkpoints); a
//! [`LayerState`] owns the parameter tensors created for one spec at one
//! input shape. Forward passes thread an optional [`GradTape`] through the
//! underlying tensor ops.
//!
//! Mode rules: dropout perturbs activations only in train mode and is the
//! identity in eval mode; batch normalization uses batch statistics in train
//! mode (updating its running estimates) and the running statistics in eval
//! mode. A frozen layer's batch normalization always runs in eval mode so its
//! running statistics — which are parameters — stay bitwise constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Padding, PoolMode};
use crate::rng::{derive_seed, SeededRng};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Running statistics update: `running ← 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f32 = 0.9;

/// Whether the network is training (stochastic layers active, batch-norm
/// batch statistics) or evaluating (deterministic, running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named layer description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Every layer kind the engine supports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2D {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        activation: Option<Activation>,
    },
    MaxPool2D {
        window: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    AvgPool2D {
        window: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    Dense {
        units: usize,
        activation: Option<Activation>,
    },
    Flatten,
    Dropout {
        rate: f32,
    },
    /// Normalization with an optional fused post-activation, so composite
    /// orderings like norm → ReLU → conv are expressible inside one chain.
    BatchNorm {
        activation: Option<Activation>,
    },
    GlobalAvgPool,
    /// Parallel chains evaluated on the same input and merged by channel
    /// concatenation. An empty chain passes the input through unchanged.
    Branch {
        chains: Vec<Vec<LayerSpec>>,
    },
}

/// Runtime state for one layer: its parameter tensors plus, for `Branch`,
/// the states of every chain's layers.
#[derive(Default)]
pub struct LayerState {
    pub(crate) params: Vec<(&'static str, Tensor)>,
    pub(crate) children: Vec<Vec<LayerState>>,
}

impl LayerState {
    pub(crate) fn param(&self, name: &str) -> &Tensor {
        self.params
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("layer state is missing parameter `{name}`"))
    }
}

fn validate_kind(kind: &LayerKind) -> Result<()> {
    match kind {
        LayerKind::Conv2D { filters, .. } if *filters == 0 => {
            Err(Error::Invalid("conv2d: filters must be positive".into()))
        }
        LayerKind::Dense { units, .. } if *units == 0 => {
            Err(Error::Invalid("dense: units must be positive".into()))
        }
        LayerKind::Dropout { rate } if !(0.0..1.0).contains(rate) => Err(Error::Invalid(
            format!("dropout: rate must be in [0, 1), got {rate}"),
        )),
        LayerKind::Branch { chains } if chains.len() < 2 => Err(Error::Invalid(
            "branch: needs at least 2 chains to merge".into(),
        )),
        _ => Ok(()),
    }
}

/// Propagates a feature shape (without the batch dimension: `[C, H, W]`
/// spatial or `[F]` flat) through one layer kind.
pub fn output_shape(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    validate_kind(kind)?;
    let spatial = |input: &[usize], what: &str| -> Result<(usize, usize, usize)> {
        match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("{what}: expects [C,H,W] input, got {input:?}"))),
        }
    };
    match kind {
        LayerKind::Conv2D {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (_, h, w) = spatial(input, "conv2d")?;
            let g = ops::window_geometry("conv2d", h, w, kernel.0, kernel.1, *stride, *padding)?;
            Ok(vec![*filters, g.out_h, g.out_w])
        }
        LayerKind::MaxPool2D {
            window,
            stride,
            padding,
        }
        | LayerKind::AvgPool2D {
            window,
            stride,
            padding,
        } => {
            let (c, h, w) = spatial(input, "pool2d")?;
            let g = ops::window_geometry("pool2d", h, w, window.0, window.1, *stride, *padding)?;
            Ok(vec![c, g.out_h, g.out_w])
        }
        LayerKind::Dense { units, .. } => match *input {
            [_] => Ok(vec![*units]),
            _ => Err(Error::Shape(format!(
                "dense: expects flat [F] input, got {input:?} (flatten first)"
            ))),
        },
        LayerKind::Flatten => {
            if input.is_empty() {
                return Err(Error::Shape("flatten: empty input shape".into()));
            }
            Ok(vec![input.iter().product()])
        }
        LayerKind::Dropout { .. } => Ok(input.to_vec()),
        LayerKind::BatchNorm { .. } => match *input {
            [_] | [_, _, _] => Ok(input.to_vec()),
            _ => Err(Error::Shape(format!(
                "batch_norm: expects [F] or [C,H,W] input, got {input:?}"
            ))),
        },
        LayerKind::GlobalAvgPool => {
            let (c, _, _) = spatial(input, "global_avg_pool")?;
            Ok(vec![c])
        }
        LayerKind::Branch { chains } => {
            let mut total_c = 0;
            let mut merged: Option<(usize, usize)> = None;
            for chain in chains {
                let mut cur = input.to_vec();
                for spec in chain {
                    cur = output_shape(&spec.kind, &cur)?;
                }
                let (c, h, w) = spatial(&cur, "branch")?;
                match merged {
                    None => merged = Some((h, w)),
                    Some(hw) if hw == (h, w) => {}
                    Some((mh, mw)) => {
                        return Err(Error::Shape(format!(
                            "branch: chains disagree spatially: {mh}x{mw} vs {h}x{w}"
                        )));
                    }
                }
                total_c += c;
            }
            let (h, w) = merged.expect("validated: at least 2 chains");
            Ok(vec![total_c, h, w])
        }
    }
}

fn uniform_fill(rng: &mut SeededRng, shape: &[usize], limit: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::new_unchecked(shape.to_vec(), data)
}

/// Weight-init bound: He-uniform (`sqrt(6/fan_in)`) for ReLU-activated
/// layers, Glorot-uniform (`sqrt(6/(fan_in+fan_out))`) for sigmoid-activated
/// and un-activated layers.
fn init_limit(activation: Option<Activation>, fan_in: usize, fan_out: usize) -> f32 {
    let l = match activation {
        Some(Activation::Relu) => 6.0 / fan_in as f64,
        _ => 6.0 / (fan_in + fan_out) as f64,
    };
    l.sqrt() as f32
}

/// Creates the parameter tensors for one layer at one input shape.
///
/// Deterministic given the seed; weights are drawn in storage order, biases
/// start at zero, normalization starts at identity (scale 1, shift 0,
/// running mean 0, running variance 1). Branch chains derive one child seed
/// per nested layer, so sibling layers are initialized independently.
pub fn init_params(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> Result<LayerState> {
    // Surfaces incompatible-shape errors at build time.
    output_shape(&spec.kind, input_shape)?;
    let mut state = LayerState::default();
    match &spec.kind {
        LayerKind::Conv2D {
            filters,
            kernel,
            activation,
            ..
        } => {
            let c = input_shape[0];
            let (kh, kw) = *kernel;
            let fan_in = c * kh * kw;
            let fan_out = filters * kh * kw;
            let mut rng = SeededRng::new(seed);
            let limit = init_limit(*activation, fan_in, fan_out);
            let w = uniform_fill(&mut rng, &[*filters, c, kh, kw], limit);
            state.params.push(("weight", w));
            state.params.push(("bias", Tensor::zeros(&[*filters])));
        }
        LayerKind::Dense { units, activation } => {
            let f = input_shape[0];
            let mut rng = SeededRng::new(seed);
            let limit = init_limit(*activation, f, *units);
            let w = uniform_fill(&mut rng, &[f, *units], limit);
            state.params.push(("weight", w));
            state.params.push(("bias", Tensor::zeros(&[*units])));
        }
        LayerKind::BatchNorm { .. } => {
            let c = input_shape[0];
            state.params.push(("gamma", Tensor::full(&[c], 1.0)));
            state.params.push(("beta", Tensor::zeros(&[c])));
            state.params.push(("running_mean", Tensor::zeros(&[c])));
            state.params.push(("running_var", Tensor::full(&[c], 1.0)));
        }
        LayerKind::Branch { chains } => {
            let mut ordinal = 0u64;
            for chain in chains {
                let mut cur = input_shape.to_vec();
                let mut chain_states = Vec::with_capacity(chain.len());
                for child in chain {
                    let child_seed = derive_seed(seed, ordinal);
                    ordinal += 1;
                    chain_states.push(init_params(child, &cur, child_seed)?);
                    cur = output_shape(&child.kind, &cur)?;
                }
                state.children.push(chain_states);
            }
        }
        LayerKind::MaxPool2D { .. }
        | LayerKind::AvgPool2D { .. }
        | LayerKind::Flatten
        | LayerKind::Dropout { .. }
        | LayerKind::GlobalAvgPool => {}
    }
    Ok(state)
}

/// Runs one layer forward.
///
/// `frozen` marks layers whose parameters must stay bitwise constant: their
/// batch normalization runs on running statistics even in train mode.
pub fn forward(
    spec: &LayerSpec,
    state: &mut LayerState,
    x: &Tensor,
    mode: Mode,
    frozen: bool,
    dropout_rng: &mut SeededRng,
    mut tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    match &spec.kind {
        LayerKind::Conv2D {
            stride,
            padding,
            activation,
            ..
        } => {
            let w = state.param("weight").clone();
            let b = state.param("bias").clone();
            let y = ops::conv2d(x, &w, &b, *stride, *padding, tape.as_deref_mut())?;
            apply_activation(&y, *activation, tape)
        }
        LayerKind::MaxPool2D {
            window,
            stride,
            padding,
        } => ops::pool2d(x, PoolMode::Max, *window, *stride, *padding, tape),
        LayerKind::AvgPool2D {
            window,
            stride,
            padding,
        } => ops::pool2d(x, PoolMode::Avg, *window, *stride, *padding, tape),
        LayerKind::Dense { activation, .. } => {
            let w = state.param("weight").clone();
            let b = state.param("bias").clone();
            let y = ops::matmul(x, &w, tape.as_deref_mut())?;
            let y = ops::add_bias(&y, &b, tape.as_deref_mut())?;
            apply_activation(&y, *activation, tape)
        }
        LayerKind::Flatten => {
            let n = x.shape()[0];
            ops::reshape(x, &[n, x.len() / n], tape)
        }
        LayerKind::Dropout { rate } => match mode {
            Mode::Train => ops::dropout_train(x, *rate, dropout_rng, tape),
            Mode::Eval => Ok(x.clone()),
        },
        LayerKind::BatchNorm { activation } => {
            let gamma = state.param("gamma").clone();
            let beta = state.param("beta").clone();
            let y = if mode == Mode::Train && !frozen {
                let (y, mean, var) =
                    ops::batch_norm_train(x, &gamma, &beta, tape.as_deref_mut())?;
                state.param("running_mean").write_data(|d| {
                    for (r, &m) in d.iter_mut().zip(&mean) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                    }
                });
                state.param("running_var").write_data(|d| {
                    for (r, &v) in d.iter_mut().zip(&var) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                    }
                });
                y
            } else {
                let mean = state.param("running_mean").clone();
                let var = state.param("running_var").clone();
                ops::batch_norm_eval(x, &gamma, &beta, &mean, &var, tape.as_deref_mut())?
            };
            apply_activation(&y, *activation, tape)
        }
        LayerKind::GlobalAvgPool => ops::global_avg_pool(x, tape),
        LayerKind::Branch { chains } => {
            let mut outs = Vec::with_capacity(chains.len());
            for (chain, chain_states) in chains.iter().zip(state.children.iter_mut()) {
                let mut cur = x.clone();
                for (child, child_state) in chain.iter().zip(chain_states.iter_mut()) {
                    cur = forward(
                        child,
                        child_state,
                        &cur,
                        mode,
                        frozen,
                        dropout_rng,
                        tape.as_deref_mut(),
                    )?;
                }
                outs.push(cur);
            }
            ops::concat(&outs, 1, tape)
        }
    }
}

fn apply_activation(
    x: &Tensor,
    activation: Option<Activation>,
    tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    match activation {
        Some(f) => ops::activate(x, f, tape),
        None => Ok(x.clone()),
    }
}
