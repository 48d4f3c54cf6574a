//! Networks and the stock architecture builders.
//!
//! A [`Network`] owns an ordered list of layer specs plus their parameter
//! states, validated by full shape propagation at build time. Builders
//! construct the benchmark architectures; [`attach_head`] implements the
//! transfer pattern of freezing a convolutional base and training a fresh
//! classification head on top.
//!
//! Seeding: layer `i` initializes from `derive_seed(derive_seed(seed, 0), i)`
//! and dropout masks draw from `derive_seed(seed, 1)`, so parameter draws
//! are independent per layer and adding a layer never shifts its neighbors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LayerKind, LayerSpec, LayerState, Mode};
use crate::ops::{Activation, Padding};
use crate::rng::{derive_seed, SeededRng};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Parameter names that stay non-trainable even on unfrozen layers.
fn is_running_stat(name: &str) -> bool {
    name == "running_mean" || name == "running_var"
}

/// Serializable structural description of a network, sufficient to rebuild
/// it (modulo parameter values) — stored inside checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkDescriptor {
    pub input_shape: Vec<usize>,
    pub frozen_prefix: usize,
    pub layers: Vec<LayerSpec>,
}

/// A validated feed-forward network: specs, parameter states, input shape,
/// and the count of leading frozen layers.
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    states: Vec<LayerState>,
    frozen_prefix: usize,
    mode: Mode,
    dropout_rng: SeededRng,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("input_shape", &self.input_shape)
            .field("layers", &self.layers.len())
            .field("frozen_prefix", &self.frozen_prefix)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

fn visit<'a>(
    spec: &'a LayerSpec,
    state: &'a LayerState,
    f: &mut dyn FnMut(&'a LayerSpec, &'a LayerState),
) {
    f(spec, state);
    if let LayerKind::Branch { chains } = &spec.kind {
        for (chain, chain_states) in chains.iter().zip(&state.children) {
            for (child, child_state) in chain.iter().zip(chain_states) {
                visit(child, child_state, f);
            }
        }
    }
}

fn collect_names(specs: &[LayerSpec], seen: &mut std::collections::HashSet<String>) -> Result<()> {
    for spec in specs {
        if spec.name.is_empty() {
            return Err(Error::Invalid("layer names must be non-empty".into()));
        }
        if !seen.insert(spec.name.clone()) {
            return Err(Error::Invalid(format!("duplicate layer name `{}`", spec.name)));
        }
        if let LayerKind::Branch { chains } = &spec.kind {
            for chain in chains {
                collect_names(chain, seen)?;
            }
        }
    }
    Ok(())
}

impl Network {
    /// Builds a network, initializing every parameter from `seed` and
    /// validating shape propagation from `input_shape` (the per-record
    /// feature shape, e.g. `[C, H, W]`).
    pub fn new(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        seed: u64,
        frozen_prefix: usize,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "input shape must be non-empty and positive, got {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Invalid("a network needs at least one layer".into()));
        }
        if frozen_prefix > layers.len() {
            return Err(Error::Invalid(format!(
                "frozen prefix {frozen_prefix} exceeds {} layers",
                layers.len()
            )));
        }
        collect_names(&layers, &mut std::collections::HashSet::new())?;

        let init_seed = derive_seed(seed, 0);
        let dropout_rng = SeededRng::new(derive_seed(seed, 1));
        let mut states = Vec::with_capacity(layers.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in layers.iter().enumerate() {
            let layer_seed = derive_seed(init_seed, i as u64);
            let state = layers::init_params(spec, &shape, layer_seed)
                .map_err(|e| e.in_layer(&spec.name))?;
            shape = layers::output_shape(&spec.kind, &shape)
                .map_err(|e| e.in_layer(&spec.name))?;
            states.push(state);
        }

        let mut net = Network {
            input_shape: input_shape.to_vec(),
            layers,
            states,
            frozen_prefix,
            mode: Mode::Eval,
            dropout_rng,
        };
        net.apply_trainability();
        Ok(net)
    }

    /// Rebuilds the structure described by a checkpoint descriptor with
    /// placeholder parameter values (the caller fills them in).
    pub fn from_descriptor(desc: &NetworkDescriptor) -> Result<Self> {
        Network::new(&desc.input_shape, desc.layers.clone(), 0, desc.frozen_prefix)
    }

    pub fn descriptor(&self) -> NetworkDescriptor {
        NetworkDescriptor {
            input_shape: self.input_shape.clone(),
            frozen_prefix: self.frozen_prefix,
            layers: self.layers.clone(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn frozen_prefix(&self) -> usize {
        self.frozen_prefix
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches between train and eval behavior; parameters are untouched.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Re-marks the first `n` layers as frozen (their parameters drop out of
    /// the trainable set and their normalization runs on running statistics).
    pub fn set_frozen_prefix(&mut self, n: usize) -> Result<()> {
        if n > self.layers.len() {
            return Err(Error::Invalid(format!(
                "frozen prefix {n} exceeds {} layers",
                self.layers.len()
            )));
        }
        self.frozen_prefix = n;
        self.apply_trainability();
        Ok(())
    }

    fn apply_trainability(&mut self) {
        for (i, (spec, state)) in self.layers.iter().zip(&self.states).enumerate() {
            let trainable = i >= self.frozen_prefix;
            visit(spec, state, &mut |_, st| {
                for (pname, tensor) in &st.params {
                    tensor.set_trainable(trainable && !is_running_stat(pname));
                }
            });
        }
    }

    /// Runs the network on a batch shaped `[N, ...input_shape]`.
    pub fn forward(&mut self, x: &Tensor, mut tape: Option<&mut GradTape>) -> Result<Tensor> {
        let ok = x.rank() == self.input_shape.len() + 1
            && x.shape()[1..] == self.input_shape[..]
            && x.shape()[0] > 0;
        if !ok {
            return Err(Error::Shape(format!(
                "input {:?} does not match expected [N, {}]",
                x.shape(),
                self.input_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        let mut cur = x.clone();
        for (i, (spec, state)) in self.layers.iter().zip(self.states.iter_mut()).enumerate() {
            cur = layers::forward(
                spec,
                state,
                &cur,
                self.mode,
                i < self.frozen_prefix,
                &mut self.dropout_rng,
                tape.as_deref_mut(),
            )
            .map_err(|e| e.in_layer(&spec.name))?;
        }
        Ok(cur)
    }

    /// Per-layer output feature shapes, in order, starting from the input.
    pub fn shape_trace(&self) -> Vec<(String, Vec<usize>)> {
        let mut shape = self.input_shape.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            shape = layers::output_shape(&spec.kind, &shape)
                .expect("shape propagation was validated at build time");
            trace.push((spec.name.clone(), shape.clone()));
        }
        trace
    }

    /// All parameters as `(qualified name, tensor)`, in deterministic
    /// definition order; qualified names look like `conv1.weight`.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (spec, state) in self.layers.iter().zip(&self.states) {
            visit(spec, state, &mut |sp, st| {
                for (pname, tensor) in &st.params {
                    out.push((format!("{}.{pname}", sp.name), tensor.clone()));
                }
            });
        }
        out
    }

    /// The optimizer's update set: parameters of unfrozen layers, excluding
    /// running statistics.
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        self.params().into_iter().filter(|(_, t)| t.trainable()).collect()
    }

    /// Total parameter element count (including running statistics).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Number of layers holding at least one parameter tensor.
    pub fn parameterized_layer_count(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.states)
            .filter(|(spec, state)| {
                let mut any = false;
                visit(spec, state, &mut |_, st| any |= !st.params.is_empty());
                any
            })
            .count()
    }

    pub(crate) fn replace_leading_states(&mut self, states: Vec<LayerState>) {
        debug_assert!(states.len() <= self.states.len());
        for (slot, state) in self.states.iter_mut().zip(states) {
            *slot = state;
        }
        self.apply_trainability();
    }

    pub(crate) fn take_states(self) -> Vec<LayerState> {
        self.states
    }
}

// ---------------------------------------------------------------------------
// spec helpers shared by the builders
// ---------------------------------------------------------------------------

fn conv(
    name: &str,
    filters: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
    activation: Option<Activation>,
) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Conv2D {
            filters,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
            activation,
        },
    }
}

fn max_pool(name: &str, window: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::MaxPool2D {
            window: (window, window),
            stride: (stride, stride),
            padding,
        },
    }
}

fn avg_pool(name: &str, window: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::AvgPool2D {
            window: (window, window),
            stride: (stride, stride),
            padding,
        },
    }
}

fn dense(name: &str, units: usize, activation: Option<Activation>) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Dense { units, activation },
    }
}

fn flatten(name: &str) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Flatten,
    }
}

fn batch_norm(name: &str, activation: Option<Activation>) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::BatchNorm { activation },
    }
}

const RELU: Option<Activation> = Some(Activation::Relu);
const SIGMOID: Option<Activation> = Some(Activation::Sigmoid);

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

/// Five-stage convolutional classifier over grayscale input: 3×3 `same` ReLU
/// convolutions of 32/64/128/256/256 filters with 2×2 max-pooling after
/// stages 1–3 and 5, then a 32-unit dense layer and the sigmoid output unit.
pub fn build_custom_cnn(img_size: usize, seed: u64) -> Result<Network> {
    let layers = vec![
        conv("conv1", 32, 3, 1, Padding::Same, RELU),
        max_pool("pool1", 2, 2, Padding::Valid),
        conv("conv2", 64, 3, 1, Padding::Same, RELU),
        max_pool("pool2", 2, 2, Padding::Valid),
        conv("conv3", 128, 3, 1, Padding::Same, RELU),
        max_pool("pool3", 2, 2, Padding::Valid),
        conv("conv4", 256, 3, 1, Padding::Same, RELU),
        conv("conv5", 256, 3, 1, Padding::Same, RELU),
        max_pool("pool4", 2, 2, Padding::Valid),
        flatten("flatten"),
        dense("fc1", 32, RELU),
        dense("output", 1, SIGMOID),
    ];
    Network::new(&[1, img_size, img_size], layers, seed, 0).map_err(|e| {
        Error::Invalid(format!("cnn: img_size {img_size} is too small for the layer stack ({e})"))
    })
}

/// The classic eight-layer stack: 11×11 stride-4 stem, 5×5 and 3×3
/// convolution stages with 3×3 stride-2 max-pooling, then two 4096-unit
/// dense layers and the sigmoid output unit. Expects 3-channel input of at
/// least 67×67.
pub fn build_alexnet(img_size: usize, seed: u64) -> Result<Network> {
    let layers = vec![
        conv("conv1", 96, 11, 4, Padding::Valid, RELU),
        max_pool("pool1", 3, 2, Padding::Valid),
        conv("conv2", 256, 5, 1, Padding::Same, RELU),
        max_pool("pool2", 3, 2, Padding::Valid),
        conv("conv3", 384, 3, 1, Padding::Same, RELU),
        conv("conv4", 384, 3, 1, Padding::Same, RELU),
        conv("conv5", 256, 3, 1, Padding::Same, RELU),
        max_pool("pool3", 3, 2, Padding::Valid),
        flatten("flatten"),
        dense("fc6", 4096, RELU),
        dense("fc7", 4096, RELU),
        dense("output", 1, SIGMOID),
    ];
    Network::new(&[3, img_size, img_size], layers, seed, 0).map_err(|e| {
        Error::Invalid(format!(
            "alexnet: img_size {img_size} is too small for the layer stack; \
             needs at least 67 ({e})"
        ))
    })
}

/// Four parallel paths merged by channel concatenation: 1×1; 1×1→3×3;
/// 1×1→3×3→3×3; and 3×3 average pool→1×1. All `same` padding, stride 1,
/// ReLU. `filters` supplies the seven filter counts in that path order.
pub fn inception_block(name: &str, filters: &[usize]) -> Result<LayerSpec> {
    let [f0, f1, f2, f3, f4, f5, f6] = *filters else {
        return Err(Error::Invalid(format!(
            "inception block `{name}`: expected exactly 7 filter counts, got {}",
            filters.len()
        )));
    };
    let chains = vec![
        vec![conv(&format!("{name}_p0_conv1"), f0, 1, 1, Padding::Same, RELU)],
        vec![
            conv(&format!("{name}_p1_conv1"), f1, 1, 1, Padding::Same, RELU),
            conv(&format!("{name}_p1_conv2"), f2, 3, 1, Padding::Same, RELU),
        ],
        vec![
            conv(&format!("{name}_p2_conv1"), f3, 1, 1, Padding::Same, RELU),
            conv(&format!("{name}_p2_conv2"), f4, 3, 1, Padding::Same, RELU),
            conv(&format!("{name}_p2_conv3"), f5, 3, 1, Padding::Same, RELU),
        ],
        vec![
            avg_pool(&format!("{name}_p3_pool"), 3, 1, Padding::Same),
            conv(&format!("{name}_p3_conv1"), f6, 1, 1, Padding::Same, RELU),
        ],
    ];
    Ok(LayerSpec {
        name: name.into(),
        kind: LayerKind::Branch { chains },
    })
}

/// A 3×3 `same` convolution stem (32, 32, 64 filters) feeding two
/// inception blocks, a stride-2 max pool, and a 256-unit dense head.
/// Expects 3-channel input of at least 8×8.
pub fn build_inception_v4(img_size: usize, seed: u64) -> Result<Network> {
    if img_size < 8 {
        return Err(Error::Invalid(format!(
            "inception_v4: img_size must be at least 8, got {img_size}"
        )));
    }
    let layers = vec![
        conv("stem1", 32, 3, 1, Padding::Same, RELU),
        conv("stem2", 32, 3, 1, Padding::Same, RELU),
        conv("stem3", 64, 3, 1, Padding::Same, RELU),
        inception_block("block1", &[64, 96, 128, 16, 32, 32, 32])?,
        inception_block("block2", &[128, 128, 192, 32, 96, 64, 64])?,
        max_pool("pool", 3, 2, Padding::Same),
        flatten("flatten"),
        dense("fc1", 256, RELU),
        dense("output", 1, SIGMOID),
    ];
    Network::new(&[3, img_size, img_size], layers, seed, 0)
}

/// Densely connected blocks: each inner layer batch-normalizes, applies
/// ReLU, convolves `growth` new channels, and concatenates them onto its
/// input; transitions between blocks halve channels (1×1 convolution) and
/// spatial size (2×2 average pool). Ends in global average pooling and the
/// sigmoid output unit.
pub fn build_densenet_mini(
    img_size: usize,
    blocks: usize,
    layers_per_block: usize,
    growth: usize,
    seed: u64,
) -> Result<Network> {
    if blocks == 0 || layers_per_block == 0 || growth == 0 {
        return Err(Error::Invalid(format!(
            "densenet_mini: blocks, layers_per_block, and growth must be positive, \
             got {blocks}/{layers_per_block}/{growth}"
        )));
    }
    let mut layers = vec![conv("stem", 2 * growth, 3, 1, Padding::Same, None)];
    let mut channels = 2 * growth;
    for b in 1..=blocks {
        for l in 1..=layers_per_block {
            let prefix = format!("b{b}_l{l}");
            layers.push(LayerSpec {
                name: prefix.clone(),
                kind: LayerKind::Branch {
                    chains: vec![
                        vec![],
                        vec![
                            batch_norm(&format!("{prefix}_bn"), RELU),
                            conv(&format!("{prefix}_conv"), growth, 3, 1, Padding::Same, None),
                        ],
                    ],
                },
            });
        }
        channels += layers_per_block * growth;
        if b < blocks {
            channels /= 2;
            layers.push(batch_norm(&format!("t{b}_bn"), None));
            layers.push(conv(&format!("t{b}_conv"), channels, 1, 1, Padding::Same, None));
            layers.push(avg_pool(&format!("t{b}_pool"), 2, 2, Padding::Valid));
        }
    }
    layers.push(LayerSpec {
        name: "gap".into(),
        kind: LayerKind::GlobalAvgPool,
    });
    layers.push(dense("output", 1, SIGMOID));
    Network::new(&[3, img_size, img_size], layers, seed, 0).map_err(|e| {
        Error::Invalid(format!(
            "densenet_mini: img_size {img_size} is too small for {blocks} blocks ({e})"
        ))
    })
}

/// Stacked 3×3 `same` ReLU convolution stages (two convolutions then a 2×2
/// max pool per stage), a flatten, dense ReLU head layers, and the sigmoid
/// output unit. Expects 3-channel input.
pub fn build_vgg_mini(
    img_size: usize,
    stage_filters: &[usize],
    head_units: &[usize],
    seed: u64,
) -> Result<Network> {
    if stage_filters.is_empty() {
        return Err(Error::Invalid("vgg_mini: stage filter list must not be empty".into()));
    }
    let mut layers = Vec::new();
    for (i, &f) in stage_filters.iter().enumerate() {
        let s = i + 1;
        layers.push(conv(&format!("s{s}_conv1"), f, 3, 1, Padding::Same, RELU));
        layers.push(conv(&format!("s{s}_conv2"), f, 3, 1, Padding::Same, RELU));
        layers.push(max_pool(&format!("s{s}_pool"), 2, 2, Padding::Valid));
    }
    layers.push(flatten("flatten"));
    for (j, &u) in head_units.iter().enumerate() {
        layers.push(dense(&format!("fc{}", j + 1), u, RELU));
    }
    layers.push(dense("output", 1, SIGMOID));
    Network::new(&[3, img_size, img_size], layers, seed, 0).map_err(|e| {
        Error::Invalid(format!(
            "vgg_mini: img_size {img_size} is too small for {} stages ({e})",
            stage_filters.len()
        ))
    })
}

/// Pooling mode for [`attach_head`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadPool {
    Flatten,
    GlobalAvg,
}

/// Appends a fresh classification head to a convolutional base: a pooling
/// layer, one dense ReLU layer per entry in `head_units` (with dropout after
/// the first when `dropout` is given), and the sigmoid output unit. With
/// `freeze`, every base layer is marked non-trainable and its parameters
/// stay bitwise constant under training.
pub fn attach_head(
    base: Network,
    pool: HeadPool,
    head_units: &[usize],
    dropout: Option<f32>,
    freeze: bool,
    seed: u64,
) -> Result<Network> {
    if matches!(
        base.layers.last().map(|l| &l.kind),
        Some(LayerKind::Dense { .. })
    ) {
        return Err(Error::Invalid(
            "attach_head: base already ends in a dense layer".into(),
        ));
    }
    let last_shape = base
        .shape_trace()
        .last()
        .map(|(_, s)| s.clone())
        .unwrap_or_else(|| base.input_shape.clone());
    if last_shape.len() != 3 {
        return Err(Error::Invalid(format!(
            "attach_head: base must end in a spatial [C,H,W] feature map, got {last_shape:?}"
        )));
    }

    let mut combined = base.layers.clone();
    combined.push(match pool {
        HeadPool::Flatten => flatten("head_pool"),
        HeadPool::GlobalAvg => LayerSpec {
            name: "head_pool".into(),
            kind: LayerKind::GlobalAvgPool,
        },
    });
    for (j, &u) in head_units.iter().enumerate() {
        combined.push(dense(&format!("head_dense{}", j + 1), u, RELU));
        if j == 0 {
            if let Some(rate) = dropout {
                combined.push(LayerSpec {
                    name: "head_dropout".into(),
                    kind: LayerKind::Dropout { rate },
                });
            }
        }
    }
    combined.push(dense("head_output", 1, SIGMOID));

    let base_len = base.layers.len();
    let frozen_prefix = if freeze { base_len } else { base.frozen_prefix };
    let input_shape = base.input_shape.clone();
    let base_states = base.take_states();
    let mut net = Network::new(&input_shape, combined, seed, frozen_prefix)?;
    net.replace_leading_states(base_states);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn trace_of(net: &Network) -> std::collections::HashMap<String, Vec<usize>> {
        net.shape_trace().into_iter().collect()
    }

    /// Trainable parameter count of one convolution: filters·(C·kh·kw + 1).
    fn conv_params(c: usize, filters: usize, k: usize) -> usize {
        filters * (c * k * k + 1)
    }

    fn dense_params(input: usize, units: usize) -> usize {
        input * units + units
    }

    #[test]
    fn cnn_trace_matches_closed_form_at_64() {
        let net = build_custom_cnn(64, 0).unwrap();
        let t = trace_of(&net);
        assert_eq!(t["conv1"], vec![32, 64, 64]);
        assert_eq!(t["pool1"], vec![32, 32, 32]);
        assert_eq!(t["pool2"], vec![64, 16, 16]);
        assert_eq!(t["pool3"], vec![128, 8, 8]);
        assert_eq!(t["conv5"], vec![256, 8, 8]);
        assert_eq!(t["pool4"], vec![256, 4, 4]);
        assert_eq!(t["flatten"], vec![4096]);
        assert_eq!(t["fc1"], vec![32]);
        assert_eq!(t["output"], vec![1]);
    }

    #[test]
    fn cnn_has_seven_parameterized_layers() {
        let net = build_custom_cnn(64, 0).unwrap();
        assert_eq!(net.parameterized_layer_count(), 7);
    }

    #[test]
    fn cnn_param_count_matches_closed_form_at_three_sizes() {
        for img in [16usize, 32, 64] {
            let net = build_custom_cnn(img, 0).unwrap();
            let side = img / 16; // four 2x halvings
            let expect = conv_params(1, 32, 3)
                + conv_params(32, 64, 3)
                + conv_params(64, 128, 3)
                + conv_params(128, 256, 3)
                + conv_params(256, 256, 3)
                + dense_params(256 * side * side, 32)
                + dense_params(32, 1);
            assert_eq!(net.param_count(), expect, "img {img}");
        }
    }

    #[test]
    fn cnn_rejects_too_small_images() {
        let err = build_custom_cnn(8, 0).unwrap_err();
        assert!(err.to_string().contains("img_size 8"), "{err}");
    }

    #[test]
    fn alexnet_trace_matches_the_published_geometry() {
        let net = build_alexnet(227, 0).unwrap();
        let t = trace_of(&net);
        assert_eq!(t["conv1"], vec![96, 55, 55]);
        assert_eq!(t["pool1"], vec![96, 27, 27]);
        assert_eq!(t["pool2"], vec![256, 13, 13]);
        assert_eq!(t["pool3"], vec![256, 6, 6]);
        assert_eq!(t["flatten"], vec![9216]);
        assert_eq!(t["fc6"], vec![4096]);
        assert_eq!(t["output"], vec![1]);
    }

    #[test]
    fn alexnet_rejects_small_images_and_accepts_67() {
        assert!(build_alexnet(32, 0).is_err());
        assert!(build_alexnet(66, 0).is_err());
        assert!(build_alexnet(67, 0).is_ok());
    }

    #[test]
    fn inception_trace_matches_channel_arithmetic_at_32() {
        let net = build_inception_v4(32, 0).unwrap();
        let t = trace_of(&net);
        assert_eq!(t["stem1"], vec![32, 32, 32]);
        assert_eq!(t["stem2"], vec![32, 32, 32]);
        assert_eq!(t["stem3"], vec![64, 32, 32]);
        assert_eq!(t["block1"], vec![256, 32, 32]);
        assert_eq!(t["block2"], vec![448, 32, 32]);
        assert_eq!(t["pool"], vec![448, 16, 16]);
        assert_eq!(t["flatten"], vec![114_688]);
        assert!(build_inception_v4(7, 0).is_err());
    }

    #[test]
    fn inception_block_channels_sum_the_terminal_filters() {
        let mut rng = SeededRng::new(31);
        for trial in 0..50 {
            let f: Vec<usize> = (0..7).map(|_| 1 + rng.index(8)).collect();
            let block = inception_block("blk", &f).unwrap();
            let out = crate::layers::output_shape(&block.kind, &[3, 8, 8]).unwrap();
            assert_eq!(
                out,
                vec![f[0] + f[2] + f[5] + f[6], 8, 8],
                "trial {trial}: filters {f:?}"
            );
        }
        assert!(inception_block("blk", &[1, 2, 3]).is_err());
    }

    #[test]
    fn densenet_channel_arithmetic_and_transition_halving() {
        let net = build_densenet_mini(16, 1, 4, 12, 0).unwrap();
        let t = trace_of(&net);
        assert_eq!(t["stem"], vec![24, 16, 16]);
        assert_eq!(t["b1_l4"], vec![24 + 4 * 12, 16, 16]);
        assert_eq!(t["gap"], vec![72]);

        let net = build_densenet_mini(16, 2, 4, 12, 0).unwrap();
        let t = trace_of(&net);
        assert_eq!(t["t1_conv"], vec![36, 16, 16]);
        assert_eq!(t["t1_pool"], vec![36, 8, 8]);
        assert_eq!(t["b2_l4"], vec![36 + 4 * 12, 8, 8]);

        assert!(build_densenet_mini(16, 1, 0, 12, 0).is_err());
        assert!(build_densenet_mini(16, 0, 4, 12, 0).is_err());
    }

    #[test]
    fn vgg_trace_matches_stage_arithmetic() {
        let net = build_vgg_mini(32, &[64, 128], &[256], 0).unwrap();
        let t = trace_of(&net);
        assert_eq!(t["s1_conv2"], vec![64, 32, 32]);
        assert_eq!(t["s1_pool"], vec![64, 16, 16]);
        assert_eq!(t["s2_pool"], vec![128, 8, 8]);
        assert_eq!(t["flatten"], vec![8 * 8 * 128]);
        assert_eq!(t["fc1"], vec![256]);
        assert!(build_vgg_mini(32, &[], &[256], 0).is_err());
    }

    #[test]
    fn inception_param_count_matches_closed_form() {
        let net = build_inception_v4(8, 0).unwrap();
        let block = |c: usize, f: [usize; 7]| {
            conv_params(c, f[0], 1)
                + conv_params(c, f[1], 1)
                + conv_params(f[1], f[2], 3)
                + conv_params(c, f[3], 1)
                + conv_params(f[3], f[4], 3)
                + conv_params(f[4], f[5], 3)
                + conv_params(c, f[6], 1)
        };
        let expect = conv_params(3, 32, 3)
            + conv_params(32, 32, 3)
            + conv_params(32, 64, 3)
            + block(64, [64, 96, 128, 16, 32, 32, 32])
            + block(256, [128, 128, 192, 32, 96, 64, 64])
            + dense_params(448 * 4 * 4, 256)
            + dense_params(256, 1);
        assert_eq!(net.param_count(), expect);
    }

    #[test]
    fn every_builder_ends_in_a_unit_sigmoid_score() {
        let mut rng = SeededRng::new(77);
        let mut check = |net: &mut Network, channels: usize, img: usize| {
            let n = 2;
            let x = Tensor::from_vec(
                &[n, channels, img, img],
                (0..n * channels * img * img).map(|_| rng.uniform(0.0, 1.0)).collect(),
            )
            .unwrap();
            net.set_mode(Mode::Eval);
            let y = net.forward(&x, None).unwrap();
            assert_eq!(y.shape(), &[n, 1]);
            for &v in y.to_vec().iter() {
                assert!(v > 0.0 && v < 1.0, "score {v} escaped (0,1)");
            }
        };
        check(&mut build_custom_cnn(16, 1).unwrap(), 1, 16);
        check(&mut build_alexnet(67, 1).unwrap(), 3, 67);
        check(&mut build_inception_v4(8, 1).unwrap(), 3, 8);
        check(&mut build_densenet_mini(8, 2, 2, 4, 1).unwrap(), 3, 8);
        check(&mut build_vgg_mini(8, &[4], &[8], 1).unwrap(), 3, 8);
    }

    #[test]
    fn eval_forward_is_bitwise_pure() {
        let mut net = build_densenet_mini(8, 1, 2, 4, 3).unwrap();
        net.set_mode(Mode::Eval);
        let mut rng = SeededRng::new(5);
        let x = Tensor::from_vec(
            &[2, 3, 8, 8],
            (0..2 * 3 * 64).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
        let a = net.forward(&x, None).unwrap().to_vec();
        let b = net.forward(&x, None).unwrap().to_vec();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn forward_rejects_mismatched_input() {
        let mut net = build_custom_cnn(16, 0).unwrap();
        let x = Tensor::zeros(&[2, 3, 16, 16]);
        assert!(matches!(net.forward(&x, None), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicate_layer_names_are_rejected() {
        let layers = vec![flatten("a"), dense("a", 4, None)];
        assert!(Network::new(&[2, 2, 2], layers, 0, 0).is_err());
    }

    fn bare_conv_base(seed: u64) -> Network {
        let layers = vec![
            conv("c1", 4, 3, 1, Padding::Same, RELU),
            max_pool("p1", 2, 2, Padding::Valid),
            conv("c2", 8, 3, 1, Padding::Same, RELU),
        ];
        Network::new(&[1, 8, 8], layers, seed, 0).unwrap()
    }

    #[test]
    fn attach_head_freezes_the_base_and_names_only_head_params_trainable() {
        let base = bare_conv_base(11);
        let base_weights: Vec<Vec<f32>> =
            base.params().iter().map(|(_, t)| t.to_vec()).collect();
        let net = attach_head(base, HeadPool::Flatten, &[32], Some(0.2), true, 12).unwrap();

        let kept: Vec<Vec<f32>> = net
            .params()
            .iter()
            .take(base_weights.len())
            .map(|(_, t)| t.to_vec())
            .collect();
        assert_eq!(base_weights, kept, "base parameter values must carry over");

        for (name, t) in net.trainable_params() {
            assert!(name.starts_with("head_"), "unexpected trainable param {name}");
            assert!(t.trainable());
        }
        let t = trace_of(&net);
        assert_eq!(t["head_pool"], vec![8 * 4 * 4]);
        assert_eq!(t["head_output"], vec![1]);
    }

    #[test]
    fn attach_head_global_avg_pools_channels() {
        let net =
            attach_head(bare_conv_base(1), HeadPool::GlobalAvg, &[128], None, true, 2).unwrap();
        assert_eq!(trace_of(&net)["head_pool"], vec![8]);
    }

    #[test]
    fn attach_head_rejects_dense_ended_bases() {
        let base = build_custom_cnn(16, 0).unwrap();
        let err = attach_head(base, HeadPool::Flatten, &[8], None, true, 0).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
    }

    #[test]
    fn set_mode_leaves_parameters_bitwise_unchanged() {
        let mut net = build_vgg_mini(8, &[4], &[8], 9).unwrap();
        let before: Vec<Vec<u32>> = net
            .params()
            .iter()
            .map(|(_, t)| t.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        net.set_mode(Mode::Train);
        net.set_mode(Mode::Eval);
        let after: Vec<Vec<u32>> = net
            .params()
            .iter()
            .map(|(_, t)| t.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }
}
