//! Optimizers, the epoch/batch training loop, evaluation, per-epoch
//! history, and checkpoint persistence.
//!
//! Determinism: a run is fully determined by the network's seed and the
//! train configuration's seed. The trainer derives its per-epoch shuffle
//! seeds from stream 2 of the config seed (the network consumes streams 0
//! and 1 for initialization and dropout), so train-time randomness never
//! perturbs initialization and vice versa.
//!
//! Divergence policy: a non-finite loss aborts the run with a numeric error
//! naming the epoch and batch rather than letting NaNs poison the history.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{self, MetricsReport};
use crate::models::Network;
use crate::ops;
use crate::rng::derive_seed;
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Parameter-update rule. Learning rates must be positive to train, but an
/// [`Optimizer`] itself accepts any finite settings (a zero rate is a
/// useful no-op in tests).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    /// Adam with the conventional defaults: β₁ 0.9, β₂ 0.999, ε 1e−8.
    pub fn adam(lr: f32) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn learning_rate(&self) -> f32 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd { lr } => {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::Invalid(format!(
                        "learning rate must be positive, got {lr}"
                    )));
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::Invalid(format!(
                        "learning rate must be positive, got {lr}"
                    )));
                }
                for (label, beta) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&beta) {
                        return Err(Error::Invalid(format!(
                            "{label} must lie in [0, 1), got {beta}"
                        )));
                    }
                }
                if !(eps.is_finite() && eps > 0.0) {
                    return Err(Error::Invalid(format!("epsilon must be positive, got {eps}")));
                }
            }
        }
        Ok(())
    }
}

/// Full specification of a training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Decision threshold used for the per-epoch metric reports.
    pub threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerKind::adam(1e-3),
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !self.threshold.is_finite() || self.threshold <= 0.0 || self.threshold >= 1.0 {
            return Err(Error::Invalid(format!(
                "decision threshold {} is outside (0, 1)",
                self.threshold
            )));
        }
        self.optimizer.validate()
    }
}

/// Metric report plus mean binary-cross-entropy for one dataset pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseStats {
    pub report: MetricsReport,
    pub bce_loss: f64,
}

/// One epoch's full-pass statistics over both splits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochEntry {
    pub train: PhaseStats,
    pub validation: PhaseStats,
}

/// Per-epoch training record; entry count equals the configured epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub entries: Vec<EpochEntry>,
}

impl History {
    pub fn final_entry(&self) -> Option<&EpochEntry> {
        self.entries.last()
    }

    /// Line-oriented machine-readable rendering, one
    /// `epoch.N.phase.metric=value` per line (4 decimal places, epochs
    /// numbered from 1). Byte-reproducible for identical histories.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (i, entry) in self.entries.iter().enumerate() {
            let epoch = i + 1;
            for (phase, stats) in [("train", &entry.train), ("validation", &entry.validation)] {
                let r = &stats.report;
                for (metric, value) in [
                    ("accuracy", r.accuracy),
                    ("precision", r.precision),
                    ("recall", r.recall),
                    ("f1", r.f1),
                    ("misclassification_rate", r.misclassification_rate),
                    ("bce_loss", stats.bce_loss),
                ] {
                    out.push_str(&format!("epoch.{epoch}.{phase}.{metric}={value:.4}\n"));
                }
            }
        }
        out
    }
}

/// Optimizer state: step counter plus per-parameter moment buffers, keyed
/// by tensor identity.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first_moment: HashMap<u64, Vec<f32>>,
    second_moment: HashMap<u64, Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            steps: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    /// Applies one update to every listed parameter, consuming (and thereby
    /// clearing) each parameter's accumulated gradient. Errors if the list
    /// is empty or any parameter is missing its gradient.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        if params.is_empty() {
            return Err(Error::Invalid(
                "optimizer step: no trainable parameters".into(),
            ));
        }
        self.steps += 1;
        for (name, p) in params {
            let grad = p.take_grad().ok_or_else(|| {
                Error::Invalid(format!("optimizer step: parameter `{name}` has no gradient"))
            })?;
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    p.write_data(|d| {
                        for (w, g) in d.iter_mut().zip(&grad) {
                            *w -= lr * g;
                        }
                    });
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let m = self
                        .first_moment
                        .entry(p.id())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    let v = self
                        .second_moment
                        .entry(p.id())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    let (b1, b2) = (f64::from(beta1), f64::from(beta2));
                    let bias1 = 1.0 - b1.powi(self.steps as i32);
                    let bias2 = 1.0 - b2.powi(self.steps as i32);
                    let (lr, eps) = (f64::from(lr), f64::from(eps));
                    p.write_data(|d| {
                        for i in 0..d.len() {
                            let g = f64::from(grad[i]);
                            let mi = b1 * f64::from(m[i]) + (1.0 - b1) * g;
                            let vi = b2 * f64::from(v[i]) + (1.0 - b2) * g * g;
                            m[i] = mi as f32;
                            v[i] = vi as f32;
                            let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + eps);
                            d[i] = (f64::from(d[i]) - update) as f32;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn in_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!(
            "training diverged at epoch {epoch}, batch {batch}: {msg}"
        )),
        other => other,
    }
}

/// Runs the full training protocol: per epoch, a seeded shuffle of the
/// training set, forward/backward/update per batch in train mode, then a
/// full eval-mode pass over both splits. Returns one history entry per
/// epoch. Deterministic given the config seed and the network's own seed.
pub fn train(
    net: &mut Network,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let shuffle_base = derive_seed(cfg.seed, 2);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        net.set_mode(Mode::Train);
        let epoch_seed = derive_seed(shuffle_base, epoch as u64);
        let batches = data::batches(train_ds, cfg.batch_size, Some(epoch_seed))?;
        for (bi, (x, y)) in batches.iter().enumerate() {
            let step = |net: &mut Network, optimizer: &mut Optimizer| -> Result<()> {
                let mut tape = GradTape::new();
                let scores = net.forward(x, Some(&mut tape))?;
                let loss = ops::bce_loss(&scores, y, Some(&mut tape))?;
                let value = loss.scalar_value()?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("loss is {value}")));
                }
                tape.backward(&loss)?;
                optimizer.step(&net.trainable_params())
            };
            step(net, &mut optimizer).map_err(|e| in_batch(e, epoch + 1, bi + 1))?;
        }
        history.entries.push(EpochEntry {
            train: evaluate(net, train_ds, cfg.threshold, cfg.batch_size)?,
            validation: evaluate(net, val_ds, cfg.threshold, cfg.batch_size)?,
        });
    }
    Ok(history)
}

/// Scores every record exactly once in eval mode and derives the metric
/// report plus the mean binary cross-entropy. Pure: repeated calls yield
/// identical results.
pub fn evaluate(
    net: &mut Network,
    ds: &Dataset,
    threshold: f32,
    batch_size: usize,
) -> Result<PhaseStats> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    net.set_mode(Mode::Eval);
    let mut scores = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for (x, y) in data::batches(ds, batch_size, None)? {
        let out = net.forward(&x, None)?;
        scores.extend_from_slice(&out.data());
        labels.extend_from_slice(&y.data());
    }
    let report = metrics::confusion(&scores, &labels, threshold)?.report()?;
    let n = scores.len();
    let score_t = Tensor::from_vec(&[n], scores)?;
    let label_t = Tensor::from_vec(&[n], labels)?;
    let bce_loss = f64::from(ops::bce_loss(&score_t, &label_t, None)?.scalar_value()?);
    Ok(PhaseStats { report, bce_loss })
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"MGCN";
const CHECKPOINT_VERSION: u32 = 1;

// Defensive bounds for parsing untrusted checkpoint bytes.
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 28;

/// Writes the network as: magic `MGCN`, format version (u32 LE), a
/// length-prefixed JSON architecture descriptor, the parameter count, then
/// per parameter a length-prefixed qualified name, rank, dims (u32 LE
/// each), and raw f32 LE values. Round-trips bit-exactly.
pub fn checkpoint_save(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let descriptor = serde_json::to_vec(&net.descriptor())
        .map_err(|e| Error::Checkpoint(format!("could not encode architecture: {e}")))?;
    w.write_all(&(descriptor.len() as u32).to_le_bytes())?;
    w.write_all(&descriptor)?;
    let params = net.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in &params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        let data = tensor.data();
        let mut buf = Vec::with_capacity(4 * 16384.min(data.len()));
        for chunk in data.chunks(16384) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CheckpointReader<R: Read> {
    inner: R,
}

impl<R: Read> CheckpointReader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Checkpoint("checkpoint file is truncated".into())
            } else {
                Error::Io(e)
            }
        })
    }

    fn u32le(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.fill(&mut b)?;
        Ok(b)
    }
}

/// Reads a checkpoint written by [`checkpoint_save`], rebuilding the
/// architecture from the embedded descriptor and restoring every parameter
/// bit-exactly. Fails on bad magic, unsupported version, truncation, or
/// any name/shape disagreement with the architecture.
pub fn checkpoint_load(path: &Path) -> Result<Network> {
    let mut r = CheckpointReader { inner: BufReader::new(std::fs::File::open(path)?) };
    let mut magic = [0u8; 4];
    r.fill(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(
            "not a model checkpoint (bad magic bytes)".into(),
        ));
    }
    let version = r.u32le()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let desc_len = r.u32le()? as usize;
    if desc_len > (1 << 24) {
        return Err(Error::Checkpoint("architecture descriptor is implausibly large".into()));
    }
    let descriptor: crate::models::NetworkDescriptor = serde_json::from_slice(&r.bytes(desc_len)?)
        .map_err(|e| Error::Checkpoint(format!("could not parse architecture: {e}")))?;
    let net = Network::from_descriptor(&descriptor)?;

    let expected: HashMap<String, Tensor> = net.params().into_iter().collect();
    let count = r.u32le()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {count} parameters but the architecture has {}",
            expected.len()
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32le()? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Checkpoint("parameter name is implausibly long".into()));
        }
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32le()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has implausible rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32le()? as usize);
        }
        let elements: usize = dims.iter().product();
        if elements > MAX_ELEMENTS {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` is implausibly large: {dims:?}"
            )));
        }
        let tensor = expected.get(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter `{name}` is not in the architecture"))
        })?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores parameter `{name}` twice"
            )));
        }
        if tensor.shape() != dims.as_slice() {
            return Err(Error::Shape(format!(
                "checkpoint parameter `{name}` has shape {dims:?} but the architecture expects {:?}",
                tensor.shape()
            )));
        }
        let raw = r.bytes(4 * elements)?;
        let mut values = Vec::with_capacity(elements);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunk is 4 bytes"));
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` contains a non-finite value"
                )));
            }
            values.push(v);
        }
        tensor.write_data(|d| d.copy_from_slice(&values));
    }
    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Checkpoint(
                "checkpoint has trailing data after the last parameter".into(),
            ))
        }
        Err(e) => return Err(Error::Io(e)),
    }
    Ok(net)
}
