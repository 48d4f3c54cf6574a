//! Self-describing run records.
//!
//! A manifest holds everything needed to reproduce a training run exactly:
//! the model, the data source (synthetic parameters or a directory path,
//! stored verbatim), the split fraction, the full optimizer configuration,
//! and the master seed. Identical settings always serialize to identical
//! bytes, so manifest equality certifies run reproducibility.
//!
//! Seed streams: the master seed feeds the network (streams 0 and 1, inside
//! the core engine), the trainer's epoch shuffles (stream 2), synthetic
//! data generation (stream 3), and the train/test split (stream 4).

use mgcn_core::train::{OptimizerKind, TrainConfig};
use mgcn_core::{Error, Result};

use crate::settings::{parse_kv_lines, DataSource, TrainSettings};

/// Seed stream consumed by synthetic dataset generation.
pub const DATASET_SEED_STREAM: u64 = 3;
/// Seed stream consumed by the stratified split.
pub const SPLIT_SEED_STREAM: u64 = 4;

/// Reproducible description of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub model: String,
    pub img_size: usize,
    pub channels: usize,
    pub source: DataSource,
    pub split_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub threshold: f32,
}

impl RunManifest {
    pub fn from_settings(s: &TrainSettings) -> Self {
        RunManifest {
            model: s.model.clone(),
            img_size: s.img_size,
            channels: s.channels,
            source: s.source.clone(),
            split_fraction: s.split,
            epochs: s.epochs,
            batch_size: s.batch_size,
            optimizer: s.optimizer,
            seed: s.seed,
            threshold: s.threshold,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed: self.seed,
            threshold: self.threshold,
        }
    }

    /// Fixed-order `key=value` rendering; byte-identical for identical runs.
    pub fn to_kv(&self) -> String {
        let mut out = String::from("format=1\n");
        out.push_str(&format!("tool.version={}\n", env!("CARGO_PKG_VERSION")));
        out.push_str(&format!("model={}\n", self.model));
        out.push_str(&format!("img_size={}\n", self.img_size));
        out.push_str(&format!("channels={}\n", self.channels));
        match &self.source {
            DataSource::Synth { per_class } => {
                out.push_str("data.kind=synth\n");
                out.push_str(&format!("data.per_class={per_class}\n"));
            }
            DataSource::Directory { path } => {
                out.push_str("data.kind=directory\n");
                out.push_str(&format!("data.path={path}\n"));
            }
        }
        out.push_str(&format!("split.fraction={}\n", self.split_fraction));
        match self.optimizer {
            OptimizerKind::Sgd { lr } => {
                out.push_str("optimizer.kind=sgd\n");
                out.push_str(&format!("optimizer.lr={lr}\n"));
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                out.push_str("optimizer.kind=adam\n");
                out.push_str(&format!("optimizer.lr={lr}\n"));
                out.push_str(&format!("optimizer.beta1={beta1}\n"));
                out.push_str(&format!("optimizer.beta2={beta2}\n"));
                out.push_str(&format!("optimizer.eps={eps}\n"));
            }
        }
        out.push_str(&format!("train.epochs={}\n", self.epochs));
        out.push_str(&format!("train.batch_size={}\n", self.batch_size));
        out.push_str(&format!("train.seed={}\n", self.seed));
        out.push_str(&format!("train.threshold={}\n", self.threshold));
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (k, v) in parse_kv_lines(text).map_err(|e| Error::Data(format!("manifest: {e}")))? {
            if map.insert(k.clone(), v).is_some() {
                return Err(Error::Data(format!("manifest: duplicate key `{k}`")));
            }
        }
        let get = |key: &str| {
            map.get(key)
                .cloned()
                .ok_or_else(|| Error::Data(format!("manifest: missing key `{key}`")))
        };
        fn typed<T>(key: &str, value: &str) -> Result<T>
        where
            T: std::str::FromStr,
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Data(format!("manifest: bad value `{key}={value}`: {e}")))
        }
        let format = get("format")?;
        if format != "1" {
            return Err(Error::Data(format!(
                "manifest: unsupported format `{format}`"
            )));
        }
        let source = match get("data.kind")?.as_str() {
            "synth" => DataSource::Synth {
                per_class: typed("data.per_class", &get("data.per_class")?)?,
            },
            "directory" => DataSource::Directory { path: get("data.path")? },
            other => {
                return Err(Error::Data(format!(
                    "manifest: unknown data kind `{other}`"
                )))
            }
        };
        let lr: f32 = typed("optimizer.lr", &get("optimizer.lr")?)?;
        let optimizer = match get("optimizer.kind")?.as_str() {
            "sgd" => OptimizerKind::Sgd { lr },
            "adam" => OptimizerKind::Adam {
                lr,
                beta1: typed("optimizer.beta1", &get("optimizer.beta1")?)?,
                beta2: typed("optimizer.beta2", &get("optimizer.beta2")?)?,
                eps: typed("optimizer.eps", &get("optimizer.eps")?)?,
            },
            other => {
                return Err(Error::Data(format!(
                    "manifest: unknown optimizer `{other}`"
                )))
            }
        };
        Ok(RunManifest {
            model: get("model")?,
            img_size: typed("img_size", &get("img_size")?)?,
            channels: typed("channels", &get("channels")?)?,
            source,
            split_fraction: typed("split.fraction", &get("split.fraction")?)?,
            epochs: typed("train.epochs", &get("train.epochs")?)?,
            batch_size: typed("train.batch_size", &get("train.batch_size")?)?,
            optimizer,
            seed: typed("train.seed", &get("train.seed")?)?,
            threshold: typed("train.threshold", &get("train.threshold")?)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(optimizer: OptimizerKind) -> RunManifest {
        RunManifest {
            model: "cnn".into(),
            img_size: 16,
            channels: 1,
            source: DataSource::Synth { per_class: 200 },
            split_fraction: 0.8,
            epochs: 20,
            batch_size: 32,
            optimizer,
            seed: 7,
            threshold: 0.5,
        }
    }

    #[test]
    fn manifests_round_trip_through_kv_for_both_optimizers() {
        for opt in [OptimizerKind::adam(1e-3), OptimizerKind::Sgd { lr: 0.05 }] {
            let m = sample(opt);
            let parsed = RunManifest::parse(&m.to_kv()).unwrap();
            assert_eq!(parsed, m);
        }
        let dir = sample(OptimizerKind::adam(1e-3));
        let dir = RunManifest {
            source: DataSource::Directory { path: "data/desk".into() },
            ..dir
        };
        assert_eq!(RunManifest::parse(&dir.to_kv()).unwrap(), dir);
    }

    #[test]
    fn identical_settings_serialize_to_identical_bytes() {
        let a = sample(OptimizerKind::adam(1e-3)).to_kv();
        let b = sample(OptimizerKind::adam(1e-3)).to_kv();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_and_malformed_manifest_keys_are_reported() {
        let m = sample(OptimizerKind::adam(1e-3));
        let text = m.to_kv().replace("train.seed=7\n", "");
        let err = RunManifest::parse(&text).unwrap_err();
        assert!(err.to_string().contains("train.seed"), "got: {err}");

        let text = m.to_kv().replace("train.epochs=20", "train.epochs=twenty");
        assert!(RunManifest::parse(&text).is_err());

        let text = format!("{}extra.key=1\n", m.to_kv());
        // Unknown keys are tolerated when parsing (forward compatibility);
        // required keys drive the result.
        assert_eq!(RunManifest::parse(&text).unwrap(), m);
    }
}
