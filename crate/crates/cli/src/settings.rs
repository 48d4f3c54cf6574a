//! Option resolution for `train`: command-line flags override config-file
//! entries, which override built-in defaults.
//!
//! Config files are line-oriented `key=value` text; blank lines and lines
//! starting with `#` are ignored; unknown keys are errors. Keys mirror the
//! long flag names without the leading dashes (`img-size`, `batch-size`).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mgcn_core::train::OptimizerKind;
use mgcn_core::{Error, Result};

use crate::TrainArgs;

/// Every model the harness can build, in help order.
pub const MODEL_NAMES: [&str; 5] = ["cnn", "alexnet", "inception-v4", "densenet-mini", "vgg-mini"];

/// Where training records come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synth { per_class: usize },
    Directory { path: String },
}

/// Fully resolved `train` invocation.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub model: String,
    pub source: DataSource,
    pub img_size: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub split: f64,
    pub threshold: f32,
    pub out: PathBuf,
}

/// Canonical input size when `--img-size` is omitted.
pub fn default_img_size(model: &str) -> usize {
    match model {
        "cnn" => 64,
        "alexnet" => 227,
        _ => 32,
    }
}

/// Channel count each architecture is built for.
pub fn native_channels(model: &str) -> usize {
    if model == "cnn" {
        1
    } else {
        3
    }
}

/// Splits line-oriented `key=value` text, skipping blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Invalid(format!(
                "line {} is not `key=value`: `{raw}`",
                i + 1
            )));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_typed<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Invalid(format!("config value `{key}={value}` is invalid: {e}")))
}

#[derive(Default)]
struct FileConfig {
    model: Option<String>,
    data: Option<String>,
    synth: Option<usize>,
    img_size: Option<usize>,
    channels: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f32>,
    optimizer: Option<String>,
    seed: Option<u64>,
    split: Option<f64>,
    threshold: Option<f32>,
    out: Option<String>,
}

fn parse_config_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = FileConfig::default();
    for (key, value) in parse_kv_lines(&text)
        .map_err(|e| Error::Invalid(format!("config file {}: {e}", path.display())))?
    {
        match key.as_str() {
            "model" => cfg.model = Some(value),
            "data" => cfg.data = Some(value),
            "synth" => cfg.synth = Some(parse_typed(&key, &value)?),
            "img-size" => cfg.img_size = Some(parse_typed(&key, &value)?),
            "channels" => cfg.channels = Some(parse_typed(&key, &value)?),
            "epochs" => cfg.epochs = Some(parse_typed(&key, &value)?),
            "batch-size" => cfg.batch_size = Some(parse_typed(&key, &value)?),
            "lr" => cfg.lr = Some(parse_typed(&key, &value)?),
            "optimizer" => cfg.optimizer = Some(value),
            "seed" => cfg.seed = Some(parse_typed(&key, &value)?),
            "split" => cfg.split = Some(parse_typed(&key, &value)?),
            "threshold" => cfg.threshold = Some(parse_typed(&key, &value)?),
            "out" => cfg.out = Some(value),
            other => {
                return Err(Error::Invalid(format!(
                    "config file {}: unknown key `{other}`",
                    path.display()
                )))
            }
        }
    }
    Ok(cfg)
}

fn utf8_path(path: &Path) -> Result<String> {
    path.to_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Invalid(format!("path {} is not UTF-8", path.display())))
}

/// The `--data`/`--synth` pair forms one logical setting, so the flags and
/// the config file are merged as wholes: if either flag is present the
/// config file's source entries are ignored.
fn resolve_source(args: &TrainArgs, file: &FileConfig) -> Result<DataSource> {
    let from_flags = match (&args.data, args.synth) {
        (Some(_), Some(_)) => {
            return Err(Error::Invalid(
                "--data and --synth are mutually exclusive".into(),
            ))
        }
        (Some(dir), None) => Some(DataSource::Directory { path: utf8_path(dir)? }),
        (None, Some(n)) => Some(DataSource::Synth { per_class: n }),
        (None, None) => None,
    };
    let from_file = match (&file.data, file.synth) {
        (Some(_), Some(_)) => {
            return Err(Error::Invalid(
                "config file sets both `data` and `synth`".into(),
            ))
        }
        (Some(dir), None) => Some(DataSource::Directory { path: dir.clone() }),
        (None, Some(n)) => Some(DataSource::Synth { per_class: n }),
        (None, None) => None,
    };
    from_flags.or(from_file).ok_or_else(|| {
        Error::Invalid("a data source is required: pass --data DIR or --synth N".into())
    })
}

impl TrainSettings {
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => parse_config_file(path)?,
            None => FileConfig::default(),
        };
        let source = resolve_source(args, &file)?;
        let model = args
            .model
            .clone()
            .or(file.model)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "--model is required; valid names: {}",
                    MODEL_NAMES.join(", ")
                ))
            })?;
        if !MODEL_NAMES.contains(&model.as_str()) {
            return Err(Error::Invalid(format!(
                "unknown model `{model}`; valid names: {}",
                MODEL_NAMES.join(", ")
            )));
        }
        let img_size = args
            .img_size
            .or(file.img_size)
            .unwrap_or_else(|| default_img_size(&model));
        let channels = args
            .channels
            .or(file.channels)
            .unwrap_or_else(|| native_channels(&model));
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if channels != native_channels(&model) {
            return Err(Error::Invalid(format!(
                "model `{model}` expects {}-channel input, got --channels {channels}",
                native_channels(&model)
            )));
        }
        let lr = args.lr.or(file.lr).unwrap_or(1e-3);
        let optimizer_name = args
            .optimizer
            .clone()
            .or(file.optimizer)
            .unwrap_or_else(|| "adam".into());
        let optimizer = match optimizer_name.as_str() {
            "sgd" => OptimizerKind::Sgd { lr },
            "adam" => OptimizerKind::adam(lr),
            other => {
                return Err(Error::Invalid(format!(
                    "unknown optimizer `{other}`; valid names: sgd, adam"
                )))
            }
        };
        let out = args
            .out
            .clone()
            .or(file.out.map(PathBuf::from))
            .ok_or_else(|| Error::Invalid("--out DIR is required".into()))?;
        Ok(TrainSettings {
            model,
            source,
            img_size,
            channels,
            epochs: args.epochs.or(file.epochs).unwrap_or(20),
            batch_size: args.batch_size.or(file.batch_size).unwrap_or(32),
            optimizer,
            seed: args.seed.or(file.seed).unwrap_or(0),
            split: args.split.or(file.split).unwrap_or(0.8),
            threshold: args.threshold.or(file.threshold).unwrap_or(0.5),
            out,
        })
    }
}
