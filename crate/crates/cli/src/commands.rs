//! Implementations of the five subcommands.

use std::collections::HashMap;
use std::path::Path;

use mgcn_core::data::{self, Dataset};
use mgcn_core::models::{self, Network};
use mgcn_core::rng::derive_seed;
use mgcn_core::train::{self, PhaseStats};
use mgcn_core::{gradcheck, Error, Result};

use crate::manifest::{RunManifest, DATASET_SEED_STREAM, SPLIT_SEED_STREAM};
use crate::settings::{parse_kv_lines, DataSource, TrainSettings};
use crate::table;
use crate::{CompareArgs, EvaluateArgs, GradCheckArgs, SynthArgs, TrainArgs};

/// Instantiates a registry model at the given input size. The smaller
/// architectures use fixed desk-scale hyperparameters: densenet-mini runs
/// 2 dense blocks of 4 layers at growth 12; vgg-mini runs stages [16, 32]
/// with a 64-unit head.
fn build_model(name: &str, img_size: usize, seed: u64) -> Result<Network> {
    match name {
        "cnn" => models::build_custom_cnn(img_size, seed),
        "alexnet" => models::build_alexnet(img_size, seed),
        "inception-v4" => models::build_inception_v4(img_size, seed),
        "densenet-mini" => models::build_densenet_mini(img_size, 2, 4, 12, seed),
        "vgg-mini" => models::build_vgg_mini(img_size, &[16, 32], &[64], seed),
        other => Err(Error::Invalid(format!("unknown model `{other}`"))),
    }
}

/// Materializes the manifest's data source: synthetic generation (seed
/// stream 3 of the master seed) or a directory load.
fn load_source(m: &RunManifest) -> Result<Dataset> {
    match &m.source {
        DataSource::Synth { per_class } => {
            let ds = data::synth_dataset(
                *per_class,
                m.img_size,
                derive_seed(m.seed, DATASET_SEED_STREAM),
            )?;
            ds.with_channels(m.channels)
        }
        DataSource::Directory { path } => {
            let cfg = data::PreprocessConfig::new(m.img_size, m.channels)?;
            data::load_directory(Path::new(path), &cfg)
        }
    }
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Accuracy, precision, recall, and BCE in the comparison table's row order.
fn phase_cells(stats: &PhaseStats) -> [String; 4] {
    [
        fmt4(stats.report.accuracy),
        fmt4(stats.report.precision),
        fmt4(stats.report.recall),
        fmt4(stats.bce_loss),
    ]
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let settings = TrainSettings::resolve(args)?;
    let manifest = RunManifest::from_settings(&settings);
    std::fs::create_dir_all(&settings.out)?;
    let dataset = load_source(&manifest)?;
    let (train_ds, val_ds) = data::split(
        &dataset,
        manifest.split_fraction,
        derive_seed(manifest.seed, SPLIT_SEED_STREAM),
    )?;
    let mut net = build_model(&manifest.model, manifest.img_size, manifest.seed)?;
    let history = train::train(&mut net, &train_ds, &val_ds, &manifest.train_config())?;

    train::checkpoint_save(&net, &settings.out.join("checkpoint.mgcn"))?;
    std::fs::write(settings.out.join("history.kv"), history.to_kv())?;
    std::fs::write(settings.out.join("manifest.kv"), manifest.to_kv())?;

    let last = history.final_entry().expect("epochs >= 1 was validated");
    let section = table::model_section(
        &manifest.model,
        &phase_cells(&last.train),
        &phase_cells(&last.validation),
    );
    print!("{}", table::render(&table::COMPARE_HEADERS, &[section]));
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let manifest_path = args.run.join("manifest.kv");
    let manifest_text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Data(format!(
            "run directory {} has no readable manifest: {e}",
            args.run.display()
        ))
    })?;
    let manifest = RunManifest::parse(&manifest_text)?;
    let checkpoint_path = args.run.join("checkpoint.mgcn");
    let mut net = train::checkpoint_load(&checkpoint_path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!(
            "cannot open checkpoint {}: {io}",
            checkpoint_path.display()
        )),
        other => other,
    })?;
    let ds = match &args.data {
        Some(dir) => {
            let cfg = data::PreprocessConfig::new(manifest.img_size, manifest.channels)?;
            data::load_directory(dir, &cfg)?
        }
        None => {
            let full = load_source(&manifest)?;
            let (_, validation) = data::split(
                &full,
                manifest.split_fraction,
                derive_seed(manifest.seed, SPLIT_SEED_STREAM),
            )?;
            validation
        }
    };
    let threshold = args.threshold.unwrap_or(manifest.threshold);
    let stats = train::evaluate(&mut net, &ds, threshold, manifest.batch_size)?;

    let r = &stats.report;
    let rows: Vec<Vec<String>> = vec![
        vec!["Accuracy".into(), fmt4(r.accuracy)],
        vec!["Loss (BCE)".into(), fmt4(stats.bce_loss)],
        vec!["Precision".into(), fmt4(r.precision)],
        vec!["Recall".into(), fmt4(r.recall)],
        vec!["F1".into(), fmt4(r.f1)],
        vec!["Misclassification Rate".into(), fmt4(r.misclassification_rate)],
    ];
    print!("{}", table::render(&["Metric", "Value"], &[rows]));

    let mut kv = String::new();
    for (metric, value) in [
        ("accuracy", r.accuracy),
        ("bce_loss", stats.bce_loss),
        ("precision", r.precision),
        ("recall", r.recall),
        ("f1", r.f1),
        ("misclassification_rate", r.misclassification_rate),
    ] {
        kv.push_str(&format!("{}.{metric}.test={value:.4}\n", manifest.model));
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.join("report.kv"));
    std::fs::write(out, kv)?;
    Ok(())
}

/// Final-epoch (accuracy, precision, recall, BCE) cells for both phases,
/// read back from a history file so the table repeats its exact digits.
fn final_epoch_cells(history: &str, run: &Path) -> Result<([String; 4], [String; 4])> {
    let mut map = HashMap::new();
    for (k, v) in
        parse_kv_lines(history).map_err(|e| Error::Data(format!("history in {}: {e}", run.display())))?
    {
        map.insert(k, v);
    }
    let last = map
        .keys()
        .filter_map(|k| k.strip_prefix("epoch.")?.split('.').next()?.parse::<usize>().ok())
        .max()
        .ok_or_else(|| Error::Data(format!("history in {} records no epochs", run.display())))?;
    let get = |phase: &str, metric: &str| {
        map.get(&format!("epoch.{last}.{phase}.{metric}")).cloned().ok_or_else(|| {
            Error::Data(format!(
                "history in {} is missing epoch.{last}.{phase}.{metric}",
                run.display()
            ))
        })
    };
    let phase = |name: &str| -> Result<[String; 4]> {
        Ok([
            get(name, "accuracy")?,
            get(name, "precision")?,
            get(name, "recall")?,
            get(name, "bce_loss")?,
        ])
    };
    Ok((phase("train")?, phase("validation")?))
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    let mut sections = Vec::new();
    let mut kv = String::new();
    for run in &args.runs {
        let manifest_text = std::fs::read_to_string(run.join("manifest.kv")).map_err(|e| {
            Error::Data(format!(
                "run directory {} has no readable manifest: {e}",
                run.display()
            ))
        })?;
        let manifest = RunManifest::parse(&manifest_text)?;
        let history_text = std::fs::read_to_string(run.join("history.kv")).map_err(|e| {
            Error::Data(format!(
                "run directory {} has no readable history: {e}",
                run.display()
            ))
        })?;
        let (train_cells, test_cells) = final_epoch_cells(&history_text, run)?;
        for (i, metric) in ["accuracy", "precision", "recall", "bce_loss"].iter().enumerate() {
            kv.push_str(&format!("{}.{metric}.train={}\n", manifest.model, train_cells[i]));
            kv.push_str(&format!("{}.{metric}.test={}\n", manifest.model, test_cells[i]));
        }
        sections.push(table::model_section(&manifest.model, &train_cells, &test_cells));
    }
    print!("{}", table::render(&table::COMPARE_HEADERS, &sections));
    match &args.out {
        Some(path) => std::fs::write(path, kv)?,
        None => {
            println!();
            print!("{kv}");
        }
    }
    Ok(())
}

pub fn grad_check(args: &GradCheckArgs) -> Result<()> {
    // Testing hook: setting MGCN_GRADCHECK_FLIP=<op> negates that op's
    // analytic gradient, which must make exactly that op fail.
    let flip = std::env::var("MGCN_GRADCHECK_FLIP").ok();
    let results = gradcheck::check_all(args.seed, args.trials, args.threshold, flip.as_deref())?;
    for r in &results {
        println!(
            "{:<13} max rel err {:>12.3e}  {}",
            r.op,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failures: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.op).collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for: {}",
            failures.join(", ")
        )))
    }
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let ds = data::synth_dataset(args.per_class, args.img_size, args.seed)?;
    data::export_png_tree(&ds, &args.out)?;
    println!("wrote {} images under {}", ds.len(), args.out.display());
    Ok(())
}
