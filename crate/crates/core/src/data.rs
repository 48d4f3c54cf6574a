//! Dataset ingestion, preprocessing, splitting, batching, and synthesis.
//!
//! The on-disk layout is `<root>/NORMAL/*.png` (label 0) and
//! `<root>/COVID/*.png` (label 1). Loading is deterministic: records are
//! ordered by (class, lexicographic filename) no matter how many decode
//! workers run. Preprocessing applies, in order: resize to a square target,
//! grayscale conversion with BT.601 weights, reshape to height×width×1,
//! division by 255 into `[0, 1]`, and optional replication to 3 channels.
//!
//! Invariants:
//! - Every record's pixels lie in `[0, 1]` after every pipeline stage.
//! - `load → split → batches` conserves the record multiset.
//! - A `Dataset` is immutable after construction and cheap to clone
//!   (records share their pixel storage).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Class directory names, indexed by label.
pub const CLASS_NAMES: [&str; 2] = ["NORMAL", "COVID"];

/// Target geometry for preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub img_size: usize,
    /// 1 keeps the grayscale plane; 3 replicates it for models that expect
    /// color input.
    pub channels: usize,
}

impl PreprocessConfig {
    pub fn new(img_size: usize, channels: usize) -> Result<Self> {
        if img_size == 0 {
            return Err(Error::Invalid("preprocess: image size must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!(
                "preprocess: channels must be 1 or 3, got {channels}"
            )));
        }
        Ok(Self { img_size, channels })
    }
}

/// One labeled image: pixels in height×width×channel layout, values in
/// `[0, 1]`, label 0 or 1.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub pixels: Tensor,
    pub label: f32,
    pub source_path: Option<PathBuf>,
}

/// An ordered, immutable collection of uniformly shaped records.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub class_names: [String; 2],
    pub img_size: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Record count per class, indexed by label.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for r in &self.records {
            counts[r.label as usize] += 1;
        }
        counts
    }

    /// Returns a copy whose records carry `channels` channels, replicating
    /// the grayscale plane when widening from 1. Narrowing is rejected.
    pub fn with_channels(&self, channels: usize) -> Result<Dataset> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        if !(self.channels == 1 && channels == 3) {
            return Err(Error::Invalid(format!(
                "cannot convert a {}-channel dataset to {} channels",
                self.channels, channels
            )));
        }
        let records = self
            .records
            .iter()
            .map(|r| {
                let src = r.pixels.data();
                let mut data = Vec::with_capacity(src.len() * 3);
                for &v in src.iter() {
                    data.extend_from_slice(&[v, v, v]);
                }
                let mut shape = r.pixels.shape().to_vec();
                shape[2] = 3;
                drop(src);
                Ok(ImageRecord {
                    pixels: Tensor::from_vec(&shape, data)?,
                    label: r.label,
                    source_path: r.source_path.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            records,
            class_names: self.class_names.clone(),
            img_size: self.img_size,
            channels,
        })
    }
}

fn class_names_owned() -> [String; 2] {
    [CLASS_NAMES[0].to_string(), CLASS_NAMES[1].to_string()]
}

/// BT.601 luminance in 16.16 fixed point, rounded to nearest. The weights
/// sum to exactly 2^16, so a gray pixel (r == g == b) maps to itself.
fn luma_u8(r: u8, g: u8, b: u8) -> u8 {
    let v = 19595 * u32::from(r) + 38470 * u32::from(g) + 7471 * u32::from(b) + 0x8000;
    (v >> 16) as u8
}

/// Resizes, grayscales, rescales to `[0, 1]`, and shapes a decoded image
/// into a height×width×channel tensor.
///
/// The resize uses bilinear interpolation and is skipped entirely when the
/// input already has the target dimensions, so images written at the target
/// size round-trip without resampling error.
pub fn preprocess(img: &image::DynamicImage, cfg: &PreprocessConfig) -> Result<Tensor> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Data("preprocess: image has no pixels".into()));
    }
    let s = cfg.img_size as u32;
    let resized;
    let img = if img.width() == s && img.height() == s {
        img
    } else {
        resized = img.resize_exact(s, s, image::imageops::FilterType::Triangle);
        &resized
    };
    let gray: Vec<u8> = match img {
        image::DynamicImage::ImageLuma8(buf) => buf.as_raw().clone(),
        other => {
            let rgb = other.to_rgb8();
            rgb.pixels().map(|p| luma_u8(p.0[0], p.0[1], p.0[2])).collect()
        }
    };
    let mut data = Vec::with_capacity(gray.len() * cfg.channels);
    for &v in &gray {
        let scaled = f32::from(v) / 255.0;
        for _ in 0..cfg.channels {
            data.push(scaled);
        }
    }
    Tensor::from_vec(&[cfg.img_size, cfg.img_size, cfg.channels], data)
}

fn worker_count() -> usize {
    if let Ok(v) = std::env::var("MGCN_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

fn decode_one(path: &Path, cfg: &PreprocessConfig) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("failed to decode {}: {e}", path.display())))?;
    preprocess(&img, cfg)
}

/// Decodes every listed file, fanning out across up to `MGCN_THREADS`
/// workers, and returns tensors in input order. On multiple failures, the
/// error for the earliest slot wins, keeping errors deterministic too.
fn decode_all(work: &[(PathBuf, f32)], cfg: &PreprocessConfig, threads: usize) -> Result<Vec<Tensor>> {
    let threads = threads.min(work.len()).max(1);
    let mut slots: Vec<Option<Result<Tensor>>> = (0..work.len()).map(|_| None).collect();
    if threads == 1 {
        for ((path, _), slot) in work.iter().zip(&mut slots) {
            *slot = Some(decode_one(path, cfg));
        }
    } else {
        let finished = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    scope.spawn(move || {
                        let mut done = Vec::new();
                        let mut i = t;
                        while i < work.len() {
                            done.push((i, decode_one(&work[i].0, cfg)));
                            i += threads;
                        }
                        done
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("decode worker panicked"))
                .collect::<Vec<_>>()
        });
        for (i, r) in finished {
            slots[i] = Some(r);
        }
    }
    slots
        .into_iter()
        .map(|r| r.expect("every slot was scheduled"))
        .collect()
}

/// Loads `<root>/NORMAL/*.png` and `<root>/COVID/*.png` into a dataset.
///
/// Only files with a `.png` extension are considered; anything else in the
/// class directories is ignored. Records are ordered by (class, filename).
/// A missing class directory or an undecodable PNG aborts the load.
pub fn load_directory(root: &Path, cfg: &PreprocessConfig) -> Result<Dataset> {
    let mut work: Vec<(PathBuf, f32)> = Vec::new();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "dataset root {} is missing the `{class}` directory",
                root.display()
            )));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
            })
            .collect();
        files.sort();
        work.extend(files.into_iter().map(|p| (p, label as f32)));
    }
    let tensors = decode_all(&work, cfg, worker_count())?;
    let records = work
        .into_iter()
        .zip(tensors)
        .map(|((path, label), pixels)| ImageRecord {
            pixels,
            label,
            source_path: Some(path),
        })
        .collect();
    Ok(Dataset {
        records,
        class_names: class_names_owned(),
        img_size: cfg.img_size,
        channels: cfg.channels,
    })
}

fn subset(ds: &Dataset, indices: &[usize]) -> Dataset {
    Dataset {
        records: indices.iter().map(|&i| ds.records[i].clone()).collect(),
        class_names: ds.class_names.clone(),
        img_size: ds.img_size,
        channels: ds.channels,
    }
}

/// Stratified train/test split: per class, a seeded shuffle selects
/// `floor(fraction · n_class)` records for training. The partitions are
/// disjoint, exhaustive, and deterministic given the seed; each side keeps
/// the dataset's original record order.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "split: train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for label in 0..2 {
        let mut idx: Vec<usize> = (0..ds.records.len())
            .filter(|&i| ds.records[i].label == label as f32)
            .collect();
        if idx.is_empty() {
            return Err(Error::Data(format!(
                "split: class `{}` has no records",
                CLASS_NAMES[label]
            )));
        }
        rng.shuffle(&mut idx);
        let take = (train_fraction * idx.len() as f64).floor() as usize;
        train_idx.extend_from_slice(&idx[..take]);
        test_idx.extend_from_slice(&idx[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((subset(ds, &train_idx), subset(ds, &test_idx)))
}

/// Groups records into `(images, labels)` batch pairs.
///
/// Images are converted from per-record height×width×channel layout to a
/// batched `[N, C, H, W]` tensor. The final batch keeps whatever remains.
/// With a shuffle seed the record order is a seeded permutation; without
/// one it is dataset order.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<(Tensor, Tensor)>> {
    if ds.is_empty() {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let (h, w, c) = {
        let shape = ds.records[0].pixels.shape();
        (shape[0], shape[1], shape[2])
    };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        SeededRng::new(seed).shuffle(&mut order);
    }
    let mut out = Vec::with_capacity(ds.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let n = chunk.len();
        let mut xdata = vec![0.0f32; n * c * h * w];
        let mut ydata = Vec::with_capacity(n);
        for (bi, &ri) in chunk.iter().enumerate() {
            let rec = &ds.records[ri];
            if rec.pixels.shape() != [h, w, c] {
                return Err(Error::Shape(format!(
                    "record {ri} has shape {:?}, expected {:?}",
                    rec.pixels.shape(),
                    [h, w, c]
                )));
            }
            let src = rec.pixels.data();
            for hh in 0..h {
                for ww in 0..w {
                    for cc in 0..c {
                        xdata[((bi * c + cc) * h + hh) * w + ww] = src[(hh * w + ww) * c + cc];
                    }
                }
            }
            ydata.push(rec.label);
        }
        out.push((
            Tensor::from_vec(&[n, c, h, w], xdata)?,
            Tensor::from_vec(&[n], ydata)?,
        ));
    }
    Ok(out)
}

/// Generates a two-class synthetic dataset: class 1 is a bright centered
/// disk (≈0.9) on a dark background (≈0.2), class 0 the inverse contrast,
/// both with additive Gaussian noise (σ = 0.05) clamped to `[0, 1]`.
/// Label-0 records come first. Deterministic given the seed.
pub fn synth_dataset(n_per_class: usize, img_size: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Invalid(
            "synthetic dataset needs at least one record per class".into(),
        ));
    }
    if img_size == 0 {
        return Err(Error::Invalid("synthetic dataset image size must be positive".into()));
    }
    let mut rng = SeededRng::new(seed);
    let center = (img_size as f32 - 1.0) / 2.0;
    let radius = img_size as f32 / 4.0;
    let mut records = Vec::with_capacity(2 * n_per_class);
    for label in 0..2usize {
        let (disk, background) = if label == 1 { (0.9, 0.2) } else { (0.1, 0.8) };
        for _ in 0..n_per_class {
            let mut data = Vec::with_capacity(img_size * img_size);
            for y in 0..img_size {
                for x in 0..img_size {
                    let dy = y as f32 - center;
                    let dx = x as f32 - center;
                    let base = if dy * dy + dx * dx <= radius * radius {
                        disk
                    } else {
                        background
                    };
                    data.push((base + 0.05 * rng.normal()).clamp(0.0, 1.0));
                }
            }
            records.push(ImageRecord {
                pixels: Tensor::from_vec(&[img_size, img_size, 1], data)?,
                label: label as f32,
                source_path: None,
            });
        }
    }
    Ok(Dataset {
        records,
        class_names: class_names_owned(),
        img_size,
        channels: 1,
    })
}

/// Writes a dataset as `<root>/NORMAL/img_NNNN.png` + `<root>/COVID/…`,
/// the same layout [`load_directory`] reads. Pixels are quantized with
/// round-to-nearest, so a reload at the same size differs by at most
/// 1/510 per pixel. Multi-channel records export their first channel.
pub fn export_png_tree(ds: &Dataset, root: &Path) -> Result<()> {
    for class in CLASS_NAMES {
        std::fs::create_dir_all(root.join(class))?;
    }
    let mut counters = [0usize; 2];
    for rec in &ds.records {
        let label = rec.label as usize;
        let shape = rec.pixels.shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let data = rec.pixels.data();
        let bytes: Vec<u8> = (0..h * w).map(|i| (data[i * c] * 255.0).round() as u8).collect();
        drop(data);
        let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer length matches dimensions by construction");
        let path = root
            .join(CLASS_NAMES[label])
            .join(format!("img_{:04}.png", counters[label]));
        counters[label] += 1;
        img.save(&path)
            .map_err(|e| Error::Data(format!("failed to write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checksum(t: &Tensor) -> u64 {
        t.data().iter().fold(0u64, |acc, v| {
            acc.wrapping_mul(31).wrapping_add(u64::from(v.to_bits()))
        })
    }

    #[test]
    fn synth_produces_balanced_clamped_records_label_zero_first() {
        let ds = synth_dataset(50, 8, 3).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.class_counts(), [50, 50]);
        assert!(ds.records[..50].iter().all(|r| r.label == 0.0));
        assert!(ds.records[50..].iter().all(|r| r.label == 1.0));
        for r in &ds.records {
            assert_eq!(r.pixels.shape(), [8, 8, 1]);
            assert!(r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn synth_classes_are_separated_by_center_intensity() {
        let ds = synth_dataset(20, 16, 9).unwrap();
        let center_mean = |r: &ImageRecord| {
            let d = r.pixels.data();
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for y in 6..10 {
                for x in 6..10 {
                    sum += f64::from(d[y * 16 + x]);
                    count += 1;
                }
            }
            sum / count as f64
        };
        let mean0: f64 =
            ds.records[..20].iter().map(center_mean).sum::<f64>() / 20.0;
        let mean1: f64 =
            ds.records[20..].iter().map(center_mean).sum::<f64>() / 20.0;
        assert!(
            mean1 - mean0 > 0.5,
            "center separation {mean1} - {mean0} too small"
        );
    }

    #[test]
    fn preprocess_of_uniform_white_is_exactly_one() {
        let img = image::DynamicImage::ImageRgb8(image::RgbImage::from_pixel(
            8,
            8,
            image::Rgb([255, 255, 255]),
        ));
        let cfg = PreprocessConfig::new(8, 1).unwrap();
        let t = preprocess(&img, &cfg).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn preprocess_red_matches_bt601_luminance_within_quantization() {
        let img = image::DynamicImage::ImageRgb8(image::RgbImage::from_pixel(
            4,
            4,
            image::Rgb([255, 0, 0]),
        ));
        let cfg = PreprocessConfig::new(4, 1).unwrap();
        let t = preprocess(&img, &cfg).unwrap();
        let v = t.data()[0];
        assert!((v - 0.299).abs() <= 1.0 / 255.0, "got {v}");
    }

    #[test]
    fn preprocess_resizes_and_replicates_to_the_requested_shape() {
        let img = image::DynamicImage::ImageRgb8(image::RgbImage::from_fn(5, 7, |x, y| {
            image::Rgb([(x * 40) as u8, (y * 30) as u8, 128])
        }));
        let cfg = PreprocessConfig::new(8, 3).unwrap();
        let t = preprocess(&img, &cfg).unwrap();
        assert_eq!(t.shape(), [8, 8, 3]);
        let d = t.data();
        for px in d.chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn config_rejects_zero_size_and_odd_channel_counts() {
        assert!(PreprocessConfig::new(0, 1).is_err());
        assert!(PreprocessConfig::new(8, 2).is_err());
        assert!(PreprocessConfig::new(8, 1).is_ok());
        assert!(PreprocessConfig::new(8, 3).is_ok());
    }

    #[test]
    fn export_then_load_round_trips_every_record_within_quantization() {
        let ds = synth_dataset(10, 8, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_png_tree(&ds, dir.path()).unwrap();
        let cfg = PreprocessConfig::new(8, 1).unwrap();
        let loaded = load_directory(dir.path(), &cfg).unwrap();
        assert_eq!(loaded.len(), 20);
        assert_eq!(loaded.labels(), ds.labels());
        for (orig, back) in ds.records.iter().zip(&loaded.records) {
            let a = orig.pixels.data();
            let b = back.pixels.data();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!(
                    (x - y).abs() <= 1.0 / 255.0,
                    "pixel drifted: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn loader_ignores_non_png_files_and_sorts_by_filename() {
        let ds = synth_dataset(2, 8, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_png_tree(&ds, dir.path()).unwrap();
        std::fs::write(dir.path().join("COVID/notes.txt"), b"not an image").unwrap();
        let cfg = PreprocessConfig::new(8, 1).unwrap();
        let loaded = load_directory(dir.path(), &cfg).unwrap();
        assert_eq!(loaded.len(), 4, "the .txt file must be ignored");
        let names: Vec<String> = loaded.records[..2]
            .iter()
            .map(|r| {
                r.source_path
                    .as_ref()
                    .unwrap()
                    .file_name()
                    .unwrap()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        assert_eq!(names, ["img_0000.png", "img_0001.png"]);
    }

    #[test]
    fn loader_reports_the_missing_class_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("COVID")).unwrap();
        let cfg = PreprocessConfig::new(8, 1).unwrap();
        let err = load_directory(dir.path(), &cfg).unwrap_err();
        assert!(err.to_string().contains("NORMAL"), "got: {err}");
    }

    #[test]
    fn loader_aborts_on_an_undecodable_png_naming_the_file() {
        let ds = synth_dataset(1, 8, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_png_tree(&ds, dir.path()).unwrap();
        std::fs::write(dir.path().join("NORMAL/broken.png"), b"garbage").unwrap();
        let cfg = PreprocessConfig::new(8, 1).unwrap();
        let err = load_directory(dir.path(), &cfg).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "got: {err}");
    }

    #[test]
    fn parallel_and_serial_loads_agree_bitwise() {
        let ds = synth_dataset(7, 8, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_png_tree(&ds, dir.path()).unwrap();
        let cfg = PreprocessConfig::new(8, 1).unwrap();
        let mut work: Vec<(PathBuf, f32)> = Vec::new();
        for (label, class) in CLASS_NAMES.iter().enumerate() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir.path().join(class))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            work.extend(files.into_iter().map(|p| (p, label as f32)));
        }
        let serial = decode_all(&work, &cfg, 1).unwrap();
        let parallel = decode_all(&work, &cfg, 4).unwrap();
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(checksum(a), checksum(b));
        }
    }

    #[test]
    fn split_is_stratified_deterministic_and_exhaustive() {
        let ds = synth_dataset(5, 8, 13).unwrap();
        let (train, test) = split(&ds, 0.8, 42).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert_eq!(train.class_counts(), [4, 4]);
        assert_eq!(test.class_counts(), [1, 1]);

        let (train2, test2) = split(&ds, 0.8, 42).unwrap();
        let sums = |d: &Dataset| d.records.iter().map(|r| checksum(&r.pixels)).collect::<Vec<_>>();
        assert_eq!(sums(&train), sums(&train2));
        assert_eq!(sums(&test), sums(&test2));

        let mut all: Vec<u64> = sums(&train).into_iter().chain(sums(&test)).collect();
        all.sort_unstable();
        let mut orig: Vec<u64> = sums(&ds);
        orig.sort_unstable();
        assert_eq!(all, orig, "partitions must cover the dataset exactly once");
    }

    #[test]
    fn split_rejects_degenerate_fractions_and_empty_classes() {
        let ds = synth_dataset(5, 8, 13).unwrap();
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&ds, 0.0, 0).is_err());
        let single = Dataset {
            records: ds.records[..5].to_vec(), // only label 0
            class_names: ds.class_names.clone(),
            img_size: 8,
            channels: 1,
        };
        let err = split(&single, 0.8, 0).unwrap_err();
        assert!(err.to_string().contains("COVID"), "got: {err}");
    }

    #[test]
    fn batches_chunk_convert_layout_and_conserve_labels() {
        let ds = synth_dataset(35, 8, 17).unwrap();
        let bs = batches(&ds, 32, None).unwrap();
        let sizes: Vec<usize> = bs.iter().map(|(x, _)| x.shape()[0]).collect();
        assert_eq!(sizes, [32, 32, 6]);
        for (x, y) in &bs {
            assert_eq!(&x.shape()[1..], [1, 8, 8]);
            assert_eq!(y.shape(), [x.shape()[0]]);
        }
        let mut emitted: Vec<u32> = bs
            .iter()
            .flat_map(|(_, y)| y.data().iter().map(|v| *v as u32).collect::<Vec<_>>())
            .collect();
        emitted.sort_unstable();
        let mut expected: Vec<u32> = ds.labels().iter().map(|v| *v as u32).collect();
        expected.sort_unstable();
        assert_eq!(emitted, expected);

        let first = &bs[0].0;
        let rec0 = ds.records[0].pixels.data();
        let batch0 = first.data();
        assert_eq!(rec0[0], batch0[0], "unshuffled batches keep dataset order");
    }

    #[test]
    fn seeded_batch_shuffle_is_reproducible_and_a_permutation() {
        let ds = synth_dataset(10, 8, 23).unwrap();
        let a = batches(&ds, 4, Some(5)).unwrap();
        let b = batches(&ds, 4, Some(5)).unwrap();
        for ((xa, ya), (xb, yb)) in a.iter().zip(&b) {
            assert_eq!(checksum(xa), checksum(xb));
            assert_eq!(checksum(ya), checksum(yb));
        }
        let unshuffled = batches(&ds, 4, None).unwrap();
        let differs = a
            .iter()
            .zip(&unshuffled)
            .any(|((xa, _), (xu, _))| checksum(xa) != checksum(xu));
        assert!(differs, "seed 5 should reorder 20 records");
    }

    #[test]
    fn batching_an_empty_dataset_is_an_error() {
        let ds = synth_dataset(1, 8, 0).unwrap();
        let empty = Dataset {
            records: Vec::new(),
            class_names: ds.class_names.clone(),
            img_size: 8,
            channels: 1,
        };
        assert!(batches(&empty, 4, None).is_err());
        assert!(batches(&ds, 0, None).is_err());
    }

    #[test]
    fn widening_to_three_channels_replicates_the_gray_plane() {
        let ds = synth_dataset(2, 8, 31).unwrap();
        let wide = ds.with_channels(3).unwrap();
        assert_eq!(wide.channels, 3);
        for (narrow, broad) in ds.records.iter().zip(&wide.records) {
            assert_eq!(broad.pixels.shape(), [8, 8, 3]);
            let n = narrow.pixels.data();
            let b = broad.pixels.data();
            for (i, &v) in n.iter().enumerate() {
                assert_eq!(b[3 * i], v);
                assert_eq!(b[3 * i + 1], v);
                assert_eq!(b[3 * i + 2], v);
            }
        }
        assert!(wide.with_channels(1).is_err(), "narrowing is not supported");
    }
}
