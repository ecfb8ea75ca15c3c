use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::Serialize;
use skipcross::data::{
    adi_image, load_dataset, load_manifest, preprocess, read_image, synth_generate, write_image,
    write_kitti_sample, write_mask, Sample, SceneSpec,
};
use skipcross::geometry::{Calibration, PointCloud};
use skipcross::gradsuite::{network_check, op_suite, tiny_topology, SuiteEntry};
use skipcross::metrics::{fbeta, miou, MetricsReport, ThresholdSweep, DEFAULT_LEVELS};
use skipcross::model::{load_weights, save_weights, FusionTopology, SkipcrossNet, Strategy};
use skipcross::raster::{Image, Mask};
use skipcross::train::{fit, predict_set, validate};

use crate::config::{Resolved, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

const VAL_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

pub const AP_CONVENTION: &str = "11-point interpolated average precision: mean over recall levels 0.0, 0.1, ..., 1.0 \
     of the highest precision reached at or above that recall, sweeping 256 confidence thresholds i/255 with a pixel \
     counted as road when its confidence strictly exceeds the threshold";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_config(dir: &Path, resolved: &Resolved) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.ini"), resolved.to_ini())
}

fn scene(cfg: &RunConfig, offset: u64) -> SceneSpec {
    SceneSpec {
        seed: cfg.seed.wrapping_add(offset),
        ..cfg.scene.clone()
    }
}

/// Loads a KITTI-layout root, or synthesizes `n` samples when none is given.
fn load_split(cfg: &RunConfig, dir: Option<&Path>, n: usize, offset: u64) -> Result<Vec<Sample>> {
    match dir {
        Some(root) => Ok(load_dataset(&load_manifest(root)?, &cfg.preprocess)?),
        None => synth_generate(&scene(cfg, offset), n)?
            .iter()
            .map(|s| s.to_sample(&cfg.preprocess).map_err(CliError::from))
            .collect(),
    }
}

fn train_set(cfg: &RunConfig) -> Result<Vec<Sample>> {
    load_split(cfg, cfg.train_dir.as_deref(), cfg.train_samples, 0)
}

fn val_set(cfg: &RunConfig) -> Result<Vec<Sample>> {
    load_split(
        cfg,
        cfg.val_dir.as_deref(),
        cfg.val_samples,
        VAL_SEED_OFFSET,
    )
}

pub fn synth(cfg: &RunConfig, resolved: &Resolved) -> Result<()> {
    for (name, n, offset) in [
        ("train", cfg.train_samples, 0),
        ("val", cfg.val_samples, VAL_SEED_OFFSET),
    ] {
        let dir = cfg.out.join(name);
        create_dir(&dir)?;
        for s in synth_generate(&scene(cfg, offset), n)? {
            write_kitti_sample(&dir, &s)?;
        }
        println!("wrote {n} samples to {}", dir.display());
    }
    write_config(&cfg.out, resolved)
}

/// Normalized ADI of one cloud at the configured input size.
pub fn project(
    cfg: &RunConfig,
    resolved: &Resolved,
    cloud: &Path,
    calib: &Path,
    out: &Path,
) -> Result<()> {
    let cloud = PointCloud::read(cloud)?;
    let calib = Calibration::read(calib)?;
    let adi = adi_image(&cloud, &calib, &cfg.preprocess)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_image(out, &adi)?;
    write_file(&out.with_extension("ini"), resolved.to_ini())?;
    println!(
        "wrote {}x{} ADI to {}",
        adi.width(),
        adi.height(),
        out.display()
    );
    Ok(())
}

struct Trained {
    net: SkipcrossNet<f32>,
    history: skipcross::train::TrainHistory,
}

/// Trains a freshly initialized network and leaves the best weights in it.
fn train_net(
    cfg: &RunConfig,
    topology: &FusionTopology,
    train: &[Sample],
    val: &[Sample],
) -> Result<Trained> {
    let net = SkipcrossNet::<f32>::build(topology, cfg.seed)?;
    let outcome = fit(&net, train, val, &cfg.train, |_, _| {
        ControlFlow::Continue(())
    })?;
    if let Some((_, best)) = &outcome.best {
        net.restore(best)?;
    }
    Ok(Trained {
        net,
        history: outcome.history,
    })
}

pub fn train(cfg: &RunConfig, resolved: &Resolved) -> Result<()> {
    let train = train_set(cfg)?;
    let val = val_set(cfg)?;
    write_config(&cfg.out, resolved)?;
    let net = SkipcrossNet::<f32>::build(&cfg.topology, cfg.seed)?;
    log::info!(
        "training {} ({} parameters) on {} samples, validating on {}",
        cfg.topology.strategy,
        net.param_count(),
        train.len(),
        val.len()
    );
    let outcome = fit(&net, &train, &val, &cfg.train, |_, _| {
        ControlFlow::Continue(())
    })?;
    save_weights(&net, &cfg.out.join("last.skxc"))?;
    if let Some((epoch, best)) = &outcome.best {
        net.restore(best)?;
        save_weights(&net, &cfg.out.join("best.skxc"))?;
        let top = &outcome.history.epochs[epoch - 1];
        println!(
            "best epoch {epoch}: val MaxF {:.4} acc {:.4}",
            top.val_maxf, top.val_acc
        );
    }
    write_file(&cfg.out.join("history.csv"), outcome.history.to_csv())?;
    println!("wrote checkpoints and history to {}", cfg.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ImageMetrics {
    id: String,
    maxf: f64,
    ap: f64,
    pre: f64,
    rec: f64,
    f1: f64,
    iou: f64,
    acc: f64,
}

#[derive(Serialize)]
struct EvalReport {
    ap_convention: &'static str,
    checkpoint: String,
    strategy: Strategy,
    images: usize,
    metrics: MetricsReport,
    per_image: Vec<ImageMetrics>,
}

fn sweep_of(
    confidences: &[Vec<f32>],
    samples: &[Sample],
) -> Result<(ThresholdSweep, Vec<ThresholdSweep>)> {
    let mut total = ThresholdSweep::new(DEFAULT_LEVELS)?;
    let mut each = Vec::with_capacity(samples.len());
    for (conf, s) in confidences.iter().zip(samples) {
        let sw = ThresholdSweep::from_map(conf, s.mask.data(), DEFAULT_LEVELS)?;
        total.merge(&sw);
        each.push(sw);
    }
    Ok((total, each))
}

pub fn eval(cfg: &RunConfig, resolved: &Resolved, checkpoint: &Path) -> Result<()> {
    let net: SkipcrossNet<f32> = load_weights(checkpoint)?;
    let samples = match (&cfg.test_dir, &cfg.val_dir) {
        (Some(dir), _) | (None, Some(dir)) => load_split(cfg, Some(dir), 0, 0)?,
        (None, None) => val_set(cfg)?,
    };
    let confidences = predict_set(&net, &samples, cfg.train.batch_size)?;
    let (total, each) = sweep_of(&confidences, &samples)?;
    let metrics = total.report();
    let at = total.best_index();
    let per_image = samples
        .iter()
        .zip(&each)
        .map(|(s, sw)| {
            let c = &sw.counts()[at];
            ImageMetrics {
                id: s.id.clone(),
                maxf: sw.maxf().0,
                ap: sw.average_precision(),
                pre: c.precision(),
                rec: c.recall(),
                f1: fbeta(c, 1.0),
                iou: c.iou(),
                acc: c.accuracy(),
            }
        })
        .collect();
    let report = EvalReport {
        ap_convention: AP_CONVENTION,
        checkpoint: checkpoint.display().to_string(),
        strategy: net.topology().strategy,
        images: samples.len(),
        metrics,
        per_image,
    };
    write_config(&cfg.out, resolved)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&cfg.out.join("eval.json"), json + "\n")?;
    let m = &report.metrics;
    println!(
        "{} images: MaxF {:.2} AP {:.2} PRE {:.2} REC {:.2} FPR {:.2} FNR {:.2} MIOU {:.2}",
        report.images,
        100.0 * m.maxf,
        100.0 * m.ap,
        100.0 * m.pre,
        100.0 * m.rec,
        100.0 * m.fpr,
        100.0 * m.fnr,
        100.0 * miou(&m.counts)
    );
    Ok(())
}

/// `root/image_2/<stem>.ppm` to `(root, stem)`.
fn split_sample_path(image: &Path) -> Result<(PathBuf, String)> {
    let stem = image.file_stem().and_then(|s| s.to_str());
    let root = image.parent().and_then(Path::parent);
    match (root, stem) {
        (Some(root), Some(stem)) => Ok((root.to_path_buf(), stem.to_string())),
        _ => Err(CliError::Usage(format!(
            "--sample must point to <root>/image_2/<stem>.ppm, got {}",
            image.display()
        ))),
    }
}

pub fn predict(
    cfg: &RunConfig,
    resolved: &Resolved,
    checkpoint: &Path,
    image: &Path,
) -> Result<()> {
    let net: SkipcrossNet<f32> = load_weights(checkpoint)?;
    let (root, stem) = split_sample_path(image)?;
    let rgb = read_image(image)?;
    if rgb.channels() != 3 {
        return Err(CliError::Data(format!(
            "{} is not a color image",
            image.display()
        )));
    }
    let cloud = PointCloud::read(&root.join("velodyne").join(format!("{stem}.bin")))?;
    let calib = Calibration::read(&root.join("calib").join(format!("{stem}.txt")))?;
    let blank = Mask::zeros(rgb.height(), rgb.width());
    let sample = preprocess(&stem, &rgb, &blank, &cloud, &calib, &cfg.preprocess)?;
    let conf = predict_set(&net, std::slice::from_ref(&sample), 1)?.remove(0);
    let (h, w) = (sample.height(), sample.width());
    let mut mask = Mask::zeros(h, w);
    for (i, &c) in conf.iter().enumerate() {
        mask.set(i / w, i % w, c > cfg.threshold);
    }
    let confidence = Image::new(1, h, w, conf).expect("extents match");
    write_config(&cfg.out, resolved)?;
    write_image(&cfg.out.join(format!("{stem}_confidence.pgm")), &confidence)?;
    write_mask(&cfg.out.join(format!("{stem}_mask.pgm")), &mask)?;
    println!(
        "{stem}: {} of {} pixels above {} written to {}",
        mask.count(),
        h * w,
        cfg.threshold,
        cfg.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    rank: usize,
    strategy: Strategy,
    parameters: usize,
    epochs: usize,
    maxf: f64,
    ap: f64,
    pre: f64,
    rec: f64,
    fpr: f64,
    fnr: f64,
}

/// Header and rows of the ranked strategy table, values in percent.
fn compare_table(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:<4} {:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "rank", "strategy", "MaxF", "AP", "PRE", "REC", "FPR", "FNR"
    );
    for r in rows {
        writeln!(
            s,
            "{:<4} {:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.rank,
            r.strategy.name(),
            100.0 * r.maxf,
            100.0 * r.ap,
            100.0 * r.pre,
            100.0 * r.rec,
            100.0 * r.fpr,
            100.0 * r.fnr
        )
        .unwrap();
    }
    s
}

pub fn compare(cfg: &RunConfig, resolved: &Resolved) -> Result<()> {
    let train = train_set(cfg)?;
    let val = val_set(cfg)?;
    write_config(&cfg.out, resolved)?;
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        let topology = FusionTopology::new(
            cfg.topology.stage_blocks.clone(),
            cfg.topology.stage_channels.clone(),
            strategy,
        );
        log::info!("training {strategy}");
        let t = train_net(cfg, &topology, &train, &val)?;
        let m = validate(&t.net, &val, cfg.train.batch_size)?.sweep.report();
        rows.push(CompareRow {
            rank: 0,
            strategy,
            parameters: t.net.param_count(),
            epochs: t.history.epochs.len(),
            maxf: m.maxf,
            ap: m.ap,
            pre: m.pre,
            rec: m.rec,
            fpr: m.fpr,
            fnr: m.fnr,
        });
    }
    rows.sort_by(|a, b| b.maxf.total_cmp(&a.maxf));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let table = compare_table(&rows);
    print!("{table}");
    write_file(&cfg.out.join("compare.txt"), &table)?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_file(&cfg.out.join("compare.json"), json + "\n")
}

fn print_entry(e: &SuiteEntry) {
    println!(
        "{:<28} max rel error {:.3e}  checked {:>4}  kinks {:>3}  {}",
        e.name,
        e.report.max_rel_error,
        e.report.checked,
        e.report.kinks,
        if e.passed() { "ok" } else { "FAIL" }
    );
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let mut entries = op_suite(cfg.seed).map_err(|e| CliError::Numerical(e.to_string()))?;
    entries.push(network_check(&tiny_topology(), 32, 32, 5, cfg.seed)?);
    entries.iter().for_each(print_entry);
    let worst = entries
        .iter()
        .map(|e| e.report.max_rel_error)
        .fold(0.0, f64::max);
    println!("worst relative error: {worst:.3e}");
    match entries.iter().find(|e| !e.passed()) {
        Some(e) => Err(CliError::Numerical(format!(
            "gradient check failed for {}",
            e.name
        ))),
        None => Ok(()),
    }
}
