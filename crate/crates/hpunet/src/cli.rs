//! Command-line surface: dataset generation, training, sampling,
//! reconstruction, evaluation, sample clustering, and artifact export.
//!
//! Every run prints its resolved configuration (or effective options) so the
//! emitted artifacts are self-describing. Exit codes: 0 on success, 1 on
//! runtime failures, 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::backend::rng::{RngState, Stream};
use crate::backend::tensor::Tensor;
use crate::clustering::{
    greedy_hamming_cluster, postprocess, ClusterError, Fallback, SampleStack, DEFAULT_EROSION_N,
    DEFAULT_MAJORITY_M,
};
use crate::io::archive::{self, ArchiveError, Record};
use crate::io::config::{self, ConfigError};
use crate::io::panels::{self, PanelError};
use crate::metrics::{
    adapted_rand_error, ged2, hungarian_matched_iou, iou_fg, AbsencePolicy, MetricError,
    SampleSet,
};
use crate::model::{
    predict_labels, reconstruct_labels, LatentDirective, LatentPlan, ModelConfig, ModelError,
};
use crate::objectives::ObjectiveError;
use crate::synthdata::{
    load_dataset, one_hot, save_dataset, DataError, DatasetManifest, TaskKind, TaskParams,
    DEFAULT_JITTER,
};
use crate::trainer::{load_checkpoint, run_training, Checkpoint, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    /// Semantic usage problems discovered after flag parsing (exit code 2).
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hpunet",
    about = "Hierarchical probabilistic U-Net: synthetic tasks, training, multi-hypothesis sampling, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest + tensor archive).
    Generate {
        /// Task: lesions | instances | extrapolation.
        #[arg(long)]
        task: String,
        /// Output directory for manifest.txt and data.hput.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side (defaults: 32 for lesions, 64 otherwise).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model from a config file on a generated dataset.
    Train {
        /// key = value configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (from `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for curves and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw segmentation hypotheses from a trained model's prior.
    Sample {
        /// Run directory holding checkpoint_final.hput.
        #[arg(long)]
        run: PathBuf,
        /// Archive holding the input image (record `image`, or
        /// `sample_{index:05}/image` from a dataset archive).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        num_samples: usize,
        /// Per-latent-scale mode, global to local: `sample` or `mean`,
        /// comma-separated; a single entry applies to all scales.
        #[arg(long, default_value = "sample")]
        scales: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for label archives and panels.
        #[arg(long)]
        out: PathBuf,
        /// Sample index when reading from a dataset archive.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Posterior-mean reconstruction of a given target segmentation.
    Reconstruct {
        #[arg(long)]
        run: PathBuf,
        /// Archive holding the input image (as for `sample`).
        #[arg(long)]
        input: PathBuf,
        /// Archive holding the target labels (record `target`, or
        /// `sample_{index:05}/target_00`).
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Compute distribution metrics of a trained model on a dataset.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of: ged2, hiou, iourec, rand.
        #[arg(long, default_value = "ged2")]
        metrics: String,
        /// Prior samples drawn per image.
        #[arg(long, default_value_t = 16)]
        num_samples: usize,
        /// Bootstrap resamples for the std estimate.
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
    },
    /// Cluster a directory of sampled hypotheses into consensus instances.
    Cluster {
        /// Directory holding samples.hput (from `sample`).
        #[arg(long)]
        samples: PathBuf,
        /// Hamming radius.
        #[arg(long)]
        alpha: usize,
        #[arg(long, default_value_t = DEFAULT_EROSION_N)]
        erosion: usize,
        #[arg(long, default_value_t = DEFAULT_MAJORITY_M)]
        majority: usize,
        /// Repaint fallback: keep | background.
        #[arg(long, default_value = "keep")]
        fallback: String,
        /// Output file: .ppm writes a panel, anything else an archive.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export run artifacts: curves CSV and/or panels for archived tensors.
    Export {
        #[arg(long)]
        run: PathBuf,
        /// Destination for a byte-identical copy of curves.csv.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Directory receiving PPM/PGM panels for every archived map.
        #[arg(long)]
        panels: Option<PathBuf>,
    },
}

/// Runs a parsed command, mapping errors to process exit codes.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            eprintln!("usage error: {message}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate {
            task,
            out,
            count,
            seed,
            size,
        } => cmd_generate(&task, &out, count, seed, size),
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Sample {
            run,
            input,
            num_samples,
            scales,
            seed,
            out,
            index,
        } => cmd_sample(&run, &input, num_samples, &scales, seed, &out, index),
        Command::Reconstruct {
            run,
            input,
            target,
            out,
            index,
        } => cmd_reconstruct(&run, &input, &target, &out, index),
        Command::Evaluate {
            run,
            data,
            metrics,
            num_samples,
            bootstrap,
        } => cmd_evaluate(&run, &data, &metrics, num_samples, bootstrap),
        Command::Cluster {
            samples,
            alpha,
            erosion,
            majority,
            fallback,
            out,
            seed,
        } => cmd_cluster(&samples, alpha, erosion, majority, &fallback, &out, seed),
        Command::Export { run, curves, panels } => cmd_export(&run, curves, panels),
    }
}

fn default_params(task: TaskKind) -> TaskParams {
    match task {
        TaskKind::Lesions => TaskParams::Lesions {
            p_abnormal: 0.5,
            graders: 4,
            jitter: DEFAULT_JITTER.to_vec(),
        },
        TaskKind::Instances => TaskParams::Instances {
            k_lo: 3,
            k_hi: 8,
            class_ids: 5,
        },
        TaskKind::Extrapolation => TaskParams::Extrapolation {
            k_lo: 3,
            k_hi: 8,
            class_ids: 5,
            mask_fraction: 0.25,
        },
    }
}

fn cmd_generate(
    task: &str,
    out: &Path,
    count: usize,
    seed: u64,
    size: Option<usize>,
) -> Result<(), CliError> {
    let task = TaskKind::parse(task).map_err(|e| usage(e.to_string()))?;
    let size = size.unwrap_or(match task {
        TaskKind::Lesions => 32,
        _ => 64,
    });
    let manifest = DatasetManifest {
        task,
        count,
        size,
        seed,
        params: default_params(task),
        archive: "data.hput".into(),
    };
    let samples = manifest.generate()?;
    save_dataset(out, &manifest, &samples)?;
    print!("{}", manifest.to_text());
    println!("# wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(config).map_err(io_err(config))?;
    let (model_cfg, train_cfg) = config::parse_config(&text)?;
    let (manifest, samples) = load_dataset(data)?;
    let resolved = config::resolved_text(&model_cfg, &train_cfg);
    print!("{resolved}");
    let artifacts = run_training(&model_cfg, &train_cfg, &manifest, &samples, out, None)?;
    let config_path = out.join("config.txt");
    fs::write(&config_path, resolved).map_err(io_err(&config_path))?;
    if let Some(last) = artifacts.records.last() {
        println!("# final {last}");
    }
    println!("# curves {}", artifacts.curves_path.display());
    println!("# checkpoint {}", artifacts.checkpoint_path.display());
    Ok(())
}

fn load_run(run: &Path) -> Result<Checkpoint, CliError> {
    Ok(load_checkpoint(&run.join("checkpoint_final.hput"))?)
}

fn print_run_config(model_cfg: &ModelConfig, train_cfg: &TrainConfig) {
    print!("{}", config::resolved_text(model_cfg, train_cfg));
}

/// Reads an `[C, H, W]` f32 image from an archive: a bare `image` record or
/// the dataset record `sample_{index:05}/image`.
fn load_image_record(path: &Path, index: usize) -> Result<Tensor<f32>, CliError> {
    let records = archive::archive_read(path)?;
    let names = ["image".to_string(), format!("sample_{index:05}/image")];
    let rec = names
        .iter()
        .find_map(|n| archive::find(&records, n))
        .ok_or_else(|| {
            usage(format!(
                "{}: no record named {:?} or {:?}",
                path.display(),
                names[0],
                names[1]
            ))
        })?;
    let data = rec.as_f32()?;
    let shape = rec.shape();
    if shape.len() != 3 {
        return Err(usage(format!(
            "{}: image record must be [channels, height, width], got {shape:?}",
            path.display()
        )));
    }
    Ok(Tensor::from_vec(&[1, shape[0], shape[1], shape[2]], data.to_vec())
        .expect("shape/product checked by the archive layer"))
}

/// Reads an `[H, W]` i32 label map: a bare `target` record or the dataset
/// record `sample_{index:05}/target_00`.
fn load_target_record(path: &Path, index: usize) -> Result<Tensor<i32>, CliError> {
    let records = archive::archive_read(path)?;
    let names = ["target".to_string(), format!("sample_{index:05}/target_00")];
    let rec = names
        .iter()
        .find_map(|n| archive::find(&records, n))
        .ok_or_else(|| {
            usage(format!(
                "{}: no record named {:?} or {:?}",
                path.display(),
                names[0],
                names[1]
            ))
        })?;
    let data = rec.as_i32()?;
    let shape = rec.shape();
    if shape.len() != 2 {
        return Err(usage(format!(
            "{}: target record must be [height, width], got {shape:?}",
            path.display()
        )));
    }
    Ok(Tensor::from_vec(&shape, data.to_vec()).expect("shape/product checked"))
}

/// Parses the per-scale `sample`/`mean` list (one entry broadcasts).
fn parse_scales(scales: &str, model_cfg: &ModelConfig) -> Result<LatentPlan<f32>, CliError> {
    let entries: Vec<&str> = scales.split(',').map(str::trim).collect();
    let mut modes = Vec::with_capacity(entries.len());
    for entry in &entries {
        match *entry {
            "sample" => modes.push(LatentDirective::SamplePrior),
            "mean" => modes.push(LatentDirective::PriorMean),
            other => return Err(usage(format!("--scales entries are sample|mean, got {other:?}"))),
        }
    }
    let enabled = model_cfg.enabled_latents().len();
    let directives = if modes.len() == 1 {
        vec![modes[0].clone(); enabled]
    } else if modes.len() == enabled {
        modes
    } else {
        return Err(usage(format!(
            "--scales has {} entries, model has {} enabled latent scales",
            modes.len(),
            enabled
        )));
    };
    Ok(LatentPlan { directives })
}

fn labels_u8(labels: &[i32]) -> Vec<u8> {
    labels.iter().map(|&v| v.clamp(0, 255) as u8).collect()
}

fn squeeze_labels(t: Tensor<i32>) -> Tensor<i32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    Tensor::from_vec(&[h, w], t.into_data()).expect("[1, h, w] squeezes to [h, w]")
}

fn write_label_panel(path: &Path, labels: &Tensor<i32>) -> Result<(), CliError> {
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    panels::write_ppm_labels(path, w, h, &labels_u8(labels.data()))?;
    Ok(())
}

fn cmd_sample(
    run: &Path,
    input: &Path,
    num_samples: usize,
    scales: &str,
    seed: u64,
    out: &Path,
    index: usize,
) -> Result<(), CliError> {
    let ckpt = load_run(run)?;
    print_run_config(&ckpt.model_cfg, &ckpt.cfg);
    println!("# sample num_samples={num_samples} scales={scales} seed={seed}");
    let image = load_image_record(input, index)?;
    let plan = parse_scales(scales, &ckpt.model_cfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let (h, w) = (image.shape()[2], image.shape()[3]);
    let mut records = Vec::new();
    for j in 0..num_samples {
        let mut rng = RngState::for_stream(seed, Stream::Sampling, j as u64);
        let labels = squeeze_labels(predict_labels(
            &ckpt.params,
            &ckpt.model_cfg,
            &image,
            &plan,
            &mut rng,
        )?);
        write_label_panel(&out.join(format!("sample_{j:02}.ppm")), &labels)?;
        records.push(Record::i32(
            format!("sample_{j:02}/labels"),
            vec![h as u32, w as u32],
            labels.into_data(),
        )?);
    }
    archive::archive_write(&out.join("samples.hput"), &records)?;
    let gray = panels::gray_from_unit(&image.data()[0..h * w]);
    panels::write_pgm(&out.join("input.pgm"), w, h, &gray)?;
    println!("# wrote {num_samples} samples to {}", out.display());
    Ok(())
}

fn cmd_reconstruct(
    run: &Path,
    input: &Path,
    target: &Path,
    out: &Path,
    index: usize,
) -> Result<(), CliError> {
    let ckpt = load_run(run)?;
    print_run_config(&ckpt.model_cfg, &ckpt.cfg);
    let image = load_image_record(input, index)?;
    let target = load_target_record(target, index)?;
    let (h, w) = (target.shape()[0], target.shape()[1]);
    if image.shape()[2] != h || image.shape()[3] != w {
        return Err(usage(format!(
            "image is {}x{} but target is {h}x{w}",
            image.shape()[2],
            image.shape()[3]
        )));
    }
    let classes = ckpt.model_cfg.num_classes;
    let oh = one_hot(&target, classes);
    let oh = Tensor::from_vec(&[1, classes, h, w], oh.into_data()).expect("one-hot shape");
    let labels = squeeze_labels(reconstruct_labels(&ckpt.params, &ckpt.model_cfg, &image, &oh)?);

    fs::create_dir_all(out).map_err(io_err(out))?;
    write_label_panel(&out.join("reconstruction.ppm"), &labels)?;
    write_label_panel(&out.join("target.ppm"), &target)?;
    let gray = panels::gray_from_unit(&image.data()[0..h * w]);
    panels::write_pgm(&out.join("input.pgm"), w, h, &gray)?;
    let records = vec![
        Record::i32("labels", vec![h as u32, w as u32], labels.data().to_vec())?,
        Record::i32("target", vec![h as u32, w as u32], target.data().to_vec())?,
    ];
    archive::archive_write(&out.join("reconstruction.hput"), &records)?;
    let matches = labels
        .data()
        .iter()
        .zip(target.data())
        .filter(|(a, b)| a == b)
        .count();
    println!("# reconstruction pixel accuracy {}", matches as f64 / (h * w) as f64);
    Ok(())
}

fn bootstrap_std(values: &[f64], resamples: usize, rng: &mut RngState) -> f64 {
    if values.len() < 2 || resamples == 0 {
        return 0.0;
    }
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..values.len() {
            sum += values[rng.below(values.len())];
        }
        means.push(sum / values.len() as f64);
    }
    let center = means.iter().sum::<f64>() / means.len() as f64;
    (means.iter().map(|m| (m - center).powi(2)).sum::<f64>() / means.len() as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn cmd_evaluate(
    run: &Path,
    data: &Path,
    metrics: &str,
    num_samples: usize,
    bootstrap: usize,
) -> Result<(), CliError> {
    const KNOWN: [&str; 4] = ["ged2", "hiou", "iourec", "rand"];
    let requested: Vec<String> = metrics.split(',').map(|m| m.trim().to_string()).collect();
    for m in &requested {
        if !KNOWN.contains(&m.as_str()) {
            return Err(usage(format!(
                "unknown metric {m:?} (known: {})",
                KNOWN.join(", ")
            )));
        }
    }
    if num_samples == 0 {
        return Err(usage("--num-samples must be at least 1".to_string()));
    }
    let ckpt = load_run(run)?;
    let (manifest, samples) = load_dataset(data)?;
    let model_cfg = &ckpt.model_cfg;
    if manifest.num_classes() != model_cfg.num_classes
        || manifest.input_channels() != model_cfg.input_channels
    {
        return Err(CliError::Train(TrainError::DataModelMismatch {
            message: format!(
                "dataset is {} classes / {} channels, model expects {} / {}",
                manifest.num_classes(),
                manifest.input_channels(),
                model_cfg.num_classes,
                model_cfg.input_channels
            ),
        }));
    }
    print_run_config(model_cfg, &ckpt.cfg);
    println!("# evaluate metrics={metrics} num_samples={num_samples} bootstrap={bootstrap}");

    let classes: Vec<usize> = (1..model_cfg.num_classes).collect();
    let policy = match manifest.task {
        TaskKind::Lesions => AbsencePolicy::AbsenceIsOne,
        _ => AbsencePolicy::AbsenceExcluded,
    };
    let plan = LatentPlan::sample_all(model_cfg);
    let seed = ckpt.cfg.seed;

    let mut per_metric: Vec<(String, Vec<f64>)> =
        requested.iter().map(|m| (m.clone(), Vec::new())).collect();
    for (i, sample) in samples.iter().enumerate() {
        let shape = sample.image.shape();
        let image =
            Tensor::from_vec(&[1, shape[0], shape[1], shape[2]], sample.image.data().to_vec())
                .expect("image shape");
        let mut rng = RngState::for_stream(seed, Stream::Sampling, i as u64);
        let mut drawn = Vec::with_capacity(num_samples);
        for _ in 0..num_samples {
            drawn.push(squeeze_labels(predict_labels(
                &ckpt.params,
                model_cfg,
                &image,
                &plan,
                &mut rng,
            )?));
        }
        let model_set = SampleSet::new(
            drawn.clone(),
            model_cfg.num_classes,
            classes.clone(),
            policy,
        )?;
        let gt_set = SampleSet::new(
            sample.targets.clone(),
            model_cfg.num_classes,
            classes.clone(),
            policy,
        )?;

        for (name, values) in per_metric.iter_mut() {
            match name.as_str() {
                "ged2" => values.push(ged2(&model_set, &gt_set)?),
                "hiou" => values.push(hungarian_matched_iou(&model_set, &gt_set)?.mean_iou),
                "iourec" => {
                    let mut accum = Vec::new();
                    for target in &sample.targets {
                        let oh = one_hot(target, model_cfg.num_classes);
                        let oh = Tensor::from_vec(
                            &[1, model_cfg.num_classes, shape[1], shape[2]],
                            oh.into_data(),
                        )
                        .expect("one-hot shape");
                        let rec = squeeze_labels(reconstruct_labels(
                            &ckpt.params,
                            model_cfg,
                            &image,
                            &oh,
                        )?);
                        if let Some(v) = iou_fg(&rec, target, &classes, policy, None)? {
                            accum.push(v);
                        }
                    }
                    if !accum.is_empty() {
                        values.push(mean(&accum));
                    }
                }
                "rand" => {
                    let gt = sample.instances.as_ref().ok_or_else(|| {
                        usage("metric `rand` needs instance ground truth (instance tasks only)")
                    })?;
                    let stack = SampleStack::from_samples(&drawn, model_cfg.num_classes)?;
                    let mut crng = RngState::for_stream(seed, Stream::Clustering, i as u64);
                    let raw = greedy_hamming_cluster(&stack, num_samples, 0, &mut crng)?;
                    let cleaned =
                        postprocess(&raw, DEFAULT_EROSION_N, DEFAULT_MAJORITY_M, Fallback::KeepLabel)?;
                    values.push(adapted_rand_error(&cleaned, gt)?);
                }
                _ => unreachable!("validated above"),
            }
        }
    }

    println!("metric,mean,std,images");
    let mut brng = RngState::for_stream(seed, Stream::Evaluation, 0);
    for (name, values) in &per_metric {
        if values.is_empty() {
            println!("{name},nan,nan,0");
            continue;
        }
        let std = bootstrap_std(values, bootstrap, &mut brng);
        println!("{name},{},{},{}", mean(values), std, values.len());
    }
    Ok(())
}

fn cmd_cluster(
    samples_dir: &Path,
    alpha: usize,
    erosion: usize,
    majority: usize,
    fallback: &str,
    out: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let fallback = match fallback {
        "keep" => Fallback::KeepLabel,
        "background" => Fallback::Background,
        other => return Err(usage(format!("--fallback is keep|background, got {other:?}"))),
    };
    println!(
        "# cluster alpha={alpha} erosion={erosion} majority={majority} fallback={fallback:?} seed={seed}"
    );
    let archive_path = samples_dir.join("samples.hput");
    let records = archive::archive_read(&archive_path)?;
    let mut named: Vec<(&str, Tensor<i32>)> = Vec::new();
    for rec in &records {
        if rec.name.ends_with("/labels") {
            let shape = rec.shape();
            if shape.len() == 2 {
                named.push((
                    &rec.name,
                    Tensor::from_vec(&shape, rec.as_i32()?.to_vec()).expect("checked shape"),
                ));
            }
        }
    }
    named.sort_by(|a, b| a.0.cmp(b.0));
    let maps: Vec<Tensor<i32>> = named.into_iter().map(|(_, t)| t).collect();
    if maps.is_empty() {
        return Err(usage(format!(
            "{}: no `*/labels` records to cluster",
            archive_path.display()
        )));
    }
    let num_classes = maps
        .iter()
        .flat_map(|m| m.data().iter())
        .max()
        .map(|&m| (m as usize + 1).max(2))
        .unwrap_or(2);
    let stack = SampleStack::from_samples(&maps, num_classes)?;
    let mut rng = RngState::for_stream(seed, Stream::Clustering, 0);
    let raw = greedy_hamming_cluster(&stack, alpha, 0, &mut rng)?;
    let cleaned = postprocess(&raw, erosion, majority, fallback)?;
    let clusters = cleaned.data().iter().max().map(|&m| m + 1).unwrap_or(0);

    if out.extension().map(|e| e == "ppm").unwrap_or(false) {
        write_label_panel(out, &cleaned)?;
    } else {
        let (h, w) = (cleaned.shape()[0], cleaned.shape()[1]);
        let rec = Record::i32("labels", vec![h as u32, w as u32], cleaned.data().to_vec())?;
        archive::archive_write(out, &[rec])?;
    }
    println!("# {} samples -> {clusters} clusters -> {}", maps.len(), out.display());
    Ok(())
}

fn export_archive_panels(archive_path: &Path, dest: &Path) -> Result<usize, CliError> {
    let stem = archive_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "archive".to_string());
    let records = archive::archive_read(archive_path)?;
    let mut written = 0;
    for rec in &records {
        let shape = rec.shape();
        let flat = rec.name.replace('/', "_");
        if let Ok(labels) = rec.as_i32() {
            if shape.len() == 2 {
                let path = dest.join(format!("{stem}_{flat}.ppm"));
                panels::write_ppm_labels(&path, shape[1], shape[0], &labels_u8(labels))?;
                written += 1;
            }
        } else if let Ok(values) = rec.as_f32() {
            let plane = match shape.len() {
                2 => Some((shape[0], shape[1], values)),
                3 if shape[0] >= 1 => Some((shape[1], shape[2], &values[..shape[1] * shape[2]])),
                _ => None,
            };
            if let Some((h, w, data)) = plane {
                let path = dest.join(format!("{stem}_{flat}.pgm"));
                panels::write_pgm(&path, w, h, &panels::gray_from_unit(data))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

fn cmd_export(
    run: &Path,
    curves: Option<PathBuf>,
    panels_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    if curves.is_none() && panels_dir.is_none() {
        return Err(usage("export needs --curves and/or --panels"));
    }
    println!(
        "# export run={} curves={:?} panels={:?}",
        run.display(),
        curves.as_ref().map(|p| p.display().to_string()),
        panels_dir.as_ref().map(|p| p.display().to_string()),
    );
    if let Some(dest) = curves {
        let src = run.join("curves.csv");
        let bytes = fs::read(&src).map_err(io_err(&src))?;
        fs::write(&dest, bytes).map_err(io_err(&dest))?;
        println!("# curves -> {}", dest.display());
    }
    if let Some(dest) = panels_dir {
        fs::create_dir_all(&dest).map_err(io_err(&dest))?;
        let mut archives: Vec<PathBuf> = fs::read_dir(run)
            .map_err(io_err(run))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "hput").unwrap_or(false))
            .collect();
        archives.sort();
        let mut total = 0;
        for archive_path in &archives {
            // Checkpoints hold parameters, not maps; panel export skips them.
            if archive_path
                .file_name()
                .map(|n| n.to_string_lossy().starts_with("checkpoint"))
                .unwrap_or(false)
            {
                continue;
            }
            total += export_archive_panels(archive_path, &dest)?;
        }
        println!("# {total} panels -> {}", dest.display());
    }
    Ok(())
}
