//! Command-line workflow: phantom generation, preprocessing, training,
//! prediction, evaluation, and the region-vs-patch benchmark.
//!
//! Exit codes: 0 success, 2 usage or configuration problems, 3 numeric
//! failure (non-finite loss).

use crate::error::Error;
use crate::experiment::{full_geometry_voxel_counts, run_experiment, ExperimentConfig};
use crate::manifest::RunManifest;
use crate::metrics::{
    evaluate_pair, records_to_csv, summarize, wilcoxon_signed_rank, EvalRecord,
};
use crate::nifti::{read_label_map, read_volume, write_label_map, write_volume, Datatype};
use crate::phantom::{generate_with_mask, PhantomSpec};
use crate::preprocess::normalize_wm_detailed;
use crate::regions::{fuse_regions, RegionConfig, RegionName, NUM_REGION_CLASSES};
use crate::tiling::plan_patches;
use crate::train::{
    parallel_map, predict_full_patch_based, predict_sample, train_model, TrainSample,
    TrainSchedule,
};
use crate::unet::{UNetConfig, UNetModel};
use crate::volume::{LabelMap, Volume};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "regionseg",
    version,
    about = "Region-based multi-U-Net deep-brain segmentation on volumetric images"
)]
struct Cli {
    /// Master seed; every randomized stage derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker cap for concurrent stages (default: REGIONSEG_THREADS or 3).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhantomScale {
    Desk,
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PredictMode {
    Region,
    Patch,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainTarget {
    Brainstem,
    Ventricles,
    Striatum,
    Whole,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom subjects (image, labels, brain mask).
    Phantom {
        /// Built-in geometry to use when no spec file is given.
        #[arg(long, value_enum, default_value = "desk")]
        scale: PhantomScale,
        /// Phantom spec JSON (overrides --scale).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuzzy c-means intensity normalization.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Brain mask; voxels != 0 are clustered. Defaults to input != 0.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
    },
    /// Train one region model or the whole-volume patch model.
    Train {
        #[arg(long, value_enum)]
        region: TrainTarget,
        /// Training config JSON (schedule, ladder, dataset manifest).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a volume with trained checkpoints.
    Predict {
        #[arg(long, value_enum)]
        mode: PredictMode,
        /// Directory holding brainstem/ventricles/striatum.ckpt (region mode)
        /// or whole.ckpt (patch mode).
        #[arg(long)]
        checkpoints: PathBuf,
        /// Region configuration JSON (region mode; defaults to desk layout).
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Patch extent, comma separated (e.g. 80,80,80).
        #[arg(long, value_delimiter = ',', default_values_t = [80, 80, 80])]
        patch_shape: Vec<usize>,
        /// Patch stride, comma separated (e.g. 40,40,40).
        #[arg(long, value_delimiter = ',', default_values_t = [40, 40, 40])]
        stride: Vec<usize>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare predictions against ground truth (matched filenames).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Second prediction directory for a paired Wilcoxon comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train matched region and patch pipelines on phantoms and report
    /// wall-clock and voxel-throughput ratios.
    Benchmark {
        #[arg(long, default_value_t = 20)]
        train_count: usize,
        #[arg(long, default_value_t = 5)]
        test_count: usize,
        #[arg(long, default_value_t = 4)]
        pretrain_epochs: usize,
        #[arg(long, default_value_t = 8)]
        train_epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point: parse, dispatch, map errors onto exit codes.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let workers = cli
        .threads
        .or_else(|| {
            std::env::var("REGIONSEG_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(3)
        .max(1);
    match dispatch(cli, workers) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli, workers: usize) -> crate::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Phantom {
            scale,
            spec,
            count,
            out,
        } => cmd_phantom(scale, spec.as_deref(), count, &out, seed),
        Command::Preprocess {
            input,
            mask,
            output,
            clusters,
        } => cmd_preprocess(&input, mask.as_deref(), &output, clusters, seed),
        Command::Train {
            region,
            config,
            out,
        } => cmd_train(region, &config, &out, seed),
        Command::Predict {
            mode,
            checkpoints,
            regions,
            patch_shape,
            stride,
            input,
            output,
        } => cmd_predict(
            mode,
            &checkpoints,
            regions.as_deref(),
            &patch_shape,
            &stride,
            &input,
            &output,
            seed,
            workers,
        ),
        Command::Evaluate {
            pred,
            truth,
            compare,
            out,
        } => cmd_evaluate(&pred, &truth, compare.as_deref(), &out, seed),
        Command::Benchmark {
            train_count,
            test_count,
            pretrain_epochs,
            train_epochs,
            out,
        } => cmd_benchmark(
            train_count,
            test_count,
            pretrain_epochs,
            train_epochs,
            &out,
            seed,
            workers,
        ),
    }
}

fn cmd_phantom(
    scale: PhantomScale,
    spec_path: Option<&Path>,
    count: usize,
    out: &Path,
    seed: u64,
) -> crate::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let base = match spec_path {
        Some(p) => PhantomSpec::from_json(p)?,
        None => match scale {
            PhantomScale::Desk => PhantomSpec::desk_scale(seed),
            PhantomScale::Full => PhantomSpec::full_scale(seed),
        },
    };
    let mut manifest = RunManifest::new("phantom", seed);
    manifest.arg("count", count);
    for i in 0..count {
        let spec = base.clone().with_seed(seed + i as u64);
        let (image, labels, mask) = generate_with_mask(&spec)?;
        let id = format!("phantom{:03}", i);
        let image_path = out.join(format!("{id}_image.nii"));
        let labels_path = out.join(format!("{id}_labels.nii"));
        let mask_path = out.join(format!("{id}_mask.nii"));
        write_volume(&image, Datatype::Float32, &image_path)?;
        write_label_map(&labels, &labels_path)?;
        write_label_map(&mask, &mask_path)?;
        manifest.output(&image_path).output(&labels_path).output(&mask_path);
    }
    base.to_json(&out.join("phantom_spec.json"))?;
    manifest.write(&out.join("phantom.manifest.json"), start.elapsed().as_secs_f64())?;
    println!("wrote {count} phantom subject(s) to {}", out.display());
    Ok(())
}

fn mask_from_nonzero(v: &Volume) -> LabelMap {
    let labels = v.voxels().iter().map(|&x| (x != 0.0) as u8).collect();
    LabelMap::new(v.shape(), v.spacing(), v.origin(), labels).expect("same geometry")
}

fn cmd_preprocess(
    input: &Path,
    mask: Option<&Path>,
    output: &Path,
    clusters: usize,
    seed: u64,
) -> crate::Result<()> {
    let start = Instant::now();
    let v = read_volume(input)?;
    let mask_map = match mask {
        Some(p) => read_label_map(p)?,
        None => mask_from_nonzero(&v),
    };
    let (normalized, summary) = normalize_wm_detailed(&v, &mask_map, clusters)?;
    write_volume(&normalized, Datatype::Float32, output)?;
    let mut manifest = RunManifest::new("preprocess", seed);
    manifest.arg("clusters", clusters);
    manifest.input(input).output(output);
    manifest.write(
        &output.with_extension("manifest.json"),
        start.elapsed().as_secs_f64(),
    )?;
    println!(
        "tissue centroids: {:?} (converged in {} iterations)",
        summary
            .centroids
            .iter()
            .map(|c| (c * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>(),
        summary.iterations
    );
    println!("scale factor (bright mode -> 1.0): {:.6}", summary.scale);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SamplePaths {
    image: PathBuf,
    labels: PathBuf,
}

/// On-disk training configuration: schedule, model ladder, dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainConfigFile {
    schedule: TrainSchedule,
    channels: Vec<usize>,
    /// Region layout; desk-scale layout when omitted.
    #[serde(default)]
    regions: Option<RegionConfig>,
    /// Patch geometry for the whole-volume model.
    #[serde(default)]
    patch_shape: Option<[usize; 3]>,
    #[serde(default)]
    patch_stride: Option<[usize; 3]>,
    dataset: Vec<SamplePaths>,
    #[serde(default)]
    validation: Vec<SamplePaths>,
}

fn load_pairs(paths: &[SamplePaths]) -> crate::Result<Vec<(Volume, LabelMap)>> {
    paths
        .iter()
        .map(|p| Ok((read_volume(&p.image)?, read_label_map(&p.labels)?)))
        .collect()
}

fn cmd_train(target: TrainTarget, config: &Path, out: &Path, seed: u64) -> crate::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let text = std::fs::read_to_string(config)?;
    let mut cfg: TrainConfigFile = serde_json::from_str(&text)?;
    cfg.schedule.seed = seed;
    cfg.schedule.validate()?;
    if cfg.dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let regions = cfg.regions.clone().unwrap_or_else(RegionConfig::desk_scale);
    regions.validate()?;

    let full_train = load_pairs(&cfg.dataset)?;
    let full_val = load_pairs(&cfg.validation)?;

    let (samples, val_samples, num_classes, label) = match target {
        TrainTarget::Whole => {
            let patch_shape = cfg.patch_shape.unwrap_or([32, 32, 32]);
            let stride = cfg.patch_stride.unwrap_or([16, 16, 16]);
            let tile = |pairs: &[(Volume, LabelMap)]| -> crate::Result<Vec<TrainSample>> {
                let mut out = Vec::new();
                for (image, labels) in pairs {
                    let plan = plan_patches(image.shape(), patch_shape, stride)?;
                    let (padded_labels, _) = labels.pad_to(plan.padded_shape, 0)?;
                    for (img, b) in crate::tiling::extract(image, &plan, 0.0)?
                        .into_iter()
                        .zip(&plan.boxes)
                    {
                        out.push(TrainSample {
                            image: img,
                            labels: padded_labels.crop(b, 0),
                        });
                    }
                }
                Ok(out)
            };
            (
                tile(&full_train)?,
                tile(&full_val)?,
                crate::regions::NUM_GLOBAL_CLASSES,
                "whole",
            )
        }
        other => {
            let name = match other {
                TrainTarget::Brainstem => RegionName::Brainstem,
                TrainTarget::Ventricles => RegionName::Ventricles,
                TrainTarget::Striatum => RegionName::Striatum,
                TrainTarget::Whole => unreachable!(),
            };
            let spec = regions
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("no region named {}", name.as_str())))?
                .clone();
            let crop_pairs = |pairs: &[(Volume, LabelMap)]| -> Vec<TrainSample> {
                pairs
                    .iter()
                    .map(|(image, labels)| TrainSample {
                        image: image.crop(&spec.crop, 0.0),
                        labels: crate::regions::remap_to_local(labels, &spec),
                    })
                    .collect()
            };
            (
                crop_pairs(&full_train),
                crop_pairs(&full_val),
                NUM_REGION_CLASSES,
                name.as_str(),
            )
        }
    };

    let mut model = UNetModel::build(UNetConfig {
        resolution_steps: cfg.channels.len(),
        channels: cfg.channels.clone(),
        num_classes,
        input_channels: 1,
        seed,
    })?;
    let val = (!val_samples.is_empty()).then_some(val_samples.as_slice());
    let outcome = train_model(&mut model, &samples, &cfg.schedule, val)?;

    let final_path = out.join(format!("{label}.ckpt"));
    model.save(&final_path)?;
    let history_path = out.join(format!("{label}_history.csv"));
    std::fs::write(&history_path, outcome.history.to_csv())?;
    let mut manifest = RunManifest::new("train", seed);
    manifest.arg("target", label);
    manifest.input(config).output(&final_path).output(&history_path);
    if let Some(best) = &outcome.best {
        let best_path = out.join(format!("{label}_best.ckpt"));
        std::fs::write(&best_path, &best.bytes)?;
        manifest.output(&best_path);
        println!("best validation DSC {:.4}", best.val_dsc);
    }
    manifest.write(
        &out.join(format!("{label}.manifest.json")),
        start.elapsed().as_secs_f64(),
    )?;
    println!(
        "trained {label}: {} epochs, final loss {:.6}, {:.1}s",
        outcome.history.records.len(),
        outcome.history.final_loss().unwrap_or(f64::NAN),
        outcome.history.total_seconds()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    mode: PredictMode,
    checkpoints: &Path,
    regions: Option<&Path>,
    patch_shape: &[usize],
    stride: &[usize],
    input: &Path,
    output: &Path,
    seed: u64,
    workers: usize,
) -> crate::Result<()> {
    if patch_shape.len() != 3 || stride.len() != 3 {
        return Err(Error::InvalidConfig(
            "--patch-shape and --stride need exactly three components".into(),
        ));
    }
    let start = Instant::now();
    let v = read_volume(input)?;
    let mut manifest = RunManifest::new("predict", seed);
    manifest.input(input);

    let labels = match mode {
        PredictMode::Region => {
            let cfg = match regions {
                Some(p) => RegionConfig::from_json(p)?,
                None => RegionConfig::desk_scale(),
            };
            cfg.validate()?;
            let mut models = Vec::new();
            for spec in &cfg.regions {
                let path = checkpoints.join(format!("{}.ckpt", spec.name.as_str()));
                let model = UNetModel::load(&path)?;
                if model.config.num_classes != NUM_REGION_CLASSES {
                    return Err(Error::BadConfig(format!(
                        "{} holds a {}-class model; region models have {NUM_REGION_CLASSES}",
                        path.display(),
                        model.config.num_classes
                    )));
                }
                manifest.input(&path);
                models.push(model);
            }
            manifest.arg("mode", "region");
            // The three region inferences run concurrently; report each crop's
            // wall-clock.
            let timed: Vec<crate::Result<(LabelMap, f64)>> =
                parallel_map(cfg.regions.len(), workers, |i| {
                    let t0 = Instant::now();
                    let crop = v.crop(&cfg.regions[i].crop, 0.0);
                    let pred = predict_sample(&models[i], &crop)?;
                    Ok((pred, t0.elapsed().as_secs_f64()))
                });
            let mut preds = Vec::new();
            for (result, spec) in timed.into_iter().zip(&cfg.regions) {
                let (pred, secs) = result?;
                println!("region {:<11} inferred in {secs:.2}s", spec.name.as_str());
                preds.push((pred, spec));
            }
            fuse_regions(&preds, v.shape(), v.spacing(), v.origin())?
        }
        PredictMode::Patch => {
            let path = checkpoints.join("whole.ckpt");
            let model = UNetModel::load(&path)?;
            manifest.input(&path);
            manifest.arg("mode", "patch");
            let shape = [patch_shape[0], patch_shape[1], patch_shape[2]];
            let str3 = [stride[0], stride[1], stride[2]];
            let plan = plan_patches(v.shape(), shape, str3)?;
            println!(
                "tiling {:?} into {} patches of {:?} (stride {:?})",
                v.shape(),
                plan.num_patches(),
                shape,
                str3
            );
            predict_full_patch_based(&model, &v, shape, str3, workers)?
        }
    };

    write_label_map(&labels, output)?;
    manifest.output(output);
    manifest.write(
        &output.with_extension("manifest.json"),
        start.elapsed().as_secs_f64(),
    )?;
    println!(
        "segmentation written to {} ({:.2}s total)",
        output.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn nii_stems(dir: &Path) -> crate::Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "nii") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                stems.push(name.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn evaluate_dir(
    pred: &Path,
    truth: &Path,
    names: &[String],
) -> crate::Result<Vec<EvalRecord>> {
    let labels: Vec<u8> = (1..=12).collect();
    names
        .iter()
        .map(|name| {
            let p = read_label_map(&pred.join(name))?;
            let t = read_label_map(&truth.join(name))?;
            evaluate_pair(name.trim_end_matches(".nii"), &p, &t, &labels)
        })
        .collect()
}

fn cmd_evaluate(
    pred: &Path,
    truth: &Path,
    compare: Option<&Path>,
    out: &Path,
    seed: u64,
) -> crate::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let pred_names = nii_stems(pred)?;
    let truth_names = nii_stems(truth)?;
    if pred_names.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no .nii predictions in {}",
            pred.display()
        )));
    }
    let unmatched: Vec<&String> = pred_names
        .iter()
        .filter(|n| !truth_names.contains(n))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "predictions without matching truth files: {unmatched:?}"
        )));
    }

    let records = evaluate_dir(pred, truth, &pred_names)?;
    let table = summarize(&records);
    std::fs::write(out.join("records.csv"), records_to_csv(&records))?;
    std::fs::write(out.join("summary.csv"), table.to_csv())?;
    print!("{}", table.to_text());

    let mut manifest = RunManifest::new("evaluate", seed);
    manifest.input(pred).input(truth);
    manifest
        .output(&out.join("records.csv"))
        .output(&out.join("summary.csv"));

    if let Some(other) = compare {
        let other_names = nii_stems(other)?;
        if other_names != pred_names {
            return Err(Error::InvalidConfig(
                "comparison directory does not hold the same prediction files".into(),
            ));
        }
        let other_records = evaluate_dir(other, truth, &pred_names)?;
        let flat = |rs: &[EvalRecord]| -> Vec<f64> {
            rs.iter()
                .flat_map(|r| r.structures.iter().map(|s| s.dsc))
                .collect()
        };
        let a = flat(&records);
        let b = flat(&other_records);
        match wilcoxon_signed_rank(&a, &b) {
            Ok(w) => println!(
                "Wilcoxon signed-rank over {} subject-structure pairs: W = {}, p = {:.3e} ({})",
                w.n,
                w.w,
                w.p,
                if w.exact { "exact" } else { "normal approx." }
            ),
            Err(Error::AllZeroDifferences) => {
                println!("Wilcoxon signed-rank: the two prediction sets are identical")
            }
            Err(e) => return Err(e),
        }
        std::fs::write(
            out.join("compare_records.csv"),
            records_to_csv(&other_records),
        )?;
        manifest.input(other);
    }
    manifest.write(&out.join("evaluate.manifest.json"), start.elapsed().as_secs_f64())?;
    Ok(())
}

fn cmd_benchmark(
    train_count: usize,
    test_count: usize,
    pretrain_epochs: usize,
    train_epochs: usize,
    out: &Path,
    seed: u64,
    workers: usize,
) -> crate::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut cfg = ExperimentConfig::desk(seed);
    cfg.train_count = train_count;
    cfg.test_count = test_count;
    cfg.schedule.pretrain_epochs = pretrain_epochs;
    cfg.schedule.train_epochs = train_epochs;
    cfg.workers = workers;

    let result = run_experiment(&cfg)?;
    let (full_patch, full_region) = full_geometry_voxel_counts()?;

    let mut report = result.report();
    report.push_str(&format!(
        "full-size geometry: {full_patch} patch voxels vs {full_region} region voxels per subject ({:.2}x)\n",
        full_patch as f64 / full_region as f64
    ));
    print!("{report}");
    std::fs::write(out.join("benchmark.txt"), &report)?;
    std::fs::write(out.join("benchmark.csv"), result.to_csv())?;
    for r in &result.regions {
        std::fs::write(
            out.join(format!("history_{}.csv", r.name)),
            r.history.to_csv(),
        )?;
    }
    std::fs::write(out.join("history_whole.csv"), result.patch_history.to_csv())?;

    let mut manifest = RunManifest::new("benchmark", seed);
    manifest
        .arg("train_count", train_count)
        .arg("test_count", test_count)
        .arg("pretrain_epochs", pretrain_epochs)
        .arg("train_epochs", train_epochs);
    manifest.output(&out.join("benchmark.txt"));
    manifest.write(&out.join("benchmark.manifest.json"), start.elapsed().as_secs_f64())?;
    Ok(())
}
