//! The desk-scale phantom experiment: train the region pipeline and the
//! matched patch baseline on the same synthetic cohort, evaluate both on
//! held-out phantoms, and account for wall-clock and voxel throughput.
//!
//! This is the harness behind the `benchmark` command; it also backs the
//! end-to-end accuracy and training-cost comparisons in the acceptance suite.

use crate::error::Result;
use crate::metrics::{evaluate_pair, wilcoxon_signed_rank, EvalRecord, WilcoxonResult};
use crate::phantom::{generate_with_mask, PhantomSpec};
use crate::preprocess::normalize_wm;
use crate::regions::{remap_to_local, RegionConfig, NUM_GLOBAL_CLASSES, NUM_REGION_CLASSES};
use crate::tiling::plan_patches;
use crate::train::{
    predict_full_patch_based, predict_full_region_based, train_model, TrainHistory, TrainSample,
};
use crate::unet::{UNetConfig, UNetModel};
use crate::volume::{LabelMap, Volume};
use crate::train::TrainSchedule;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub phantom: PhantomSpec,
    pub regions: RegionConfig,
    pub schedule: TrainSchedule,
    /// Channel ladder shared by region and patch models.
    pub channels: Vec<usize>,
    pub patch_shape: [usize; 3],
    pub patch_stride: [usize; 3],
    /// Worker cap for the prediction stages.
    pub workers: usize,
}

impl ExperimentConfig {
    /// The standard desk experiment: 20 training + 5 test phantoms at 64^3,
    /// scaled region boxes, a 3-step 8/16/32 network, 32^3 patches with 50%
    /// overlap.
    pub fn desk(seed: u64) -> Self {
        Self {
            train_count: 20,
            test_count: 5,
            phantom: PhantomSpec::desk_scale(seed),
            regions: RegionConfig::desk_scale(),
            schedule: TrainSchedule::desk(seed),
            channels: vec![8, 16, 32],
            patch_shape: [32, 32, 32],
            patch_stride: [16, 16, 16],
            workers: 3,
        }
    }
}

pub struct RegionTraining {
    pub name: &'static str,
    pub model: UNetModel,
    pub history: TrainHistory,
    pub seconds: f64,
}

pub struct ExperimentResult {
    pub regions: Vec<RegionTraining>,
    pub patch_model: UNetModel,
    pub patch_history: TrainHistory,
    /// Summed wall-clock of the three region trainings.
    pub region_train_seconds: f64,
    pub patch_train_seconds: f64,
    /// Voxels consumed by one epoch over the training set.
    pub region_voxels_per_epoch: usize,
    pub patch_voxels_per_epoch: usize,
    pub region_records: Vec<EvalRecord>,
    pub patch_records: Vec<EvalRecord>,
    /// Mean foreground DSC over all (subject, structure) pairs.
    pub region_mean_dsc: f64,
    pub patch_mean_dsc: f64,
    /// Paired test over per-(subject, structure) DSC values.
    pub wilcoxon: Option<WilcoxonResult>,
}

impl ExperimentResult {
    pub fn wall_clock_ratio(&self) -> f64 {
        self.patch_train_seconds / self.region_train_seconds
    }

    pub fn voxel_ratio(&self) -> f64 {
        self.patch_voxels_per_epoch as f64 / self.region_voxels_per_epoch as f64
    }

    fn epochs(&self) -> usize {
        self.patch_history.records.len().max(1)
    }

    /// Aligned comparison table for reports.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>14} {:>14}", "", "region-based", "patch-based");
        let _ = writeln!(
            out,
            "{:<28} {:>14.1} {:>14.1}",
            "training wall-clock (s)", self.region_train_seconds, self.patch_train_seconds
        );
        let _ = writeln!(
            out,
            "{:<28} {:>14.1} {:>14.1}",
            "wall-clock per epoch (s)",
            self.region_train_seconds / self.epochs() as f64,
            self.patch_train_seconds / self.epochs() as f64
        );
        let _ = writeln!(
            out,
            "{:<28} {:>14} {:>14}",
            "voxels per epoch", self.region_voxels_per_epoch, self.patch_voxels_per_epoch
        );
        let _ = writeln!(
            out,
            "{:<28} {:>14.4} {:>14.4}",
            "mean foreground DSC", self.region_mean_dsc, self.patch_mean_dsc
        );
        let _ = writeln!(
            out,
            "wall-clock ratio (patch/region): {:.2}x",
            self.wall_clock_ratio()
        );
        let _ = writeln!(
            out,
            "voxel-throughput ratio (patch/region): {:.2}x",
            self.voxel_ratio()
        );
        if let Some(w) = &self.wilcoxon {
            let _ = writeln!(
                out,
                "Wilcoxon signed-rank (region vs patch DSC): W = {}, p = {:.3e} ({})",
                w.w,
                w.p,
                if w.exact { "exact" } else { "normal approx." }
            );
        }
        out
    }

    /// CSV rows mirroring `report`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,region_based,patch_based\n");
        let _ = writeln!(
            out,
            "train_seconds,{:.3},{:.3}",
            self.region_train_seconds, self.patch_train_seconds
        );
        let _ = writeln!(
            out,
            "voxels_per_epoch,{},{}",
            self.region_voxels_per_epoch, self.patch_voxels_per_epoch
        );
        let _ = writeln!(
            out,
            "mean_foreground_dsc,{:.6},{:.6}",
            self.region_mean_dsc, self.patch_mean_dsc
        );
        out
    }
}

/// Normalized phantom with its ground truth.
pub struct Subject {
    pub id: String,
    pub image: Volume,
    pub truth: LabelMap,
}

/// Generate and FCM-normalize a phantom cohort (`count` subjects starting at
/// `seed_base`).
pub fn make_cohort(spec: &PhantomSpec, seed_base: u64, count: usize) -> Result<Vec<Subject>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let spec_i = spec.clone().with_seed(seed_base + i as u64);
        let (raw, truth, mask) = generate_with_mask(&spec_i)?;
        let image = normalize_wm(&raw, &mask, 3)?;
        out.push(Subject {
            id: format!("phantom{:03}", seed_base + i as u64),
            image,
            truth,
        });
    }
    Ok(out)
}

fn region_samples(subjects: &[Subject], regions: &RegionConfig) -> Vec<Vec<TrainSample>> {
    regions
        .regions
        .iter()
        .map(|spec| {
            subjects
                .iter()
                .map(|s| TrainSample {
                    image: s.image.crop(&spec.crop, 0.0),
                    labels: remap_to_local(&s.truth, spec),
                })
                .collect()
        })
        .collect()
}

fn patch_samples(
    subjects: &[Subject],
    patch_shape: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for s in subjects {
        let plan = plan_patches(s.image.shape(), patch_shape, stride)?;
        let (padded_labels, _) = s.truth.pad_to(plan.padded_shape, 0)?;
        let patches = crate::tiling::extract(&s.image, &plan, 0.0)?;
        for (img, b) in patches.into_iter().zip(&plan.boxes) {
            out.push(TrainSample {
                image: img,
                labels: padded_labels.crop(b, 0),
            });
        }
    }
    Ok(out)
}

/// Run the full comparison: train the three region models and the matched
/// patch model, predict the held-out subjects both ways, and evaluate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.regions.validate()?;
    cfg.schedule.validate()?;
    let seed = cfg.schedule.seed;

    let train_set = make_cohort(&cfg.phantom, seed, cfg.train_count)?;
    let test_set = make_cohort(&cfg.phantom, seed + cfg.train_count as u64, cfg.test_count)?;

    // --- region pipeline ---
    let per_region = region_samples(&train_set, &cfg.regions);
    let mut regions = Vec::new();
    let mut region_train_seconds = 0.0;
    for (spec, samples) in cfg.regions.regions.iter().zip(per_region) {
        let mut model = UNetModel::build(UNetConfig {
            resolution_steps: cfg.channels.len(),
            channels: cfg.channels.clone(),
            num_classes: NUM_REGION_CLASSES,
            input_channels: 1,
            seed,
        })?;
        let start = Instant::now();
        let outcome = train_model(&mut model, &samples, &cfg.schedule, None)?;
        let seconds = start.elapsed().as_secs_f64();
        region_train_seconds += seconds;
        regions.push(RegionTraining {
            name: spec.name.as_str(),
            model,
            history: outcome.history,
            seconds,
        });
    }

    // --- patch baseline (same epochs, same ladder, 13 classes) ---
    let samples = patch_samples(&train_set, cfg.patch_shape, cfg.patch_stride)?;
    let mut patch_model = UNetModel::build(UNetConfig {
        resolution_steps: cfg.channels.len(),
        channels: cfg.channels.clone(),
        num_classes: NUM_GLOBAL_CLASSES,
        input_channels: 1,
        seed,
    })?;
    let start = Instant::now();
    let patch_outcome = train_model(&mut patch_model, &samples, &cfg.schedule, None)?;
    let patch_train_seconds = start.elapsed().as_secs_f64();

    // --- voxel accounting ---
    let region_voxels_per_epoch: usize = cfg
        .regions
        .regions
        .iter()
        .map(|r| r.crop.num_voxels())
        .sum::<usize>()
        * cfg.train_count;
    let plan = plan_patches(cfg.phantom.shape, cfg.patch_shape, cfg.patch_stride)?;
    let patch_voxels_per_epoch = plan.voxels_processed() * cfg.train_count;

    // --- held-out evaluation ---
    let labels: Vec<u8> = (1..=12).collect();
    let specs: Vec<_> = cfg.regions.regions.clone();
    let models: Vec<UNetModel> = regions.iter().map(|r| r.model.clone()).collect();
    let mut region_records = Vec::new();
    let mut patch_records = Vec::new();
    for s in &test_set {
        let region_pred = predict_full_region_based(&models, &specs, &s.image, cfg.workers)?;
        let patch_pred = predict_full_patch_based(
            &patch_model,
            &s.image,
            cfg.patch_shape,
            cfg.patch_stride,
            cfg.workers,
        )?;
        region_records.push(evaluate_pair(&s.id, &region_pred, &s.truth, &labels)?);
        patch_records.push(evaluate_pair(&s.id, &patch_pred, &s.truth, &labels)?);
    }

    let collect_dsc = |records: &[EvalRecord]| -> Vec<f64> {
        records
            .iter()
            .flat_map(|r| r.structures.iter().map(|s| s.dsc))
            .collect()
    };
    let region_dscs = collect_dsc(&region_records);
    let patch_dscs = collect_dsc(&patch_records);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let wilcoxon = wilcoxon_signed_rank(&region_dscs, &patch_dscs).ok();

    Ok(ExperimentResult {
        regions,
        patch_model,
        patch_history: patch_outcome.history,
        region_train_seconds,
        patch_train_seconds,
        region_voxels_per_epoch,
        patch_voxels_per_epoch,
        region_mean_dsc: mean(&region_dscs),
        patch_mean_dsc: mean(&patch_dscs),
        region_records,
        patch_records,
        wilcoxon,
    })
}

/// Voxel accounting implied by the full-size geometry: a 240^3 frame tiled
/// into 80^3 patches at stride 40 versus the sum of the three region crops.
pub fn full_geometry_voxel_counts() -> Result<(usize, usize)> {
    let plan = plan_patches([240, 240, 240], [80, 80, 80], [40, 40, 40])?;
    let patch = plan.voxels_processed();
    let region: usize = RegionConfig::full_scale()
        .regions
        .iter()
        .map(|r| r.crop.num_voxels())
        .sum();
    Ok((patch, region))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_geometry_counts_match_hand_arithmetic() {
        let (patch, region) = full_geometry_voxel_counts().unwrap();
        assert_eq!(patch, 125 * 80 * 80 * 80);
        assert_eq!(region, 96 * 96 * 96 + 128 * 160 * 128 + 96 * 96 * 96);
        let ratio = patch as f64 / region as f64;
        assert!((ratio - 14.5746).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn cohort_generation_is_deterministic_and_normalized() {
        let spec = PhantomSpec::desk_scale(0);
        let a = make_cohort(&spec, 100, 2).unwrap();
        let b = make_cohort(&spec, 100, 2).unwrap();
        assert_eq!(a[0].image.voxels(), b[0].image.voxels());
        assert_ne!(a[0].image.voxels(), a[1].image.voxels());
        // Normalized: the bright mode sits near 1.
        let max = a[0].image.voxels().iter().cloned().fold(0.0, f64::max);
        assert!(max > 0.9 && max < 1.6, "max {max}");
    }

    #[test]
    fn patch_samples_tile_each_subject() {
        let spec = PhantomSpec::desk_scale(0);
        let cohort = make_cohort(&spec, 7, 1).unwrap();
        let samples = patch_samples(&cohort, [32, 32, 32], [16, 16, 16]).unwrap();
        assert_eq!(samples.len(), 27);
        assert!(samples.iter().all(|s| s.image.shape() == [32, 32, 32]));
        // Labels in the patches stay within the global palette.
        assert!(samples
            .iter()
            .all(|s| s.labels.labels().iter().all(|&l| l <= 12)));
    }
}
