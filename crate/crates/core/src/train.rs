//! Two-phase training schedule and full-volume prediction.
//!
//! Phase 1 pre-trains with class-weighted cross entropy, phase 2 continues
//! with the soft Dice loss; optimizer velocities are zeroed at the boundary
//! because the loss landscape changes discontinuously. Everything is
//! deterministic for a fixed seed: batch order comes from a seeded stream and
//! all kernels accumulate in fixed order.
//!
//! Prediction comes in two flavors: the region pipeline (crop each focal box,
//! infer its 5-class model, fuse) and the patch baseline (tile the whole
//! volume, infer a 13-class model per patch, average overlaps, argmax).

use crate::error::{Error, Result};
use crate::losses::{ClassWeights, WeightingScheme};
use crate::metrics::dsc;
use crate::optim::MomentumState;
use crate::regions::{fuse_regions, RegionSpec, NUM_GLOBAL_CLASSES};
use crate::tensor::{Tape, Tensor};
use crate::tiling::{extract, plan_patches, stitch};
use crate::unet::UNetModel;
use crate::volume::{LabelMap, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub weighting: WeightingScheme,
    #[serde(default = "default_dice_epsilon")]
    pub dice_epsilon: f64,
}

fn default_dice_epsilon() -> f64 {
    1.0
}

impl TrainSchedule {
    /// Full schedule: 30 cross-entropy epochs, then 200 Dice epochs,
    /// batch 4, SGD lr 0.01 momentum 0.9.
    pub fn full(seed: u64) -> Self {
        Self {
            pretrain_epochs: 30,
            train_epochs: 200,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            seed,
            weighting: WeightingScheme::InverseFrequency,
            dice_epsilon: 1.0,
        }
    }

    /// Scaled-down schedule for desk experiments. Desk phantoms and the small
    /// networks tolerate a larger step size, which buys convergence within a
    /// handful of epochs.
    pub fn desk(seed: u64) -> Self {
        Self {
            pretrain_epochs: 4,
            train_epochs: 8,
            batch_size: 1,
            lr: 0.03,
            momentum: 0.9,
            seed,
            weighting: WeightingScheme::InverseFrequency,
            dice_epsilon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs == 0 || self.train_epochs == 0 || self.batch_size == 0 {
            return Err(Error::BadConfig(
                "epoch and batch counts must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::BadConfig("need lr > 0 and momentum in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Weighted cross-entropy pre-training.
    Pretrain,
    /// Dice-loss training.
    Train,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Train => "train",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }

    /// CSV: epoch, phase, loss, seconds, val_dsc (empty when absent).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,loss,seconds,val_dsc\n");
        for r in &self.records {
            let vd = r.val_dsc.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.8},{:.3},{}",
                r.epoch,
                r.phase.as_str(),
                r.mean_loss,
                r.seconds,
                vd
            );
        }
        out
    }
}

/// One training example: an intensity crop (or patch) and its label map.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Volume,
    pub labels: LabelMap,
}

/// Result of a training run. `best` holds the serialized model of the best
/// validation epoch when a validation set was supplied; `phase_boundary`
/// snapshots the model exactly where the Dice phase takes over from the
/// cross-entropy phase.
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best: Option<BestCheckpoint>,
    pub phase_boundary: Vec<u8>,
}

pub struct BestCheckpoint {
    pub val_dsc: f64,
    pub bytes: Vec<u8>,
}

/// Copy a volume into a `[1, 1, X, Y, Z]` activation tensor (the volume is
/// x-fastest, the tensor z-fastest).
pub fn volume_to_tensor(v: &Volume) -> Tensor {
    let [nx, ny, nz] = v.shape();
    let mut data = vec![0.0; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data[(x * ny + y) * nz + z] = v.at(x, y, z);
            }
        }
    }
    Tensor::new(vec![1, 1, nx, ny, nz], data).expect("shape matches")
}

fn batch_to_tensors(samples: &[&TrainSample]) -> Result<(Tensor, Vec<u8>)> {
    let [nx, ny, nz] = samples[0].image.shape();
    let vox = nx * ny * nz;
    let b = samples.len();
    let mut data = vec![0.0; b * vox];
    let mut targets = vec![0u8; b * vox];
    for (bi, s) in samples.iter().enumerate() {
        if s.image.shape() != [nx, ny, nz] || s.labels.shape() != [nx, ny, nz] {
            return Err(Error::ShapeMismatch {
                expected: vec![nx, ny, nz],
                got: s.image.shape().to_vec(),
            });
        }
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let at = bi * vox + (x * ny + y) * nz + z;
                    data[at] = s.image.at(x, y, z);
                    targets[at] = s.labels.at(x, y, z);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, 1, nx, ny, nz], data)?, targets))
}

/// Argmax over the class axis of a `[1, C, X, Y, Z]` probability (or logit)
/// tensor; ties break toward the lower class index.
pub fn argmax_to_labels(probs: &Tensor, spacing: [f64; 3], origin: [f64; 3]) -> Result<LabelMap> {
    let [b, c, nx, ny, nz] = probs.dims5()?;
    if b != 1 {
        return Err(Error::ShapeMismatch {
            expected: vec![1],
            got: vec![b],
        });
    }
    let vox = nx * ny * nz;
    let data = probs.data();
    let mut labels = LabelMap::zeros([nx, ny, nz], spacing, origin);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = (x * ny + y) * nz + z;
                let mut best = data[v];
                let mut best_c = 0u8;
                for ci in 1..c {
                    let p = data[ci * vox + v];
                    if p > best {
                        best = p;
                        best_c = ci as u8;
                    }
                }
                labels.set(x, y, z, best_c);
            }
        }
    }
    Ok(labels)
}

/// Mean DSC over foreground classes `1..num_classes`.
pub fn mean_foreground_dsc(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for label in 1..num_classes {
        sum += dsc(pred, truth, label as u8)?;
    }
    Ok(sum / (num_classes - 1) as f64)
}

/// Train a model in place through both phases. Returns the per-epoch history
/// and, when `val` is given, the checkpoint of the best validation epoch.
pub fn train_model(
    model: &mut UNetModel,
    samples: &[TrainSample],
    schedule: &TrainSchedule,
    val: Option<&[TrainSample]>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_classes = model.config.num_classes;
    for s in samples {
        if let Some(&bad) = s.labels.labels().iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
    }

    let weights = ClassWeights::from_label_maps(
        &samples.iter().map(|s| &s.labels).collect::<Vec<_>>(),
        num_classes,
        schedule.weighting,
    );

    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.numel()).collect();
    let mut opt = MomentumState::new(&sizes, schedule.lr, schedule.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<BestCheckpoint> = None;

    let run_phase = |model: &mut UNetModel,
                         opt: &mut MomentumState,
                         rng: &mut ChaCha8Rng,
                         history: &mut TrainHistory,
                         best: &mut Option<BestCheckpoint>,
                         phase: Phase,
                         epochs: usize|
     -> Result<()> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..epochs {
            let start = Instant::now();
            order.shuffle(rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(schedule.batch_size) {
                let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (input, targets) = batch_to_tensors(&batch)?;
                let mut tape = Tape::new();
                let x = tape.leaf(&input);
                let fp = model.forward_train(&mut tape, x)?;
                let loss_node = match phase {
                    Phase::Pretrain => {
                        tape.weighted_cross_entropy(fp.logits, &targets, weights.values())?
                    }
                    Phase::Train => {
                        let probs = tape.softmax_channels(fp.logits)?;
                        tape.soft_dice(probs, &targets, schedule.dice_epsilon)?
                    }
                };
                let loss = tape.value(loss_node).data()[0];
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        phase: phase.as_str(),
                        epoch,
                    });
                }
                tape.backward(loss_node);
                let grads: Vec<Vec<f64>> = fp
                    .param_nodes
                    .iter()
                    .map(|&id| {
                        tape.grad(id)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
                    })
                    .collect();
                let mut params = model.parameters_mut();
                opt.step(&mut params, &grads)?;
                loss_sum += loss;
                batches += 1;
            }

            let val_dsc = match val {
                Some(vs) if !vs.is_empty() => {
                    // Sync the running statistics to the current weights so
                    // the inference-mode validation reflects the model.
                    refresh_batchnorm(model, samples, schedule.batch_size)?;
                    let mut acc = 0.0;
                    for s in vs {
                        let pred = predict_sample(model, &s.image)?;
                        acc += mean_foreground_dsc(&pred, &s.labels, num_classes)?;
                    }
                    Some(acc / vs.len() as f64)
                }
                _ => None,
            };
            if let Some(v) = val_dsc {
                let better = best.as_ref().map_or(true, |b| v > b.val_dsc);
                if better {
                    *best = Some(BestCheckpoint {
                        val_dsc: v,
                        bytes: model.to_bytes(),
                    });
                }
            }

            history.records.push(EpochRecord {
                phase,
                epoch,
                mean_loss: loss_sum / batches.max(1) as f64,
                seconds: start.elapsed().as_secs_f64(),
                val_dsc,
            });
        }
        Ok(())
    };

    run_phase(
        model,
        &mut opt,
        &mut rng,
        &mut history,
        &mut best,
        Phase::Pretrain,
        schedule.pretrain_epochs,
    )?;
    // The Dice landscape is unrelated to the cross-entropy one; keep the
    // parameters, drop the velocity.
    opt.reset();
    let phase_boundary = model.to_bytes();
    run_phase(
        model,
        &mut opt,
        &mut rng,
        &mut history,
        &mut best,
        Phase::Train,
        schedule.train_epochs,
    )?;

    refresh_batchnorm(model, samples, schedule.batch_size)?;

    Ok(TrainOutcome {
        history,
        best,
        phase_boundary,
    })
}

/// Re-estimate the batch-norm running statistics as the plain average of the
/// per-batch statistics under the final (frozen) parameters. Small training
/// batches make the momentum-tracked estimates lag the weights, which wrecks
/// inference-mode outputs; one deterministic pass over the training set fixes
/// the mismatch.
fn refresh_batchnorm(
    model: &mut UNetModel,
    samples: &[TrainSample],
    batch_size: usize,
) -> Result<()> {
    for state in model.bn_states_mut() {
        state.running_mean.fill(0.0);
        state.running_var.fill(0.0);
    }
    for (k, chunk) in samples.chunks(batch_size).enumerate() {
        // momentum 1/(k+1) turns the exponential blend into a running mean.
        let m = 1.0 / (k + 1) as f64;
        for state in model.bn_states_mut() {
            state.momentum = m;
        }
        let batch: Vec<&TrainSample> = chunk.iter().collect();
        let (input, _) = batch_to_tensors(&batch)?;
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        model.forward_train(&mut tape, x)?;
    }
    for state in model.bn_states_mut() {
        state.momentum = 0.1;
    }
    Ok(())
}

/// Infer one volume-shaped sample and argmax into a label map.
pub fn predict_sample(model: &UNetModel, image: &Volume) -> Result<LabelMap> {
    let mut tape = Tape::new();
    let x = tape.leaf(&volume_to_tensor(image));
    let logits = model.forward_infer(&mut tape, x)?;
    let probs = tape.softmax_channels(logits)?;
    argmax_to_labels(tape.value(probs), image.spacing(), image.origin())
}

/// Run `jobs` closures over at most `workers` threads, preserving result
/// order. Each job writes only its own slot, so the outcome is independent
/// of scheduling.
pub fn parallel_map<T, F>(jobs: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1).min(jobs.max(1));
    let mut slots: Vec<Option<T>> = (0..jobs).map(|_| None).collect();
    if workers <= 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(f(i));
        }
    } else {
        let next = AtomicUsize::new(0);
        let results = Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs {
                        break;
                    }
                    let out = f(i);
                    results.lock().expect("no poisoned lock")[i] = Some(out);
                });
            }
        });
    }
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}

/// Region-based full-volume prediction: crop each focal box, infer its local
/// model concurrently, argmax, and fuse by priority.
pub fn predict_full_region_based(
    models: &[UNetModel],
    specs: &[RegionSpec],
    v: &Volume,
    workers: usize,
) -> Result<LabelMap> {
    if models.len() != specs.len() || models.is_empty() {
        return Err(Error::BadConfig(format!(
            "{} models supplied for {} regions",
            models.len(),
            specs.len()
        )));
    }
    let locals: Vec<Result<LabelMap>> = parallel_map(models.len(), workers, |i| {
        let crop = v.crop(&specs[i].crop, 0.0);
        predict_sample(&models[i], &crop)
    });
    let mut preds = Vec::with_capacity(models.len());
    for (local, spec) in locals.into_iter().zip(specs) {
        preds.push((local?, spec));
    }
    fuse_regions(&preds, v.shape(), v.spacing(), v.origin())
}

/// Patch-based full-volume prediction with a whole-volume (13-class) model:
/// extract overlapping patches, infer each concurrently, average the
/// probabilities, argmax.
pub fn predict_full_patch_based(
    model: &UNetModel,
    v: &Volume,
    patch_shape: [usize; 3],
    stride: [usize; 3],
    workers: usize,
) -> Result<LabelMap> {
    if model.config.num_classes != NUM_GLOBAL_CLASSES {
        return Err(Error::BadConfig(format!(
            "patch model must have {NUM_GLOBAL_CLASSES} classes, got {}",
            model.config.num_classes
        )));
    }
    let plan = plan_patches(v.shape(), patch_shape, stride)?;
    let patches = extract(v, &plan, 0.0)?;
    let c = model.config.num_classes;
    let prob_patches: Vec<Result<Tensor>> = parallel_map(patches.len(), workers, |i| {
        let mut tape = Tape::new();
        let x = tape.leaf(&volume_to_tensor(&patches[i]));
        let logits = model.forward_infer(&mut tape, x)?;
        let probs = tape.softmax_channels(logits)?;
        // Drop the unit batch axis: [1, C, px, py, pz] -> [C, px, py, pz].
        let t = tape.value(probs);
        let [_, _, px, py, pz] = t.dims5()?;
        Tensor::new(vec![c, px, py, pz], t.data().to_vec())
    });
    let prob_patches: Vec<Tensor> = prob_patches.into_iter().collect::<Result<_>>()?;
    let field = stitch(&prob_patches, &plan, c)?;
    let [cc, nx, ny, nz] = match field.shape() {
        &[cc, nx, ny, nz] => [cc, nx, ny, nz],
        other => {
            return Err(Error::ShapeMismatch {
                expected: vec![4],
                got: other.to_vec(),
            })
        }
    };
    let batched = Tensor::new(vec![1, cc, nx, ny, nz], field.data().to_vec())?;
    argmax_to_labels(&batched, v.spacing(), v.origin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;

    fn blob_sample(shape: [usize; 3], seed: u64) -> TrainSample {
        // Two intensity blobs on a dim background, labels 1 and 2.
        let mut image = Volume::zeros(shape, [1.0; 3], [0.0; 3]);
        let mut labels = LabelMap::zeros(shape, [1.0; 3], [0.0; 3]);
        let [nx, ny, nz] = shape;
        let c1 = [nx as f64 * 0.35, ny as f64 * 0.5, nz as f64 * 0.5];
        let c2 = [nx as f64 * 0.7, ny as f64 * 0.45, nz as f64 * 0.55];
        let r = nx as f64 * 0.16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let d1 = ((x as f64 - c1[0]).powi(2)
                        + (y as f64 - c1[1]).powi(2)
                        + (z as f64 - c1[2]).powi(2))
                    .sqrt();
                    let d2 = ((x as f64 - c2[0]).powi(2)
                        + (y as f64 - c2[1]).powi(2)
                        + (z as f64 - c2[2]).powi(2))
                    .sqrt();
                    let noise = rng.random_range(-0.02..0.02);
                    if d1 < r {
                        labels.set(x, y, z, 1);
                        image.set(x, y, z, 0.9 + noise);
                    } else if d2 < r {
                        labels.set(x, y, z, 2);
                        image.set(x, y, z, 0.5 + noise);
                    } else {
                        image.set(x, y, z, 0.1 + noise);
                    }
                }
            }
        }
        TrainSample { image, labels }
    }

    #[test]
    fn loss_decreases_on_a_small_dataset() {
        let samples: Vec<TrainSample> = (0..4).map(|i| blob_sample([8, 8, 8], i)).collect();
        let mut model = UNetModel::build(UNetConfig {
            resolution_steps: 2,
            channels: vec![4, 8],
            num_classes: 3,
            input_channels: 1,
            seed: 11,
        })
        .unwrap();
        let schedule = TrainSchedule {
            pretrain_epochs: 2,
            train_epochs: 5,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            seed: 5,
            weighting: WeightingScheme::InverseFrequency,
            dice_epsilon: 1.0,
        };
        let outcome = train_model(&mut model, &samples, &schedule, None).unwrap();
        let dice_epochs: Vec<&EpochRecord> = outcome
            .history
            .records
            .iter()
            .filter(|r| r.phase == Phase::Train)
            .collect();
        assert_eq!(dice_epochs.len(), 5);
        assert!(
            dice_epochs.last().unwrap().mean_loss < dice_epochs[0].mean_loss,
            "dice loss did not descend: {} -> {}",
            dice_epochs[0].mean_loss,
            dice_epochs.last().unwrap().mean_loss
        );
        assert!(outcome.history.records.iter().all(|r| r.mean_loss.is_finite()));
    }

    #[test]
    fn single_sample_overfit_reaches_high_dsc() {
        // The learnability smoke test: one (input, label) pair, a tiny model,
        // 300 optimization steps; the model should reproduce its own labels.
        let sample = blob_sample([12, 12, 12], 3);
        let mut model = UNetModel::build(UNetConfig {
            resolution_steps: 2,
            channels: vec![4, 8],
            num_classes: 3,
            input_channels: 1,
            seed: 2,
        })
        .unwrap();
        let schedule = TrainSchedule {
            pretrain_epochs: 20,
            train_epochs: 280,
            batch_size: 1,
            lr: 0.01,
            momentum: 0.9,
            seed: 1,
            weighting: WeightingScheme::InverseFrequency,
            dice_epsilon: 1.0,
        };
        let outcome =
            train_model(&mut model, std::slice::from_ref(&sample), &schedule, None).unwrap();
        let pred = predict_sample(&model, &sample.image).unwrap();
        let d = mean_foreground_dsc(&pred, &sample.labels, 3).unwrap();
        assert!(d > 0.95, "overfit DSC only {d}");
        assert!(outcome.history.final_loss().unwrap() < 0.05);
    }

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let samples: Vec<TrainSample> = (0..3).map(|i| blob_sample([8, 8, 8], i)).collect();
        let schedule = TrainSchedule {
            pretrain_epochs: 1,
            train_epochs: 2,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            seed: 9,
            weighting: WeightingScheme::InverseFrequency,
            dice_epsilon: 1.0,
        };
        let cfg = UNetConfig {
            resolution_steps: 2,
            channels: vec![4, 8],
            num_classes: 3,
            input_channels: 1,
            seed: 4,
        };
        let mut a = UNetModel::build(cfg.clone()).unwrap();
        let mut b = UNetModel::build(cfg).unwrap();
        train_model(&mut a, &samples, &schedule, None).unwrap();
        train_model(&mut b, &samples, &schedule, None).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn phase_two_continues_from_phase_one_parameters() {
        let samples: Vec<TrainSample> = (0..2).map(|i| blob_sample([8, 8, 8], i)).collect();
        let cfg = UNetConfig {
            resolution_steps: 2,
            channels: vec![4, 8],
            num_classes: 3,
            input_channels: 1,
            seed: 6,
        };
        let mk_schedule = |weighting| TrainSchedule {
            pretrain_epochs: 2,
            train_epochs: 1,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            seed: 3,
            weighting,
            dice_epsilon: 1.0,
        };
        let mut model = UNetModel::build(cfg.clone()).unwrap();
        let initial = model.to_bytes();
        let outcome = train_model(
            &mut model,
            &samples,
            &mk_schedule(WeightingScheme::InverseFrequency),
            None,
        )
        .unwrap();
        // The boundary snapshot is a real phase-1 product, not a re-init.
        assert_ne!(outcome.phase_boundary, initial);
        UNetModel::from_bytes(&outcome.phase_boundary).unwrap();

        // Different phase-1 weighting must propagate into the final model:
        // phase 2 continues from phase 1 rather than restarting.
        let mut other = UNetModel::build(cfg).unwrap();
        let outcome2 = train_model(
            &mut other,
            &samples,
            &mk_schedule(WeightingScheme::Uniform),
            None,
        )
        .unwrap();
        assert_ne!(outcome.phase_boundary, outcome2.phase_boundary);
        assert_ne!(model.to_bytes(), other.to_bytes());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut model = UNetModel::build(UNetConfig {
            resolution_steps: 2,
            channels: vec![4, 8],
            num_classes: 3,
            input_channels: 1,
            seed: 0,
        })
        .unwrap();
        assert!(matches!(
            train_model(&mut model, &[], &TrainSchedule::desk(0), None),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut s = blob_sample([8, 8, 8], 0);
        s.labels.set(0, 0, 0, 7);
        let mut model = UNetModel::build(UNetConfig {
            resolution_steps: 2,
            channels: vec![4, 8],
            num_classes: 3,
            input_channels: 1,
            seed: 0,
        })
        .unwrap();
        assert!(matches!(
            train_model(&mut model, &[s], &TrainSchedule::desk(0), None),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_class() {
        let t = Tensor::new(vec![1, 3, 1, 1, 1], vec![0.4, 0.4, 0.2]).unwrap();
        let l = argmax_to_labels(&t, [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(l.labels(), &[0]);
        let t = Tensor::new(vec![1, 3, 1, 1, 1], vec![0.2, 0.4, 0.4]).unwrap();
        let l = argmax_to_labels(&t, [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(l.labels(), &[1]);
    }

    #[test]
    fn parallel_map_preserves_order_and_runs_every_job() {
        let out = parallel_map(17, 3, |i| i * i);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
        let out = parallel_map(4, 16, |i| i + 1);
        assert_eq!(out, vec![1, 2, 3, 4]);
    }

    #[test]
    fn zero_head_region_models_predict_all_background() {
        use crate::regions::RegionConfig;
        let cfg = RegionConfig::desk_scale();
        let mut models = Vec::new();
        for _ in 0..3 {
            let mut m = UNetModel::build(UNetConfig {
                resolution_steps: 2,
                channels: vec![4, 8],
                num_classes: 5,
                input_channels: 1,
                seed: 0,
            })
            .unwrap();
            m.zero_head(); // uniform softmax -> argmax tie -> class 0
            models.push(m);
        }
        let v = Volume::zeros([64, 64, 64], [1.0; 3], [0.0; 3]);
        let specs: Vec<RegionSpec> = cfg.regions.clone();
        let pred = predict_full_region_based(&models, &specs, &v, 3).unwrap();
        assert!(pred.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn patch_prediction_requires_13_classes() {
        let model = UNetModel::build(UNetConfig {
            resolution_steps: 2,
            channels: vec![4, 8],
            num_classes: 5,
            input_channels: 1,
            seed: 0,
        })
        .unwrap();
        let v = Volume::zeros([16, 16, 16], [1.0; 3], [0.0; 3]);
        assert!(matches!(
            predict_full_patch_based(&model, &v, [8, 8, 8], [4, 4, 4], 1),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn constant_prediction_model_yields_constant_labels() {
        let mut model = UNetModel::build(UNetConfig {
            resolution_steps: 2,
            channels: vec![4, 8],
            num_classes: 13,
            input_channels: 1,
            seed: 1,
        })
        .unwrap();
        model.zero_head();
        let v = Volume::zeros([12, 12, 12], [1.0; 3], [0.0; 3]);
        let pred = predict_full_patch_based(&model, &v, [8, 8, 8], [4, 4, 4], 2).unwrap();
        assert_eq!(pred.shape(), v.shape());
        assert!(pred.labels().iter().all(|&l| l == 0));
    }
}
