use regionseg::experiment::make_cohort;
use regionseg::phantom::PhantomSpec;
use regionseg::regions::{remap_to_local, RegionConfig, NUM_REGION_CLASSES};
use regionseg::train::{mean_foreground_dsc, predict_sample, train_model, TrainSample, TrainSchedule};
use regionseg::unet::{UNetConfig, UNetModel};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let pre: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let dice: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(15);
    let region_idx: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);

    let spec = PhantomSpec::desk_scale(42);
    let train = make_cohort(&spec, 42, 20).unwrap();
    let test = make_cohort(&spec, 62, 5).unwrap();
    let rspec = RegionConfig::desk_scale().regions[region_idx].clone();
    let samples: Vec<TrainSample> = train.iter().map(|s| TrainSample {
        image: s.image.crop(&rspec.crop, 0.0),
        labels: remap_to_local(&s.truth, &rspec),
    }).collect();
    let val: Vec<TrainSample> = test.iter().map(|s| TrainSample {
        image: s.image.crop(&rspec.crop, 0.0),
        labels: remap_to_local(&s.truth, &rspec),
    }).collect();

    let mut model = UNetModel::build(UNetConfig {
        resolution_steps: 3, channels: vec![8, 16, 32],
        num_classes: NUM_REGION_CLASSES, input_channels: 1, seed: 42,
    }).unwrap();
    let schedule = TrainSchedule {
        pretrain_epochs: pre, train_epochs: dice, batch_size: batch,
        lr, momentum: 0.9, seed: 42, weighting: Default::default(), dice_epsilon: 1.0,
    };
    let outcome = train_model(&mut model, &samples, &schedule, Some(&val)).unwrap();
    for r in &outcome.history.records {
        println!("{:9} {:2}  loss {:.4}  val_dsc {:.4}  {:.1}s",
            r.phase.as_str(), r.epoch, r.mean_loss, r.val_dsc.unwrap_or(f64::NAN), r.seconds);
    }
    let d: f64 = val.iter().map(|s| {
        let p = predict_sample(&model, &s.image).unwrap();
        mean_foreground_dsc(&p, &s.labels, NUM_REGION_CLASSES).unwrap()
    }).sum::<f64>() / val.len() as f64;
    println!("final crop-level mean foreground DSC: {d:.4}");
}
