mod common;

use candle_core::{DType, Device};
use common::{DILATION, RADIUS};
use kongnet::loss::{LossConfig, Weighting};
use kongnet::model::{images_to_tensor, KongNet, ModelConfig, Variant};
use kongnet::pipeline::augment::default_set;
use kongnet::pipeline::dataset::prepare_samples;
use kongnet::pipeline::train::{objective, BatchTargets, Schedule, TrainConfig, TrainSample, Trainer};
use kongnet::preprocess::TargetMode;
use kongnet::testkit::{synth_dataset, synth_patch_with_counts, SynthSpec};
use kongnet::types::{ClassSpec, TargetMaskSet};

fn samples(n: usize, seed: u64) -> (ClassSpec, Vec<TrainSample>) {
    let spec = SynthSpec::three_class();
    let classes = spec.class_spec(DILATION, RADIUS).unwrap();
    let items: Vec<_> = synth_dataset(&spec, "p", n, seed)
        .unwrap()
        .into_iter()
        .map(|s| (s.patch, s.annotation))
        .collect();
    let samples = prepare_samples(&items, &classes, TargetMode::Full, false).unwrap();
    (classes, samples)
}

fn full_data_loss(model: &KongNet, data: &[TrainSample]) -> f64 {
    let images: Vec<_> = data.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&images, model.device()).unwrap();
    let sets: Vec<&TargetMaskSet> = data.iter().map(|s| &s.targets).collect();
    let t = BatchTargets::from_sets(&sets, true, model.dtype(), model.device()).unwrap();
    let out = model.forward(&x).unwrap();
    objective(&out, &t, 3, &LossConfig::default(), None)
        .unwrap()
        .breakdown
        .total
}

#[test]
fn overfits_ten_patches() {
    let (classes, data) = samples(10, 42);
    let model = KongNet::new(ModelConfig::toy(3, Variant::Full), DType::F32, &Device::Cpu, 1).unwrap();
    let initial = full_data_loss(&model, &data);
    let cfg = TrainConfig {
        batch_size: 2,
        lr: 3e-3,
        min_lr: 3e-4,
        weight_decay: 0.0,
        epochs: 1,
        steps_per_epoch: Some(200),
        seed: 9,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, classes, LossConfig::default(), cfg, data.clone()).unwrap();
    trainer.run(None).unwrap();
    let last = full_data_loss(trainer.model(), &data);
    eprintln!("loss {initial:.4} -> {last:.4}");
    assert!(last < 0.25 * initial, "loss {initial} -> {last}");
}

#[test]
fn resume_reproduces_next_step_loss() {
    for weighting in [Weighting::FixedEqual, Weighting::Uncertainty] {
        let (classes, data) = samples(4, 3);
        let loss_cfg = LossConfig {
            weighting,
            ..Default::default()
        };
        let cfg = TrainConfig {
            batch_size: 2,
            lr: 1e-3,
            epochs: 1,
            steps_per_epoch: Some(4),
            schedule: Schedule::Cosine,
            augmentations: default_set(),
            seed: 5,
            ..Default::default()
        };
        let make = || KongNet::new(ModelConfig::toy(3, Variant::Full), DType::F32, &Device::Cpu, 2).unwrap();

        let mut straight = Trainer::new(make(), classes.clone(), loss_cfg, cfg.clone(), data.clone()).unwrap();
        let logs = straight.run(None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut first = Trainer::new(make(), classes.clone(), loss_cfg, cfg.clone(), data.clone()).unwrap();
        for _ in 0..3 {
            first.train_step().unwrap();
        }
        first.save(&path).unwrap();
        let mut resumed = Trainer::resume(&path, cfg, data, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(resumed.step_index(), 3);
        let next = resumed.train_step().unwrap();
        assert_eq!(next.indices, logs[3].indices);
        assert_eq!(next.loss.total, logs[3].loss.total, "{weighting:?}");
    }
}

#[test]
fn sampler_raises_rare_class_exposure() {
    let spec = SynthSpec::three_class();
    let classes = spec.class_spec(DILATION, RADIUS).unwrap();
    let mut items = Vec::new();
    for i in 0..40u64 {
        let counts = if i % 10 == 0 { [4, 1, 1] } else { [4, 0, 1] };
        let s = synth_patch_with_counts(&spec, &format!("p{i}"), &counts, i).unwrap();
        items.push((s.patch, s.annotation));
    }
    let data = prepare_samples(&items, &classes, TargetMode::DetectionOnly, false).unwrap();
    let exposure = |use_sampler: bool| -> usize {
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 1,
            steps_per_epoch: Some(500),
            use_sampler,
            seed: 1,
            ..Default::default()
        };
        let model = KongNet::new(ModelConfig::toy(3, Variant::DetectionOnly), DType::F32, &Device::Cpu, 0).unwrap();
        let t = Trainer::new(model, classes.clone(), LossConfig::default(), cfg, data.clone()).unwrap();
        (0..500)
            .flat_map(|s| t.batch_indices(s).unwrap())
            .filter(|&i| i % 10 == 0)
            .count()
    };
    let (with, without) = (exposure(true), exposure(false));
    eprintln!("rare-class draws: sampler {with}, uniform {without}");
    assert!(with > without);
}
