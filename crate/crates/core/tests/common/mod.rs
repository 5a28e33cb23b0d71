//! Shared helpers for the slower integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device};
use kongnet::eval::{f1_global, per_class_matches, F1Score};
use kongnet::loss::LossConfig;
use kongnet::model::{KongNet, ModelConfig, Variant};
use kongnet::pipeline::dataset::prepare_samples;
use kongnet::pipeline::train::{Schedule, TrainConfig, Trainer};
use kongnet::pipeline::tta::{tta_forward, TtaMode};
use kongnet::postprocess::{extract_detections, PostprocessConfig};
use kongnet::preprocess::TargetMode;
use kongnet::testkit::{synth_dataset, SynthSample, SynthSpec};
use kongnet::types::ClassSpec;

pub const DILATION: usize = 5;
pub const RADIUS: f64 = 6.0;

pub fn toy_postprocess() -> PostprocessConfig {
    PostprocessConfig {
        centroid_weight: 0.6,
        threshold: 0.5,
        min_distance: 4.0,
        nms_box: 5.0,
        nms_iou: 0.5,
    }
}

pub fn data(spec: &SynthSpec, prefix: &str, n: usize, seed: u64) -> Vec<SynthSample> {
    synth_dataset(spec, prefix, n, seed).unwrap()
}

pub fn toy_train_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 3e-3,
        min_lr: 1e-4,
        weight_decay: 1e-4,
        schedule: Schedule::Cosine,
        epochs: 1,
        steps_per_epoch: Some(steps),
        seed,
        ..Default::default()
    }
}

pub fn train(
    spec: &SynthSpec,
    train_set: &[SynthSample],
    variant: Variant,
    cfg: TrainConfig,
    seed: u64,
) -> (KongNet, ClassSpec) {
    let classes = spec.class_spec(DILATION, RADIUS).unwrap();
    let items: Vec<_> = train_set
        .iter()
        .map(|s| (s.patch.clone(), s.annotation.clone()))
        .collect();
    let mode = if variant.has_segmentation() {
        TargetMode::Full
    } else {
        TargetMode::DetectionOnly
    };
    let samples = prepare_samples(&items, &classes, mode, false).unwrap();
    let model = KongNet::new(ModelConfig::toy(classes.len(), variant), DType::F32, &Device::Cpu, seed).unwrap();
    let mut trainer = Trainer::new(model, classes.clone(), LossConfig::default(), cfg, samples).unwrap();
    let logs = trainer.run(None).unwrap();
    let first = logs.first().map(|l| l.loss.total).unwrap_or(0.0);
    let last = logs.last().map(|l| l.loss.total).unwrap_or(0.0);
    eprintln!("  trained {variant:?} seed {seed}: loss {first:.4} -> {last:.4}");
    (trainer.into_model(), classes)
}

/// Per-class F1 pooled over `eval_set`.
pub fn per_class_f1(model: &KongNet, eval_set: &[SynthSample], tta: TtaMode, pp: &PostprocessConfig) -> Vec<F1Score> {
    let n = model.config().n_classes;
    let images: Vec<_> = eval_set
        .iter()
        .map(|s| {
            let maps = tta_forward(model, s.patch.pixels(), tta).unwrap();
            let dets = extract_detections(&maps, &[*pp]).unwrap();
            (dets, s.annotation.centroids.clone())
        })
        .collect();
    per_class_matches(&images, &vec![RADIUS; n])
        .unwrap()
        .iter()
        .map(|m| f1_global(m))
        .collect()
}

pub fn mean_f1(scores: &[F1Score]) -> f64 {
    scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64
}

pub fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}
