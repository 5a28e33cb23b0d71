//! Training loop: weighted patch sampling, augmentation, the composite
//! objective and AdamW with a cosine schedule.
//!
//! Every stochastic choice of step `t` is drawn from a generator seeded with
//! `mix_seed(seed, t)`, so a run resumed from a checkpoint at step `t`
//! continues exactly like an uninterrupted one.

use std::io::Write;
use std::path::Path;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{apply_all, AugmentStep};
use crate::error::{Error, Result};
use crate::loss::{class_loss, interclass_exclusion, total_loss, ClassTensors, LossConfig, TotalLoss, Weighting};
use crate::mix_seed;
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{images_to_tensor, KongNet, ModelOutput};
use crate::sampler::{sample_indices, SamplerState};
use crate::types::{ClassSpec, TargetMaskSet};

/// One training patch with its target masks.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: Array3<f32>,
    pub targets: TargetMaskSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
    /// Cosine annealing restarted after `t0` epochs, period multiplied by
    /// `t_mult` after each restart.
    CosineWarmRestarts {
        t0: usize,
        t_mult: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    /// Defaults to `ceil(n_patches / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub augmentations: Vec<AugmentStep>,
    /// Weighted patch sampling; uniform when off.
    pub use_sampler: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 4e-4,
            min_lr: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: Schedule::Cosine,
            epochs: 10,
            steps_per_epoch: None,
            augmentations: Vec::new(),
            use_sampler: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return Err(Error::InvalidConfig("need 0 <= min_lr <= lr and lr > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("bad AdamW moments".into()));
        }
        if let Schedule::CosineWarmRestarts { t0, t_mult } = self.schedule {
            if t0 == 0 || t_mult == 0 {
                return Err(Error::InvalidConfig("t0 and t_mult must be positive".into()));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::InvalidConfig("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` given `steps_per_epoch`.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let total = (self.epochs * steps_per_epoch) as f64;
        let cosine = |t: f64, period: f64| {
            self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t / period).cos())
        };
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => cosine(step as f64, total),
            Schedule::CosineWarmRestarts { t0, t_mult } => {
                let mut period = (t0 * steps_per_epoch) as f64;
                let mut t = step as f64;
                while t >= period {
                    t -= period;
                    period *= t_mult as f64;
                }
                cosine(t, period)
            }
        }
    }
}

/// Decoupled-weight-decay Adam with state that can be checkpointed.
#[derive(Debug)]
pub struct AdamW {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        })
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients carry the graph of their step; detach so the moments
            // don't keep every past graph alive.
            let g = g.detach();
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let decayed = (var.as_tensor().detach() * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors and step count for checkpointing, keyed by `prefix`.
    pub fn state(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(2 * self.vars.len() + 1);
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push((format!("{prefix}.m.{name}"), self.m[i].clone()));
            out.push((format!("{prefix}.v.{name}"), self.v[i].clone()));
        }
        out.push((format!("{prefix}.t"), Tensor::new(&[self.t as f64], &Device::Cpu)?));
        Ok(out)
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        let get = |key: String| -> Result<&Tensor> {
            tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimiser state `{key}`")))
        };
        for (i, (name, var)) in self.vars.iter().enumerate() {
            self.m[i] = get(format!("{prefix}.m.{name}"))?
                .to_dtype(var.dtype())?
                .to_device(var.device())?;
            self.v[i] = get(format!("{prefix}.v.{name}"))?
                .to_dtype(var.dtype())?
                .to_device(var.device())?;
        }
        self.t = get(format!("{prefix}.t"))?.to_vec1::<f64>()?[0] as u64;
        Ok(())
    }
}

/// Per-class target tensors of one batch, each `(B, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    pub centroid: Vec<Tensor>,
    pub seg: Option<Vec<Tensor>>,
    pub contour: Option<Vec<Tensor>>,
}

fn stack_masks(masks: &[&Array2<u8>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = masks[0].dim();
    let data: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.iter().map(|&v| f32::from(v.min(1))))
        .collect();
    Ok(Tensor::from_vec(data, (masks.len(), h, w), device)?.to_dtype(dtype)?)
}

impl BatchTargets {
    pub fn from_sets(sets: &[&TargetMaskSet], with_seg: bool, dtype: DType, device: &Device) -> Result<Self> {
        let n = sets[0].classes.len();
        if sets.iter().any(|s| s.classes.len() != n) {
            return Err(Error::Shape("targets disagree on class count".into()));
        }
        let mut centroid = Vec::with_capacity(n);
        let mut seg = Vec::with_capacity(n);
        let mut contour = Vec::with_capacity(n);
        for k in 0..n {
            let c: Vec<&Array2<u8>> = sets.iter().map(|s| &s.classes[k].centroid).collect();
            centroid.push(stack_masks(&c, dtype, device)?);
            if with_seg {
                let missing = || Error::MissingTargets(format!("class {k} lacks nucleus/contour masks"));
                let s: Vec<&Array2<u8>> = sets
                    .iter()
                    .map(|s| s.classes[k].nucleus.as_ref().ok_or_else(missing))
                    .collect::<Result<_>>()?;
                let o: Vec<&Array2<u8>> = sets
                    .iter()
                    .map(|s| s.classes[k].contour.as_ref().ok_or_else(missing))
                    .collect::<Result<_>>()?;
                seg.push(stack_masks(&s, dtype, device)?);
                contour.push(stack_masks(&o, dtype, device)?);
            }
        }
        Ok(Self {
            centroid,
            seg: with_seg.then_some(seg),
            contour: with_seg.then_some(contour),
        })
    }
}

/// The full objective for one batch.
pub fn objective(
    output: &ModelOutput,
    targets: &BatchTargets,
    n_proper_classes: usize,
    loss_cfg: &LossConfig,
    log_vars: Option<&Tensor>,
) -> Result<TotalLoss> {
    let n = targets.centroid.len();
    let detection_only = output.seg.is_none();
    let mut class_losses = Vec::with_capacity(n);
    let mut centroid_maps = Vec::with_capacity(n);
    for k in 0..n {
        let (c, s, o) = output.class(k)?;
        let pred = ClassTensors {
            centroid: &c,
            seg: s.as_ref(),
            contour: o.as_ref(),
        };
        let target = ClassTensors {
            centroid: &targets.centroid[k],
            seg: targets.seg.as_ref().map(|v| &v[k]),
            contour: targets.contour.as_ref().map(|v| &v[k]),
        };
        class_losses.push(class_loss(pred, target, loss_cfg, detection_only)?);
        if k < n_proper_classes {
            centroid_maps.push(c);
        }
    }
    let inter = interclass_exclusion(&centroid_maps)?;
    total_loss(&class_losses, &inter, loss_cfg.weighting, log_vars)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: crate::loss::LossBreakdown,
    pub indices: Vec<usize>,
}

pub struct Trainer {
    model: KongNet,
    classes: ClassSpec,
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    data: Vec<TrainSample>,
    weights: Vec<f64>,
    log_vars: Option<Var>,
    opt: AdamW,
    opt_s: Option<AdamW>,
    step: usize,
    steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(
        model: KongNet,
        classes: ClassSpec,
        loss_cfg: LossConfig,
        cfg: TrainConfig,
        data: Vec<TrainSample>,
    ) -> Result<Self> {
        cfg.validate()?;
        loss_cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let mc = model.config();
        if classes.len() != mc.n_classes {
            return Err(Error::InvalidConfig(format!(
                "{} classes but the model predicts {}",
                classes.len(),
                mc.n_classes
            )));
        }
        for s in &data {
            if s.targets.classes.len() != mc.n_classes {
                return Err(Error::Shape(format!(
                    "sample `{}` has targets for {} classes",
                    s.id,
                    s.targets.classes.len()
                )));
            }
            if mc.variant.has_segmentation() && !s.targets.has_segmentation() {
                return Err(Error::MissingTargets(format!(
                    "sample `{}` lacks segmentation targets required by the {:?} variant",
                    s.id, mc.variant
                )));
            }
        }
        let weights = if cfg.use_sampler {
            let targets: Vec<TargetMaskSet> = data.iter().map(|s| s.targets.clone()).collect();
            SamplerState::from_targets(&targets)?.patch_weights()?
        } else {
            vec![1.0; data.len()]
        };
        let log_vars = match loss_cfg.weighting {
            Weighting::Uncertainty => Some(Var::zeros(mc.n_classes, model.dtype(), model.device())?),
            Weighting::FixedEqual => None,
        };
        let opt = AdamW::new(model.named_vars(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)?;
        let opt_s = log_vars
            .as_ref()
            .map(|v| {
                AdamW::new(
                    vec![("log_vars".into(), v.clone())],
                    cfg.beta1,
                    cfg.beta2,
                    cfg.adam_eps,
                    0.0,
                )
            })
            .transpose()?;
        let steps_per_epoch = cfg
            .steps_per_epoch
            .unwrap_or_else(|| data.len().div_ceil(cfg.batch_size));
        Ok(Self {
            model,
            classes,
            loss_cfg,
            cfg,
            data,
            weights,
            log_vars,
            opt,
            opt_s,
            step: 0,
            steps_per_epoch,
        })
    }

    pub fn model(&self) -> &KongNet {
        &self.model
    }

    pub fn into_model(self) -> KongNet {
        self.model
    }

    pub fn classes(&self) -> &ClassSpec {
        &self.classes
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn patch_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_vars(&self) -> Option<&Var> {
        self.log_vars.as_ref()
    }

    /// Patch indices drawn for `step`.
    pub fn batch_indices(&self, step: usize) -> Result<Vec<usize>> {
        sample_indices(&self.weights, self.cfg.batch_size, mix_seed(self.cfg.seed, step as u64))
    }

    fn batch(&self, step: usize) -> Result<(Vec<usize>, Tensor, BatchTargets)> {
        let idx = self.batch_indices(step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.cfg.seed, step as u64), 1));
        let mut images = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &self.data[i];
            let (img, t) = apply_all(&self.cfg.augmentations, &s.image, &s.targets, &mut rng)?;
            images.push(img);
            targets.push(t);
        }
        let img_refs: Vec<&Array3<f32>> = images.iter().collect();
        let x = images_to_tensor(&img_refs, self.model.device())?;
        let t_refs: Vec<&TargetMaskSet> = targets.iter().collect();
        let bt = BatchTargets::from_sets(
            &t_refs,
            self.model.config().variant.has_segmentation(),
            self.model.dtype(),
            self.model.device(),
        )?;
        Ok((idx, x, bt))
    }

    /// Objective of the batch for `step` under the current weights, without
    /// updating anything.
    pub fn loss_at(&self, step: usize) -> Result<TotalLoss> {
        let (_, x, targets) = self.batch(step)?;
        let out = self.model.forward(&x)?;
        objective(
            &out,
            &targets,
            self.model.config().proper_classes(),
            &self.loss_cfg,
            self.log_vars.as_ref().map(|v| v.as_tensor()),
        )
    }

    /// One optimisation step. A non-finite loss aborts with the offending
    /// component named.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let (indices, x, targets) = self.batch(step)?;
        let out = self.model.forward(&x)?;
        let loss = objective(
            &out,
            &targets,
            self.model.config().proper_classes(),
            &self.loss_cfg,
            self.log_vars.as_ref().map(|v| v.as_tensor()),
        )?;
        let grads = loss.total.backward()?;
        let lr = self.cfg.lr_at(step, self.steps_per_epoch);
        self.opt.step(&grads, lr)?;
        if let Some(opt_s) = self.opt_s.as_mut() {
            opt_s.step(&grads, lr)?;
        }
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            loss: loss.breakdown,
            indices,
        })
    }

    /// Runs until the configured number of steps, writing one CSV row per
    /// step to `log` when given.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<StepLog>> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", loss_log_header(&self.classes))?;
        }
        let mut out = Vec::new();
        while self.step < self.total_steps() {
            let entry = self.train_step()?;
            if entry.step % 10 == 0 {
                log::info!("step {} lr {:.2e} loss {:.5}", entry.step, entry.lr, entry.loss.total);
            }
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", loss_log_row(&entry))?;
            }
            out.push(entry);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = CheckpointMeta {
            model_config: self.model.config().clone(),
            classes: self.classes.clone(),
            loss_config: self.loss_cfg,
            step: self.step as u64,
        };
        let mut extra = self.opt.state("opt")?;
        if let (Some(lv), Some(opt_s)) = (&self.log_vars, &self.opt_s) {
            extra.push(("log_vars".into(), lv.as_tensor().clone()));
            extra.extend(opt_s.state("opt_s")?);
        }
        let refs: Vec<(&str, &Tensor)> = extra.iter().map(|(k, t)| (k.as_str(), t)).collect();
        checkpoint::save(path, &self.model, &meta, &refs)
    }

    /// Restores model, loss state, optimiser moments and step counter.
    pub fn resume(
        path: impl AsRef<Path>,
        cfg: TrainConfig,
        data: Vec<TrainSample>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let ck = checkpoint::load(path, dtype, device)?;
        let mut trainer = Self::new(ck.model, ck.meta.classes, ck.meta.loss_config, cfg, data)?;
        trainer.step = ck.meta.step as usize;
        trainer.opt.load_state("opt", &ck.extra)?;
        if let (Some(lv), Some(opt_s)) = (&trainer.log_vars, trainer.opt_s.as_mut()) {
            let saved = ck
                .extra
                .get("log_vars")
                .ok_or_else(|| Error::Checkpoint("missing `log_vars` for uncertainty weighting".into()))?;
            lv.set(&saved.to_dtype(dtype)?)?;
            opt_s.load_state("opt_s", &ck.extra)?;
        }
        Ok(trainer)
    }
}

pub fn loss_log_header(classes: &ClassSpec) -> String {
    let mut cols = vec!["step".to_string(), "lr".to_string()];
    for name in classes.names() {
        cols.push(format!("{name}_centroid"));
        cols.push(format!("{name}_seg"));
        cols.push(format!("{name}_contour"));
    }
    cols.push("interclass".into());
    cols.push("total".into());
    cols.join(",")
}

pub fn loss_log_row(entry: &StepLog) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut cols = vec![entry.step.to_string(), entry.lr.to_string()];
    for k in 0..entry.loss.centroid.len() {
        cols.push(entry.loss.centroid[k].to_string());
        cols.push(opt(entry.loss.seg[k]));
        cols.push(opt(entry.loss.contour[k]));
    }
    cols.push(entry.loss.interclass.to_string());
    cols.push(entry.loss.total.to_string());
    cols.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 10,
            min_lr: 1e-5,
            ..Default::default()
        };
        assert_abs_diff_eq!(cfg.lr_at(0, 5), 4e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.lr_at(25, 5), (4e-4 + 1e-5) / 2.0, epsilon = 1e-15);
        let wr = TrainConfig {
            schedule: Schedule::CosineWarmRestarts { t0: 2, t_mult: 2 },
            ..cfg
        };
        assert_abs_diff_eq!(wr.lr_at(10, 5), 4e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(wr.lr_at(30, 5), 4e-4, epsilon = 1e-15);
        assert!(wr.lr_at(9, 5) < 1e-4);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let v = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(vec![("w".into(), v.clone())], 0.9, 0.999, 1e-12, 0.0).unwrap();
        let loss = (v.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let w = v.as_tensor().to_vec1::<f64>().unwrap();
        assert_abs_diff_eq!(w[0], 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(w[1], -1.9, epsilon = 1e-9);
    }
}
