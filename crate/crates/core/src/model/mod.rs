//! Multi-decoder network: shared encoder, one decoder per class and three
//! sigmoid heads (centroid, segmentation, contour) per decoder.

mod blocks;
pub mod checkpoint;
mod encoder;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{ops::sigmoid, Conv2d, VarBuilder, VarMap};
use ndarray::{Array2, Array3};
use rand::{distr::Uniform, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{pixel_shuffle, Decoder, DecoderBlock, Scse};
pub use encoder::{Backbone, EncoderSpec, FeaturePyramid, SimpleCnn};

use crate::error::{Error, Result};
use crate::types::{ClassMaps, PredictionMaps};
use blocks::conv3x3;

/// Network layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One decoder per class, each with three single-channel heads.
    Full,
    /// One shared decoder with three `n_classes`-channel heads.
    SingleHead,
    /// One shared decoder with a single `n_classes`-channel centroid head.
    #[serde(rename = "det_only")]
    DetectionOnly,
}

impl Variant {
    pub fn has_segmentation(self) -> bool {
        !matches!(self, Variant::DetectionOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    /// Output width of decoder blocks 1..5; must be non-increasing.
    pub decoder_widths: [usize; 5],
    /// Number of output classes, including the overall class if present.
    pub n_classes: usize,
    /// The last output class is the union of all others.
    #[serde(default)]
    pub overall_class: bool,
    pub variant: Variant,
    #[serde(default = "default_reduction")]
    pub scse_reduction: usize,
    /// Per-channel input normalisation applied inside `forward`.
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
}

fn default_reduction() -> usize {
    16
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Spatial dimensions must be multiples of this.
pub const OUTPUT_STRIDE: usize = 32;

impl ModelConfig {
    /// Small configuration for CPU experiments.
    pub fn toy(n_classes: usize, variant: Variant) -> Self {
        Self {
            encoder: EncoderSpec::SimpleCnn {
                widths: [16, 24, 32, 48, 64],
                convs_per_stage: 2,
            },
            decoder_widths: [32, 16, 8, 8, 8],
            n_classes,
            overall_class: false,
            variant,
            scse_reduction: 4,
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_classes == 0 {
            return Err(Error::InvalidConfig("n_classes must be positive".into()));
        }
        if self.overall_class && self.n_classes < 2 {
            return Err(Error::InvalidConfig(
                "an overall class needs at least one other class".into(),
            ));
        }
        if self.decoder_widths.contains(&0) {
            return Err(Error::InvalidConfig("decoder widths must be positive".into()));
        }
        if self.decoder_widths.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig(format!(
                "decoder widths must not increase: {:?}",
                self.decoder_widths
            )));
        }
        if self.scse_reduction == 0 {
            return Err(Error::InvalidConfig("scse_reduction must be positive".into()));
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("norm_std must be positive".into()));
        }
        Ok(())
    }

    /// Classes that take part in the inter-class exclusion term.
    pub fn proper_classes(&self) -> usize {
        self.n_classes - usize::from(self.overall_class)
    }
}

/// Per-pixel probabilities, each `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub centroid: Tensor,
    pub seg: Option<Tensor>,
    pub contour: Option<Tensor>,
}

impl ModelOutput {
    /// Channel `class` of every map as `(B, H, W)`.
    pub fn class(&self, class: usize) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
        let pick = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(1, class, 1)?.squeeze(1)?) };
        Ok((
            pick(&self.centroid)?,
            self.seg.as_ref().map(pick).transpose()?,
            self.contour.as_ref().map(pick).transpose()?,
        ))
    }

    pub fn to_prediction_maps(&self) -> Result<Vec<PredictionMaps>> {
        let to_arrays = |t: &Tensor| -> Result<Vec<Vec<Array2<f32>>>> {
            let (b, c, h, w) = t.dims4()?;
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            Ok((0..b)
                .map(|bi| {
                    (0..c)
                        .map(|ci| {
                            let start = (bi * c + ci) * h * w;
                            Array2::from_shape_vec((h, w), data[start..start + h * w].to_vec()).expect("contiguous map")
                        })
                        .collect()
                })
                .collect())
        };
        let centroid = to_arrays(&self.centroid)?;
        let seg = self.seg.as_ref().map(to_arrays).transpose()?;
        let contour = self.contour.as_ref().map(to_arrays).transpose()?;
        Ok(centroid
            .into_iter()
            .enumerate()
            .map(|(bi, cents)| PredictionMaps {
                classes: cents
                    .into_iter()
                    .enumerate()
                    .map(|(ci, centroid)| ClassMaps {
                        centroid,
                        seg: seg.as_ref().map(|s| s[bi][ci].clone()),
                        contour: contour.as_ref().map(|s| s[bi][ci].clone()),
                    })
                    .collect(),
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
struct Heads {
    centroid: Conv2d,
    seg: Option<Conv2d>,
    contour: Option<Conv2d>,
}

impl Heads {
    fn new(width: usize, channels: usize, with_seg: bool, vb: VarBuilder) -> Result<Self> {
        let centroid = conv3x3(width, channels, 1, vb.pp("centroid"))?;
        let (seg, contour) = if with_seg {
            (
                Some(conv3x3(width, channels, 1, vb.pp("seg"))?),
                Some(conv3x3(width, channels, 1, vb.pp("contour"))?),
            )
        } else {
            (None, None)
        };
        Ok(Self { centroid, seg, contour })
    }

    fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        let head = |c: &Conv2d| -> Result<Tensor> { Ok(sigmoid(&c.forward(x)?)?) };
        Ok(ModelOutput {
            centroid: head(&self.centroid)?,
            seg: self.seg.as_ref().map(head).transpose()?,
            contour: self.contour.as_ref().map(head).transpose()?,
        })
    }
}

pub struct KongNet {
    config: ModelConfig,
    varmap: VarMap,
    device: Device,
    dtype: DType,
    encoder: Box<dyn Backbone>,
    decoders: Vec<(Decoder, Heads)>,
}

impl std::fmt::Debug for KongNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KongNet")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .finish_non_exhaustive()
    }
}

impl KongNet {
    /// Builds the network with weights drawn from a seeded RNG.
    pub fn new(config: ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let net = Self::build(config, dtype, device)?;
        init_weights(&net.varmap, seed)?;
        Ok(net)
    }

    fn build(config: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let encoder = config.encoder.build(vb.pp("encoder"))?;
        let enc_ch = encoder.channels();
        let width = config.decoder_widths[4];
        let r = config.scse_reduction;
        let decoders = match config.variant {
            Variant::Full => (0..config.n_classes)
                .map(|k| {
                    let vb = vb.pp(format!("decoder{k}"));
                    Ok((
                        Decoder::new(enc_ch, config.decoder_widths, r, vb.pp("blocks"))?,
                        Heads::new(width, 1, true, vb.pp("heads"))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?,
            Variant::SingleHead | Variant::DetectionOnly => {
                let vb = vb.pp("decoder0");
                vec![(
                    Decoder::new(enc_ch, config.decoder_widths, r, vb.pp("blocks"))?,
                    Heads::new(
                        width,
                        config.n_classes,
                        config.variant.has_segmentation(),
                        vb.pp("heads"),
                    )?,
                )]
            }
        };
        Ok(Self {
            config,
            varmap,
            device: device.clone(),
            dtype,
            encoder,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Trainable variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        sorted_vars(&self.varmap)
    }

    pub fn count_parameters(&self) -> usize {
        self.varmap.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    /// `x`: `(B, 3, H, W)` RGB in `[0, 1]`; H and W must be multiples of 32.
    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not a positive multiple of {OUTPUT_STRIDE}"
            )));
        }
        let x = x.to_dtype(self.dtype)?;
        let mean = Tensor::new(&self.config.norm_mean, &self.device)?
            .to_dtype(self.dtype)?
            .reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&self.config.norm_std, &self.device)?
            .to_dtype(self.dtype)?
            .reshape((1, 3, 1, 1))?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let pyramid = self.encoder.forward(&x)?;
        let mut outs = Vec::with_capacity(self.decoders.len());
        for (decoder, heads) in &self.decoders {
            outs.push(heads.forward(&decoder.forward(&pyramid.levels)?)?);
        }
        if outs.len() == 1 {
            return Ok(outs.pop().expect("one output"));
        }
        let cat = |get: &dyn Fn(&ModelOutput) -> Option<&Tensor>| -> Result<Option<Tensor>> {
            let parts: Option<Vec<&Tensor>> = outs.iter().map(get).collect();
            parts.map(|p| Ok(Tensor::cat(&p, 1)?)).transpose()
        };
        Ok(ModelOutput {
            centroid: cat(&|o| Some(&o.centroid))?.expect("centroid heads"),
            seg: cat(&|o| o.seg.as_ref())?,
            contour: cat(&|o| o.contour.as_ref())?,
        })
    }

    /// Runs the network on HWC images of identical size and returns per-image
    /// probability maps.
    pub fn predict(&self, images: &[&Array3<f32>]) -> Result<Vec<PredictionMaps>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = images_to_tensor(images, &self.device)?;
        self.forward(&x)?.to_prediction_maps()
    }
}

/// Stacks HWC images into a `(B, 3, H, W)` f32 tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let (h, w, c) = images[0].dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::Shape(format!(
                "batch images differ in shape: {:?} vs {:?}",
                img.dim(),
                (h, w, c)
            )));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, c), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

pub(crate) fn sorted_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// He-uniform weights (`±sqrt(6 / fan_in)`) and zero biases, drawn in
/// variable-name order so the result only depends on `seed`.
pub fn init_weights(varmap: &VarMap, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, var) in sorted_vars(varmap) {
        let dims = var.dims().to_vec();
        let t = if name.ends_with("bias") {
            var.zeros_like()?
        } else {
            let fan_in: usize = dims[1..].iter().product::<usize>().max(1);
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let values: Vec<f64> = (0..var.elem_count()).map(|_| rng.sample(dist)).collect();
            Tensor::from_vec(values, dims.as_slice(), var.device())?.to_dtype(var.dtype())?
        };
        var.set(&t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(i: usize, o: usize, k: usize) -> usize {
        o * i * k * k + o
    }

    fn scse(c: usize, r: usize) -> usize {
        let h = (c / r).max(1);
        conv(c, h, 1) + conv(h, c, 1) + conv(c, 1, 1)
    }

    fn expected_params(cfg: &ModelConfig) -> usize {
        let EncoderSpec::SimpleCnn {
            widths,
            convs_per_stage,
        } = cfg.encoder.clone();
        let mut total = 0;
        let mut in_ch = 3;
        for &w in &widths {
            total += conv(in_ch, w, 3) + (convs_per_stage - 1) * conv(w, w, 3);
            in_ch = w;
        }
        let mut decoder = 0;
        let mut in_ch = widths[4];
        for (i, &o) in cfg.decoder_widths.iter().enumerate() {
            let skip = if i < 4 { widths[3 - i] } else { 0 };
            decoder += conv(in_ch, 4 * o, 3)
                + scse(4 * o, cfg.scse_reduction)
                + conv(o + skip, o, 3)
                + scse(o, cfg.scse_reduction);
            in_ch = o;
        }
        let last = cfg.decoder_widths[4];
        let k = cfg.n_classes;
        total
            + match cfg.variant {
                Variant::Full => k * (decoder + 3 * conv(last, 1, 3)),
                Variant::SingleHead => decoder + 3 * conv(last, k, 3),
                Variant::DetectionOnly => decoder + conv(last, k, 3),
            }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for variant in [Variant::Full, Variant::SingleHead, Variant::DetectionOnly] {
            for k in [1, 3] {
                let cfg = ModelConfig::toy(k, variant);
                let net = KongNet::new(cfg.clone(), DType::F32, &Device::Cpu, 0).unwrap();
                assert_eq!(net.count_parameters(), expected_params(&cfg), "{variant:?} k={k}");
            }
        }
    }

    #[test]
    fn parameter_count_orders_variants() {
        let a = KongNet::new(ModelConfig::toy(1, Variant::Full), DType::F32, &Device::Cpu, 0).unwrap();
        let b = KongNet::new(ModelConfig::toy(3, Variant::Full), DType::F32, &Device::Cpu, 0).unwrap();
        let d = KongNet::new(ModelConfig::toy(3, Variant::DetectionOnly), DType::F32, &Device::Cpu, 0).unwrap();
        let extra = b.count_parameters() - a.count_parameters();
        assert_eq!(extra % 2, 0);
        let per_decoder = extra / 2;
        let encoder = a.count_parameters() - per_decoder;
        assert!(encoder > 0);
        assert!(d.count_parameters() < encoder + per_decoder + 100);
        assert!(b.count_parameters() > d.count_parameters());
    }

    #[test]
    fn output_shapes_per_variant() {
        let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 32), &Device::Cpu).unwrap();
        for variant in [Variant::Full, Variant::SingleHead, Variant::DetectionOnly] {
            let net = KongNet::new(ModelConfig::toy(3, variant), DType::F32, &Device::Cpu, 1).unwrap();
            let out = net.forward(&x).unwrap();
            assert_eq!(out.centroid.dims(), &[2, 3, 64, 32]);
            assert_eq!(out.seg.is_some(), variant.has_segmentation());
            assert_eq!(out.contour.is_some(), variant.has_segmentation());
            if let Some(s) = &out.seg {
                assert_eq!(s.dims(), &[2, 3, 64, 32]);
            }
            let v = out.centroid.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
            let maps = out.to_prediction_maps().unwrap();
            assert_eq!(maps.len(), 2);
            assert_eq!(maps[0].classes.len(), 3);
            assert_eq!(maps[1].dim(), Some((64, 32)));
        }
    }

    #[test]
    fn rejects_bad_sizes_and_configs() {
        let net = KongNet::new(ModelConfig::toy(2, Variant::Full), DType::F32, &Device::Cpu, 0).unwrap();
        let x = Tensor::zeros((1, 3, 48, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
        let x = Tensor::zeros((1, 4, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));

        let mut cfg = ModelConfig::toy(2, Variant::Full);
        cfg.decoder_widths = [8, 16, 8, 8, 8];
        assert!(matches!(
            KongNet::new(cfg, DType::F32, &Device::Cpu, 0),
            Err(Error::InvalidConfig(_))
        ));
        let mut cfg = ModelConfig::toy(2, Variant::Full);
        cfg.n_classes = 0;
        assert!(KongNet::new(cfg, DType::F32, &Device::Cpu, 0).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ModelConfig::toy(2, Variant::SingleHead);
        let a = KongNet::new(cfg.clone(), DType::F32, &Device::Cpu, 7).unwrap();
        let b = KongNet::new(cfg.clone(), DType::F32, &Device::Cpu, 7).unwrap();
        let c = KongNet::new(cfg, DType::F32, &Device::Cpu, 8).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let ya = a
            .forward(&x)
            .unwrap()
            .centroid
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let yb = b
            .forward(&x)
            .unwrap()
            .centroid
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let yc = c
            .forward(&x)
            .unwrap()
            .centroid
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(ya, yb);
        assert_ne!(ya, yc);
    }
}
