//! TOML documents read by the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EmptyImages;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::postprocess::PostprocessConfig;
use crate::types::{ClassInfo, ClassSpec};

use super::train::TrainConfig;

/// Name of the appended union class.
pub const OVERALL_CLASS: &str = "overall";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    /// Directory of `<id>.png` patches with annotations.
    pub data_dir: PathBuf,
    #[serde(default = "default_mpp")]
    pub mpp: f64,
    pub classes: Vec<ClassInfo>,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model_seed: u64,
    pub output: PathBuf,
    pub loss_log: Option<PathBuf>,
}

fn default_mpp() -> f64 {
    0.5
}

impl TrainFile {
    /// Parses `path`; relative paths inside are resolved against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: TrainFile =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data_dir);
        resolve(&mut cfg.output);
        if let Some(p) = cfg.loss_log.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Annotated classes, without the overall class.
    pub fn annotated_classes(&self) -> Result<ClassSpec> {
        ClassSpec::new(self.classes.clone())
    }

    /// Output classes of the model: annotated classes plus the overall class
    /// when the model config asks for it.
    pub fn output_classes(&self) -> Result<ClassSpec> {
        let mut classes = self.classes.clone();
        if self.model.overall_class {
            let first = classes
                .first()
                .ok_or_else(|| Error::InvalidConfig("no classes".into()))?;
            classes.push(ClassInfo {
                name: OVERALL_CLASS.to_string(),
                dilation_diameter: first.dilation_diameter,
                match_radius: first.match_radius,
            });
        }
        let spec = ClassSpec::new(classes)?;
        if spec.len() != self.model.n_classes {
            return Err(Error::InvalidConfig(format!(
                "{} output classes but model.n_classes = {}",
                spec.len(),
                self.model.n_classes
            )));
        }
        Ok(spec)
    }
}

/// Post-processing settings: one entry shared by all classes or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocessFile {
    pub classes: Vec<PostprocessConfig>,
}

impl PostprocessFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn preset(name: &str) -> Result<PostprocessConfig> {
        Ok(match name {
            "monkey" => PostprocessConfig::monkey(),
            "puma" => PostprocessConfig::puma(),
            "pannuke" => PostprocessConfig::pannuke(),
            "conic" => PostprocessConfig::conic(),
            "midog" => PostprocessConfig::midog(),
            other => return Err(Error::InvalidConfig(format!("unknown postprocess preset `{other}`"))),
        })
    }
}

/// Evaluation settings. Radii are in pixels; `margin_um` with `mpp`
/// overrides `radius` for FROC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalFile {
    pub radius: Option<f64>,
    pub margin_um: Option<f64>,
    pub mpp: f64,
    /// Annotated area per image, mm². Derived from `image_size` when absent.
    pub area_mm2_per_image: Option<f64>,
    /// `(height, width)` of every image in pixels.
    pub image_size: Option<(usize, usize)>,
    pub fp_rates: Vec<f64>,
    /// Class order; defaults to the sorted union of names in both files.
    pub classes: Option<Vec<String>>,
    /// Per-image F1 treatment of images without points of a class.
    pub empty_images: EmptyImages,
}

impl Default for EvalFile {
    fn default() -> Self {
        Self {
            radius: None,
            margin_um: None,
            mpp: 0.5,
            area_mm2_per_image: None,
            image_size: None,
            fp_rates: crate::eval::DEFAULT_FP_RATES.to_vec(),
            classes: None,
            empty_images: EmptyImages::Skip,
        }
    }
}

impl EvalFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}
