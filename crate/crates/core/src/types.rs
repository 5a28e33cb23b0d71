//! Shared domain types.
//!
//! Coordinates are `(x = column, y = row)`, zero-indexed, with pixel centres at
//! integer positions. Class index 0 is the first foreground class; background
//! has no index outside the sampler.

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted patch side.
pub const MIN_PATCH_SIDE: usize = 32;

/// An RGB image patch with intensities in `[0, 1]`, stored `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    id: String,
    pixels: Array3<f32>,
    mpp: f64,
}

impl ImagePatch {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>, mpp: f64) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_PATCH_SIDE || w < MIN_PATCH_SIDE {
            return Err(Error::InvalidInput(format!(
                "patch {h}x{w} smaller than {MIN_PATCH_SIDE}x{MIN_PATCH_SIDE}"
            )));
        }
        if !(mpp.is_finite() && mpp > 0.0) {
            return Err(Error::InvalidInput(format!("mpp must be positive, got {mpp}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput("pixel intensities must lie in [0, 1]".into()));
        }
        Ok(Self {
            id: id.into(),
            pixels,
            mpp,
        })
    }

    /// Builds a patch from 8-bit intensities in `[0, 255]`.
    pub fn from_rgb8(id: impl Into<String>, pixels: &Array3<u8>, mpp: f64) -> Result<Self> {
        Self::new(id, pixels.mapv(|v| v as f32 / 255.0), mpp)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn to_rgb8(&self) -> Array3<u8> {
        self.pixels.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
    }
}

/// One foreground class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    /// Diameter of the centroid dilation disk, in pixels. Must be odd.
    pub dilation_diameter: usize,
    /// Matching radius used during evaluation, in pixels.
    pub match_radius: f64,
}

/// Ordered foreground classes. Decoder `k` predicts `classes[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub classes: Vec<ClassInfo>,
}

impl ClassSpec {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        let spec = Self { classes };
        spec.validate()?;
        Ok(spec)
    }

    /// Convenience constructor: every class shares one diameter and radius.
    pub fn uniform(names: &[&str], dilation_diameter: usize, match_radius: f64) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| ClassInfo {
                    name: n.to_string(),
                    dilation_diameter,
                    match_radius,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("class spec has no classes".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate class name `{}`", c.name)));
            }
            if c.dilation_diameter == 0 || c.dilation_diameter % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "class `{}`: dilation diameter {} is not an odd positive integer",
                    c.name, c.dilation_diameter
                )));
            }
            if !(c.match_radius > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "class `{}`: match radius must be positive",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.classes.get(index).map(|c| c.name.as_str())
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// A class-labelled point annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub class_index: usize,
}

/// Ground truth for one patch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub centroids: Vec<Centroid>,
    /// Instance label map, 0 = background.
    pub instance_mask: Option<Array2<u32>>,
    /// Class index of instance label `l` at position `l - 1`.
    pub instance_classes: Option<Vec<usize>>,
}

impl AnnotationSet {
    pub fn from_centroids(centroids: Vec<Centroid>) -> Self {
        Self {
            centroids,
            ..Default::default()
        }
    }

    pub fn has_instances(&self) -> bool {
        self.instance_mask.is_some()
    }

    pub fn count_per_class(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for c in &self.centroids {
            if let Some(slot) = counts.get_mut(c.class_index) {
                *slot += 1;
            }
        }
        counts
    }
}

/// A single problem found by [`validate_annotation`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
    },
    UnknownClass {
        index: usize,
        class_index: usize,
    },
    MaskShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    NonContiguousLabels {
        missing: Vec<u32>,
    },
    InstanceClassCount {
        labels: usize,
        classes: usize,
    },
    UnknownInstanceClass {
        label: u32,
        class_index: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutOfBounds { index, x, y } => {
                write!(f, "centroid {index} at ({x}, {y}) is out of bounds")
            }
            Violation::UnknownClass { index, class_index } => {
                write!(f, "centroid {index} has unknown class index {class_index}")
            }
            Violation::MaskShape { expected, found } => write!(
                f,
                "instance mask is {}x{}, patch is {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            Violation::NonContiguousLabels { missing } => {
                write!(f, "non-contiguous labels: missing {missing:?}")
            }
            Violation::InstanceClassCount { labels, classes } => {
                write!(f, "{labels} instance labels but {classes} instance class entries")
            }
            Violation::UnknownInstanceClass { label, class_index } => {
                write!(f, "instance {label} has unknown class index {class_index}")
            }
        }
    }
}

/// Checks an annotation against its patch geometry and class list.
///
/// Returns every violation found; an empty list means the annotation is valid.
pub fn validate_annotation(
    annotation: &AnnotationSet,
    height: usize,
    width: usize,
    classes: &ClassSpec,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (index, c) in annotation.centroids.iter().enumerate() {
        let inside =
            c.x.is_finite() && c.y.is_finite() && c.x >= 0.0 && c.y >= 0.0 && c.x < width as f64 && c.y < height as f64;
        if !inside {
            out.push(Violation::OutOfBounds { index, x: c.x, y: c.y });
        }
        if c.class_index >= classes.len() {
            out.push(Violation::UnknownClass {
                index,
                class_index: c.class_index,
            });
        }
    }

    if let Some(mask) = &annotation.instance_mask {
        if mask.dim() != (height, width) {
            out.push(Violation::MaskShape {
                expected: (height, width),
                found: mask.dim(),
            });
        }
        let present: HashSet<u32> = mask.iter().copied().filter(|&l| l > 0).collect();
        let max = present.iter().copied().max().unwrap_or(0);
        let mut missing: Vec<u32> = (1..=max).filter(|l| !present.contains(l)).collect();
        if !missing.is_empty() {
            missing.sort_unstable();
            out.push(Violation::NonContiguousLabels { missing });
        }
        if let Some(instance_classes) = &annotation.instance_classes {
            if instance_classes.len() != max as usize {
                out.push(Violation::InstanceClassCount {
                    labels: max as usize,
                    classes: instance_classes.len(),
                });
            }
            for (i, &k) in instance_classes.iter().enumerate() {
                if k >= classes.len() {
                    out.push(Violation::UnknownInstanceClass {
                        label: i as u32 + 1,
                        class_index: k,
                    });
                }
            }
        }
    }
    out
}

/// Binary training targets for one class. Values are 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargets {
    pub centroid: Array2<u8>,
    /// `None` in detection-only mode.
    pub nucleus: Option<Array2<u8>>,
    pub contour: Option<Array2<u8>>,
}

/// Per-class training targets for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaskSet {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassTargets>,
}

impl TargetMaskSet {
    pub fn has_segmentation(&self) -> bool {
        self.classes.iter().all(|c| c.nucleus.is_some() && c.contour.is_some())
    }
}

/// A point detection. Coordinates are pixels unless stated otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub class_index: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn new(x: f64, y: f64, class_index: usize, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidInput(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            x,
            y,
            class_index,
            confidence,
        })
    }
}

/// Probability maps for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMaps {
    pub centroid: Array2<f32>,
    /// Absent for detection-only outputs.
    pub seg: Option<Array2<f32>>,
    pub contour: Option<Array2<f32>>,
}

/// Model output for one patch; `classes[k]` follows the [`ClassSpec`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps {
    pub classes: Vec<ClassMaps>,
}

impl PredictionMaps {
    pub fn dim(&self) -> Option<(usize, usize)> {
        self.classes.first().map(|c| c.centroid.dim())
    }

    /// Applies `f` to every map.
    pub fn map_all(&self, mut f: impl FnMut(&Array2<f32>) -> Array2<f32>) -> Self {
        Self {
            classes: self
                .classes
                .iter()
                .map(|c| ClassMaps {
                    centroid: f(&c.centroid),
                    seg: c.seg.as_ref().map(&mut f),
                    contour: c.contour.as_ref().map(&mut f),
                })
                .collect(),
        }
    }
}
