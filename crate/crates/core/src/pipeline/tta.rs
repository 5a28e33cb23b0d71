//! Test-time augmentation over rotations and flips with probability
//! averaging.

use ndarray::{Array, Axis, Dimension, RemoveAxis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KongNet;
use crate::types::{ClassMaps, PredictionMaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TtaMode {
    #[default]
    None,
    X4,
    X16,
}

impl std::str::FromStr for TtaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TtaMode::None),
            "x4" => Ok(TtaMode::X4),
            "x16" => Ok(TtaMode::X16),
            other => Err(Error::InvalidInput(format!("unknown TTA mode `{other}`"))),
        }
    }
}

/// `x ↦ rot90^k(vflip^v(hflip^h(x)))`, rotations counter-clockwise. Applies
/// to the two leading (row, column) axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transform {
    pub rot: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rot: 0,
        hflip: false,
        vflip: false,
    };

    pub fn apply<A: Clone, D: Dimension + RemoveAxis>(&self, x: &Array<A, D>) -> Array<A, D> {
        let mut v = x.view();
        if self.hflip {
            v.invert_axis(Axis(1));
        }
        if self.vflip {
            v.invert_axis(Axis(0));
        }
        for _ in 0..self.rot % 4 {
            // counter-clockwise: transpose, then reverse rows
            v.swap_axes(0, 1);
            v.invert_axis(Axis(0));
        }
        v.as_standard_layout().into_owned()
    }

    pub fn invert<A: Clone, D: Dimension + RemoveAxis>(&self, y: &Array<A, D>) -> Array<A, D> {
        let mut v = y.view();
        for _ in 0..(4 - self.rot % 4) % 4 {
            v.swap_axes(0, 1);
            v.invert_axis(Axis(0));
        }
        if self.vflip {
            v.invert_axis(Axis(0));
        }
        if self.hflip {
            v.invert_axis(Axis(1));
        }
        v.as_standard_layout().into_owned()
    }
}

pub fn transforms(mode: TtaMode) -> Vec<Transform> {
    match mode {
        TtaMode::None => vec![Transform::IDENTITY],
        TtaMode::X4 => (0..4)
            .map(|rot| Transform {
                rot,
                ..Transform::IDENTITY
            })
            .collect(),
        TtaMode::X16 => {
            let mut out = Vec::with_capacity(16);
            for rot in 0..4 {
                for hflip in [false, true] {
                    for vflip in [false, true] {
                        out.push(Transform { rot, hflip, vflip });
                    }
                }
            }
            out
        }
    }
}

/// Averages already inverse-transformed maps.
pub fn average_maps(maps: &[PredictionMaps]) -> Result<PredictionMaps> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to average".into()))?;
    let n = maps.len() as f32;
    let mut acc = first.clone();
    for m in &maps[1..] {
        if m.classes.len() != acc.classes.len() {
            return Err(Error::Shape("maps disagree on class count".into()));
        }
        for (a, b) in acc.classes.iter_mut().zip(&m.classes) {
            a.centroid += &b.centroid;
            if let (Some(x), Some(y)) = (a.seg.as_mut(), b.seg.as_ref()) {
                *x += y;
            }
            if let (Some(x), Some(y)) = (a.contour.as_mut(), b.contour.as_ref()) {
                *x += y;
            }
        }
    }
    Ok(acc.map_all(|m| m / n))
}

/// Forward of every transformed copy in one batch, inverse-transform the
/// outputs and average them in probability space.
pub fn tta_forward(model: &KongNet, image: &ndarray::Array3<f32>, mode: TtaMode) -> Result<PredictionMaps> {
    let (h, w, _) = image.dim();
    if mode != TtaMode::None && h != w {
        return Err(Error::InvalidInput(format!(
            "rotation TTA needs a square patch, got {h}x{w}"
        )));
    }
    let ts = transforms(mode);
    let inputs: Vec<_> = ts.iter().map(|t| t.apply(image)).collect();
    let refs: Vec<_> = inputs.iter().collect();
    let outputs = model.predict(&refs)?;
    let restored: Vec<PredictionMaps> = ts
        .iter()
        .zip(outputs)
        .map(|(t, m)| PredictionMaps {
            classes: m
                .classes
                .iter()
                .map(|c| ClassMaps {
                    centroid: t.invert(&c.centroid),
                    seg: c.seg.as_ref().map(|s| t.invert(s)),
                    contour: c.contour.as_ref().map(|s| t.invert(s)),
                })
                .collect(),
        })
        .collect();
    average_maps(&restored)
}
