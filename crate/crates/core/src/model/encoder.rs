//! Pluggable encoders behind a five-level feature pyramid.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};
use serde::{Deserialize, Serialize};

use super::blocks::conv3x3;
use crate::error::{Error, Result};

/// Five feature maps at strides 2, 4, 8, 16 and 32; `levels[4]` is the
/// deepest and feeds the first decoder block.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 5],
}

pub trait Backbone: Send + Sync {
    fn channels(&self) -> [usize; 5];
    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid>;
}

/// Encoder identifier stored in the model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// Plain strided CNN: per stage one stride-2 conv followed by
    /// `convs_per_stage - 1` stride-1 convs, all 3×3 with SiLU.
    SimpleCnn { widths: [usize; 5], convs_per_stage: usize },
}

impl EncoderSpec {
    pub fn channels(&self) -> [usize; 5] {
        match self {
            EncoderSpec::SimpleCnn { widths, .. } => *widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderSpec::SimpleCnn {
                widths,
                convs_per_stage,
            } => {
                if widths.contains(&0) || *convs_per_stage == 0 {
                    return Err(Error::InvalidConfig("encoder widths and depth must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, vb: VarBuilder) -> Result<Box<dyn Backbone>> {
        self.validate()?;
        match self {
            EncoderSpec::SimpleCnn {
                widths,
                convs_per_stage,
            } => Ok(Box::new(SimpleCnn::new(*widths, *convs_per_stage, vb)?)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimpleCnn {
    widths: [usize; 5],
    stages: Vec<Vec<Conv2d>>,
}

impl SimpleCnn {
    pub fn new(widths: [usize; 5], convs_per_stage: usize, vb: VarBuilder) -> Result<Self> {
        let mut stages = Vec::with_capacity(5);
        let mut in_ch = 3;
        for (s, &w) in widths.iter().enumerate() {
            let vb = vb.pp(format!("stage{s}"));
            let mut convs = vec![conv3x3(in_ch, w, 2, vb.pp("conv0"))?];
            for i in 1..convs_per_stage {
                convs.push(conv3x3(w, w, 1, vb.pp(format!("conv{i}")))?);
            }
            stages.push(convs);
            in_ch = w;
        }
        Ok(Self { widths, stages })
    }
}

impl Backbone for SimpleCnn {
    fn channels(&self) -> [usize; 5] {
        self.widths
    }

    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut levels = Vec::with_capacity(5);
        let mut h = x.clone();
        for stage in &self.stages {
            for conv in stage {
                h = conv.forward(&h)?.silu()?;
            }
            levels.push(h.clone());
        }
        let levels: [Tensor; 5] = levels.try_into().expect("five stages");
        Ok(FeaturePyramid { levels })
    }
}
