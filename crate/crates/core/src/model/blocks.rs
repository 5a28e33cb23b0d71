use candle_core::{Module, Tensor};
use candle_nn::{conv2d, ops::sigmoid, Conv2d, Conv2dConfig, VarBuilder};

use crate::error::{Error, Result};

pub(crate) fn conv3x3(in_ch: usize, out_ch: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(conv2d(in_ch, out_ch, 3, cfg, vb)?)
}

pub(crate) fn conv1x1(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(conv2d(in_ch, out_ch, 1, Conv2dConfig::default(), vb)?)
}

/// Concurrent spatial and channel squeeze-and-excitation:
/// `x · cSE(x) + x · sSE(x)`. The channel excitation uses SiLU.
#[derive(Debug, Clone)]
pub struct Scse {
    squeeze: Conv2d,
    excite: Conv2d,
    spatial: Conv2d,
}

impl Scse {
    pub fn new(channels: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            squeeze: conv1x1(channels, hidden, vb.pp("cse.squeeze"))?,
            excite: conv1x1(hidden, channels, vb.pp("cse.excite"))?,
            spatial: conv1x1(channels, 1, vb.pp("sse"))?,
        })
    }

    /// Per-channel gates, shape `(B, C, 1, 1)`.
    pub fn channel_gates(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim((2, 3))?;
        let hidden = self.squeeze.forward(&pooled)?.silu()?;
        Ok(sigmoid(&self.excite.forward(&hidden)?)?)
    }

    /// Per-pixel gates, shape `(B, 1, H, W)`.
    pub fn spatial_gates(&self, x: &Tensor) -> Result<Tensor> {
        Ok(sigmoid(&self.spatial.forward(x)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.broadcast_mul(&self.channel_gates(x)?)?;
        let s = x.broadcast_mul(&self.spatial_gates(x)?)?;
        Ok((c + s)?)
    }
}

/// Sub-pixel upsampling: `(B, C·r², H, W) → (B, C, H·r, W·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "pixel shuffle needs channels divisible by {}, got {c}",
            r * r
        )));
    }
    Ok(candle_nn::ops::pixel_shuffle(x, r)?)
}

/// One decoder stage at twice the input resolution:
/// `conv → SiLU → SCSE → pixel-shuffle(2) → concat skip → conv → SiLU → SCSE`.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    in_ch: usize,
    skip_ch: usize,
    expand: Conv2d,
    scse_up: Scse,
    fuse: Conv2d,
    scse_out: Scse,
}

impl DecoderBlock {
    pub fn new(in_ch: usize, skip_ch: usize, out_ch: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            in_ch,
            skip_ch,
            expand: conv3x3(in_ch, 4 * out_ch, 1, vb.pp("expand"))?,
            scse_up: Scse::new(4 * out_ch, reduction, vb.pp("scse_up"))?,
            fuse: conv3x3(out_ch + skip_ch, out_ch, 1, vb.pp("fuse"))?,
            scse_out: Scse::new(out_ch, reduction, vb.pp("scse_out"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "decoder block expects {} channels, got {c}",
                self.in_ch
            )));
        }
        let x = self.expand.forward(x)?.silu()?;
        let x = self.scse_up.forward(&x)?;
        let x = pixel_shuffle(&x, 2)?;
        let x = match skip {
            Some(s) => {
                let (_, sc, sh, sw) = s.dims4()?;
                if sc != self.skip_ch || sh != 2 * h || sw != 2 * w {
                    return Err(Error::Shape(format!(
                        "skip {:?} does not fit block (skip channels {}, output {}x{})",
                        s.dims(),
                        self.skip_ch,
                        2 * h,
                        2 * w
                    )));
                }
                Tensor::cat(&[&x, s], 1)?
            }
            None if self.skip_ch == 0 => x,
            None => return Err(Error::Shape("decoder block expects a skip connection".into())),
        };
        let x = self.fuse.forward(&x)?.silu()?;
        self.scse_out.forward(&x)
    }
}

/// Five decoder blocks taking the pyramid from deepest to shallowest; the
/// last block has no skip and restores input resolution.
#[derive(Debug, Clone)]
pub struct Decoder {
    blocks: Vec<DecoderBlock>,
}

impl Decoder {
    pub fn new(encoder_channels: [usize; 5], widths: [usize; 5], reduction: usize, vb: VarBuilder) -> Result<Self> {
        let mut blocks = Vec::with_capacity(5);
        let mut in_ch = encoder_channels[4];
        for (i, &out_ch) in widths.iter().enumerate() {
            let skip_ch = if i < 4 { encoder_channels[3 - i] } else { 0 };
            blocks.push(DecoderBlock::new(
                in_ch,
                skip_ch,
                out_ch,
                reduction,
                vb.pp(format!("block{i}")),
            )?);
            in_ch = out_ch;
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, levels: &[Tensor; 5]) -> Result<Tensor> {
        let mut x = levels[4].clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = if i < 4 { Some(&levels[3 - i]) } else { None };
            x = block.forward(&x, skip)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    #[test]
    fn pixel_shuffle_rearranges_channels_into_space() {
        let data: Vec<f32> = (0..8 * 16).map(|v| v as f32).collect();
        let x = Tensor::from_vec(data.clone(), (1, 8, 4, 4), &Device::Cpu).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 8, 8]);
        let out = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mut sorted_in = data.clone();
        let mut sorted_out = out.clone();
        sorted_in.sort_by(f32::total_cmp);
        sorted_out.sort_by(f32::total_cmp);
        assert_eq!(sorted_in, sorted_out);
        // out[c, 2h+i, 2w+j] = in[4c + 2i + j, h, w]
        for c in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let o = out[c * 64 + (2 * h + i) * 8 + (2 * w + j)];
                            let src = data[(4 * c + 2 * i + j) * 16 + h * 4 + w];
                            assert_eq!(o, src);
                        }
                    }
                }
            }
        }
        let bad = Tensor::zeros((1, 6, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(pixel_shuffle(&bad, 2).is_err());
    }

    #[test]
    fn scse_gates_are_symmetric_for_symmetric_input_and_weights() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F64, &Device::Cpu);
        let scse = Scse::new(8, 2, vb).unwrap();
        // channel-symmetric parameters: every squeeze/excite weight identical
        for (name, var) in varmap.data().lock().unwrap().iter() {
            if name.starts_with("cse") {
                let c = Tensor::full(0.1f64, var.shape(), &Device::Cpu).unwrap();
                var.set(&c).unwrap();
            }
        }
        let x = Tensor::full(0.7f64, (1, 8, 5, 5), &Device::Cpu).unwrap();
        let g = scse
            .channel_gates(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(g.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn block_doubles_resolution() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        for (i, (in_ch, skip_ch, out_ch, h, w)) in [(8, 4, 4, 2, 3), (16, 8, 8, 5, 4), (4, 0, 2, 7, 7)]
            .into_iter()
            .enumerate()
        {
            let block = DecoderBlock::new(in_ch, skip_ch, out_ch, 2, vb.pp(format!("b{i}"))).unwrap();
            let x = Tensor::randn(0f32, 1.0, (2, in_ch, h, w), &Device::Cpu).unwrap();
            let skip = Tensor::randn(0f32, 1.0, (2, skip_ch, 2 * h, 2 * w), &Device::Cpu).unwrap();
            let y = block.forward(&x, (skip_ch > 0).then_some(&skip)).unwrap();
            assert_eq!(y.dims(), &[2, out_ch, 2 * h, 2 * w]);
        }
    }

    #[test]
    fn block_rejects_channel_mismatch() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let block = DecoderBlock::new(8, 4, 4, 2, vb).unwrap();
        let x = Tensor::zeros((1, 6, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let skip = Tensor::zeros((1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(block.forward(&x, Some(&skip)), Err(Error::Shape(_))));
        let x = Tensor::zeros((1, 8, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let skip = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(block.forward(&x, Some(&skip)).is_err());
    }
}
