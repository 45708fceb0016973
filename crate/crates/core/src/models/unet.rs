//! U-Net with padded convolutions, so the logit map matches the input size.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, ConvTranspose2d, ConvTranspose2dConfig};

use super::layers::{max_pool2x2, ParamStore};
use crate::error::Result;

/// Number of 2× downsamplings between input and bottleneck.
pub const UNET_DEPTH: usize = 4;

struct DoubleConv {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl DoubleConv {
    fn new(params: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: params.conv2d(&format!("{prefix}.conv1"), c_in, c_out, 3, 1)?,
            conv2: params.conv2d(&format!("{prefix}.conv2"), c_out, c_out, 3, 1)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let xs = self.conv1.forward(xs)?.relu()?;
        Ok(self.conv2.forward(&xs)?.relu()?)
    }
}

struct UpStage {
    upconv: ConvTranspose2d,
    block: DoubleConv,
}

pub struct UNet {
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<UpStage>,
    head: Conv2d,
}

impl UNet {
    pub(crate) fn new(params: &mut ParamStore, base_channels: usize) -> Result<Self> {
        let widths: Vec<usize> = (0..=UNET_DEPTH).map(|d| base_channels << d).collect();
        let mut down = Vec::with_capacity(UNET_DEPTH);
        let mut c_in = 3;
        for (d, &w) in widths[..UNET_DEPTH].iter().enumerate() {
            down.push(DoubleConv::new(params, &format!("down{d}"), c_in, w)?);
            c_in = w;
        }
        let bottleneck = DoubleConv::new(params, "bottleneck", c_in, widths[UNET_DEPTH])?;
        let mut up = Vec::with_capacity(UNET_DEPTH);
        let up_cfg = ConvTranspose2dConfig {
            stride: 2,
            ..Default::default()
        };
        for d in (0..UNET_DEPTH).rev() {
            let (wide, narrow) = (widths[d + 1], widths[d]);
            up.push(UpStage {
                upconv: params.conv_transpose2d(&format!("up{d}.upconv"), wide, narrow, 2, up_cfg)?,
                // skip connection doubles the channel count
                block: DoubleConv::new(params, &format!("up{d}"), 2 * narrow, narrow)?,
            });
        }
        let head = params.conv2d("head", widths[0], 1, 1, 0)?;
        Ok(Self {
            down,
            bottleneck,
            up,
            head,
        })
    }

    /// Encoder feature maps at depths 0..=4 (the last is the bottleneck).
    pub fn encoder_features(&self, xs: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(UNET_DEPTH + 1);
        let mut h = xs.clone();
        for block in &self.down {
            let f = block.forward(&h)?;
            h = max_pool2x2(&f)?;
            feats.push(f);
        }
        feats.push(self.bottleneck.forward(&h)?);
        Ok(feats)
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut feats = self.encoder_features(xs)?;
        let mut h = feats.pop().expect("bottleneck");
        for stage in &self.up {
            let skip = feats.pop().expect("one skip per stage");
            let upsampled = stage.upconv.forward(&h)?;
            h = stage.block.forward(&Tensor::cat(&[&skip, &upsampled], 1)?)?;
        }
        Ok(self.head.forward(&h)?)
    }
}
