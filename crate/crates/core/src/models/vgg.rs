//! VGG-16 convolutional encoder with a transposed-convolution decoder.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, ConvTranspose2d, ConvTranspose2dConfig};

use super::layers::{max_pool2x2, BilinearResize, ParamStore};
use crate::error::Result;

/// Output resolution fixed by the decoder's final upsample.
pub const VGG_OUTPUT_SIZE: usize = 512;

/// VGG-16 feature stack: channel count per conv, `None` for a 2×2 max pool.
/// Indices follow the torchvision `features` sequence so pretrained
/// checkpoints map onto it directly.
const VGG16_FEATURES: [Option<usize>; 18] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
];

/// (c_in, c_out) of each decoder upsampling stage.
pub const DECODER_STAGES: [(usize, usize); 3] = [(512, 256), (256, 128), (128, 64)];

/// Upsampling stage geometry: each transposed conv doubles the spatial size.
pub const DECODER_UPSAMPLE: ConvTranspose2dConfig = ConvTranspose2dConfig {
    padding: 1,
    output_padding: 1,
    stride: 2,
    dilation: 1,
};
pub const DECODER_KERNEL: usize = 3;

enum Stage {
    Conv(Conv2d),
    Pool,
}

pub struct VggEncoder {
    stages: Vec<Stage>,
}

/// Names of the encoder convolutions in torchvision numbering
/// (`features.0`, `features.2`, ...), each with `.weight` and `.bias`.
pub fn encoder_layer_names() -> Vec<String> {
    let mut names = Vec::new();
    let mut idx = 0;
    for stage in VGG16_FEATURES {
        match stage {
            Some(_) => {
                names.push(format!("features.{idx}"));
                idx += 2; // conv + relu
            }
            None => idx += 1,
        }
    }
    names
}

impl VggEncoder {
    fn new(params: &mut ParamStore) -> Result<Self> {
        let names = encoder_layer_names();
        let mut names = names.iter();
        let mut c_in = 3;
        let mut stages = Vec::new();
        for stage in VGG16_FEATURES {
            match stage {
                Some(c_out) => {
                    let name = names.next().expect("one name per conv");
                    stages.push(Stage::Conv(params.conv2d(&format!("encoder.{name}"), c_in, c_out, 3, 1)?));
                    c_in = c_out;
                }
                None => stages.push(Stage::Pool),
            }
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut xs = xs.clone();
        for stage in &self.stages {
            xs = match stage {
                Stage::Conv(c) => c.forward(&xs)?.relu()?,
                Stage::Pool => max_pool2x2(&xs)?,
            };
        }
        Ok(xs)
    }
}

pub struct VggDecoderHead {
    ups: Vec<ConvTranspose2d>,
    head: Conv2d,
    resize: BilinearResize,
}

impl VggDecoderHead {
    /// `feature_size` is the spatial size of the encoder output.
    pub(crate) fn new(params: &mut ParamStore, feature_size: usize, dtype: DType, device: &Device) -> Result<Self> {
        let ups = DECODER_STAGES
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out))| {
                params.conv_transpose2d(&format!("decoder.up{}", i + 1), c_in, c_out, DECODER_KERNEL, DECODER_UPSAMPLE)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = params.conv2d("decoder.head", 64, 1, 1, 0)?;
        let upsampled = feature_size << DECODER_STAGES.len();
        let resize = BilinearResize::new(
            (upsampled, upsampled),
            (VGG_OUTPUT_SIZE, VGG_OUTPUT_SIZE),
            dtype,
            device,
        )?;
        Ok(Self { ups, head, resize })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut xs = xs.clone();
        for up in &self.ups {
            xs = up.forward(&xs)?.relu()?;
        }
        let xs = self.head.forward(&xs)?;
        self.resize.forward(&xs)
    }
}

pub struct VggSegNet {
    pub(crate) encoder: VggEncoder,
    pub(crate) decoder: VggDecoderHead,
}

impl VggSegNet {
    pub(crate) fn new(params: &mut ParamStore, input_size: usize, dtype: DType, device: &Device) -> Result<Self> {
        let encoder = VggEncoder::new(params)?;
        let pools = VGG16_FEATURES.iter().filter(|s| s.is_none()).count();
        let decoder = VggDecoderHead::new(params, input_size >> pools, dtype, device)?;
        Ok(Self { encoder, decoder })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&self.encoder.forward(xs)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torchvision_indices() {
        let names = encoder_layer_names();
        assert_eq!(names.len(), 13);
        assert_eq!(names[0], "features.0");
        assert_eq!(names[2], "features.5");
        assert_eq!(names[12], "features.28");
    }

    #[test]
    fn decoder_head_shapes_at_reduced_encoder_size() {
        let dev = Device::Cpu;
        let mut p = ParamStore::new(0, DType::F32, dev.clone());
        let head = VggDecoderHead::new(&mut p, 2, DType::F32, &dev).unwrap();
        let x = Tensor::zeros((2, 512, 2, 2), DType::F32, &dev).unwrap();
        assert_eq!(head.forward(&x).unwrap().dims(), &[2, 1, 512, 512]);
    }
}
