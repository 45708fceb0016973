//! Segmentation networks: VGG-16 encoder with transposed-convolution
//! decoder, and a padded U-Net. Both emit one channel of raw logits at the
//! input resolution.

mod layers;
pub mod unet;
pub mod vgg;

pub use layers::{interpolation_matrix, BilinearResize, ParamStore};

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use unet::{UNet, UNET_DEPTH};
use vgg::{VggSegNet, VGG_OUTPUT_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Vgg16Decoder,
    Unet,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Vgg16Decoder => "vgg16_decoder",
            Architecture::Unet => "unet",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "vgg16_decoder" => Some(Architecture::Vgg16Decoder),
            "unet" => Some(Architecture::Unet),
            _ => None,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

fn default_input_size() -> usize {
    512
}

fn default_base_channels() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Initialize the VGG encoder from ImageNet-trained weights.
    #[serde(default)]
    pub pretrained_encoder: bool,
    /// safetensors file with `features.{i}.weight|bias` tensors.
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    /// Exclude encoder parameters from optimization.
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Width of the first U-Net stage; doubles per level.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
}

impl ModelConfig {
    pub fn vgg16_decoder() -> Self {
        Self {
            architecture: Architecture::Vgg16Decoder,
            input_size: VGG_OUTPUT_SIZE,
            pretrained_encoder: false,
            pretrained_weights: None,
            freeze_encoder: false,
            base_channels: default_base_channels(),
        }
    }

    pub fn unet(input_size: usize, base_channels: usize) -> Self {
        Self {
            architecture: Architecture::Unet,
            input_size,
            pretrained_encoder: false,
            pretrained_weights: None,
            freeze_encoder: false,
            base_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.architecture {
            Architecture::Vgg16Decoder => {
                if self.input_size != VGG_OUTPUT_SIZE {
                    return Err(Error::Config(format!(
                        "vgg16_decoder produces {VGG_OUTPUT_SIZE}x{VGG_OUTPUT_SIZE} logits and needs input_size {VGG_OUTPUT_SIZE}, got {}",
                        self.input_size
                    )));
                }
            }
            Architecture::Unet => {
                if self.pretrained_encoder {
                    return Err(Error::Config("the U-Net has no pretrained encoder".into()));
                }
                if self.freeze_encoder {
                    return Err(Error::Config("freeze_encoder only applies to vgg16_decoder".into()));
                }
                let m = 1 << UNET_DEPTH;
                if self.input_size == 0 || self.input_size % m != 0 {
                    return Err(Error::Config(format!(
                        "U-Net input_size must be a positive multiple of {m}, got {}",
                        self.input_size
                    )));
                }
                if self.base_channels == 0 {
                    return Err(Error::Config("base_channels must be at least 1".into()));
                }
            }
        }
        Ok(())
    }
}

enum Net {
    Vgg(VggSegNet),
    Unet(UNet),
}

impl Net {
    fn build(config: &ModelConfig, params: &mut ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        Ok(match config.architecture {
            Architecture::Vgg16Decoder => Net::Vgg(VggSegNet::new(params, config.input_size, dtype, device)?),
            Architecture::Unet => Net::Unet(UNet::new(params, config.base_channels)?),
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        match self {
            Net::Vgg(n) => n.forward(xs),
            Net::Unet(n) => n.forward(xs),
        }
    }
}

/// A network plus its named parameters.
pub struct SegmentationModel {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    net: Net,
    /// Same network over detached weights, for graph-free inference.
    inference: Net,
}

impl std::fmt::Debug for SegmentationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegmentationModel")
            .field("architecture", &self.config.architecture)
            .field("input_size", &self.config.input_size)
            .field("dtype", &self.dtype)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

/// Anything that maps a `B×3×S×S` batch to `B×1×S×S` road logits.
/// Evaluation is written against this so that reference predictors can
/// stand in for a network.
pub trait Segmenter {
    fn input_size(&self) -> usize;
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

impl Segmenter for SegmentationModel {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.predict(images)
    }
}

pub fn build_vgg16_decoder(config: &ModelConfig, seed: u64) -> Result<SegmentationModel> {
    if config.architecture != Architecture::Vgg16Decoder {
        return Err(Error::Config(format!("expected vgg16_decoder, got {}", config.architecture)));
    }
    SegmentationModel::new(config, seed, DType::F32)
}

pub fn build_unet(config: &ModelConfig, seed: u64) -> Result<SegmentationModel> {
    if config.architecture != Architecture::Unet {
        return Err(Error::Config(format!("expected unet, got {}", config.architecture)));
    }
    SegmentationModel::new(config, seed, DType::F32)
}

impl SegmentationModel {
    /// Builds a freshly initialized model. All random initialization flows
    /// from `seed`. Pretrained encoder weights are loaded when requested.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut params = ParamStore::new(seed, dtype, device.clone());
        let net = Net::build(config, &mut params, dtype, &device)?;
        let vars = params.into_vars();
        let inference = Net::build(config, &mut ParamStore::detached(&vars, dtype, device.clone()), dtype, &device)?;
        let model = Self {
            config: config.clone(),
            dtype,
            device,
            vars,
            net,
            inference,
        };
        if config.pretrained_encoder {
            let path = config.pretrained_weights.as_deref().ok_or_else(|| {
                Error::WeightAcquisition(
                    "pretrained_encoder is set but no pretrained_weights file is configured".into(),
                )
            })?;
            model.load_pretrained_encoder(path)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    /// Parameters the optimizer should update.
    pub fn trainable_vars(&self) -> Vec<(&str, &Var)> {
        self.vars
            .iter()
            .filter(|(name, _)| !(self.config.freeze_encoder && Self::is_encoder_param(name)))
            .map(|(n, v)| (n.as_str(), v))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn num_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn check_input(&self, xs: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        match xs.dims() {
            &[b, 3, h, w] if b >= 1 && h == s && w == s => Ok(()),
            dims => Err(Error::Shape(format!(
                "{} expects a Bx3x{s}x{s} batch, got {dims:?}",
                self.config.architecture
            ))),
        }
    }

    /// Maps a `B×3×S×S` batch to `B×1×S×S` logits.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.check_input(xs)?;
        self.net.forward(&xs.to_dtype(self.dtype)?)
    }

    /// Logits without recording an autodiff graph. Samples run one at a
    /// time so that peak memory does not grow with the batch.
    pub fn predict(&self, xs: &Tensor) -> Result<Tensor> {
        self.check_input(xs)?;
        let xs = xs.to_dtype(self.dtype)?.detach();
        let outs = (0..xs.dim(0)?)
            .map(|i| self.inference.forward(&xs.narrow(0, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 0)?)
    }

    /// U-Net encoder feature maps (depth 0..=4); `None` for the VGG model.
    pub fn unet_encoder_features(&self, xs: &Tensor) -> Result<Option<Vec<Tensor>>> {
        self.check_input(xs)?;
        match &self.net {
            Net::Unet(n) => Ok(Some(n.encoder_features(&xs.to_dtype(self.dtype)?)?)),
            Net::Vgg(_) => Ok(None),
        }
    }

    /// Copies ImageNet-trained VGG-16 convolution weights into the encoder.
    /// Keys may be `features.{i}.*` or `encoder.features.{i}.*`.
    pub fn load_pretrained_encoder(&self, path: &Path) -> Result<()> {
        if self.config.architecture != Architecture::Vgg16Decoder {
            return Err(Error::Config("only vgg16_decoder has a pretrained encoder".into()));
        }
        let bytes = std::fs::read(path)
            .map_err(|e| Error::WeightAcquisition(format!("{}: {e}", path.display())))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &self.device)
            .map_err(|e| Error::WeightAcquisition(format!("{}: {e}", path.display())))?;
        for name in vgg::encoder_layer_names() {
            for suffix in ["weight", "bias"] {
                let key = format!("{name}.{suffix}");
                let ours = format!("encoder.{key}");
                let src = tensors
                    .get(&key)
                    .or_else(|| tensors.get(&ours))
                    .ok_or_else(|| Error::WeightAcquisition(format!("{} lacks tensor `{key}`", path.display())))?;
                let var = &self.vars[&ours];
                if src.dims() != var.dims() {
                    return Err(Error::WeightAcquisition(format!(
                        "`{key}` has shape {:?}, expected {:?}",
                        src.dims(),
                        var.dims()
                    )));
                }
                var.set(&src.to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }

    /// Writes a safetensors checkpoint: every named parameter plus metadata
    /// holding the architecture tag and the model config.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        // one metadata entry: safetensors writes the map in hash order
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_owned(),
            architecture: self.config.architecture.tag().to_owned(),
            config: self.config.clone(),
            dtype: format!("{:?}", self.dtype),
        };
        let meta = HashMap::from([(CHECKPOINT_KEY.to_owned(), serde_json::to_string(&header)?)]);
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Loads a checkpoint into a model built from `config`. The stored
    /// architecture must match.
    pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        if ckpt.architecture != config.architecture {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model, expected {}",
                path.display(),
                ckpt.architecture,
                config.architecture
            )));
        }
        ckpt.into_model(path, config)
    }

    /// Loads a checkpoint using the model config stored inside it.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let config = ckpt.config.clone();
        ckpt.into_model(path, &config)
    }

    /// Flat copy of every parameter, in name order, for bitwise comparison.
    pub fn parameter_snapshot(&self) -> Result<Vec<(String, Vec<u8>)>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let t = v.as_tensor().flatten_all()?;
                let bytes = match t.dtype() {
                    DType::F64 => t.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
                    _ => t
                        .to_dtype(DType::F32)?
                        .to_vec1::<f32>()?
                        .iter()
                        .flat_map(|x| x.to_le_bytes())
                        .collect(),
                };
                Ok((n.clone(), bytes))
            })
            .collect()
    }
}

const CHECKPOINT_FORMAT: &str = "roadseg-checkpoint-v1";
const CHECKPOINT_KEY: &str = "roadseg";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    architecture: String,
    config: ModelConfig,
    dtype: String,
}

struct Checkpoint {
    architecture: Architecture,
    config: ModelConfig,
    dtype: DType,
    tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    fn read(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let bytes = std::fs::read(path).map_err(|e| bad(e.to_string()))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        let header: CheckpointHeader = meta
            .get(CHECKPOINT_KEY)
            .ok_or_else(|| bad("not a roadseg checkpoint".into()))
            .and_then(|h| serde_json::from_str(h).map_err(|e| bad(e.to_string())))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported checkpoint format `{}`", header.format)));
        }
        let architecture = Architecture::from_tag(&header.architecture)
            .ok_or_else(|| bad(format!("unknown architecture `{}`", header.architecture)))?;
        let config = header.config;
        let dtype = match header.dtype.as_str() {
            "F64" => DType::F64,
            _ => DType::F32,
        };
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            architecture,
            config,
            dtype,
            tensors,
        })
    }

    fn into_model(self, path: &Path, config: &ModelConfig) -> Result<SegmentationModel> {
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let fresh = ModelConfig {
            pretrained_encoder: false,
            ..config.clone()
        };
        let mut model = SegmentationModel::new(&fresh, 0, self.dtype)?;
        model.config = config.clone();
        if self.tensors.len() != model.vars.len() {
            return Err(bad(format!(
                "holds {} tensors, model has {}",
                self.tensors.len(),
                model.vars.len()
            )));
        }
        for (name, var) in &model.vars {
            let t = self.tensors.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(bad(format!("`{name}` has shape {:?}, expected {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(model)
    }
}
