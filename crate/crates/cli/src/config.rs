//! Experiment configuration file.
//!
//! ```toml
//! out_dir = "runs/highway"          # default "runs/default"
//! seed = 7                          # split, init and shuffle seed (default 0)
//! train_dataset = "highway"         # default: first dataset by name
//!
//! [datasets.highway]
//! root = "data/highway"             # required
//! kind = "synthetic"                # kitti_road | comma10k | synthetic
//! road_color = { r = 64, g = 32, b = 32 }   # default per kind
//! lane_color = { r = 255, g = 0, b = 0 }    # default per kind
//!
//! [split]                           # default 0.7 / 0.15 / 0.15
//! train = 0.7
//! val = 0.15
//! test = 0.15
//!
//! [model]                           # default: vgg16_decoder at 512
//! architecture = "unet"
//! input_size = 128
//! base_channels = 8
//!
//! [train]                           # see TrainConfig
//! learning_rate = 1e-3
//! batch_size = 4
//! max_epochs = 150
//! target_pixel_accuracy = 0.97
//!
//! [dilation]                        # lane-marking repair
//! enabled = true
//! element = { shape = "square", radius = 1 }
//!
//! [eval]
//! gallery_k = 8
//! foreign_dataset = "suburban"      # default: the only other dataset
//!
//! [normalization]                   # default ImageNet mean/std
//! mode = "unit"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use roadseg::datasets::{DatasetKind, LabelEncoding, LaneRepair, Normalization, SplitRatios};
use roadseg::mask_ops::{ColorSpec, StructuringElement};
use roadseg::models::ModelConfig;
use roadseg::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub road_color: Option<ColorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_color: Option<ColorSpec>,
}

impl DatasetConfig {
    pub fn road_color(&self) -> ColorSpec {
        self.road_color.unwrap_or(self.kind.default_road_color())
    }

    pub fn lane_color(&self) -> Option<ColorSpec> {
        self.lane_color.or(self.kind.default_lane_color())
    }

    pub fn label_encoding(&self, dilation: &DilationConfig) -> LabelEncoding {
        let lane_repair = match (dilation.enabled, self.lane_color()) {
            (true, Some(lane)) => Some(LaneRepair {
                lane,
                element: dilation.element,
            }),
            _ => None,
        };
        LabelEncoding::Color {
            road: self.road_color(),
            lane_repair,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DilationConfig {
    /// Fold dilated lane markings back into the road mask.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub element: StructuringElement,
}

impl Default for DilationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            element: StructuringElement::default(),
        }
    }
}

fn default_gallery_k() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_gallery_k")]
    pub gallery_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreign_dataset: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gallery_k: default_gallery_k(),
            foreign_dataset: None,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_model() -> ModelConfig {
    ModelConfig::vgg16_decoder()
}

fn default_normalization() -> Normalization {
    Normalization::IMAGENET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_dataset: Option<String>,
    /// Name used for the trained model in result tables. Defaults to the
    /// architecture tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_tag: Option<String>,
    pub datasets: BTreeMap<String, DatasetConfig>,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dilation: DilationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(config_err)
    }

    /// Reads and parses `path`, resolving relative paths against its
    /// directory. Call [`validate`](Self::validate) after applying overrides.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.out_dir = absolutize(base, &self.out_dir);
        for ds in self.datasets.values_mut() {
            ds.root = absolutize(base, &ds.root);
        }
        if let Some(p) = &self.model.pretrained_weights {
            self.model.pretrained_weights = Some(absolutize(base, p));
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    /// Semantic checks. Dataset roots must exist.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.datasets.is_empty() {
            return Err(CliError::Config("config declares no datasets".into()));
        }
        for (name, ds) in &self.datasets {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(CliError::Config(format!(
                    "dataset name `{name}` may only contain letters, digits, `_` and `-`"
                )));
            }
            if !ds.root.is_dir() {
                return Err(CliError::Config(format!(
                    "dataset `{name}`: root {} does not exist",
                    ds.root.display()
                )));
            }
        }
        let train = self.train_dataset_name();
        if !self.datasets.contains_key(train) {
            return Err(CliError::Config(format!("train_dataset `{train}` is not declared under [datasets]")));
        }
        if let Some(f) = &self.eval.foreign_dataset {
            if !self.datasets.contains_key(f) {
                return Err(CliError::Config(format!("eval.foreign_dataset `{f}` is not declared under [datasets]")));
            }
        }
        self.split.validate().map_err(config_err)?;
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(CliError::Config(
                "train.seed is taken from the top-level seed; remove it or make them equal".into(),
            ));
        }
        self.dilation.element.validate().map_err(config_err)?;
        if self.eval.gallery_k == 0 {
            return Err(CliError::Config("eval.gallery_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn train_dataset_name(&self) -> &str {
        match &self.train_dataset {
            Some(name) => name,
            None => self.datasets.keys().next().map(String::as_str).unwrap_or(""),
        }
    }

    pub fn model_tag(&self) -> String {
        self.model_tag
            .clone()
            .unwrap_or_else(|| self.model.architecture.tag().to_owned())
    }

    /// The dataset to cross-evaluate on: an explicit choice, else the only
    /// dataset other than the training one.
    pub fn foreign_dataset_name(&self, flag: Option<&str>) -> Result<String, CliError> {
        if let Some(name) = flag.or(self.eval.foreign_dataset.as_deref()) {
            if !self.datasets.contains_key(name) {
                return Err(CliError::Config(format!("dataset `{name}` is not declared under [datasets]")));
            }
            return Ok(name.to_owned());
        }
        let train = self.train_dataset_name();
        let others: Vec<&String> = self.datasets.keys().filter(|k| k.as_str() != train).collect();
        match others.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err(CliError::Config(
                "no foreign dataset declared; pass --foreign-dataset or add a second dataset".into(),
            )),
            _ => Err(CliError::Config(format!(
                "several candidate foreign datasets ({}); pass --foreign-dataset",
                others.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [datasets.a]
        root = "a"
        kind = "comma10k"
    "#;

    #[test]
    fn defaults_fill_everything_but_roots() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("runs/default"));
        assert_eq!(cfg.split, SplitRatios::default());
        assert_eq!(cfg.model, ModelConfig::vgg16_decoder());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.train_dataset_name(), "a");
        assert_eq!(cfg.datasets["a"].road_color(), DatasetKind::Comma10k.default_road_color());
        assert!(ExperimentConfig::parse("seed = 1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["lerning_rate = 1.0", "[train]\nlerning_rate = 1.0", "[model]\narchitecture = \"unet\"\ndepth = 3"] {
            let text = format!("{extra}\n{MINIMAL}");
            let err = ExperimentConfig::parse(&text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{extra}");
        }
        let text = format!("{MINIMAL}\nroad_colour = {{ r = 1, g = 2, b = 3 }}");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.datasets["a"].root, dir.path().join("a"));
        cfg.validate().unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn validation_names_missing_root() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/nonexistent/base"));
        match cfg.validate() {
            Err(CliError::Config(msg)) => assert!(msg.contains("/nonexistent/base/a"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn foreign_dataset_resolution() {
        let text = r#"
            train_dataset = "a"
            [datasets.a]
            root = "a"
            kind = "synthetic"
            [datasets.b]
            root = "b"
            kind = "synthetic"
        "#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.foreign_dataset_name(None).unwrap(), "b");
        assert_eq!(cfg.foreign_dataset_name(Some("a")).unwrap(), "a");
        assert!(cfg.foreign_dataset_name(Some("c")).is_err());
        let solo = ExperimentConfig::parse(MINIMAL).unwrap();
        assert!(solo.foreign_dataset_name(None).is_err());
    }

    #[test]
    fn lane_repair_follows_kind_and_switch() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let ds = &cfg.datasets["a"];
        let LabelEncoding::Color { lane_repair, .. } = ds.label_encoding(&cfg.dilation) else {
            panic!()
        };
        assert!(lane_repair.is_some());
        let off = DilationConfig {
            enabled: false,
            ..Default::default()
        };
        let LabelEncoding::Color { lane_repair, .. } = ds.label_encoding(&off) else {
            panic!()
        };
        assert!(lane_repair.is_none());
        let kitti = DatasetConfig {
            root: "k".into(),
            kind: DatasetKind::KittiRoad,
            road_color: None,
            lane_color: None,
        };
        let LabelEncoding::Color { lane_repair, road } = kitti.label_encoding(&cfg.dilation) else {
            panic!()
        };
        assert!(lane_repair.is_none());
        assert_eq!(road, DatasetKind::KittiRoad.default_road_color());
    }
}
