//! Desk-scale synthetic experiment: two procedurally generated datasets
//! with different road geometry and colors, and a config that trains a
//! small U-Net on one and cross-evaluates on the other.

use std::fs;
use std::path::{Path, PathBuf};

use roadseg::datasets::{generate_synthetic, SyntheticConfig, SyntheticStyle};

use crate::CliError;

pub const DEMO_SAMPLES: usize = 60;
pub const DEMO_SIZE: usize = 128;

/// Writes `highway/`, `suburban/` and `experiment.toml` under `dir` and
/// returns the config path. The run directory is `dir/run`.
pub fn write_synthetic_experiment(dir: &Path, seed: u64) -> Result<PathBuf, CliError> {
    for (name, style, data_seed) in [
        ("highway", SyntheticStyle::Highway, 1000),
        ("suburban", SyntheticStyle::Suburban, 2000),
    ] {
        let cfg = SyntheticConfig {
            count: DEMO_SAMPLES,
            size: DEMO_SIZE,
            seed: data_seed,
            style,
            id_prefix: name.into(),
        };
        generate_synthetic(&dir.join(name), &cfg)?;
    }
    let text = format!(
        r#"out_dir = "run"
seed = {seed}
train_dataset = "highway"

[datasets.highway]
root = "highway"
kind = "synthetic"

[datasets.suburban]
root = "suburban"
kind = "synthetic"

[model]
architecture = "unet"
input_size = {DEMO_SIZE}
base_channels = 8

[train]
learning_rate = 1e-3
batch_size = 4
max_epochs = 150
target_pixel_accuracy = 0.97

[eval]
gallery_k = 6
"#
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
