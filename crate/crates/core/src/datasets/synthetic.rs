//! Procedurally generated road scenes in the comma10k layout.
//!
//! Each image shows a perspective road trapezoid with a dashed centre line
//! on a textured background; the label paints road, lane markings and
//! everything else in the comma10k palette.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::comma10k_colors;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticStyle {
    /// Wide, light asphalt under open sky with dry verges.
    Highway,
    /// Narrow, darker road between grass and a tree line, with shadows.
    Suburban,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub style: SyntheticStyle,
    /// Sample ids are `{id_prefix}_{index:04}`.
    pub id_prefix: String,
}

struct StyleParams {
    horizon: (f64, f64),
    bottom_width: (f64, f64),
    top_width: (f64, f64),
    road_gray: (f64, f64),
    road_tint: [f64; 3],
    sky: [f64; 3],
    ground: [f64; 3],
    tree_line: Option<[f64; 3]>,
    max_shadows: usize,
}

impl SyntheticStyle {
    fn params(self) -> StyleParams {
        match self {
            SyntheticStyle::Highway => StyleParams {
                horizon: (0.34, 0.44),
                bottom_width: (0.80, 0.98),
                top_width: (0.08, 0.16),
                road_gray: (100.0, 130.0),
                road_tint: [0.0, 0.0, 4.0],
                sky: [140.0, 175.0, 220.0],
                ground: [170.0, 150.0, 100.0],
                tree_line: None,
                max_shadows: 0,
            },
            SyntheticStyle::Suburban => StyleParams {
                horizon: (0.40, 0.50),
                bottom_width: (0.55, 0.75),
                top_width: (0.05, 0.10),
                road_gray: (85.0, 115.0),
                road_tint: [-3.0, 0.0, 6.0],
                sky: [170.0, 190.0, 210.0],
                ground: [80.0, 135.0, 65.0],
                tree_line: Some([45.0, 85.0, 40.0]),
                max_shadows: 2,
            },
        }
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders one scene: returns (camera image, color-coded label).
fn render(size: usize, p: &StyleParams, rng: &mut ChaCha8Rng) -> (RgbImage, RgbImage) {
    let s = size as f64;
    let horizon = s * rng.random_range(p.horizon.0..p.horizon.1);
    let bottom_w = s * rng.random_range(p.bottom_width.0..p.bottom_width.1);
    let top_w = s * rng.random_range(p.top_width.0..p.top_width.1);
    let center_bottom = s * (0.5 + rng.random_range(-0.08..0.08));
    let center_top = s * (0.5 + rng.random_range(-0.12..0.12));
    let gray = rng.random_range(p.road_gray.0..p.road_gray.1);
    let lane_period = (s / 16.0).max(2.0);
    let lane_phase = rng.random_range(0.0..lane_period);
    let texture_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let texture_freq = rng.random_range(0.05..0.15) * 128.0 / s;
    let shadows: Vec<(f64, f64, f64)> = (0..rng.random_range(0..=p.max_shadows))
        .map(|_| {
            (
                s * rng.random_range(0.2..0.8),
                s * rng.random_range(0.55..0.95),
                s * rng.random_range(0.06..0.14),
            )
        })
        .collect();

    let mut img = RgbImage::new(size as u32, size as u32);
    let mut label = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        let yc = y as f64 + 0.5;
        let t = ((yc - horizon) / (s - horizon)).clamp(0.0, 1.0);
        let center = center_top + (center_bottom - center_top) * t;
        let half = (top_w + (bottom_w - top_w) * t) / 2.0;
        let lane_half = 0.4 + 1.2 * t * s / 128.0;
        let dash_on = ((yc - horizon + lane_phase) / lane_period).floor() as i64 % 2 == 0;
        for x in 0..size {
            let xc = x as f64 + 0.5;
            let noise = rng.random_range(-10.0..10.0);
            let wave = 8.0 * ((xc * texture_freq + texture_phase).sin() + (yc * texture_freq * 0.7).cos());
            let below = yc >= horizon;
            let on_road = below && (xc - center).abs() <= half;
            let on_lane = on_road && dash_on && (xc - center).abs() <= lane_half;
            let (mut rgb, class) = if on_lane {
                ([235.0, 235.0, 225.0], comma10k_colors::LANE_MARKINGS)
            } else if on_road {
                let g = gray + noise * 0.6;
                ([g + p.road_tint[0], g + p.road_tint[1], g + p.road_tint[2]], comma10k_colors::ROAD)
            } else if below {
                (p.ground.map(|c| c + noise + wave), comma10k_colors::UNDRIVABLE)
            } else {
                let band = p.tree_line.filter(|_| yc > horizon - s * 0.12);
                let base = band.unwrap_or(p.sky);
                (base.map(|c| c + noise * 0.5 + wave * 0.3), comma10k_colors::UNDRIVABLE)
            };
            if shadows
                .iter()
                .any(|&(sx, sy, r)| (xc - sx).powi(2) + (yc - sy).powi(2) <= r * r)
            {
                rgb = rgb.map(|c| c * 0.72);
            }
            img.put_pixel(x as u32, y as u32, Rgb(rgb.map(clamp_u8)));
            label.put_pixel(x as u32, y as u32, class.rgb());
        }
    }
    (img, label)
}

/// Writes `imgs/{id}.png` and `masks/{id}.png` for every sample under
/// `root`. Output is byte-identical for a given config.
pub fn generate_synthetic(root: &Path, config: &SyntheticConfig) -> Result<()> {
    if config.count == 0 {
        return Err(Error::Parameter("synthetic dataset needs at least one sample".into()));
    }
    if config.size < 8 {
        return Err(Error::Parameter(format!(
            "synthetic image size {} is too small",
            config.size
        )));
    }
    let imgs = root.join("imgs");
    let masks = root.join("masks");
    for dir in [&imgs, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let params = config.style.params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for i in 0..config.count {
        let (img, label) = render(config.size, &params, &mut rng);
        let name = format!("{}_{i:04}.png", config.id_prefix);
        let ip = imgs.join(&name);
        img.save(&ip).map_err(|e| Error::image(&ip, e))?;
        let lp = masks.join(&name);
        label.save(&lp).map_err(|e| Error::image(&lp, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{load_manifest, DatasetKind};
    use crate::mask_ops::binarize;

    fn cfg(style: SyntheticStyle, seed: u64, count: usize) -> SyntheticConfig {
        SyntheticConfig {
            count,
            size: 64,
            seed,
            style,
            id_prefix: "syn".into(),
        }
    }

    #[test]
    fn generates_loadable_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let c = SyntheticConfig {
            size: 32,
            ..cfg(SyntheticStyle::Highway, 1, 60)
        };
        generate_synthetic(dir.path(), &c).unwrap();
        let m = load_manifest(dir.path(), DatasetKind::Synthetic).unwrap();
        assert_eq!(m.len(), 60);
        assert_eq!(m.entries[0].sample_id, "syn_0000");
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = cfg(SyntheticStyle::Suburban, 42, 3);
        generate_synthetic(a.path(), &c).unwrap();
        generate_synthetic(b.path(), &c).unwrap();
        for sub in ["imgs/syn_0002.png", "masks/syn_0001.png"] {
            assert_eq!(
                fs::read(a.path().join(sub)).unwrap(),
                fs::read(b.path().join(sub)).unwrap()
            );
        }
        let d = tempfile::tempdir().unwrap();
        generate_synthetic(d.path(), &cfg(SyntheticStyle::Suburban, 43, 3)).unwrap();
        assert_ne!(
            fs::read(a.path().join("imgs/syn_0000.png")).unwrap(),
            fs::read(d.path().join("imgs/syn_0000.png")).unwrap()
        );
    }

    #[test]
    fn road_fraction_is_non_degenerate() {
        for style in [SyntheticStyle::Highway, SyntheticStyle::Suburban] {
            let dir = tempfile::tempdir().unwrap();
            generate_synthetic(dir.path(), &cfg(style, 5, 40)).unwrap();
            let m = load_manifest(dir.path(), DatasetKind::Synthetic).unwrap();
            for e in &m.entries {
                let label = image::open(&e.label_path).unwrap();
                let mask = binarize(&label, &comma10k_colors::ROAD).unwrap();
                let frac = mask.count_ones() as f64 / mask.len() as f64;
                assert!((0.1..=0.6).contains(&frac), "{style:?} {} has road fraction {frac}", e.sample_id);
            }
        }
    }

    #[test]
    fn rejects_empty_request() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(dir.path(), &cfg(SyntheticStyle::Highway, 0, 0)).is_err());
    }
}
