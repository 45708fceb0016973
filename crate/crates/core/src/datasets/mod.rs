//! Dataset discovery, deterministic 70/15/15 splits, sample decoding and
//! batching.

mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticStyle};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_ops::{self, BinaryMask, ColorSpec, StructuringElement};

/// Comma10k class palette.
pub mod comma10k_colors {
    use crate::mask_ops::ColorSpec;

    pub const ROAD: ColorSpec = ColorSpec::exact(0x40, 0x20, 0x20);
    pub const LANE_MARKINGS: ColorSpec = ColorSpec::exact(0xff, 0x00, 0x00);
    pub const UNDRIVABLE: ColorSpec = ColorSpec::exact(0x80, 0x80, 0x60);
    pub const MOVABLE: ColorSpec = ColorSpec::exact(0x00, 0xff, 0x66);
    pub const MY_CAR: ColorSpec = ColorSpec::exact(0xcc, 0x00, 0xff);
}

/// KITTI road ground truth palette (`gt_image_2/*_road_*.png`).
pub mod kitti_colors {
    use crate::mask_ops::ColorSpec;

    pub const ROAD: ColorSpec = ColorSpec::exact(0xff, 0x00, 0xff);
    pub const NON_ROAD: ColorSpec = ColorSpec::exact(0xff, 0x00, 0x00);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    KittiRoad,
    Comma10k,
    Synthetic,
}

impl DatasetKind {
    pub fn default_road_color(self) -> ColorSpec {
        match self {
            DatasetKind::KittiRoad => kitti_colors::ROAD,
            DatasetKind::Comma10k | DatasetKind::Synthetic => comma10k_colors::ROAD,
        }
    }

    /// KITTI ships lane markings as separate files, so no lane color is
    /// read from its road labels.
    pub fn default_lane_color(self) -> Option<ColorSpec> {
        match self {
            DatasetKind::KittiRoad => None,
            DatasetKind::Comma10k | DatasetKind::Synthetic => Some(comma10k_colors::LANE_MARKINGS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest from arbitrary entries, sorting by sample id and
    /// rejecting duplicates.
    pub fn new(dataset_id: impl Into<String>, mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        for pair in entries.windows(2) {
            if pair[0].sample_id == pair[1].sample_id {
                return Err(Error::Manifest {
                    sample_id: pair[0].sample_id.clone(),
                    reason: "duplicate sample id".into(),
                });
            }
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.sample_id.as_str())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// PNG files directly inside `dir`, keyed by file stem.
fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for ent in rd {
        let ent = ent.map_err(|e| Error::io(dir, e))?;
        let path = ent.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

fn pair_up(
    root: &Path,
    images: BTreeMap<String, PathBuf>,
    mut labels: BTreeMap<String, PathBuf>,
) -> Result<Vec<ManifestEntry>> {
    if images.is_empty() && labels.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let mut entries = Vec::with_capacity(images.len());
    for (id, image_path) in images {
        let label_path = labels.remove(&id).ok_or_else(|| Error::Manifest {
            sample_id: id.clone(),
            reason: format!("no label file for image {}", image_path.display()),
        })?;
        entries.push(ManifestEntry {
            sample_id: id,
            image_path,
            label_path,
        });
    }
    if let Some((id, path)) = labels.into_iter().next() {
        return Err(Error::Manifest {
            sample_id: id,
            reason: format!("label {} has no matching image", path.display()),
        });
    }
    Ok(entries)
}

/// Scans a dataset root laid out like the upstream release of `kind`.
///
/// * KITTI road: `training/image_2/{cat}_{idx}.png` with
///   `training/gt_image_2/{cat}_road_{idx}.png` (the `training/` level is
///   optional). Lane ground truth files are ignored.
/// * Comma10k and synthetic: `imgs/{id}.png` with `masks/{id}.png`.
pub fn load_manifest(root: &Path, kind: DatasetKind) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let dataset_id = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_owned();
    let entries = match kind {
        DatasetKind::KittiRoad => {
            let base = if root.join("training").is_dir() {
                root.join("training")
            } else {
                root.to_path_buf()
            };
            let images = png_files(&base.join("image_2"))?;
            let labels = png_files(&base.join("gt_image_2"))?
                .into_iter()
                .filter_map(|(stem, path)| {
                    let (cat, idx) = stem.split_once("_road_")?;
                    Some((format!("{cat}_{idx}"), path))
                })
                .collect();
            pair_up(root, images, labels)?
        }
        DatasetKind::Comma10k | DatasetKind::Synthetic => {
            let images = png_files(&root.join("imgs"))?;
            let labels = png_files(&root.join("masks"))?;
            pair_up(root, images, labels)?
        }
    };
    DatasetManifest::new(dataset_id, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!("split ratios {parts:?} must lie in [0, 1]")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {parts:?} must sum to 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: the first two are rounded, test takes
    /// the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train * n as f64).round() as usize;
        let val = (self.val * n as f64).round() as usize;
        let train = train.min(n);
        let val = val.min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub parts: BTreeMap<String, Part>,
}

impl SplitAssignment {
    pub fn part_of(&self, sample_id: &str) -> Option<Part> {
        self.parts.get(sample_id).copied()
    }

    pub fn count(&self, part: Part) -> usize {
        self.parts.values().filter(|&&p| p == part).count()
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.count(Part::Train), self.count(Part::Val), self.count(Part::Test))
    }

    /// Manifest entries assigned to `part`, in manifest order.
    pub fn select(&self, manifest: &DatasetManifest, part: Part) -> Vec<ManifestEntry> {
        manifest
            .entries
            .iter()
            .filter(|e| self.part_of(&e.sample_id) == Some(part))
            .cloned()
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

pub fn split(manifest: &DatasetManifest, seed: u64) -> Result<SplitAssignment> {
    split_with_ratios(manifest, seed, SplitRatios::default())
}

/// Shuffles the sorted sample ids with a seeded ChaCha stream and cuts the
/// result into train, val and test.
pub fn split_with_ratios(
    manifest: &DatasetManifest,
    seed: u64,
    ratios: SplitRatios,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    let n = manifest.len();
    if n < 3 {
        return Err(Error::Split(format!(
            "{n} samples cannot populate train, val and test"
        )));
    }
    let mut ids: Vec<&str> = manifest.sample_ids().collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Split("manifest contains duplicate sample ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (n_train, n_val, _) = ratios.sizes(n);
    let parts = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let part = if i < n_train {
                Part::Train
            } else if i < n_train + n_val {
                Part::Val
            } else {
                Part::Test
            };
            (id.to_owned(), part)
        })
        .collect();
    Ok(SplitAssignment {
        seed,
        ratios,
        parts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Normalization {
    /// Divide by 255.
    Unit,
    /// Divide by 255, then standardize each channel.
    MeanStd { mean: [f32; 3], std: [f32; 3] },
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization::MeanStd {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    #[inline]
    fn apply(&self, channel: usize, v: u8) -> f32 {
        let x = v as f32 / 255.0;
        match self {
            Normalization::Unit => x,
            Normalization::MeanStd { mean, std } => (x - mean[channel]) / std[channel],
        }
    }
}

/// How label files are turned into binary masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "encoding")]
pub enum LabelEncoding {
    /// Color-coded class image.
    Color {
        road: ColorSpec,
        lane_repair: Option<LaneRepair>,
    },
    /// Prepared 0/255 single-channel mask.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneRepair {
    pub lane: ColorSpec,
    pub element: StructuringElement,
}

impl LabelEncoding {
    /// Decodes a label at its native resolution.
    pub fn decode(&self, path: &Path) -> Result<BinaryMask> {
        match self {
            LabelEncoding::Binary => BinaryMask::load(path),
            LabelEncoding::Color { road, lane_repair } => {
                let img = image::open(path).map_err(|e| Error::image(path, e))?;
                let road_mask = mask_ops::binarize(&img, road)?;
                match lane_repair {
                    None => Ok(road_mask),
                    Some(rep) => {
                        let lane = mask_ops::binarize(&img, &rep.lane)?;
                        mask_ops::repair_lane_artifacts(&road_mask, &lane, &rep.element)
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleLoader {
    pub size: usize,
    pub labels: LabelEncoding,
    pub normalization: Normalization,
}

/// Image in CHW layout at `size`×`size` together with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: String,
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: BinaryMask,
}

fn sample_err(id: &str, err: Error) -> Error {
    Error::Sample {
        sample_id: id.to_owned(),
        reason: err.to_string(),
    }
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

/// Source image resized (bilinear) to `size`×`size`, without normalization.
pub fn load_display_image(entry: &ManifestEntry, size: usize) -> Result<RgbImage> {
    let img = read_rgb(&entry.image_path).map_err(|e| sample_err(&entry.sample_id, e))?;
    Ok(resize_rgb(img, size))
}

fn resize_rgb(img: RgbImage, size: usize) -> RgbImage {
    if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    }
}

impl SampleLoader {
    /// Decodes one entry: the label is binarized at native resolution and
    /// then resized nearest-neighbour so it stays binary; the image is
    /// resized bilinearly and normalized.
    pub fn load(&self, entry: &ManifestEntry) -> Result<LabeledSample> {
        let id = entry.sample_id.as_str();
        let img = read_rgb(&entry.image_path).map_err(|e| sample_err(id, e))?;
        let mask = self
            .labels
            .decode(&entry.label_path)
            .map_err(|e| sample_err(id, e))?;
        let (w, h) = img.dimensions();
        if (h as usize, w as usize) != mask.dims() {
            return Err(Error::Sample {
                sample_id: id.to_owned(),
                reason: format!(
                    "label is {}x{} but image is {h}x{w}",
                    mask.height(),
                    mask.width()
                ),
            });
        }
        let s = self.size;
        let mask = mask.resize_nearest(s, s);
        let img = resize_rgb(img, s);
        let mut image = vec![0f32; 3 * s * s];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * s + x as usize;
            for c in 0..3 {
                image[c * s * s + i] = self.normalization.apply(c, px[c]);
            }
        }
        Ok(LabeledSample {
            sample_id: id.to_owned(),
            size: s,
            image,
            mask,
        })
    }
}

pub fn load_sample(entry: &ManifestEntry, loader: &SampleLoader) -> Result<LabeledSample> {
    loader.load(entry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrder {
    /// Manifest order every epoch (val/test).
    Fixed,
    /// Reshuffled each epoch from `seed + epoch`.
    Shuffled { seed: u64 },
}

#[derive(Debug)]
pub struct Batch {
    pub sample_ids: Vec<String>,
    /// B×3×S×S, f32.
    pub images: Tensor,
    /// B×1×S×S, f32 in {0, 1}.
    pub masks: Tensor,
    pub gt: Vec<BinaryMask>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn from_samples(samples: Vec<LabeledSample>) -> Result<Batch> {
        let Some(first) = samples.first() else {
            return Err(Error::Config("cannot build an empty batch".into()));
        };
        let s = first.size;
        let b = samples.len();
        let mut images = Vec::with_capacity(b * 3 * s * s);
        let mut masks = Vec::with_capacity(b * s * s);
        let mut ids = Vec::with_capacity(b);
        let mut gt = Vec::with_capacity(b);
        for sample in samples {
            if sample.size != s {
                return Err(Error::Shape(format!(
                    "sample `{}` is {}px but the batch is {s}px",
                    sample.sample_id, sample.size
                )));
            }
            images.extend_from_slice(&sample.image);
            masks.extend(sample.mask.as_slice().iter().map(|&v| v as f32));
            ids.push(sample.sample_id);
            gt.push(sample.mask);
        }
        Ok(Batch {
            sample_ids: ids,
            images: Tensor::from_vec(images, (b, 3, s, s), &Device::Cpu)?,
            masks: Tensor::from_vec(masks, (b, 1, s, s), &Device::Cpu)?,
            gt,
        })
    }
}

/// Epoch-wise batch iterator over one split part.
#[derive(Debug, Clone)]
pub struct BatchStream {
    entries: Vec<ManifestEntry>,
    loader: SampleLoader,
    batch_size: usize,
    order: BatchOrder,
}

impl BatchStream {
    pub fn new(
        entries: Vec<ManifestEntry>,
        loader: SampleLoader,
        batch_size: usize,
        order: BatchOrder,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            entries,
            loader,
            batch_size,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn loader(&self) -> &SampleLoader {
        &self.loader
    }

    pub fn sample_size(&self) -> usize {
        self.loader.size
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_batches(&self) -> usize {
        self.entries.len().div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        if let BatchOrder::Shuffled { seed } = self.order {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
            idx.shuffle(&mut rng);
        }
        idx
    }

    /// Batches for `epoch`. Samples within a batch decode in parallel but
    /// keep their order.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.epoch_order(epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[_]>::to_vec).collect();
        chunks.into_iter().map(move |chunk| {
            let samples = chunk
                .par_iter()
                .map(|&i| self.loader.load(&self.entries[i]))
                .collect::<Result<Vec<_>>>()?;
            Batch::from_samples(samples)
        })
    }

    /// A stream over the same samples with fixed order.
    pub fn fixed(&self) -> BatchStream {
        BatchStream {
            order: BatchOrder::Fixed,
            ..self.clone()
        }
    }
}

/// Ids that occur in more than one of the given parts.
pub fn overlapping_ids<'a>(parts: impl IntoIterator<Item = &'a [ManifestEntry]>) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for part in parts {
        for e in part {
            if !seen.insert(e.sample_id.clone()) {
                dup.insert(e.sample_id.clone());
            }
        }
    }
    dup
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn fake_manifest(n: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                sample_id: format!("s{i:05}"),
                image_path: PathBuf::from(format!("imgs/s{i:05}.png")),
                label_path: PathBuf::from(format!("masks/s{i:05}.png")),
            })
            .collect();
        DatasetManifest::new("fake", entries).unwrap()
    }

    #[test]
    fn split_sizes_match_rounding_rule() {
        assert_eq!(split(&fake_manifest(289), 1).unwrap().sizes(), (202, 43, 44));
        assert_eq!(split(&fake_manifest(5000), 1).unwrap().sizes(), (3500, 750, 750));
        assert_eq!(split(&fake_manifest(60), 9).unwrap().sizes(), (42, 9, 9));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let m = fake_manifest(100);
        assert_eq!(split(&m, 7).unwrap(), split(&m, 7).unwrap());
        assert_ne!(split(&m, 7).unwrap().parts, split(&m, 8).unwrap().parts);
    }

    #[test]
    fn split_needs_three_samples() {
        assert!(matches!(split(&fake_manifest(2), 0), Err(Error::Split(_))));
        assert!(split(&fake_manifest(3), 0).is_ok());
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let r = SplitRatios {
            train: 0.8,
            val: 0.15,
            test: 0.15,
        };
        assert!(matches!(split_with_ratios(&fake_manifest(10), 0, r), Err(Error::Config(_))));
    }

    #[test]
    fn split_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        let s = split(&fake_manifest(20), 3).unwrap();
        s.save(&p).unwrap();
        assert_eq!(SplitAssignment::load(&p).unwrap(), s);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"s00000\": \""));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 3usize..400, seed in any::<u64>()) {
            let m = fake_manifest(n);
            let s = split(&m, seed).unwrap();
            prop_assert_eq!(s.parts.len(), n);
            let train = s.select(&m, Part::Train);
            let val = s.select(&m, Part::Val);
            let test = s.select(&m, Part::Test);
            prop_assert_eq!(train.len() + val.len() + test.len(), n);
            prop_assert!(overlapping_ids([&train[..], &val[..], &test[..]]).is_empty());
            prop_assert_eq!(train.len(), (0.7 * n as f64).round() as usize);
            prop_assert_eq!(val.len(), (0.15 * n as f64).round() as usize);
        }
    }

    fn write_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y))).save(path).unwrap();
    }

    #[test]
    fn manifest_pairs_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("c10k");
        for id in ["b", "a", "c"] {
            write_rgb(&root.join(format!("imgs/{id}.png")), 4, 4, |_, _| [1, 2, 3]);
            write_rgb(&root.join(format!("masks/{id}.png")), 4, 4, |_, _| [64, 32, 32]);
        }
        let m = load_manifest(&root, DatasetKind::Comma10k).unwrap();
        assert_eq!(m.dataset_id, "c10k");
        assert_eq!(m.sample_ids().collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn manifest_reports_unpaired_image() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for id in ["x1", "x2", "x3"] {
            write_rgb(&root.join(format!("imgs/{id}.png")), 2, 2, |_, _| [0, 0, 0]);
        }
        for id in ["x1", "x3"] {
            write_rgb(&root.join(format!("masks/{id}.png")), 2, 2, |_, _| [0, 0, 0]);
        }
        match load_manifest(root, DatasetKind::Comma10k) {
            Err(Error::Manifest { sample_id, .. }) => assert_eq!(sample_id, "x2"),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("imgs")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(matches!(
            load_manifest(dir.path(), DatasetKind::Synthetic),
            Err(Error::EmptyDataset(_))
        ));
        let missing = dir.path().join("nope");
        let err = load_manifest(&missing, DatasetKind::Comma10k).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn kitti_layout_uses_road_labels_only() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("training");
        for id in ["um_000000", "umm_000003", "uu_000010"] {
            let (cat, idx) = id.split_once('_').unwrap();
            write_rgb(&t.join(format!("image_2/{id}.png")), 3, 2, |_, _| [9, 9, 9]);
            write_rgb(&t.join(format!("gt_image_2/{cat}_road_{idx}.png")), 3, 2, |_, _| [255, 0, 255]);
        }
        write_rgb(&t.join("gt_image_2/um_lane_000000.png"), 3, 2, |_, _| [255, 0, 255]);
        let m = load_manifest(dir.path(), DatasetKind::KittiRoad).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[0].sample_id, "um_000000");
        assert!(m.entries[0].label_path.ends_with("um_road_000000.png"));
    }

    fn loader(size: usize) -> SampleLoader {
        SampleLoader {
            size,
            labels: LabelEncoding::Color {
                road: comma10k_colors::ROAD,
                lane_repair: None,
            },
            normalization: Normalization::Unit,
        }
    }

    fn entry_with(dir: &Path, id: &str, w: u32, h: u32, label: impl Fn(u32, u32) -> [u8; 3]) -> ManifestEntry {
        let image_path = dir.join(format!("imgs/{id}.png"));
        let label_path = dir.join(format!("masks/{id}.png"));
        write_rgb(&image_path, w, h, |x, y| [(x % 256) as u8, (y % 256) as u8, 200]);
        write_rgb(&label_path, w, h, label);
        ManifestEntry {
            sample_id: id.into(),
            image_path,
            label_path,
        }
    }

    #[test]
    fn load_sample_identity_resize() {
        let dir = tempfile::tempdir().unwrap();
        let e = entry_with(dir.path(), "a", 32, 32, |x, y| if x > y { [64, 32, 32] } else { [0, 0, 0] });
        let s = load_sample(&e, &loader(32)).unwrap();
        let direct = mask_ops::binarize(&image::open(&e.label_path).unwrap(), &comma10k_colors::ROAD).unwrap();
        assert_eq!(s.mask, direct);
        assert_eq!(s.image.len(), 3 * 32 * 32);
        assert_eq!(s.image[5], 5.0 / 255.0);
        assert_eq!(s.image[2 * 32 * 32], 200.0 / 255.0);
    }

    #[test]
    fn load_sample_half_plane_downscale() {
        let dir = tempfile::tempdir().unwrap();
        let e = entry_with(dir.path(), "h", 1024, 1024, |_, y| if y < 512 { [64, 32, 32] } else { [128, 128, 96] });
        let s = load_sample(&e, &loader(512)).unwrap();
        assert_eq!(s.mask.count_ones(), 512 * 256);
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn load_sample_without_road_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let e = entry_with(dir.path(), "n", 16, 16, |_, _| [0x80, 0x80, 0x60]);
        assert_eq!(load_sample(&e, &loader(8)).unwrap().mask.count_ones(), 0);
    }

    #[test]
    fn load_sample_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = entry_with(dir.path(), "d", 16, 16, |_, _| [0, 0, 0]);
        write_rgb(&dir.path().join("masks/other.png"), 16, 8, |_, _| [0, 0, 0]);
        e.label_path = dir.path().join("masks/other.png");
        match load_sample(&e, &loader(8)) {
            Err(Error::Sample { sample_id, reason }) => {
                assert_eq!(sample_id, "d");
                assert!(reason.contains("8x16"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_sample_corrupt_file_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let e = entry_with(dir.path(), "bad", 4, 4, |_, _| [0, 0, 0]);
        fs::write(&e.image_path, b"not a png").unwrap();
        let err = load_sample(&e, &loader(4)).unwrap_err();
        assert!(matches!(&err, Error::Sample { sample_id, .. } if sample_id == "bad"));
    }

    #[test]
    fn lane_repair_in_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let e = entry_with(dir.path(), "l", 9, 4, |x, _| match x {
            4 => [255, 0, 0],
            1..=7 => [64, 32, 32],
            _ => [0, 0, 0],
        });
        let plain = LabelEncoding::Color {
            road: comma10k_colors::ROAD,
            lane_repair: None,
        };
        assert_eq!(plain.decode(&e.label_path).unwrap().count_ones(), 6 * 4);
        let repaired = LabelEncoding::Color {
            road: comma10k_colors::ROAD,
            lane_repair: Some(LaneRepair {
                lane: comma10k_colors::LANE_MARKINGS,
                element: StructuringElement::default(),
            }),
        };
        assert_eq!(repaired.decode(&e.label_path).unwrap().count_ones(), 7 * 4);
    }

    fn stream_of(n: usize, batch: usize, order: BatchOrder, dir: &Path) -> BatchStream {
        let entries = (0..n)
            .map(|i| entry_with(dir, &format!("s{i:02}"), 4, 4, |_, _| [64, 32, 32]))
            .collect();
        BatchStream::new(entries, loader(4), batch, order).unwrap()
    }

    #[test]
    fn batches_partition_the_part() {
        let dir = tempfile::tempdir().unwrap();
        let s = stream_of(9, 4, BatchOrder::Fixed, dir.path());
        let sizes: Vec<usize> = s.epoch(0).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, [4, 4, 1]);
        let b = s.epoch(0).next().unwrap().unwrap();
        assert_eq!(b.images.dims(), &[4, 3, 4, 4]);
        assert_eq!(b.masks.dims(), &[4, 1, 4, 4]);
    }

    #[test]
    fn fixed_order_repeats() {
        let dir = tempfile::tempdir().unwrap();
        let s = stream_of(7, 3, BatchOrder::Fixed, dir.path());
        let ids = |e| -> Vec<String> { s.epoch(e).flat_map(|b| b.unwrap().sample_ids).collect() };
        assert_eq!(ids(0), ids(1));
    }

    #[test]
    fn shuffled_epochs_cover_all_ids_in_new_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = stream_of(42, 8, BatchOrder::Shuffled { seed: 11 }, dir.path());
        let ids = |e| -> Vec<String> { s.epoch(e).flat_map(|b| b.unwrap().sample_ids).collect() };
        let (e0, e1) = (ids(0), ids(1));
        assert_ne!(e0, e1);
        let mut a = e0.clone();
        let mut b = e1.clone();
        a.sort();
        b.sort();
        let expected: Vec<String> = (0..42).map(|i| format!("s{i:02}")).collect();
        assert_eq!(a, expected);
        assert_eq!(b, expected);
        assert_eq!(ids(0), e0);
    }

    #[test]
    fn empty_part_yields_no_batches() {
        let s = BatchStream::new(vec![], loader(4), 2, BatchOrder::Fixed).unwrap();
        assert_eq!(s.epoch(0).count(), 0);
        assert!(BatchStream::new(vec![], loader(4), 0, BatchOrder::Fixed).is_err());
    }

    #[test]
    fn imagenet_normalization() {
        let n = Normalization::IMAGENET;
        assert!((n.apply(0, 255) - (1.0 - 0.485) / 0.229).abs() < 1e-6);
    }
}
