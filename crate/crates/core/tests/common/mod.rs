#![allow(dead_code)]

use std::path::Path;

use roadseg::datasets::{
    comma10k_colors, generate_synthetic, load_manifest, BatchOrder, BatchStream, DatasetKind, DatasetManifest,
    LabelEncoding, LaneRepair, Normalization, SampleLoader, SyntheticConfig, SyntheticStyle,
};
use roadseg::mask_ops::StructuringElement;

pub fn synthetic(dir: &Path, style: SyntheticStyle, count: usize, size: usize, seed: u64) -> DatasetManifest {
    let cfg = SyntheticConfig {
        count,
        size,
        seed,
        style,
        id_prefix: "s".into(),
    };
    generate_synthetic(dir, &cfg).unwrap();
    load_manifest(dir, DatasetKind::Synthetic).unwrap()
}

pub fn loader(size: usize) -> SampleLoader {
    SampleLoader {
        size,
        labels: LabelEncoding::Color {
            road: comma10k_colors::ROAD,
            lane_repair: Some(LaneRepair {
                lane: comma10k_colors::LANE_MARKINGS,
                element: StructuringElement::default(),
            }),
        },
        normalization: Normalization::Unit,
    }
}

pub fn fixed_stream(manifest: &DatasetManifest, size: usize, batch: usize) -> BatchStream {
    BatchStream::new(manifest.entries.clone(), loader(size), batch, BatchOrder::Fixed).unwrap()
}
