mod common;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use roadseg::datasets::{BatchStream, SyntheticStyle};
use roadseg::evaluation::{cross_evaluate, error_gallery};
use roadseg::mask_ops::BinaryMask;
use roadseg::metrics::{self, ConfusionCounts};
use roadseg::models::{ModelConfig, SegmentationModel, Segmenter};
use roadseg::training::{train, TrainConfig};

/// Predicts the ground truth by looking images up in a table.
struct Oracle {
    size: usize,
    masks: HashMap<Vec<u32>, BinaryMask>,
}

impl Oracle {
    fn new(stream: &BatchStream) -> Self {
        let masks = stream
            .entries()
            .iter()
            .map(|e| {
                let s = stream.loader().load(e).unwrap();
                (s.image.iter().map(|v| v.to_bits()).collect(), s.mask)
            })
            .collect();
        Self {
            size: stream.sample_size(),
            masks,
        }
    }
}

impl Segmenter for Oracle {
    fn input_size(&self) -> usize {
        self.size
    }

    fn logits(&self, images: &Tensor) -> roadseg::Result<Tensor> {
        let b = images.dims()[0];
        let per = 3 * self.size * self.size;
        let flat: Vec<f32> = images.flatten_all()?.to_vec1()?;
        let mut out = Vec::with_capacity(b * self.size * self.size);
        for chunk in flat.chunks(per) {
            let key: Vec<u32> = chunk.iter().map(|v| v.to_bits()).collect();
            out.extend(self.masks[&key].as_slice().iter().map(|&m| if m == 1 { 8.0f32 } else { -8.0 }));
        }
        Ok(Tensor::from_vec(out, (b, 1, self.size, self.size), &Device::Cpu)?)
    }
}

struct Constant {
    size: usize,
    logit: f32,
}

impl Segmenter for Constant {
    fn input_size(&self) -> usize {
        self.size
    }

    fn logits(&self, images: &Tensor) -> roadseg::Result<Tensor> {
        let b = images.dims()[0];
        Ok(Tensor::full(self.logit, (b, 1, self.size, self.size), &Device::Cpu)?)
    }
}

#[test]
fn oracle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::synthetic(dir.path(), SyntheticStyle::Suburban, 7, 32, 4);
    let stream = common::fixed_stream(&m, 32, 3);
    let r = cross_evaluate(&Oracle::new(&stream), "oracle", "x", "y", &stream, 0.5).unwrap();
    assert_eq!(r.report.metric_values(), [1.0; 7]);
    assert!(r.per_sample.iter().all(|s| s.road_iou == 1.0));
    assert!(!r.same_dataset);

    let g = tempfile::tempdir().unwrap();
    let items = error_gallery(&Oracle::new(&stream), &stream, 3, 0.5, g.path()).unwrap();
    assert_eq!(items.len(), 3);
    assert!(items.iter().all(|i| i.road_iou == 1.0));
}

#[test]
fn background_model_has_zero_recall() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::synthetic(dir.path(), SyntheticStyle::Highway, 5, 32, 4);
    let stream = common::fixed_stream(&m, 32, 2);
    let model = Constant { size: 32, logit: -3.0 };
    let r = cross_evaluate(&model, "bg", "a", "a", &stream, 0.5).unwrap();
    assert_eq!(r.report.recall, 0.0);
    assert_eq!(r.report.counts.tp + r.report.counts.fp, 0);
    assert!(r.same_dataset);
    let g = tempfile::tempdir().unwrap();
    let items = error_gallery(&model, &stream, 2, 0.5, g.path()).unwrap();
    assert!(items.iter().all(|i| i.road_iou == 0.0));
}

#[test]
fn resolution_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::synthetic(dir.path(), SyntheticStyle::Highway, 3, 32, 4);
    let stream = common::fixed_stream(&m, 32, 2);
    let model = SegmentationModel::new(&ModelConfig::unet(64, 2), 0, DType::F32).unwrap();
    assert!(matches!(
        cross_evaluate(&model, "u", "a", "b", &stream, 0.5),
        Err(roadseg::Error::Config(_))
    ));
}

fn brute_force(pred: &BinaryMask, gt: &BinaryMask) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            match (pred.get(y, x), gt.get(y, x)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

#[test]
fn trained_model_report_is_micro_aggregated_and_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::synthetic(dir.path(), SyntheticStyle::Highway, 5, 32, 12);
    let stream = common::fixed_stream(&m, 32, 2);
    let mut model = SegmentationModel::new(&ModelConfig::unet(32, 4), 0, DType::F32).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 2,
        max_epochs: 3,
        target_pixel_accuracy: 1.0,
        ..Default::default()
    };
    train(&mut model, &stream, &stream, &cfg, |_, _| Ok(())).unwrap();

    let before = model.parameter_snapshot().unwrap();
    let r = cross_evaluate(&model, "unet", "a", "b", &stream, 0.5).unwrap();
    assert_eq!(model.parameter_snapshot().unwrap(), before);
    assert_eq!(cross_evaluate(&model, "unet", "a", "b", &stream, 0.5).unwrap(), r);

    // recompute every sample by hand and pool all pixels
    let mut pooled = ConfusionCounts::default();
    for (e, score) in stream.entries().iter().zip(&r.per_sample) {
        let s = stream.loader().load(e).unwrap();
        let x = Tensor::from_vec(s.image.clone(), (1, 3, 32, 32), &Device::Cpu).unwrap();
        let logits: Vec<f32> = model.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let pred = BinaryMask::from_vec(32, 32, logits.iter().map(|&v| (v > 0.0) as u8).collect()).unwrap();
        let c = brute_force(&pred, &s.mask);
        assert_eq!(score.sample_id, e.sample_id);
        assert_eq!(score.counts, c);
        pooled += c;
    }
    assert_eq!(r.report, metrics::report(&pooled).unwrap());
    let ids: Vec<&str> = r.per_sample.iter().map(|s| s.sample_id.as_str()).collect();
    let expected: Vec<&str> = m.sample_ids().collect();
    assert_eq!(ids, expected);

    let g = tempfile::tempdir().unwrap();
    let items = error_gallery(&model, &stream, 10, 0.5, g.path()).unwrap();
    assert_eq!(items.len(), 5, "k is clamped to the dataset size");
    assert!(items.windows(2).all(|w| w[0].road_iou <= w[1].road_iou));
    let mut ranked = r.per_sample_iou();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let got: Vec<&str> = items.iter().map(|i| i.sample_id.as_str()).collect();
    let want: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(got, want);
    for item in &items {
        for p in [&item.input, &item.ground_truth, &item.prediction] {
            let img = image::open(p).unwrap();
            assert_eq!((img.width(), img.height()), (32, 32));
        }
        let name = item.input.file_name().unwrap().to_str().unwrap().to_owned();
        assert!(name.starts_with(&format!("{:03}_iou{:.3}_{}", item.rank, item.road_iou, item.sample_id)));
    }
    assert_eq!(std::fs::read_dir(g.path()).unwrap().count(), 15);
    assert!(error_gallery(&model, &stream, 0, 0.5, g.path()).is_err());
}
