//! Inference-only evaluation of a trained model on a dataset, plus the run
//! artifacts built from it: result tables, training curves and a gallery
//! of the worst-segmented samples.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::Rgb;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_display_image, Batch, BatchStream};
use crate::error::{Error, Result};
use crate::mask_ops::overlay;
use crate::metrics::{self, ConfusionCounts, MetricsReport, SegClass};
use crate::models::Segmenter;
use crate::training::{evaluate_epoch, logits_to_masks, write_epoch_logs, EpochLog};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const CURVES_PNG: &str = "curves.png";
pub const CURVES_CSV: &str = "curves.csv";

pub const GT_TINT: Rgb<u8> = Rgb([0, 200, 0]);
pub const PRED_TINT: Rgb<u8> = Rgb([230, 0, 200]);
pub const OVERLAY_ALPHA: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub counts: ConfusionCounts,
    pub road_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalResult {
    pub model_tag: String,
    pub trained_on: String,
    pub evaluated_on: String,
    /// Set when the model is evaluated on its own training dataset.
    pub same_dataset: bool,
    pub report: MetricsReport,
    pub per_sample: Vec<SampleScore>,
}

impl CrossEvalResult {
    pub fn per_sample_iou(&self) -> Vec<(String, f64)> {
        self.per_sample.iter().map(|s| (s.sample_id.clone(), s.road_iou)).collect()
    }
}

/// One inference pass over every sample of `stream`. The report is
/// micro-aggregated from the summed per-sample counts.
pub fn cross_evaluate(
    model: &impl Segmenter,
    model_tag: &str,
    trained_on: &str,
    evaluated_on: &str,
    stream: &BatchStream,
    threshold: f64,
) -> Result<CrossEvalResult> {
    let summary = evaluate_epoch(model, stream, threshold)?;
    let per_sample = summary
        .per_sample
        .into_iter()
        .map(|(sample_id, counts)| {
            Ok(SampleScore {
                road_iou: metrics::iou(&counts, SegClass::Road)?,
                sample_id,
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let same_dataset = trained_on == evaluated_on;
    if same_dataset {
        log::warn!("evaluating `{model_tag}` on its own training dataset `{trained_on}`");
    }
    Ok(CrossEvalResult {
        model_tag: model_tag.to_owned(),
        trained_on: trained_on.to_owned(),
        evaluated_on: evaluated_on.to_owned(),
        same_dataset,
        report: metrics::report(&summary.counts)?,
        per_sample,
    })
}

/// A flat row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model_tag: String,
    pub trained_on: String,
    pub evaluated_on: String,
    pub same_dataset: bool,
    pub pixel_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou_road: f64,
    pub iou_background: f64,
    pub miou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl From<&CrossEvalResult> for ResultRow {
    fn from(r: &CrossEvalResult) -> Self {
        let m = &r.report;
        Self {
            model_tag: r.model_tag.clone(),
            trained_on: r.trained_on.clone(),
            evaluated_on: r.evaluated_on.clone(),
            same_dataset: r.same_dataset,
            pixel_accuracy: m.pixel_accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            iou_road: m.iou_road,
            iou_background: m.iou_background,
            miou: m.miou,
            tp: m.counts.tp,
            fp: m.counts.fp,
            fn_: m.counts.fn_,
            tn: m.counts.tn,
        }
    }
}

impl ResultRow {
    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            pixel_accuracy: self.pixel_accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
            iou_road: self.iou_road,
            iou_background: self.iou_background,
            miou: self.miou,
            counts: ConfusionCounts::new(self.tp, self.fp, self.fn_, self.tn),
        }
    }
}

/// Writes `results.csv` and `results.json` into `dir`, one row per result.
/// Floats use the shortest representation that parses back exactly.
pub fn tabulate(results: &[CrossEvalResult], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if results.is_empty() {
        return Err(Error::Config("no evaluation results to tabulate".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<ResultRow> = results.iter().map(ResultRow::from).collect();
    let csv_path = dir.join(RESULTS_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join(RESULTS_JSON);
    crate::datasets::write_json(&json_path, &rows)?;
    Ok((csv_path, json_path))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

const FONT_FAMILY: &str = "sans-serif";
const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

/// Registers a system font for plot labels once. Without one, plots are
/// drawn without text.
fn plot_font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        for path in FONT_CANDIDATES {
            if let Ok(bytes) = fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(FONT_FAMILY, FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found, plots will carry no labels");
        false
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// What [`plot_curves`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePlot {
    pub png: PathBuf,
    pub csv: PathBuf,
    /// First and last epoch on the x axis.
    pub epoch_span: (usize, usize),
    pub labeled: bool,
}

/// Renders loss (train, val) and validation pixel accuracy against epoch
/// into `curves.png`, and writes the plotted values to `curves.csv`.
pub fn plot_curves(logs: &[EpochLog], dir: &Path) -> Result<CurvePlot> {
    let (Some(first), Some(last)) = (logs.first(), logs.last()) else {
        return Err(Error::Config("no epoch logs to plot".into()));
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(CURVES_CSV);
    write_epoch_logs(&csv_path, logs)?;

    let span = (first.epoch, last.epoch);
    // a lone epoch still needs a non-empty axis
    let x_range = if span.0 == span.1 {
        span.0 as f64 - 0.5..span.1 as f64 + 0.5
    } else {
        span.0 as f64..span.1 as f64
    };
    let max_loss = logs
        .iter()
        .flat_map(|l| [l.train_loss, l.val_loss])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let labeled = plot_font_available();
    let png_path = dir.join(CURVES_PNG);
    {
        let root = BitMapBackend::new(&png_path, (1200, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (left, right) = root.split_horizontally(600);
        let panels = [
            (left, "loss", 0.0..max_loss),
            (right, "validation pixel accuracy", 0.0..1.0),
        ];
        for (i, (area, title, y_range)) in panels.into_iter().enumerate() {
            let mut builder = ChartBuilder::on(&area);
            builder.margin(12);
            if labeled {
                builder
                    .caption(title, (FONT_FAMILY, 20))
                    .x_label_area_size(36)
                    .y_label_area_size(52);
            }
            let mut chart = builder
                .build_cartesian_2d(x_range.clone(), y_range)
                .map_err(plot_err)?;
            let mut mesh = chart.configure_mesh();
            let ticks = (span.1 - span.0 + 1).min(10);
            mesh.x_labels(ticks).x_label_formatter(&|x| format!("{x:.0}"));
            if labeled {
                mesh.x_desc("epoch").label_style((FONT_FAMILY, 13));
            } else {
                mesh.disable_x_axis().disable_y_axis();
            }
            mesh.draw().map_err(plot_err)?;
            let series: Vec<(&str, RGBColor, Vec<(f64, f64)>)> = if i == 0 {
                vec![
                    ("train", BLUE, logs.iter().map(|l| (l.epoch as f64, l.train_loss)).collect()),
                    ("val", RED, logs.iter().map(|l| (l.epoch as f64, l.val_loss)).collect()),
                ]
            } else {
                vec![(
                    "val",
                    GREEN,
                    logs.iter().map(|l| (l.epoch as f64, l.val_pixel_accuracy)).collect(),
                )]
            };
            for (name, color, points) in series {
                let drawn = chart
                    .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
                    .map_err(plot_err)?;
                if labeled {
                    drawn
                        .label(name)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
                }
                chart
                    .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                    .map_err(plot_err)?;
            }
            if labeled {
                chart
                    .configure_series_labels()
                    .label_font((FONT_FAMILY, 13))
                    .background_style(WHITE.mix(0.8))
                    .border_style(BLACK)
                    .draw()
                    .map_err(plot_err)?;
            }
        }
        root.present().map_err(plot_err)?;
    }
    Ok(CurvePlot {
        png: png_path,
        csv: csv_path,
        epoch_span: span,
        labeled,
    })
}

/// One written gallery item.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryItem {
    /// 1-based; rank 1 has the lowest road IoU.
    pub rank: usize,
    pub sample_id: String,
    pub road_iou: f64,
    pub input: PathBuf,
    pub ground_truth: PathBuf,
    pub prediction: PathBuf,
}

/// The `k` lowest road-IoU samples, ties broken by sample id. `k` is
/// clamped to the number of scores.
pub fn rank_worst(scores: &[(String, f64)], k: usize) -> Vec<(String, f64)> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

fn gallery_stem(rank: usize, iou: f64, sample_id: &str) -> String {
    format!("{rank:03}_iou{iou:.3}_{sample_id}")
}

/// Writes input, ground-truth overlay and prediction overlay PNGs for the
/// `k` samples of `stream` with the lowest road IoU. Previously written PNGs
/// in `dir` are removed first.
pub fn error_gallery(
    model: &impl Segmenter,
    stream: &BatchStream,
    k: usize,
    threshold: f64,
    dir: &Path,
) -> Result<Vec<GalleryItem>> {
    if k == 0 {
        return Err(Error::Parameter("gallery size k must be at least 1".into()));
    }
    let summary = evaluate_epoch(model, stream, threshold)?;
    let scores = summary
        .per_sample
        .iter()
        .map(|(id, c)| Ok((id.clone(), metrics::iou(c, SegClass::Road)?)))
        .collect::<Result<Vec<_>>>()?;
    let worst = rank_worst(&scores, k);
    write_gallery(model, stream, &worst, threshold, dir)
}

fn write_gallery(
    model: &impl Segmenter,
    stream: &BatchStream,
    worst: &[(String, f64)],
    threshold: f64,
    dir: &Path,
) -> Result<Vec<GalleryItem>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "png") {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    let size = stream.sample_size();
    let mut items = Vec::with_capacity(worst.len());
    for (i, (id, iou)) in worst.iter().enumerate() {
        let entry = stream
            .entries()
            .iter()
            .find(|e| &e.sample_id == id)
            .expect("ranked ids come from the stream");
        let sample = stream.loader().load(entry)?;
        let gt = sample.mask.clone();
        let batch = Batch::from_samples(vec![sample])?;
        let logits = model.logits(&batch.images)?.detach();
        let pred = logits_to_masks(&logits, threshold)?.remove(0);
        let input = load_display_image(entry, size)?;
        let stem = gallery_stem(i + 1, *iou, id);
        let paths = ["input", "gt", "pred"].map(|kind| dir.join(format!("{stem}_{kind}.png")));
        let images = [
            input.clone(),
            overlay(&input, &gt, GT_TINT, OVERLAY_ALPHA)?,
            overlay(&input, &pred, PRED_TINT, OVERLAY_ALPHA)?,
        ];
        for (img, path) in images.iter().zip(&paths) {
            img.save(path).map_err(|e| Error::image(path, e))?;
        }
        let [input, ground_truth, prediction] = paths;
        items.push(GalleryItem {
            rank: i + 1,
            sample_id: id.clone(),
            road_iou: *iou,
            input,
            ground_truth,
            prediction,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(tag: &str, on: &str, c: ConfusionCounts) -> CrossEvalResult {
        CrossEvalResult {
            model_tag: tag.into(),
            trained_on: "a".into(),
            evaluated_on: on.into(),
            same_dataset: on == "a",
            report: metrics::report(&c).unwrap(),
            per_sample: vec![],
        }
    }

    #[test]
    fn tabulate_round_trips_and_keeps_column_order() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![
            result("unet", "b", ConfusionCounts::new(7, 3, 11, 13)),
            result("unet", "a", ConfusionCounts::new(0, 0, 5, 95)),
        ];
        let (csv_path, json_path) = tabulate(&results, dir.path()).unwrap();
        let rows = read_results_csv(&csv_path).unwrap();
        assert_eq!(rows.len(), 2);
        for (row, res) in rows.iter().zip(&results) {
            assert_eq!(row.report(), res.report);
            assert_eq!(row.same_dataset, res.same_dataset);
        }
        let text = fs::read_to_string(&csv_path).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let mut expected = vec!["model_tag", "trained_on", "evaluated_on", "same_dataset"];
        expected.extend(MetricsReport::FIELDS);
        assert_eq!(header, expected);
        assert!(text.lines().skip(1).all(|l| l.split(',').all(|f| !f.is_empty())));
        let json: Vec<ResultRow> = serde_json::from_str(&fs::read_to_string(json_path).unwrap()).unwrap();
        assert_eq!(json, rows);
        assert!(tabulate(&[], dir.path()).is_err());
    }

    fn logs(n: usize) -> Vec<EpochLog> {
        (1..=n)
            .map(|e| EpochLog {
                epoch: e,
                train_loss: 0.7 / e as f64,
                val_loss: 0.8 / e as f64,
                val_pixel_accuracy: 1.0 - 0.5 / e as f64,
                wall_time: e as f64,
            })
            .collect()
    }

    #[test]
    fn curves_span_all_epochs() {
        let dir = tempfile::tempdir().unwrap();
        for n in [1, 8, 300] {
            let plot = plot_curves(&logs(n), dir.path()).unwrap();
            assert_eq!(plot.epoch_span, (1, n));
            let img = image::open(&plot.png).unwrap();
            assert_eq!((img.width(), img.height()), (1200, 480));
            let rows = crate::training::read_epoch_logs(&plot.csv).unwrap();
            assert_eq!(rows, logs(n));
        }
        assert!(plot_curves(&[], dir.path()).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_id_and_clamps() {
        let scores = vec![
            ("c".to_string(), 0.5),
            ("b".to_string(), 0.2),
            ("a".to_string(), 0.5),
            ("d".to_string(), 1.0),
        ];
        let ids: Vec<String> = rank_worst(&scores, 3).into_iter().map(|s| s.0).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(rank_worst(&scores, 99).len(), 4);
    }

    #[test]
    fn gallery_names_carry_rank_and_iou() {
        assert_eq!(gallery_stem(1, 0.12345, "x_01"), "001_iou0.123_x_01");
        assert_eq!(gallery_stem(12, 1.0, "y"), "012_iou1.000_y");
    }
}
