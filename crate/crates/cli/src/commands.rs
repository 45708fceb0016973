use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use roadseg::datasets::{
    load_manifest, split_with_ratios, BatchOrder, BatchStream, DatasetManifest, LabelEncoding, ManifestEntry, Part,
    SampleLoader, SplitAssignment,
};
use roadseg::evaluation::{self, CrossEvalResult, CurvePlot, GalleryItem};
use roadseg::models::SegmentationModel;
use roadseg::training::{self, append_epoch_log};
use roadseg::DType;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::run_dir::RunDir;
use crate::CliError;

/// Command-line options that are not configuration overrides.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub force: bool,
    pub checkpoint: Option<PathBuf>,
    pub foreign_dataset: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Opens the run directory and records the effective configuration.
fn open_run(cfg: &ExperimentConfig) -> Result<RunDir, CliError> {
    let run = RunDir::new(&cfg.out_dir);
    run.init()?;
    let path = run.config();
    fs::write(&path, cfg.to_toml()?).map_err(|e| CliError::io(&path, e))?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedDataset {
    pub name: String,
    pub samples: usize,
    /// (train, val, test)
    pub split_sizes: (usize, usize, usize),
    /// True when existing outputs were reused.
    pub reused: bool,
}

/// Decodes every label of every dataset into a cached binary mask and
/// writes the manifest and split. Datasets that are already prepared are
/// left alone unless `force` is set.
pub fn prepare(cfg: &ExperimentConfig, opts: &Options) -> Result<Vec<PreparedDataset>, CliError> {
    let run = open_run(cfg)?;
    let mut out = Vec::with_capacity(cfg.datasets.len());
    for (name, ds) in &cfg.datasets {
        let (manifest_path, split_path) = (run.manifest(name), run.split(name));
        if !opts.force && manifest_path.is_file() && split_path.is_file() {
            let manifest = DatasetManifest::load(&manifest_path)?;
            let split = SplitAssignment::load(&split_path)?;
            log::info!("dataset `{name}` is already prepared; pass --force to redo it");
            out.push(PreparedDataset {
                name: name.clone(),
                samples: manifest.len(),
                split_sizes: split.sizes(),
                reused: true,
            });
            continue;
        }
        let dir = run.prepared(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let source = load_manifest(&ds.root, ds.kind)?;
        let encoding = ds.label_encoding(&cfg.dilation);
        let masks = run.masks(name);
        fs::create_dir_all(&masks).map_err(|e| CliError::io(&masks, e))?;
        log::info!("preparing `{name}`: {} samples from {}", source.len(), ds.root.display());
        let entries = source
            .entries
            .par_iter()
            .map(|e| {
                let mask = encoding.decode(&e.label_path).map_err(|err| roadseg::Error::Sample {
                    sample_id: e.sample_id.clone(),
                    reason: err.to_string(),
                })?;
                let label_path = masks.join(format!("{}.png", e.sample_id));
                mask.save(&label_path)?;
                Ok(ManifestEntry {
                    sample_id: e.sample_id.clone(),
                    image_path: e.image_path.clone(),
                    label_path,
                })
            })
            .collect::<roadseg::Result<Vec<_>>>()?;
        let manifest = DatasetManifest::new(name.clone(), entries)?;
        let split = split_with_ratios(&manifest, cfg.seed, cfg.split)?;
        split.save(&split_path)?;
        // the manifest goes last: its presence marks a complete preparation
        manifest.save(&manifest_path)?;
        let (tr, va, te) = split.sizes();
        println!("prepared {name}: {} samples, split {tr}/{va}/{te}", manifest.len());
        out.push(PreparedDataset {
            name: name.clone(),
            samples: manifest.len(),
            split_sizes: split.sizes(),
            reused: false,
        });
    }
    Ok(out)
}

fn load_prepared(run: &RunDir, name: &str, cfg: &ExperimentConfig) -> Result<(DatasetManifest, SplitAssignment), CliError> {
    let (manifest_path, split_path) = (run.manifest(name), run.split(name));
    if !manifest_path.is_file() || !split_path.is_file() {
        return Err(CliError::Runtime(format!(
            "dataset `{name}` is not prepared in {}; run `roadseg prepare` first",
            run.root().display()
        )));
    }
    let manifest = DatasetManifest::load(&manifest_path)?;
    let split = SplitAssignment::load(&split_path)?;
    if split.seed != cfg.seed || split.ratios != cfg.split {
        return Err(CliError::Config(format!(
            "dataset `{name}` was split with seed {} and ratios {:?}, the config asks for seed {} and {:?}; \
             rerun `roadseg prepare --force`",
            split.seed, split.ratios, cfg.seed, cfg.split
        )));
    }
    Ok((manifest, split))
}

fn loader(cfg: &ExperimentConfig) -> SampleLoader {
    SampleLoader {
        size: cfg.model.input_size,
        labels: LabelEncoding::Binary,
        normalization: cfg.normalization,
    }
}

fn stream(cfg: &ExperimentConfig, entries: Vec<ManifestEntry>, order: BatchOrder) -> Result<BatchStream, CliError> {
    Ok(BatchStream::new(entries, loader(cfg), cfg.train.batch_size, order)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_tag: String,
    pub trained_on: String,
    pub seed: u64,
    pub epochs: usize,
    pub reached_target: bool,
    pub best_epoch: usize,
    pub final_val_pixel_accuracy: f64,
    pub parameters: usize,
}

/// Trains the configured model on the training dataset's train part,
/// stopping on the validation target. An existing checkpoint is kept
/// unless `force` is set.
pub fn train(cfg: &ExperimentConfig, opts: &Options) -> Result<TrainSummary, CliError> {
    let run = open_run(cfg)?;
    let name = cfg.train_dataset_name();
    let (manifest, split) = load_prepared(&run, name, cfg)?;
    if !opts.force && run.checkpoint().is_file() && run.train_summary().is_file() {
        log::info!("{} exists; pass --force to retrain", run.checkpoint().display());
        return read_json(&run.train_summary());
    }
    let train_stream = stream(cfg, split.select(&manifest, Part::Train), BatchOrder::Shuffled { seed: cfg.seed })?;
    let val_stream = stream(cfg, split.select(&manifest, Part::Val), BatchOrder::Fixed)?;
    let mut model = SegmentationModel::new(&cfg.model, cfg.seed, DType::F32)?;
    log::info!(
        "training {} ({} parameters) on `{name}`: {} train / {} val samples",
        cfg.model_tag(),
        model.num_parameters(),
        train_stream.len(),
        val_stream.len()
    );
    let dir = run.train_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let epochs_path = run.epochs();
    if epochs_path.exists() {
        fs::remove_file(&epochs_path).map_err(|e| CliError::io(&epochs_path, e))?;
    }
    let best_path = run.best_checkpoint();
    let mut best_acc = f64::NEG_INFINITY;
    let report = training::train(&mut model, &train_stream, &val_stream, &cfg.train, |log, model| {
        append_epoch_log(&epochs_path, log)?;
        if log.val_pixel_accuracy > best_acc {
            best_acc = log.val_pixel_accuracy;
            model.save_weights(&best_path)?;
        }
        Ok(())
    })?;
    model.save_weights(&run.checkpoint())?;
    let last = report.logs.last().expect("at least one epoch ran");
    let summary = TrainSummary {
        model_tag: cfg.model_tag(),
        trained_on: name.to_owned(),
        seed: cfg.seed,
        epochs: report.logs.len(),
        reached_target: report.reached_target,
        best_epoch: report.best_epoch,
        final_val_pixel_accuracy: last.val_pixel_accuracy,
        parameters: model.num_parameters(),
    };
    write_json(&run.train_summary(), &summary)?;
    if !report.reached_target {
        log::warn!(
            "validation pixel accuracy {:.4} did not reach {} within {} epochs",
            last.val_pixel_accuracy,
            cfg.train.target_pixel_accuracy,
            cfg.train.max_epochs
        );
    }
    println!(
        "trained {} on {name}: {} epochs, val pixel accuracy {:.4}, checkpoint {}",
        summary.model_tag,
        summary.epochs,
        summary.final_val_pixel_accuracy,
        run.checkpoint().display()
    );
    Ok(summary)
}

/// Loads the checkpoint named on the command line, or the run's own, and
/// checks it against the configured model.
fn load_model(run: &RunDir, cfg: &ExperimentConfig, opts: &Options) -> Result<SegmentationModel, CliError> {
    let path = opts.checkpoint.clone().unwrap_or_else(|| run.checkpoint());
    if !path.is_file() {
        return Err(CliError::Runtime(format!(
            "checkpoint {} not found; run `roadseg train` first or pass --checkpoint",
            path.display()
        )));
    }
    let model = SegmentationModel::load_checkpoint(&path)?;
    let (got, want) = (model.config(), &cfg.model);
    if got.architecture != want.architecture
        || got.input_size != want.input_size
        || (got.architecture == roadseg::models::Architecture::Unet && got.base_channels != want.base_channels)
    {
        return Err(CliError::Config(format!(
            "checkpoint {} holds {} at {}px (base {}), the config describes {} at {}px (base {})",
            path.display(),
            got.architecture,
            got.input_size,
            got.base_channels,
            want.architecture,
            want.input_size,
            want.base_channels
        )));
    }
    Ok(model)
}

fn print_result(r: &CrossEvalResult) {
    let m = &r.report;
    println!(
        "{} ({} -> {}): pixel_accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} iou_road {:.4} iou_background {:.4} miou {:.4}",
        r.model_tag, r.trained_on, r.evaluated_on, m.pixel_accuracy, m.precision, m.recall, m.f1, m.iou_road, m.iou_background, m.miou
    );
}

/// Metrics on the training dataset's held-out test part.
pub fn eval(cfg: &ExperimentConfig, opts: &Options) -> Result<CrossEvalResult, CliError> {
    let run = open_run(cfg)?;
    let name = cfg.train_dataset_name();
    let (manifest, split) = load_prepared(&run, name, cfg)?;
    let model = load_model(&run, cfg, opts)?;
    let test = stream(cfg, split.select(&manifest, Part::Test), BatchOrder::Fixed)?;
    let mut result = evaluation::cross_evaluate(&model, &cfg.model_tag(), name, name, &test, cfg.train.threshold)?;
    result.evaluated_on = format!("{name}/test");
    write_json(&run.eval_dir().join(format!("{name}.json")), &result)?;
    print_result(&result);
    Ok(result)
}

/// One inference pass over every sample of the foreign dataset.
pub fn crosseval(cfg: &ExperimentConfig, opts: &Options) -> Result<CrossEvalResult, CliError> {
    let run = open_run(cfg)?;
    let trained_on = cfg.train_dataset_name();
    let foreign = cfg.foreign_dataset_name(opts.foreign_dataset.as_deref())?;
    let (manifest, _) = load_prepared(&run, &foreign, cfg)?;
    let model = load_model(&run, cfg, opts)?;
    let all = stream(cfg, manifest.entries.clone(), BatchOrder::Fixed)?;
    let result = evaluation::cross_evaluate(&model, &cfg.model_tag(), trained_on, &foreign, &all, cfg.train.threshold)?;
    if result.same_dataset {
        eprintln!("warning: `{foreign}` is the training dataset; this is not a cross-dataset result");
    }
    write_json(&run.crosseval_dir().join(format!("{foreign}.json")), &result)?;
    print_result(&result);
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub results_csv: PathBuf,
    pub results_json: PathBuf,
    pub curves: CurvePlot,
    pub gallery: Vec<GalleryItem>,
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Tables from every stored evaluation, curves from the epoch log, and a
/// gallery of the worst samples of the first cross-evaluated dataset (or
/// the test part when there is none).
pub fn report(cfg: &ExperimentConfig, opts: &Options) -> Result<ReportOutput, CliError> {
    let run = RunDir::new(&cfg.out_dir);
    run.check()?;
    let mut results: Vec<CrossEvalResult> = Vec::new();
    let cross_files = json_files(&run.crosseval_dir())?;
    for path in json_files(&run.eval_dir())?.iter().chain(&cross_files) {
        results.push(read_json(path)?);
    }
    if results.is_empty() {
        return Err(CliError::Runtime(format!(
            "no evaluation results in {}; run `roadseg eval` or `roadseg crosseval` first",
            run.root().display()
        )));
    }
    let (results_csv, results_json) = evaluation::tabulate(&results, run.root())?;
    if !run.epochs().is_file() {
        return Err(CliError::Runtime(format!(
            "{} not found; run `roadseg train` first",
            run.epochs().display()
        )));
    }
    let logs = training::read_epoch_logs(&run.epochs())?;
    let curves = evaluation::plot_curves(&logs, run.root())?;

    let model = load_model(&run, cfg, opts)?;
    let train_name = cfg.train_dataset_name();
    let gallery_entries = match cross_files.first() {
        Some(path) => {
            let first: CrossEvalResult = read_json(path)?;
            load_prepared(&run, &first.evaluated_on, cfg)?.0.entries
        }
        None => {
            let (manifest, split) = load_prepared(&run, train_name, cfg)?;
            split.select(&manifest, Part::Test)
        }
    };
    let gallery_stream = stream(cfg, gallery_entries, BatchOrder::Fixed)?;
    let gallery = evaluation::error_gallery(
        &model,
        &gallery_stream,
        cfg.eval.gallery_k,
        cfg.train.threshold,
        &run.gallery(),
    )?;
    println!(
        "report: {} result rows, curves over epochs {}..{}, {} gallery samples in {}",
        results.len(),
        curves.epoch_span.0,
        curves.epoch_span.1,
        gallery.len(),
        run.root().display()
    );
    Ok(ReportOutput {
        results_csv,
        results_json,
        curves,
        gallery,
    })
}
