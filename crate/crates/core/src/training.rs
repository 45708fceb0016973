//! Binary cross-entropy on logits, Adam, and the epoch loop that trains
//! until a validation pixel-accuracy target or an epoch cap.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datasets::{Batch, BatchStream};
use crate::error::{Error, Result};
use crate::mask_ops::BinaryMask;
use crate::metrics::{self, ConfusionCounts};
use crate::models::{SegmentationModel, Segmenter};

/// Mean binary cross-entropy between `logits` and binary `targets`,
/// evaluated as `max(x, 0) - x*y + ln(1 + exp(-|x|))` so it stays finite for
/// any finite logit.
pub fn bce_logits_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} and targets {:?} differ",
            logits.dims(),
            targets.dims()
        )));
    }
    let targets = targets.to_dtype(logits.dtype())?;
    // y(1 - y) vanishes exactly on {0, 1}
    let off: f64 = (&targets * (1.0 - &targets)?)?
        .abs()?
        .max_all()?
        .to_dtype(DType::F64)?
        .to_scalar()?;
    if off != 0.0 || off.is_nan() {
        return Err(Error::Domain("targets must be 0 or 1".into()));
    }
    // evaluated in f64: log(1 + e) and the mean lose ~1e-6 relative in f32
    let dtype = logits.dtype();
    let (x, y) = (logits.to_dtype(DType::F64)?, targets.to_dtype(DType::F64)?);
    let softplus = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    let loss = ((x.relu()? - (&x * &y)?)? + softplus)?;
    Ok(loss.mean_all()?.to_dtype(dtype)?)
}

/// Converts a probability threshold into the equivalent logit cut: a pixel
/// is road iff `logit > cut`. At 0.5 the cut is exactly 0, so zero logits
/// count as background.
pub fn logit_threshold(probability: f64) -> Result<f64> {
    if !(probability > 0.0 && probability < 1.0) {
        return Err(Error::Parameter(format!(
            "probability threshold {probability} must lie strictly between 0 and 1"
        )));
    }
    Ok((probability / (1.0 - probability)).ln())
}

/// Thresholds a `B×1×H×W` logit tensor into one mask per batch item.
pub fn logits_to_masks(logits: &Tensor, threshold: f64) -> Result<Vec<BinaryMask>> {
    let cut = logit_threshold(threshold)?;
    let (b, c, h, w) = logits.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected one logit channel, got {c}")));
    }
    let values: Vec<f64> = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    values
        .chunks(h * w)
        .take(b)
        .map(|px| BinaryMask::from_vec(h, w, px.iter().map(|&v| (v > cut) as u8).collect()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            moments: vec![None; num_params],
        }
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None`
/// (not reached by the loss) are left untouched.
pub fn adam_step(params: &[&Var], grads: &[Option<Tensor>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((var, grad), slot) in params.iter().zip(grads).zip(state.moments.iter_mut()) {
        let Some(g) = grad else { continue };
        let (m, v) = match slot.take() {
            Some(mv) => mv,
            None => (g.zeros_like()?, g.zeros_like()?),
        };
        let m = ((m * cfg.beta1)? + (g * (1.0 - cfg.beta1))?)?;
        let v = ((v * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
        let m_hat = (&m / bc1)?;
        let v_hat = (&v / bc2)?;
        let update = ((m_hat / (v_hat.sqrt()? + cfg.eps)?)? * cfg.learning_rate)?;
        var.set(&(var.as_tensor() - update)?)?;
        *slot = Some((m, v));
    }
    Ok(())
}

/// Adam over a fixed list of variables.
pub struct Adam {
    vars: Vec<Var>,
    state: AdamState,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Self {
        let state = AdamState::new(vars.len());
        Self { vars, state, cfg }
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        let g: Vec<Option<Tensor>> = self.vars.iter().map(|v| grads.get(v).cloned()).collect();
        let refs: Vec<&Var> = self.vars.iter().collect();
        adam_step(&refs, &g, &mut self.state, &self.cfg)
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    4
}
fn default_max_epochs() -> usize {
    300
}
fn default_target() -> f64 {
    0.97
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Stop once validation pixel accuracy reaches this value.
    #[serde(default = "default_target")]
    pub target_pixel_accuracy: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// Road probability above which a pixel counts as road.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            target_pixel_accuracy: default_target(),
            seed: 0,
            adam_betas: default_betas(),
            adam_eps: default_eps(),
            threshold: default_threshold(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_pixel_accuracy > 0.0 && self.target_pixel_accuracy <= 1.0) {
            return Err(Error::Config(format!(
                "target_pixel_accuracy {} must lie in (0, 1]",
                self.target_pixel_accuracy
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        logit_threshold(self.threshold).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_pixel_accuracy: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub reached_target: bool,
    /// Epoch (1-based) with the highest validation accuracy; earliest wins.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean_loss: f64,
    pub pixel_accuracy: f64,
    pub counts: ConfusionCounts,
    pub per_sample: Vec<(String, ConfusionCounts)>,
}

fn batch_loss(model: &impl Segmenter, batch: &Batch) -> Result<(Tensor, Tensor)> {
    let logits = model.logits(&batch.images)?;
    let loss = bce_logits_loss(&logits, &batch.masks)?;
    Ok((logits, loss))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One inference pass over `stream` (fixed order, epoch 0). Parameters are
/// only read.
pub fn evaluate_epoch(model: &impl Segmenter, stream: &BatchStream, threshold: f64) -> Result<EvalSummary> {
    if stream.is_empty() {
        return Err(Error::Config("evaluation stream is empty".into()));
    }
    if stream.sample_size() != model.input_size() {
        return Err(Error::Config(format!(
            "stream delivers {0}x{0} samples but the model expects {1}x{1}",
            stream.sample_size(),
            model.input_size()
        )));
    }
    let mut loss_sum = 0.0;
    let mut n = 0usize;
    let mut per_sample = Vec::with_capacity(stream.len());
    for batch in stream.fixed().epoch(0) {
        let batch = batch?;
        let (logits, loss) = batch_loss(model, &batch)?;
        let logits = logits.detach();
        loss_sum += scalar(&loss)? * batch.len() as f64;
        n += batch.len();
        let preds = logits_to_masks(&logits, threshold)?;
        for ((id, pred), gt) in batch.sample_ids.iter().zip(&preds).zip(&batch.gt) {
            per_sample.push((id.clone(), metrics::confusion(pred, gt)?));
        }
    }
    let counts: ConfusionCounts = per_sample.iter().map(|(_, c)| *c).sum();
    Ok(EvalSummary {
        mean_loss: loss_sum / n as f64,
        pixel_accuracy: metrics::pixel_accuracy(&counts)?,
        counts,
        per_sample,
    })
}

/// Trains `model` in place with Adam, evaluating on `val` after every
/// epoch. Stops at the first epoch whose validation pixel accuracy reaches
/// the target, or after `max_epochs`. `on_epoch` runs after each epoch's
/// evaluation (checkpointing, logging).
pub fn train(
    model: &mut SegmentationModel,
    train_stream: &BatchStream,
    val_stream: &BatchStream,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &SegmentationModel) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if train_stream.is_empty() || val_stream.is_empty() {
        return Err(Error::Config("training and validation streams must be non-empty".into()));
    }
    let vars: Vec<Var> = model.trainable_vars().into_iter().map(|(_, v)| v.clone()).collect();
    let mut opt = Adam::new(vars, config.adam());
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut reached_target = false;
    let start = Instant::now();
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for (step, batch) in train_stream.epoch(epoch - 1).enumerate() {
            let batch = batch?;
            // graph-tracked forward; `logits` is the gradient-free path
            let loss = bce_logits_loss(&model.forward(&batch.images)?, &batch.masks)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: step + 1,
                    loss: value,
                });
            }
            opt.backward_step(&loss)?;
            loss_sum += value * batch.len() as f64;
            n += batch.len();
        }
        let eval = evaluate_epoch(model, val_stream, config.threshold)?;
        if !eval.mean_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: opt.step_count() as usize,
                loss: eval.mean_loss,
            });
        }
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss: eval.mean_loss,
            val_pixel_accuracy: eval.pixel_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} val_acc {:.5}",
            log.train_loss,
            log.val_loss,
            log.val_pixel_accuracy
        );
        if best.is_none_or(|(_, acc)| log.val_pixel_accuracy > acc) {
            best = Some((epoch, log.val_pixel_accuracy));
        }
        on_epoch(&log, model)?;
        let done = log.val_pixel_accuracy >= config.target_pixel_accuracy;
        logs.push(log);
        if done {
            reached_target = true;
            break;
        }
    }
    Ok(TrainReport {
        logs,
        reached_target,
        best_epoch: best.map(|(e, _)| e).unwrap_or(1),
    })
}

pub const EPOCH_LOG_HEADER: [&str; 5] = ["epoch", "train_loss", "val_loss", "val_pixel_accuracy", "wall_time"];

pub fn write_epoch_logs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for log in logs {
        w.serialize(log)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_epoch_logs(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut logs = Vec::new();
    for rec in r.deserialize() {
        logs.push(rec?);
    }
    Ok(logs)
}

/// Appends a single log row, writing the header for a new file.
pub fn append_epoch_log(path: &Path, log: &EpochLog) -> Result<()> {
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(log)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}
