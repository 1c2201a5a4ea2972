//! Adam, the learning-rate schedule and the epoch loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::VolumeRecord;
use crate::error::{Error, Result};
use crate::layers::{softmax, softmax_cross_entropy, Mode};
use crate::metrics::{self, MetricSummary, ScoredPrediction};
use crate::model::Model;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    /// Mirror each training volume along a random subset of its axes,
    /// drawn per epoch from `seed`.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr_start: 1e-4,
            lr_end: 1e-6,
            epochs: 50,
            seed: 0,
            lr_schedule: LrSchedule::Cosine,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr_end >= 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= lr_end <= lr_start, got lr_start {} and lr_end {}",
                self.lr_start, self.lr_end
            )));
        }
        Ok(())
    }
}

/// Per-epoch learning rate, from `lr_start` at epoch 0 to `lr_end` at the
/// last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} out of range for {} epochs", cfg.epochs)));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr_start);
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    let span = cfg.lr_start - cfg.lr_end;
    Ok(match cfg.lr_schedule {
        LrSchedule::Cosine => cfg.lr_end + span * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        LrSchedule::Linear => cfg.lr_start - span * t,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(&model.params())
    }
}

/// One bias-corrected Adam update, in place. Nothing is modified when a
/// gradient is not finite.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            op: "adam_step",
            detail: format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step_count += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step_count as i32);
    let c2 = 1.0 - b2.powi(state.step_count as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + state.eps);
            *w = T::from_f64(w.as_f64() - step);
        }
    }
    Ok(())
}

/// Inputs (each (1, C, D, H, W)) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl<T: Element> Dataset<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                op: "dataset",
                detail: format!("{} inputs, {} labels", inputs.len(), labels.len()),
            });
        }
        let ids = (0..inputs.len()).map(|i| format!("sample{i}")).collect();
        Ok(Dataset { inputs, labels, ids })
    }

    pub fn from_records(records: &[VolumeRecord]) -> Self {
        Dataset {
            inputs: records.iter().map(|r| r.volume.cast()).collect(),
            labels: records.iter().map(|r| r.label).collect(),
            ids: records.iter().map(|r| r.subject_id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let xs: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.inputs[i]).collect();
        Ok((Tensor::stack(&xs)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::NoSamples("dataset is empty".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(())
    }
}

/// Per-sample results of an eval-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    pub losses: Vec<f64>,
    /// Softmax probability of class 1.
    pub scores: Vec<ScoredPrediction>,
    pub predicted: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let hits = self.scores.iter().zip(&self.predicted).filter(|(s, &p)| s.label == p).count();
        hits as f64 / self.scores.len().max(1) as f64
    }

    pub fn summary(&self) -> Result<MetricSummary> {
        metrics::summarize(&self.scores, 0.5)
    }
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Scores every sample. Per-sample losses are summed in dataset order, so
/// the result does not depend on how samples are batched.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset<T>, batch_size: usize, mode: Mode) -> Result<Evaluation> {
    data.validate(model.spec().num_classes)?;
    let k = model.spec().num_classes;
    let mut losses = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    let mut predicted = Vec::with_capacity(data.len());
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.forward(&x, mode)?;
        let probs = softmax(&logits);
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let (loss, _) = softmax_cross_entropy(&Tensor::from_vec(crate::Shape::matrix(1, k), row.to_vec())?, &[label])?;
            losses.push(loss);
            let p1 = if k > 1 { probs.data()[i * k + 1].as_f64() } else { 1.0 };
            scores.push(ScoredPrediction { score: p1, label });
            predicted.push(argmax(row));
        }
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(Evaluation {
        loss,
        losses,
        scores,
        predicted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean train-mode loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy of the train-mode predictions made during the epoch.
    pub acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation accuracy of the best epoch, or train accuracy without a
    /// validation set.
    pub best_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_checkpoint: Option<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "train_summary.json";
pub const LAST_CHECKPOINT: &str = "last.vnet";
pub const BEST_CHECKPOINT: &str = "best.vnet";

/// Fixed per-epoch visiting order: a seeded Fisher-Yates shuffle.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn run_epoch<T: Element>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut hits = 0;
    let k = model.spec().num_classes;
    let mut flips = ChaCha8Rng::seed_from_u64(cfg.seed);
    flips.set_stream((1 << 32) | epoch as u64);
    for chunk in epoch_order(data.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
        let (x, labels) = if cfg.augment {
            let xs: Vec<Tensor<T>> = chunk
                .iter()
                .map(|&i| data.inputs[i].flip([flips.random(), flips.random(), flips.random()]))
                .collect();
            let refs: Vec<&Tensor<T>> = xs.iter().collect();
            (Tensor::stack(&refs)?, chunk.iter().map(|&i| data.labels[i]).collect())
        } else {
            data.batch(chunk)?
        };
        let trace = model.forward_trace(&x, Mode::Train)?;
        let logits = trace.logits();
        let (loss, grad) = softmax_cross_entropy(logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        loss_sum += loss * chunk.len() as f64;
        hits += labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
            .count();
        let grads = model.backward(&trace, &grad, false)?;
        model.commit(&trace);
        adam_step(&mut model.params_mut(), &grads.params, adam, lr)?;
    }
    Ok((loss_sum / data.len() as f64, hits as f64 / data.len() as f64))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains `model` in place. With `out_dir`, writes the per-epoch log, the
/// summary and the `last`/`best` checkpoints there. On divergence the
/// parameters of the last completed epoch are restored and
/// [`Error::Diverged`] is returned.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    train_set.validate(model.spec().num_classes)?;
    let val_set = val_set.filter(|v| !v.is_empty());
    if let Some(v) = val_set {
        v.validate(model.spec().num_classes)?;
    }
    let paths = out_dir.map(|d| (d.join(LOG_FILE), d.join(LAST_CHECKPOINT), d.join(BEST_CHECKPOINT)));
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let log = d.join(LOG_FILE);
        fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
    }
    let mut adam = AdamState::for_model(model);
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_acc: f64::NEG_INFINITY,
        last_checkpoint: None,
        best_checkpoint: None,
    };
    let mut good = (model.clone(), adam.clone());
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        let (loss, acc) = match run_epoch(model, &mut adam, train_set, cfg, epoch, lr) {
            Ok(r) => r,
            Err(e) => {
                *model = good.0;
                let restored = match &report.last_checkpoint {
                    Some(p) => p.display().to_string(),
                    None if report.epochs.is_empty() => "the initial parameters".to_string(),
                    None => format!("the end of epoch {}", epoch - 1),
                };
                return Err(match e {
                    Error::NonFinite(what) => Error::Diverged {
                        epoch,
                        loss: what.strip_prefix("loss ").and_then(|v| v.parse().ok()).unwrap_or(f64::NAN),
                        restored,
                    },
                    other => other,
                });
            }
        };
        let val = match val_set {
            Some(v) => Some(evaluate(model, v, cfg.batch_size, Mode::Eval)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss,
            acc,
            val_loss: val.as_ref().map(|e| e.loss),
            val_acc: val.as_ref().map(|e| e.accuracy()),
        };
        let score = record.val_acc.unwrap_or(acc);
        let improved = score > report.best_acc;
        if improved {
            report.best_acc = score;
            report.best_epoch = epoch;
        }
        if let Some((log, last, best)) = &paths {
            append_line(log, &serde_json::to_string(&record).expect("record serializes"))?;
            checkpoint::save(model, last)?;
            report.last_checkpoint = Some(last.clone());
            if improved {
                checkpoint::save(model, best)?;
                report.best_checkpoint = Some(best.clone());
            }
        }
        on_epoch(&record);
        report.epochs.push(record);
        good = (model.clone(), adam.clone());
    }
    if let Some(d) = out_dir {
        let p = d.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 11,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(10, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        assert!((lr_at(5, &cfg).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-9);
        assert!(lr_at(11, &cfg).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::full(Shape::vector(3), 2.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(Shape::vector(3))], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[2.0; 3]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn nan_gradient_fails_without_update() {
        let mut p = Tensor::<f64>::full(Shape::vector(2), 1.0);
        let mut st = AdamState::new(&[&p]);
        let g = Tensor::from_vec(Shape::vector(2), vec![0.5, f64::NAN]).unwrap();
        assert!(adam_step(&mut [&mut p], &[g], &mut st, 0.1).is_err());
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn shuffles_are_permutations() {
        let mut o = epoch_order(20, 7, 3);
        assert_eq!(o, epoch_order(20, 7, 3));
        assert_ne!(o, epoch_order(20, 7, 4));
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }
}
