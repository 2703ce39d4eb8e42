//! Softmax cross-entropy, SGD with momentum, the training loop, and the
//! per-epoch run record.
//!
//! Divergence is a first-class outcome, not an error: when a batch produces a
//! non-finite loss the loop stops updating (the offending batch is never
//! applied), remembers the epoch in `diverged_at`, and pads the record out to
//! the planned number of epochs so that records from stable and unstable runs
//! line up row for row. Padded rows carry `NaN` for the loss and gradient
//! norms and freeze the accuracies at the last completed epoch's values (or
//! at the initial network's evaluation when no epoch completed).

use crate::csvfmt::{self, CsvWriter};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Mode, Network};
use crate::tensor::{derive_seed, Matrix, Rng};
use std::path::Path;

/// Mean softmax cross-entropy of a logit batch and its logit gradient
/// `(softmax - onehot) / batch`, computed with the log-sum-exp shift so large
/// logits do not overflow.
///
/// Non-finite logits yield a `NaN` loss and a zero gradient rather than an
/// error; the training loop treats that as divergence.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            op: "softmax_cross_entropy",
            expected: logits.rows(),
            actual: labels.len(),
        });
    }
    for &l in labels {
        if l >= logits.cols() {
            return Err(Error::InvalidArgument {
                arg: "labels",
                reason: format!("label {l} out of range for {} classes", logits.cols()),
            });
        }
    }
    if !logits.is_finite() {
        return Ok((f64::NAN, Matrix::zeros(logits.rows(), logits.cols())));
    }
    let m = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        loss += max + sum.ln() - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) / m);
        }
    }
    Ok((loss / m, grad))
}

/// SGD with classical momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
/// Velocities are sized to the network on the first step.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<SgdMomentum> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidArgument {
                arg: "lr",
                reason: format!("must be nonnegative and finite, got {lr}"),
            });
        }
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument {
                arg: "momentum",
                reason: format!("must be in [0, 1), got {momentum}"),
            });
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Applies one update from the gradients currently accumulated in the
    /// network.
    pub fn step(&mut self, net: &mut Network) -> Result<()> {
        let count = net.param_count();
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; count];
        } else if self.velocity.len() != count {
            return Err(Error::DimensionMismatch {
                op: "SgdMomentum::step",
                expected: self.velocity.len(),
                actual: count,
            });
        }
        let (lr, momentum) = (self.lr, self.momentum);
        let velocity = &mut self.velocity;
        let mut offset = 0;
        net.visit_params_mut(&mut |p, g| {
            for (k, (pk, &gk)) in p.iter_mut().zip(g.iter()).enumerate() {
                let v = &mut velocity[offset + k];
                *v = momentum * *v + gk;
                *pk -= lr * *v;
            }
            offset += p.len();
        });
        Ok(())
    }
}

/// Optimization schedule for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> TrainPlan {
        TrainPlan {
            epochs: 200,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument {
                arg: "epochs",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument {
                arg: "batch_size",
                reason: format!("must be at least 2, got {}", self.batch_size),
            });
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument {
                arg: "lr",
                reason: format!("must be nonnegative and finite, got {}", self.lr),
            });
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument {
                arg: "momentum",
                reason: format!("must be in [0, 1), got {}", self.momentum),
            });
        }
        Ok(())
    }
}

/// One row of the run record. `train_loss` is the batch-size-weighted mean
/// train-mode loss over the epoch's processed batches; the accuracies are
/// eval-mode over the full sets after the epoch; the gradient norms are the
/// largest Frobenius norms seen across the epoch's batches (over all trunk
/// boundary gradients, and over the input gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub max_block_grad_norm: f64,
    pub input_grad_norm: f64,
}

/// A full training run: exactly `plan.epochs` rows, plus the epoch at which
/// divergence was detected, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub diverged_at: Option<usize>,
}

impl RunRecord {
    pub fn final_row(&self) -> &EpochRow {
        self.rows.last().expect("a run record has at least one row")
    }
}

/// Eval-mode classification accuracy; argmax ties resolve to the lowest
/// class index.
pub fn evaluate(net: &Network, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "dataset",
            reason: "cannot evaluate on an empty dataset".to_string(),
        });
    }
    let logits = net.forward_eval(&d.features)?;
    let mut correct = 0usize;
    for i in 0..d.len() {
        if d.labels[i] >= logits.cols() {
            return Err(Error::InvalidArgument {
                arg: "labels",
                reason: format!(
                    "label {} out of range for {} classes",
                    d.labels[i],
                    logits.cols()
                ),
            });
        }
        let row = logits.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        if best == d.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / d.len() as f64)
}

/// Runs the training loop. Each epoch reshuffles the train set with a
/// generator seeded by `derive_seed(plan.seed, epoch)`, walks it in batches
/// of `plan.batch_size`, and drops a trailing batch of fewer than 2 samples
/// (it could not be batch-normalized). Batch-norm running statistics update
/// in train mode as a side effect of the forward passes.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    plan: &TrainPlan,
) -> Result<RunRecord> {
    plan.validate()?;
    if train_set.len() < 2 {
        return Err(Error::InvalidArgument {
            arg: "train_set",
            reason: format!("needs at least 2 samples, got {}", train_set.len()),
        });
    }
    let mut opt = SgdMomentum::new(plan.lr, plan.momentum)?;
    let mut frozen_train_acc = evaluate(net, train_set)?;
    let mut frozen_test_acc = evaluate(net, test_set)?;
    let mut rows: Vec<EpochRow> = Vec::with_capacity(plan.epochs);
    let mut diverged_at = None;

    'epochs: for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = Rng::new(derive_seed(plan.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        let mut max_block_grad: f64 = 0.0;
        let mut max_input_grad: f64 = 0.0;
        for chunk in order.chunks(plan.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train_set.subset(chunk)?;
            let logits = net.forward_mut(&batch.features, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            net.zero_grads();
            let trace = net.backward_full(&grad)?;
            for g in &trace.boundary_grads {
                max_block_grad = max_block_grad.max(g.frobenius_norm());
            }
            max_input_grad = max_input_grad.max(trace.input_grad.frobenius_norm());
            opt.step(net)?;
            loss_sum += loss * chunk.len() as f64;
            samples += chunk.len();
        }

        let train_acc = evaluate(net, train_set)?;
        let test_acc = evaluate(net, test_set)?;
        frozen_train_acc = train_acc;
        frozen_test_acc = test_acc;
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / samples as f64,
            train_acc,
            test_acc,
            max_block_grad_norm: max_block_grad,
            input_grad_norm: max_input_grad,
        });
    }

    while rows.len() < plan.epochs {
        rows.push(EpochRow {
            epoch: rows.len(),
            train_loss: f64::NAN,
            train_acc: frozen_train_acc,
            test_acc: frozen_test_acc,
            max_block_grad_norm: f64::NAN,
            input_grad_norm: f64::NAN,
        });
    }
    Ok(RunRecord { rows, diverged_at })
}

pub const RECORD_HEADER: [&str; 6] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "max_block_grad_norm",
    "input_grad_norm",
];

/// Writes a run record as CSV, one row per epoch.
pub fn write_record_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = CsvWriter::new(&RECORD_HEADER);
    for row in &record.rows {
        w.row(&[
            row.epoch.to_string(),
            csvfmt::format_f64(row.train_loss),
            csvfmt::format_f64(row.train_acc),
            csvfmt::format_f64(row.test_acc),
            csvfmt::format_f64(row.max_block_grad_norm),
            csvfmt::format_f64(row.input_grad_norm),
        ]);
    }
    w.finish(path)
}

/// Reads a run record written by [`write_record_csv`]. `diverged_at` is
/// recovered as the first row with a `NaN` train loss, which only padded
/// divergence rows produce.
pub fn read_record_csv(path: &Path) -> Result<RunRecord> {
    let (header, lines) = csvfmt::read_csv(path)?;
    if header != RECORD_HEADER {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: format!("expected columns {RECORD_HEADER:?}, got {header:?}"),
        });
    }
    let mut rows = Vec::with_capacity(lines.len());
    let mut diverged_at = None;
    for (i, fields) in lines.iter().enumerate() {
        let line = i + 2;
        let epoch = fields[0].parse::<usize>().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line,
            reason: format!("expected an integer epoch, got {:?}", fields[0]),
        })?;
        let train_loss = csvfmt::parse_f64(&fields[1], path, line)?;
        if train_loss.is_nan() && diverged_at.is_none() {
            diverged_at = Some(epoch);
        }
        rows.push(EpochRow {
            epoch,
            train_loss,
            train_acc: csvfmt::parse_f64(&fields[2], path, line)?,
            test_acc: csvfmt::parse_f64(&fields[3], path, line)?,
            max_block_grad_norm: csvfmt::parse_f64(&fields[4], path, line)?,
            input_grad_norm: csvfmt::parse_f64(&fields[5], path, line)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: "record has no rows".to_string(),
        });
    }
    Ok(RunRecord { rows, diverged_at })
}
