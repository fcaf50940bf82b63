//! Seeded SGD training loop with divergence detection and per-epoch metrics.

use crate::autograd::{Sgd, Tape};
use crate::data::{epoch_permutation, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Optimizer and schedule settings for one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch: 64,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Column order: epoch, split, loss, accuracy.
pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.epoch, r.split, r.loss, r.accuracy
        ));
    }
    out
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(j, _)| j)
                .unwrap_or(0);
            pred == label
        })
        .count()
}

fn check_dataset<T: Scalar>(model: &Model<T>, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::config(format!("{what} dataset is empty")));
    }
    let expect = model.config.input;
    if [ds.c, ds.h, ds.w] != expect {
        return Err(Error::config(format!(
            "{what} dataset images are {}x{}x{}, model expects {}x{}x{}",
            ds.c, ds.h, ds.w, expect[0], expect[1], expect[2]
        )));
    }
    if ds.classes != model.config.classes {
        return Err(Error::config(format!(
            "{what} dataset has {} classes, model expects {}",
            ds.classes, model.config.classes
        )));
    }
    Ok(())
}

/// Step schedule: the base learning rate drops by 10x at 50% and again at
/// 75% of the epoch budget.
fn scheduled_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let mut lr = base;
    if epoch * 2 >= epochs {
        lr *= 0.1;
    }
    if epoch * 4 >= epochs * 3 {
        lr *= 0.1;
    }
    lr
}

/// Trains in place. Sample order, initialization, and atom-drop are all
/// functions of the seeds, so a repeated run produces identical metrics.
/// A non-finite loss aborts with a numeric error naming the step.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_dataset(model, train_ds, "training")?;
    if let Some(ds) = test_ds {
        check_dataset(model, ds, "test")?;
    }

    let mut opt = Sgd::new(&model.store, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut drop_rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(0xD20B));
    let mut metrics = Vec::new();

    for epoch in 0..cfg.epochs {
        opt.lr = scheduled_lr(cfg.lr, epoch, cfg.epochs);
        let perm = epoch_permutation(train_ds.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, chunk) in perm.chunks(cfg.batch).enumerate() {
            let (x, labels) = train_ds.batch::<T>(chunk);
            let mut tape = Tape::new();
            let x = tape.constant(x);
            let out = model.forward(&mut tape, x, true, Some(&mut drop_rng))?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let loss_val = tape.value(loss).data()[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged: loss {loss_val} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss_val * labels.len() as f64;
            correct += count_correct(tape.value(out.logits), &labels);
            model.store.zero_grads();
            tape.backward(loss, &mut model.store)?;
            opt.step(&mut model.store);
        }
        let n = train_ds.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        });
        if let Some(ds) = test_ds {
            let (loss, accuracy) = evaluate(model, ds, cfg.batch)?;
            metrics.push(EpochMetrics {
                epoch,
                split: "test".into(),
                loss,
                accuracy,
            });
        }
    }
    Ok(metrics)
}

/// Mean loss and accuracy over the whole set, in inference mode.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    check_dataset(model, ds, "evaluation")?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(batch) {
        let (x, labels) = ds.batch::<T>(chunk);
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let out = model.forward(&mut tape, x, false, None)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        loss_sum += tape.value(loss).data()[0].to_f64() * labels.len() as f64;
        correct += count_correct(tape.value(out.logits), &labels);
    }
    let n = ds.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}
