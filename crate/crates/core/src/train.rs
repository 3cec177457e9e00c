//! Plain (non-hyper) training with a fixed or replayed augmentation policy.
//! Shared batching and evaluation helpers live here too.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpace;
use crate::data::{Baseline, Dataset, Input, Standardizer};
use crate::error::{Error, Result};
use crate::hyperlayers::{ForwardOptions, Lambda};
use crate::network::Network;
use crate::rng;
use crate::tensor::{sgd_step, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Learning rate at `step` of `total`.
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Splits a shuffled `0..n` into batches of `batch_size`. A trailing batch of
/// one example is folded into its predecessor so batch norm always sees at
/// least two.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Mean eval-mode loss over a whole dataset.
pub fn dataset_loss(net: &Network, lambda: Lambda<'_>, data: &Dataset, std: &Standardizer) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.examples().chunks(256) {
        let inputs: Vec<&Input> = chunk.iter().map(|e| &e.input).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let x = std.batch(&inputs)?;
        total += net.eval_loss(lambda, &x, &labels)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Fraction of correctly classified examples, eval mode.
pub fn dataset_accuracy(net: &Network, lambda: Lambda<'_>, data: &Dataset, std: &Standardizer) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in data.examples().chunks(256) {
        let inputs: Vec<&Input> = chunk.iter().map(|e| &e.input).collect();
        let logits = net.predict(lambda, &std.batch(&inputs)?)?;
        let c = logits.shape()[1];
        for (row, ex) in logits.data().chunks(c).zip(chunk) {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += usize::from(arg == ex.label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
}

impl Default for PlainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainReport {
    pub epochs: Vec<EpochReport>,
    pub final_val_loss: f64,
    pub final_val_accuracy: f64,
}

/// Trains `net` (which must have no hyper-layers) with the augmentation
/// policy `policy(epoch)` applied to every training example.
#[allow(clippy::too_many_arguments)]
pub fn train_plain(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    space: &AugmentSpace,
    baseline: &Baseline,
    policy: impl Fn(usize) -> Vec<f64>,
    cfg: &PlainConfig,
    seed: u64,
) -> Result<PlainReport> {
    if net.has_hyper() {
        return Err(Error::Config(
            "plain training needs a network without hyper layers".into(),
        ));
    }
    let std = Standardizer::fit(train);
    let steps_per_epoch = batches(&(0..train.len()).collect::<Vec<_>>(), cfg.batch_size).len();
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lambda = policy(epoch);
        let order = rng::permutation(
            &mut rng::stream(seed, &[rng::tag::TRAIN_ORDER, epoch as u64]),
            train.len(),
        );
        let mut loss_sum = 0.0;
        let mut count = 0;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let mut inputs = Vec::with_capacity(idx.len());
            for (j, &i) in idx.iter().enumerate() {
                let mut r = rng::stream(seed, &[rng::tag::AUGMENT, epoch as u64, b as u64, j as u64]);
                inputs.push(space.augment(&train.get(i).input, &lambda, baseline, &mut r)?);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train.get(i).label).collect();
            let refs: Vec<&Input> = inputs.iter().collect();
            let x = std.batch(&refs)?;
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, Lambda::Absent, &x, ForwardOptions::train())?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let grads = tape.backward(loss)?;
            net.store.assign_grads(&out.params, &grads)?;
            let lr = cfg.lr_schedule.at(cfg.lr, step, total);
            sgd_step(&mut net.store.tensors_mut(), lr, cfg.weight_decay)?;
            net.commit_stats(&out.stats);
            loss_sum += tape.scalar(loss) * idx.len() as f64;
            count += idx.len();
            step += 1;
        }
        reports.push(EpochReport {
            epoch,
            train_loss: loss_sum / count as f64,
            val_loss: dataset_loss(net, Lambda::Absent, val, &std)?,
        });
    }
    Ok(PlainReport {
        epochs: reports,
        final_val_loss: dataset_loss(net, Lambda::Absent, val, &std)?,
        final_val_accuracy: dataset_accuracy(net, Lambda::Absent, val, &std)?,
    })
}
