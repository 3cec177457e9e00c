//! The hypernetwork search loop.
//!
//! Training alternates two updates. A φ-step draws a fresh `ε_i ~ N(0, σ²)`
//! for every example in the batch, augments example `i` with the policy
//! `λ + ε_i`, runs it through the hypernetwork conditioned on the same
//! `λ + ε_i`, and takes an SGD step on φ (hyper-layer and shared weights).
//! A λ-step runs unaugmented validation examples through the hypernetwork at
//! `λ` itself and takes an Adam step on λ, whose gradient reaches it only
//! through the generated weights. Every `t_train` φ-steps are followed by
//! `t_val` λ-steps, the ratio carrying across batch and epoch boundaries.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::augment::{perturb_lambda, AugmentSpace, Slot};
use crate::data::{Baseline, Dataset, Input, Standardizer};
use crate::error::{Error, Result};
use crate::hyperlayers::{BnMode, ForwardOptions, Lambda};
use crate::network::Network;
use crate::rng;
use crate::schedule::{Schedule, ScheduleMeta};
use crate::tensor::{adam_step, sgd_step, AdamState, Tape, Tensor};
use crate::train::{batches, dataset_loss, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HbaConfig {
    /// Examples per φ-step, each with its own noise draw.
    pub batch_size: usize,
    /// Examples per λ-step.
    pub val_batch_size: usize,
    pub epochs: usize,
    pub t_train: usize,
    pub t_val: usize,
    /// φ learning rate.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// λ learning rate.
    pub lambda_lr: f64,
    /// Std of the exploration noise added to λ in logit space.
    pub sigma: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for HbaConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            val_batch_size: 32,
            epochs: 10,
            t_train: 2,
            t_val: 1,
            lr: 0.05,
            lr_schedule: LrSchedule::Constant,
            lambda_lr: 0.03,
            sigma: 1.0,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl HbaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("val_batch_size", self.val_batch_size as f64),
            ("epochs", self.epochs as f64),
            ("t_train", self.t_train as f64),
            ("t_val", self.t_val as f64),
            ("lr", self.lr),
            ("lambda_lr", self.lambda_lr),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sigma >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("sigma and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log, written at the end of each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lambda: Vec<Slot>,
}

/// Everything needed to resume a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HbaState {
    pub net: Network,
    pub lambda: Vec<f64>,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub phi_steps: u64,
    pub lambda_steps: u64,
    /// Validation sampling: which reshuffle we are on and how far into it.
    pub val_round: u64,
    pub val_pos: usize,
    pub schedule: Schedule,
    pub metrics: Vec<MetricRecord>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub state: HbaState,
}

pub struct RunOutput {
    /// The hypernetwork evaluated at the final λ, as a plain network.
    pub network: Network,
    pub lambda: Vec<f64>,
    pub schedule: Schedule,
    pub metrics: Vec<MetricRecord>,
}

pub struct Trainer<'a> {
    pub config: HbaConfig,
    pub space: AugmentSpace,
    pub baseline: Baseline,
    train: &'a Dataset,
    val: &'a Dataset,
    std: Standardizer,
    seed: u64,
    pub state: HbaState,
    /// Noise rows drawn by the latest φ-step.
    pub last_noise: Vec<Vec<f64>>,
    warned_constant: bool,
}

impl<'a> Trainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: HbaConfig,
        space: AugmentSpace,
        baseline: Baseline,
        net: Network,
        train: &'a Dataset,
        val: &'a Dataset,
        seed: u64,
        meta: ScheduleMeta,
    ) -> Result<Self> {
        config.validate()?;
        if net.has_hyper() && net.lambda_dim != space.dim() {
            return Err(Error::shape("lambda", &[space.dim()], &[net.lambda_dim]));
        }
        let lambda = space.init_lambda();
        Ok(Self {
            std: Standardizer::fit(train),
            state: HbaState {
                net,
                lambda,
                adam: AdamState::new(),
                epoch: 0,
                phi_steps: 0,
                lambda_steps: 0,
                val_round: 0,
                val_pos: 0,
                schedule: Schedule::new(meta),
                metrics: Vec::new(),
            },
            config,
            space,
            baseline,
            train,
            val,
            seed,
            last_noise: Vec::new(),
            warned_constant: false,
        })
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.std
    }

    pub fn lambda(&self) -> &[f64] {
        &self.state.lambda
    }

    pub fn set_lambda(&mut self, lambda: Vec<f64>) -> Result<()> {
        if lambda.len() != self.space.dim() {
            return Err(Error::shape("lambda", &[self.space.dim()], &[lambda.len()]));
        }
        self.state.lambda = lambda;
        Ok(())
    }

    fn steps_per_epoch(&self) -> usize {
        batches(&(0..self.train.len()).collect::<Vec<_>>(), self.config.batch_size).len()
    }

    /// One SGD step on φ over the training examples `batch`.
    pub fn update_phi(&mut self, batch: &[usize]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Batch("empty training batch".into()));
        }
        let step = self.state.phi_steps;
        let mut noise_rng = rng::stream(self.seed, &[rng::tag::PHI_NOISE, step]);
        let rows = perturb_lambda(&self.state.lambda, self.config.sigma, &mut noise_rng, batch.len());
        let mut inputs = Vec::with_capacity(batch.len());
        for (j, (&i, row)) in batch.iter().zip(&rows).enumerate() {
            let mut r = rng::stream(self.seed, &[rng::tag::AUGMENT, step, j as u64]);
            inputs.push(
                self.space
                    .augment(&self.train.get(i).input, row, &self.baseline, &mut r)?,
            );
        }
        let labels: Vec<usize> = batch.iter().map(|&i| self.train.get(i).label).collect();
        let refs: Vec<&Input> = inputs.iter().collect();
        let x = self.std.batch(&refs)?;
        let n = self.space.dim();
        let lam = Tensor::matrix(batch.len(), n, rows.concat())?;
        let total = self.steps_per_epoch() * self.config.epochs;
        let lr = self.config.lr_schedule.at(self.config.lr, step as usize, total);
        let net = &mut self.state.net;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, Lambda::Rows(&lam), &x, ForwardOptions::train())?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        let grads = tape.backward(loss)?;
        net.store.assign_grads(&out.params, &grads)?;
        sgd_step(&mut net.store.tensors_mut(), lr, self.config.weight_decay)?;
        net.commit_stats(&out.stats);
        self.state.phi_steps += 1;
        self.last_noise = rows;
        Ok(tape.scalar(loss))
    }

    /// Validation loss at the current λ and its gradient with respect to λ.
    /// Batch norm runs on its population statistics.
    pub fn lambda_grad(&self, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Batch("empty validation batch".into()));
        }
        let inputs: Vec<&Input> = batch.iter().map(|&i| &self.val.get(i).input).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.val.get(i).label).collect();
        let x = self.std.batch(&inputs)?;
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            mode: BnMode::Eval,
            param_grad: false,
            lambda_grad: true,
        };
        let out = self
            .state
            .net
            .forward(&mut tape, Lambda::Shared(&self.state.lambda), &x, opts)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        let grads = tape.backward(loss)?;
        let g = out
            .lambda
            .map(|v| grads.wrt(v))
            .unwrap_or_else(|| vec![0.0; self.state.lambda.len()]);
        Ok((tape.scalar(loss), g))
    }

    /// One Adam step on λ over the validation examples `batch`.
    pub fn update_lambda(&mut self, batch: &[usize]) -> Result<f64> {
        if !self.state.net.has_hyper() && !self.warned_constant {
            warn!("no hyper layers: the validation gradient with respect to lambda is zero");
            self.warned_constant = true;
        }
        let (loss, g) = self.lambda_grad(batch)?;
        let mut lam = Tensor::vector(std::mem::take(&mut self.state.lambda)).with_grad();
        lam.set_grad(g)?;
        let c = &self.config;
        let res = adam_step(
            &mut [&mut lam],
            c.lambda_lr,
            c.adam_beta1,
            c.adam_beta2,
            c.adam_eps,
            &mut self.state.adam,
        );
        self.state.lambda = lam.into_data();
        res?;
        self.state.lambda_steps += 1;
        Ok(loss)
    }

    /// Next validation batch, drawn without replacement and reshuffled
    /// once the split is used up.
    pub fn next_val_batch(&mut self) -> Vec<usize> {
        let n = self.val.len();
        if self.state.val_pos >= n {
            self.state.val_round += 1;
            self.state.val_pos = 0;
        }
        let order = rng::permutation(
            &mut rng::stream(self.seed, &[rng::tag::VAL_ORDER, self.state.val_round]),
            n,
        );
        let end = (self.state.val_pos + self.config.val_batch_size).min(n);
        let batch = order[self.state.val_pos..end].to_vec();
        self.state.val_pos = end;
        batch
    }

    /// Index of the candidate λ with the lowest summed validation loss;
    /// ties go to the lowest index.
    pub fn exploit_discrete(&self, candidates: &[Vec<f64>], val: &Dataset) -> Result<usize> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate list"));
        }
        let mut best = (0, f64::INFINITY);
        for (i, c) in candidates.iter().enumerate() {
            let loss = dataset_loss(&self.state.net, Lambda::Shared(c), val, &self.std)? * val.len() as f64;
            if loss < best.1 {
                best = (i, loss);
            }
        }
        Ok(best.0)
    }

    /// Full-validation loss at the current λ.
    pub fn val_loss(&self) -> Result<f64> {
        dataset_loss(&self.state.net, Lambda::Shared(&self.state.lambda), self.val, &self.std)
    }

    /// Runs one epoch: records λ, then interleaves φ- and λ-steps over a
    /// fresh shuffle of the training split.
    pub fn run_epoch(&mut self) -> Result<MetricRecord> {
        let epoch = self.state.epoch;
        let lambda = self.state.lambda.clone();
        self.state.schedule.record(epoch, &lambda)?;
        let order = rng::permutation(
            &mut rng::stream(self.seed, &[rng::tag::TRAIN_ORDER, epoch as u64]),
            self.train.len(),
        );
        let mut loss_sum = 0.0;
        let mut count = 0;
        for batch in batches(&order, self.config.batch_size) {
            loss_sum += self.update_phi(&batch)? * batch.len() as f64;
            count += batch.len();
            if self.state.phi_steps.is_multiple_of(self.config.t_train as u64) {
                for _ in 0..self.config.t_val {
                    let vb = self.next_val_batch();
                    self.update_lambda(&vb)?;
                }
            }
        }
        let record = MetricRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            val_loss: self.val_loss()?,
            lambda: self.space.slots(&self.state.lambda)?,
        };
        self.state.metrics.push(record.clone());
        self.state.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs and materializes the result.
    pub fn run(&mut self) -> Result<RunOutput> {
        while self.state.epoch < self.config.epochs {
            let r = self.run_epoch()?;
            log::info!("epoch {} train {:.4} val {:.4}", r.epoch, r.train_loss, r.val_loss);
        }
        Ok(RunOutput {
            network: self.materialize()?,
            lambda: self.state.lambda.clone(),
            schedule: self.state.schedule.clone(),
            metrics: self.state.metrics.clone(),
        })
    }

    pub fn materialize(&self) -> Result<Network> {
        self.state.net.materialize(&self.state.lambda)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            state: self.state.clone(),
        }
    }

    pub fn restore(&mut self, ck: Checkpoint) -> Result<()> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version),
            });
        }
        if ck.seed != self.seed {
            return Err(Error::Config(format!(
                "checkpoint seed {} does not match run seed {}",
                ck.seed, self.seed
            )));
        }
        self.state = ck.state;
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("checkpoint: {e}"),
        })
    }
}
