//! Synchronous population-based training over a discrete population.
//!
//! Each round every member takes `t_train` SGD steps on data augmented with
//! its own λ, the member with the lowest summed validation loss is copied
//! over all others, and the copies are then perturbed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpace;
use crate::data::{Baseline, Dataset, Example, Input, Standardizer};
use crate::error::{Error, Result};
use crate::hyperlayers::{ForwardOptions, Lambda, SharingStrategy};
use crate::network::{Network, NetworkSpec};
use crate::rng;
use crate::schedule::{Schedule, ScheduleMeta};
use crate::tensor::{sgd_step, BatchStats, Tape, Tensor};
use crate::train::{dataset_loss, LrSchedule};

/// A trainable model as PBT sees it.
pub trait Model: Clone {
    type Example;

    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Mean training loss over `batch`, leaving gradients on the parameters.
    fn loss_and_grad(&mut self, batch: &[Self::Example]) -> Result<f64>;
    /// Mean evaluation loss over `batch`.
    fn eval_loss(&self, batch: &[Self::Example]) -> Result<f64>;
    /// Called after each parameter update.
    fn after_step(&mut self) {}
}

/// A plain network with its input standardizer.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub net: Network,
    pub std: Standardizer,
    pending: Vec<Option<BatchStats>>,
}

impl Classifier {
    pub fn new(net: Network, std: Standardizer) -> Result<Self> {
        if net.has_hyper() {
            return Err(Error::Config("population members must be plain networks".into()));
        }
        Ok(Self {
            net,
            std,
            pending: Vec::new(),
        })
    }
}

impl Model for Classifier {
    type Example = Example;

    fn params(&self) -> Vec<&Tensor> {
        self.net.store.tensors()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.store.tensors_mut()
    }

    fn loss_and_grad(&mut self, batch: &[Example]) -> Result<f64> {
        let inputs: Vec<&Input> = batch.iter().map(|e| &e.input).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let x = self.std.batch(&inputs)?;
        let mut tape = Tape::new();
        let out = self
            .net
            .forward(&mut tape, Lambda::Absent, &x, ForwardOptions::train())?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        let grads = tape.backward(loss)?;
        self.net.store.assign_grads(&out.params, &grads)?;
        self.pending = out.stats;
        Ok(tape.scalar(loss))
    }

    fn eval_loss(&self, batch: &[Example]) -> Result<f64> {
        let inputs: Vec<&Input> = batch.iter().map(|e| &e.input).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        self.net.eval_loss(Lambda::Absent, &self.std.batch(&inputs)?, &labels)
    }

    fn after_step(&mut self) {
        let stats = std::mem::take(&mut self.pending);
        self.net.commit_stats(&stats);
    }
}

#[derive(Clone, Debug)]
pub struct Member<M> {
    pub model: M,
    pub lambda: Vec<f64>,
    /// Frozen members neither train nor get perturbed.
    pub frozen: bool,
}

impl<M> Member<M> {
    pub fn new(model: M, lambda: Vec<f64>) -> Self {
        Self {
            model,
            lambda,
            frozen: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PbtConfig {
    /// Population size.
    pub n: usize,
    /// Rounds of step/eval/exploit/explore.
    pub rounds: usize,
    /// SGD steps per member per round.
    pub t_train: usize,
    /// Std of the λ perturbation.
    pub sigma: f64,
    /// Std of the parameter perturbation.
    pub sigma_prime: f64,
    pub alpha: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    /// Examples per evaluation; `None` uses the whole validation set.
    pub val_batch_size: Option<usize>,
    pub weight_decay: f64,
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            n: 4,
            rounds: 40,
            t_train: 8,
            sigma: 0.25,
            sigma_prime: 0.0,
            alpha: 0.05,
            lr_schedule: LrSchedule::Constant,
            batch_size: 8,
            val_batch_size: None,
            weight_decay: 0.0,
        }
    }
}

impl PbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!(
                "population size must be at least 2, got {}",
                self.n
            )));
        }
        if self.rounds == 0 || self.t_train == 0 || self.batch_size == 0 || self.val_batch_size == Some(0) {
            return Err(Error::Config("rounds, t_train and batch sizes must be positive".into()));
        }
        if !(self.alpha > 0.0) || !(self.sigma >= 0.0) || !(self.sigma_prime >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "alpha must be positive; sigma, sigma_prime, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One SGD step of `member` on `batch`, each example first passed through
/// `augment` with the member's λ.
pub fn pbt_step<M: Model>(
    member: &mut Member<M>,
    batch: &[M::Example],
    alpha: f64,
    weight_decay: f64,
    mut augment: impl FnMut(&[f64], usize, &M::Example) -> Result<M::Example>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Batch("empty training batch".into()));
    }
    let augmented = batch
        .iter()
        .enumerate()
        .map(|(j, e)| augment(&member.lambda, j, e))
        .collect::<Result<Vec<_>>>()?;
    let loss = member.model.loss_and_grad(&augmented)?;
    sgd_step(&mut member.model.params_mut(), alpha, weight_decay)?;
    member.model.after_step();
    Ok(loss)
}

/// Index of the member with the lowest summed loss on `val`; ties go to the
/// lowest index.
pub fn pbt_eval<M: Model>(population: &[Member<M>], val: &[M::Example]) -> Result<(usize, Vec<f64>)> {
    if population.is_empty() {
        return Err(Error::Contract("empty population".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation batch"));
    }
    let losses = population
        .iter()
        .map(|m| Ok(m.model.eval_loss(val)? * val.len() as f64))
        .collect::<Result<Vec<_>>>()?;
    let best = losses
        .iter()
        .enumerate()
        .fold(0, |b, (i, &l)| if l < losses[b] { i } else { b });
    Ok((best, losses))
}

/// Copies member `k`'s parameters and λ over every other member.
pub fn pbt_exploit<M: Model>(population: &mut [Member<M>], k: usize) -> Result<()> {
    if k >= population.len() {
        return Err(Error::OutOfRange {
            index: k,
            len: population.len(),
        });
    }
    let (model, lambda) = (population[k].model.clone(), population[k].lambda.clone());
    for (i, m) in population.iter_mut().enumerate() {
        if i != k {
            m.model = model.clone();
            m.lambda = lambda.clone();
        }
    }
    Ok(())
}

/// Adds `N(0, σ²)` to every λ entry and `N(0, σ′²)` to every parameter entry
/// of each unfrozen member.
pub fn pbt_explore<M: Model, R: Rng + ?Sized>(population: &mut [Member<M>], sigma: f64, sigma_prime: f64, rng: &mut R) {
    for m in population.iter_mut().filter(|m| !m.frozen) {
        if sigma > 0.0 {
            m.lambda.iter_mut().for_each(|v| *v += rng::normal(rng, 0.0, sigma));
        }
        if sigma_prime > 0.0 {
            for p in m.model.params_mut() {
                p.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng::normal(rng, 0.0, sigma_prime));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub best: usize,
    pub val_losses: Vec<f64>,
}

pub struct PbtOutput<M> {
    pub best: M,
    pub lambda: Vec<f64>,
    pub schedule: Schedule,
    pub history: Vec<RoundRecord>,
}

/// Without-replacement index stream over `0..n`, reshuffled per pass.
struct Cursor {
    key: Vec<u64>,
    pass: u64,
    pos: usize,
    order: Vec<usize>,
}

impl Cursor {
    fn new(seed: u64, key: Vec<u64>, n: usize) -> Self {
        let order = rng::permutation(&mut rng::stream(seed, &[&key[..], &[0]].concat()), n);
        Self {
            key,
            pass: 0,
            pos: 0,
            order,
        }
    }

    fn next(&mut self, seed: u64, size: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.pass += 1;
            self.pos = 0;
            let n = self.order.len();
            self.order = rng::permutation(&mut rng::stream(seed, &[&self.key[..], &[self.pass]].concat()), n);
        }
        let end = (self.pos + size).min(self.order.len());
        let mut out = self.order[self.pos..end].to_vec();
        self.pos = end;
        // Keep at least two examples per batch for batch norm.
        if out.len() < 2 && self.order.len() >= 2 {
            out.extend(self.next(seed, 2 - out.len()));
        }
        out
    }
}

/// Runs the full population loop on image or feature data, augmenting with
/// `space`. `init(i)` builds member `i`'s model.
#[allow(clippy::too_many_arguments)]
pub fn pbt_run<M: Model<Example = Example>>(
    config: &PbtConfig,
    train: &Dataset,
    val: &Dataset,
    space: &AugmentSpace,
    baseline: &Baseline,
    init: impl Fn(usize) -> Result<M>,
    seed: u64,
    meta: ScheduleMeta,
) -> Result<PbtOutput<M>> {
    config.validate()?;
    let lambda0 = space.init_lambda();
    let mut population = (0..config.n)
        .map(|i| Ok(Member::new(init(i)?, lambda0.clone())))
        .collect::<Result<Vec<_>>>()?;
    // Members share the batch order and the augmentation draws, so the
    // selection compares hyperparameters rather than minibatch luck.
    let mut cursor = Cursor::new(seed, vec![rng::tag::TRAIN_ORDER], train.len());
    let mut schedule = Schedule::new(meta);
    let mut history = Vec::with_capacity(config.rounds);
    let total = config.rounds * config.t_train;
    let mut best = 0;
    for round in 0..config.rounds {
        for t in 0..config.t_train {
            let step = round * config.t_train + t;
            let idx = cursor.next(seed, config.batch_size);
            let batch: Vec<Example> = idx.iter().map(|&j| train.get(j).clone()).collect();
            let alpha = config.lr_schedule.at(config.alpha, step, total);
            for member in population.iter_mut().filter(|m| !m.frozen) {
                pbt_step(member, &batch, alpha, config.weight_decay, |lam, j, e| {
                    let key = [rng::tag::AUGMENT, step as u64, j as u64];
                    let input = space.augment(&e.input, lam, baseline, &mut rng::stream(seed, &key))?;
                    Ok(Example { input, label: e.label })
                })?;
            }
        }
        let val_batch: Vec<Example> = match config.val_batch_size {
            None => val.examples().to_vec(),
            Some(b) => {
                let order = rng::permutation(&mut rng::stream(seed, &[rng::tag::VAL_ORDER, round as u64]), val.len());
                order.iter().take(b).map(|&j| val.get(j).clone()).collect()
            }
        };
        let (k, losses) = pbt_eval(&population, &val_batch)?;
        pbt_exploit(&mut population, k)?;
        schedule.record(round, &population[k].lambda)?;
        history.push(RoundRecord {
            round,
            best: k,
            val_losses: losses,
        });
        best = k;
        if round + 1 < config.rounds {
            let mut r = rng::stream(seed, &[rng::tag::EXPLORE, round as u64]);
            pbt_explore(&mut population, config.sigma, config.sigma_prime, &mut r);
        }
    }
    let winner = population.swap_remove(best);
    Ok(PbtOutput {
        best: winner.model,
        lambda: winner.lambda,
        schedule,
        history,
    })
}

/// `pbt_run` with plain networks built from `spec`, member `i` initialized
/// from its own seed stream.
#[allow(clippy::too_many_arguments)]
pub fn pbt_run_network(
    config: &PbtConfig,
    train: &Dataset,
    val: &Dataset,
    space: &AugmentSpace,
    baseline: &Baseline,
    spec: &NetworkSpec,
    seed: u64,
    meta: ScheduleMeta,
) -> Result<PbtOutput<Classifier>> {
    let std = Standardizer::fit(train);
    let init = |i: usize| {
        let s = rng::derive_seed(seed, &[rng::tag::MEMBER, i as u64, rng::tag::INIT]);
        Classifier::new(Network::build(spec, SharingStrategy::None, 0, s)?, std.clone())
    };
    let out = pbt_run(config, train, val, space, baseline, init, seed, meta)?;
    log::info!(
        "pbt finished: val loss {:.4}",
        dataset_loss(&out.best.net, Lambda::Absent, val, &out.best.std)?
    );
    Ok(out)
}
