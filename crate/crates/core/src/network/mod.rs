//! Model description, construction and the forward pass.

mod presets;
mod spec;

pub use presets::{preset, PRESETS};
pub use spec::{LayerKind, LayerSpec, NetworkSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperlayers::{
    forward_hyper, init_layer, plan_from_strategy, ForwardOptions, HyperForward, HyperNetworkPlan, Lambda, LayerTag,
    ParamStore, RunningStats, SharingStrategy, BN_MOMENTUM,
};
use crate::rng;
use crate::tensor::{BatchStats, Tape, Tensor};

/// A network with its hyper-layer plan and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub strategy: SharingStrategy,
    pub plan: HyperNetworkPlan,
    pub store: ParamStore,
    /// Length of λ the hyper-layers expect.
    pub lambda_dim: usize,
}

impl Network {
    pub fn build(spec: &NetworkSpec, strategy: SharingStrategy, lambda_dim: usize, seed: u64) -> Result<Self> {
        spec.audit()?;
        let plan = plan_from_strategy(spec, strategy)?;
        if plan.has_hyper() && lambda_dim == 0 {
            return Err(Error::Config("hyper layers need at least one hyperparameter".into()));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut running = Vec::with_capacity(spec.layers.len());
        for (i, (layer, &tag)) in spec.layers.iter().zip(&plan.tags).enumerate() {
            let mut r = rng::stream(seed, &[rng::tag::INIT, i as u64]);
            layers.push(init_layer(layer, tag, lambda_dim, &mut r));
            running.push(match *layer {
                LayerSpec::BatchNorm { c } => Some(RunningStats::new(c)),
                _ => None,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            strategy,
            plan,
            store: ParamStore { layers, running },
            lambda_dim,
        })
    }

    pub fn has_hyper(&self) -> bool {
        self.plan.has_hyper()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        lambda: Lambda<'_>,
        x: &Tensor,
        opts: ForwardOptions,
    ) -> Result<HyperForward> {
        forward_hyper(tape, &self.spec, &self.store, lambda, x, opts)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn predict(&self, lambda: Lambda<'_>, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, lambda, x, ForwardOptions::eval())?;
        Ok(tape.tensor(out.logits))
    }

    /// Mean eval-mode cross-entropy.
    pub fn eval_loss(&self, lambda: Lambda<'_>, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, lambda, x, ForwardOptions::eval())?;
        let l = tape.softmax_cross_entropy(out.logits, labels)?;
        Ok(tape.scalar(l))
    }

    pub fn commit_stats(&mut self, stats: &[Option<BatchStats>]) {
        self.store.commit_stats(stats, BN_MOMENTUM);
    }

    /// Evaluates every hyper-layer at `lambda` and returns the equivalent
    /// λ-free network.
    pub fn materialize(&self, lambda: &[f64]) -> Result<Network> {
        if self.has_hyper() && lambda.len() != self.lambda_dim {
            return Err(Error::shape("lambda", &[self.lambda_dim], &[lambda.len()]));
        }
        let layers = self
            .store
            .layers
            .iter()
            .map(|l| l.materialize(lambda))
            .collect::<Result<_>>()?;
        Ok(Network {
            spec: self.spec.clone(),
            strategy: SharingStrategy::None,
            plan: HyperNetworkPlan {
                tags: vec![LayerTag::Shared; self.spec.layers.len()],
            },
            store: ParamStore {
                layers,
                running: self.store.running.clone(),
            },
            lambda_dim: 0,
        })
    }
}
