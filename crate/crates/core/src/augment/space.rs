use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{decode_mag, decode_prob, encode_mag, encode_prob, initial_value, sigmoid, OpKind};
use super::policy::{apply_policy, instances, PolicyParams, POLICY_DIM};
use crate::data::{Baseline, Input, Order};
use crate::error::{Error, Result};
use crate::rng;

/// The family of augmentations a λ vector parameterizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentSpace {
    /// The fifteen image operations, two copies each.
    Pba,
    /// One hyperparameter: additive `N(0, s²)` feature noise with
    /// `s = max_scale · sigmoid(λ)`.
    GaussianNoise { max_scale: f64 },
}

/// Serialized view of one operation instance. Decoded values plus the raw
/// logits; fields that do not apply are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub copy: usize,
    pub op: String,
    pub prob: Option<f64>,
    pub mag: Option<f64>,
    pub prob_logit: Option<f64>,
    pub mag_logit: Option<f64>,
}

const NOISE_OP: &str = "GaussianNoise";

impl AugmentSpace {
    pub fn dim(&self) -> usize {
        match self {
            AugmentSpace::Pba => POLICY_DIM,
            AugmentSpace::GaussianNoise { .. } => 1,
        }
    }

    pub fn init_lambda(&self) -> Vec<f64> {
        match self {
            AugmentSpace::Pba => PolicyParams::init().into_logits(),
            AugmentSpace::GaussianNoise { .. } => vec![encode_prob(initial_value(0.0, 1.0))],
        }
    }

    pub fn noise_scale(max_scale: f64, logit: f64) -> f64 {
        max_scale * sigmoid(logit)
    }

    fn check(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.dim() {
            return Err(Error::shape("lambda", &[self.dim()], &[lambda.len()]));
        }
        Ok(())
    }

    pub fn slots(&self, lambda: &[f64]) -> Result<Vec<Slot>> {
        self.check(lambda)?;
        Ok(match self {
            AugmentSpace::Pba => instances()
                .into_iter()
                .map(|inst| Slot {
                    copy: inst.copy,
                    op: inst.kind.name().to_string(),
                    prob: Some(decode_prob(lambda[inst.prob_index])),
                    mag: inst.mag_index.map(|i| decode_mag(lambda[i], inst.kind).unwrap()),
                    prob_logit: Some(lambda[inst.prob_index]),
                    mag_logit: inst.mag_index.map(|i| lambda[i]),
                })
                .collect(),
            AugmentSpace::GaussianNoise { max_scale } => vec![Slot {
                copy: 0,
                op: NOISE_OP.to_string(),
                prob: None,
                mag: Some(Self::noise_scale(*max_scale, lambda[0])),
                prob_logit: None,
                mag_logit: Some(lambda[0]),
            }],
        })
    }

    /// Rebuilds λ from slots. Raw logits win when present; otherwise the
    /// decoded values are re-encoded.
    pub fn lambda_from_slots(&self, slots: &[Slot]) -> Result<Vec<f64>> {
        let bad = |msg: String| Error::Format {
            offset: 0,
            message: msg,
        };
        match self {
            AugmentSpace::Pba => {
                let insts = instances();
                if slots.len() != insts.len() {
                    return Err(bad(format!("expected {} slots, got {}", insts.len(), slots.len())));
                }
                let mut lambda = vec![0.0; POLICY_DIM];
                for (inst, slot) in insts.iter().zip(slots) {
                    if slot.copy != inst.copy || OpKind::from_name(&slot.op) != Some(inst.kind) {
                        return Err(bad(format!(
                            "slot ({}, {}) out of order, expected ({}, {})",
                            slot.copy, slot.op, inst.copy, inst.kind
                        )));
                    }
                    lambda[inst.prob_index] = match (slot.prob_logit, slot.prob) {
                        (Some(l), _) => l,
                        (None, Some(p)) => encode_prob(p),
                        (None, None) => return Err(bad(format!("slot {} has no probability", slot.op))),
                    };
                    if let Some(i) = inst.mag_index {
                        lambda[i] = match (slot.mag_logit, slot.mag) {
                            (Some(l), _) => l,
                            (None, Some(m)) => encode_mag(m, inst.kind)?,
                            (None, None) => return Err(bad(format!("slot {} has no magnitude", slot.op))),
                        };
                    }
                }
                Ok(lambda)
            }
            AugmentSpace::GaussianNoise { max_scale } => {
                let [slot] = slots else {
                    return Err(bad(format!("expected 1 slot, got {}", slots.len())));
                };
                if slot.op != NOISE_OP {
                    return Err(bad(format!("unexpected op {}", slot.op)));
                }
                match (slot.mag_logit, slot.mag) {
                    (Some(l), _) => Ok(vec![l]),
                    (None, Some(m)) => Ok(vec![encode_prob(m / max_scale)]),
                    (None, None) => Err(bad("noise slot has no magnitude".into())),
                }
            }
        }
    }

    /// Training-time augmentation of one input under λ, including the
    /// baseline pipeline for images.
    pub fn augment<R: Rng + ?Sized>(
        &self,
        input: &Input,
        lambda: &[f64],
        baseline: &Baseline,
        rng: &mut R,
    ) -> Result<Input> {
        self.check(lambda)?;
        match (self, input) {
            (AugmentSpace::Pba, Input::Image(img)) => {
                let policy = PolicyParams::from_logits(lambda.to_vec())?;
                let out = match baseline.order {
                    Order::PolicyFirst => {
                        let a = apply_policy(img, &policy, rng)?;
                        baseline.flip_crop(&a, rng)
                    }
                    Order::BaselineFirst => {
                        let a = baseline.flip_crop(img, rng);
                        apply_policy(&a, &policy, rng)?
                    }
                };
                Ok(Input::Image(baseline.cutout(&out, rng)))
            }
            (AugmentSpace::GaussianNoise { max_scale }, Input::Features(x)) => {
                let s = Self::noise_scale(*max_scale, lambda[0]);
                Ok(Input::Features(
                    x.iter().map(|&v| v + s * rng::standard_normal(rng)).collect(),
                ))
            }
            (space, input) => Err(Error::Config(format!(
                "augmentation space {space:?} cannot act on {} inputs",
                match input {
                    Input::Image(_) => "image",
                    Input::Features(_) => "feature",
                }
            ))),
        }
    }
}
