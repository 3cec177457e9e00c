//! The augmentation search space.
//!
//! A policy is a vector of unbounded logits. Each of the 30 operation
//! instances (15 ops × 2 copies) owns a probability logit and, for the 12
//! ops with a strength parameter, a magnitude logit. Decoding maps a
//! probability logit through the sigmoid and a magnitude logit to
//! `Mmin + sigmoid(l)·(Mmax − Mmin)`.
//!
//! Applying a policy to an image draws `K ∈ {0, 1, 2}`, picks `K`
//! instances by probability and applies them in order.

mod image;
pub mod kernels;
mod ops;
mod policy;
mod space;

pub use image::Image;
pub use ops::{decode_mag, decode_prob, encode_mag, encode_prob, initial_value, logit, sigmoid, OpKind};
pub use policy::{
    apply_op, apply_op_traced, apply_policy, apply_policy_traced, instances, perturb_lambda, sample_transform,
    AppliedOp, Instance, PolicyParams, Transform, COPIES, INSTANCES, K_PROBS, MAX_PASSES, POLICY_DIM,
};
pub use space::{AugmentSpace, Slot};
