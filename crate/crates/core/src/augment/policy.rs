use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::kernels;
use super::ops::{decode_mag, decode_prob, encode_mag, encode_prob, initial_value, OpKind};
use crate::error::{Error, Result};
use crate::rng;

pub const COPIES: usize = 2;
/// Operation instances: two copies of each of the fifteen ops.
pub const INSTANCES: usize = COPIES * 15;
/// Length of the policy vector: a probability logit per instance plus a
/// magnitude logit for each of the twelve magnitude ops.
pub const POLICY_DIM: usize = COPIES * (15 + 12);

/// Categorical distribution over the number of ops applied per image.
pub const K_PROBS: [f64; 3] = [0.2, 0.3, 0.5];
/// Selection passes over the shuffled instances before giving up.
pub const MAX_PASSES: usize = 10;

/// Position of one operation instance inside the policy vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instance {
    pub copy: usize,
    pub kind: OpKind,
    pub prob_index: usize,
    pub mag_index: Option<usize>,
}

/// Copy-major, op-minor, probability before magnitude.
pub fn instances() -> Vec<Instance> {
    let mut out = Vec::with_capacity(INSTANCES);
    let mut idx = 0;
    for copy in 0..COPIES {
        for kind in OpKind::ALL {
            let prob_index = idx;
            idx += 1;
            let mag_index = kind.has_magnitude().then(|| {
                idx += 1;
                idx - 1
            });
            out.push(Instance {
                copy,
                kind,
                prob_index,
                mag_index,
            });
        }
    }
    debug_assert_eq!(idx, POLICY_DIM);
    out
}

/// The unbounded policy vector λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    logits: Vec<f64>,
}

impl PolicyParams {
    /// Every probability at 0.05 and every magnitude at `0.95·Mmin + 0.05·Mmax`.
    pub fn init() -> Self {
        let mut logits = vec![0.0; POLICY_DIM];
        for inst in instances() {
            logits[inst.prob_index] = encode_prob(initial_value(0.0, 1.0));
            if let (Some(i), Some((lo, hi))) = (inst.mag_index, inst.kind.range()) {
                logits[i] = encode_mag(initial_value(lo, hi), inst.kind).unwrap();
            }
        }
        Self { logits }
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.len() != POLICY_DIM {
            return Err(Error::shape("policy", &[POLICY_DIM], &[logits.len()]));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("policy logits must be finite".into()));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<f64> {
        self.logits
    }

    pub fn prob(&self, inst: &Instance) -> f64 {
        decode_prob(self.logits[inst.prob_index])
    }

    pub fn mag(&self, inst: &Instance) -> Option<f64> {
        inst.mag_index.map(|i| decode_mag(self.logits[i], inst.kind).unwrap())
    }

    /// Decoded value for a named op and copy.
    pub fn lookup(&self, copy: usize, kind: OpKind) -> (f64, Option<f64>) {
        let inst = instances()
            .into_iter()
            .find(|i| i.copy == copy && i.kind == kind)
            .expect("every (copy, op) pair has an instance");
        (self.prob(&inst), self.mag(&inst))
    }
}

/// Ops drawn for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub k: usize,
    /// `(kind, decoded magnitude)` in application order.
    pub ops: Vec<(OpKind, Option<f64>)>,
}

fn sample_k<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in K_PROBS.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    K_PROBS.len() - 1
}

/// Draws `K`, then walks shuffled instances accepting each with its own
/// probability until `K` are taken or [`MAX_PASSES`] passes are spent.
/// An instance is taken at most once.
pub fn sample_transform<R: Rng + ?Sized>(policy: &PolicyParams, rng: &mut R) -> Transform {
    let k = sample_k(rng);
    let all = instances();
    let mut taken = vec![false; all.len()];
    let mut ops = Vec::with_capacity(k);
    let mut passes = 0;
    while ops.len() < k && passes < MAX_PASSES {
        passes += 1;
        for i in rng::permutation(rng, all.len()) {
            if ops.len() == k {
                break;
            }
            if taken[i] {
                continue;
            }
            let u: f64 = rng.random();
            if u < policy.prob(&all[i]) {
                taken[i] = true;
                ops.push((all[i].kind, policy.mag(&all[i])));
            }
        }
    }
    Transform { k, ops }
}

/// One op as actually applied, for logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedOp {
    pub op: OpKind,
    pub magnitude: Option<f64>,
    /// `-1` when a signed op's magnitude was negated, else `1`.
    pub sign: i8,
}

/// [`apply_op`] that also reports the sign drawn.
pub fn apply_op_traced<R: Rng + ?Sized>(
    img: &Image,
    kind: OpKind,
    magnitude: f64,
    rng: &mut R,
) -> Result<(Image, AppliedOp)> {
    if kind.has_magnitude() {
        kind.check_magnitude(magnitude)?;
    }
    let sign: i8 = if kind.is_signed() && rng.random::<bool>() {
        -1
    } else {
        1
    };
    let m = magnitude * f64::from(sign);
    let out = match kind {
        OpKind::ShearX => kernels::shear_x(img, m),
        OpKind::ShearY => kernels::shear_y(img, m),
        OpKind::TranslateX => kernels::translate_x(img, m),
        OpKind::TranslateY => kernels::translate_y(img, m),
        OpKind::Rotate => kernels::rotate(img, m),
        OpKind::AutoContrast => kernels::auto_contrast(img),
        OpKind::Invert => kernels::invert(img),
        OpKind::Equalize => kernels::equalize(img),
        OpKind::Solarize => kernels::solarize(img, m),
        OpKind::Posterize => kernels::posterize(img, m),
        OpKind::Contrast => kernels::contrast(img, m),
        OpKind::Color => kernels::color(img, m),
        OpKind::Brightness => kernels::brightness(img, m),
        OpKind::Sharpness => kernels::sharpness(img, m),
        OpKind::Cutout => {
            let side = (m * img.height().min(img.width()) as f64).round() as usize;
            let cy = rng.random_range(0..img.height());
            let cx = rng.random_range(0..img.width());
            kernels::cutout(img, side, cy, cx)
        }
    };
    let applied = AppliedOp {
        op: kind,
        magnitude: kind.has_magnitude().then_some(magnitude),
        sign,
    };
    Ok((out, applied))
}

/// Applies one op. `magnitude` is ignored for magnitude-free ops.
pub fn apply_op<R: Rng + ?Sized>(img: &Image, kind: OpKind, magnitude: f64, rng: &mut R) -> Result<Image> {
    apply_op_traced(img, kind, magnitude, rng).map(|(img, _)| img)
}

pub fn apply_policy_traced<R: Rng + ?Sized>(
    img: &Image,
    policy: &PolicyParams,
    rng: &mut R,
) -> Result<(Image, Vec<AppliedOp>)> {
    let t = sample_transform(policy, rng);
    let mut cur = img.clone();
    let mut log = Vec::with_capacity(t.ops.len());
    for (kind, mag) in t.ops {
        let (next, applied) = apply_op_traced(&cur, kind, mag.unwrap_or(0.0), rng)?;
        cur = next;
        log.push(applied);
    }
    Ok((cur, log))
}

pub fn apply_policy<R: Rng + ?Sized>(img: &Image, policy: &PolicyParams, rng: &mut R) -> Result<Image> {
    apply_policy_traced(img, policy, rng).map(|(img, _)| img)
}

/// `count` independent draws of `λ + ε`, `ε ~ N(0, sigma²)` per entry.
pub fn perturb_lambda<R: Rng + ?Sized>(lambda: &[f64], sigma: f64, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            lambda
                .iter()
                .map(|&l| if sigma == 0.0 { l } else { rng::normal(rng, l, sigma) })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let all = instances();
        assert_eq!(all.len(), INSTANCES);
        assert_eq!(POLICY_DIM, 54);
        assert_eq!(all[0].kind, OpKind::ShearX);
        assert_eq!((all[0].prob_index, all[0].mag_index), (0, Some(1)));
        assert_eq!(all[5].kind, OpKind::AutoContrast);
        assert_eq!(all[5].mag_index, None);
        assert_eq!(all[15].copy, 1);
        assert_eq!(all[15].prob_index, 27);
    }

    #[test]
    fn initial_values() {
        let p = PolicyParams::init();
        let (prob, mag) = p.lookup(0, OpKind::Rotate);
        assert!((prob - 0.05).abs() < 1e-12);
        assert!((mag.unwrap() - 1.5).abs() < 1e-12);
        let (_, mag) = p.lookup(1, OpKind::Contrast);
        assert!((mag.unwrap() - 0.19).abs() < 1e-12);
        for inst in instances() {
            assert!((p.logits()[inst.prob_index] - (0.05f64 / 0.95).ln()).abs() < 1e-12);
        }
    }
}
