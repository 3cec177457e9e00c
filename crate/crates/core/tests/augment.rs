use hba_core::augment::{
    apply_op, apply_op_traced, apply_policy, decode_mag, decode_prob, encode_mag, encode_prob, instances, kernels,
    perturb_lambda, sample_transform, Image, OpKind, PolicyParams, K_PROBS, POLICY_DIM,
};
use hba_core::rng::{self, StreamRng};
use hba_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn random_image(rng: &mut StreamRng, h: usize, w: usize, c: usize) -> Image {
    let data = (0..h * w * c).map(|_| rng.random::<u8>()).collect();
    Image::new(h, w, c, data).unwrap()
}

/// Every probability logit set to `p`, magnitudes at `mag`.
fn uniform_policy(p: f64, mag: f64) -> PolicyParams {
    let mut l = vec![mag; POLICY_DIM];
    for inst in instances() {
        l[inst.prob_index] = p;
    }
    PolicyParams::from_logits(l).unwrap()
}

#[test]
fn identity_magnitudes_are_pixel_exact() {
    let mut r = rng::stream(11, &[0]);
    for trial in 0..50 {
        let c = if trial % 2 == 0 { 1 } else { 3 };
        let img = random_image(&mut r, 5 + trial % 7, 4 + trial % 9, c);
        for kind in OpKind::ALL {
            let Some(m) = kind.identity_magnitude() else { continue };
            let out = apply_op(&img, kind, m, &mut r).unwrap();
            assert_eq!(out, img, "{kind} at {m}");
        }
    }
}

#[test]
fn solarize_full_magnitude_inverts_all_but_zero() {
    let img = Image::new(1, 4, 1, vec![0, 1, 128, 255]).unwrap();
    let out = kernels::solarize(&img, 255.0);
    assert_eq!(out.data(), &[0, 254, 127, 0]);
    assert_eq!(kernels::solarize(&img, 128.0).data(), &[0, 1, 127, 0]);
}

#[test]
fn invert_is_an_involution() {
    let mut r = rng::stream(12, &[0]);
    for _ in 0..100 {
        let img = random_image(&mut r, 6, 7, 3);
        let once = apply_op(&img, OpKind::Invert, 0.0, &mut r).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_op(&once, OpKind::Invert, 0.0, &mut r).unwrap(), img);
    }
}

/// Per-pixel histogram equalization: each value maps to the count of
/// strictly smaller pixels, rescaled by the PIL step rule.
fn equalize_oracle(img: &Image) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    for c in 0..ch {
        let plane: Vec<u8> = (0..h * w).map(|i| img.get(i / w, i % w, c)).collect();
        let max = *plane.iter().max().unwrap();
        let at_max = plane.iter().filter(|&&v| v == max).count();
        let step = (plane.len() - at_max) / 255;
        for (i, &v) in plane.iter().enumerate() {
            let below = plane.iter().filter(|&&u| u < v).count();
            let mapped = (below + step / 2).checked_div(step).map_or(v, |q| q.min(255) as u8);
            out.set(i / w, i % w, c, mapped);
        }
    }
    out
}

#[test]
fn equalize_matches_brute_force_oracle() {
    let mut r = rng::stream(13, &[0]);
    for i in 0..100 {
        let c = if i % 4 == 0 { 3 } else { 1 };
        let img = random_image(&mut r, 8, 8, c);
        assert_eq!(
            apply_op(&img, OpKind::Equalize, 0.0, &mut r).unwrap(),
            equalize_oracle(&img)
        );
    }
    // Larger planes exercise step > 1.
    for _ in 0..10 {
        let img = random_image(&mut r, 32, 32, 1);
        assert_eq!(kernels::equalize(&img), equalize_oracle(&img));
    }
}

#[test]
fn k_frequencies_match_categorical() {
    let policy = uniform_policy(50.0, 0.0);
    let mut r = rng::stream(14, &[0]);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let t = sample_transform(&policy, &mut r);
        assert_eq!(t.ops.len(), t.k);
        counts[t.k] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        let f = c as f64 / n as f64;
        assert!((f - K_PROBS[k]).abs() < 0.01, "K={k}: {f}");
    }
}

#[test]
fn tiny_probabilities_select_nothing() {
    let policy = uniform_policy(-20.0, 0.0);
    let mut r = rng::stream(15, &[0]);
    for _ in 0..2000 {
        assert!(sample_transform(&policy, &mut r).ops.is_empty());
    }
}

#[test]
fn zero_probability_policy_is_identity() {
    let policy = uniform_policy(-1000.0, 3.0);
    let mut r = rng::stream(16, &[0]);
    for _ in 0..200 {
        let img = random_image(&mut r, 6, 6, 3);
        assert_eq!(apply_policy(&img, &policy, &mut r).unwrap(), img);
    }
}

#[test]
fn instances_are_selected_at_most_once() {
    let mut l = vec![0.0; POLICY_DIM];
    for inst in instances() {
        l[inst.prob_index] = -1000.0;
    }
    let only = instances()[4];
    l[only.prob_index] = 50.0;
    let policy = PolicyParams::from_logits(l).unwrap();
    let mut r = rng::stream(17, &[0]);
    let mut saw_k2 = false;
    for _ in 0..1000 {
        let t = sample_transform(&policy, &mut r);
        saw_k2 |= t.k == 2;
        assert_eq!(t.ops.len(), t.k.min(1));
    }
    assert!(saw_k2);
}

#[test]
fn higher_logit_is_accepted_more_often() {
    let insts = instances();
    let mut r = rng::stream(18, &[0]);
    for (lo, hi) in [(-1.0, 0.0), (0.0, 1.0), (-3.0, -2.0), (1.0, 2.5)] {
        let mut l = vec![0.0; POLICY_DIM];
        for inst in &insts {
            l[inst.prob_index] = -1000.0;
        }
        let (a, b) = (insts[4], insts[20]);
        l[a.prob_index] = lo;
        l[b.prob_index] = hi;
        let policy = PolicyParams::from_logits(l).unwrap();
        let (mut na, mut nb) = (0usize, 0usize);
        for _ in 0..100_000 {
            for (kind, _) in sample_transform(&policy, &mut r).ops {
                if kind == a.kind {
                    na += 1;
                } else if kind == b.kind {
                    nb += 1;
                }
            }
        }
        assert!(nb > na, "logits {lo} vs {hi}: {na} vs {nb}");
    }
}

#[test]
fn signed_ops_negate_half_the_time() {
    let img = Image::filled(4, 4, 1, 10).unwrap();
    let mut r = rng::stream(19, &[0]);
    for kind in [
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Rotate,
    ] {
        let n = 20_000;
        let neg = (0..n)
            .filter(|_| apply_op_traced(&img, kind, 0.1, &mut r).unwrap().1.sign == -1)
            .count();
        let f = neg as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "{kind}: {f}");
    }
    let (_, op) = apply_op_traced(&img, OpKind::Solarize, 10.0, &mut r).unwrap();
    assert_eq!(op.sign, 1);
}

#[test]
fn translate_moves_by_fraction_of_width() {
    let mut img = Image::filled(1, 10, 1, 0).unwrap();
    img.set(0, 2, 0, 200);
    let out = kernels::translate_x(&img, 0.3);
    assert_eq!(out.get(0, 5, 0), 200);
    assert_eq!(out.get(0, 0, 0), kernels::FILL);
}

#[test]
fn cutout_side_scales_with_image() {
    let img = Image::filled(10, 10, 1, 0).unwrap();
    let mut r = rng::stream(20, &[0]);
    let out = apply_op(&img, OpKind::Cutout, 0.2, &mut r).unwrap();
    let filled = out.data().iter().filter(|&&v| v == kernels::FILL).count();
    assert!((1..=4).contains(&filled), "{filled}");
    assert_eq!(
        kernels::cutout(&img, 2, 5, 5)
            .data()
            .iter()
            .filter(|&&v| v != 0)
            .count(),
        4
    );
    assert_eq!(
        kernels::cutout(&img, 4, 0, 0)
            .data()
            .iter()
            .filter(|&&v| v != 0)
            .count(),
        4
    );
}

#[test]
fn posterize_keeps_top_bits() {
    let img = Image::new(1, 3, 1, vec![255, 129, 7]).unwrap();
    assert_eq!(kernels::posterize(&img, 1.0).data(), &[128, 128, 0]);
    assert_eq!(kernels::posterize(&img, 0.0).data(), &[0, 0, 0]);
    assert_eq!(kernels::posterize(&img, 4.4).data(), &[240, 128, 0]);
}

#[test]
fn out_of_range_magnitude_is_rejected() {
    let img = Image::filled(3, 3, 1, 0).unwrap();
    let mut r = rng::stream(21, &[0]);
    assert!(matches!(
        apply_op(&img, OpKind::Rotate, 31.0, &mut r),
        Err(Error::Range { .. })
    ));
    assert!(matches!(
        apply_op(&img, OpKind::Contrast, 0.0, &mut r),
        Err(Error::Range { .. })
    ));
    assert!(matches!(decode_mag(0.0, OpKind::Invert), Err(Error::NoMagnitude(_))));
}

#[test]
fn decode_examples() {
    assert_eq!(decode_prob(0.0), 0.5);
    assert_eq!(decode_mag(0.0, OpKind::Rotate).unwrap(), 15.0);
    let l = encode_mag(1.5, OpKind::Rotate).unwrap();
    assert!((decode_mag(l, OpKind::Rotate).unwrap() - 1.5).abs() < 1e-12);
    let init = PolicyParams::init();
    let (p, m) = init.lookup(0, OpKind::Rotate);
    assert!((p - 0.05).abs() < 1e-12);
    assert!((m.unwrap() - 1.5).abs() < 1e-12);
    assert!((init.lookup(1, OpKind::Contrast).1.unwrap() - 0.19).abs() < 1e-12);
    assert!((encode_prob(0.05) - (0.05f64 / 0.95).ln()).abs() < 1e-12);
}

#[test]
fn perturb_lambda_statistics() {
    let lambda: Vec<f64> = (0..POLICY_DIM).map(|i| i as f64 * 0.1 - 2.0).collect();
    let mut r = rng::stream(22, &[0]);
    let same = perturb_lambda(&lambda, 0.0, &mut r, 3);
    assert!(same.iter().all(|c| *c == lambda));
    let draws = perturb_lambda(&lambda, 1.0, &mut r, 100_000 / POLICY_DIM + 1);
    let eps: Vec<f64> = draws
        .iter()
        .flat_map(|c| c.iter().zip(&lambda).map(|(a, b)| a - b))
        .collect();
    let n = eps.len() as f64;
    let mean = eps.iter().sum::<f64>() / n;
    let std = (eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 1.0).abs() < 0.02, "{std}");
    assert!(mean.abs() < 0.02, "{mean}");
    let again = perturb_lambda(&lambda, 1.0, &mut r, 1);
    assert_ne!(again[0], draws[0]);
}

proptest! {
    #[test]
    fn policy_output_is_deterministic(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let policy = uniform_policy(shift, -shift);
        let mut r = rng::stream(seed, &[1]);
        let img = random_image(&mut r, 7, 5, 3);
        let a = apply_policy(&img, &policy, &mut rng::stream(seed, &[2])).unwrap();
        let b = apply_policy(&img, &policy, &mut rng::stream(seed, &[2])).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn every_op_is_total(seed in any::<u64>(), op in 0usize..15, t in 0.0f64..1.0, c in prop::sample::select(vec![1usize, 3])) {
        let kind = OpKind::ALL[op];
        let mut r = rng::stream(seed, &[3]);
        let img = random_image(&mut r, 1 + (seed % 9) as usize, 1 + (seed % 5) as usize, c);
        let m = kind.range().map_or(0.0, |(lo, hi)| lo + t * (hi - lo));
        let out = apply_op(&img, kind, m, &mut r).unwrap();
        prop_assert_eq!((out.height(), out.width(), out.channels()), (img.height(), img.width(), c));
    }

    #[test]
    fn encode_decode_round_trip(t in -10.0f64..10.0, op in 0usize..15) {
        prop_assert!((encode_prob(decode_prob(t)) - t).abs() < 1e-10);
        let kind = OpKind::ALL[op];
        if kind.has_magnitude() {
            let back = encode_mag(decode_mag(t, kind).unwrap(), kind).unwrap();
            prop_assert!((back - t).abs() < 1e-10);
        }
    }
}
