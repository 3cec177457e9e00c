use hba_core::augment::AugmentSpace;
use hba_core::data::{Baseline, NoiseTask, Standardizer};
use hba_core::hyperlayers::{Lambda, SharingStrategy};
use hba_core::network::{preset, Network};
use hba_core::pbt::{
    pbt_eval, pbt_exploit, pbt_explore, pbt_run, pbt_run_network, pbt_step, Classifier, Member, Model, PbtConfig,
};
use hba_core::rng;
use hba_core::schedule::{config_hash, ScheduleMeta};
use hba_core::train::dataset_loss;
use hba_core::{Error, Result, Tensor};

/// One weight, loss (w·x − y)² averaged over the batch.
#[derive(Clone, Debug)]
struct Scalar {
    w: Tensor,
}

impl Scalar {
    fn new(w: f64) -> Self {
        Self {
            w: Tensor::vector(vec![w]).with_grad(),
        }
    }

    fn value(&self) -> f64 {
        self.w.data()[0]
    }
}

impl Model for Scalar {
    type Example = (f64, f64);

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w]
    }

    fn loss_and_grad(&mut self, batch: &[(f64, f64)]) -> Result<f64> {
        let w = self.value();
        let n = batch.len() as f64;
        let g = batch.iter().map(|(x, y)| 2.0 * (w * x - y) * x).sum::<f64>() / n;
        self.w.set_grad(vec![g])?;
        self.eval_loss(batch)
    }

    fn eval_loss(&self, batch: &[(f64, f64)]) -> Result<f64> {
        let w = self.value();
        Ok(batch.iter().map(|(x, y)| (w * x - y).powi(2)).sum::<f64>() / batch.len() as f64)
    }
}

fn population(ws: &[f64]) -> Vec<Member<Scalar>> {
    ws.iter()
        .map(|&w| Member::new(Scalar::new(w), vec![0.0, 0.0]))
        .collect()
}

fn identity(_: &[f64], _: usize, e: &(f64, f64)) -> Result<(f64, f64)> {
    Ok(*e)
}

fn meta(space: &AugmentSpace) -> ScheduleMeta {
    ScheduleMeta {
        run_id: "t".into(),
        seed: 0,
        strategy: "none".into(),
        config_hash: config_hash("t"),
        space: space.clone(),
    }
}

#[test]
fn step_hand_example() {
    let mut m = Member::new(Scalar::new(0.0), vec![]);
    pbt_step(&mut m, &[(1.0, 1.0)], 0.1, 0.0, identity).unwrap();
    assert!((m.model.value() - 0.2).abs() < 1e-15);

    let mut z = Member::new(Scalar::new(1.0), vec![]);
    pbt_step(&mut z, &[(1.0, 1.0), (2.0, 2.0)], 0.1, 0.0, identity).unwrap();
    assert_eq!(z.model.value(), 1.0);
    assert!(pbt_step(&mut z, &[], 0.1, 0.0, identity).is_err());
}

#[test]
fn step_sees_the_members_own_augmentation() {
    let mut m = Member::new(Scalar::new(0.0), vec![2.0]);
    pbt_step(&mut m, &[(1.0, 1.0)], 0.1, 0.0, |lam, _, &(x, y)| Ok((x, y * lam[0]))).unwrap();
    assert!((m.model.value() - 0.4).abs() < 1e-15);
}

#[test]
fn eval_argmin_and_ties() {
    let val = [(1.0, 1.0)];
    let (k, losses) = pbt_eval(&population(&[0.3, 0.5]), &val).unwrap();
    assert_eq!(k, 1);
    assert!((losses[0] - 0.49).abs() < 1e-12 && (losses[1] - 0.25).abs() < 1e-12);
    assert_eq!(pbt_eval(&population(&[0.5, 0.5, 0.5]), &val).unwrap().0, 0);
    assert_eq!(pbt_eval(&population(&[3.0, 1.5, 0.5]), &val).unwrap().0, 1);
    let ws = [0.1, 0.9, 0.4, 1.3];
    let k = pbt_eval(&population(&ws), &val).unwrap().0;
    let perm = [2, 0, 3, 1];
    let permuted: Vec<f64> = perm.iter().map(|&i| ws[i]).collect();
    let kp = pbt_eval(&population(&permuted), &val).unwrap().0;
    assert_eq!(perm[kp], k);
    assert!(matches!(pbt_eval::<Scalar>(&[], &val), Err(Error::Contract(_))));
    assert!(pbt_eval(&population(&[0.0]), &[]).is_err());
    // Summed, not mean: with two identical examples the loss doubles.
    let (_, two) = pbt_eval(&population(&[0.3]), &[(1.0, 1.0), (1.0, 1.0)]).unwrap();
    assert!((two[0] - 0.98).abs() < 1e-12);
}

#[test]
fn exploit_copies_by_value() {
    let mut p = population(&[0.1, 0.2, 0.3]);
    p[2].lambda = vec![1.0, -1.0];
    pbt_exploit(&mut p, 2).unwrap();
    for m in &p {
        assert_eq!((m.model.value(), &m.lambda[..]), (0.3, &[1.0, -1.0][..]));
    }
    pbt_exploit(&mut p, 2).unwrap();
    assert!(p.iter().all(|m| m.model.value() == 0.3));
    p[0].model.w.data_mut()[0] = 9.0;
    p[0].lambda[0] = 9.0;
    assert_eq!((p[1].model.value(), p[1].lambda[0]), (0.3, 1.0));
    assert!(matches!(
        pbt_exploit(&mut p, 3),
        Err(Error::OutOfRange { index: 3, len: 3 })
    ));
}

#[test]
fn explore_noise_statistics() {
    let n = 100_000;
    let mut p: Vec<Member<Scalar>> = (0..10)
        .map(|_| Member::new(Scalar::new(0.0), vec![0.0; n / 10]))
        .collect();
    let mut r = rng::stream(1, &[5]);
    pbt_explore(&mut p, 0.3, 0.0, &mut r);
    let all: Vec<f64> = p.iter().flat_map(|m| m.lambda.clone()).collect();
    let mean = all.iter().sum::<f64>() / n as f64;
    let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((sd / 0.3 - 1.0).abs() < 0.02, "{sd}");
    assert!(mean.abs() < 0.01);
    assert!(p.iter().all(|m| m.model.value() == 0.0));
    assert_ne!(p[0].lambda, p[1].lambda);

    let mut q: Vec<Member<Scalar>> = (0..n).map(|_| Member::new(Scalar::new(0.0), vec![])).collect();
    pbt_explore(&mut q, 0.0, 0.5, &mut r);
    let ws: Vec<f64> = q.iter().map(|m| m.model.value()).collect();
    let sd = (ws.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    assert!((sd / 0.5 - 1.0).abs() < 0.02, "{sd}");
}

#[test]
fn explore_with_zero_noise_and_frozen_members() {
    let mut p = population(&[0.1, 0.2]);
    p[1].frozen = true;
    pbt_explore(&mut p, 0.0, 0.0, &mut rng::stream(0, &[]));
    assert_eq!((p[0].model.value(), p[0].lambda.clone()), (0.1, vec![0.0, 0.0]));
    pbt_explore(&mut p, 1.0, 1.0, &mut rng::stream(0, &[]));
    assert_ne!(p[0].lambda, vec![0.0, 0.0]);
    assert_eq!((p[1].model.value(), p[1].lambda.clone()), (0.2, vec![0.0, 0.0]));
}

/// With a preserved champion and a fixed validation batch, the selected
/// loss never rises.
#[test]
fn frozen_champion_keeps_selected_loss_monotone() {
    let val = [(1.0, 1.0), (2.0, 1.5), (-1.0, -0.7)];
    let train = [(1.0, 1.3), (2.0, 2.8), (-1.0, -0.2)];
    let mut p = population(&[0.0, 0.0, 0.0, 0.0]);
    let mut r = rng::stream(3, &[]);
    let mut prev = f64::INFINITY;
    for round in 0..30 {
        for m in p.iter_mut().filter(|m| !m.frozen) {
            pbt_step(m, &train, 0.05, 0.0, |lam, _, &(x, y)| Ok((x, y + lam[0]))).unwrap();
        }
        let (k, losses) = pbt_eval(&p, &val).unwrap();
        assert!(losses[k] <= prev, "round {round}: {} > {prev}", losses[k]);
        prev = losses[k];
        pbt_exploit(&mut p, k).unwrap();
        p.iter_mut().for_each(|m| m.frozen = false);
        p[k].frozen = true;
        pbt_explore(&mut p, 0.3, 0.0, &mut r);
    }
}

#[test]
fn noiseless_round_with_identical_members_is_plain_sgd() {
    let (train, val) = NoiseTask {
        n_train: 64,
        n_val: 32,
        ..NoiseTask::default()
    }
    .generate(1)
    .unwrap();
    let space = AugmentSpace::GaussianNoise { max_scale: 1.0 };
    let spec = preset("linear-bn", &[4], 2).unwrap();
    let cfg = PbtConfig {
        n: 3,
        rounds: 1,
        t_train: 6,
        sigma: 0.0,
        batch_size: 8,
        alpha: 0.1,
        ..PbtConfig::default()
    };
    let std = Standardizer::fit(&train);
    let net = Network::build(&spec, SharingStrategy::None, 0, 2).unwrap();
    let init = |_| Classifier::new(net.clone(), std.clone());
    let out = pbt_run(&cfg, &train, &val, &space, &Baseline::none(), init, 4, meta(&space)).unwrap();
    assert!(out.history[0].val_losses.windows(2).all(|w| w[0] == w[1]));

    let mut single = Member::new(Classifier::new(net.clone(), std.clone()).unwrap(), space.init_lambda());
    let order = rng::permutation(&mut rng::stream(4, &[rng::tag::TRAIN_ORDER, 0]), train.len());
    for (step, idx) in order.chunks(8).take(6).enumerate() {
        let batch: Vec<_> = idx.iter().map(|&j| train.get(j).clone()).collect();
        pbt_step(&mut single, &batch, 0.1, 0.0, |lam, j, e| {
            let key = [rng::tag::AUGMENT, step as u64, j as u64];
            let input = space.augment(&e.input, lam, &Baseline::none(), &mut rng::stream(4, &key))?;
            Ok(hba_core::data::Example { input, label: e.label })
        })
        .unwrap();
    }
    for (a, b) in out.best.params().iter().zip(single.model.params()) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn run_is_deterministic_with_one_schedule_entry_per_round() {
    let (train, val) = NoiseTask {
        n_train: 96,
        n_val: 48,
        ..NoiseTask::default()
    }
    .generate(3)
    .unwrap();
    let space = AugmentSpace::GaussianNoise { max_scale: 1.0 };
    let spec = preset("linear-bn", &[4], 2).unwrap();
    let cfg = PbtConfig {
        n: 3,
        rounds: 5,
        t_train: 4,
        sigma: 0.5,
        ..PbtConfig::default()
    };
    let run = |seed| pbt_run_network(&cfg, &train, &val, &space, &Baseline::none(), &spec, seed, meta(&space)).unwrap();
    let (a, b) = (run(1), run(1));
    assert_eq!(a.best.net, b.best.net);
    assert_eq!(
        (&a.schedule, &a.history, &a.lambda),
        (&b.schedule, &b.history, &b.lambda)
    );
    assert_eq!(a.schedule.len(), 5);
    assert_eq!(a.history.len(), 5);
    let last = a.history.last().unwrap();
    assert_eq!(a.schedule.entries[4].policy, space.slots(&a.lambda).unwrap());
    let loss = dataset_loss(&a.best.net, Lambda::Absent, &val, &a.best.std).unwrap() * val.len() as f64;
    assert!((loss - last.val_losses[last.best]).abs() < 1e-9);
    assert_ne!(run(2).history, a.history);
}

#[test]
fn config_validation() {
    PbtConfig::default().validate().unwrap();
    assert_eq!(PbtConfig::default().sigma_prime, 0.0);
    for bad in [
        PbtConfig {
            n: 1,
            ..PbtConfig::default()
        },
        PbtConfig {
            rounds: 0,
            ..PbtConfig::default()
        },
        PbtConfig {
            t_train: 0,
            ..PbtConfig::default()
        },
        PbtConfig {
            alpha: 0.0,
            ..PbtConfig::default()
        },
        PbtConfig {
            sigma: -0.1,
            ..PbtConfig::default()
        },
        PbtConfig {
            val_batch_size: Some(0),
            ..PbtConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let spec = preset("linear-bn", &[4], 2).unwrap();
    let hyper = Network::build(&spec, SharingStrategy::FirstBN, 1, 0).unwrap();
    let (train, _) = NoiseTask {
        n_train: 8,
        n_val: 8,
        ..NoiseTask::default()
    }
    .generate(0)
    .unwrap();
    assert!(Classifier::new(hyper, Standardizer::fit(&train)).is_err());
}
