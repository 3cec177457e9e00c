use std::collections::HashSet;

use hba_core::augment::Image;
use hba_core::data::{
    load_cifar10_binary, make_noise_task, make_rotation_task, parse_cifar10, split, Dataset, Example, Input, NoiseTask,
    RotationTask, Standardizer,
};
use hba_core::Error;
use proptest::prelude::*;

const RECORD: usize = 3073;

/// Two records with distinct, position-dependent bytes.
fn fixture() -> Vec<u8> {
    let mut bytes = Vec::with_capacity(2 * RECORD);
    for (r, label) in [(0usize, 3u8), (1, 9)] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| ((i * 7 + r * 13) % 256) as u8));
    }
    bytes
}

#[test]
fn cifar_fixture_parses_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    std::fs::write(&path, fixture()).unwrap();
    let d = load_cifar10_binary(&path, None).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.labels(), vec![3, 9]);
    assert_eq!(d.classes(), 10);
    for r in 0..2 {
        let Input::Image(img) = &d.get(r).input else {
            panic!("image expected")
        };
        assert_eq!((img.channels(), img.height(), img.width()), (3, 32, 32));
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let i = c * 1024 + y * 32 + x;
                    assert_eq!(img.get(y, x, c), ((i * 7 + r * 13) % 256) as u8);
                }
            }
        }
    }
    assert_eq!(load_cifar10_binary(&path, Some(1)).unwrap().len(), 1);
}

#[test]
fn cifar_truncation_reports_offset() {
    let bytes = fixture();
    for cut in [1, 100, RECORD + 1, 2 * RECORD - 1] {
        match parse_cifar10(&bytes[..cut], None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (cut / RECORD * RECORD) as u64, "cut {cut}"),
            other => panic!("cut {cut}: {:?}", other.map(|d| d.len())),
        }
    }
    assert_eq!(parse_cifar10(&bytes[..RECORD], None).unwrap().len(), 1);
    let mut bad = bytes.clone();
    bad[RECORD] = 10;
    assert!(matches!(parse_cifar10(&bad, None), Err(Error::Format { offset, .. }) if offset == RECORD as u64));
    assert!(matches!(parse_cifar10(&bytes, Some(0)), Err(Error::Empty(_))));
    assert!(matches!(
        load_cifar10_binary("/nonexistent/x.bin".as_ref(), None),
        Err(Error::Io(_))
    ));
}

fn features(n: usize) -> Dataset {
    let ex = (0..n)
        .map(|i| Example {
            input: Input::Features(vec![i as f64]),
            label: i % 2,
        })
        .collect();
    Dataset::new(ex, 2).unwrap()
}

fn ids(d: &Dataset) -> Vec<usize> {
    d.examples()
        .iter()
        .map(|e| match &e.input {
            Input::Features(f) => f[0] as usize,
            Input::Image(_) => unreachable!(),
        })
        .collect()
}

#[test]
fn split_sizes_and_determinism() {
    let d = features(10);
    let (t, v) = split(&d, 0.2, 1).unwrap();
    assert_eq!((t.len(), v.len()), (8, 2));
    let (t2, v2) = split(&d, 0.2, 1).unwrap();
    assert_eq!((ids(&t), ids(&v)), (ids(&t2), ids(&v2)));
    let d = features(200);
    let (a, _) = split(&d, 0.3, 1).unwrap();
    let (b, _) = split(&d, 0.3, 2).unwrap();
    assert_ne!(ids(&a), ids(&b));
    assert!(split(&d, 0.0, 1).is_err());
    assert!(split(&d, 1.0, 1).is_err());
    assert!(split(&features(3), 0.01, 1).is_err());
}

#[test]
fn dataset_validation() {
    let bad = vec![Example {
        input: Input::Features(vec![0.0]),
        label: 2,
    }];
    assert!(matches!(
        Dataset::new(bad, 2),
        Err(Error::Label { label: 2, classes: 2 })
    ));
    assert!(matches!(Dataset::new(vec![], 2), Err(Error::Empty(_))));
    let mixed = vec![
        Example {
            input: Input::Features(vec![0.0]),
            label: 0,
        },
        Example {
            input: Input::Features(vec![0.0, 1.0]),
            label: 0,
        },
    ];
    assert!(Dataset::new(mixed, 2).is_err());
}

#[test]
fn rotation_task_properties() {
    let task = RotationTask {
        n_train: 64,
        n_val: 10_000,
        ..RotationTask::default()
    };
    let (train, val, angles) = task.generate(5).unwrap();
    assert_eq!((train.len(), val.len(), angles.len()), (64, 10_000, 10_000));
    assert_eq!(train.input_shape(), vec![1, 16, 16]);
    assert_eq!(train.classes(), 4);

    // Kolmogorov–Smirnov distance to U[-30, 30]; the 0.1% critical value
    // for n = 10⁴ is about 0.0195.
    let mut a = angles.clone();
    a.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    let d = a
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x + 30.0) / 60.0;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 0.0195, "KS distance {d}");
    assert!(a[0] >= -30.0 && a[a.len() - 1] <= 30.0);

    let counts = (0..4).map(|c| val.labels().iter().filter(|&&l| l == c).count());
    for c in counts {
        assert!((2300..2700).contains(&c), "{c}");
    }
}

#[test]
fn rotation_task_is_deterministic_and_training_is_canonical() {
    let (t1, v1) = make_rotation_task(20, 20, 3).unwrap();
    let (t2, v2) = make_rotation_task(20, 20, 3).unwrap();
    assert_eq!((&t1, &v1), (&t2, &v2));
    let (t3, _) = make_rotation_task(20, 20, 4).unwrap();
    assert_ne!(t1, t3);
    // A horizontal bar in canonical orientation has far more ink in its
    // rows than its columns.
    let task = RotationTask {
        pixel_noise: 0.0,
        jitter: 0.0,
        ..RotationTask::default()
    };
    let (train, _, _) = task.generate(1).unwrap();
    for ex in train.examples().iter().filter(|e| e.label == 0) {
        let Input::Image(img) = &ex.input else { unreachable!() };
        let row = |y: usize| (0..16).filter(|&x| img.get(y, x, 0) > 100).count();
        let col = |x: usize| (0..16).filter(|&y| img.get(y, x, 0) > 100).count();
        let max_row = (0..16).map(row).max().unwrap();
        let max_col = (0..16).map(col).max().unwrap();
        assert!(max_row > 2 * max_col, "{max_row} vs {max_col}");
    }
}

#[test]
fn noise_task_properties() {
    let (t1, v1) = make_noise_task(100, 7).unwrap();
    let (t2, v2) = make_noise_task(100, 7).unwrap();
    assert_eq!((&t1, &v1), (&t2, &v2));
    let task = NoiseTask::default();
    let (train, val) = task.generate(7).unwrap();
    assert_eq!((train.len(), val.len()), (task.n_train, task.n_val));
    assert_eq!(train.input_shape(), vec![task.dim]);
    let key = |e: &Example| match &e.input {
        Input::Features(f) => f.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        Input::Image(_) => unreachable!(),
    };
    let seen: HashSet<Vec<u64>> = train.examples().iter().map(key).collect();
    assert!(val.examples().iter().all(|e| !seen.contains(&key(e))));
    // Validation inputs carry extra noise.
    let var = |d: &Dataset| {
        let xs: Vec<f64> = d
            .examples()
            .iter()
            .flat_map(|e| match &e.input {
                Input::Features(f) => f.clone(),
                Input::Image(_) => unreachable!(),
            })
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    };
    let expect = task.val_noise * task.val_noise;
    assert!(
        ((var(&val) - var(&train)) - expect).abs() < 0.1,
        "{} {}",
        var(&val),
        var(&train)
    );
}

#[test]
fn standardizer_uses_training_statistics() {
    let img = |v: u8| Input::Image(Image::filled(2, 2, 1, v).unwrap());
    let train = Dataset::new(
        vec![
            Example {
                input: img(0),
                label: 0,
            },
            Example {
                input: img(255),
                label: 1,
            },
        ],
        2,
    )
    .unwrap();
    let s = Standardizer::fit(&train);
    assert!((s.mean[0] - 0.5).abs() < 1e-12);
    assert!((s.std[0] - 0.5).abs() < 1e-12);
    let x = s.batch(&[&img(255), &img(0)]).unwrap();
    assert_eq!(x.shape(), &[2, 1, 2, 2]);
    assert!(x.data()[..4].iter().all(|&v| (v - 1.0).abs() < 1e-12));
    assert!(x.data()[4..].iter().all(|&v| (v + 1.0).abs() < 1e-12));
}

proptest! {
    #[test]
    fn split_is_disjoint_and_exhaustive(n in 2usize..200, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let d = features(n);
        if let Ok((t, v)) = split(&d, frac, seed) {
            let mut all = [ids(&t), ids(&v)].concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(v.len(), (n as f64 * frac).round() as usize);
        }
    }
}
