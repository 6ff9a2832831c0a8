use std::collections::HashSet;

use ndarray::Array2;
use submia::data::synthetic::prototypes;
use submia::data::{make_splits, DatasetBundle, DatasetName, SampleId, SplitConfig};
use submia::models::{cross_entropy_loss, Architecture, ClassifierSpec, TrainConfig};
use submia::nn::Parameterized;
use submia::shadows::{query_shadows, train_per_target_in_models, train_shadow_pool, PoolOptions, ShadowError};

fn bundle() -> DatasetBundle {
    let raw = prototypes(DatasetName::Mnist, 400, 40, 40.0, 3);
    make_splits(raw, &SplitConfig { seed: 1, victim_fraction: 0.5, cap: None }).unwrap()
}

fn setup() -> (DatasetBundle, ClassifierSpec, TrainConfig) {
    let b = bundle();
    let spec = ClassifierSpec::new(Architecture::Mlp5, b.shape, b.num_classes).unwrap();
    let cfg = TrainConfig { epochs: 1, lr_drops: vec![], batch_size: 50, ..TrainConfig::default() };
    (b, spec, cfg)
}

#[test]
fn pool_bookkeeping() {
    let (b, spec, cfg) = setup();
    let n = 30;
    let pool = train_shadow_pool::<f32>(&b, &spec, n, 0.5, &cfg, PoolOptions { workers: 2, seed: 9 }).unwrap();
    assert_eq!(pool.len(), n);
    assert_eq!(pool.manifest.shadows.len(), n);

    let m = pool.membership_matrix();
    assert_eq!(m.dim(), (n, b.splits.attacker.len()));
    let forbidden: HashSet<SampleId> = b.splits.victim_train.iter().chain(&b.splits.test).copied().collect();
    for (i, ids) in pool.training_ids.iter().enumerate() {
        assert!(ids.iter().all(|id| !forbidden.contains(id)));
        let row: Vec<SampleId> = b.splits.attacker.iter().zip(m.row(i)).filter(|(_, &f)| f).map(|(id, _)| *id).collect();
        assert_eq!(&row, ids, "membership row {i}");
    }

    // per-sample IN counts ~ Binomial(n, 1/2)
    let counts: Vec<f64> = m.columns().into_iter().map(|c| c.iter().filter(|&&f| f).count() as f64).collect();
    let k = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / k;
    let sd_of_mean = (n as f64 * 0.25 / k).sqrt();
    assert!((mean - n as f64 / 2.0).abs() <= 3.0 * sd_of_mean, "mean IN count {mean}");
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (k - 1.0);
    assert!((var - n as f64 * 0.25).abs() < 0.35 * n as f64 * 0.25, "IN count variance {var}");
}

#[test]
fn parallel_training_matches_serial() {
    let (b, spec, cfg) = setup();
    let a = train_shadow_pool::<f32>(&b, &spec, 3, 0.5, &cfg, PoolOptions { workers: 1, seed: 4 }).unwrap();
    let c = train_shadow_pool::<f32>(&b, &spec, 3, 0.5, &cfg, PoolOptions { workers: 3, seed: 4 }).unwrap();
    for (x, y) in a.models.iter().zip(&c.models) {
        assert_eq!(x.checksum(), y.checksum());
    }
    assert_eq!(a.training_ids, c.training_ids);
}

#[test]
fn query_outputs_are_consistent() {
    let (b, spec, cfg) = setup();
    let pool = train_shadow_pool::<f32>(&b, &spec, 4, 0.5, &cfg, PoolOptions::default()).unwrap();
    let ids: Vec<SampleId> = b.splits.attacker.iter().take(20).chain(b.splits.test.iter().take(5)).copied().collect();
    let x = b.images::<f32>(&ids).unwrap();
    let y = b.labels(&ids).unwrap();
    let out = query_shadows(&pool, &ids, &x, &y).unwrap();
    assert_eq!(out.losses.dim(), (4, 25));
    for (s, p) in out.softmax.iter().enumerate() {
        let l = cross_entropy_loss(p, &y).unwrap();
        for (j, v) in l.iter().enumerate() {
            assert!((v - out.losses[[s, j]]).abs() < 1e-6);
        }
    }
    // test samples were never trained on
    assert!(matches!(out.in_out_means(24), Err(ShadowError::NoInShadows(_))));
    assert_eq!(out.out_mean(24).unwrap().1, 4);

    let empty = query_shadows(&pool, &[], &Array2::<f32>::zeros((0, 784)), &[]).unwrap();
    assert_eq!(empty.num_samples(), 0);
    assert_eq!(empty.num_shadows(), 4);
}

#[test]
fn per_target_models_include_every_target() {
    let (b, spec, cfg) = setup();
    let targets: Vec<SampleId> = b.splits.victim_train.iter().take(5).chain(b.splits.test.iter().take(5)).copied().collect();
    let pool = train_per_target_in_models::<f32>(&b, &spec, &targets, 3, 0.5, &cfg, PoolOptions::default()).unwrap();
    assert_eq!(pool.len(), 3);
    assert_eq!(pool.manifest.shadows.len(), 3);
    for i in 0..3 {
        assert!(targets.iter().all(|&t| pool.contains(i, t)));
        assert!(pool.manifest.shadows[i].seconds > 0.0);
    }
    let x = b.images::<f32>(&targets).unwrap();
    let y = b.labels(&targets).unwrap();
    let out = query_shadows(&pool, &targets, &x, &y).unwrap();
    assert!(out.membership.iter().all(|&f| f));

    let none = train_per_target_in_models::<f32>(&b, &spec, &targets, 0, 0.5, &cfg, PoolOptions::default()).unwrap();
    assert!(none.is_empty());
    let stale = [b.splits.attacker[0]];
    assert!(matches!(
        train_per_target_in_models::<f32>(&b, &spec, &stale, 1, 0.5, &cfg, PoolOptions::default()),
        Err(ShadowError::TargetNotFresh(_))
    ));
}

#[test]
fn degenerate_pools_are_rejected() {
    let (b, spec, cfg) = setup();
    assert!(matches!(
        train_shadow_pool::<f32>(&b, &spec, 0, 0.5, &cfg, PoolOptions::default()),
        Err(ShadowError::Insufficient(_))
    ));
    assert!(matches!(
        train_shadow_pool::<f32>(&b, &spec, 1, 0.001, &cfg, PoolOptions::default()),
        Err(ShadowError::Insufficient(_))
    ));
    let one = train_shadow_pool::<f32>(&b, &spec, 1, 0.5, &cfg, PoolOptions::default()).unwrap();
    assert_eq!(one.len(), 1);
}

#[test]
fn diverged_shadows_are_reported_not_averaged() {
    let (b, spec, cfg) = setup();
    let mut pool = train_shadow_pool::<f32>(&b, &spec, 2, 0.5, &cfg, PoolOptions { workers: 1, seed: 5 }).unwrap();
    let nan = vec![f64::NAN; pool.models[1].state_len()];
    pool.models[1].import_state(&nan).unwrap();
    let ids = &b.splits.attacker[..4];
    let x = b.images::<f32>(ids).unwrap();
    let y = b.labels(ids).unwrap();
    assert!(matches!(query_shadows(&pool, ids, &x, &y), Err(ShadowError::NonFinite { shadow: 1, .. })));
}
