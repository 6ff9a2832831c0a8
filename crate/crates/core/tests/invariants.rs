use std::collections::HashSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use submia::data::synthetic::prototypes;
use submia::data::{make_splits, DatasetName, Origin, SampleId, SplitConfig};
use submia::latent::{
    nearest_subpopulation, noisy_latents, perturb_latent, radius_subpopulation, LatentStore, Metric, NoiseSpec,
};
use submia::models::{build_classifier, cross_entropy_loss, Architecture, ClassifierSpec};
use submia::nn::{softmax_rows, Parameterized, Shape3};
use submia::subpop_gan::{sample_prior, train_bigan, BiGanConfig, EncoderSource, GanMode};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_partition_the_data(seed in any::<u64>(), fraction in 0.05f64..0.95, n in 20usize..300) {
        let raw = || prototypes(DatasetName::Mnist, n, 7, 10.0, 1);
        let cfg = SplitConfig { seed, victim_fraction: fraction, cap: None };
        let b = make_splits(raw(), &cfg).unwrap();
        let v: HashSet<SampleId> = b.splits.victim_train.iter().copied().collect();
        let a: HashSet<SampleId> = b.splits.attacker.iter().copied().collect();
        let t: HashSet<SampleId> = b.splits.test.iter().copied().collect();
        prop_assert!(v.is_disjoint(&a) && v.is_disjoint(&t) && a.is_disjoint(&t));
        prop_assert_eq!(v.len() + a.len(), n);
        prop_assert!(v.iter().chain(&a).all(|id| id.origin == Origin::Train && id.index < n));
        prop_assert_eq!(t.len(), 7);
        let again = make_splits(raw(), &cfg).unwrap();
        prop_assert_eq!(serde_json::to_vec(&b.manifest).unwrap(), serde_json::to_vec(&again.manifest).unwrap());
    }
}

fn tiny_spec() -> ClassifierSpec {
    ClassifierSpec::new(Architecture::Mlp5, Shape3::new(1, 4, 4), 5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictions_are_distributions_and_match_the_head(
        seed in any::<u64>(),
        pixels in proptest::collection::vec(-50.0f64..50.0, 16 * 3),
    ) {
        let x = Array2::from_shape_vec((3, 16), pixels).unwrap();
        let m64 = build_classifier::<f64>(&tiny_spec(), seed);
        let m32 = build_classifier::<f32>(&tiny_spec(), seed);
        let p64 = m64.predict(&x).unwrap();
        let p32 = m32.predict(&x.mapv(|v| v as f32)).unwrap();
        for r in p64.rows() {
            prop_assert!((r.sum() - 1.0).abs() <= 1e-5);
        }
        for r in p32.rows() {
            prop_assert!((r.sum() - 1.0).abs() <= 1e-5);
        }
        let z = m64.encode(&x).unwrap();
        let via = softmax_rows(&(z.dot(m64.head().weight()) + m64.head().bias()));
        prop_assert!((&via - &p64).iter().all(|d| d.abs() <= 1e-5));
        // the floor keeps losses finite even for zero probabilities
        let labels: Vec<usize> = (0..3).collect();
        for l in cross_entropy_loss(&p64.mapv(|_| 0.0), &labels).unwrap() {
            prop_assert!(l.is_finite());
        }
    }

    #[test]
    fn zero_latent_coordinates_stay_zero(
        l in proptest::collection::vec(prop_oneof![Just(0.0f64), -5.0f64..5.0], 1..12),
        eps_seed in any::<u64>(),
        sigma in 0.001f64..3.0,
    ) {
        let spec = NoiseSpec::new(sigma, 7, eps_seed).unwrap();
        let noisy = noisy_latents(&l, &spec, &mut ChaCha8Rng::seed_from_u64(eps_seed));
        for row in noisy.rows() {
            for (v, &li) in row.iter().zip(&l) {
                if li == 0.0 {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
        let eps = Array2::from_elem((1, l.len()), -1.0);
        prop_assert!(perturb_latent(&l, &eps).iter().zip(&l).all(|(v, &li)| li < 0.0 || *v == 0.0));
    }

    #[test]
    fn every_pool_point_is_in_its_own_subpopulation(
        rows in proptest::collection::vec(proptest::collection::vec(0.05f64..3.0, 6), 2..40),
        pick in any::<prop::sample::Index>(),
        k in 1usize..5,
        radius in 1e-9f64..0.5,
    ) {
        let n = rows.len();
        let store = LatentStore {
            ids: (0..n).map(SampleId::train).collect(),
            latents: Array2::from_shape_vec((n, 6), rows.concat()).unwrap(),
            encoder_checksum: String::new(),
        };
        let i = pick.index(n);
        let target = store.latents.row(i).to_vec();
        for metric in [Metric::Cosine, Metric::L2] {
            let k = k.min(n);
            let near = nearest_subpopulation(&store, &target, k, metric, None).unwrap();
            prop_assert!(near.iter().any(|nb| nb.id == SampleId::train(i)), "{:?}", metric);
            prop_assert_eq!(&near, &nearest_subpopulation(&store, &target, k, metric, None).unwrap());
            let ball = radius_subpopulation(&store, &target, radius, metric, None).unwrap();
            prop_assert!(ball.iter().any(|nb| nb.id == SampleId::train(i)), "{:?}", metric);
        }
    }

    #[test]
    fn generator_inputs_come_from_the_latent_set(
        rows in proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, 3), 1..20),
        n in 1usize..50,
        seed in any::<u64>(),
    ) {
        let m = Array2::from_shape_vec((rows.len(), 3), rows.concat()).unwrap();
        let z = sample_prior(&m, n, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(z.nrows(), n);
        for r in z.rows() {
            prop_assert!(m.rows().into_iter().any(|s| s == r));
        }
    }
}

#[test]
fn noisy_latent_mean_tracks_the_latent() {
    let (draws, sigma) = (4000usize, 0.3);
    let l = [1.5, -0.7, 0.0, 2.2, -3.1, 0.4, -0.05, 5.0];
    let spec = NoiseSpec::new(sigma, draws, 11).unwrap();
    let noisy = noisy_latents(&l, &spec, &mut ChaCha8Rng::seed_from_u64(11));
    for (j, &lj) in l.iter().enumerate() {
        let mean = noisy.column(j).mean().unwrap();
        let bound = 3.0 * lj.abs() * sigma / (draws as f64).sqrt();
        assert!((mean - lj).abs() <= bound, "coordinate {j}: mean {mean} vs {lj} (bound {bound})");
        assert!(mean.signum() == lj.signum() || lj == 0.0);
    }
}

#[test]
fn white_box_training_leaves_the_victim_untouched_and_crafting_is_reproducible() {
    let raw = prototypes(DatasetName::Mnist, 160, 20, 30.0, 2);
    let b = make_splits(raw, &SplitConfig { seed: 3, victim_fraction: 0.5, cap: None }).unwrap();
    let spec = ClassifierSpec::new(Architecture::Mlp5, b.shape, b.num_classes).unwrap();
    let victim = build_classifier::<f32>(&spec, 8);
    let before = victim.checksum();
    let encoder = victim.body().clone();
    let enc_before = encoder.checksum();
    let cfg = BiGanConfig { max_epochs: 2, batch_size: 16, probe_size: 16, seed: 1, ..BiGanConfig::default() };
    let g = train_bigan::<f32>(&b, &spec, EncoderSource::Frozen(&encoder), &cfg).unwrap();
    assert_eq!(encoder.checksum(), enc_before);
    assert_eq!(victim.checksum(), before);
    assert_eq!(g.encoder_checksum, enc_before);
    assert_eq!(g.mode, GanMode::WhiteBox);

    let ids = &b.splits.test[..5];
    let x = b.images::<f32>(ids).unwrap();
    let y = b.labels(ids).unwrap();
    let noise = NoiseSpec::new(0.05, 4, 9).unwrap();
    let crafter = g.crafter(&encoder).unwrap();
    let a = crafter.craft_batch(ids, &x, &y, &noise).unwrap();
    let c = crafter.craft_batch(ids, &x, &y, &noise).unwrap();
    for (s, t) in a.iter().zip(&c) {
        assert_eq!(s.images, t.images);
        assert_eq!(s.members, t.members);
    }
    // a target's members do not depend on its batch neighbours
    let one = crafter.craft_batch(&ids[3..4], &x.slice(ndarray::s![3..4, ..]).to_owned(), &y[3..4], &noise).unwrap();
    assert_eq!(one[0].images, a[3].images);
    let bounds = b.preprocessing.bounds(1)[0];
    assert!(a.iter().flat_map(|s| s.images.iter()).all(|&v| (bounds.0 - 1e-6..=bounds.1 + 1e-6).contains(&(v as f64))));
}

#[test]
fn black_box_training_owns_its_encoder() {
    let raw = prototypes(DatasetName::Mnist, 120, 10, 30.0, 4);
    let b = make_splits(raw, &SplitConfig { seed: 5, victim_fraction: 0.5, cap: None }).unwrap();
    let spec = ClassifierSpec::new(Architecture::Mlp5, b.shape, b.num_classes).unwrap();
    let victim = build_classifier::<f32>(&spec, 8);
    let template = build_classifier::<f32>(&spec, 9).into_encoder();
    let initial = template.checksum();
    let cfg = BiGanConfig {
        mode: GanMode::BlackBox,
        max_epochs: 2,
        batch_size: 16,
        probe_size: 16,
        pretrain_epochs: 1,
        seed: 2,
        ..BiGanConfig::default()
    };
    let g = train_bigan::<f32>(&b, &spec, EncoderSource::Trainable(template.clone()), &cfg).unwrap();
    assert_eq!(g.mode, GanMode::BlackBox);
    assert!(g.pretrained);
    let enc = g.encoder.as_ref().unwrap();
    assert_eq!(g.encoder_checksum, enc.checksum());
    assert_ne!(enc.checksum(), initial);
    assert_ne!(enc.checksum(), victim.body().checksum());

    let cold = BiGanConfig { black_box_pretrain: false, ..cfg.clone() };
    assert!(!train_bigan::<f32>(&b, &spec, EncoderSource::Trainable(template), &cold).unwrap().pretrained);
    let white = BiGanConfig { mode: GanMode::WhiteBox, ..cfg };
    let encoder = victim.body().clone();
    assert!(!train_bigan::<f32>(&b, &spec, EncoderSource::Frozen(&encoder), &white).unwrap().pretrained);
}
