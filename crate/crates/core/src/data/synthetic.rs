//! Seeded toy benchmarks for smoke tests and examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetName, Origin, RawDataset, RawSplit};

/// Class-prototype images: every class owns a random template and samples
/// are that template plus Gaussian pixel noise with std `noise` (in 0..255
/// units). Shape and class count follow `name`.
pub fn prototypes(name: DatasetName, n_train: usize, n_test: usize, noise: f64, seed: u64) -> RawDataset {
    let shape = name.image_shape();
    let classes = name.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..shape.len()).map(|_| rng.random_range(0.0..255.0)).collect()).collect();
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut split = |n: usize, origin: Origin| {
        let mut pixels = Vec::with_capacity(n * shape.len());
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        for &y in &labels {
            pixels.extend(templates[y].iter().map(|&t| (t + jitter.sample(&mut rng)).clamp(0.0, 255.0) as u8));
        }
        RawSplit { origin, shape, pixels, labels }
    };
    let train = split(n_train, Origin::Train);
    let test = split(n_test, Origin::Test);
    RawDataset { name, train, test }
}
