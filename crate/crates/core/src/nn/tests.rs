//! Finite-difference checks of every layer's backward pass (f64).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{bce_with_logits, cosine_distance, softmax_cross_entropy};
use super::*;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Loss `sum(out ⊙ probe)` so the upstream gradient is just `probe`.
fn probe_loss(net: &mut Sequential<f64>, x: &Array2<f64>, probe: &Array2<f64>, mode: Mode) -> f64 {
    (net.forward(x, mode) * probe).sum()
}

fn check(mut net: Sequential<f64>, batch: usize, mode: Mode) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    net.init(&mut rng);
    let x = random(batch, net.in_shape().len(), &mut rng);
    let probe = random(batch, net.out_shape().len(), &mut rng);

    net.zero_grad();
    net.forward(&x, mode);
    let dx = net.backward(&probe);
    let mut grads = Vec::new();
    net.visit_params(&mut |_, g| grads.extend_from_slice(g));

    let h = 1e-6;
    let tol = |a: f64, b: f64| (a - b).abs() <= 1e-5 * (1.0 + a.abs().max(b.abs()));
    for i in (0..x.len()).step_by((x.len() / 40).max(1)) {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[i] += h;
        xm.as_slice_mut().unwrap()[i] -= h;
        let mut a = net.clone();
        let mut b = net.clone();
        let num = (probe_loss(&mut a, &xp, &probe, mode) - probe_loss(&mut b, &xm, &probe, mode)) / (2.0 * h);
        let ana = dx.as_slice().unwrap()[i];
        assert!(tol(num, ana), "input grad {i}: numeric {num} vs analytic {ana}");
    }

    let total = grads.len();
    for k in (0..total).step_by((total / 40).max(1)) {
        let bump = |net: &mut Sequential<f64>, d: f64| {
            let mut at = 0;
            net.visit_params(&mut |p, _| {
                if k >= at && k < at + p.len() {
                    p[k - at] += d;
                }
                at += p.len();
            });
        };
        let mut a = net.clone();
        bump(&mut a, h);
        let mut b = net.clone();
        bump(&mut b, -h);
        let num = (probe_loss(&mut a, &x, &probe, mode) - probe_loss(&mut b, &x, &probe, mode)) / (2.0 * h);
        assert!(tol(num, grads[k]), "param grad {k}: numeric {num} vs analytic {}", grads[k]);
    }
}

#[test]
fn dense_and_activations() {
    let s = Shape3::flat(5);
    let net = Sequential::new(Shape3::flat(7))
        .with(Layer::Dense(Dense::new(7, 5)))
        .with(Layer::Activation(Activation::new(ActivationKind::LeakyRelu(0.2), s)))
        .with(Layer::Dense(Dense::new(5, 5)))
        .with(Layer::Activation(Activation::new(ActivationKind::Tanh, s)))
        .with(Layer::Dense(Dense::new(5, 5)))
        .with(Layer::Activation(Activation::new(ActivationKind::Sigmoid, s)));
    check(net, 4, Mode::Train);
}

#[test]
fn conv_pool_stack() {
    let input = Shape3::new(2, 6, 6);
    let conv = Conv2d::new(input, 3, 3, 1, 1);
    let pool = MaxPool2d::new(Module::<f64>::out_shape(&conv), 2);
    let conv2 = Conv2d::new(Module::<f64>::out_shape(&pool), 4, 3, 2, 1);
    let net = Sequential::new(input)
        .with(Layer::Conv2d(conv))
        .with(Layer::MaxPool2d(pool))
        .with(Layer::Conv2d(conv2));
    check(net, 3, Mode::Train);
}

#[test]
fn transposed_conv_and_affine() {
    let input = Shape3::new(3, 2, 2);
    let up = ConvTranspose2d::new(input, 2, 2);
    let out = Module::<f64>::out_shape(&up);
    let net = Sequential::new(input)
        .with(Layer::ConvTranspose2d(up))
        .with(Layer::ChannelAffine(ChannelAffine::new(out, vec![2.0, -0.5], vec![0.1, 0.3])));
    check(net, 2, Mode::Train);
}

#[test]
fn batchnorm_train_and_eval() {
    let s = Shape3::new(3, 2, 2);
    let net = Sequential::new(s)
        .with(Layer::BatchNorm2d(BatchNorm2d::new(s)))
        .with(Layer::Activation(Activation::new(ActivationKind::Tanh, s)));
    check(net.clone(), 4, Mode::Train);
    check(net, 4, Mode::Eval);
}

#[test]
fn residual_blocks() {
    let input = Shape3::new(2, 4, 4);
    let same = ResidualBlock::new(input, 2, 1);
    let down = ResidualBlock::new(input, 4, 2);
    let pool_in = Module::<f64>::out_shape(&down);
    let net = Sequential::new(input)
        .with(Layer::Residual(same))
        .with(Layer::Residual(down))
        .with(Layer::GlobalAvgPool(GlobalAvgPool::new(pool_in)));
    check(net, 3, Mode::Eval);
}

#[test]
fn infer_matches_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = Shape3::new(1, 8, 8);
    let conv = Conv2d::new(input, 4, 3, 1, 0);
    let mid = Module::<f64>::out_shape(&conv);
    let mut net = Sequential::new(input)
        .with(Layer::Conv2d(conv))
        .with(Layer::BatchNorm2d(BatchNorm2d::new(mid)))
        .with(Layer::Activation(Activation::new(ActivationKind::Relu, mid)));
    net.init(&mut rng);
    let x = random(5, 64, &mut rng);
    let a = net.infer(&x);
    let b = net.forward(&x, Mode::Eval);
    assert_eq!(a, b);
}

fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
    let h = 1e-6;
    let mut g = x.clone();
    for i in 0..x.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p.as_slice_mut().unwrap()[i] += h;
        m.as_slice_mut().unwrap()[i] -= h;
        g.as_slice_mut().unwrap()[i] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

#[test]
fn loss_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(4, 3, &mut rng);
    let labels = [0, 2, 1, 2];
    let (_, g) = softmax_cross_entropy(&logits, &labels);
    let n = numeric_grad(|z| softmax_cross_entropy(z, &labels).0, &logits);
    assert!((&g - &n).iter().all(|d| d.abs() < 1e-6));

    let z = random(5, 1, &mut rng);
    for t in [0.0, 1.0] {
        let (_, g) = bce_with_logits(&z, t);
        let n = numeric_grad(|z| bce_with_logits(z, t).0, &z);
        assert!((&g - &n).iter().all(|d| d.abs() < 1e-6));
    }

    let a = random(3, 4, &mut rng);
    let b = random(3, 4, &mut rng);
    let (_, g) = cosine_distance(&a, &b);
    let n = numeric_grad(|a| cosine_distance(a, &b).0, &a);
    assert!((&g - &n).iter().all(|d| d.abs() < 1e-6));
}

#[test]
fn checksum_tracks_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net: Sequential<f32> = Sequential::new(Shape3::flat(3)).with(Layer::Dense(Dense::new(3, 2)));
    net.init(&mut rng);
    let before = net.checksum();
    assert_eq!(before, net.clone().checksum());
    let state = net.export_state();
    let mut other: Sequential<f32> = Sequential::new(Shape3::flat(3)).with(Layer::Dense(Dense::new(3, 2)));
    other.import_state(&state).unwrap();
    assert_eq!(other.checksum(), before);
    net.visit_params(&mut |p, _| p[0] += 1.0);
    assert_ne!(net.checksum(), before);
    assert_eq!(other.import_state(&[0.0]), Err(8));
}
