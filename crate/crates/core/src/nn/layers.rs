use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{Mode, Module, Shape3};
use crate::scalar::Scalar;

/// He-uniform weights, `U(±√(6/fan_in))`, and zero biases.
pub(crate) fn fan_in_init<F: Scalar, R: Rng + ?Sized>(weight: &mut [F], bias: &mut [F], fan_in: usize, rng: &mut R) {
    uniform_fill(weight, (6.0 / fan_in as f64).sqrt(), rng);
    bias.iter_mut().for_each(|b| *b = F::zero());
}

fn uniform_fill<F: Scalar, R: Rng + ?Sized>(data: &mut [F], bound: f64, rng: &mut R) {
    for v in data {
        *v = F::of(rng.random_range(-bound..bound));
    }
}

/// Fully connected layer, `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Dense<F: Scalar> {
    pub(crate) weight: Array2<F>,
    pub(crate) bias: Array1<F>,
    grad_w: Array2<F>,
    grad_b: Array1<F>,
    input: Option<Array2<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
            grad_w: Array2::zeros((inputs, outputs)),
            grad_b: Array1::zeros(outputs),
            input: None,
        }
    }

    pub fn weight(&self) -> &Array2<F> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<F> {
        &self.bias
    }

    pub(crate) fn apply(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }
}

impl<F: Scalar> Module<F> for Dense<F> {
    fn in_shape(&self) -> Shape3 {
        Shape3::flat(self.weight.nrows())
    }

    fn out_shape(&self) -> Shape3 {
        Shape3::flat(self.weight.ncols())
    }

    fn forward(&mut self, x: &Array2<F>, _mode: Mode) -> Array2<F> {
        let y = self.apply(x);
        self.input = Some(x.clone());
        y
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        self.apply(x)
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let x = self.input.take().expect("Dense::backward without forward");
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), grad, F::one(), &mut self.grad_w);
        self.grad_b += &grad.sum_axis(Axis(0));
        grad.dot(&self.weight.t())
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.weight.nrows();
        fan_in_init(self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap(), fan_in, rng);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        f(self.weight.as_slice_mut().unwrap(), self.grad_w.as_slice_mut().unwrap());
        f(self.bias.as_slice_mut().unwrap(), self.grad_b.as_slice_mut().unwrap());
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[F])) {
        f(self.weight.as_slice().unwrap());
        f(self.bias.as_slice().unwrap());
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        f(self.weight.as_slice_mut().unwrap());
        f(self.bias.as_slice_mut().unwrap());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

/// Element-wise nonlinearity; shape preserving.
#[derive(Debug, Clone)]
pub struct Activation<F: Scalar> {
    kind: ActivationKind,
    shape: Shape3,
    // pre-activation for ReLU variants, output for sigmoid/tanh
    cache: Option<Array2<F>>,
}

impl<F: Scalar> Activation<F> {
    pub fn new(kind: ActivationKind, shape: Shape3) -> Self {
        Self { kind, shape, cache: None }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    fn apply(&self, x: &Array2<F>) -> Array2<F> {
        match self.kind {
            ActivationKind::Relu => x.mapv(|v| v.max(F::zero())),
            ActivationKind::LeakyRelu(a) => {
                let a = F::of(a);
                x.mapv(|v| if v > F::zero() { v } else { v * a })
            }
            ActivationKind::Sigmoid => x.mapv(|v| F::one() / (F::one() + (-v).exp())),
            ActivationKind::Tanh => x.mapv(|v| v.tanh()),
        }
    }
}

impl<F: Scalar> Module<F> for Activation<F> {
    fn in_shape(&self) -> Shape3 {
        self.shape
    }

    fn out_shape(&self) -> Shape3 {
        self.shape
    }

    fn forward(&mut self, x: &Array2<F>, _mode: Mode) -> Array2<F> {
        let y = self.apply(x);
        self.cache = Some(match self.kind {
            ActivationKind::Relu | ActivationKind::LeakyRelu(_) => x.clone(),
            ActivationKind::Sigmoid | ActivationKind::Tanh => y.clone(),
        });
        y
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        self.apply(x)
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let c = self.cache.take().expect("Activation::backward without forward");
        let mut g = grad.clone();
        match self.kind {
            ActivationKind::Relu => g.zip_mut_with(&c, |g, &x| {
                if x <= F::zero() {
                    *g = F::zero()
                }
            }),
            ActivationKind::LeakyRelu(a) => {
                let a = F::of(a);
                g.zip_mut_with(&c, |g, &x| {
                    if x <= F::zero() {
                        *g *= a
                    }
                })
            }
            ActivationKind::Sigmoid => g.zip_mut_with(&c, |g, &y| *g *= y * (F::one() - y)),
            ActivationKind::Tanh => g.zip_mut_with(&c, |g, &y| *g *= F::one() - y * y),
        }
        g
    }
}

/// Fixed per-channel affine map `y = x·scale[c] + shift[c]`.
///
/// Used to carry dataset standardization inside generator outputs; holds no
/// trainable state.
#[derive(Debug, Clone)]
pub struct ChannelAffine<F: Scalar> {
    shape: Shape3,
    scale: Vec<F>,
    shift: Vec<F>,
}

impl<F: Scalar> ChannelAffine<F> {
    pub fn new(shape: Shape3, scale: Vec<F>, shift: Vec<F>) -> Self {
        assert_eq!(scale.len(), shape.c);
        assert_eq!(shift.len(), shape.c);
        Self { shape, scale, shift }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.iter().all(|&s| s == F::one()) && self.shift.iter().all(|&s| s == F::zero())
    }
}

impl<F: Scalar> Module<F> for ChannelAffine<F> {
    fn in_shape(&self) -> Shape3 {
        self.shape
    }

    fn out_shape(&self) -> Shape3 {
        self.shape
    }

    fn forward(&mut self, x: &Array2<F>, _mode: Mode) -> Array2<F> {
        self.infer(x)
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        let plane = self.shape.plane();
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let row = row.as_slice_mut().unwrap();
            for (c, chunk) in row.chunks_mut(plane).enumerate() {
                let (s, t) = (self.scale[c], self.shift[c]);
                chunk.iter_mut().for_each(|v| *v = *v * s + t);
            }
        }
        y
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let plane = self.shape.plane();
        let mut g = grad.clone();
        for mut row in g.rows_mut() {
            let row = row.as_slice_mut().unwrap();
            for (c, chunk) in row.chunks_mut(plane).enumerate() {
                let s = self.scale[c];
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        g
    }
}
