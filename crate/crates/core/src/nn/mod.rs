//! Minimal feed-forward network engine with hand-written backpropagation.
//!
//! Activations travel as `(batch, features)` matrices. Convolutional layers
//! interpret the feature axis as a flattened `C×H×W` volume described by
//! [`Shape3`]. Every layer caches what its backward pass needs during
//! [`Sequential::forward`]; [`Sequential::infer`] is the cache-free,
//! shared-reference path used for inference.

mod conv;
mod layers;
pub mod loss;
pub mod optim;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub use conv::{BatchNorm2d, Conv2d, ConvTranspose2d, GlobalAvgPool, MaxPool2d, ResidualBlock};
pub use layers::{Activation, ActivationKind, ChannelAffine, Dense};

/// Channel-major image volume carried along the feature axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Batch-norm behaviour switch. Everything else ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything holding trainable parameters.
pub trait Parameterized<F: Scalar> {
    /// Visits `(value, grad)` pairs in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F]));

    /// Visits the full persistent state (parameters followed by buffers such
    /// as running statistics) in a fixed order.
    fn visit_state(&self, f: &mut dyn FnMut(&[F]));

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [F]));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.iter_mut().for_each(|v| *v = F::zero()));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }

    fn state_len(&self) -> usize {
        let mut n = 0;
        self.visit_state(&mut |s| n += s.len());
        n
    }

    /// Flattened persistent state widened to f64.
    fn export_state(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.state_len());
        self.visit_state(&mut |s| out.extend(s.iter().map(|v| v.f64())));
        out
    }

    fn import_state(&mut self, values: &[f64]) -> Result<(), usize> {
        let expected = self.state_len();
        if values.len() != expected {
            return Err(expected);
        }
        let mut at = 0;
        self.visit_state_mut(&mut |s| {
            for v in s.iter_mut() {
                *v = F::of(values[at]);
                at += 1;
            }
        });
        Ok(())
    }

    /// SHA-256 over the little-endian f64 encoding of the persistent state.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_state(&mut |s| {
            for v in s {
                hasher.update(v.f64().to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Layer<F: Scalar> {
    Dense(Dense<F>),
    Conv2d(Conv2d<F>),
    ConvTranspose2d(ConvTranspose2d<F>),
    BatchNorm2d(BatchNorm2d<F>),
    MaxPool2d(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Activation(Activation<F>),
    ChannelAffine(ChannelAffine<F>),
    Residual(ResidualBlock<F>),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::Dense($l) => $body,
            Layer::Conv2d($l) => $body,
            Layer::ConvTranspose2d($l) => $body,
            Layer::BatchNorm2d($l) => $body,
            Layer::MaxPool2d($l) => $body,
            Layer::GlobalAvgPool($l) => $body,
            Layer::Activation($l) => $body,
            Layer::ChannelAffine($l) => $body,
            Layer::Residual($l) => $body,
        }
    };
}

/// Per-layer contract used by [`Sequential`].
pub(crate) trait Module<F: Scalar> {
    fn in_shape(&self) -> Shape3;
    fn out_shape(&self) -> Shape3;
    fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F>;
    fn infer(&self, x: &Array2<F>) -> Array2<F>;
    fn backward(&mut self, grad: &Array2<F>) -> Array2<F>;
    fn init<R: Rng + ?Sized>(&mut self, _rng: &mut R) {}
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut [F], &mut [F])) {}
    fn visit_state(&self, _f: &mut dyn FnMut(&[F])) {}
    fn visit_state_mut(&mut self, _f: &mut dyn FnMut(&mut [F])) {}
}

impl<F: Scalar> Layer<F> {
    pub fn in_shape(&self) -> Shape3 {
        dispatch!(self, l => Module::<F>::in_shape(l))
    }

    pub fn out_shape(&self) -> Shape3 {
        dispatch!(self, l => Module::<F>::out_shape(l))
    }

    fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        dispatch!(self, l => Module::<F>::forward(l, x, mode))
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        dispatch!(self, l => Module::<F>::infer(l, x))
    }

    fn backward(&mut self, g: &Array2<F>) -> Array2<F> {
        dispatch!(self, l => Module::<F>::backward(l, g))
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        dispatch!(self, l => Module::<F>::init(l, rng))
    }
}

/// Ordered stack of layers with matching shapes.
#[derive(Debug, Clone)]
pub struct Sequential<F: Scalar> {
    layers: Vec<Layer<F>>,
    input: Shape3,
}

impl<F: Scalar> Sequential<F> {
    pub fn new(input: Shape3) -> Self {
        Self { layers: Vec::new(), input }
    }

    /// Appends a layer. Panics when the layer's input shape does not match
    /// the current output shape; architectures are built from static
    /// descriptions so a mismatch is a programming error.
    pub fn push(&mut self, layer: Layer<F>) -> &mut Self {
        let expect = self.out_shape();
        assert_eq!(
            layer.in_shape().len(),
            expect.len(),
            "layer input {} does not match stack output {}",
            layer.in_shape(),
            expect
        );
        self.layers.push(layer);
        self
    }

    pub fn with(mut self, layer: Layer<F>) -> Self {
        self.push(layer);
        self
    }

    pub fn in_shape(&self) -> Shape3 {
        self.input
    }

    pub fn out_shape(&self) -> Shape3 {
        self.layers.last().map_or(self.input, |l| l.out_shape())
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for l in &mut self.layers {
            l.init(rng);
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        debug_assert_eq!(x.ncols(), self.input.len());
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode);
        }
        h
    }

    pub fn infer(&self, x: &Array2<F>) -> Array2<F> {
        debug_assert_eq!(x.ncols(), self.input.len());
        let mut iter = self.layers.iter();
        let Some(first) = iter.next() else {
            return x.clone();
        };
        let mut h = first.infer(x);
        for l in iter {
            h = l.infer(&h);
        }
        h
    }

    /// Backpropagates through the cached forward pass, accumulating parameter
    /// gradients, and returns the gradient with respect to the input.
    pub fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }
}

impl<F: Scalar> Parameterized<F> for Sequential<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        for l in &mut self.layers {
            dispatch!(l, m => Module::<F>::visit_params(m, f));
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[F])) {
        for l in &self.layers {
            dispatch!(l, m => Module::<F>::visit_state(m, f));
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        for l in &mut self.layers {
            dispatch!(l, m => Module::<F>::visit_state_mut(m, f));
        }
    }
}

/// Concatenates two row-aligned matrices along the feature axis.
pub fn hconcat<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    assert_eq!(a.nrows(), b.nrows());
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).expect("row counts match")
}

/// Row-wise softmax, numerically stabilized by the row max.
pub fn softmax_rows<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests;
