use ndarray::{Array1, Array2};
use rand::Rng;

use super::layers::fan_in_init;
use super::{Activation, Mode, Module, Shape3};
use crate::nn::layers::ActivationKind;
use crate::scalar::Scalar;

/// 2-D convolution over channel-major volumes, lowered to one GEMM per batch
/// through an im2col buffer.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    input: Shape3,
    output: Shape3,
    kernel: usize,
    stride: usize,
    pad: usize,
    // out_c × (in_c·k·k)
    weight: Array2<F>,
    bias: Array1<F>,
    grad_w: Array2<F>,
    grad_b: Array1<F>,
    cols: Option<(usize, Array2<F>)>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(input: Shape3, filters: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(input.h + 2 * pad >= kernel && input.w + 2 * pad >= kernel);
        let oh = (input.h + 2 * pad - kernel) / stride + 1;
        let ow = (input.w + 2 * pad - kernel) / stride + 1;
        let fan = input.c * kernel * kernel;
        Self {
            input,
            output: Shape3::new(filters, oh, ow),
            kernel,
            stride,
            pad,
            weight: Array2::zeros((filters, fan)),
            bias: Array1::zeros(filters),
            grad_w: Array2::zeros((filters, fan)),
            grad_b: Array1::zeros(filters),
            cols: None,
        }
    }

    fn im2col(&self, x: &Array2<F>) -> Array2<F> {
        let (b, k, s, p) = (x.nrows(), self.kernel, self.stride, self.pad as isize);
        let (ih, iw) = (self.input.h as isize, self.input.w as isize);
        let (oh, ow) = (self.output.h, self.output.w);
        let plane = oh * ow;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let in_len = self.input.len();
        let mut cols = Array2::<F>::zeros((self.input.c * k * k, b * plane));
        let cs = cols.as_slice_mut().unwrap();
        let width = b * plane;
        for c in 0..self.input.c {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &mut cs[r * width..(r + 1) * width];
                    for n in 0..b {
                        let img = &xs[n * in_len + c * self.input.plane()..];
                        for oy in 0..oh {
                            let iy = (oy * s + ki) as isize - p;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let dst = n * plane + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kj) as isize - p;
                                if ix >= 0 && ix < iw {
                                    row[dst + ox] = img[(iy * iw + ix) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, batch: usize) -> Array2<F> {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (ih, iw) = (self.input.h as isize, self.input.w as isize);
        let (oh, ow) = (self.output.h, self.output.w);
        let plane = oh * ow;
        let width = batch * plane;
        let ds = dcols.as_slice().unwrap();
        let in_len = self.input.len();
        let mut dx = Array2::<F>::zeros((batch, in_len));
        let dxs = dx.as_slice_mut().unwrap();
        for c in 0..self.input.c {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &ds[r * width..(r + 1) * width];
                    for n in 0..batch {
                        let base = n * in_len + c * self.input.plane();
                        for oy in 0..oh {
                            let iy = (oy * s + ki) as isize - p;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let src = n * plane + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kj) as isize - p;
                                if ix >= 0 && ix < iw {
                                    dxs[base + (iy * iw + ix) as usize] += row[src + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn apply(&self, cols: &Array2<F>, batch: usize) -> Array2<F> {
        let prod = self.weight.dot(cols);
        let plane = self.output.plane();
        let ps = prod.as_slice().unwrap();
        let mut out = Array2::<F>::zeros((batch, self.output.len()));
        let os = out.as_slice_mut().unwrap();
        let width = batch * plane;
        for o in 0..self.output.c {
            let bias = self.bias[o];
            for n in 0..batch {
                let src = &ps[o * width + n * plane..o * width + (n + 1) * plane];
                let dst = &mut os[n * self.output.len() + o * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        out
    }
}

/// Rearranges `(batch, C·plane)` into `(C, batch·plane)`.
fn to_channel_major<F: Scalar>(g: &Array2<F>, channels: usize, plane: usize) -> Array2<F> {
    let batch = g.nrows();
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut out = Array2::<F>::zeros((channels, batch * plane));
    let os = out.as_slice_mut().unwrap();
    for n in 0..batch {
        for c in 0..channels {
            let src = &gs[n * channels * plane + c * plane..][..plane];
            os[c * batch * plane + n * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn in_shape(&self) -> Shape3 {
        self.input
    }

    fn out_shape(&self) -> Shape3 {
        self.output
    }

    fn forward(&mut self, x: &Array2<F>, _mode: Mode) -> Array2<F> {
        let cols = self.im2col(x);
        let y = self.apply(&cols, x.nrows());
        self.cols = Some((x.nrows(), cols));
        y
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        let cols = self.im2col(x);
        self.apply(&cols, x.nrows())
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let (batch, cols) = self.cols.take().expect("Conv2d::backward without forward");
        let g = to_channel_major(grad, self.output.c, self.output.plane());
        ndarray::linalg::general_mat_mul(F::one(), &g, &cols.t(), F::one(), &mut self.grad_w);
        for (o, row) in g.rows().into_iter().enumerate() {
            self.grad_b[o] += row.sum();
        }
        let dcols = self.weight.t().dot(&g);
        self.col2im(&dcols.as_standard_layout().to_owned(), batch)
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.weight.ncols();
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

/// Transposed convolution with `kernel == stride` and no padding: every input
/// pixel expands into its own non-overlapping `k×k` output block.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Scalar> {
    input: Shape3,
    output: Shape3,
    kernel: usize,
    // in_c × (out_c·k·k)
    weight: Array2<F>,
    bias: Array1<F>,
    grad_w: Array2<F>,
    grad_b: Array1<F>,
    pixels: Option<Array2<F>>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new(input: Shape3, filters: usize, kernel: usize) -> Self {
        let fan = filters * kernel * kernel;
        Self {
            input,
            output: Shape3::new(filters, input.h * kernel, input.w * kernel),
            kernel,
            weight: Array2::zeros((input.c, fan)),
            bias: Array1::zeros(filters),
            grad_w: Array2::zeros((input.c, fan)),
            grad_b: Array1::zeros(filters),
            pixels: None,
        }
    }

    /// `(batch, C·H·W)` → `(batch·H·W, C)`
    fn pixel_rows(&self, x: &Array2<F>) -> Array2<F> {
        let (b, c, plane) = (x.nrows(), self.input.c, self.input.plane());
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Array2::<F>::zeros((b * plane, c));
        let os = out.as_slice_mut().unwrap();
        for n in 0..b {
            for ch in 0..c {
                for p in 0..plane {
                    os[(n * plane + p) * c + ch] = xs[n * c * plane + ch * plane + p];
                }
            }
        }
        out
    }

    fn scatter(&self, blocks: &Array2<F>, batch: usize) -> Array2<F> {
        let k = self.kernel;
        let (ih, iw) = (self.input.h, self.input.w);
        let (oc, ow) = (self.output.c, self.output.w);
        let bs = blocks.as_slice().unwrap();
        let mut out = Array2::<F>::zeros((batch, self.output.len()));
        let os = out.as_slice_mut().unwrap();
        let block = oc * k * k;
        for n in 0..batch {
            for iy in 0..ih {
                for ix in 0..iw {
                    let src = &bs[(n * ih * iw + iy * iw + ix) * block..][..block];
                    for o in 0..oc {
                        let bias = self.bias[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = iy * k + ky;
                                let ox = ix * k + kx;
                                os[n * self.output.len() + o * self.output.plane() + oy * ow + ox] =
                                    src[(o * k + ky) * k + kx] + bias;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn gather(&self, grad: &Array2<F>) -> Array2<F> {
        let batch = grad.nrows();
        let k = self.kernel;
        let (ih, iw) = (self.input.h, self.input.w);
        let (oc, ow) = (self.output.c, self.output.w);
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let block = oc * k * k;
        let mut out = Array2::<F>::zeros((batch * ih * iw, block));
        let os = out.as_slice_mut().unwrap();
        for n in 0..batch {
            for iy in 0..ih {
                for ix in 0..iw {
                    let dst = &mut os[(n * ih * iw + iy * iw + ix) * block..][..block];
                    for o in 0..oc {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = iy * k + ky;
                                let ox = ix * k + kx;
                                dst[(o * k + ky) * k + kx] = gs
                                    [n * self.output.len() + o * self.output.plane() + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply(&self, pixels: &Array2<F>, batch: usize) -> Array2<F> {
        let blocks = pixels.dot(&self.weight);
        self.scatter(&blocks, batch)
    }
}

impl<F: Scalar> Module<F> for ConvTranspose2d<F> {
    fn in_shape(&self) -> Shape3 {
        self.input
    }

    fn out_shape(&self) -> Shape3 {
        self.output
    }

    fn forward(&mut self, x: &Array2<F>, _mode: Mode) -> Array2<F> {
        let pixels = self.pixel_rows(x);
        let y = self.apply(&pixels, x.nrows());
        self.pixels = Some(pixels);
        y
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        self.apply(&self.pixel_rows(x), x.nrows())
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let pixels = self.pixels.take().expect("ConvTranspose2d::backward without forward");
        let batch = grad.nrows();
        let gb = self.gather(grad);
        ndarray::linalg::general_mat_mul(F::one(), &pixels.t(), &gb, F::one(), &mut self.grad_w);
        let kk = self.kernel * self.kernel;
        let gbs = gb.as_slice().unwrap();
        for row in gbs.chunks(self.output.c * kk) {
            for (o, chunk) in row.chunks(kk).enumerate() {
                self.grad_b[o] += chunk.iter().copied().sum::<F>();
            }
        }
        let dpix = gb.dot(&self.weight.t());
        // (batch·H·W, C) → (batch, C·H·W)
        let (c, plane) = (self.input.c, self.input.plane());
        let ds = dpix.as_slice().unwrap();
        let mut dx = Array2::<F>::zeros((batch, self.input.len()));
        let dxs = dx.as_slice_mut().unwrap();
        for n in 0..batch {
            for ch in 0..c {
                for p in 0..plane {
                    dxs[n * c * plane + ch * plane + p] = ds[(n * plane + p) * c + ch];
                }
            }
        }
        dx
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        // each output pixel sums exactly `in_c` terms since kernel == stride
        let fan_in = self.input.c;
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

/// Non-overlapping max pooling with a square window.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    input: Shape3,
    output: Shape3,
    size: usize,
    argmax: Option<Vec<usize>>,
}

impl MaxPool2d {
    pub fn new(input: Shape3, size: usize) -> Self {
        Self {
            input,
            output: Shape3::new(input.c, input.h / size, input.w / size),
            size,
            argmax: None,
        }
    }

    fn pool<F: Scalar>(&self, x: &Array2<F>) -> (Array2<F>, Vec<usize>) {
        let b = x.nrows();
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let (s, iw) = (self.size, self.input.w);
        let mut out = Array2::<F>::zeros((b, self.output.len()));
        let mut arg = vec![0usize; b * self.output.len()];
        let os = out.as_slice_mut().unwrap();
        for n in 0..b {
            for c in 0..self.input.c {
                let base = n * self.input.len() + c * self.input.plane();
                for oy in 0..self.output.h {
                    for ox in 0..self.output.w {
                        let mut best = base + oy * s * iw + ox * s;
                        for dy in 0..s {
                            for dx in 0..s {
                                let i = base + (oy * s + dy) * iw + ox * s + dx;
                                if xs[i] > xs[best] {
                                    best = i;
                                }
                            }
                        }
                        let o = n * self.output.len() + c * self.output.plane() + oy * self.output.w + ox;
                        os[o] = xs[best];
                        arg[o] = best;
                    }
                }
            }
        }
        (out, arg)
    }
}

impl<F: Scalar> Module<F> for MaxPool2d {
    fn in_shape(&self) -> Shape3 {
        self.input
    }

    fn out_shape(&self) -> Shape3 {
        self.output
    }

    fn forward(&mut self, x: &Array2<F>, _mode: Mode) -> Array2<F> {
        let (y, arg) = self.pool(x);
        self.argmax = Some(arg);
        y
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        self.pool(x).0
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let arg = self.argmax.take().expect("MaxPool2d::backward without forward");
        let mut dx = Array2::<F>::zeros((grad.nrows(), self.input.len()));
        let dxs = dx.as_slice_mut().unwrap();
        let grad = grad.as_standard_layout();
        for (g, &i) in grad.as_slice().unwrap().iter().zip(&arg) {
            dxs[i] += *g;
        }
        dx
    }
}

/// Averages each channel plane down to one value.
#[derive(Debug, Clone)]
pub struct GlobalAvgPool {
    input: Shape3,
}

impl GlobalAvgPool {
    pub fn new(input: Shape3) -> Self {
        Self { input }
    }
}

impl<F: Scalar> Module<F> for GlobalAvgPool {
    fn in_shape(&self) -> Shape3 {
        self.input
    }

    fn out_shape(&self) -> Shape3 {
        Shape3::flat(self.input.c)
    }

    fn forward(&mut self, x: &Array2<F>, _mode: Mode) -> Array2<F> {
        Module::<F>::infer(self, x)
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        let plane = self.input.plane();
        let inv = F::one() / F::of(plane as f64);
        let x = x.as_standard_layout();
        let mut out = Array2::<F>::zeros((x.nrows(), self.input.c));
        for (mut o, row) in out.rows_mut().into_iter().zip(x.rows()) {
            let row = row.to_slice().unwrap();
            for (c, chunk) in row.chunks(plane).enumerate() {
                o[c] = chunk.iter().copied().sum::<F>() * inv;
            }
        }
        out
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let plane = self.input.plane();
        let inv = F::one() / F::of(plane as f64);
        let mut dx = Array2::<F>::zeros((grad.nrows(), self.input.len()));
        for (mut d, g) in dx.rows_mut().into_iter().zip(grad.rows()) {
            let d = d.as_slice_mut().unwrap();
            for (c, chunk) in d.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = g[c] * inv);
            }
        }
        dx
    }
}

/// Per-channel batch normalization with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Scalar> {
    shape: Shape3,
    gamma: Array1<F>,
    beta: Array1<F>,
    grad_gamma: Array1<F>,
    grad_beta: Array1<F>,
    running_mean: Array1<F>,
    running_var: Array1<F>,
    momentum: f64,
    eps: f64,
    // normalized activations and per-channel inverse std from the last train pass
    cache: Option<(Array2<F>, Vec<F>, Mode)>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(shape: Shape3) -> Self {
        let c = shape.c;
        Self {
            shape,
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            grad_gamma: Array1::zeros(c),
            grad_beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize_with(&self, x: &Array2<F>, mean: &[F], inv_std: &[F]) -> (Array2<F>, Array2<F>) {
        let plane = self.shape.plane();
        let mut xhat = x.as_standard_layout().to_owned();
        for mut row in xhat.rows_mut() {
            let row = row.as_slice_mut().unwrap();
            for (c, chunk) in row.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
            }
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            let row = row.as_slice_mut().unwrap();
            for (c, chunk) in row.chunks_mut(plane).enumerate() {
                let (g, b) = (self.gamma[c], self.beta[c]);
                chunk.iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
        (xhat, y)
    }

    fn batch_stats(&self, x: &Array2<F>) -> (Vec<F>, Vec<F>) {
        let plane = self.shape.plane();
        let count = F::of((x.nrows() * plane) as f64);
        let mut mean = vec![F::zero(); self.shape.c];
        let mut var = vec![F::zero(); self.shape.c];
        let x = x.as_standard_layout();
        for row in x.rows() {
            for (c, chunk) in row.to_slice().unwrap().chunks(plane).enumerate() {
                mean[c] += chunk.iter().copied().sum::<F>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for row in x.rows() {
            for (c, chunk) in row.to_slice().unwrap().chunks(plane).enumerate() {
                var[c] += chunk.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<F>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        (mean, var)
    }

    fn eval_params(&self) -> (Vec<F>, Vec<F>) {
        let eps = F::of(self.eps);
        let mean = self.running_mean.to_vec();
        let inv = self.running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        (mean, inv)
    }
}

impl<F: Scalar> Module<F> for BatchNorm2d<F> {
    fn in_shape(&self) -> Shape3 {
        self.shape
    }

    fn out_shape(&self) -> Shape3 {
        self.shape
    }

    fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let (mean, inv) = match mode {
            Mode::Train => {
                let (mean, var) = self.batch_stats(x);
                let m = F::of(self.momentum);
                let n = (x.nrows() * self.shape.plane()) as f64;
                let unbias = F::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
                for c in 0..self.shape.c {
                    self.running_mean[c] = (F::one() - m) * self.running_mean[c] + m * mean[c];
                    self.running_var[c] = (F::one() - m) * self.running_var[c] + m * var[c] * unbias;
                }
                let eps = F::of(self.eps);
                let inv = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect::<Vec<_>>();
                (mean, inv)
            }
            Mode::Eval => self.eval_params(),
        };
        let (xhat, y) = self.normalize_with(x, &mean, &inv);
        self.cache = Some((xhat, inv, mode));
        y
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        let (mean, inv) = self.eval_params();
        self.normalize_with(x, &mean, &inv).1
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let (xhat, inv, mode) = self.cache.take().expect("BatchNorm2d::backward without forward");
        let plane = self.shape.plane();
        let c_n = self.shape.c;
        let grad = grad.as_standard_layout();
        let mut sum_g = vec![F::zero(); c_n];
        let mut sum_gx = vec![F::zero(); c_n];
        for (g, xh) in grad.rows().into_iter().zip(xhat.rows()) {
            let (g, xh) = (g.to_slice().unwrap(), xh.to_slice().unwrap());
            for c in 0..c_n {
                let r = c * plane..(c + 1) * plane;
                for (a, b) in g[r.clone()].iter().zip(&xh[r]) {
                    sum_g[c] += *a;
                    sum_gx[c] += *a * *b;
                }
            }
        }
        for c in 0..c_n {
            self.grad_beta[c] += sum_g[c];
            self.grad_gamma[c] += sum_gx[c];
        }
        let count = F::of((grad.nrows() * plane) as f64);
        let mut dx = Array2::<F>::zeros(grad.raw_dim());
        for ((mut d, g), xh) in dx.rows_mut().into_iter().zip(grad.rows()).zip(xhat.rows()) {
            let (d, g, xh) = (d.as_slice_mut().unwrap(), g.to_slice().unwrap(), xh.to_slice().unwrap());
            for c in 0..c_n {
                let scale = self.gamma[c] * inv[c];
                for i in c * plane..(c + 1) * plane {
                    d[i] = match mode {
                        Mode::Train => {
                            scale * (g[i] - sum_g[c] / count - xh[i] * sum_gx[c] / count)
                        }
                        Mode::Eval => scale * g[i],
                    };
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        f(self.gamma.as_slice_mut().unwrap(), self.grad_gamma.as_slice_mut().unwrap());
        f(self.beta.as_slice_mut().unwrap(), self.grad_beta.as_slice_mut().unwrap());
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[F])) {
        f(self.gamma.as_slice().unwrap());
        f(self.beta.as_slice().unwrap());
        f(self.running_mean.as_slice().unwrap());
        f(self.running_var.as_slice().unwrap());
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        f(self.gamma.as_slice_mut().unwrap());
        f(self.beta.as_slice_mut().unwrap());
        f(self.running_mean.as_slice_mut().unwrap());
        f(self.running_var.as_slice_mut().unwrap());
    }
}

/// Basic two-convolution residual block. Down-sampling blocks use the
/// parameter-free shortcut: stride-2 subsampling plus zero-padded channels.
#[derive(Debug, Clone)]
pub struct ResidualBlock<F: Scalar> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    relu1: Activation<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    input: Shape3,
    output: Shape3,
    pre_act: Option<Array2<F>>,
}

impl<F: Scalar> ResidualBlock<F> {
    pub fn new(input: Shape3, filters: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(input, filters, 3, stride, 1);
        let mid = conv1.output;
        let conv2 = Conv2d::new(mid, filters, 3, 1, 1);
        Self {
            bn1: BatchNorm2d::new(mid),
            relu1: Activation::new(ActivationKind::Relu, mid),
            bn2: BatchNorm2d::new(mid),
            output: mid,
            conv1,
            conv2,
            input,
            pre_act: None,
        }
    }

    fn shortcut(&self, x: &Array2<F>) -> Array2<F> {
        if self.input == self.output {
            return x.clone();
        }
        let (ic, oc) = (self.input.c, self.output.c);
        let (oh, ow) = (self.output.h, self.output.w);
        let sy = self.input.h / oh;
        let sx = self.input.w / ow;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let pad = (oc - ic) / 2;
        let mut out = Array2::<F>::zeros((x.nrows(), self.output.len()));
        let os = out.as_slice_mut().unwrap();
        for n in 0..x.nrows() {
            for c in 0..ic {
                for y in 0..oh {
                    for xx in 0..ow {
                        os[n * self.output.len() + (c + pad) * oh * ow + y * ow + xx] =
                            xs[n * self.input.len() + c * self.input.plane() + y * sy * self.input.w + xx * sx];
                    }
                }
            }
        }
        out
    }

    fn shortcut_backward(&self, g: &Array2<F>) -> Array2<F> {
        if self.input == self.output {
            return g.clone();
        }
        let (ic, oc) = (self.input.c, self.output.c);
        let (oh, ow) = (self.output.h, self.output.w);
        let sy = self.input.h / oh;
        let sx = self.input.w / ow;
        let pad = (oc - ic) / 2;
        let g = g.as_standard_layout();
        let gs = g.as_slice().unwrap();
        let mut dx = Array2::<F>::zeros((g.nrows(), self.input.len()));
        let ds = dx.as_slice_mut().unwrap();
        for n in 0..g.nrows() {
            for c in 0..ic {
                for y in 0..oh {
                    for xx in 0..ow {
                        ds[n * self.input.len() + c * self.input.plane() + y * sy * self.input.w + xx * sx] =
                            gs[n * self.output.len() + (c + pad) * oh * ow + y * ow + xx];
                    }
                }
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for ResidualBlock<F> {
    fn in_shape(&self) -> Shape3 {
        self.input
    }

    fn out_shape(&self) -> Shape3 {
        self.output
    }

    fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let h = self.conv1.forward(x, mode);
        let h = self.bn1.forward(&h, mode);
        let h = self.relu1.forward(&h, mode);
        let h = self.conv2.forward(&h, mode);
        let h = self.bn2.forward(&h, mode);
        let pre = h + self.shortcut(x);
        let y = pre.mapv(|v| v.max(F::zero()));
        self.pre_act = Some(pre);
        y
    }

    fn infer(&self, x: &Array2<F>) -> Array2<F> {
        let h = self.conv1.infer(x);
        let h = self.bn1.infer(&h);
        let h = self.relu1.infer(&h);
        let h = self.conv2.infer(&h);
        let h = self.bn2.infer(&h);
        (h + self.shortcut(x)).mapv(|v| v.max(F::zero()))
    }

    fn backward(&mut self, grad: &Array2<F>) -> Array2<F> {
        let pre = self.pre_act.take().expect("ResidualBlock::backward without forward");
        let mut g = grad.clone();
        g.zip_mut_with(&pre, |g, &p| {
            if p <= F::zero() {
                *g = F::zero()
            }
        });
        let short = self.shortcut_backward(&g);
        let h = self.bn2.backward(&g);
        let h = self.conv2.backward(&h);
        let h = self.relu1.backward(&h);
        let h = self.bn1.backward(&h);
        let h = self.conv1.backward(&h);
        h + short
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.conv1.init(rng);
        self.conv2.init(rng);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[F])) {
        self.conv1.visit_state(f);
        self.bn1.visit_state(f);
        self.conv2.visit_state(f);
        self.bn2.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        self.conv1.visit_state_mut(f);
        self.bn1.visit_state_mut(f);
        self.conv2.visit_state_mut(f);
        self.bn2.visit_state_mut(f);
    }
}
