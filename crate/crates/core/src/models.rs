//! Victim, shadow and encoder classifiers.
//!
//! A [`Classifier`] is a `body` producing the latent representation followed
//! by a single dense `head` whose softmax is the model output. The latent is
//! the post-activation output of the last layer before the head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Header};
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::optim::Sgd;
use crate::nn::{
    softmax_rows, Activation, ActivationKind, BatchNorm2d, Conv2d, Dense, GlobalAvgPool, Layer, MaxPool2d, Mode,
    Parameterized, ResidualBlock, Sequential, Shape3,
};
use crate::scalar::Scalar;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rows per inference chunk; bounds peak memory of conv activations.
const INFER_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}` (expected mlp5, lenet or resnet20)")]
    UnknownArchitecture(String),
    #[error("invalid classifier spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("input has {found} features, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("{images} images but {labels} labels")]
    LengthMismatch { images: usize, labels: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    Diverged { epoch: usize, batch: usize, lr: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp5,
    Lenet,
    Resnet20,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Mlp5 => "mlp5",
            Architecture::Lenet => "lenet",
            Architecture::Resnet20 => "resnet20",
        }
    }

    pub fn latent_dim(self) -> usize {
        match self {
            Architecture::Mlp5 => 100,
            Architecture::Lenet => 84,
            Architecture::Resnet20 => 64,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mlp5" | "mlp" => Ok(Architecture::Mlp5),
            "lenet" => Ok(Architecture::Lenet),
            "resnet20" => Ok(Architecture::Resnet20),
            other => Err(ModelError::UnknownArchitecture(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub architecture: Architecture,
    pub input: Shape3,
    pub num_classes: usize,
    pub latent_dim: usize,
}

impl ClassifierSpec {
    pub fn new(architecture: Architecture, input: Shape3, num_classes: usize) -> Result<Self, ModelError> {
        if num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!("{num_classes} classes")));
        }
        if input.is_empty() {
            return Err(ModelError::InvalidSpec("empty input shape".into()));
        }
        if architecture != Architecture::Mlp5 && (input.h < 16 || input.w < 16) {
            return Err(ModelError::InvalidSpec(format!("{architecture} needs at least 16x16 images, got {input}")));
        }
        Ok(Self { architecture, input, num_classes, latent_dim: architecture.latent_dim() })
    }
}

/// Latent-producing body plus softmax head.
#[derive(Debug, Clone)]
pub struct Classifier<F: Scalar> {
    spec: ClassifierSpec,
    body: Sequential<F>,
    head: Sequential<F>,
}

fn mlp5_body<F: Scalar>(input: Shape3) -> Sequential<F> {
    let mut net = Sequential::new(input);
    let mut width = input.len();
    for h in [1024, 512, 256, 128, 100] {
        net.push(Layer::Dense(Dense::new(width, h)));
        net.push(Layer::Activation(Activation::new(ActivationKind::LeakyRelu(0.2), Shape3::flat(h))));
        width = h;
    }
    net
}

fn lenet_body<F: Scalar>(input: Shape3) -> Sequential<F> {
    let mut net = Sequential::new(input);
    let relu = |s| Layer::Activation(Activation::new(ActivationKind::Relu, s));
    for filters in [6, 16] {
        let conv = Conv2d::new(net.out_shape(), filters, 5, 1, 0);
        let s = Layer::<F>::Conv2d(conv.clone()).out_shape();
        net.push(Layer::Conv2d(conv));
        net.push(relu(s));
        let pool = MaxPool2d::new(s, 2);
        net.push(Layer::MaxPool2d(pool));
    }
    let mut width = net.out_shape().len();
    for h in [120, 84] {
        net.push(Layer::Dense(Dense::new(width, h)));
        net.push(relu(Shape3::flat(h)));
        width = h;
    }
    net
}

fn resnet20_body<F: Scalar>(input: Shape3) -> Sequential<F> {
    let mut net = Sequential::new(input);
    let stem = Conv2d::new(input, 16, 3, 1, 1);
    let s = Layer::<F>::Conv2d(stem.clone()).out_shape();
    net.push(Layer::Conv2d(stem));
    net.push(Layer::BatchNorm2d(BatchNorm2d::new(s)));
    net.push(Layer::Activation(Activation::new(ActivationKind::Relu, s)));
    for (stage, filters) in [16, 32, 64].into_iter().enumerate() {
        for block in 0..3 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            net.push(Layer::Residual(ResidualBlock::new(net.out_shape(), filters, stride)));
        }
    }
    net.push(Layer::GlobalAvgPool(GlobalAvgPool::new(net.out_shape())));
    net
}

/// Builds an untrained classifier with seeded fan-in uniform initialization.
pub fn build_classifier<F: Scalar>(spec: &ClassifierSpec, seed: u64) -> Classifier<F> {
    let body = match spec.architecture {
        Architecture::Mlp5 => mlp5_body(spec.input),
        Architecture::Lenet => lenet_body(spec.input),
        Architecture::Resnet20 => resnet20_body(spec.input),
    };
    debug_assert_eq!(body.out_shape().len(), spec.latent_dim);
    let head = Sequential::new(Shape3::flat(spec.latent_dim)).with(Layer::Dense(Dense::new(spec.latent_dim, spec.num_classes)));
    let mut model = Classifier { spec: *spec, body, head };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.body.init(&mut rng);
    model.head.init(&mut rng);
    model
}

impl<F: Scalar> Classifier<F> {
    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn body(&self) -> &Sequential<F> {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut Sequential<F> {
        &mut self.body
    }

    /// The dense layer mapping latents to logits.
    pub fn head(&self) -> &Dense<F> {
        match &self.head.layers()[0] {
            Layer::Dense(d) => d,
            _ => unreachable!("head is a single dense layer"),
        }
    }

    /// Consumes the classifier, keeping only the encoder body.
    pub fn into_encoder(self) -> Sequential<F> {
        self.body
    }

    fn check_input(&self, x: &Array2<F>) -> Result<(), ModelError> {
        let expected = self.spec.input.len();
        if x.ncols() != expected {
            return Err(ModelError::ShapeMismatch { expected, found: x.ncols() });
        }
        Ok(())
    }

    /// Latent representations, one row per sample.
    pub fn encode(&self, x: &Array2<F>) -> Result<Array2<F>, ModelError> {
        self.check_input(x)?;
        Ok(infer_chunked(&self.body, x))
    }

    /// Pre-softmax logits.
    pub fn logits(&self, x: &Array2<F>) -> Result<Array2<F>, ModelError> {
        let z = self.encode(x)?;
        Ok(self.head.infer(&z))
    }

    /// Softmax outputs; each row sums to one.
    pub fn predict(&self, x: &Array2<F>) -> Result<Array2<F>, ModelError> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Softmax of the head applied to given latents.
    pub fn predict_from_latent(&self, z: &Array2<F>) -> Array2<F> {
        softmax_rows(&self.head.infer(z))
    }

    pub fn accuracy(&self, x: &Array2<F>, y: &[usize]) -> Result<f64, ModelError> {
        let p = self.predict(x)?;
        Ok(accuracy(&p, y))
    }
}

impl<F: Scalar> Parameterized<F> for Classifier<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.body.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[F])) {
        self.body.visit_state(f);
        self.head.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        self.body.visit_state_mut(f);
        self.head.visit_state_mut(f);
    }
}

/// Runs inference in row chunks.
pub fn infer_chunked<F: Scalar>(net: &Sequential<F>, x: &Array2<F>) -> Array2<F> {
    if x.nrows() <= INFER_CHUNK {
        return net.infer(x);
    }
    let parts: Vec<Array2<F>> = x.axis_chunks_iter(Axis(0), INFER_CHUNK).map(|c| net.infer(&c.to_owned())).collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("chunks share width")
}

fn argmax<F: Scalar>(row: ndarray::ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<F: Scalar>(probs: &Array2<F>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs.rows().into_iter().zip(labels).filter(|(r, &y)| argmax(r.view()) == y).count();
    hits as f64 / labels.len() as f64
}

/// Per-sample `−ln max(p[label], 1e-12)`.
pub fn cross_entropy_loss<F: Scalar>(probs: &Array2<F>, labels: &[usize]) -> Result<Vec<f64>, ModelError> {
    if probs.nrows() != labels.len() {
        return Err(ModelError::LengthMismatch { images: probs.nrows(), labels: labels.len() });
    }
    let classes = probs.ncols();
    probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            if y >= classes {
                return Err(ModelError::LabelOutOfRange { label: y, classes });
            }
            let p = row[y].f64();
            Ok(if p.is_nan() { p } else { -p.max(PROB_FLOOR).ln() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lr_drops: vec![50, 75],
            lr_drop_factor: 0.1,
            epochs: 100,
            batch_size: 128,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {}", self.momentum));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr drops {:?} not strictly increasing", self.lr_drops));
        }
        if let Some(&last) = self.lr_drops.last() {
            if last >= self.epochs {
                return bad(format!("lr drop at epoch {last} but only {} epochs", self.epochs));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }

    /// Same schedule shape rescaled to a different epoch budget.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        let scale = |d: usize| (d * epochs).div_ceil(self.epochs.max(1));
        let mut drops: Vec<usize> = self.lr_drops.iter().map(|&d| scale(d)).filter(|&d| d > 0 && d < epochs).collect();
        drops.dedup();
        Self { epochs, lr_drops: drops, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier<F: Scalar> {
    pub model: Classifier<F>,
    pub history: Vec<EpochRecord>,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Borrowed, row-aligned images and labels.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a, F: Scalar> {
    pub x: &'a Array2<F>,
    pub y: &'a [usize],
}

impl<'a, F: Scalar> Labeled<'a, F> {
    pub fn new(x: &'a Array2<F>, y: &'a [usize]) -> Self {
        Self { x, y }
    }

    fn check(&self, classes: usize) -> Result<(), ModelError> {
        if self.x.nrows() != self.y.len() {
            return Err(ModelError::LengthMismatch { images: self.x.nrows(), labels: self.y.len() });
        }
        if let Some(&label) = self.y.iter().find(|&&l| l >= classes) {
            return Err(ModelError::LabelOutOfRange { label, classes });
        }
        Ok(())
    }
}

/// Minibatch SGD with a step learning-rate schedule. Evaluates `monitor`
/// after every epoch when given.
pub fn train_classifier<F: Scalar>(
    mut model: Classifier<F>,
    train: Labeled<'_, F>,
    config: &TrainConfig,
    monitor: Option<Labeled<'_, F>>,
) -> Result<TrainedClassifier<F>, ModelError> {
    config.validate()?;
    let classes = model.spec.num_classes;
    train.check(classes)?;
    model.check_input(train.x)?;
    if let Some(m) = &monitor {
        m.check(classes)?;
        model.check_input(m.x)?;
    }
    if train.y.is_empty() {
        return Err(ModelError::EmptySplit);
    }

    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..train.y.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        opt.lr = lr;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let xb = train.x.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            let z = model.body.forward(&xb, Mode::Train);
            let logits = model.head.forward(&z, Mode::Train);
            let (loss, grad) = softmax_cross_entropy(&logits, &yb);
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, batch: b, lr });
            }
            loss_sum += loss * idx.len() as f64;
            hits += logits.rows().into_iter().zip(&yb).filter(|(r, &y)| argmax(r.view()) == y).count();
            model.zero_grad();
            let gz = model.head.backward(&grad);
            model.body.backward(&gz);
            opt.step(&mut model);
        }
        // the last update of an epoch is not covered by the loss check
        let mut finite = true;
        model.visit_state(&mut |s| finite &= s.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ModelError::Diverged { epoch, batch: order.len().div_ceil(config.batch_size), lr });
        }
        let n = train.y.len() as f64;
        let test_acc = monitor.map(|m| model.accuracy(m.x, m.y)).transpose()?;
        let rec = EpochRecord { epoch: epoch + 1, lr, train_loss: loss_sum / n, train_acc: hits as f64 / n, test_acc };
        log::debug!(
            "epoch {} lr {:.4} loss {:.4} train {:.4} test {:?}",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.train_acc,
            rec.test_acc
        );
        history.push(rec);
    }

    let train_acc = model.accuracy(train.x, train.y)?;
    let test_acc = monitor.map(|m| model.accuracy(m.x, m.y)).transpose()?;
    Ok(TrainedClassifier { model, history, train_acc, test_acc })
}

const CLASSIFIER_KIND: &str = "classifier";
const ENCODER_KIND: &str = "encoder";

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    spec: ClassifierSpec,
    train_acc: f64,
    test_acc: Option<f64>,
}

impl<F: Scalar> TrainedClassifier<F> {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = ClassifierMeta { spec: self.model.spec, train_acc: self.train_acc, test_acc: self.test_acc };
        let header = Header {
            kind: CLASSIFIER_KIND.into(),
            dtype: F::DTYPE.into(),
            checksum: self.model.checksum(),
            meta: serde_json::to_value(meta).expect("plain data"),
        };
        checkpoint::write(path, &header, &self.model.export_state())?;
        Ok(())
    }

    /// Loads a checkpoint; the history is not stored in it.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (header, state) = checkpoint::read(path)?;
        expect_kind(&header, CLASSIFIER_KIND)?;
        let meta: ClassifierMeta = serde_json::from_value(header.meta).map_err(CheckpointError::Header)?;
        let mut model = build_classifier::<F>(&meta.spec, 0);
        model
            .import_state(&state)
            .map_err(|expected| CheckpointError::StateLength { expected, found: state.len() })?;
        Ok(Self { model, history: Vec::new(), train_acc: meta.train_acc, test_acc: meta.test_acc })
    }

    pub fn write_history(&self, path: &Path) -> Result<(), ModelError> {
        write_history(&self.history, path)
    }
}

fn expect_kind(header: &Header, kind: &str) -> Result<(), CheckpointError> {
    if header.kind != kind {
        return Err(CheckpointError::Kind { expected: kind.into(), found: header.kind.clone() });
    }
    Ok(())
}

/// Saves a stand-alone encoder body built from `spec`.
pub fn save_encoder<F: Scalar>(encoder: &Sequential<F>, spec: &ClassifierSpec, path: &Path) -> Result<(), ModelError> {
    let header = Header {
        kind: ENCODER_KIND.into(),
        dtype: F::DTYPE.into(),
        checksum: encoder.checksum(),
        meta: serde_json::to_value(spec).expect("plain data"),
    };
    checkpoint::write(path, &header, &encoder.export_state())?;
    Ok(())
}

pub fn load_encoder<F: Scalar>(path: &Path) -> Result<(ClassifierSpec, Sequential<F>), ModelError> {
    let (header, state) = checkpoint::read(path)?;
    expect_kind(&header, ENCODER_KIND)?;
    let spec: ClassifierSpec = serde_json::from_value(header.meta).map_err(CheckpointError::Header)?;
    let mut body = build_classifier::<F>(&spec, 0).into_encoder();
    body.import_state(&state)
        .map_err(|expected| CheckpointError::StateLength { expected, found: state.len() })?;
    Ok((spec, body))
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<(), ModelError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "train_acc", "test_acc"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            r.test_acc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mlp_spec() -> ClassifierSpec {
        ClassifierSpec::new(Architecture::Mlp5, Shape3::new(1, 28, 28), 10).unwrap()
    }

    #[test]
    fn mlp5_parameter_count() {
        let mut m = build_classifier::<f32>(&mlp_spec(), 1);
        let sizes = [784, 1024, 512, 256, 128, 100, 10];
        let expect: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(m.param_count(), expect);
    }

    #[test]
    fn latent_dims() {
        let lenet = ClassifierSpec::new(Architecture::Lenet, Shape3::new(3, 32, 32), 10).unwrap();
        let res = ClassifierSpec::new(Architecture::Resnet20, Shape3::new(3, 32, 32), 100).unwrap();
        assert_eq!(lenet.latent_dim, 84);
        assert_eq!(res.latent_dim, 64);
        let m = build_classifier::<f32>(&lenet, 0);
        let z = m.encode(&Array2::zeros((2, 3072))).unwrap();
        assert_eq!(z.dim(), (2, 84));
        let r = build_classifier::<f32>(&res, 0);
        assert_eq!(r.encode(&Array2::zeros((1, 3072))).unwrap().dim(), (1, 64));
        assert!("vgg".parse::<Architecture>().is_err());
    }

    #[test]
    fn predict_rows_normalized_and_deterministic() {
        let m = build_classifier::<f32>(&mlp_spec(), 3);
        let mut x = Array2::<f32>::zeros((3, 784));
        x.row_mut(1).fill(0.5);
        x.row_mut(2).fill(0.5);
        let p = m.predict(&x).unwrap();
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-5);
        }
        assert_eq!(p.row(1), p.row(2));
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        assert!(matches!(m.predict(&Array2::zeros((1, 100))), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn encode_then_head_reproduces_predict() {
        let m = build_classifier::<f64>(&mlp_spec(), 4);
        let x = Array2::from_shape_fn((4, 784), |(i, j)| ((i * 31 + j) % 17) as f64 / 17.0);
        let z = m.encode(&x).unwrap();
        let logits = z.dot(m.head().weight()) + m.head().bias();
        let direct = m.predict(&x).unwrap();
        let via = softmax_rows(&logits);
        assert!((&direct - &via).iter().all(|d| d.abs() < 1e-5));
    }

    #[test]
    fn loss_values() {
        let e1 = (-1.0f64).exp();
        let p = ndarray::array![[1.0, 0.0], [e1, 1.0 - e1], [0.0, 1.0]];
        let l = cross_entropy_loss(&p, &[0, 0, 0]).unwrap();
        assert_eq!(l[0], 0.0);
        assert!((l[1] - 1.0).abs() < 1e-12);
        assert!((l[2] - 27.631021115928547).abs() < 1e-9);
        assert!(matches!(cross_entropy_loss(&p, &[0, 2, 0]), Err(ModelError::LabelOutOfRange { .. })));
    }

    #[test]
    fn config_validation_and_schedule() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lr_at(49), 0.1);
        assert!((c.lr_at(50) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(99) - 0.001).abs() < 1e-15);
        let bad = TrainConfig { lr_drops: vec![75, 50], ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { epochs: 60, ..c.clone() };
        assert!(bad.validate().is_err());
        let short = c.with_epochs(20);
        assert_eq!(short.lr_drops, vec![10, 15]);
        short.validate().unwrap();
    }

    fn toy_data() -> (Array2<f32>, Vec<usize>) {
        let x = Array2::from_shape_fn((64, 784), |(i, j)| if j % 10 == i % 10 { 1.0 } else { 0.0 });
        let y = (0..64).map(|i| i % 10).collect();
        (x, y)
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let (x, y) = toy_data();
        let init = build_classifier::<f32>(&mlp_spec(), 9);
        let cfg = TrainConfig { epochs: 0, lr_drops: vec![], ..TrainConfig::default() };
        let t = train_classifier(init.clone(), Labeled::new(&x, &y), &cfg, None).unwrap();
        assert!(t.history.is_empty());
        assert_eq!(t.model.checksum(), init.checksum());
    }

    #[test]
    fn training_fits_toy_problem_reproducibly() {
        let (x, y) = toy_data();
        let cfg = TrainConfig { epochs: 40, lr_drops: vec![30], lr: 0.1, momentum: 0.5, batch_size: 16, ..TrainConfig::default() };
        let a = train_classifier(build_classifier::<f32>(&mlp_spec(), 2), Labeled::new(&x, &y), &cfg, None).unwrap();
        let b = train_classifier(build_classifier::<f32>(&mlp_spec(), 2), Labeled::new(&x, &y), &cfg, None).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.history.len(), 40);
        assert_eq!(a.train_acc, 1.0);
    }

    #[test]
    fn divergence_is_reported() {
        let (x, y) = toy_data();
        let cfg = TrainConfig { epochs: 3, lr_drops: vec![], lr: 1e30, batch_size: 16, momentum: 0.0, ..TrainConfig::default() };
        let r = train_classifier(build_classifier::<f32>(&mlp_spec(), 2), Labeled::new(&x, &y), &cfg, None);
        assert!(matches!(r, Err(ModelError::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = toy_data();
        let cfg = TrainConfig { epochs: 2, lr_drops: vec![], ..TrainConfig::default() };
        let t = train_classifier(build_classifier::<f32>(&mlp_spec(), 2), Labeled::new(&x, &y), &cfg, None).unwrap();
        let p = dir.path().join("victim.ckpt");
        t.save(&p).unwrap();
        t.write_history(&dir.path().join("history.csv")).unwrap();
        let back = TrainedClassifier::<f32>::load(&p).unwrap();
        assert_eq!(back.model.checksum(), t.model.checksum());
        assert_eq!(back.model.predict(&x).unwrap(), t.model.predict(&x).unwrap());
        assert!(load_encoder::<f32>(&p).is_err());
        let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
