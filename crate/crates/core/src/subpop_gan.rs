//! Modified BiGAN: a generator that inverts the victim's encoder.
//!
//! Real pairs are `(x, E(x))` over the attacker split; fake pairs are
//! `(G(z), z)` with `z` drawn from the empirical set of attacker latents.
//! In white-box mode `E` is the victim encoder and is never updated; in
//! black-box mode an independently initialized encoder is trained jointly.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Header};
use crate::data::{DataError, DatasetBundle, Preprocessing, SampleId};
use crate::latent::{noisy_latents, LatentError, Member, NoiseSpec, Source, SubpopulationSet};
use crate::models::{infer_chunked, Architecture, ClassifierSpec};
use crate::nn::loss::{bce_with_logits, cosine_distance, cosine_similarity_rows};
use crate::nn::optim::Adam;
use crate::nn::{
    hconcat, Activation, ActivationKind, ChannelAffine, Conv2d, ConvTranspose2d, Dense, Layer, Mode, Parameterized,
    Sequential, Shape3,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid generator setup: {0}")]
    InvalidSpec(String),
    #[error("invalid BiGAN config: {0}")]
    InvalidConfig(String),
    #[error(
        "mode collapse at epoch {epoch}: diagnostic stuck at {diagnostic:.4} and generated diversity ratio {diversity:.4}; \
         enable generator pre-training (`pretrain = true`) or lower the learning rate"
    )]
    ModeCollapse { epoch: usize, diagnostic: f64, diversity: f64 },
    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("generator expects encoder {expected}, got {found}")]
    EncoderMismatch { expected: String, found: String },
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("png error: {0}")]
    Png(#[from] png::EncodingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    WhiteBox,
    BlackBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    /// Dense mirror of the mlp5 encoder.
    Mlp,
    /// Transposed-convolution stack for 32×32 colour images.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: NetKind,
    pub latent_dim: usize,
    pub output: Shape3,
    /// Per-channel map from `[0,1]` pixels to model inputs.
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl GeneratorSpec {
    /// Generator matched to an encoder architecture and dataset preprocessing.
    pub fn for_encoder(spec: &ClassifierSpec, preprocessing: &Preprocessing) -> Result<Self, GanError> {
        let kind = match spec.architecture {
            Architecture::Mlp5 => NetKind::Mlp,
            Architecture::Lenet | Architecture::Resnet20 => NetKind::Conv,
        };
        if kind == NetKind::Conv && (spec.input.h != 32 || spec.input.w != 32) {
            return Err(GanError::InvalidSpec(format!("conv generator produces 32x32 images, dataset is {}", spec.input)));
        }
        let (scale, shift) = preprocessing.affine(spec.input.c);
        Ok(Self { kind, latent_dim: spec.latent_dim, output: spec.input, scale, shift })
    }

    pub fn build<F: Scalar>(&self) -> Sequential<F> {
        let lrelu = |s: Shape3| Layer::Activation(Activation::new(ActivationKind::LeakyRelu(0.2), s));
        let mut g = Sequential::new(Shape3::flat(self.latent_dim));
        match self.kind {
            NetKind::Mlp => {
                let mut width = self.latent_dim;
                for h in [128, 256, 512, 1024] {
                    g.push(Layer::Dense(Dense::new(width, h)));
                    g.push(lrelu(Shape3::flat(h)));
                    width = h;
                }
                g.push(Layer::Dense(Dense::new(width, self.output.len())));
            }
            NetKind::Conv => {
                g.push(Layer::Dense(Dense::new(self.latent_dim, 512)));
                g.push(lrelu(Shape3::flat(512)));
                let mut shape = Shape3::new(512, 1, 1);
                for (i, (filters, up)) in [(512, 4), (256, 2), (128, 2), (64, 2)].into_iter().enumerate() {
                    let t = ConvTranspose2d::new(shape, filters, up);
                    shape = Shape3::new(filters, shape.h * up, shape.w * up);
                    g.push(Layer::ConvTranspose2d(t));
                    g.push(lrelu(shape));
                    let out_c = if i == 3 { self.output.c } else { filters };
                    g.push(Layer::Conv2d(Conv2d::new(shape, out_c, 3, 1, 1)));
                    shape = Shape3::new(out_c, shape.h, shape.w);
                    if i < 3 {
                        g.push(lrelu(shape));
                    }
                }
            }
        }
        g.push(Layer::Activation(Activation::new(ActivationKind::Sigmoid, self.output)));
        let affine = ChannelAffine::new(
            self.output,
            self.scale.iter().map(|&v| F::of(v)).collect(),
            self.shift.iter().map(|&v| F::of(v)).collect(),
        );
        if !affine.is_identity() {
            g.push(Layer::ChannelAffine(affine));
        }
        g
    }
}

/// Judges `(image, latent)` pairs; the latent joins after the image branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub kind: NetKind,
    pub image: Shape3,
    pub latent_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Discriminator<F: Scalar> {
    image_net: Sequential<F>,
    joint_net: Sequential<F>,
    latent_dim: usize,
}

impl DiscriminatorSpec {
    pub fn for_generator(g: &GeneratorSpec) -> Self {
        Self { kind: g.kind, image: g.output, latent_dim: g.latent_dim }
    }

    pub fn build<F: Scalar>(&self) -> Discriminator<F> {
        let lrelu = |s: Shape3| Layer::Activation(Activation::new(ActivationKind::LeakyRelu(0.2), s));
        let mut image_net = Sequential::new(self.image);
        let hidden: &[usize] = match self.kind {
            NetKind::Mlp => &[1024, 512, 256, 128, 100],
            NetKind::Conv => {
                for filters in [128, 256, 512, 1024] {
                    let conv = Conv2d::new(image_net.out_shape(), filters, 3, 2, 1);
                    let out = Layer::<F>::Conv2d(conv.clone()).out_shape();
                    image_net.push(Layer::Conv2d(conv));
                    image_net.push(lrelu(out));
                }
                &[64]
            }
        };
        let mut width = image_net.out_shape().len() + self.latent_dim;
        let mut joint_net = Sequential::new(Shape3::flat(width));
        for &h in hidden {
            joint_net.push(Layer::Dense(Dense::new(width, h)));
            joint_net.push(lrelu(Shape3::flat(h)));
            width = h;
        }
        joint_net.push(Layer::Dense(Dense::new(width, 1)));
        Discriminator { image_net, joint_net, latent_dim: self.latent_dim }
    }
}

impl<F: Scalar> Discriminator<F> {
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.image_net.init(rng);
        self.joint_net.init(rng);
    }

    pub fn forward(&mut self, x: &Array2<F>, z: &Array2<F>) -> Array2<F> {
        let h = self.image_net.forward(x, Mode::Train);
        self.joint_net.forward(&hconcat(&h, z), Mode::Train)
    }

    pub fn infer(&self, x: &Array2<F>, z: &Array2<F>) -> Array2<F> {
        self.joint_net.infer(&hconcat(&self.image_net.infer(x), z))
    }

    /// Returns gradients with respect to the image and the latent.
    pub fn backward(&mut self, grad: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let gj = self.joint_net.backward(grad);
        let split = gj.ncols() - self.latent_dim;
        let gh = gj.slice(s![.., ..split]).to_owned();
        let gz = gj.slice(s![.., split..]).to_owned();
        (self.image_net.backward(&gh), gz)
    }
}

impl<F: Scalar> Parameterized<F> for Discriminator<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.image_net.visit_params(f);
        self.joint_net.visit_params(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[F])) {
        self.image_net.visit_state(f);
        self.joint_net.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        self.image_net.visit_state_mut(f);
        self.joint_net.visit_state_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiGanConfig {
    pub mode: GanMode,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Stop once the diagnostic falls to this fraction of its epoch-1 value.
    pub stop_ratio: f64,
    /// Weight of the cosine reconstruction term in the generator loss.
    pub recon_weight: f64,
    pub pretrain: bool,
    /// Pre-train the generator in black-box mode regardless of `pretrain`.
    pub black_box_pretrain: bool,
    pub pretrain_epochs: usize,
    pub probe_size: usize,
    pub collapse_window: usize,
    /// Generated/real mean pairwise distance ratio below which a plateau
    /// counts as mode collapse.
    pub diversity_threshold: f64,
    pub seed: u64,
}

impl Default for BiGanConfig {
    fn default() -> Self {
        Self {
            mode: GanMode::WhiteBox,
            max_epochs: 100,
            batch_size: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            stop_ratio: 0.2,
            recon_weight: 1.0,
            pretrain: false,
            black_box_pretrain: true,
            pretrain_epochs: 5,
            probe_size: 256,
            collapse_window: 5,
            diversity_threshold: 0.05,
            seed: 0,
        }
    }
}

impl BiGanConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |m: String| Err(GanError::InvalidConfig(m));
        if self.batch_size == 0 || self.probe_size == 0 {
            return bad("batch and probe sizes must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("optimizer lr {} betas ({}, {})", self.lr, self.beta1, self.beta2));
        }
        if !(self.stop_ratio > 0.0 && self.stop_ratio < 1.0) {
            return bad(format!("stop ratio {}", self.stop_ratio));
        }
        if self.recon_weight < 0.0 {
            return bad(format!("recon weight {}", self.recon_weight));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub e_loss: Option<f64>,
    /// `mean(1 − cos(E(G(E(x))), E(x)))` over the probe batch.
    pub diagnostic: f64,
    /// Generated/real mean pairwise distance on the probe batch.
    pub diversity: f64,
}

/// Trained generator bound to the encoder whose latents it inverts.
#[derive(Debug, Clone)]
pub struct SubpopGenerator<F: Scalar> {
    pub spec: GeneratorSpec,
    pub generator: Sequential<F>,
    pub mode: GanMode,
    pub encoder_checksum: String,
    /// Jointly trained encoder (black-box mode only).
    pub encoder: Option<Sequential<F>>,
    pub history: Vec<GanEpoch>,
    /// Epoch at which the stopping rule fired.
    pub stopped_at: Option<usize>,
    pub pretrained: bool,
}

/// Where the BiGAN's encoder comes from.
pub enum EncoderSource<'a, F: Scalar> {
    /// Victim encoder, used read-only.
    Frozen(&'a Sequential<F>),
    /// Fresh encoder trained alongside the generator.
    Trainable(Sequential<F>),
}

fn mean_pairwise_distance<F: Scalar>(x: &Array2<F>) -> f64 {
    let n = x.nrows().min(64);
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
            sum += d.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

fn diagnostic<F: Scalar>(g: &Sequential<F>, e: &Sequential<F>, zp: &Array2<F>) -> (f64, Array2<F>) {
    let xg = infer_chunked(g, zp);
    let zr = infer_chunked(e, &xg);
    let cos = cosine_similarity_rows(&zr, zp);
    (cos.iter().map(|c| 1.0 - c).sum::<f64>() / cos.len() as f64, xg)
}

/// Generator inputs: `n` rows drawn with replacement from the empirical latent set `m`.
pub fn sample_prior<F: Scalar, R: Rng>(m: &Array2<F>, n: usize, rng: &mut R) -> Array2<F> {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..m.nrows())).collect();
    m.select(Axis(0), &idx)
}

fn vstack<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width")
}

/// Plain unconditional GAN warm-up of the generator on attacker images,
/// with inputs drawn from the empirical latent set `latents`.
pub fn pretrain_generator<F: Scalar>(
    spec: &GeneratorSpec,
    x: &Array2<F>,
    latents: &Array2<F>,
    config: &BiGanConfig,
) -> Result<Sequential<F>, GanError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0907_7a1e);
    let mut g = spec.build::<F>();
    g.init(&mut rng);
    let mut d = DiscriminatorSpec { kind: spec.kind, image: spec.output, latent_dim: 0 }.build::<F>();
    d.init(&mut rng);
    let (mut opt_g, mut opt_d) = (
        Adam::new(config.lr, config.beta1, config.beta2),
        Adam::new(config.lr, config.beta1, config.beta2),
    );
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for epoch in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), idx);
            let none = Array2::<F>::zeros((idx.len(), 0));
            let zf = sample_prior(latents, idx.len(), &mut rng);
            d.zero_grad();
            let (lr_, gr) = bce_with_logits(&d.forward(&xb, &none), 1.0);
            d.backward(&gr);
            let xf = g.infer(&zf);
            let (lf, gf) = bce_with_logits(&d.forward(&xf, &none), 0.0);
            d.backward(&gf);
            opt_d.step(&mut d);

            g.zero_grad();
            let xg = g.forward(&zf, Mode::Train);
            let (lg, gg) = bce_with_logits(&d.forward(&xg, &none), 1.0);
            let (gx, _) = d.backward(&gg);
            g.backward(&gx);
            opt_g.step(&mut g);
            if !(lr_ + lf + lg).is_finite() {
                return Err(GanError::Diverged { epoch });
            }
        }
        log::info!("generator pre-training epoch {}/{}", epoch + 1, config.pretrain_epochs);
    }
    Ok(g)
}

/// Trains the modified BiGAN on the attacker split of `bundle`.
pub fn train_bigan<F: Scalar>(
    bundle: &DatasetBundle,
    encoder_spec: &ClassifierSpec,
    encoder: EncoderSource<'_, F>,
    config: &BiGanConfig,
) -> Result<SubpopGenerator<F>, GanError> {
    let x = bundle.images::<F>(&bundle.splits.attacker)?;
    let gspec = GeneratorSpec::for_encoder(encoder_spec, &bundle.preprocessing)?;
    train_bigan_on(&x, &gspec, encoder, config)
}

/// [`train_bigan`] over an explicit image matrix.
pub fn train_bigan_on<F: Scalar>(
    x: &Array2<F>,
    gspec: &GeneratorSpec,
    encoder: EncoderSource<'_, F>,
    config: &BiGanConfig,
) -> Result<SubpopGenerator<F>, GanError> {
    config.validate()?;
    if x.nrows() < 2 {
        return Err(GanError::InvalidConfig("need at least two attacker samples".into()));
    }
    let (mode, frozen_checksum, mut enc) = match encoder {
        EncoderSource::Frozen(e) => (GanMode::WhiteBox, Some(e.checksum()), e.clone()),
        EncoderSource::Trainable(e) => (GanMode::BlackBox, None, e),
    };
    if mode != config.mode {
        return Err(GanError::InvalidConfig(format!("config mode {:?} but encoder source is {mode:?}", config.mode)));
    }
    if enc.out_shape().len() != gspec.latent_dim || enc.in_shape().len() != gspec.output.len() {
        return Err(GanError::InvalidSpec("encoder shape does not match generator".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.shuffle(&mut rng);
    let probe_n = config.probe_size.min(x.nrows() / 2).max(1);
    let probe = x.select(Axis(0), &order[..probe_n]);
    let mut train_rows = order[probe_n..].to_vec();
    let real_diversity = mean_pairwise_distance(&probe).max(1e-12);

    let mut latents = infer_chunked(&enc, x);
    let pretrained = config.pretrain || (mode == GanMode::BlackBox && config.black_box_pretrain);
    let mut g = if pretrained {
        pretrain_generator(gspec, x, &latents, config)?
    } else {
        let mut g = gspec.build::<F>();
        g.init(&mut rng);
        g
    };
    let mut d = DiscriminatorSpec::for_generator(gspec).build::<F>();
    d.init(&mut rng);
    let adam = || Adam::new(config.lr, config.beta1, config.beta2);
    let (mut opt_g, mut opt_d, mut opt_e) = (adam(), adam(), adam());
    let trainable = mode == GanMode::BlackBox;
    let w = F::of(config.recon_weight);

    let mut history: Vec<GanEpoch> = Vec::new();
    let mut stopped_at = None;
    for epoch in 1..=config.max_epochs {
        train_rows.shuffle(&mut rng);
        let (mut dl, mut gl, mut el, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for idx in train_rows.chunks(config.batch_size) {
            let n = idx.len();
            let xb = x.select(Axis(0), idx);
            let zr = if trainable { enc.forward(&xb, Mode::Eval) } else { latents.select(Axis(0), idx) };
            let zf = sample_prior(&latents, n, &mut rng);

            // discriminator: real (x, E(x)) vs fake (G(z), z)
            d.zero_grad();
            let (l_real, g_real) = bce_with_logits(&d.forward(&xb, &zr), 1.0);
            d.backward(&g_real);
            let (l_fake, g_fake) = bce_with_logits(&d.forward(&g.infer(&zf), &zf), 0.0);
            d.backward(&g_fake);
            opt_d.step(&mut d);

            // encoder (black-box): make real pairs look fake
            enc.zero_grad();
            if trainable {
                let (l_e, g_e) = bce_with_logits(&d.forward(&xb, &zr), 0.0);
                let (_, gz) = d.backward(&g_e);
                enc.backward(&gz);
                // stepped before the generator pass: reconstruction never trains E
                opt_e.step(&mut enc);
                el += l_e;
            }

            // generator: fool D on fresh fakes, plus cosine reconstruction of E(x)
            g.zero_grad();
            let recon = config.recon_weight > 0.0;
            let zin = if recon { vstack(&zf, &zr) } else { zf.clone() };
            let xg = g.forward(&zin, Mode::Train);
            let xg_adv = xg.slice(s![..n, ..]).to_owned();
            let (l_g, g_adv) = bce_with_logits(&d.forward(&xg_adv, &zf), 1.0);
            let (gx_adv, _) = d.backward(&g_adv);
            let gx = if recon {
                let xg_rec = xg.slice(s![n.., ..]).to_owned();
                let zhat = enc.forward(&xg_rec, Mode::Eval);
                let (l_c, g_c) = cosine_distance(&zhat, &zr);
                let gx_rec = enc.backward(&(g_c * w));
                gl += config.recon_weight * l_c;
                vstack(&gx_adv, &gx_rec)
            } else {
                gx_adv
            };
            g.backward(&gx);
            opt_g.step(&mut g);
            dl += l_real + l_fake;
            gl += l_g;
            batches += 1;
            if !(dl + gl + el).is_finite() {
                return Err(GanError::Diverged { epoch });
            }
        }
        if trainable {
            latents = infer_chunked(&enc, x);
        }
        let zp = infer_chunked(&enc, &probe);
        let (diag, xg) = diagnostic(&g, &enc, &zp);
        let diversity = mean_pairwise_distance(&xg) / real_diversity;
        let b = batches.max(1) as f64;
        let rec = GanEpoch {
            epoch,
            d_loss: dl / b,
            g_loss: gl / b,
            e_loss: trainable.then_some(el / b),
            diagnostic: diag,
            diversity,
        };
        log::info!(
            "bigan epoch {epoch}: d {:.4} g {:.4} diag {:.4} diversity {:.3}",
            rec.d_loss,
            rec.g_loss,
            rec.diagnostic,
            rec.diversity
        );
        history.push(rec);
        let first = history[0].diagnostic;
        if epoch > 1 && diag <= config.stop_ratio * first {
            stopped_at = Some(epoch);
            break;
        }
        if let Some(e) = collapse(&history, config) {
            return Err(e);
        }
    }

    let encoder_checksum = enc.checksum();
    if let Some(before) = frozen_checksum {
        debug_assert_eq!(before, encoder_checksum, "frozen encoder changed");
    }
    Ok(SubpopGenerator {
        spec: gspec.clone(),
        generator: g,
        mode,
        encoder_checksum,
        encoder: trainable.then_some(enc),
        history,
        stopped_at,
        pretrained,
    })
}

/// Plateau of the diagnostic over the window together with collapsed output
/// diversity.
fn collapse(history: &[GanEpoch], config: &BiGanConfig) -> Option<GanError> {
    let w = config.collapse_window;
    if w == 0 || history.len() <= w {
        return None;
    }
    let (before, recent) = history.split_at(history.len() - w);
    let best_before = before.iter().map(|h| h.diagnostic).fold(f64::INFINITY, f64::min);
    let best_recent = recent.iter().map(|h| h.diagnostic).fold(f64::INFINITY, f64::min);
    let last = history.last().expect("non-empty");
    let plateau = best_recent >= 0.99 * best_before;
    (plateau && last.diversity < config.diversity_threshold).then_some(GanError::ModeCollapse {
        epoch: last.epoch,
        diagnostic: last.diagnostic,
        diversity: last.diversity,
    })
}

const GENERATOR_KIND: &str = "generator";

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    spec: GeneratorSpec,
    mode: GanMode,
    encoder_checksum: String,
    history: Vec<GanEpoch>,
    stopped_at: Option<usize>,
    pretrained: bool,
}

impl<F: Scalar> SubpopGenerator<F> {
    /// The encoder this generator pairs with: the trained one in black-box
    /// mode, otherwise `victim`.
    pub fn encoder<'a>(&'a self, victim: &'a Sequential<F>) -> &'a Sequential<F> {
        self.encoder.as_ref().unwrap_or(victim)
    }

    /// Checks `encoder` once and returns a crafting handle.
    pub fn crafter<'a>(&'a self, encoder: &'a Sequential<F>) -> Result<Crafter<'a, F>, GanError> {
        let found = encoder.checksum();
        if found != self.encoder_checksum {
            return Err(GanError::EncoderMismatch { expected: self.encoder_checksum.clone(), found });
        }
        Ok(Crafter { gen: self, encoder })
    }

    /// Saves the generator checkpoint (with its encoder identity and training
    /// history in the header) and, in black-box mode, `<path>.encoder`.
    pub fn save(&self, path: &Path) -> Result<(), GanError> {
        let meta = GeneratorMeta {
            spec: self.spec.clone(),
            mode: self.mode,
            encoder_checksum: self.encoder_checksum.clone(),
            history: self.history.clone(),
            stopped_at: self.stopped_at,
            pretrained: self.pretrained,
        };
        let header = Header {
            kind: GENERATOR_KIND.into(),
            dtype: F::DTYPE.into(),
            checksum: self.generator.checksum(),
            meta: serde_json::to_value(meta).expect("plain data"),
        };
        checkpoint::write(path, &header, &self.generator.export_state())?;
        if let Some(e) = &self.encoder {
            let eh = Header { kind: "bigan-encoder".into(), dtype: F::DTYPE.into(), checksum: e.checksum(), meta: serde_json::Value::Null };
            checkpoint::write(&encoder_path(path), &eh, &e.export_state())?;
        }
        Ok(())
    }

    /// `encoder_template` supplies the architecture for a black-box encoder.
    pub fn load(path: &Path, encoder_template: &Sequential<F>) -> Result<Self, GanError> {
        let (header, state) = checkpoint::read(path)?;
        if header.kind != GENERATOR_KIND {
            return Err(CheckpointError::Kind { expected: GENERATOR_KIND.into(), found: header.kind }.into());
        }
        let meta: GeneratorMeta = serde_json::from_value(header.meta).map_err(CheckpointError::Header)?;
        let mut generator = meta.spec.build::<F>();
        generator
            .import_state(&state)
            .map_err(|expected| CheckpointError::StateLength { expected, found: state.len() })?;
        let encoder = if meta.mode == GanMode::BlackBox {
            let (_, es) = checkpoint::read(&encoder_path(path))?;
            let mut e = encoder_template.clone();
            e.import_state(&es).map_err(|expected| CheckpointError::StateLength { expected, found: es.len() })?;
            Some(e)
        } else {
            None
        };
        Ok(Self {
            spec: meta.spec,
            generator,
            mode: meta.mode,
            encoder_checksum: meta.encoder_checksum,
            encoder,
            history: meta.history,
            stopped_at: meta.stopped_at,
            pretrained: meta.pretrained,
        })
    }

    pub fn write_diagnostics(&self, path: &Path) -> Result<(), GanError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "d_loss", "g_loss", "e_loss", "diagnostic", "diversity"])?;
        for h in &self.history {
            w.write_record([
                h.epoch.to_string(),
                h.d_loss.to_string(),
                h.g_loss.to_string(),
                h.e_loss.map(|v| v.to_string()).unwrap_or_default(),
                h.diagnostic.to_string(),
                h.diversity.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn encoder_path(path: &Path) -> std::path::PathBuf {
    std::path::PathBuf::from(format!("{}.encoder", path.display()))
}

/// Generator paired with a verified encoder.
pub struct Crafter<'a, F: Scalar> {
    gen: &'a SubpopGenerator<F>,
    encoder: &'a Sequential<F>,
}

impl<F: Scalar> Crafter<'_, F> {
    pub fn encoder(&self) -> &Sequential<F> {
        self.encoder
    }

    /// Decodes latent rows to images.
    pub fn generate(&self, z: &Array2<F>) -> Array2<F> {
        infer_chunked(&self.gen.generator, z)
    }

    /// Crafts one subpopulation per target from noisy copies of its latent.
    /// Each target's draws are seeded by `(noise.seed, target id)`.
    pub fn craft_batch(
        &self,
        targets: &[SampleId],
        x: &Array2<F>,
        labels: &[usize],
        noise: &NoiseSpec,
    ) -> Result<Vec<SubpopulationSet<F>>, GanError> {
        noise.validate()?;
        assert_eq!(targets.len(), x.nrows());
        assert_eq!(targets.len(), labels.len());
        let z = infer_chunked(self.encoder, x).mapv(|v| v.f64());
        targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let l: Vec<f64> = z.row(i).to_vec();
                let mut rng = ChaCha8Rng::seed_from_u64(noise.seed_for(t));
                let zn = noisy_latents(&l, noise, &mut rng).mapv(F::of);
                let images = self.generate(&zn);
                let back = infer_chunked(self.encoder, &images).mapv(|v| v.f64());
                let target_row = Array2::from_shape_vec((1, l.len()), l).expect("one row");
                let members = back
                    .rows()
                    .into_iter()
                    .map(|r| Member {
                        source: Source::Generated,
                        id: None,
                        similarity: crate::nn::loss::cosine(r.iter().copied(), target_row.row(0).iter().copied()),
                    })
                    .collect();
                Ok(SubpopulationSet::new(t, labels[i], members, images)?)
            })
            .collect()
    }
}

/// Writes a grid with one row per target: the original followed by its
/// members, mapped back to 8-bit pixels.
pub fn write_grid<F: Scalar>(
    path: &Path,
    originals: &Array2<F>,
    sets: &[SubpopulationSet<F>],
    shape: Shape3,
    preprocessing: &Preprocessing,
    per_row: usize,
) -> Result<(), GanError> {
    let (scale, shift) = preprocessing.affine(shape.c);
    let cols = per_row + 1;
    let (h, w) = (shape.h, shape.w);
    let (width, height) = (cols * w, sets.len() * h);
    let channels = if shape.c == 3 { 3 } else { 1 };
    let mut buf = vec![0u8; width * height * channels];
    let mut put = |row: usize, col: usize, img: ndarray::ArrayView1<F>| {
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let v = img[c * h * w + y * w + x].f64();
                    let p = ((v - shift[c]) / scale[c]).clamp(0.0, 1.0) * 255.0;
                    let (py, px) = (row * h + y, col * w + x);
                    buf[(py * width + px) * channels + c] = p.round() as u8;
                }
            }
        }
    };
    for (r, set) in sets.iter().enumerate() {
        put(r, 0, originals.row(r));
        for (k, img) in set.images.rows().into_iter().take(per_row).enumerate() {
            put(r, k + 1, img);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(if channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(&buf)?;
    Ok(())
}
