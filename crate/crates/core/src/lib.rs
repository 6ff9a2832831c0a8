//! Membership inference with subpopulation-calibrated scores, five baseline
//! attacks and an evaluation harness.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod latent;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod shadows;
pub mod subpop_gan;

pub use scalar::Scalar;

pub type Classifier32 = models::Classifier<f32>;
pub type Classifier64 = models::Classifier<f64>;
pub type TrainedClassifier32 = models::TrainedClassifier<f32>;
pub type TrainedClassifier64 = models::TrainedClassifier<f64>;
pub type ShadowPool32 = shadows::ShadowPool<f32>;
pub type ShadowPool64 = shadows::ShadowPool<f64>;
pub type SubpopGenerator32 = subpop_gan::SubpopGenerator<f32>;
pub type SubpopGenerator64 = subpop_gan::SubpopGenerator<f64>;
pub type SubpopulationSet32 = latent::SubpopulationSet<f32>;
pub type SubpopulationSet64 = latent::SubpopulationSet<f64>;
