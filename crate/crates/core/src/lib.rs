//! Few-step denoising diffusion GAN voice conversion on mel-cepstral
//! feature sequences.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Generator32 = nets::Generator<f32>;
pub type Generator64 = nets::Generator<f64>;
pub type Discriminator32 = nets::Discriminator<f32>;
pub type Discriminator64 = nets::Discriminator<f64>;
pub type FeatureSequence32 = features::FeatureSequence<f32>;
pub type FeatureSequence64 = features::FeatureSequence<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
pub type Converter32 = trainer::Converter<f32>;
pub type Converter64 = trainer::Converter<f64>;
