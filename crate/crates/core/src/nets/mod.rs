//! Networks: the latent- and time-conditioned generator and the
//! time-dependent PatchGAN discriminator, plus their parameter stores and
//! the checkpoint container.

pub mod checkpoint;
mod discriminator;
mod generator;
mod params;
pub mod toy;

pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{Generator, GeneratorSpec};
pub use params::Params;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;
use params::{Dense, Registry};

/// A network with a parameter store.
pub trait Network<T: Scalar> {
    fn params(&self) -> &Params<T>;
    fn params_mut(&mut self) -> &mut Params<T>;
}

/// `G(x_t, z, t)` recorded on a graph.
pub trait ConditionalGenerator<T: Scalar>: Network<T> {
    fn latent_dim(&self) -> usize;
    fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, z: Var, t: &[usize]) -> Result<Var>;
}

/// `D(x_{t-1}, x_t, t)` recorded on a graph, returning probabilities.
pub trait PairDiscriminator<T: Scalar>: Network<T> {
    fn forward(&self, g: &mut Graph<T>, p: &[Var], x_prev: Var, x_t: Var, t: &[usize]) -> Result<Var>;
}

macro_rules! impl_network {
    ($ty:ident) => {
        impl<T: Scalar> $crate::nets::Network<T> for $ty<T> {
            fn params(&self) -> &Params<T> {
                $ty::params(self)
            }

            fn params_mut(&mut self) -> &mut Params<T> {
                $ty::params_mut(self)
            }
        }
    };
}
pub(crate) use impl_network;

impl_network!(Generator);
impl_network!(Discriminator);

impl<T: Scalar> ConditionalGenerator<T> for Generator<T> {
    fn latent_dim(&self) -> usize {
        self.spec().latent_dim
    }

    fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, z: Var, t: &[usize]) -> Result<Var> {
        Generator::forward(self, g, p, x, z, t)
    }
}

impl<T: Scalar> PairDiscriminator<T> for Discriminator<T> {
    fn forward(&self, g: &mut Graph<T>, p: &[Var], x_prev: Var, x_t: Var, t: &[usize]) -> Result<Var> {
        Discriminator::forward(self, g, p, x_prev, x_t, t)
    }
}

/// Named architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Test default, about fifty thousand generator parameters.
    Tiny,
    Small,
    /// Channel plan in the range of full-size CycleGAN-VC2 models.
    Paper,
}

impl Preset {
    pub fn generator(self, feature_dim: usize) -> GeneratorSpec {
        let (base_channels, n_resblocks, latent_dim, time_embed_dim, downsample_factor) = match self {
            Preset::Tiny => (32, 2, 16, 16, 2),
            Preset::Small => (64, 4, 32, 32, 4),
            Preset::Paper => (256, 6, 64, 64, 4),
        };
        GeneratorSpec {
            feature_dim,
            base_channels,
            n_resblocks,
            latent_dim,
            time_embed_dim,
            downsample_factor,
        }
    }

    pub fn discriminator(self, feature_dim: usize) -> DiscriminatorSpec {
        let (base_channels, n_layers, time_embed_dim) = match self {
            Preset::Tiny => (4, 2, 16),
            Preset::Small => (16, 3, 32),
            Preset::Paper => (64, 3, 64),
        };
        DiscriminatorSpec { feature_dim, base_channels, n_layers, time_embed_dim }
    }
}

/// Sinusoidal embedding of integer diffusion steps, shape `(B, dim)`.
///
/// The first half holds sines and the second cosines, with frequencies
/// spaced geometrically from 1 down to 1/1000.
pub fn time_embedding<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let s = step as f64;
        let mut row = vec![0.0; dim];
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            row[k] = (s * freq).sin();
            row[half + k] = (s * freq).cos();
        }
        data.extend(row.into_iter().map(cst::<T>));
    }
    Tensor::new(vec![t.len(), dim], data).expect("embedding shape")
}

/// Largest of 4, 2, 1 groups that divides `channels`.
pub(crate) fn norm_groups(channels: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}

/// Group norm whose per-channel scale and shift are predicted from a
/// conditioning vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CondNorm {
    scale: Dense,
    shift: Dense,
    groups: usize,
}

impl CondNorm {
    pub(crate) fn register(reg: &mut Registry, name: &str, cond_dim: usize, channels: usize) -> Self {
        Self {
            scale: reg.dense(&format!("{name}.scale"), cond_dim, channels, 0.1),
            shift: reg.dense(&format!("{name}.shift"), cond_dim, channels, 0.1),
            groups: norm_groups(channels),
        }
    }

    pub(crate) fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var, cond: Var) -> Var {
        let n = g.group_norm(x, self.groups);
        let s = g.linear(cond, p[self.scale.w], p[self.scale.b]);
        let h = g.linear(cond, p[self.shift.w], p[self.shift.b]);
        g.modulate(n, s, h)
    }
}

pub(crate) fn dense<T: Scalar>(g: &mut Graph<T>, p: &[Var], d: Dense, x: Var) -> Var {
    g.linear(x, p[d.w], p[d.b])
}

fn check_positive(what: &str, fields: &[(&str, usize)]) -> Result<()> {
    for (name, v) in fields {
        if *v == 0 {
            return Err(Error::Spec(format!("{what}.{name} must be positive")));
        }
    }
    Ok(())
}

/// Parameter count implied by a generator spec.
pub fn generator_param_count(spec: &GeneratorSpec) -> Result<usize> {
    Ok(generator::layout(spec)?.1.count())
}

/// Parameter count implied by a discriminator spec.
pub fn discriminator_param_count(spec: &DiscriminatorSpec) -> Result<usize> {
    Ok(discriminator::layout(spec)?.1.count())
}
