//! Small fully connected variants of the generator and discriminator for
//! vector-valued data `(B, F)`. Used for low-dimensional experiments and
//! for gradient checks on sub-100-parameter models.

use serde::{Deserialize, Serialize};

use super::generator::check_layout;
use super::params::{Dense, Registry};
use super::{check_positive, dense, impl_network, time_embedding, ConditionalGenerator, PairDiscriminator, Params};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::schedule::Denoiser;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub data_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub time_embed_dim: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        check_positive(
            "mlp",
            &[
                ("data_dim", self.data_dim),
                ("hidden", self.hidden),
                ("latent_dim", self.latent_dim),
                ("time_embed_dim", self.time_embed_dim),
            ],
        )?;
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Spec("mlp.time_embed_dim must be even".into()));
        }
        Ok(())
    }
}

fn check_batch<T: Scalar>(g: &Graph<T>, x: Var, dim: usize, t: &[usize]) -> Result<usize> {
    let s = g.value(x).shape();
    if s.len() != 2 || s[1] != dim {
        return Err(Error::Shape(format!("expected (B, {dim}), got {s:?}")));
    }
    if t.len() != s[0] {
        return Err(Error::Shape(format!("{} steps for batch of {}", t.len(), s[0])));
    }
    Ok(s[0])
}

#[derive(Debug, Clone)]
struct GenLayout {
    input: Dense,
    time: Dense,
    scale: Dense,
    shift: Dense,
    hidden: Dense,
    output: Dense,
}

fn gen_layout(spec: &MlpSpec) -> Result<(GenLayout, Registry)> {
    spec.validate()?;
    let mut reg = Registry::default();
    let (f, h) = (spec.data_dim, spec.hidden);
    let l = GenLayout {
        input: reg.dense("input", f, h, 1.0),
        time: reg.dense("time", spec.time_embed_dim, h, 1.0),
        scale: reg.dense("latent.scale", spec.latent_dim, h, 0.5),
        shift: reg.dense("latent.shift", spec.latent_dim, h, 0.5),
        hidden: reg.dense("hidden", h, h, 1.0),
        output: reg.dense("output", h, f, 1.0),
    };
    Ok((l, reg))
}

/// `x0_hat = W_o silu(W_h m + b) ...` where `m` is the latent-modulated,
/// time-shifted first hidden layer.
#[derive(Debug, Clone)]
pub struct MlpGenerator<T> {
    spec: MlpSpec,
    layout: GenLayout,
    params: Params<T>,
}

impl<T: Scalar> MlpGenerator<T> {
    pub fn new(spec: MlpSpec, rng: &mut Stream) -> Result<Self> {
        let (layout, reg) = gen_layout(&spec)?;
        Ok(Self { spec, layout, params: reg.init(rng) })
    }

    pub fn from_params(spec: MlpSpec, params: Params<T>) -> Result<Self> {
        let (layout, reg) = gen_layout(&spec)?;
        check_layout(&reg, &params)?;
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, z: Var, t: &[usize]) -> Result<Var> {
        let b = check_batch(g, x, self.spec.data_dim, t)?;
        if g.value(z).shape() != [b, self.spec.latent_dim] {
            return Err(Error::Shape(format!("latent must be ({b}, {})", self.spec.latent_dim)));
        }
        let l = &self.layout;
        let emb = g.constant(time_embedding(t, self.spec.time_embed_dim));
        let h = dense(g, p, l.input, x);
        let te = dense(g, p, l.time, emb);
        let h = g.add(h, te);
        let h = g.silu(h);
        let s = dense(g, p, l.scale, z);
        let sh = dense(g, p, l.shift, z);
        let h = g.modulate(h, s, sh);
        let h = dense(g, p, l.hidden, h);
        let h = g.silu(h);
        Ok(dense(g, p, l.output, h))
    }
}

impl<T: Scalar> Denoiser<T> for MlpGenerator<T> {
    fn predict(&self, x_t: &Tensor<T>, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let zv = g.constant(z.clone());
        let y = self.forward(&mut g, &p, x, zv, &vec![t; x_t.dim(0)])?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone)]
struct DiscLayout {
    input: Dense,
    time: Dense,
    hidden: Dense,
    output: Dense,
}

fn disc_layout(spec: &MlpSpec) -> Result<(DiscLayout, Registry)> {
    spec.validate()?;
    let mut reg = Registry::default();
    let (f, h) = (spec.data_dim, spec.hidden);
    let l = DiscLayout {
        input: reg.dense("input", 2 * f, h, 1.0),
        time: reg.dense("time", spec.time_embed_dim, h, 1.0),
        hidden: reg.dense("hidden", h, h, 1.0),
        output: reg.dense("output", h, 1, 1.0),
    };
    Ok((l, reg))
}

/// Pair discriminator over `(B, F)` inputs returning `(B, 1)` probabilities.
#[derive(Debug, Clone)]
pub struct MlpDiscriminator<T> {
    spec: MlpSpec,
    layout: DiscLayout,
    params: Params<T>,
}

impl<T: Scalar> MlpDiscriminator<T> {
    pub fn new(spec: MlpSpec, rng: &mut Stream) -> Result<Self> {
        let (layout, reg) = disc_layout(&spec)?;
        Ok(Self { spec, layout, params: reg.init(rng) })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x_prev: Var, x_t: Var, t: &[usize]) -> Result<Var> {
        if g.value(x_prev).shape() != g.value(x_t).shape() {
            return Err(Error::Shape("x_prev and x_t differ in shape".into()));
        }
        check_batch(g, x_prev, self.spec.data_dim, t)?;
        let l = &self.layout;
        let emb = g.constant(time_embedding(t, self.spec.time_embed_dim));
        let pair = g.concat1(&[x_prev, x_t]);
        let h = dense(g, p, l.input, pair);
        let te = dense(g, p, l.time, emb);
        let h = g.add(h, te);
        let h = g.silu(h);
        let h = dense(g, p, l.hidden, h);
        let h = g.silu(h);
        let logit = dense(g, p, l.output, h);
        Ok(g.sigmoid(logit))
    }
}

impl_network!(MlpGenerator);
impl_network!(MlpDiscriminator);

impl<T: Scalar> ConditionalGenerator<T> for MlpGenerator<T> {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, z: Var, t: &[usize]) -> Result<Var> {
        MlpGenerator::forward(self, g, p, x, z, t)
    }
}

impl<T: Scalar> PairDiscriminator<T> for MlpDiscriminator<T> {
    fn forward(&self, g: &mut Graph<T>, p: &[Var], x_prev: Var, x_t: Var, t: &[usize]) -> Result<Var> {
        MlpDiscriminator::forward(self, g, p, x_prev, x_t, t)
    }
}
