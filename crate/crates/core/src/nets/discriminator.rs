use serde::{Deserialize, Serialize};

use super::generator::check_layout;
use super::params::{Conv, Dense, Registry};
use super::{check_positive, dense, norm_groups, time_embedding, Params};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture of the time-dependent patch discriminator `D(x_{t-1}, x_t, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub feature_dim: usize,
    pub base_channels: usize,
    /// Number of stride-2 stages; each halves both axes (rounding up).
    pub n_layers: usize,
    pub time_embed_dim: usize,
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        check_positive(
            "discriminator",
            &[
                ("feature_dim", self.feature_dim),
                ("base_channels", self.base_channels),
                ("n_layers", self.n_layers),
                ("time_embed_dim", self.time_embed_dim),
            ],
        )?;
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Spec("discriminator.time_embed_dim must be even".into()));
        }
        Ok(())
    }

    /// Patch-grid shape `(H', W')` for a `Q×T` input:
    /// `H' = ceil(Q / 2^n)`, `W' = ceil(T / 2^n)`.
    ///
    /// Each logit sees a `(2^(n+2) + 1)`-square window of the input
    /// (3×3 kernels throughout, n stride-2 stages).
    pub fn patch_grid(&self, seq_len: usize) -> (usize, usize) {
        let mut h = self.feature_dim;
        let mut w = seq_len;
        for _ in 0..self.n_layers {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    fn channels(&self) -> Vec<usize> {
        let mut c = vec![self.base_channels];
        for _ in 0..self.n_layers {
            let next = (c.last().unwrap() * 2).min(8 * self.base_channels);
            c.push(next);
        }
        c
    }
}

#[derive(Debug, Clone)]
pub(super) struct Layout {
    time: Dense,
    input: Conv,
    stages: Vec<(Conv, Dense, usize)>,
    output: Conv,
}

pub(super) fn layout(spec: &DiscriminatorSpec) -> Result<(Layout, Registry)> {
    spec.validate()?;
    let mut reg = Registry::default();
    let e = spec.time_embed_dim;
    let ch = spec.channels();
    let time = reg.dense("time_embed", e, e, 1.0);
    let input = reg.conv("input", 2, 2 * ch[0], 3, 3);
    let stages = (0..spec.n_layers)
        .map(|i| {
            let name = format!("stage{i}");
            let conv = reg.conv(&name, ch[i], 2 * ch[i + 1], 3, 3);
            let t = reg.dense(&format!("{name}.time"), e, 2 * ch[i + 1], 1.0);
            (conv, t, norm_groups(2 * ch[i + 1]))
        })
        .collect();
    let output = reg.conv("output", *ch.last().unwrap(), 1, 3, 3);
    Ok((Layout { time, input, stages, output }, reg))
}

/// PatchGAN discriminator over channel-stacked `(x_{t-1}, x_t)` pairs,
/// emitting a grid of probabilities.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    layout: Layout,
    params: Params<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, rng: &mut Stream) -> Result<Self> {
        let (layout, reg) = layout(&spec)?;
        Ok(Self { spec, layout, params: reg.init(rng) })
    }

    pub fn from_params(spec: DiscriminatorSpec, params: Params<T>) -> Result<Self> {
        let (layout, reg) = layout(&spec)?;
        check_layout(&reg, &params)?;
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    /// Records the forward pass; returns probabilities shaped `(B, H', W')`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x_prev: Var, x_t: Var, t: &[usize]) -> Result<Var> {
        let a = g.value(x_prev).shape().to_vec();
        let b = g.value(x_t).shape().to_vec();
        if a != b {
            return Err(Error::Shape(format!("x_prev {a:?} vs x_t {b:?}")));
        }
        if a.len() != 3 || a[1] != self.spec.feature_dim || a[2] == 0 {
            return Err(Error::Shape(format!(
                "discriminator expects (B, {}, T), got {a:?}",
                self.spec.feature_dim
            )));
        }
        if t.len() != a[0] {
            return Err(Error::Shape(format!("{} steps for batch of {}", t.len(), a[0])));
        }
        let (bn, q, len) = (a[0], a[1], a[2]);
        let l = &self.layout;
        let emb = g.constant(time_embedding(t, self.spec.time_embed_dim));
        let temb = dense(g, p, l.time, emb);
        let temb = g.silu(temb);

        let u = g.reshape(x_prev, &[bn, 1, q, len]);
        let v = g.reshape(x_t, &[bn, 1, q, len]);
        let mut h = g.concat1(&[u, v]);
        h = g.conv2d(h, p[l.input.w], p[l.input.b], (1, 1), (1, 1));
        h = g.glu(h);
        for (conv, time, groups) in &l.stages {
            h = g.conv2d(h, p[conv.w], p[conv.b], (2, 2), (1, 1));
            let tb = dense(g, p, *time, temb);
            h = g.add_channel(h, tb);
            h = g.group_norm(h, *groups);
            h = g.glu(h);
        }
        h = g.conv2d(h, p[l.output.w], p[l.output.b], (1, 1), (1, 1));
        let h = g.sigmoid(h);
        let (ph, pw) = self.spec.patch_grid(len);
        Ok(g.reshape(h, &[bn, ph, pw]))
    }

    /// Inference-only evaluation on `(B, Q, T)` pairs.
    pub fn probs(&self, x_prev: &Tensor<T>, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let a = g.constant(x_prev.clone());
        let b = g.constant(x_t.clone());
        let y = self.forward(&mut g, &p, a, b, &vec![t; x_prev.shape().first().copied().unwrap_or(0)])?;
        Ok(g.value(y).clone())
    }
}
