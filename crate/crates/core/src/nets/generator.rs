use serde::{Deserialize, Serialize};

use super::params::{Conv, Dense, Registry};
use super::{check_positive, dense, time_embedding, CondNorm, Params};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::schedule::Denoiser;
use crate::tensor::Tensor;

/// Architecture of the clean-feature predictor `G(x_t, z, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub feature_dim: usize,
    /// Width of the 1-D residual trunk; the 2-D stages use an eighth of it.
    pub base_channels: usize,
    pub n_resblocks: usize,
    pub latent_dim: usize,
    pub time_embed_dim: usize,
    /// Temporal (and feature-axis) reduction of the 2-D stages; a power of two.
    pub downsample_factor: usize,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        check_positive(
            "generator",
            &[
                ("feature_dim", self.feature_dim),
                ("base_channels", self.base_channels),
                ("n_resblocks", self.n_resblocks),
                ("latent_dim", self.latent_dim),
                ("time_embed_dim", self.time_embed_dim),
                ("downsample_factor", self.downsample_factor),
            ],
        )?;
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Spec("generator.downsample_factor must be a power of two".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Spec("generator.time_embed_dim must be even".into()));
        }
        Ok(())
    }

    pub fn channels_2d(&self) -> usize {
        (self.base_channels / 8).max(2)
    }

    fn n_down(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Feature-axis height at each 2-D level, from the input downwards.
    fn heights(&self) -> Vec<usize> {
        let mut h = vec![self.feature_dim];
        for _ in 0..self.n_down() {
            h.push(h.last().unwrap().div_ceil(2));
        }
        h
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    time: Dense,
    norm1: CondNorm,
    conv2: Conv,
    norm2: CondNorm,
}

#[derive(Debug, Clone)]
pub(super) struct Layout {
    map: Dense,
    time: Dense,
    input: Conv,
    down: Vec<(Conv, CondNorm)>,
    proj_in: Conv,
    proj_in_norm: CondNorm,
    blocks: Vec<ResBlock>,
    proj_out: Conv,
    proj_out_norm: CondNorm,
    up: Vec<(Conv, CondNorm)>,
    output: Conv,
    heights: Vec<usize>,
}

pub(super) fn layout(spec: &GeneratorSpec) -> Result<(Layout, Registry)> {
    spec.validate()?;
    let mut reg = Registry::default();
    let c2 = spec.channels_2d();
    let c1 = spec.base_channels;
    let cond = c1;
    let e = spec.time_embed_dim;
    let heights = spec.heights();
    let flat = c2 * heights.last().unwrap();

    let map = reg.dense("latent_map", spec.latent_dim, cond, 1.0);
    let time = reg.dense("time_embed", e, e, 1.0);
    let input = reg.conv("input", 1, 2 * c2, 3, 5);
    let down = (0..spec.n_down())
        .map(|i| {
            let name = format!("down{i}");
            (reg.conv(&name, c2, 2 * c2, 3, 3), CondNorm::register(&mut reg, &format!("{name}.norm"), cond, 2 * c2))
        })
        .collect();
    let proj_in = reg.conv("proj_in", flat, c1, 1, 1);
    let proj_in_norm = CondNorm::register(&mut reg, "proj_in.norm", cond, c1);
    let blocks = (0..spec.n_resblocks)
        .map(|i| {
            let name = format!("block{i}");
            ResBlock {
                conv1: reg.conv(&format!("{name}.conv1"), c1, 2 * c1, 1, 3),
                time: reg.dense(&format!("{name}.time"), e, 2 * c1, 1.0),
                norm1: CondNorm::register(&mut reg, &format!("{name}.norm1"), cond, 2 * c1),
                conv2: reg.conv(&format!("{name}.conv2"), c1, c1, 1, 3),
                norm2: CondNorm::register(&mut reg, &format!("{name}.norm2"), cond, c1),
            }
        })
        .collect();
    let proj_out = reg.conv("proj_out", c1, flat, 1, 1);
    let proj_out_norm = CondNorm::register(&mut reg, "proj_out.norm", cond, flat);
    let up = (0..spec.n_down())
        .map(|i| {
            let name = format!("up{i}");
            (reg.conv(&name, c2, 2 * c2, 3, 3), CondNorm::register(&mut reg, &format!("{name}.norm"), cond, 2 * c2))
        })
        .collect();
    let output = reg.conv("output", c2, 1, 3, 5);
    let layout = Layout {
        map,
        time,
        input,
        down,
        proj_in,
        proj_in_norm,
        blocks,
        proj_out,
        proj_out_norm,
        up,
        output,
        heights,
    };
    Ok((layout, reg))
}

/// Clean-feature predictor over `(B, Q, T)` batches.
///
/// A 2-D convolutional front end downsamples the `Q×T` plane, a 1-D
/// residual trunk processes the flattened channels, and a mirrored 2-D
/// back end restores the input shape. The latent `z` reaches the network
/// only through the modulated normalization layers; the diffusion step
/// enters as a sinusoidal embedding added inside each residual block.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    layout: Layout,
    params: Params<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: GeneratorSpec, rng: &mut Stream) -> Result<Self> {
        let (layout, reg) = layout(&spec)?;
        Ok(Self { spec, layout, params: reg.init(rng) })
    }

    pub fn from_params(spec: GeneratorSpec, params: Params<T>) -> Result<Self> {
        let (layout, reg) = layout(&spec)?;
        check_layout(&reg, &params)?;
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.spec.feature_dim {
            return Err(Error::Shape(format!(
                "generator expects (B, {}, T), got {shape:?}",
                self.spec.feature_dim
            )));
        }
        if shape[2] == 0 || shape[2] % self.spec.downsample_factor != 0 {
            return Err(Error::Shape(format!(
                "sequence length {} not divisible by downsample factor {}",
                shape[2], self.spec.downsample_factor
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `p` comes from [`Params::bind`],
    /// `x` is `(B, Q, T)`, `z` is `(B, L)` and `t` holds one step per batch entry.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, z: Var, t: &[usize]) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        self.check_input(&xs)?;
        let (b, q, len) = (xs[0], xs[1], xs[2]);
        if g.value(z).shape() != [b, self.spec.latent_dim] {
            return Err(Error::Shape(format!(
                "latent must be ({b}, {}), got {:?}",
                self.spec.latent_dim,
                g.value(z).shape()
            )));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} steps for batch of {b}", t.len())));
        }
        let l = &self.layout;
        let c2 = self.spec.channels_2d();

        let w = dense(g, p, l.map, z);
        let w = g.silu(w);
        let emb = g.constant(time_embedding(t, self.spec.time_embed_dim));
        let temb = dense(g, p, l.time, emb);
        let temb = g.silu(temb);

        let mut h = g.reshape(x, &[b, 1, q, len]);
        h = g.conv2d(h, p[l.input.w], p[l.input.b], (1, 1), (1, 2));
        h = g.glu(h);
        for (conv, norm) in &l.down {
            h = g.conv2d(h, p[conv.w], p[conv.b], (2, 2), (1, 1));
            h = norm.apply(g, p, h, w);
            h = g.glu(h);
        }
        let hd = *l.heights.last().unwrap();
        let td = len / self.spec.downsample_factor;
        h = g.reshape(h, &[b, c2 * hd, td]);
        h = g.conv1d(h, p[l.proj_in.w], p[l.proj_in.b], 0);
        h = l.proj_in_norm.apply(g, p, h, w);
        for blk in &l.blocks {
            let mut a = g.conv1d(h, p[blk.conv1.w], p[blk.conv1.b], 1);
            let tb = dense(g, p, blk.time, temb);
            a = g.add_channel(a, tb);
            a = blk.norm1.apply(g, p, a, w);
            a = g.glu(a);
            a = g.conv1d(a, p[blk.conv2.w], p[blk.conv2.b], 1);
            a = blk.norm2.apply(g, p, a, w);
            h = g.add(h, a);
        }
        h = g.conv1d(h, p[l.proj_out.w], p[l.proj_out.b], 0);
        h = l.proj_out_norm.apply(g, p, h, w);
        h = g.reshape(h, &[b, c2, hd, td]);
        for (i, (conv, norm)) in l.up.iter().enumerate() {
            let target = l.heights[l.heights.len() - 2 - i];
            h = g.upsample2(h);
            h = g.crop_rows(h, target);
            h = g.conv2d(h, p[conv.w], p[conv.b], (1, 1), (1, 1));
            h = norm.apply(g, p, h, w);
            h = g.glu(h);
        }
        h = g.conv2d(h, p[l.output.w], p[l.output.b], (1, 1), (1, 2));
        Ok(g.reshape(h, &[b, q, len]))
    }

    /// Inference on a batch `(B, Q, T)` or a single `(Q, T)` matrix, with
    /// `z` shaped `(B, L)` or `(L)` accordingly.
    pub fn predict_batch(&self, x: &Tensor<T>, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let single = x.shape().len() == 2;
        let (x, z) = if single {
            let xs = x.shape();
            (
                x.clone().reshape(&[1, xs[0], xs[1]])?,
                z.clone().reshape(&[1, z.len()])?,
            )
        } else {
            (x.clone(), z.clone())
        };
        let out_shape = if single { x.shape()[1..].to_vec() } else { x.shape().to_vec() };
        let bsz = x.dim(0);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let zv = g.constant(z);
        let y = self.forward(&mut g, &p, xv, zv, &vec![t; bsz])?;
        g.value(y).clone().reshape(&out_shape)
    }
}

impl<T: Scalar> Denoiser<T> for Generator<T> {
    fn predict(&self, x_t: &Tensor<T>, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.predict_batch(x_t, z, t)
    }
}

pub(super) fn check_layout<T: Scalar>(reg: &Registry, params: &Params<T>) -> Result<()> {
    if reg.names.as_slice() != params.names() {
        return Err(Error::Checkpoint("parameter names do not match the spec".into()));
    }
    for ((name, shape), t) in reg.names.iter().zip(&reg.shapes).zip(params.tensors()) {
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, spec needs {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}
