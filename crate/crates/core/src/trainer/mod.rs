//! Two-direction adversarial training over the diffusion chain, with
//! checkpointing and the conversion chain.
//!
//! Each step, for both directions (X→Y shown):
//! 1. sample `t`, draw a real pair `y_{t-1} ~ q(.|y_0)`, `y_t ~ q(.|y_{t-1})`;
//! 2. diffuse the source `x_t ~ q(.|x_0)`, predict `ŷ_0 = G_XY(x_t, z, t)` and
//!    sample the fake `ŷ_{t-1}` from the posterior;
//! 3. update `D_Y` on the pair losses;
//! 4. update both generators jointly on the non-saturating term against the
//!    updated discriminators, the cycle term (re-diffuse `ŷ_0` at a fresh
//!    `t'` and map back with `G_YX`) and the identity term.

mod convert;
mod optim;
pub mod toy;

pub use convert::{convert_with, Converter};
pub use optim::{adam_step, optimizer_step, OptState, OptimizerKind, ADAM_BETA2, ADAM_EPS};

use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{compute_speaker_stats, normalize_mcep, FeatureSequence, SpeakerStats};
use crate::nets::checkpoint::Checkpoint;
use crate::nets::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Params};
use crate::objectives::{d_loss, g_adv_in_graph, mean_abs, LossReport, LossWeights, Term};
use crate::rng::{Purpose, Stream, StreamState};
use crate::scalar::{cst, Scalar};
use crate::schedule::{forward_marginal_sample, forward_step_sample, DiffusionSchedule, ScheduleConfig};
use crate::tensor::Tensor;

/// Conversion direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    X2y,
    Y2x,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::X2y, Direction::Y2x];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::X2y => "x2y",
            Direction::Y2x => "y2x",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x2y" => Ok(Direction::X2y),
            "y2x" => Ok(Direction::Y2x),
            other => Err(Error::Config(format!("direction must be x2y or y2x, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Frames per training crop.
    pub seq_len: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    /// Fraction of `iterations` after which the identity weight drops to 0.
    pub identity_anneal: f64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            seq_len: 64,
            lr_g: 2e-2,
            lr_d: 2e-2,
            momentum: 0.5,
            optimizer: OptimizerKind::Sgd,
            weights: LossWeights::default(),
            identity_anneal: 0.2,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        let w = self.weights;
        if !(w.cycle.is_finite() && w.cycle >= 0.0 && w.identity.is_finite() && w.identity >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.identity_anneal) {
            return bad("identity_anneal must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Loss weights in effect at `step`.
    pub fn weights_at(&self, step: u64) -> LossWeights {
        let cutoff = (self.identity_anneal * self.iterations as f64).ceil() as u64;
        let identity = if step < cutoff { self.weights.identity } else { 0.0 };
        LossWeights { identity, ..self.weights }
    }
}

/// Architectures of the four networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

/// Named random streams of a run.
#[derive(Debug, Clone)]
pub struct TrainRng {
    pub batch: Stream,
    pub noise: Stream,
    pub latent: Stream,
    pub timestep: Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RngStates {
    batch: StreamState,
    noise: StreamState,
    latent: StreamState,
    timestep: StreamState,
}

impl TrainRng {
    pub fn new(seed: u64) -> Self {
        Self {
            batch: Stream::new(seed, Purpose::Batch),
            noise: Stream::new(seed, Purpose::Noise),
            latent: Stream::new(seed, Purpose::Latent),
            timestep: Stream::new(seed, Purpose::Timestep),
        }
    }

    fn states(&self) -> RngStates {
        RngStates {
            batch: self.batch.state(),
            noise: self.noise.state(),
            latent: self.latent.state(),
            timestep: self.timestep.state(),
        }
    }

    fn restore(s: RngStates) -> Self {
        Self {
            batch: Stream::restore(s.batch),
            noise: Stream::restore(s.noise),
            latent: Stream::restore(s.latent),
            timestep: Stream::restore(s.timestep),
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub g_xy: Generator<T>,
    pub g_yx: Generator<T>,
    pub d_x: Discriminator<T>,
    pub d_y: Discriminator<T>,
    /// Optimizer moments in the order `g_xy, g_yx, d_x, d_y`.
    pub opt: [OptState<T>; 4],
    pub step: u64,
    pub rng: TrainRng,
}

const NET_NAMES: [&str; 4] = ["g_xy", "g_yx", "d_x", "d_y"];

impl<T: Scalar> TrainState<T> {
    pub fn new(spec: &ModelSpec, config: &TrainConfig) -> Result<Self> {
        let mut init = Stream::new(config.seed, Purpose::Init);
        let g_xy = Generator::new(spec.generator, &mut init)?;
        let g_yx = Generator::new(spec.generator, &mut init)?;
        let d_x = Discriminator::new(spec.discriminator, &mut init)?;
        let d_y = Discriminator::new(spec.discriminator, &mut init)?;
        let k = config.optimizer;
        let opt = [
            OptState::new(k, g_xy.params().tensors()),
            OptState::new(k, g_yx.params().tensors()),
            OptState::new(k, d_x.params().tensors()),
            OptState::new(k, d_y.params().tensors()),
        ];
        Ok(Self { g_xy, g_yx, d_x, d_y, opt, step: 0, rng: TrainRng::new(config.seed) })
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec { generator: *self.g_xy.spec(), discriminator: *self.d_x.spec() }
    }

    fn params(&self) -> [&Params<T>; 4] {
        [self.g_xy.params(), self.g_yx.params(), self.d_x.params(), self.d_y.params()]
    }

    pub fn generator(&self, dir: Direction) -> &Generator<T> {
        match dir {
            Direction::X2y => &self.g_xy,
            Direction::Y2x => &self.g_yx,
        }
    }
}

/// Fixed inputs of a run: configuration, schedule, normalization
/// statistics and the normalized training utterances.
#[derive(Debug, Clone)]
pub struct TrainContext<T> {
    pub config: TrainConfig,
    pub schedule_config: ScheduleConfig,
    pub schedule: DiffusionSchedule,
    pub stats_x: SpeakerStats,
    pub stats_y: SpeakerStats,
    data_x: Vec<Tensor<T>>,
    data_y: Vec<Tensor<T>>,
}

fn normalized<T: Scalar>(corpus: &[FeatureSequence<T>], stats: &SpeakerStats, seq_len: usize, who: &str) -> Result<Vec<Tensor<T>>> {
    if corpus.is_empty() {
        return Err(Error::Corpus(format!("corpus {who} is empty")));
    }
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.frames() < seq_len {
                return Err(Error::Corpus(format!(
                    "corpus {who} utterance {i} has {} frames, fewer than seq_len {seq_len}",
                    s.frames()
                )));
            }
            normalize_mcep(s.mcep(), stats)
        })
        .collect()
}

impl<T: Scalar> TrainContext<T> {
    /// Computes statistics from the corpora.
    pub fn new(
        config: TrainConfig,
        schedule_config: ScheduleConfig,
        corpus_x: &[FeatureSequence<T>],
        corpus_y: &[FeatureSequence<T>],
    ) -> Result<Self> {
        let stats_x = compute_speaker_stats(corpus_x)?;
        let stats_y = compute_speaker_stats(corpus_y)?;
        Self::with_stats(config, schedule_config, corpus_x, corpus_y, stats_x, stats_y)
    }

    pub fn with_stats(
        config: TrainConfig,
        schedule_config: ScheduleConfig,
        corpus_x: &[FeatureSequence<T>],
        corpus_y: &[FeatureSequence<T>],
        stats_x: SpeakerStats,
        stats_y: SpeakerStats,
    ) -> Result<Self> {
        config.validate()?;
        let schedule = schedule_config.build()?;
        let data_x = normalized(corpus_x, &stats_x, config.seq_len, "X")?;
        let data_y = normalized(corpus_y, &stats_y, config.seq_len, "Y")?;
        if data_x[0].dim(0) != data_y[0].dim(0) {
            return Err(Error::Corpus("the two corpora differ in feature order".into()));
        }
        Ok(Self { config, schedule_config, schedule, stats_x, stats_y, data_x, data_y })
    }

    pub fn order(&self) -> usize {
        self.data_x[0].dim(0)
    }

    /// Draws a `(B, Q, seq_len)` batch of random crops.
    pub fn sample_batch(&self, dir: Direction, rng: &mut Stream) -> Result<Tensor<T>> {
        let data = match dir {
            Direction::X2y => &self.data_x,
            Direction::Y2x => &self.data_y,
        };
        let len = self.config.seq_len;
        let crops = (0..self.config.batch_size)
            .map(|_| {
                let u = &data[rng.int_inclusive(0, data.len() - 1)];
                let (q, t) = (u.dim(0), u.dim(1));
                let start = rng.int_inclusive(0, t - len);
                let rows = (0..q).flat_map(|d| u.data()[d * t + start..d * t + start + len].iter().copied());
                Tensor::new(vec![q, len], rows.collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&crops)
    }
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) | Error::Numerical(detail) => Error::Diverged { step, detail },
        other => other,
    }
}

fn check_grads<T: Scalar>(grads: &[Tensor<T>], params: &Params<T>, who: &str, step: u64) -> Result<()> {
    for (g, name) in grads.iter().zip(params.names()) {
        if !g.is_finite() {
            return Err(Error::Diverged { step, detail: format!("gradient of {who}/{name}") });
        }
    }
    Ok(())
}

/// Uniform step in `1..=T`.
fn sample_t(sched: &DiffusionSchedule, rng: &mut Stream) -> usize {
    rng.int_inclusive(1, sched.steps())
}

/// Ancestral forward sample of `(x_{t-1}, x_t)` from clean `x0`.
pub fn real_pair<T: Scalar>(x0: &Tensor<T>, t: usize, sched: &DiffusionSchedule, rng: &mut Stream) -> Result<(Tensor<T>, Tensor<T>)> {
    sched.check_t(t)?;
    let prev = if t == 1 { x0.clone() } else { forward_marginal_sample(x0, t - 1, sched, rng)? };
    let xt = forward_step_sample(&prev, t, sched, rng)?;
    Ok((prev, xt))
}

/// Records `x_{t-1} = c0 * x0_hat + c_t * x_t + sigma * eps` on the graph.
pub fn posterior_in_graph<T: Scalar>(
    g: &mut Graph<T>,
    x0_hat: Var,
    x_t: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<Var> {
    let (c0, ct, var) = sched.posterior_coefs(t)?;
    let eps: Tensor<T> = rng.normal_tensor(x_t.shape());
    let (ct, sd) = (cst::<T>(ct), cst::<T>(var.sqrt()));
    let offset = x_t.zip_map(&eps, |x, e| ct * x + sd * e);
    Ok(g.affine(x0_hat, cst(c0), Some(&offset)))
}

/// Records `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` on the graph.
pub fn marginal_in_graph<T: Scalar>(g: &mut Graph<T>, x0: Var, t: usize, sched: &DiffusionSchedule, rng: &mut Stream) -> Result<Var> {
    sched.check_t(t)?;
    let eps: Tensor<T> = rng.normal_tensor(g.value(x0).shape());
    let s = cst::<T>(sched.one_minus_alpha_bar(t).sqrt());
    let offset = eps.map(|e| s * e);
    Ok(g.affine(x0, cst(sched.alpha_bar(t).sqrt()), Some(&offset)))
}

fn latent<T: Scalar>(rng: &mut Stream, batch: usize, dim: usize) -> Tensor<T> {
    rng.normal_tensor(&[batch, dim])
}

/// Generator-side records of one direction, built before the
/// discriminator update.
struct DirectionPass<T> {
    t: usize,
    x_t: Var,
    fake_prev: Var,
    cycle: (Var, Term<T>),
    identity: Option<(Var, Term<T>)>,
    real: (Tensor<T>, Tensor<T>),
}

/// One training step on normalized batches `(B, Q, seq_len)`. Returns the
/// X→Y and Y→X reports.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<T>,
    batch_x: &Tensor<T>,
    batch_y: &Tensor<T>,
) -> Result<[LossReport; 2]> {
    let step = state.step;
    if batch_x.shape() != batch_y.shape() {
        return Err(Error::Shape(format!("batches differ: {:?} vs {:?}", batch_x.shape(), batch_y.shape())));
    }
    state.g_xy.check_input(batch_x.shape())?;
    let sched = &ctx.schedule;
    let cfg = &ctx.config;
    let weights = cfg.weights_at(step);
    let bsz = batch_x.dim(0);
    let latent_dim = state.g_xy.spec().latent_dim;

    let mut g = Graph::new();
    let p_xy = state.g_xy.params().bind(&mut g, true);
    let p_yx = state.g_yx.params().bind(&mut g, true);

    let mut passes = Vec::with_capacity(2);
    for dir in Direction::BOTH {
        let (src, tgt) = match dir {
            Direction::X2y => (batch_x, batch_y),
            Direction::Y2x => (batch_y, batch_x),
        };
        let (gen, back, pg, pb) = match dir {
            Direction::X2y => (&state.g_xy, &state.g_yx, &p_xy, &p_yx),
            Direction::Y2x => (&state.g_yx, &state.g_xy, &p_yx, &p_xy),
        };
        let rng = &mut state.rng;
        let t = sample_t(sched, &mut rng.timestep);
        let t_cyc = sample_t(sched, &mut rng.timestep);
        let tv = vec![t; bsz];
        let real = real_pair(tgt, t, sched, &mut rng.noise)?;

        let x_t_val = forward_marginal_sample(src, t, sched, &mut rng.noise)?;
        let x_t = g.constant(x_t_val.clone());
        let z = g.constant(latent(&mut rng.latent, bsz, latent_dim));
        let x0_hat = gen.forward(&mut g, pg, x_t, z, &tv)?;
        let fake_prev = posterior_in_graph(&mut g, x0_hat, &x_t_val, t, sched, &mut rng.noise)?;

        let y_cyc = marginal_in_graph(&mut g, x0_hat, t_cyc, sched, &mut rng.noise)?;
        let z2 = g.constant(latent(&mut rng.latent, bsz, latent_dim));
        let x_back = back.forward(&mut g, pb, y_cyc, z2, &vec![t_cyc; bsz])?;
        let cyc = mean_abs(g.value(x_back), src).map_err(|e| diverged(step, e))?;

        let identity = if weights.identity > 0.0 {
            let y_t = g.constant(forward_marginal_sample(tgt, t, sched, &mut rng.noise)?);
            let z3 = g.constant(latent(&mut rng.latent, bsz, latent_dim));
            let y_hat = gen.forward(&mut g, pg, y_t, z3, &tv)?;
            let id = mean_abs(g.value(y_hat), tgt).map_err(|e| diverged(step, e))?;
            Some((y_hat, id))
        } else {
            None
        };
        passes.push(DirectionPass { t, x_t, fake_prev, cycle: (x_back, cyc), identity, real });
    }

    // Discriminator updates on detached fakes. D_Y judges X→Y, D_X judges Y→X.
    let mut d_parts = Vec::with_capacity(2);
    for (dir, pass) in Direction::BOTH.into_iter().zip(&passes) {
        let (disc, idx) = match dir {
            Direction::X2y => (&mut state.d_y, 3),
            Direction::Y2x => (&mut state.d_x, 2),
        };
        let tv = vec![pass.t; bsz];
        let fake = (g.value(pass.fake_prev), g.value(pass.x_t));
        let dl = d_loss(&*disc, (&pass.real.0, &pass.real.1), fake, &tv).map_err(|e| diverged(step, e))?;
        check_grads(&dl.grads, disc.params(), NET_NAMES[idx], step)?;
        state.opt[idx].apply(disc.params_mut().tensors_mut(), &dl.grads, cfg.lr_d, cfg.momentum)?;
        d_parts.push((dl.real, dl.fake));
    }

    // Joint generator update against the updated discriminators.
    let mut seeds = Vec::new();
    let mut reports = Vec::with_capacity(2);
    for ((dir, pass), (d_real, d_fake)) in Direction::BOTH.into_iter().zip(&passes).zip(d_parts) {
        let disc = match dir {
            Direction::X2y => &state.d_y,
            Direction::Y2x => &state.d_x,
        };
        let dp = disc.params().bind(&mut g, false);
        let tv = vec![pass.t; bsz];
        let (out, adv) = g_adv_in_graph(&mut g, disc, &dp, pass.fake_prev, pass.x_t, &tv).map_err(|e| diverged(step, e))?;
        seeds.push((out, adv.grad.clone()));
        seeds.push((pass.cycle.0, pass.cycle.1.weighted(weights.cycle)));
        let g_id = match &pass.identity {
            Some((v, term)) => {
                seeds.push((*v, term.weighted(weights.identity)));
                term.value
            }
            None => 0.0,
        };
        let report = LossReport::assemble(d_real, d_fake, adv.value, pass.cycle.1.value, g_id, weights, pass.t);
        if !report.is_finite() {
            return Err(Error::Diverged { step, detail: format!("{dir} losses {report:?}") });
        }
        reports.push(report);
    }
    let mut grads = g.backward(&seeds);
    let g_xy_grads: Vec<_> = p_xy.iter().map(|&v| grads.take(&g, v)).collect();
    let g_yx_grads: Vec<_> = p_yx.iter().map(|&v| grads.take(&g, v)).collect();
    check_grads(&g_xy_grads, state.g_xy.params(), "g_xy", step)?;
    check_grads(&g_yx_grads, state.g_yx.params(), "g_yx", step)?;
    state.opt[0].apply(state.g_xy.params_mut().tensors_mut(), &g_xy_grads, cfg.lr_g, cfg.momentum)?;
    state.opt[1].apply(state.g_yx.params_mut().tensors_mut(), &g_yx_grads, cfg.lr_g, cfg.momentum)?;
    state.step += 1;
    Ok([reports[0], reports[1]])
}

/// Draws both batches and performs one step.
pub fn train_iteration<T: Scalar>(state: &mut TrainState<T>, ctx: &TrainContext<T>) -> Result<[LossReport; 2]> {
    let bx = ctx.sample_batch(Direction::X2y, &mut state.rng.batch)?;
    let by = ctx.sample_batch(Direction::Y2x, &mut state.rng.batch)?;
    train_step(state, ctx, &bx, &by)
}

pub const CHECKPOINT_KIND: &str = "dgvc-train";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    step: u64,
    train: TrainConfig,
    schedule: ScheduleConfig,
    model: ModelSpec,
    stats_x: SpeakerStats,
    stats_y: SpeakerStats,
    rng: RngStates,
    optimizer_steps: [u64; 4],
}

/// Serializes the full training state.
pub fn state_checkpoint<T: Scalar>(state: &TrainState<T>, ctx: &TrainContext<T>) -> Checkpoint<T> {
    let meta = TrainMeta {
        kind: CHECKPOINT_KIND.into(),
        step: state.step,
        train: ctx.config.clone(),
        schedule: ctx.schedule_config,
        model: state.model_spec(),
        stats_x: ctx.stats_x.clone(),
        stats_y: ctx.stats_y.clone(),
        rng: state.rng.states(),
        optimizer_steps: state.opt.each_ref().map(|o| o.steps),
    };
    let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("meta serializes"));
    for (name, p) in NET_NAMES.iter().zip(state.params()) {
        ck.push_params(name, p);
    }
    for ((name, p), o) in NET_NAMES.iter().zip(state.params()).zip(&state.opt) {
        let names = p.names().to_vec();
        ck.push_params(&format!("opt/{name}/m"), &Params::new(names.clone(), o.m.clone()).expect("moments"));
        if !o.v.is_empty() {
            ck.push_params(&format!("opt/{name}/v"), &Params::new(names, o.v.clone()).expect("moments"));
        }
    }
    ck
}

/// Metadata common to training checkpoints, readable without knowing the
/// full state layout.
#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub step: u64,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelSpec,
    pub stats_x: SpeakerStats,
    pub stats_y: SpeakerStats,
}

fn meta_of<T: Scalar>(ck: &Checkpoint<T>) -> Result<TrainMeta> {
    let meta: TrainMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("not a training checkpoint (kind {:?})", meta.kind)));
    }
    Ok(meta)
}

pub fn checkpoint_info<T: Scalar>(ck: &Checkpoint<T>) -> Result<CheckpointInfo> {
    let m = meta_of(ck)?;
    Ok(CheckpointInfo { step: m.step, train: m.train, schedule: m.schedule, model: m.model, stats_x: m.stats_x, stats_y: m.stats_y })
}

/// Rebuilds a state from a checkpoint written by [`state_checkpoint`].
pub fn restore_state<T: Scalar>(ck: &Checkpoint<T>) -> Result<TrainState<T>> {
    let meta = meta_of(ck)?;
    let spec = meta.model;
    let g_xy = Generator::from_params(spec.generator, ck.params("g_xy")?)?;
    let g_yx = Generator::from_params(spec.generator, ck.params("g_yx")?)?;
    let d_x = Discriminator::from_params(spec.discriminator, ck.params("d_x")?)?;
    let d_y = Discriminator::from_params(spec.discriminator, ck.params("d_y")?)?;
    let kind = meta.train.optimizer;
    let load = |name: &str, which: &str, like: &Params<T>| -> Result<Vec<Tensor<T>>> {
        let p = ck.params(&format!("opt/{name}/{which}"))?;
        p.check_compatible(like)?;
        Ok(p.tensors().to_vec())
    };
    let nets: [&Params<T>; 4] = [g_xy.params(), g_yx.params(), d_x.params(), d_y.params()];
    let mut opt = Vec::with_capacity(4);
    for (i, (name, p)) in NET_NAMES.iter().zip(nets).enumerate() {
        let v = if kind == OptimizerKind::Adam { load(name, "v", p)? } else { Vec::new() };
        opt.push(OptState { kind, m: load(name, "m", p)?, v, steps: meta.optimizer_steps[i] });
    }
    let opt: [OptState<T>; 4] = opt.try_into().map_err(|_| Error::Checkpoint("optimizer state".into()))?;
    Ok(TrainState { g_xy, g_yx, d_x, d_y, opt, step: meta.step, rng: TrainRng::restore(meta.rng) })
}

/// Where [`train_loop`] writes and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for checkpoints and the metrics log; nothing is written
    /// when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub context: TrainContext<T>,
    /// Reports of the steps run by this invocation, `[x2y, y2x]` per step.
    pub reports: Vec<[LossReport; 2]>,
    pub final_checkpoint: Option<PathBuf>,
    pub seconds: f64,
}

pub const METRICS_FILE: &str = "metrics.ndjson";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:07}.dgck"))
}

pub const FINAL_CHECKPOINT: &str = "final.dgck";

#[derive(Serialize)]
struct MetricsRecord<'a> {
    step: u64,
    direction: &'a str,
    #[serde(flatten)]
    report: &'a LossReport,
    wall_seconds: f64,
}

/// Runs training to `config.iterations` steps, resuming when asked.
///
/// On resume the statistics, schedule and architecture come from the
/// checkpoint; they must agree with the arguments.
pub fn train_loop<T: Scalar>(
    config: &TrainConfig,
    schedule: &ScheduleConfig,
    model: &ModelSpec,
    corpus_x: &[FeatureSequence<T>],
    corpus_y: &[FeatureSequence<T>],
    opts: &RunOptions,
) -> Result<TrainOutcome<T>> {
    let started = Instant::now();
    let (mut state, ctx) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            let meta = meta_of(&ck)?;
            if meta.schedule != *schedule {
                return Err(Error::Checkpoint("schedule differs from the checkpoint's".into()));
            }
            if meta.model != *model {
                return Err(Error::Checkpoint("architecture differs from the checkpoint's".into()));
            }
            let same_run = TrainConfig { iterations: config.iterations, checkpoint_every: config.checkpoint_every, ..meta.train.clone() };
            if same_run != *config {
                return Err(Error::Checkpoint("training configuration differs from the checkpoint's".into()));
            }
            let ctx = TrainContext::with_stats(config.clone(), *schedule, corpus_x, corpus_y, meta.stats_x, meta.stats_y)?;
            (restore_state(&ck)?, ctx)
        }
        None => {
            let ctx = TrainContext::new(config.clone(), *schedule, corpus_x, corpus_y)?;
            (TrainState::new(model, config)?, ctx)
        }
    };
    if model.generator.feature_dim != ctx.order() || model.discriminator.feature_dim != ctx.order() {
        return Err(Error::Spec(format!("networks expect order {} but the corpus has {}", model.generator.feature_dim, ctx.order())));
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let mut reports = Vec::new();
    while state.step < config.iterations {
        let step = state.step;
        let r = train_iteration(&mut state, &ctx)?;
        if let Some((w, path)) = log.as_mut() {
            let wall = started.elapsed().as_secs_f64();
            for (dir, rep) in Direction::BOTH.iter().zip(&r) {
                let rec = MetricsRecord { step, direction: dir.as_str(), report: rep, wall_seconds: wall };
                serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::io(&*path, e.into()))?;
                w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            }
        }
        if step % 100 == 0 {
            log::info!("step {step}: total_g {:.4}/{:.4} total_d {:.4}/{:.4}", r[0].total_g, r[1].total_g, r[0].total_d, r[1].total_d);
        }
        reports.push(r);
        if let Some(dir) = &opts.out_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < config.iterations {
                state_checkpoint(&state, &ctx).save(&checkpoint_path(dir, state.step))?;
            }
        }
    }
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    let final_checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            state_checkpoint(&state, &ctx).save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { state, context: ctx, reports, final_checkpoint, seconds: started.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{make_synthetic_corpus, CorpusConfig};
    use crate::nets::Preset;

    fn tiny_model(q: usize) -> ModelSpec {
        let mut generator = Preset::Tiny.generator(q);
        generator.base_channels = 8;
        generator.n_resblocks = 1;
        generator.latent_dim = 4;
        generator.time_embed_dim = 4;
        let mut discriminator = Preset::Tiny.discriminator(q);
        discriminator.time_embed_dim = 4;
        discriminator.base_channels = 2;
        ModelSpec { generator, discriminator }
    }

    fn setup(lr: f64) -> (TrainState<f64>, TrainContext<f64>) {
        let corpus_cfg = CorpusConfig { order: 6, n_train: 3, n_test: 0, frames: 24, ..CorpusConfig::default() };
        let c = make_synthetic_corpus::<f64>(&corpus_cfg, &mut Stream::new(1, Purpose::Corpus)).unwrap();
        let cfg = TrainConfig { batch_size: 2, seq_len: 8, lr_g: lr, lr_d: lr, iterations: 10, ..TrainConfig::default() };
        let ctx = TrainContext::new(cfg.clone(), ScheduleConfig::default(), &c.train_x, &c.train_y).unwrap();
        (TrainState::new(&tiny_model(6), &cfg).unwrap(), ctx)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (mut st, ctx) = setup(0.0);
        let before = st.clone();
        for _ in 0..2 {
            let r = train_iteration(&mut st, &ctx).unwrap();
            assert!(r.iter().all(LossReport::is_finite));
        }
        for (a, b) in st.params().iter().zip(before.params()) {
            assert_eq!(*a, b);
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn identical_runs_identical_reports() {
        let run = || {
            let (mut st, ctx) = setup(1e-3);
            (0..3).map(|_| train_iteration(&mut st, &ctx).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn discriminator_step_leaves_generators_alone() {
        let (mut st, ctx) = setup(1e-3);
        let cfg = TrainConfig { lr_g: 0.0, ..ctx.config.clone() };
        let ctx = TrainContext { config: cfg, ..ctx };
        let g_before = (st.g_xy.params().clone(), st.g_yx.params().clone());
        let d_before = st.d_x.params().clone();
        train_iteration(&mut st, &ctx).unwrap();
        assert_eq!((st.g_xy.params().clone(), st.g_yx.params().clone()), g_before);
        assert_ne!(*st.d_x.params(), d_before);
    }

    #[test]
    fn mismatched_batches_rejected_before_update() {
        let (mut st, ctx) = setup(1e-3);
        let before = st.clone();
        let bx = Tensor::zeros(&[2, 6, 8]);
        let by = Tensor::zeros(&[2, 6, 16]);
        assert!(matches!(train_step(&mut st, &ctx, &bx, &by), Err(Error::Shape(_))));
        assert_eq!(st.step, before.step);
        assert_eq!(*st.d_y.params(), *before.d_y.params());
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let (mut st, ctx) = setup(1e-3);
        train_iteration(&mut st, &ctx).unwrap();
        let bytes = state_checkpoint(&st, &ctx).to_bytes();
        let mut resumed = restore_state(&Checkpoint::<f64>::from_bytes(&bytes).unwrap()).unwrap();
        let a: Vec<_> = (0..3).map(|_| train_iteration(&mut st, &ctx).unwrap()).collect();
        let b: Vec<_> = (0..3).map(|_| train_iteration(&mut resumed, &ctx).unwrap()).collect();
        assert_eq!(a, b);
        for (x, y) in st.params().iter().zip(resumed.params()) {
            assert_eq!(*x, y);
        }
    }

    #[test]
    fn identity_anneals_off() {
        let cfg = TrainConfig { iterations: 100, ..TrainConfig::default() };
        assert_eq!(cfg.weights_at(19).identity, 5.0);
        assert_eq!(cfg.weights_at(20).identity, 0.0);
        assert_eq!(cfg.weights_at(20).cycle, 10.0);
    }
}
