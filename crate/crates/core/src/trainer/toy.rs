//! Diffusion-GAN on a 1-D two-mode mixture, used to probe mode coverage.

use super::{posterior_in_graph, real_pair};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::evalkit::MixtureSpec;
use crate::nets::toy::{MlpDiscriminator, MlpGenerator, MlpSpec};
use crate::objectives::{d_loss, g_adv_in_graph};
use crate::rng::{Purpose, Stream};
use crate::schedule::{sample_chain, DiffusionSchedule};
use crate::tensor::Tensor;

use super::optim::{OptState, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub net: MlpSpec,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            net: MlpSpec { data_dim: 1, hidden: 32, latent_dim: 4, time_embed_dim: 8 },
            iterations: 3000,
            batch_size: 64,
            lr: 2e-3,
            beta1: 0.5,
            seed: 0,
        }
    }
}

/// Trained toy sampler.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub generator: MlpGenerator<f64>,
    pub discriminator: MlpDiscriminator<f64>,
    pub schedule: DiffusionSchedule,
}

pub fn train_toy(cfg: &ToyConfig, data: &MixtureSpec, schedule: DiffusionSchedule) -> Result<ToyModel> {
    if cfg.net.data_dim != 1 {
        return Err(Error::Spec("the mixture toy is one-dimensional".into()));
    }
    let mut init = Stream::new(cfg.seed, Purpose::Init);
    let mut gen = MlpGenerator::<f64>::new(cfg.net, &mut init)?;
    let mut disc = MlpDiscriminator::<f64>::new(cfg.net, &mut init)?;
    let mut opt_g = OptState::new(OptimizerKind::Adam, gen.params().tensors());
    let mut opt_d = OptState::new(OptimizerKind::Adam, disc.params().tensors());
    let mut batch_rng = Stream::new(cfg.seed, Purpose::Batch);
    let mut noise = Stream::new(cfg.seed, Purpose::Noise);
    let mut latent = Stream::new(cfg.seed, Purpose::Latent);
    let mut steps = Stream::new(cfg.seed, Purpose::Timestep);
    let b = cfg.batch_size;

    for step in 0..cfg.iterations {
        let x0 = Tensor::from_fn(&[b, 1], |_| data.sample(&mut batch_rng));
        let t = steps.int_inclusive(1, schedule.steps());
        let tv = vec![t; b];
        let (real_prev, x_t_val) = real_pair(&x0, t, &schedule, &mut noise)?;

        let mut g = Graph::new();
        let pg = gen.params().bind(&mut g, true);
        let x_t = g.constant(x_t_val.clone());
        let z = g.constant(latent.normal_tensor(&[b, cfg.net.latent_dim]));
        let x0_hat = gen.forward(&mut g, &pg, x_t, z, &tv)?;
        let fake = posterior_in_graph(&mut g, x0_hat, &x_t_val, t, &schedule, &mut noise)?;

        let dl = d_loss(&disc, (&real_prev, &x_t_val), (g.value(fake), &x_t_val), &tv)?;
        opt_d.apply(disc.params_mut().tensors_mut(), &dl.grads, cfg.lr, cfg.beta1)?;

        let pd = disc.params().bind(&mut g, false);
        let (out, adv) = g_adv_in_graph(&mut g, &disc, &pd, fake, x_t, &tv)?;
        let mut grads = g.backward(&[(out, adv.grad)]);
        let gg: Vec<_> = pg.iter().map(|&v| grads.take(&g, v)).collect();
        if !(dl.value().is_finite() && adv.value.is_finite()) {
            return Err(Error::Diverged { step: step as u64, detail: "toy losses".into() });
        }
        opt_g.apply(gen.params_mut().tensors_mut(), &gg, cfg.lr, cfg.beta1)?;
    }
    Ok(ToyModel { generator: gen, discriminator: disc, schedule })
}

impl ToyModel {
    /// Draws `n` samples through the reverse chain, starting from `N(0, 1)`.
    pub fn sample(&self, n: usize, rng: &mut Stream) -> Result<Vec<f64>> {
        let start = rng.normal_tensor(&[n, 1]);
        let mut latent = rng.fork();
        let dim = self.generator.spec().latent_dim;
        let x = sample_chain(start, &self.generator, &self.schedule, || latent.normal_tensor(&[n, dim]), rng)?;
        Ok(x.into_data())
    }
}
