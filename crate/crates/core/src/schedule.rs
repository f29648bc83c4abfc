//! Closed-form diffusion math: forward noising, marginals, the reverse-chain
//! posterior, and the few-step sampling helpers.
//!
//! Step indices are 1-based (`t = 1..=T`); `t = 0` denotes clean data and
//! `alpha_bar(0) = 1`. All schedule quantities are kept in `f64` whatever
//! the model precision, and `1 - alpha_bar` is computed through
//! `expm1`/`ln_1p` so small betas keep their significance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

/// Minimum terminal noise fraction `1 - alpha_bar(T)` accepted by the
/// checked constructors.
pub const TERMINAL_NOISE_MIN: f64 = 0.99;
pub const MAX_STEPS: usize = 1000;

/// Schedule settings as they appear in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_diff: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_diff: 4, beta_min: 0.1, beta_max: 0.95 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.t_diff, self.beta_min, self.beta_max)
    }
}

/// Immutable variance schedule with its derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    one_minus_alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly interpolated betas from `beta_min` (t = 1) to `beta_max`
    /// (t = T). A single-step schedule uses `beta_max`.
    pub fn linear(t_diff: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min.is_finite() && beta_max.is_finite()) {
            return Err(Error::Schedule("betas must be finite".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max <= 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_min <= beta_max <= 1, got {beta_min}, {beta_max}"
            )));
        }
        check_len(t_diff)?;
        let betas = if t_diff == 1 {
            vec![beta_max]
        } else {
            (0..t_diff)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_diff - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Explicit betas in `(0, 1]`, with the terminal-noise check enforced.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        check_len(betas.len())?;
        for (i, &b) in betas.iter().enumerate() {
            if !b.is_finite() || b <= 0.0 || b > 1.0 {
                return Err(Error::Schedule(format!("beta[{}] = {b} outside (0, 1]", i + 1)));
            }
        }
        let s = Self::build(betas)?;
        let terminal = *s.one_minus_alpha_bars.last().unwrap();
        if terminal < TERMINAL_NOISE_MIN {
            return Err(Error::Schedule(format!(
                "terminal noise 1 - alpha_bar(T) = {terminal:.6} below {TERMINAL_NOISE_MIN}"
            )));
        }
        Ok(s)
    }

    /// Betas in `[0, 1]` without the terminal-noise requirement. Meant for
    /// limit checks and diagnostics, not for training.
    pub fn without_terminal_check(betas: Vec<f64>) -> Result<Self> {
        check_len(betas.len())?;
        for (i, &b) in betas.iter().enumerate() {
            if !b.is_finite() || !(0.0..=1.0).contains(&b) {
                return Err(Error::Schedule(format!("beta[{}] = {b} outside [0, 1]", i + 1)));
            }
        }
        Self::build(betas)
    }

    fn build(betas: Vec<f64>) -> Result<Self> {
        let t_max = betas.len();
        if let Some(i) = betas[..t_max - 1].iter().position(|&b| b >= 1.0) {
            return Err(Error::Schedule(format!(
                "beta[{}] = 1 before the final step collapses alpha_bar",
                i + 1
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut log_ab = 0.0;
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut one_minus = Vec::with_capacity(t_max);
        for &b in &betas {
            log_ab += (-b).ln_1p();
            alpha_bars.push(log_ab.exp());
            one_minus.push(-log_ab.exp_m1());
        }
        let posterior_vars = (0..t_max)
            .map(|i| {
                let prev = if i == 0 { 0.0 } else { one_minus[i - 1] };
                if i == 0 || one_minus[i] == 0.0 {
                    0.0
                } else {
                    prev / one_minus[i] * betas[i]
                }
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars, one_minus_alpha_bars: one_minus, posterior_vars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange { t, t_max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `1 - alpha_bar(t)`, accurate for tiny betas.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.one_minus_alpha_bars[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    /// Coefficients `(c_x0, c_xt, var)` of the reverse posterior
    /// `q(x_{t-1} | x_t, x_0) = N(c_x0 x_0 + c_xt x_t, var)`.
    pub fn posterior_coefs(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        let denom = self.one_minus_alpha_bar(t);
        if !(denom > f64::MIN_POSITIVE) {
            return Err(Error::Numerical(format!(
                "1 - alpha_bar({t}) = {denom:e} underflows the posterior"
            )));
        }
        let c0 = self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom;
        let ct = self.alpha(t).sqrt() * self.one_minus_alpha_bar(t - 1) / denom;
        Ok((c0, ct, self.posterior_var(t)))
    }
}

fn check_len(t_diff: usize) -> Result<()> {
    if t_diff == 0 || t_diff > MAX_STEPS {
        Err(Error::Schedule(format!("T_diff = {t_diff} outside 1..={MAX_STEPS}")))
    } else {
        Ok(())
    }
}

fn ensure_finite<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn combine<T: Scalar>(a: f64, x: &Tensor<T>, b: f64, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (a, b) = (cst::<T>(a), cst::<T>(b));
    Ok(x.zip_map(y, |u, v| a * u + b * v))
}

/// One forward transition with caller-supplied noise:
/// `sqrt(1 - beta_t) x_prev + sqrt(beta_t) eps`.
pub fn forward_step_with_noise<T: Scalar>(
    x_prev: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    ensure_finite(x_prev, "x_prev")?;
    combine(sched.alpha(t).sqrt(), x_prev, sched.beta(t).sqrt(), eps)
}

pub fn forward_step_sample<T: Scalar>(
    x_prev: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let eps = rng.normal_tensor(x_prev.shape());
    forward_step_with_noise(x_prev, t, sched, &eps)
}

/// Closed-form marginal with caller-supplied noise:
/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_marginal_with_noise<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    combine(sched.alpha_bar(t).sqrt(), x0, sched.one_minus_alpha_bar(t).sqrt(), eps)
}

pub fn forward_marginal_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let eps = rng.normal_tensor(x0.shape());
    forward_marginal_with_noise(x0, t, sched, &eps)
}

/// Mean and variance of `q(x_{t-1} | x_t, x_0 = x0_hat)`.
pub fn posterior_params<T: Scalar>(
    x0_hat: &Tensor<T>,
    x_t: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<(Tensor<T>, f64)> {
    let (c0, ct, var) = sched.posterior_coefs(t)?;
    Ok((combine(c0, x0_hat, ct, x_t)?, var))
}

/// Draws `x_{t-1}` from the posterior with caller-supplied noise.
pub fn posterior_sample_with_noise<T: Scalar>(
    x0_hat: &Tensor<T>,
    x_t: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (mean, var) = posterior_params(x0_hat, x_t, t, sched)?;
    if var == 0.0 {
        return Ok(mean);
    }
    combine(1.0, &mean, var.sqrt(), eps)
}

/// A network predicting clean features from `(x_t, z, t)`.
pub trait Denoiser<T: Scalar> {
    fn predict(&self, x_t: &Tensor<T>, z: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> Denoiser<T> for F
where
    F: Fn(&Tensor<T>, &Tensor<T>, usize) -> Result<Tensor<T>>,
{
    fn predict(&self, x_t: &Tensor<T>, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(x_t, z, t)
    }
}

/// One reverse step with caller-supplied posterior noise. Returns
/// `(x_{t-1}, x0_hat)`; at `t = 1` the output is `x0_hat` itself.
pub fn denoise_step_with_noise<T: Scalar, G: Denoiser<T> + ?Sized>(
    x_t: &Tensor<T>,
    t: usize,
    gen: &G,
    z: &Tensor<T>,
    sched: &DiffusionSchedule,
    eps: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    sched.check_t(t)?;
    let x0_hat = gen.predict(x_t, z, t)?;
    if x0_hat.shape() != x_t.shape() {
        return Err(Error::Shape(format!(
            "generator returned {:?} for input {:?}",
            x0_hat.shape(),
            x_t.shape()
        )));
    }
    ensure_finite(&x0_hat, &format!("generator prediction at t={t}"))?;
    if t == 1 {
        return Ok((x0_hat.clone(), x0_hat));
    }
    let x_prev = posterior_sample_with_noise(&x0_hat, x_t, t, sched, eps)?;
    Ok((x_prev, x0_hat))
}

pub fn denoise_step<T: Scalar, G: Denoiser<T> + ?Sized>(
    x_t: &Tensor<T>,
    t: usize,
    gen: &G,
    z: &Tensor<T>,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<(Tensor<T>, Tensor<T>)> {
    sched.check_t(t)?;
    let eps = rng.normal_tensor(x_t.shape());
    denoise_step_with_noise(x_t, t, gen, z, sched, &eps)
}

/// Runs the full reverse chain from `x_T`, drawing a fresh latent at every
/// step from `latent`.
pub fn sample_chain<T: Scalar, G: Denoiser<T> + ?Sized>(
    x_start: Tensor<T>,
    gen: &G,
    sched: &DiffusionSchedule,
    mut latent: impl FnMut() -> Tensor<T>,
    rng: &mut Stream,
) -> Result<Tensor<T>> {
    let mut x = x_start;
    for t in (1..=sched.steps()).rev() {
        let z = latent();
        x = denoise_step(&x, t, gen, &z, sched, rng)?.0;
    }
    Ok(x)
}

/// Baseline Gaussian reverse step `mu(x_t, t) + sigma_t eps` with the
/// variance fixed to the posterior variance.
pub fn gaussian_reverse_step<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    mu_predictor: impl Fn(&Tensor<T>, usize) -> Tensor<T>,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let mu = mu_predictor(x_t, t);
    let sigma = sched.posterior_var(t).sqrt();
    if sigma == 0.0 {
        return Ok(mu);
    }
    let eps: Tensor<T> = rng.normal_tensor(mu.shape());
    combine(1.0, &mu, sigma, &eps)
}
