//! Per-step adversarial losses plus the cycle-consistency and identity terms.
//!
//! Losses are reduced outside the tape: each helper returns the scalar value
//! together with its gradient with respect to the tensor it was computed
//! from, which the caller seeds into [`Graph::backward`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::PairDiscriminator;
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cycle: f64,
    pub identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cycle: 10.0, identity: 5.0 }
    }
}

/// Losses of one direction at one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_loss_real: f64,
    pub d_loss_fake: f64,
    pub g_adv: f64,
    pub g_cyc: f64,
    pub g_id: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub t_sampled: usize,
}

impl LossReport {
    /// Fills the totals from the components. `weights` are the weights in
    /// effect at this step (identity may already be annealed to zero).
    pub fn assemble(d_real: f64, d_fake: f64, g_adv: f64, g_cyc: f64, g_id: f64, weights: LossWeights, t: usize) -> Self {
        Self {
            d_loss_real: d_real,
            d_loss_fake: d_fake,
            g_adv,
            g_cyc,
            g_id,
            total_g: g_adv + weights.cycle * g_cyc + weights.identity * g_id,
            total_d: d_real + d_fake,
            t_sampled: t,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.d_loss_real, self.d_loss_fake, self.g_adv, self.g_cyc, self.g_id, self.total_g, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A reduced loss and its gradient with respect to its input tensor.
#[derive(Debug, Clone)]
pub struct Term<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Term<T> {
    /// Gradient multiplied by `w`, ready to seed a backward pass.
    pub fn weighted(&self, w: f64) -> Tensor<T> {
        let w = cst::<T>(w);
        self.grad.map(|g| g * w)
    }
}

fn check_probs<T: Scalar>(p: &Tensor<T>, what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Shape(format!("{what}: empty discriminator output")));
    }
    if let Some(i) = p.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} (element {i})")));
    }
    Ok(())
}

/// `mean(-ln p)`: the real-side discriminator term and the non-saturating
/// generator term.
pub fn neg_log<T: Scalar>(p: &Tensor<T>) -> Result<Term<T>> {
    check_probs(p, "probabilities")?;
    let n = p.len() as f64;
    let mut sum = 0.0;
    let grad = p.map(|v| {
        let x = v.to_f64().unwrap();
        let c = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
        sum += -c.ln();
        if c == x {
            cst(-1.0 / (x * n))
        } else {
            T::zero()
        }
    });
    Ok(Term { value: sum / n, grad })
}

/// `mean(-ln(1 - p))`: the fake-side discriminator term.
pub fn neg_log_complement<T: Scalar>(p: &Tensor<T>) -> Result<Term<T>> {
    check_probs(p, "probabilities")?;
    let n = p.len() as f64;
    let mut sum = 0.0;
    let grad = p.map(|v| {
        let x = v.to_f64().unwrap();
        let c = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
        sum += -(1.0 - c).ln();
        if c == x {
            cst(1.0 / ((1.0 - x) * n))
        } else {
            T::zero()
        }
    });
    Ok(Term { value: sum / n, grad })
}

/// Mean absolute difference `mean|a - b|`, differentiated with respect to `a`.
pub fn mean_abs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Term<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("L1 operands {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Shape("L1 of empty tensors".into()));
    }
    let n = a.len() as f64;
    let step = cst::<T>(1.0 / n);
    let mut sum = 0.0;
    let grad = a.zip_map(b, |x, y| {
        let d = x - y;
        sum += d.abs().to_f64().unwrap();
        if d > T::zero() {
            step
        } else if d < T::zero() {
            -step
        } else {
            T::zero()
        }
    });
    if !sum.is_finite() {
        return Err(Error::NonFinite("L1 operands".into()));
    }
    Ok(Term { value: sum / n, grad })
}

/// Cycle-consistency loss between the input and its round trip.
pub fn cycle_loss<T: Scalar>(x: &Tensor<T>, x_cyc: &Tensor<T>) -> Result<f64> {
    Ok(mean_abs(x_cyc, x)?.value)
}

/// Identity loss between a target-domain sample and the target-direction
/// generator's prediction on its diffused version.
pub fn identity_loss<T: Scalar>(y: &Tensor<T>, g_on_y: &Tensor<T>) -> Result<f64> {
    Ok(mean_abs(g_on_y, y)?.value)
}

/// Discriminator objective value split into its two halves, with gradients
/// for every discriminator parameter.
#[derive(Debug, Clone)]
pub struct DiscLoss<T> {
    pub real: f64,
    pub fake: f64,
    pub grads: Vec<Tensor<T>>,
}

impl<T> DiscLoss<T> {
    pub fn value(&self) -> f64 {
        self.real + self.fake
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `-ln D(real) - ln(1 - D(fake))`, each averaged over patches and batch.
pub fn d_loss<T: Scalar, D: PairDiscriminator<T> + ?Sized>(
    d: &D,
    real: (&Tensor<T>, &Tensor<T>),
    fake: (&Tensor<T>, &Tensor<T>),
    t: &[usize],
) -> Result<DiscLoss<T>> {
    check_pair(real.0, real.1, "real pair")?;
    check_pair(fake.0, fake.1, "fake pair")?;
    check_pair(real.0, fake.0, "real vs fake")?;
    let mut g = Graph::new();
    let p = d.params().bind(&mut g, true);
    let (rp, rt) = (g.constant(real.0.clone()), g.constant(real.1.clone()));
    let (fp, ft) = (g.constant(fake.0.clone()), g.constant(fake.1.clone()));
    let pr = d.forward(&mut g, &p, rp, rt, t)?;
    let pf = d.forward(&mut g, &p, fp, ft, t)?;
    let real_term = neg_log(g.value(pr)).map_err(|e| rename(e, "D(real pair)"))?;
    let fake_term = neg_log_complement(g.value(pf)).map_err(|e| rename(e, "D(fake pair)"))?;
    let mut grads = g.backward(&[(pr, real_term.grad), (pf, fake_term.grad)]);
    Ok(DiscLoss {
        real: real_term.value,
        fake: fake_term.value,
        grads: p.iter().map(|&v| grads.take(&g, v)).collect(),
    })
}

/// Non-saturating generator objective `-ln D(fake)` with its gradient with
/// respect to the fake `x_{t-1}`.
pub fn g_adv_loss<T: Scalar, D: PairDiscriminator<T> + ?Sized>(
    d: &D,
    fake_prev: &Tensor<T>,
    x_t: &Tensor<T>,
    t: &[usize],
) -> Result<Term<T>> {
    check_pair(fake_prev, x_t, "fake pair")?;
    let mut g = Graph::new();
    let p = d.params().bind(&mut g, false);
    let a = g.input(fake_prev.clone());
    let b = g.constant(x_t.clone());
    let term = g_adv_in_graph(&mut g, d, &p, a, b, t)?;
    let grad = g.backward(&[(term.0, term.1.grad.clone())]).get(&g, a);
    Ok(Term { value: term.1.value, grad })
}

/// Records `D(x_prev, x_t, t)` on an existing graph and returns the output
/// node with the generator term evaluated on it.
pub fn g_adv_in_graph<T: Scalar, D: PairDiscriminator<T> + ?Sized>(
    g: &mut Graph<T>,
    d: &D,
    d_params: &[Var],
    x_prev: Var,
    x_t: Var,
    t: &[usize],
) -> Result<(Var, Term<T>)> {
    let out = d.forward(g, d_params, x_prev, x_t, t)?;
    let term = neg_log(g.value(out)).map_err(|e| rename(e, "D(fake pair) in generator step"))?;
    Ok((out, term))
}

fn rename(e: Error, what: &str) -> Error {
    match e {
        Error::NonFinite(detail) => Error::NonFinite(format!("{what}: {detail}")),
        other => other,
    }
}
