use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

/// Named, ordered parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Shape("parameter names and tensors differ in count".into()));
        }
        Ok(Self { names, tensors })
    }

    pub fn precision(&self) -> &'static str {
        T::TAG
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        g.bind(&self.tensors, trainable)
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible<U: Scalar>(&self, other: &Params<U>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter {n}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform in `±gain * sqrt(3 / fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Zero,
}

/// Collects parameter names, shapes and initializers in registration order.
/// The same layout code drives both counting and construction.
#[derive(Debug, Default)]
pub(crate) struct Registry {
    pub(crate) names: Vec<String>,
    pub(crate) shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    pub(crate) fn dense(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> Dense {
        Dense {
            w: self.add(format!("{name}.weight"), vec![dout, din], Init::Fan { fan_in: din, gain }),
            b: self.add(format!("{name}.bias"), vec![dout], Init::Zero),
        }
    }

    pub(crate) fn conv(&mut self, name: &str, cin: usize, cout: usize, kh: usize, kw: usize) -> Conv {
        let fan_in = cin * kh * kw;
        Conv {
            w: self.add(
                format!("{name}.weight"),
                vec![cout, cin, kh, kw],
                Init::Fan { fan_in, gain: 1.0 },
            ),
            b: self.add(format!("{name}.bias"), vec![cout], Init::Zero),
        }
    }

    pub(crate) fn count(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub(crate) fn init<T: Scalar>(&self, rng: &mut Stream) -> Params<T> {
        let tensors = self
            .shapes
            .iter()
            .zip(&self.inits)
            .map(|(shape, init)| match *init {
                Init::Zero => Tensor::zeros(shape),
                Init::Fan { fan_in, gain } => {
                    let a = gain * (3.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| cst(a * (2.0 * rng.uniform() - 1.0)))
                }
            })
            .collect();
        Params { names: self.names.clone(), tensors }
    }
}
