use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Ops};

/// Affine map `x -> x · weight + bias` applied to every token row.
///
/// `weight` is `d_in x d_out`, `bias` is `1 x d_out`. The type parameter lets
/// the same parameters live either as plain matrices or as tape variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T = Matrix> {
    pub weight: T,
    pub bias: T,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::shape("Affine::new", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Matrix::identity(d),
            bias: Matrix::zeros(1, d),
        }
    }

    /// Zero weight with a constant bias: every token maps to `value · 1`.
    pub fn constant(d_in: usize, d_out: usize, value: f64) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: Matrix::filled(1, d_out, value),
        }
    }

    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self {
            weight: Matrix::from_fn(d_in, d_out, |_, _| normal.sample(rng)),
            bias: Matrix::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

impl<T> Affine<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Affine<U> {
        Affine {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub(crate) fn params(&self) -> [&T; 2] {
        [&self.weight, &self.bias]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut T; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn apply_on<O: Ops<T = T>>(&self, ops: &mut O, x: &T) -> Result<T> {
        ops.affine(x, &self.weight, &self.bias)
    }
}

/// The shared key/query projection of Symmetric Correlation:
/// `f(x) = f1(x) ⊙ f2(x) / ‖f2(x)‖₂`, per token row.
///
/// `f1` carries magnitude (objectness), the unit-normalized `f2` carries
/// direction (similarity).
#[derive(Debug, Clone, PartialEq)]
pub struct ScProjector<T = Matrix> {
    pub f1: Affine<T>,
    pub f2: Affine<T>,
}

impl ScProjector {
    pub fn new(f1: Affine, f2: Affine) -> Result<Self> {
        let d = f1.d_in();
        for a in [&f1, &f2] {
            if a.d_in() != d || a.d_out() != d {
                return Err(Error::shape("ScProjector::new", (d, d), a.weight.shape()));
            }
        }
        Ok(Self { f1, f2 })
    }

    /// Warm start from an existing query projection: `f1 = query`, `f2` has
    /// zero weights and unit biases, so `f(x) = query(x) / √d`.
    pub fn from_query_projection(query: Affine) -> Result<Self> {
        let d = query.d_in();
        Self::new(query, Affine::constant(d, d, 1.0))
    }

    /// Constant magnitude `gain` on every channel with a Gaussian direction
    /// branch: `f(x) = gain · f2(x) / ‖f2(x)‖`, so logits are scaled cosines.
    pub fn angular<R: Rng + ?Sized>(rng: &mut R, d: usize, gain: f64) -> Self {
        Self {
            f1: Affine::constant(d, d, gain),
            f2: Affine::random(rng, d, d, 1.0 / (d as f64).sqrt()),
        }
    }

    /// Gaussian weights for both branches, small Gaussian biases.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let bias = |rng: &mut R| Matrix::from_fn(1, d, |_, _| normal.sample(rng));
        let mut f1 = Affine::random(rng, d, d, std);
        f1.bias = bias(rng);
        let mut f2 = Affine::random(rng, d, d, std);
        f2.bias = bias(rng);
        Self { f1, f2 }
    }

    pub fn dim(&self) -> usize {
        self.f1.d_in()
    }

    /// Eager evaluation of `f` on every row of `x`.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::shape(
                "sc_project",
                x.shape(),
                self.f1.weight.shape(),
            ));
        }
        self.project_on(&mut crate::tensor::Eager, x)
    }
}

impl<T> ScProjector<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ScProjector<U> {
        ScProjector {
            f1: self.f1.map(f),
            f2: self.f2.map(f),
        }
    }

    pub(crate) fn params(&self) -> Vec<&T> {
        let mut v = self.f1.params().to_vec();
        v.extend(self.f2.params());
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut T> {
        let mut v: Vec<&mut T> = self.f1.params_mut().into_iter().collect();
        v.extend(self.f2.params_mut());
        v
    }

    pub fn project_on<O: Ops<T = T>>(&self, ops: &mut O, x: &T) -> Result<T> {
        let magnitude = self.f1.apply_on(ops, x)?;
        let direction = self.f2.apply_on(ops, x)?;
        let unit = ops.row_unit_normalize(&direction)?;
        ops.hadamard(&magnitude, &unit)
    }
}

/// Divisor applied to logits before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `√d`, as in ordinary scaled dot-product attention.
    #[default]
    SqrtD,
    /// `d`.
    D,
}

impl ScaleMode {
    pub fn divisor(self, d: usize) -> f64 {
        match self {
            ScaleMode::SqrtD => (d as f64).sqrt(),
            ScaleMode::D => d as f64,
        }
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt_d" => Ok(ScaleMode::SqrtD),
            "d" => Ok(ScaleMode::D),
            other => Err(Error::Config(format!(
                "unknown scale mode `{other}` (expected sqrt_d or d)"
            ))),
        }
    }
}
