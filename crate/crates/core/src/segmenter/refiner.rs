//! Top-down refinement of per-layer coarse masks.
//!
//! With layers ordered coarse to fine, `F` starts as the coarsest coarse
//! mask. Each step upsamples `F` to the next finer grid, concatenates that
//! layer's coarse mask and applies a 3x3 convolution. The finest layer is
//! handled by the head, which convolves the upsampled second-finest `F`
//! together with the finest query features and the pooled support features.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Ops, KERNEL};

const TAPS: usize = KERNEL * KERNEL;
const CENTER: usize = TAPS / 2;

/// Default hidden width of the intermediate convolutions.
pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = Matrix> {
    /// `out_c x (in_c * 9)`.
    pub kernel: T,
    /// `1 x out_c`.
    pub bias: T,
}

impl<T> ConvLayer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvLayer<U> {
        ConvLayer {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }
}

impl ConvLayer {
    fn zeros(in_c: usize, out_c: usize) -> Self {
        Self {
            kernel: Matrix::zeros(out_c, in_c * TAPS),
            bias: Matrix::zeros(1, out_c),
        }
    }

    fn in_channels(&self) -> usize {
        self.kernel.cols() / TAPS
    }
}

/// Convolutions for the intermediate levels (coarse to fine) and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerWeights<T = Matrix> {
    pub levels: Vec<ConvLayer<T>>,
    pub head: ConvLayer<T>,
}

/// Input/output channel counts of every convolution for `layers` layers.
fn channel_plan(layers: usize, dim: usize, hidden: usize) -> (Vec<(usize, usize)>, usize) {
    let mids = layers.saturating_sub(2);
    let mut plan = Vec::with_capacity(mids);
    let mut carried = 1;
    for _ in 0..mids {
        plan.push((carried + 1, hidden));
        carried = hidden;
    }
    (plan, carried + 2 * dim)
}

impl RefinerWeights {
    pub fn zeros(layers: usize, dim: usize, hidden: usize) -> Self {
        let (plan, head_in) = channel_plan(layers, dim, hidden);
        Self {
            levels: plan
                .into_iter()
                .map(|(i, o)| ConvLayer::zeros(i, o))
                .collect(),
            head: ConvLayer::zeros(head_in, 1),
        }
    }

    /// Gaussian kernels scaled by fan-in, zero biases.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        layers: usize,
        dim: usize,
        hidden: usize,
        gain: f64,
    ) -> Self {
        let mut w = Self::zeros(layers, dim, hidden);
        for conv in w.levels.iter_mut().chain(std::iter::once(&mut w.head)) {
            let fan_in = conv.kernel.cols() as f64;
            let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
            conv.kernel
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = normal.sample(rng));
        }
        w
    }

    /// Hand-set weights that carry the coarse masks through: every level
    /// averages the upsampled previous output with its own coarse mask in
    /// channel 0, and the head emits `gain · (F − 0.5)` so the sigmoid
    /// thresholds the fused mask at one half.
    pub fn passthrough(layers: usize, dim: usize, hidden: usize, gain: f64) -> Self {
        let mut w = Self::zeros(layers, dim, hidden);
        for conv in &mut w.levels {
            let in_c = conv.in_channels();
            // channel 0 of the upsampled input and the coarse mask (last input)
            conv.kernel.set(0, CENTER, 0.5);
            conv.kernel.set(0, (in_c - 1) * TAPS + CENTER, 0.5);
        }
        w.head.kernel.set(0, CENTER, gain);
        w.head.bias.set(0, 0, -0.5 * gain);
        w
    }

    pub fn num_layers(&self) -> usize {
        // the head exists for any depth; mids exist only from three layers up
        self.levels.len() + 2
    }
}

impl<T> RefinerWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> RefinerWeights<U> {
        RefinerWeights {
            levels: self.levels.iter().map(|c| c.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    pub(crate) fn params(&self) -> Vec<&T> {
        self.levels
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|c| [&c.kernel, &c.bias])
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut T> {
        self.levels
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|c| [&mut c.kernel, &mut c.bias])
            .collect()
    }
}

impl<T: Clone> RefinerWeights<T> {
    /// Runs the refiner and returns head logits on the finest grid,
    /// `(side * side) x 1`.
    ///
    /// `coarse[l]` is layer `l`'s coarse mask as a `(s_l * s_l) x 1` column,
    /// `sides[l]` its grid side, coarse to fine. `query_fine` holds the finest
    /// query tokens and `support_pool` the `1 x d` pooled support tokens.
    pub fn refine_on<O: Ops<T = T>>(
        &self,
        ops: &mut O,
        coarse: &[T],
        sides: &[usize],
        query_fine: &T,
        support_pool: &T,
    ) -> Result<T> {
        let layers = coarse.len();
        if layers == 0 || sides.len() != layers {
            return Err(Error::contract("refiner needs one coarse mask per layer"));
        }
        if self.levels.len() != layers.saturating_sub(2) {
            return Err(Error::contract(format!(
                "refiner has {} levels but {} layers were given",
                self.levels.len(),
                layers
            )));
        }
        // layer index feeding the head: second-finest, or the only layer
        let top = layers.saturating_sub(2);
        let mut f = coarse[0].clone();
        for (l, conv) in (1..=top).zip(&self.levels) {
            let (prev, cur) = (sides[l - 1], sides[l]);
            let up = ops.bilinear(&f, prev, prev, cur, cur)?;
            let cat = ops.concat_cols(&[up, coarse[l].clone()])?;
            f = ops.conv2d(&cat, cur, cur, &conv.kernel, &conv.bias)?;
        }
        let fine = sides[layers - 1];
        let up = ops.bilinear(&f, sides[top], sides[top], fine, fine)?;
        if ops.value(query_fine).rows() != fine * fine {
            return Err(Error::shape(
                "refiner head",
                ops.value(query_fine).shape(),
                (fine * fine, 0),
            ));
        }
        let pooled = ops.repeat_rows(support_pool, fine * fine)?;
        let cat = ops.concat_cols(&[up, query_fine.clone(), pooled])?;
        ops.conv2d(&cat, fine, fine, &self.head.kernel, &self.head.bias)
    }
}
