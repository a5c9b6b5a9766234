//! Spatial grids and the two spatial operators the refiner needs:
//! bilinear resizing and 3x3 same-padding convolution.
//!
//! A grid with `H x W` pixels and `C` channels is laid out row-major as
//! `data[(y * W + x) * C + c]`, which is exactly a `(H*W) x C` [`Matrix`].
//! Token matrices of a square token grid can therefore be viewed as grids
//! without copying.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Convolution kernel side. Stride 1 and zero padding 1 keep H x W unchanged.
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Size {
                op: "Grid::new",
                detail: format!("{} values for {height}x{width}x{channels}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Grid::new"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Views a `(h*w) x c` matrix as an `h x w x c` grid.
    pub fn from_matrix(m: Matrix, height: usize, width: usize) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::shape(
                "Grid::from_matrix",
                m.shape(),
                (height * width, m.cols()),
            ));
        }
        let channels = m.cols();
        Ok(Self {
            height,
            width,
            channels,
            data: m.into_data(),
        })
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec_unchecked(self.height * self.width, self.channels, self.data.clone())
    }

    pub fn into_matrix(self) -> Matrix {
        Matrix::from_vec_unchecked(self.height * self.width, self.channels, self.data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Grid> {
        let m = bilinear_forward(&self.to_matrix(), self.height, self.width, out_h, out_w)?;
        Grid::from_matrix(m, out_h, out_w)
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    ///
    /// `kernel` is `out_c x (in_c * 9)` indexed as `[o, (i * 3 + ky) * 3 + kx]`;
    /// `bias` is `1 x out_c`.
    pub fn conv2d(&self, kernel: &Matrix, bias: &Matrix) -> Result<Grid> {
        let m = conv2d_forward(&self.to_matrix(), self.height, self.width, kernel, bias)?;
        Grid::from_matrix(m, self.height, self.width)
    }
}

/// Source taps of one output coordinate along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel (align-corners = false) sampling positions.
fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

fn check_resize(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Size {
            op: "bilinear_resize",
            detail: format!("{h}x{w} -> {out_h}x{out_w}"),
        });
    }
    Ok(())
}

pub(crate) fn bilinear_forward(
    m: &Matrix,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Matrix> {
    check_resize(h, w, out_h, out_w)?;
    if m.rows() != h * w {
        return Err(Error::shape(
            "bilinear_resize",
            m.shape(),
            (h * w, m.cols()),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(m.clone());
    }
    let c = m.cols();
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let mut out = Matrix::zeros(out_h * out_w, c);
    for (oy, ty) in ys.iter().enumerate() {
        for (ox, tx) in xs.iter().enumerate() {
            let row = out.row_mut(oy * out_w + ox);
            let corners = [
                (ty.lo, tx.lo, (1.0 - ty.frac) * (1.0 - tx.frac)),
                (ty.lo, tx.hi, (1.0 - ty.frac) * tx.frac),
                (ty.hi, tx.lo, ty.frac * (1.0 - tx.frac)),
                (ty.hi, tx.hi, ty.frac * tx.frac),
            ];
            for (y, x, wgt) in corners {
                let src = m.row(y * w + x);
                for (o, s) in row.iter_mut().zip(src) {
                    *o += wgt * s;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_forward`]: scatters output gradients back onto the
/// input pixels with the same weights.
pub(crate) fn bilinear_backward(
    grad: &Matrix,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Matrix {
    if (h, w) == (out_h, out_w) {
        return grad.clone();
    }
    let c = grad.cols();
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let mut out = Matrix::zeros(h * w, c);
    for (oy, ty) in ys.iter().enumerate() {
        for (ox, tx) in xs.iter().enumerate() {
            let g = grad.row(oy * out_w + ox);
            let corners = [
                (ty.lo, tx.lo, (1.0 - ty.frac) * (1.0 - tx.frac)),
                (ty.lo, tx.hi, (1.0 - ty.frac) * tx.frac),
                (ty.hi, tx.lo, ty.frac * (1.0 - tx.frac)),
                (ty.hi, tx.hi, ty.frac * tx.frac),
            ];
            for (y, x, wgt) in corners {
                for (o, gv) in out.row_mut(y * w + x).iter_mut().zip(g) {
                    *o += wgt * gv;
                }
            }
        }
    }
    out
}

fn check_conv(m: &Matrix, h: usize, w: usize, kernel: &Matrix, bias: &Matrix) -> Result<()> {
    if m.rows() != h * w {
        return Err(Error::shape("conv2d", m.shape(), (h * w, m.cols())));
    }
    if kernel.cols() != m.cols() * KERNEL * KERNEL {
        return Err(Error::shape("conv2d", m.shape(), kernel.shape()));
    }
    if bias.shape() != (1, kernel.rows()) {
        return Err(Error::shape("conv2d bias", kernel.shape(), bias.shape()));
    }
    Ok(())
}

/// Visits every (output pixel, input pixel, kernel tap) triple that lies
/// inside the zero-padded window.
#[inline]
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for ky in 0..KERNEL {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    f(y * w + x, sy as usize * w + sx as usize, ky * KERNEL + kx);
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    m: &Matrix,
    h: usize,
    w: usize,
    kernel: &Matrix,
    bias: &Matrix,
) -> Result<Matrix> {
    check_conv(m, h, w, kernel, bias)?;
    let out_c = kernel.rows();
    let mut out = bias.repeat_rows(h * w)?;
    for_each_tap(h, w, |dst, src, tap| {
        let input = m.row(src);
        for o in 0..out_c {
            let k = kernel.row(o);
            let mut acc = 0.0;
            for (i, v) in input.iter().enumerate() {
                acc += k[i * KERNEL * KERNEL + tap] * v;
            }
            let cur = out.get(dst, o);
            out.set(dst, o, cur + acc);
        }
    });
    Ok(out)
}

/// Gradients of a 3x3 convolution with respect to input, kernel and bias.
pub(crate) fn conv2d_backward(
    grad: &Matrix,
    m: &Matrix,
    h: usize,
    w: usize,
    kernel: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let in_c = m.cols();
    let out_c = kernel.rows();
    let mut d_in = Matrix::zeros(m.rows(), in_c);
    let mut d_kernel = Matrix::zeros(out_c, kernel.cols());
    for_each_tap(h, w, |dst, src, tap| {
        let g = grad.row(dst);
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            for i in 0..in_c {
                let idx = i * KERNEL * KERNEL + tap;
                let dk = d_kernel.get(o, idx) + go * m.get(src, i);
                d_kernel.set(o, idx, dk);
                let di = d_in.get(src, i) + go * kernel.get(o, idx);
                d_in.set(src, i, di);
            }
        }
    });
    let mut d_bias = Matrix::zeros(1, out_c);
    for r in 0..grad.rows() {
        for (b, g) in d_bias.data_mut().iter_mut().zip(grad.row(r)) {
            *b += g;
        }
    }
    (d_in, d_kernel, d_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid {
        Grid::new(
            h,
            w,
            c,
            (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Scalar bilinear sample with the half-pixel convention.
    fn sample(g: &Grid, oy: usize, ox: usize, out_h: usize, out_w: usize, c: usize) -> f64 {
        let coord = |o: usize, n_in: usize, n_out: usize| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        };
        let (y0, y1, fy) = coord(oy, g.height(), out_h);
        let (x0, x1, fx) = coord(ox, g.width(), out_w);
        let top = g.get(y0, x0, c) * (1.0 - fx) + g.get(y0, x1, c) * fx;
        let bot = g.get(y1, x0, c) * (1.0 - fx) + g.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }

    #[test]
    fn resize_constant_and_identity() {
        let g = Grid::filled(2, 2, 1, 0.7);
        let up = g.bilinear_resize(4, 4).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_grid(&mut rng, 3, 5, 2);
        assert_eq!(r.bilinear_resize(3, 5).unwrap(), r);
        assert!(r.bilinear_resize(0, 2).is_err());
    }

    #[test]
    fn resize_matches_scalar_oracle() {
        let g = Grid::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = g.bilinear_resize(4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert!((up.get(y, x, 0) - sample(&g, y, x, 4, 4, 0)).abs() < 1e-15);
            }
            let row: Vec<f64> = (0..4).map(|x| up.get(y, x, 0)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_grid(&mut rng, 3, 4, 2);
        let out = r.bilinear_resize(7, 5).unwrap();
        for y in 0..7 {
            for x in 0..5 {
                for c in 0..2 {
                    assert!((out.get(y, x, c) - sample(&r, y, x, 7, 5, c)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn conv_identity_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_grid(&mut rng, 4, 5, 2);
        let mut kernel = Matrix::zeros(2, 18);
        kernel.set(0, 4, 1.0);
        kernel.set(1, 9 + 4, 1.0);
        let out = g.conv2d(&kernel, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out, g);

        let out = g
            .conv2d(&Matrix::zeros(1, 18), &Matrix::row_vector(&[0.3]).unwrap())
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.3));
        assert_eq!((out.height(), out.width(), out.channels()), (4, 5, 1));

        let err = g.conv2d(&Matrix::zeros(1, 9), &Matrix::zeros(1, 1));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_matches_four_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_grid(&mut rng, 5, 5, 2);
        let kernel = Matrix::from_fn(3, 18, |_, _| rng.gen_range(-1.0..1.0));
        let bias = Matrix::from_fn(1, 3, |_, _| rng.gen_range(-1.0..1.0));
        let out = g.conv2d(&kernel, &bias).unwrap();
        for o in 0..3 {
            for y in 0..5i64 {
                for x in 0..5i64 {
                    let mut s = bias.get(0, o);
                    for i in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if (0..5).contains(&sy) && (0..5).contains(&sx) {
                                    s += kernel.get(o, (i * 3 + ky as usize) * 3 + kx as usize)
                                        * g.get(sy as usize, sx as usize, i);
                                }
                            }
                        }
                    }
                    assert!((out.get(y as usize, x as usize, o) - s).abs() < 1e-12);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn resize_stays_within_input_bounds(
                vals in proptest::collection::vec(-5.0f64..5.0, 12),
                oh in 1usize..9, ow in 1usize..9,
            ) {
                let g = Grid::new(3, 4, 1, vals.clone()).unwrap();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let out = g.bilinear_resize(oh, ow).unwrap();
                prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            }
        }
    }
}
