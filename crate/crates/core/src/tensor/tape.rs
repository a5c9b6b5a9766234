//! Reverse-mode differentiation over whole matrices.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. Inputs always precede outputs, so the node order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::grid::{bilinear_backward, bilinear_forward, conv2d_backward, conv2d_forward};
use super::matrix::{dot, Matrix};
use super::ops::{bce_value, sigmoid, Ops, PROB_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    RowUnitNormalize {
        input: Var,
        norms: Vec<f64>,
    },
    RowSoftmax(Var, f64),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    RepeatRows(Var),
    Bilinear {
        input: Var,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        h: usize,
        w: usize,
    },
    Sigmoid(Var),
    Bce {
        probs: Var,
        truth: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Matrix {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Propagates `d output / d node` for every node. `output` must be `1 x 1`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.val(output);
        if out.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got {}x{}",
                out.rows(),
                out.cols()
            )));
        }
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[output.0].data_mut()[0] = 1.0;

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::replace(&mut grads[idx], Matrix::zeros(0, 0));
            if g.data().iter().all(|&v| v == 0.0) {
                grads[idx] = g;
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = g;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Matrix]) {
        let mut acc = |v: Var, d: &Matrix| {
            let dst = grads[v.0].data_mut();
            for (a, b) in dst.iter_mut().zip(d.data()) {
                *a += b;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, &g.matmul_transposed(self.val(*b)).expect("matmul grad"));
                acc(
                    *b,
                    &self.val(*a).transpose().matmul(g).expect("matmul grad"),
                );
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ
                acc(*a, &g.matmul(self.val(*b)).expect("matmul_t grad"));
                acc(
                    *b,
                    &g.transpose().matmul(self.val(*a)).expect("matmul_t grad"),
                );
            }
            Op::Add(a, b) => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::Hadamard(a, b) => {
                acc(*a, &g.hadamard(self.val(*b)).expect("hadamard grad"));
                acc(*b, &g.hadamard(self.val(*a)).expect("hadamard grad"));
            }
            Op::Scale(a, s) => acc(*a, &g.scale(*s)),
            Op::AddRowBias(a, b) => {
                acc(*a, g);
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*b, &db);
            }
            Op::RowUnitNormalize { input, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for (r, &norm) in norms.iter().enumerate() {
                    let proj = dot(y.row(r), g.row(r));
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d = (gv - yv * proj) / norm;
                    }
                }
                acc(*input, &dx);
            }
            Op::RowSoftmax(a, scale) => {
                let p = &node.value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let inner = dot(p.row(r), g.row(r));
                    for ((d, &pv), &gv) in dx.row_mut(r).iter_mut().zip(p.row(r)).zip(g.row(r)) {
                        *d = pv * (gv - inner) / scale;
                    }
                }
                acc(*a, &dx);
            }
            Op::SliceCols(a, start) => {
                let src = self.val(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, &d);
            }
            Op::SliceRows(a, start) => {
                let src = self.val(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                let c = src.cols();
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                acc(*a, &d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).rows();
                    acc(*p, &g.slice_rows(offset, offset + n).expect("concat grad"));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).cols();
                    acc(*p, &g.slice_cols(offset, offset + n).expect("concat grad"));
                    offset += n;
                }
            }
            Op::MeanRows(a) => {
                let n = self.val(*a).rows();
                acc(
                    *a,
                    &g.scale(1.0 / n as f64).repeat_rows(n).expect("mean grad"),
                );
            }
            Op::RepeatRows(a) => acc(*a, &g.mean_rows().scale(g.rows() as f64)),
            Op::Bilinear {
                input,
                h,
                w,
                out_h,
                out_w,
            } => {
                acc(*input, &bilinear_backward(g, *h, *w, *out_h, *out_w));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                h,
                w,
            } => {
                let (di, dk, db) = conv2d_backward(g, self.val(*input), *h, *w, self.val(*kernel));
                acc(*input, &di);
                acc(*kernel, &dk);
                acc(*bias, &db);
            }
            Op::Sigmoid(a) => {
                let s = &node.value;
                let d = Matrix::from_fn(s.rows(), s.cols(), |r, c| {
                    let sv = s.get(r, c);
                    g.get(r, c) * sv * (1.0 - sv)
                });
                acc(*a, &d);
            }
            Op::Bce { probs, truth } => {
                let p = self.val(*probs);
                let n = p.data().len() as f64;
                let scale = g.get(0, 0) / n;
                let d = Matrix::from_fn(p.rows(), p.cols(), |r, c| {
                    let pv = p.get(r, c);
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pv) {
                        return 0.0;
                    }
                    let y = truth.get(r, c);
                    -scale * (y / pv - (1.0 - y) / (1.0 - pv))
                });
                acc(*probs, &d);
            }
        }
    }
}

impl Ops for Tape {
    type T = Var;

    fn value<'a>(&'a self, t: &'a Var) -> &'a Matrix {
        self.val(*t)
    }

    fn constant(&mut self, m: Matrix) -> Var {
        self.leaf(m)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).matmul(self.val(*b))?;
        Ok(self.push(v, Op::MatMul(*a, *b)))
    }

    fn matmul_transposed(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).matmul_transposed(self.val(*b))?;
        Ok(self.push(v, Op::MatMulT(*a, *b)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).add(self.val(*b))?;
        Ok(self.push(v, Op::Add(*a, *b)))
    }

    fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).hadamard(self.val(*b))?;
        Ok(self.push(v, Op::Hadamard(*a, *b)))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(*a).scale(s);
        self.push(v, Op::Scale(*a, s))
    }

    fn add_row_bias(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        let v = self.val(*a).add_row_bias(self.val(*bias))?;
        Ok(self.push(v, Op::AddRowBias(*a, *bias)))
    }

    fn row_unit_normalize(&mut self, a: &Var) -> Result<Var> {
        let x = self.val(*a);
        let norms = (0..x.rows())
            .map(|r| dot(x.row(r), x.row(r)).sqrt())
            .collect();
        let v = x.row_unit_normalize()?;
        Ok(self.push(v, Op::RowUnitNormalize { input: *a, norms }))
    }

    fn row_softmax(&mut self, a: &Var, scale: f64) -> Var {
        let v = self.val(*a).row_softmax(scale);
        self.push(v, Op::RowSoftmax(*a, scale))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let v = self.val(*a).slice_cols(start, end)?;
        Ok(self.push(v, Op::SliceCols(*a, start)))
    }

    fn slice_rows(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let v = self.val(*a).slice_rows(start, end)?;
        Ok(self.push(v, Op::SliceRows(*a, start)))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let v = Matrix::concat_rows(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let v = Matrix::concat_cols(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    fn mean_rows(&mut self, a: &Var) -> Var {
        let v = self.val(*a).mean_rows();
        self.push(v, Op::MeanRows(*a))
    }

    fn repeat_rows(&mut self, a: &Var, n: usize) -> Result<Var> {
        let v = self.val(*a).repeat_rows(n)?;
        Ok(self.push(v, Op::RepeatRows(*a)))
    }

    fn bilinear(&mut self, a: &Var, h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let v = bilinear_forward(self.val(*a), h, w, out_h, out_w)?;
        Ok(self.push(
            v,
            Op::Bilinear {
                input: *a,
                h,
                w,
                out_h,
                out_w,
            },
        ))
    }

    fn conv2d(&mut self, a: &Var, h: usize, w: usize, kernel: &Var, bias: &Var) -> Result<Var> {
        let v = conv2d_forward(self.val(*a), h, w, self.val(*kernel), self.val(*bias))?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input: *a,
                kernel: *kernel,
                bias: *bias,
                h,
                w,
            },
        ))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(sigmoid);
        self.push(v, Op::Sigmoid(*a))
    }

    fn bce(&mut self, probs: &Var, truth: &Matrix) -> Result<Var> {
        let loss = bce_value(self.val(*probs), truth)?;
        Ok(self.push(
            Matrix::from_vec_unchecked(1, 1, vec![loss]),
            Op::Bce {
                probs: *probs,
                truth: truth.clone(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_difference_check;
    use crate::tensor::ops::Eager;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[1.0, 2.0]).unwrap());
        let y = tape.matmul_transposed(&x, &x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
        assert_eq!(g.get(y).data(), &[1.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[1.0, 2.0]).unwrap());
        let c = tape.leaf(Matrix::filled(1, 1, 3.0));
        let g = tape.backward(c).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    /// Builds a scalar from every differentiable op and returns the tape
    /// output; used for both analytic and numeric gradients.
    fn composite<O: Ops>(ops: &mut O, params: &[f64]) -> O::T {
        let x = ops.constant(Matrix::new(4, 3, params[..12].to_vec()).unwrap());
        let w = ops.constant(Matrix::new(3, 3, params[12..21].to_vec()).unwrap());
        let b = ops.constant(Matrix::new(1, 3, params[21..24].to_vec()).unwrap());
        let k = ops.constant(Matrix::new(2, 27, params[24..78].to_vec()).unwrap());
        let kb = ops.constant(Matrix::new(1, 2, params[78..80].to_vec()).unwrap());

        let a = ops.affine(&x, &w, &b).unwrap();
        let n = ops.row_unit_normalize(&a).unwrap();
        let h = ops.hadamard(&n, &x).unwrap();
        let logits = ops.matmul_transposed(&h, &a).unwrap();
        let p = ops.row_softmax(&logits, 1.7);
        let s = ops.slice_cols(&p, 1, 3).unwrap();
        let r = ops.slice_rows(&x, 0, 4).unwrap();
        let r = ops.slice_cols(&r, 0, 1).unwrap();
        let cat = ops.concat_cols(&[s, r]).unwrap();
        let conv = ops.conv2d(&cat, 2, 2, &k, &kb).unwrap();
        let up = ops.bilinear(&conv, 2, 2, 3, 5).unwrap();
        let m = ops.mean_rows(&x);
        let rep = ops.repeat_rows(&m, 15).unwrap();
        let rep = ops.slice_cols(&rep, 0, 2).unwrap();
        let sum = ops.add(&up, &rep).unwrap();
        let both = ops.concat_rows(&[sum.clone(), sum]).unwrap();
        let scaled = ops.scale(&both, 0.5);
        let probs = ops.sigmoid(&scaled);
        let truth = Matrix::from_fn(30, 2, |r, c| ((r + c) % 2) as f64);
        ops.bce(&probs, &truth).unwrap()
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let params: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |p: &[f64]| Ok(composite(&mut Eager, p).get(0, 0));
            let grad = |p: &[f64]| {
                let mut tape = Tape::new();
                let out = composite(&mut tape, p);
                let g = tape.backward(out)?;
                // leaves are created first, in parameter order
                let mut flat = Vec::new();
                for i in 0..5 {
                    flat.extend_from_slice(g.get(Var(i)).data());
                }
                Ok(flat)
            };
            let err = finite_difference_check(f, grad, &params, 1e-5).unwrap();
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn eager_and_tape_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eager = composite(&mut Eager, &params);
        let mut tape = Tape::new();
        let v = composite(&mut tape, &params);
        assert_eq!(tape.value(&v), &eager);
    }
}
