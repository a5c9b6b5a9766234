use super::projector::{Affine, ScProjector, ScaleMode};
use super::tokens::{Span, SupportPack, TokenMatrix};
use crate::error::{Error, Result};
use crate::tensor::{Eager, Matrix, Ops};

/// Row-stochastic `n_q x Σn_s` attention: query tokens on rows, the
/// concatenated support tokens on columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Matrix,
    spans: Vec<Span>,
}

impl AttentionMap {
    /// Validates that rows sum to one and that the spans tile the columns.
    pub fn new(values: Matrix, spans: Vec<Span>) -> Result<Self> {
        let mut head = 0;
        for s in &spans {
            if s.head != head || s.tail < s.head {
                return Err(Error::contract(
                    "attention spans must be contiguous and ordered",
                ));
            }
            head = s.tail;
        }
        if head != values.cols() {
            return Err(Error::contract(format!(
                "spans cover {head} columns but the map has {}",
                values.cols()
            )));
        }
        for r in 0..values.rows() {
            let sum: f64 = values.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-9 || values.row(r).iter().any(|&v| !(0.0..=1.0).contains(&v))
            {
                return Err(Error::contract(format!(
                    "attention row {r} is not stochastic (sum {sum})"
                )));
            }
        }
        Ok(Self { values, spans })
    }

    pub(crate) fn from_parts_unchecked(values: Matrix, spans: Vec<Span>) -> Self {
        Self { values, spans }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn num_supports(&self) -> usize {
        self.spans.len()
    }

    /// `A_i`: the columns belonging to support `i`.
    pub fn support_slice(&self, i: usize) -> Result<Matrix> {
        let s = self
            .spans
            .get(i)
            .ok_or_else(|| Error::contract(format!("support {i} out of range")))?;
        self.values.slice_cols(s.head, s.tail)
    }
}

/// The correlation used at one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Correlation<T = Matrix> {
    /// Separate key and query projections, softmax over `√d`.
    Standard { key: Affine<T>, query: Affine<T> },
    /// Symmetric Correlation with one shared projector per head. Head `h`
    /// sees channels `[h·d/H, (h+1)·d/H)`; head maps are averaged.
    Symmetric {
        heads: Vec<ScProjector<T>>,
        scale: ScaleMode,
    },
}

impl<T> Correlation<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Correlation<U> {
        match self {
            Correlation::Standard { key, query } => Correlation::Standard {
                key: key.map(f),
                query: query.map(f),
            },
            Correlation::Symmetric { heads, scale } => Correlation::Symmetric {
                heads: heads.iter().map(|h| h.map(f)).collect(),
                scale: *scale,
            },
        }
    }

    pub(crate) fn params(&self) -> Vec<&T> {
        match self {
            Correlation::Standard { key, query } => {
                key.params().into_iter().chain(query.params()).collect()
            }
            Correlation::Symmetric { heads, .. } => heads.iter().flat_map(|h| h.params()).collect(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut T> {
        match self {
            Correlation::Standard { key, query } => key
                .params_mut()
                .into_iter()
                .chain(query.params_mut())
                .collect(),
            Correlation::Symmetric { heads, .. } => {
                heads.iter_mut().flat_map(|h| h.params_mut()).collect()
            }
        }
    }

    /// Attention of query tokens `xq` over stacked support tokens `xs`.
    pub fn attend_on<O: Ops<T = T>>(&self, ops: &mut O, xq: &T, xs: &T) -> Result<T> {
        let d = ops.value(xq).cols();
        if ops.value(xs).cols() != d {
            return Err(Error::shape(
                "attention",
                ops.value(xq).shape(),
                ops.value(xs).shape(),
            ));
        }
        match self {
            Correlation::Standard { key, query } => {
                let k_dim = ops.value(&key.weight).cols();
                if ops.value(&key.weight).rows() != d || ops.value(&query.weight).rows() != d {
                    return Err(Error::shape(
                        "standard_attention",
                        (1, d),
                        ops.value(&key.weight).shape(),
                    ));
                }
                let k = key.apply_on(ops, xs)?;
                let q = query.apply_on(ops, xq)?;
                let logits = ops.matmul_transposed(&q, &k)?;
                Ok(ops.row_softmax(&logits, (k_dim as f64).sqrt()))
            }
            Correlation::Symmetric { heads, scale } => {
                let h = heads.len();
                if h == 0 || !d.is_multiple_of(h) {
                    return Err(Error::Config(format!(
                        "feature dim {d} is not divisible by {h} heads"
                    )));
                }
                let dh = d / h;
                if h == 1 {
                    return symmetric_on(ops, &heads[0], xq, xs, *scale);
                }
                let mut sum: Option<T> = None;
                for (i, p) in heads.iter().enumerate() {
                    let q = ops.slice_cols(xq, i * dh, (i + 1) * dh)?;
                    let s = ops.slice_cols(xs, i * dh, (i + 1) * dh)?;
                    let a = symmetric_on(ops, p, &q, &s, *scale)?;
                    sum = Some(match sum {
                        None => a,
                        Some(acc) => ops.add(&acc, &a)?,
                    });
                }
                let sum = sum.expect("at least one head");
                Ok(ops.scale(&sum, 1.0 / h as f64))
            }
        }
    }
}

fn check_projector_dim<O: Ops>(ops: &O, p: &ScProjector<O::T>, x: &O::T) -> Result<()> {
    let w = ops.value(&p.f1.weight);
    if w.rows() != ops.value(x).cols() {
        return Err(Error::shape(
            "symmetric_attention",
            ops.value(x).shape(),
            w.shape(),
        ));
    }
    Ok(())
}

/// Raw shared-projection products `f(xq) · f(xs)ᵀ`, before any divisor.
fn symmetric_products<O: Ops>(
    ops: &mut O,
    p: &ScProjector<O::T>,
    xq: &O::T,
    xs: &O::T,
) -> Result<O::T> {
    check_projector_dim(ops, p, xq)?;
    let fq = p.project_on(ops, xq)?;
    let fs = p.project_on(ops, xs)?;
    ops.matmul_transposed(&fq, &fs)
}

fn symmetric_on<O: Ops>(
    ops: &mut O,
    p: &ScProjector<O::T>,
    xq: &O::T,
    xs: &O::T,
    scale: ScaleMode,
) -> Result<O::T> {
    let d = ops.value(xq).cols();
    let raw = symmetric_products(ops, p, xq, xs)?;
    Ok(ops.row_softmax(&raw, scale.divisor(d)))
}

fn check_query(pack: &SupportPack, xq: &TokenMatrix) -> Result<()> {
    if pack.dim() != xq.dim() {
        return Err(Error::shape(
            "attention",
            xq.values().shape(),
            (pack.total_tokens(), pack.dim()),
        ));
    }
    Ok(())
}

fn attend(corr: &Correlation, pack: &SupportPack, xq: &TokenMatrix) -> Result<AttentionMap> {
    check_query(pack, xq)?;
    let xs = pack.concatenated();
    let values = corr.attend_on(&mut Eager, xq.values(), &xs)?;
    Ok(AttentionMap::from_parts_unchecked(
        values,
        pack.spans().to_vec(),
    ))
}

/// `softmax(fQ(x_q) · fK(X_S)ᵀ / √d)` over the support axis.
pub fn standard_attention(
    pack: &SupportPack,
    xq: &TokenMatrix,
    key: &Affine,
    query: &Affine,
) -> Result<AttentionMap> {
    attend(
        &Correlation::Standard {
            key: key.clone(),
            query: query.clone(),
        },
        pack,
        xq,
    )
}

pub fn sc_project(p: &ScProjector, x: &TokenMatrix) -> Result<TokenMatrix> {
    TokenMatrix::new(p.project(x.values())?)
}

/// Pre-softmax SC logits `S(x_s, x_q) = f(x_q) · f(x_s)ᵀ / divisor`, shaped
/// `|x_q| x |x_s|`. Swapping the arguments yields the exact transpose.
pub fn sc_logits(xs: &Matrix, xq: &Matrix, p: &ScProjector, scale: ScaleMode) -> Result<Matrix> {
    let raw = symmetric_products(&mut Eager, p, xq, xs)?;
    let divisor = scale.divisor(xq.cols());
    Ok(raw.map(|v| v / divisor))
}

pub fn symmetric_attention(
    pack: &SupportPack,
    xq: &TokenMatrix,
    p: &ScProjector,
    scale: ScaleMode,
) -> Result<AttentionMap> {
    attend(
        &Correlation::Symmetric {
            heads: vec![p.clone()],
            scale,
        },
        pack,
        xq,
    )
}

/// Multi-head SC; per-head maps are averaged.
pub fn multi_head_sc(
    pack: &SupportPack,
    xq: &TokenMatrix,
    heads: &[ScProjector],
    scale: ScaleMode,
) -> Result<AttentionMap> {
    attend(
        &Correlation::Symmetric {
            heads: heads.to_vec(),
            scale,
        },
        pack,
        xq,
    )
}
