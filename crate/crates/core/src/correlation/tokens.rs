use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `n x d` token features of one image at one layer, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(Matrix);

impl TokenMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Size {
                op: "TokenMatrix::new",
                detail: format!(
                    "need at least one token and one channel, got {}x{}",
                    values.rows(),
                    values.cols()
                ),
            });
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("TokenMatrix::new"));
        }
        Ok(Self(values))
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_values(self) -> Matrix {
        self.0
    }

    /// Average token, `1 x d`.
    pub fn mean_token(&self) -> Matrix {
        self.0.mean_rows()
    }
}

impl AsRef<Matrix> for TokenMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// Column range `[head, tail)` of one support inside a concatenated pack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub head: usize,
    pub tail: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.tail - self.head
    }

    pub fn is_empty(&self) -> bool {
        self.tail == self.head
    }
}

/// Contiguous spans for supports with the given token counts.
pub fn spans_for(counts: impl IntoIterator<Item = usize>) -> Vec<Span> {
    let mut head = 0;
    counts
        .into_iter()
        .map(|n| {
            let s = Span {
                head,
                tail: head + n,
            };
            head += n;
            s
        })
        .collect()
}

/// Ordered supports whose tokens are concatenated along the token axis.
#[derive(Debug, Clone)]
pub struct SupportPack {
    items: Vec<TokenMatrix>,
    spans: Vec<Span>,
}

impl SupportPack {
    pub fn new(items: Vec<TokenMatrix>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("a support pack needs at least one support"))?;
        let d = first.dim();
        if let Some(bad) = items.iter().find(|t| t.dim() != d) {
            return Err(Error::shape(
                "SupportPack::new",
                first.values().shape(),
                bad.values().shape(),
            ));
        }
        let spans = spans_for(items.iter().map(TokenMatrix::tokens));
        Ok(Self { items, spans })
    }

    pub fn items(&self) -> &[TokenMatrix] {
        &self.items
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items[0].dim()
    }

    pub fn total_tokens(&self) -> usize {
        self.spans.last().map_or(0, |s| s.tail)
    }

    /// `X_S`: all support tokens stacked in pack order.
    pub fn concatenated(&self) -> Matrix {
        Matrix::concat_rows(
            &self
                .items
                .iter()
                .map(TokenMatrix::values)
                .collect::<Vec<_>>(),
        )
        .expect("dims checked at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_are_contiguous() {
        let pack = SupportPack::new(vec![
            TokenMatrix::new(Matrix::zeros(3, 2)).unwrap(),
            TokenMatrix::new(Matrix::zeros(1, 2)).unwrap(),
            TokenMatrix::new(Matrix::zeros(4, 2)).unwrap(),
        ])
        .unwrap();
        assert_eq!(
            pack.spans(),
            &[
                Span { head: 0, tail: 3 },
                Span { head: 3, tail: 4 },
                Span { head: 4, tail: 8 }
            ]
        );
        assert_eq!(pack.concatenated().shape(), (8, 2));
    }

    #[test]
    fn rejects_mixed_dims_and_empty() {
        assert!(SupportPack::new(vec![]).is_err());
        let err = SupportPack::new(vec![
            TokenMatrix::new(Matrix::zeros(1, 2)).unwrap(),
            TokenMatrix::new(Matrix::zeros(1, 3)).unwrap(),
        ]);
        assert!(matches!(err, Err(Error::Shape { .. })));
        assert!(TokenMatrix::new(Matrix::zeros(0, 3)).is_err());
    }
}
