use crate::correlation::TokenMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Grid, Matrix};

/// Per-layer token matrices of one image, ordered coarse to fine. Every
/// layer has a square token grid and all layers share the feature dim.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack(Vec<TokenMatrix>);

/// Side of a square token grid, if `n` is a perfect square.
pub fn grid_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

impl LayerStack {
    pub fn new(layers: Vec<TokenMatrix>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::contract("a layer stack needs at least one layer"))?;
        let d = first.dim();
        for (l, t) in layers.iter().enumerate() {
            if t.dim() != d {
                return Err(Error::shape(
                    "LayerStack::new",
                    first.values().shape(),
                    t.values().shape(),
                ));
            }
            if grid_side(t.tokens()).is_none() {
                return Err(Error::contract(format!(
                    "layer {l} has {} tokens, which is not a square grid",
                    t.tokens()
                )));
            }
        }
        Ok(Self(layers))
    }

    pub fn layers(&self) -> &[TokenMatrix] {
        &self.0
    }

    pub fn into_layers(self) -> Vec<TokenMatrix> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.0[0].dim()
    }

    /// Token-grid sides, coarse to fine.
    pub fn sides(&self) -> Vec<usize> {
        self.0
            .iter()
            .map(|t| grid_side(t.tokens()).expect("checked at construction"))
            .collect()
    }
}

fn check_binary(g: &Grid, what: &str) -> Result<()> {
    if g.channels() != 1 || g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!(
            "{what} must be a single-channel binary grid"
        )));
    }
    Ok(())
}

/// Foreground fraction of every cell when `mask` is area-averaged onto a
/// `side x side` grid.
pub fn area_fraction(mask: &Grid, side: usize) -> Result<Grid> {
    if side == 0 {
        return Err(Error::Size {
            op: "area_fraction",
            detail: "target side is zero".into(),
        });
    }
    let (h, w) = (mask.height(), mask.width());
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    // coverage of input cells [i, i+1) by output cell [o*s, (o+1)*s)
    let overlaps = |n_in: usize, scale: f64, o: usize| -> Vec<(usize, f64)> {
        let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
        (lo.floor() as usize..(hi.ceil() as usize).min(n_in))
            .filter_map(|i| {
                let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                (cover > 0.0).then_some((i, cover))
            })
            .collect()
    };
    let mut out = Grid::filled(side, side, 1, 0.0);
    for oy in 0..side {
        let ys = overlaps(h, sy, oy);
        for ox in 0..side {
            let xs = overlaps(w, sx, ox);
            let mut fg = 0.0;
            let mut area = 0.0;
            for &(y, wy) in &ys {
                for &(x, wx) in &xs {
                    fg += mask.get(y, x, 0) * wy * wx;
                    area += wy * wx;
                }
            }
            out.set(oy, ox, 0, fg / area);
        }
    }
    Ok(out)
}

/// Area-average `mask` onto an `side x side` grid, then mark cells whose
/// foreground fraction is at least one half.
pub fn downsample_mask(mask: &Grid, side: usize) -> Result<Grid> {
    let frac = area_fraction(mask, side)?;
    let bits = frac
        .data()
        .iter()
        .map(|&f| if f >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Grid::new(side, side, 1, bits)
}

/// A labelled support: features, full-resolution mask and the mask resized
/// to every layer's token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem {
    pub id: u32,
    pub layers: LayerStack,
    pub layer_masks: Vec<Grid>,
    pub mask: Grid,
}

impl SupportItem {
    pub fn new(id: u32, layers: LayerStack, mask: Grid) -> Result<Self> {
        check_binary(&mask, "support mask")?;
        let layer_masks = layers
            .sides()
            .into_iter()
            .map(|s| downsample_mask(&mask, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            layers,
            layer_masks,
            mask,
        })
    }

    /// Layer `l` mask as a `tokens x 1` column.
    pub fn mask_column(&self, l: usize) -> Matrix {
        self.layer_masks[l].to_matrix()
    }
}

/// One query with its ground truth and a support pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub query: LayerStack,
    pub query_truth: Grid,
    pub supports: Vec<SupportItem>,
    pub category: String,
}

impl Episode {
    pub fn new(
        query: LayerStack,
        query_truth: Grid,
        supports: Vec<SupportItem>,
        category: impl Into<String>,
    ) -> Result<Self> {
        check_binary(&query_truth, "query truth")?;
        if supports.is_empty() {
            return Err(Error::contract("an episode needs at least one support"));
        }
        let sides = query.sides();
        for s in &supports {
            if s.layers.sides() != sides || s.layers.dim() != query.dim() {
                return Err(Error::contract(format!(
                    "support {} layers do not match the query layers",
                    s.id
                )));
            }
        }
        Ok(Self {
            query,
            query_truth,
            supports,
            category: category.into(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.query.len()
    }
}

/// Source of backbone features for an episode.
pub trait FeatureProvider {
    fn episode(&self) -> Result<Episode>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sides() {
        assert_eq!(grid_side(144), Some(12));
        assert_eq!(grid_side(1), Some(1));
        assert_eq!(grid_side(10), None);
    }

    #[test]
    fn downsample_by_area() {
        let mut m = Grid::filled(4, 4, 1, 0.0);
        // top-left 2x2 fully set, top-right block one quarter set
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2)] {
            m.set(y, x, 0, 1.0);
        }
        let d = downsample_mask(&m, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(downsample_mask(&m, 4).unwrap(), m);
        // non-integer ratio: 3 -> 2 cells of 1.5 pixels
        let col = Grid::new(3, 3, 1, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            downsample_mask(&col, 2).unwrap().data(),
            &[1.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn stack_rejects_non_square() {
        let t = TokenMatrix::new(Matrix::zeros(6, 2)).unwrap();
        assert!(LayerStack::new(vec![t]).is_err());
    }
}
