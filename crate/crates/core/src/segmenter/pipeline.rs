use crate::correlation::{
    contribution_index, spans_for, AttentionMap, ContributionReport, Correlation, Span,
};
use crate::error::{Error, Result};
use crate::pruning::{greedy_select, multilayer_terms, PruneConfig};
use crate::tensor::{Eager, Grid, Matrix, Ops, Tape};

use super::episode::{grid_side, Episode};
use super::metric::PredictionMask;
use super::refiner::RefinerWeights;

/// How the finest-layer support tokens are pooled for the refiner head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// One average over every kept support token.
    #[default]
    Joint,
    /// Average per support, then over supports.
    PerSupport,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Pooling::Joint),
            "per_support" => Ok(Pooling::PerSupport),
            other => Err(Error::Config(format!(
                "unknown pooling '{other}' (expected joint or per_support)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineConfig {
    pub prune: PruneConfig,
    pub pooling: Pooling,
}

/// Per-layer correlations plus the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T = Matrix> {
    pub correlations: Vec<Correlation<T>>,
    pub refiner: RefinerWeights<T>,
}

impl SegModel {
    pub fn new(correlations: Vec<Correlation>, refiner: RefinerWeights) -> Result<Self> {
        if correlations.is_empty() {
            return Err(Error::contract("a model needs at least one layer"));
        }
        if refiner.levels.len() != correlations.len().saturating_sub(2) {
            return Err(Error::contract(format!(
                "{} correlation layers do not match a refiner with {} levels",
                correlations.len(),
                refiner.levels.len()
            )));
        }
        Ok(Self {
            correlations,
            refiner,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.correlations.len()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.data().len()).sum()
    }

    /// Every parameter entry in a fixed order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    /// Copy of the model with its parameters replaced by `values`.
    pub fn with_flat_params(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut out = self.clone();
        let mut rest = values;
        for m in out.params_mut() {
            let (head, tail) = rest.split_at(m.data().len());
            m.data_mut().copy_from_slice(head);
            rest = tail;
        }
        Ok(out)
    }
}

impl<T> SegModel<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SegModel<U> {
        SegModel {
            correlations: self.correlations.iter().map(|c| c.map(f)).collect(),
            refiner: self.refiner.map(f),
        }
    }

    pub(crate) fn params(&self) -> Vec<&T> {
        self.correlations
            .iter()
            .flat_map(|c| c.params())
            .chain(self.refiner.params())
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut T> {
        let Self {
            correlations,
            refiner,
        } = self;
        correlations
            .iter_mut()
            .flat_map(|c| c.params_mut())
            .chain(refiner.params_mut())
            .collect()
    }
}

/// `C = A · M` reshaped to the query's square token grid.
pub fn coarse_mask(a: &AttentionMap, support_masks: &Matrix) -> Result<Grid> {
    let values = a.values();
    if support_masks.cols() != 1 || support_masks.rows() != values.cols() {
        return Err(Error::shape(
            "coarse_mask",
            values.shape(),
            support_masks.shape(),
        ));
    }
    if support_masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("support masks must be binary"));
    }
    let side = grid_side(values.rows()).ok_or_else(|| {
        Error::contract(format!(
            "{} query tokens do not form a square grid",
            values.rows()
        ))
    })?;
    // rows sum to one only up to rounding
    let c = values.matmul(support_masks)?.map(|v| v.clamp(0.0, 1.0));
    Grid::from_matrix(c, side, side)
}

/// Support indices kept for the episode, in pool order.
pub fn select_supports(e: &Episode, model: &SegModel, prune: &PruneConfig) -> Result<Vec<usize>> {
    let n = e.supports.len();
    if !prune.is_active(n) {
        return Ok((0..n).collect());
    }
    let projectors = model
        .correlations
        .iter()
        .map(|c| match c {
            Correlation::Symmetric { heads, .. } => Ok(heads.clone()),
            Correlation::Standard { .. } => Err(Error::contract(
                "support pruning needs Symmetric Correlation layers",
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = e.num_layers();
    let pools: Vec<Vec<_>> = (0..layers)
        .map(|l| {
            e.supports
                .iter()
                .map(|s| s.layers.layers()[l].clone())
                .collect()
        })
        .collect();
    let terms = multilayer_terms(&pools, e.query.layers(), &projectors)?;
    let mut kept = greedy_select(&terms, prune.keep.min(n))?.selected;
    kept.sort_unstable();
    Ok(kept)
}

/// Constant inputs of one forward pass.
struct Prepared {
    kept: Vec<usize>,
    query: Vec<Matrix>,
    supports: Vec<Matrix>,
    masks: Vec<Matrix>,
    spans: Vec<Vec<Span>>,
    sides: Vec<usize>,
    pooled: Matrix,
    truth: Matrix,
    out_h: usize,
    out_w: usize,
}

fn prepare(e: &Episode, model: &SegModel, cfg: &PipelineConfig) -> Result<Prepared> {
    if model.num_layers() != e.num_layers() {
        return Err(Error::contract(format!(
            "model has {} layers but the episode has {}",
            model.num_layers(),
            e.num_layers()
        )));
    }
    let kept = select_supports(e, model, &cfg.prune)?;
    let layers = e.num_layers();
    let mut supports = Vec::with_capacity(layers);
    let mut masks = Vec::with_capacity(layers);
    let mut spans = Vec::with_capacity(layers);
    for l in 0..layers {
        let tokens: Vec<&Matrix> = kept
            .iter()
            .map(|&i| e.supports[i].layers.layers()[l].values())
            .collect();
        let cols: Vec<Matrix> = kept.iter().map(|&i| e.supports[i].mask_column(l)).collect();
        spans.push(spans_for(tokens.iter().map(|t| t.rows())));
        supports.push(Matrix::concat_rows(&tokens)?);
        masks.push(Matrix::concat_rows(&cols.iter().collect::<Vec<_>>())?);
    }
    let fine = supports.last().expect("at least one layer");
    let pooled = match cfg.pooling {
        Pooling::Joint => fine.mean_rows(),
        Pooling::PerSupport => {
            let means = spans[layers - 1]
                .iter()
                .map(|s| Ok(fine.slice_rows(s.head, s.tail)?.mean_rows()))
                .collect::<Result<Vec<_>>>()?;
            Matrix::concat_rows(&means.iter().collect::<Vec<_>>())?.mean_rows()
        }
    };
    Ok(Prepared {
        kept,
        query: e
            .query
            .layers()
            .iter()
            .map(|t| t.values().clone())
            .collect(),
        supports,
        masks,
        spans,
        sides: e.query.sides(),
        pooled,
        truth: e.query_truth.to_matrix(),
        out_h: e.query_truth.height(),
        out_w: e.query_truth.width(),
    })
}

/// Probabilities at truth resolution plus each layer's attention.
fn forward_graph<O: Ops>(
    ops: &mut O,
    model: &SegModel<O::T>,
    p: &Prepared,
) -> Result<(O::T, Vec<O::T>)> {
    let mut coarse = Vec::with_capacity(p.query.len());
    let mut attention = Vec::with_capacity(p.query.len());
    for (l, corr) in model.correlations.iter().enumerate() {
        let xq = ops.constant(p.query[l].clone());
        let xs = ops.constant(p.supports[l].clone());
        let a = corr.attend_on(ops, &xq, &xs)?;
        let m = ops.constant(p.masks[l].clone());
        coarse.push(ops.matmul(&a, &m)?);
        attention.push(a);
    }
    let query_fine = ops.constant(p.query[p.query.len() - 1].clone());
    let pooled = ops.constant(p.pooled.clone());
    let mut logits = model
        .refiner
        .refine_on(ops, &coarse, &p.sides, &query_fine, &pooled)?;
    let side = p.sides[p.sides.len() - 1];
    if (side, side) != (p.out_h, p.out_w) {
        logits = ops.bilinear(&logits, side, side, p.out_h, p.out_w)?;
    }
    Ok((ops.sigmoid(&logits), attention))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutput {
    pub prediction: PredictionMask,
    /// One report per layer, coarse to fine, over the kept supports.
    pub reports: Vec<ContributionReport>,
    /// Indices into the episode's supports, in pool order.
    pub kept: Vec<usize>,
    pub kept_ids: Vec<u32>,
}

pub fn forward_episode(
    e: &Episode,
    model: &SegModel,
    cfg: &PipelineConfig,
) -> Result<EpisodeOutput> {
    let p = prepare(e, model, cfg)?;
    let (probs, attention) = forward_graph(&mut Eager, model, &p)?;
    let reports = attention
        .into_iter()
        .zip(&p.spans)
        .map(|(a, spans)| contribution_index(&AttentionMap::from_parts_unchecked(a, spans.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeOutput {
        prediction: PredictionMask::from_probs(Grid::from_matrix(probs, p.out_h, p.out_w)?)?,
        reports,
        kept_ids: p.kept.iter().map(|&i| e.supports[i].id).collect(),
        kept: p.kept,
    })
}

fn check_dataset(episodes: &[Episode]) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::contract("the dataset is empty"));
    }
    Ok(())
}

/// Mean BCE over the episodes.
pub fn dataset_loss(model: &SegModel, episodes: &[Episode], cfg: &PipelineConfig) -> Result<f64> {
    check_dataset(episodes)?;
    let mut total = 0.0;
    for e in episodes {
        let p = prepare(e, model, cfg)?;
        let (probs, _) = forward_graph(&mut Eager, model, &p)?;
        total += Eager.bce(&probs, &p.truth)?.get(0, 0);
    }
    Ok(total / episodes.len() as f64)
}

/// [`dataset_loss`] and its gradient, one matrix per parameter in the
/// order of [`SegModel::flat_params`]. Support selection is not
/// differentiated.
pub fn loss_and_gradient(
    model: &SegModel,
    episodes: &[Episode],
    cfg: &PipelineConfig,
) -> Result<(f64, Vec<Matrix>)> {
    check_dataset(episodes)?;
    let mut grads: Vec<Matrix> = model
        .params()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut total = 0.0;
    for e in episodes {
        let p = prepare(e, model, cfg)?;
        let mut tape = Tape::new();
        let bound = model.map(&mut |m| tape.leaf(m.clone()));
        let (probs, _) = forward_graph(&mut tape, &bound, &p)?;
        let loss = tape.bce(&probs, &p.truth)?;
        total += tape.value(&loss).get(0, 0);
        let g = tape.backward(loss)?;
        for (acc, v) in grads.iter_mut().zip(bound.params()) {
            *acc = acc.add(g.get(*v))?;
        }
    }
    let n = episodes.len() as f64;
    Ok((
        total / n,
        grads.into_iter().map(|g| g.scale(1.0 / n)).collect(),
    ))
}

/// Flattened form of [`loss_and_gradient`].
pub fn flat_gradient(
    model: &SegModel,
    episodes: &[Episode],
    cfg: &PipelineConfig,
) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = loss_and_gradient(model, episodes, cfg)?;
    Ok((
        loss,
        grads
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect(),
    ))
}
