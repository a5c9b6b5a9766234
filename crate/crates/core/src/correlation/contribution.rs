use super::attention::AttentionMap;
use crate::error::{Error, Result};

/// Per-support contribution values and, when a support is designated, how
/// far it stands out from the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    pub per_support_delta: Vec<f64>,
    pub designated: Option<usize>,
    pub mean_others: Option<f64>,
    pub deviation: Option<f64>,
}

impl ContributionReport {
    pub fn new(per_support_delta: Vec<f64>) -> Self {
        Self {
            per_support_delta,
            designated: None,
            mean_others: None,
            deviation: None,
        }
    }

    /// Fills in `mean_others` and `deviation` for support `designated`.
    pub fn with_designated(mut self, designated: usize) -> Result<Self> {
        let (mean_others, dev) = deviation_parts(&self.per_support_delta, designated)?;
        self.designated = Some(designated);
        self.mean_others = Some(mean_others);
        self.deviation = Some(dev);
        Ok(self)
    }
}

/// Contribution index: for every support, each of its token columns scores
/// the largest weight any query token gives it, and the support's value is
/// the mean of those column maxima.
pub fn contribution_index(a: &AttentionMap) -> Result<ContributionReport> {
    let m = a.values();
    let mut col_max = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (best, &v) in col_max.iter_mut().zip(m.row(r)) {
            if v > *best {
                *best = v;
            }
        }
    }
    let deltas = a
        .spans()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.is_empty() {
                return Err(Error::contract(format!("support {i} has no tokens")));
            }
            Ok(col_max[s.head..s.tail].iter().sum::<f64>() / s.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContributionReport::new(deltas))
}

fn deviation_parts(deltas: &[f64], designated: usize) -> Result<(f64, f64)> {
    if deltas.len() < 2 {
        return Err(Error::contract("deviation needs at least two supports"));
    }
    if designated >= deltas.len() {
        return Err(Error::contract(format!(
            "designated support {designated} out of range for {} supports",
            deltas.len()
        )));
    }
    let others: f64 = deltas
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != designated)
        .map(|(_, d)| d)
        .sum();
    let mean_others = others / (deltas.len() - 1) as f64;
    Ok((mean_others, deltas[designated] - mean_others))
}

/// `δ_designated − mean(δ_others)`.
pub fn deviation(report: &ContributionReport, designated: usize) -> Result<f64> {
    deviation_parts(&report.per_support_delta, designated).map(|(_, d)| d)
}
