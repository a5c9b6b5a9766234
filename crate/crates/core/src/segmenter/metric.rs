use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Grid;

/// A sigmoid output together with its binarization at one half.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMask {
    pub probs: Grid,
    pub binary: Grid,
}

impl PredictionMask {
    pub fn from_probs(probs: Grid) -> Result<Self> {
        if probs.channels() != 1 || probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract(
                "prediction probabilities must be one channel in [0, 1]",
            ));
        }
        let bits = probs
            .data()
            .iter()
            .map(|&p| if p > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let binary = Grid::new(probs.height(), probs.width(), 1, bits)?;
        Ok(Self { probs, binary })
    }
}

/// Per-class IoU accumulated over all of that class's samples, averaged
/// over classes. A class whose union is empty scores 1.
pub fn miou<S: AsRef<str>>(
    preds: &[PredictionMask],
    truths: &[Grid],
    classes: &[S],
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::contract("miou needs at least one sample"));
    }
    if preds.len() != truths.len() || preds.len() != classes.len() {
        return Err(Error::contract(format!(
            "miou got {} predictions, {} truths and {} labels",
            preds.len(),
            truths.len(),
            classes.len()
        )));
    }
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for ((p, t), c) in preds.iter().zip(truths).zip(classes) {
        let b = &p.binary;
        if (b.height(), b.width(), b.channels()) != (t.height(), t.width(), t.channels()) {
            return Err(Error::shape(
                "miou",
                (b.height() * b.width(), b.channels()),
                (t.height() * t.width(), t.channels()),
            ));
        }
        let entry = counts.entry(c.as_ref()).or_default();
        for (&x, &y) in b.data().iter().zip(t.data()) {
            let (x, y) = (x > 0.5, y > 0.5);
            entry.0 += u64::from(x && y);
            entry.1 += u64::from(x || y);
        }
    }
    let total: f64 = counts
        .values()
        .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum();
    Ok(total / counts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> Grid {
        Grid::new(h, w, 1, bits.iter().map(|&b| f64::from(b)).collect()).unwrap()
    }

    fn pred(g: &Grid) -> PredictionMask {
        PredictionMask::from_probs(g.clone()).unwrap()
    }

    #[test]
    fn binary_threshold_is_strict() {
        let p =
            PredictionMask::from_probs(Grid::new(1, 3, 1, vec![0.5, 0.51, 0.2]).unwrap()).unwrap();
        assert_eq!(p.binary.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn perfect_and_disjoint() {
        let t = mask(2, 2, &[1, 0, 0, 1]);
        assert_eq!(
            miou(&[pred(&t)], std::slice::from_ref(&t), &["a"]).unwrap(),
            1.0
        );
        let p = mask(2, 2, &[0, 1, 1, 0]);
        assert_eq!(miou(&[pred(&p)], &[t], &["a"]).unwrap(), 0.0);
    }

    #[test]
    fn half_coverage() {
        let t = Grid::filled(4, 4, 1, 1.0);
        let mut p = Grid::filled(4, 4, 1, 0.0);
        for y in 0..4 {
            for x in 0..2 {
                p.set(y, x, 0, 1.0);
            }
        }
        assert_eq!(miou(&[pred(&p)], &[t], &["a"]).unwrap(), 0.5);
    }

    #[test]
    fn classes_pool_then_average() {
        // class a: 1/2 and 1/1 pooled -> 2/3; class b: empty union -> 1
        let t1 = mask(1, 2, &[1, 1]);
        let p1 = mask(1, 2, &[1, 0]);
        let t2 = mask(1, 2, &[1, 0]);
        let zero = mask(1, 2, &[0, 0]);
        let got = miou(
            &[pred(&p1), pred(&t2), pred(&zero)],
            &[t1, t2.clone(), zero.clone()],
            &["a", "a", "b"],
        )
        .unwrap();
        assert!((got - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_contract_error() {
        let none: [&str; 0] = [];
        assert!(matches!(miou(&[], &[], &none), Err(Error::Contract(_))));
    }
}
