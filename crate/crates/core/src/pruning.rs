//! Support pruning: score every candidate support by the shared projection
//! of its mean token against the projected mean query token, then keep the
//! `N'` best.
//!
//! The score of a subset is the sum of its members' terms, so the greedy
//! selection is exactly optimal. [`greedy_prune`] keeps the step-by-step
//! scan (recomputing the subset score for each candidate) as a reference;
//! [`topk_prune`] is the direct top-k equivalent.

use crate::correlation::{
    contribution_index, symmetric_attention, ScProjector, ScaleMode, SupportPack, TokenMatrix,
};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Pruning kicks in above `threshold` supports and keeps `keep` of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneConfig {
    pub enabled: bool,
    pub threshold: usize,
    pub keep: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 30,
            keep: 30,
        }
    }
}

impl PruneConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn is_active(&self, pool_size: usize) -> bool {
        self.enabled && pool_size > self.threshold
    }
}

/// Per-candidate score terms for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneScoreTable {
    pub terms: Vec<f64>,
    /// `f(mean query token)`, `1 x d`.
    pub query_embedding: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    /// Pool indices in selection order.
    pub selected: Vec<usize>,
    pub objective: f64,
    /// Subset-score evaluations performed.
    pub evaluations: usize,
}

/// `f(mean)` of a token matrix, concatenated over heads.
fn project_mean(tokens: &TokenMatrix, heads: &[ScProjector]) -> Result<Matrix> {
    let d = tokens.dim();
    let h = heads.len();
    if h == 0 || !d.is_multiple_of(h) {
        return Err(Error::Config(format!(
            "feature dim {d} is not divisible by {h} heads"
        )));
    }
    let dh = d / h;
    let mean = tokens.mean_token();
    let parts = heads
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.dim() != dh {
                return Err(Error::shape("theta_term", (1, dh), p.f1.weight.shape()));
            }
            p.project(&mean.slice_cols(i * dh, (i + 1) * dh)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::concat_cols(&parts.iter().collect::<Vec<_>>())
}

fn dot_rows(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `f(mean support token) · f(mean query token)` for a single projector.
pub fn theta_term(support: &TokenMatrix, query: &TokenMatrix, p: &ScProjector) -> Result<f64> {
    theta_term_heads(support, query, std::slice::from_ref(p))
}

/// [`theta_term`] for a multi-head layer: heads see disjoint channel slices
/// and their products add up.
pub fn theta_term_heads(
    support: &TokenMatrix,
    query: &TokenMatrix,
    heads: &[ScProjector],
) -> Result<f64> {
    if support.dim() != query.dim() {
        return Err(Error::shape(
            "theta_term",
            support.values().shape(),
            query.values().shape(),
        ));
    }
    Ok(dot_rows(
        &project_mean(support, heads)?,
        &project_mean(query, heads)?,
    ))
}

/// Scores every pool member against the query.
pub fn score_table(
    pool: &[TokenMatrix],
    query: &TokenMatrix,
    heads: &[ScProjector],
) -> Result<PruneScoreTable> {
    let q = project_mean(query, heads)?;
    let terms = pool
        .iter()
        .map(|s| {
            if s.dim() != query.dim() {
                return Err(Error::shape(
                    "score_table",
                    s.values().shape(),
                    query.values().shape(),
                ));
            }
            Ok(dot_rows(&project_mean(s, heads)?, &q))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PruneScoreTable {
        terms,
        query_embedding: q,
    })
}

fn check_budget(pool: usize, n_prime: usize) -> Result<()> {
    if n_prime == 0 || n_prime > pool {
        return Err(Error::contract(format!(
            "cannot keep {n_prime} supports out of a pool of {pool}"
        )));
    }
    Ok(())
}

/// Greedy subset retrieval over precomputed terms.
///
/// Each of the `n_prime` rounds scans the unselected candidates in index
/// order, evaluates the score of `selected ∪ {candidate}` and keeps the
/// candidate only on a strictly larger score, so ties go to the lowest index.
pub fn greedy_select(terms: &[f64], n_prime: usize) -> Result<PruneResult> {
    check_budget(terms.len(), n_prime)?;
    let mut selected: Vec<usize> = Vec::with_capacity(n_prime);
    let mut taken = vec![false; terms.len()];
    let mut evaluations = 0;
    let mut objective = 0.0;
    for _ in 0..n_prime {
        let mut best = f64::NEG_INFINITY;
        let mut pick = None;
        for n in 0..terms.len() {
            if taken[n] {
                continue;
            }
            let score = selected.iter().map(|&i| terms[i]).sum::<f64>() + terms[n];
            evaluations += 1;
            if score > best {
                best = score;
                pick = Some(n);
            }
        }
        let n = pick.expect("n_prime <= pool size leaves a candidate");
        taken[n] = true;
        selected.push(n);
        objective = best;
    }
    Ok(PruneResult {
        selected,
        objective,
        evaluations,
    })
}

pub fn greedy_prune(
    pool: &[TokenMatrix],
    query: &TokenMatrix,
    p: &ScProjector,
    n_prime: usize,
) -> Result<PruneResult> {
    check_budget(pool.len(), n_prime)?;
    let table = score_table(pool, query, std::slice::from_ref(p))?;
    greedy_select(&table.terms, n_prime)
}

/// The `n_prime` largest terms of a table, ties to the lowest index.
pub fn topk_prune(table: &PruneScoreTable, n_prime: usize) -> Result<PruneResult> {
    topk_select(&table.terms, n_prime)
}

/// The `n_prime` largest terms, ties to the lowest index.
pub fn topk_select(terms: &[f64], n_prime: usize) -> Result<PruneResult> {
    check_budget(terms.len(), n_prime)?;
    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by(|&a, &b| terms[b].total_cmp(&terms[a]).then(a.cmp(&b)));
    order.truncate(n_prime);
    let objective = order.iter().map(|&i| terms[i]).sum();
    Ok(PruneResult {
        selected: order,
        objective,
        evaluations: terms.len(),
    })
}

/// Averages each support's term over layers, then selects greedily.
///
/// `pools[l][i]` is support `i` at layer `l`; `query_layers[l]` and
/// `projectors[l]` (heads) belong to the same layer.
pub fn multilayer_terms(
    pools: &[Vec<TokenMatrix>],
    query_layers: &[TokenMatrix],
    projectors: &[Vec<ScProjector>],
) -> Result<Vec<f64>> {
    let layers = pools.len();
    if layers == 0 || query_layers.len() != layers || projectors.len() != layers {
        return Err(Error::contract(format!(
            "ragged layers: {} pools, {} query layers, {} projector sets",
            layers,
            query_layers.len(),
            projectors.len()
        )));
    }
    let n = pools[0].len();
    if pools.iter().any(|p| p.len() != n) {
        return Err(Error::contract("every layer must list the same supports"));
    }
    let mut sum = vec![0.0; n];
    for ((pool, q), heads) in pools.iter().zip(query_layers).zip(projectors) {
        let table = score_table(pool, q, heads)?;
        for (s, t) in sum.iter_mut().zip(&table.terms) {
            *s += t;
        }
    }
    Ok(sum.into_iter().map(|s| s / layers as f64).collect())
}

pub fn multilayer_prune(
    pools: &[Vec<TokenMatrix>],
    query_layers: &[TokenMatrix],
    projectors: &[Vec<ScProjector>],
    n_prime: usize,
) -> Result<PruneResult> {
    let terms = multilayer_terms(pools, query_layers, projectors)?;
    greedy_select(&terms, n_prime)
}

/// Both sides of the mean-token bound for one support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JensenGap {
    /// Contribution index under full SC over the whole pool.
    pub delta: f64,
    pub term: f64,
    /// `delta - term`; its sign is not guaranteed.
    pub gap: f64,
}

pub fn jensen_gap_report(
    pool: &[TokenMatrix],
    query: &TokenMatrix,
    p: &ScProjector,
) -> Result<Vec<JensenGap>> {
    let pack = SupportPack::new(pool.to_vec())?;
    let a = symmetric_attention(&pack, query, p, ScaleMode::SqrtD)?;
    let report = contribution_index(&a)?;
    let table = score_table(pool, query, std::slice::from_ref(p))?;
    Ok(report
        .per_support_delta
        .iter()
        .zip(&table.terms)
        .map(|(&delta, &term)| JensenGap {
            delta,
            term,
            gap: delta - term,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::Affine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TokenMatrix {
        TokenMatrix::new(Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn table(terms: &[f64]) -> PruneScoreTable {
        PruneScoreTable {
            terms: terms.to_vec(),
            query_embedding: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn theta_with_warm_start_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tokens(&mut rng, 5, 4);
        let p = ScProjector::from_query_projection(Affine::identity(4)).unwrap();
        let m = x.mean_token();
        let sq: f64 = m.data().iter().map(|v| v * v).sum();
        assert!((theta_term(&x, &x, &p).unwrap() - sq / 4.0).abs() < 1e-15);
    }

    #[test]
    fn theta_orthogonal_means_is_zero() {
        let p = ScProjector::new(Affine::constant(2, 2, 1.0), Affine::identity(2)).unwrap();
        let s = TokenMatrix::new(Matrix::from_rows(&[[1.0, 0.5], [1.0, -0.5]]).unwrap()).unwrap();
        let q = TokenMatrix::new(Matrix::from_rows(&[[0.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(theta_term(&s, &q, &p).unwrap(), 0.0);
    }

    #[test]
    fn theta_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = tokens(&mut rng, 6, 3);
        let q = tokens(&mut rng, 4, 3);
        let p = ScProjector::random(&mut rng, 3, 0.8);
        let f = |t: &TokenMatrix| -> Vec<f64> {
            let mean: Vec<f64> = (0..3)
                .map(|c| {
                    (0..t.tokens()).map(|r| t.values().get(r, c)).sum::<f64>() / t.tokens() as f64
                })
                .collect();
            let lin = |a: &Affine| -> Vec<f64> {
                (0..3)
                    .map(|j| {
                        a.bias.get(0, j) + (0..3).map(|k| mean[k] * a.weight.get(k, j)).sum::<f64>()
                    })
                    .collect()
            };
            let (m, dir) = (lin(&p.f1), lin(&p.f2));
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            m.iter().zip(&dir).map(|(a, b)| a * b / norm).collect()
        };
        let expect: f64 = f(&s).iter().zip(f(&q)).map(|(a, b)| a * b).sum();
        assert!((theta_term(&s, &q, &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn greedy_on_fixed_terms() {
        let r = greedy_select(&[0.9, 0.1, 0.5], 2).unwrap();
        assert_eq!(r.selected, vec![0, 2]);
        assert!((r.objective - 1.4).abs() < 1e-15);
        assert_eq!(r.evaluations, 3 + 2);

        let r = greedy_select(&[0.2, 0.7, 0.1, 0.4], 4).unwrap();
        assert_eq!(r.selected, vec![1, 3, 0, 2]);
        assert!(greedy_select(&[0.1], 2).is_err());
        assert!(greedy_select(&[0.1], 0).is_err());
    }

    #[test]
    fn topk_on_fixed_terms() {
        let r = topk_prune(&table(&[0.9, 0.1, 0.5]), 2).unwrap();
        assert_eq!(r.selected, vec![0, 2]);
        let r = topk_prune(&table(&[0.3; 5]), 3).unwrap();
        assert_eq!(r.selected, vec![0, 1, 2]);
        assert_eq!(greedy_select(&[0.3; 5], 3).unwrap().selected, vec![0, 1, 2]);
    }

    #[test]
    fn single_layer_equals_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool: Vec<_> = (0..6).map(|_| tokens(&mut rng, 4, 4)).collect();
        let q = tokens(&mut rng, 4, 4);
        let p = ScProjector::random(&mut rng, 4, 0.7);
        let direct = greedy_prune(&pool, &q, &p, 3).unwrap();
        let layered = multilayer_prune(&[pool], &[q], &[vec![p]], 3).unwrap();
        assert_eq!(direct, layered);
    }

    #[test]
    fn averaged_tie_goes_to_lower_index() {
        // f(x) = |x| in one dimension, so each term is |support|·|query|
        let p = ScProjector::new(Affine::identity(1), Affine::identity(1)).unwrap();
        let t = |v: f64| TokenMatrix::new(Matrix::row_vector(&[v]).unwrap()).unwrap();
        let pools = vec![vec![t(0.2), t(0.8)], vec![t(0.8), t(0.2)]];
        let qs = [t(1.0), t(1.0)];
        let ps = [vec![p.clone()], vec![p]];
        let terms = multilayer_terms(&pools, &qs, &ps).unwrap();
        assert_eq!(terms[0], terms[1]);
        assert_eq!(
            multilayer_prune(&pools, &qs, &ps, 1).unwrap().selected,
            vec![0]
        );
        assert_eq!(
            multilayer_prune(&pools, &qs, &ps, 2).unwrap().selected,
            vec![0, 1]
        );
    }

    #[test]
    fn ragged_layers_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = tokens(&mut rng, 2, 2);
        let p = ScProjector::random(&mut rng, 2, 0.5);
        let pools = vec![vec![q.clone(), q.clone()], vec![q.clone()]];
        let err = multilayer_terms(
            &pools,
            &[q.clone(), q.clone()],
            &[vec![p.clone()], vec![p.clone()]],
        );
        assert!(matches!(err, Err(Error::Contract(_))));
        let err = multilayer_terms(&pools[..1], &[q.clone(), q], &[vec![p]]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn three_layer_manual_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let pools: Vec<Vec<TokenMatrix>> = (0..3)
            .map(|_| (0..n).map(|_| tokens(&mut rng, 3, 4)).collect())
            .collect();
        let qs: Vec<TokenMatrix> = (0..3).map(|_| tokens(&mut rng, 5, 4)).collect();
        let ps: Vec<Vec<ScProjector>> = (0..3)
            .map(|_| vec![ScProjector::random(&mut rng, 4, 0.6)])
            .collect();
        let got = multilayer_prune(&pools, &qs, &ps, 3).unwrap();
        let mut avg = vec![0.0; n];
        for l in 0..3 {
            for i in 0..n {
                avg[i] += theta_term(&pools[l][i], &qs[l], &ps[l][0]).unwrap() / 3.0;
            }
        }
        let oracle = topk_prune(&table(&avg), 3).unwrap();
        assert_eq!(got.selected, oracle.selected);
    }

    #[test]
    fn jensen_report_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = tokens(&mut rng, 1, 3);
        let p = ScProjector::random(&mut rng, 3, 0.6);
        let r = jensen_gap_report(std::slice::from_ref(&q), &q, &p).unwrap();
        assert_eq!(r[0].delta, 1.0);
        assert_eq!(r[0].gap, 1.0 - r[0].term);
        let pool: Vec<_> = (0..5).map(|_| tokens(&mut rng, 3, 3)).collect();
        assert_eq!(jensen_gap_report(&pool, &q, &p).unwrap().len(), 5);
    }
}
