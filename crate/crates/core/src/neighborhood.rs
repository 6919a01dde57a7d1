//! Exact cosine-similarity ranking of a feature pool.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::matrix::{dot, norm, LabelVector, Matrix};

/// Queries per block in [`rank_batch`]; a block shares one pass over the pool.
const QUERY_BLOCK: usize = 16;

/// Reference set of embeddings with unit-norm rows.
#[derive(Debug, Clone)]
pub struct Pool {
    dim: usize,
    features: Matrix,
    ids: Vec<usize>,
    labels: Option<LabelVector>,
}

impl Pool {
    /// Normalizes every row; zero rows are rejected.
    pub fn new(features: &Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyMatrix {
                rows: 0,
                cols: features.cols(),
            });
        }
        let mut normalized = features.clone();
        for i in 0..normalized.rows() {
            let row = normalized.row_mut(i);
            let len = norm(row);
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::ZeroNormRow(i));
            }
            row.iter_mut().for_each(|v| *v /= len);
        }
        Ok(Self {
            dim: features.cols(),
            ids: (0..features.rows()).collect(),
            features: normalized,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: LabelVector) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: self.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Attaches original sample indices (e.g. after subsampling).
    pub fn with_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: self.len(),
            });
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&LabelVector> {
        self.labels.as_ref()
    }

    /// Unit-normalized rows.
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    fn normalized_query(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let len = norm(query);
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::ZeroNormQuery);
        }
        Ok(query.iter().map(|v| v / len).collect())
    }

    /// Cosine similarity of `query` to every pool row.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        let q = self.normalized_query(query)?;
        Ok(self.features.iter_rows().map(|r| dot(&q, r)).collect())
    }
}

/// Strict ordering used everywhere: larger score first, then smaller index.
#[inline]
pub(crate) fn rank_cmp(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Pool indices ordered nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Permutation {
    order: Vec<usize>,
    similarities: Vec<f64>,
}

impl Permutation {
    /// Orders indices by descending score; ties go to the lower index.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_unstable_by(|&a, &b| rank_cmp(scores, a, b));
        let similarities = order.iter().map(|&i| scores[i]).collect();
        Self {
            order,
            similarities,
        }
    }

    /// Builds a permutation from an explicit order. Similarities are
    /// synthesized as `-(position)` so the monotonicity invariant holds.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::PermutationDomainMismatch);
            }
        }
        let similarities = (0..n).map(|p| -(p as f64)).collect();
        Ok(Self {
            order,
            similarities,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn similarities(&self) -> &[f64] {
        &self.similarities
    }

    /// `positions()[item]` is the 0-based position of `item`.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (p, &i) in self.order.iter().enumerate() {
            pos[i] = p;
        }
        pos
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub k: usize,
}

pub fn rank(query: &[f64], pool: &Pool) -> Result<Permutation> {
    Ok(Permutation::from_scores(&pool.similarities(query)?))
}

pub fn rank_batch(queries: &Matrix, pool: &Pool) -> Result<Vec<Permutation>> {
    rank_batch_with(queries, pool, Parallelism::default())
}

/// Blocked batch ranking. Each query's similarity vector is accumulated
/// with the same dot product as [`rank`], so the outputs are bit-identical.
pub fn rank_batch_with(
    queries: &Matrix,
    pool: &Pool,
    par: Parallelism,
) -> Result<Vec<Permutation>> {
    if queries.rows() == 0 {
        return Ok(Vec::new());
    }
    let blocks = queries.rows().div_ceil(QUERY_BLOCK);
    let per_block = par.try_map_range(blocks, |b| {
        let start = b * QUERY_BLOCK;
        let end = (start + QUERY_BLOCK).min(queries.rows());
        let normalized = (start..end)
            .map(|i| pool.normalized_query(queries.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let mut sims = vec![Vec::with_capacity(pool.len()); normalized.len()];
        for row in pool.features.iter_rows() {
            for (q, s) in normalized.iter().zip(sims.iter_mut()) {
                s.push(dot(q, row));
            }
        }
        Ok::<_, Error>(
            sims.iter()
                .map(|s| Permutation::from_scores(s))
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(per_block.into_iter().flatten().collect())
}

pub fn top_k(perm: &Permutation, k: usize) -> Result<NeighborSet> {
    check_k(k, perm.len())?;
    Ok(NeighborSet {
        indices: perm.order[..k].to_vec(),
        k,
    })
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    Ok(())
}

/// Indices of the `k` highest scores in rank order, without a full sort.
pub(crate) fn top_k_scores(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, |&a, &b| rank_cmp(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_cmp(scores, a, b));
    idx
}

/// Similarity-weighted kNN vote in the pool; returns accuracy on the
/// evaluation rows. Class ties resolve to the smaller class id.
pub fn knn_proxy_accuracy(
    pool: &Pool,
    eval_features: &Matrix,
    eval_labels: &LabelVector,
    k: usize,
) -> Result<f64> {
    let pool_labels = pool.labels().ok_or(Error::MissingPoolLabels)?;
    check_k(k, pool.len())?;
    if eval_features.rows() != eval_labels.len() {
        return Err(Error::LengthMismatch {
            left: eval_features.rows(),
            right: eval_labels.len(),
        });
    }
    if eval_labels.is_empty() {
        return Err(Error::TooFewElements {
            needed: 1,
            found: 0,
        });
    }
    let classes = pool_labels
        .as_slice()
        .iter()
        .chain(eval_labels.as_slice())
        .max()
        .map_or(0, |m| m + 1);
    let correct = Parallelism::default().try_map_range(eval_features.rows(), |i| {
        let sims = pool.similarities(eval_features.row(i))?;
        let mut votes = vec![0.0f64; classes];
        for j in top_k_scores(&sims, k) {
            votes[pool_labels.as_slice()[j]] += sims[j];
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        Ok::<_, Error>(usize::from(best == eval_labels.as_slice()[i]))
    })?;
    Ok(correct.iter().sum::<usize>() as f64 / correct.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn eye3() -> Pool {
        Pool::new(&Matrix::new(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()).unwrap()
    }

    #[test]
    fn self_similarity_first() {
        let data = Matrix::new(3, 2, vec![1.0, 0.2, -0.3, 1.0, 0.5, 0.5]).unwrap();
        let pool = Pool::new(&data).unwrap();
        let p = rank(data.row(1), &pool).unwrap();
        assert_eq!(p.order()[0], 1);
        assert_abs_diff_eq!(p.similarities()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_vector_fixture() {
        let pool = eye3();
        let q = [1.0, 0.5, 0.0];
        let p = rank(&q, &pool).unwrap();
        assert_eq!(p.order(), &[0, 1, 2]);
        // 1/sqrt(1.25) and 0.5/sqrt(1.25)
        assert_abs_diff_eq!(p.similarities()[0], 0.894_427_190_999_915_9, epsilon = 1e-12);
        assert_abs_diff_eq!(p.similarities()[1], 0.447_213_595_499_957_9, epsilon = 1e-12);
        assert_eq!(p.similarities()[2], 0.0);
        assert_eq!(top_k(&p, 1).unwrap().indices, vec![0]);
        assert_eq!(top_k(&p, 3).unwrap().indices, vec![0, 1, 2]);
        assert!(matches!(top_k(&p, 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(top_k(&p, 4), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let pool =
            Pool::new(&Matrix::new(3, 2, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let p = rank(&[1.0, 0.0], &pool).unwrap();
        assert_eq!(p.order(), &[1, 2, 0]);
    }

    #[test]
    fn zero_norm_errors() {
        assert!(matches!(
            Pool::new(&Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap()),
            Err(Error::ZeroNormRow(1))
        ));
        assert!(matches!(rank(&[0.0, 0.0, 0.0], &eye3()), Err(Error::ZeroNormQuery)));
        assert!(matches!(
            rank(&[1.0, 0.0], &eye3()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_edge_cases() {
        let pool = eye3();
        assert!(rank_batch(&Matrix::zeros(0, 3), &pool).unwrap().is_empty());
        let q = Matrix::new(1, 3, vec![0.2, 0.9, -0.1]).unwrap();
        assert_eq!(
            rank_batch(&q, &pool).unwrap()[0],
            rank(q.row(0), &pool).unwrap()
        );
    }

    #[test]
    fn top_k_scores_matches_sort() {
        let scores = [0.3, 0.9, 0.3, -1.0, 0.9, 0.5];
        let full = Permutation::from_scores(&scores);
        for k in 1..=scores.len() {
            assert_eq!(top_k_scores(&scores, k), full.order()[..k].to_vec());
        }
    }

    #[test]
    fn from_order_validates() {
        assert!(Permutation::from_order(vec![2, 0, 1]).is_ok());
        assert!(Permutation::from_order(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_order(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn knn_self_match() {
        let data = Matrix::new(4, 2, vec![1.0, 0.1, 0.1, 1.0, -1.0, 0.2, 0.3, -1.0]).unwrap();
        let labels = LabelVector::new(vec![0, 1, 2, 1]);
        let pool = Pool::new(&data).unwrap().with_labels(labels.clone()).unwrap();
        assert_eq!(knn_proxy_accuracy(&pool, &data, &labels, 1).unwrap(), 1.0);
        assert!(matches!(
            knn_proxy_accuracy(&pool, &data, &labels, 5),
            Err(Error::KOutOfRange { .. })
        ));
        let unlabeled = Pool::new(&data).unwrap();
        assert!(matches!(
            knn_proxy_accuracy(&unlabeled, &data, &labels, 1),
            Err(Error::MissingPoolLabels)
        ));
    }

    #[test]
    fn knn_majority_at_equal_similarity() {
        // Two class-0 points and one class-1 point at the same angle from
        // the query; a far class-1 point sits outside the k=3 neighborhood.
        let data = Matrix::new(
            4,
            2,
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 0.0],
        )
        .unwrap();
        let pool = Pool::new(&data)
            .unwrap()
            .with_labels(LabelVector::new(vec![0, 1, 0, 1]))
            .unwrap();
        let q = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(
            knn_proxy_accuracy(&pool, &q, &LabelVector::new(vec![0]), 3).unwrap(),
            1.0
        );
        assert_eq!(
            knn_proxy_accuracy(&pool, &q, &LabelVector::new(vec![1]), 3).unwrap(),
            0.0
        );
    }
}
