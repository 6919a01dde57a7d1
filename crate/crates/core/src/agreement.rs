//! Ranking agreement between latent spaces.
//!
//! The primary measure is NDCG between the classifier's neighbor ranking
//! (the ideal ordering) and each foundation model's ranking of the same pool,
//! averaged over models. Spearman, Jaccard and CKA are provided as
//! alternative agreement measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::matrix::{dot, Matrix};
use crate::neighborhood::{check_k, top_k_scores, Permutation, Pool};

/// Per-pool-sample importance used by [`ndcg`].
#[derive(Debug, Clone, PartialEq)]
pub enum ImportanceFn {
    /// 1 for the first `k` items of the ideal ranking, 0 elsewhere.
    Indicator { k: usize },
    /// `1 / distances[i]`, with `distances` indexed by pool item.
    ReciprocalDistance { distances: Vec<f64> },
}

impl ImportanceFn {
    /// Importance of every item, given the ideal ranking.
    fn values(&self, pi_star: &Permutation) -> Result<Vec<f64>> {
        let n = pi_star.len();
        match self {
            ImportanceFn::Indicator { k } => {
                check_k(*k, n)?;
                let mut r = vec![0.0; n];
                for &i in &pi_star.order()[..*k] {
                    r[i] = 1.0;
                }
                Ok(r)
            }
            ImportanceFn::ReciprocalDistance { distances } => {
                if distances.len() != n {
                    return Err(Error::PermutationDomainMismatch);
                }
                if let Some(d) = distances.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "reciprocal importance needs positive finite distances, found {d}"
                    )));
                }
                let r: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
                let along: Vec<f64> = pi_star.order().iter().map(|&i| r[i]).collect();
                if along.windows(2).any(|w| w[1] > w[0]) {
                    return Err(Error::InvalidParameter(
                        "importance must be non-increasing along the ideal ranking".into(),
                    ));
                }
                Ok(r)
            }
        }
    }
}

/// Logarithm base of the position discount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogBase {
    Two,
    E,
    Ten,
    Other(f64),
}

impl LogBase {
    #[inline]
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Two => x.log2(),
            LogBase::E => x.ln(),
            LogBase::Ten => x.log10(),
            LogBase::Other(b) => x.ln() / b.ln(),
        }
    }
}

/// Discounted gain of importance `r` at 1-based `position`.
#[inline]
fn gain(r: f64, position: usize, base: LogBase) -> f64 {
    r / base.log((position + 1) as f64)
}

fn dcg(order: &[usize], r: &[f64], base: LogBase) -> f64 {
    let mut sum = 0.0;
    for (p, &item) in order.iter().enumerate() {
        let v = r[item];
        if v != 0.0 {
            sum += gain(v, p + 1, base);
        }
    }
    sum
}

/// NDCG of `pi_prime` against the ideal ranking `pi_star`, base-2 discount,
/// summed over all positions.
pub fn ndcg(pi_star: &Permutation, pi_prime: &Permutation, r: &ImportanceFn) -> Result<f64> {
    ndcg_with_base(pi_star, pi_prime, r, LogBase::Two)
}

pub fn ndcg_with_base(
    pi_star: &Permutation,
    pi_prime: &Permutation,
    r: &ImportanceFn,
    base: LogBase,
) -> Result<f64> {
    if pi_star.len() != pi_prime.len() {
        return Err(Error::PermutationDomainMismatch);
    }
    let values = r.values(pi_star)?;
    let ideal = dcg(pi_star.order(), &values, base);
    if !(ideal > 0.0) {
        return Err(Error::NonPositiveIdealDCG);
    }
    Ok(dcg(pi_prime.order(), &values, base) / ideal)
}

/// Indicator-importance NDCG from precomputed positions: `ideal_top` is the
/// first `k` items of the ideal ranking, `positions[item]` the 0-based
/// position of `item` in the candidate ranking. Summation order matches
/// [`ndcg`] exactly.
fn indicator_ndcg(ideal_top: &[usize], positions: &[usize], scratch: &mut Vec<usize>) -> f64 {
    scratch.clear();
    scratch.extend(ideal_top.iter().map(|&i| positions[i]));
    scratch.sort_unstable();
    let mut num = 0.0;
    for &p in scratch.iter() {
        num += gain(1.0, p + 1, LogBase::Two);
    }
    let mut den = 0.0;
    for p in 0..ideal_top.len() {
        den += gain(1.0, p + 1, LogBase::Two);
    }
    num / den
}

/// Mean indicator-NDCG of each foundation ranking against the classifier's.
pub fn agreement_score(
    classifier_perm: &Permutation,
    foundation_perms: &[Permutation],
    k: usize,
) -> Result<f64> {
    if foundation_perms.is_empty() {
        return Err(Error::EmptyModelList);
    }
    let r = ImportanceFn::Indicator { k };
    let mut sum = 0.0;
    for p in foundation_perms {
        sum += ndcg(classifier_perm, p, &r)?;
    }
    Ok(sum / foundation_perms.len() as f64)
}

/// Spearman correlation between the positions each item takes in two
/// rankings of the full pool.
pub fn spearman_agreement(pi_star: &Permutation, pi_prime: &Permutation) -> Result<f64> {
    if pi_star.len() != pi_prime.len() {
        return Err(Error::PermutationDomainMismatch);
    }
    spearman_from_positions(&pi_star.positions(), &pi_prime.positions())
}

fn spearman_from_positions(a: &[usize], b: &[usize]) -> Result<f64> {
    let n = a.len();
    if n < 2 {
        return Err(Error::TooFewElements {
            needed: 2,
            found: n,
        });
    }
    let d2: u64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.abs_diff(y) as u64;
            d * d
        })
        .sum();
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 as f64 / (n * (n * n - 1.0)))
}

/// Jaccard index of the two top-`k` neighbor sets.
pub fn jaccard_agreement(pi_star: &Permutation, pi_prime: &Permutation, k: usize) -> Result<f64> {
    if pi_star.len() != pi_prime.len() {
        return Err(Error::PermutationDomainMismatch);
    }
    check_k(k, pi_star.len())?;
    Ok(jaccard_sets(
        &pi_star.order()[..k],
        &pi_prime.order()[..k],
        pi_star.len(),
    ))
}

fn jaccard_sets(a: &[usize], b: &[usize], n: usize) -> f64 {
    let mut mark = vec![false; n];
    for &i in a {
        mark[i] = true;
    }
    let inter = b.iter().filter(|&&i| mark[i]).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CkaKernel {
    Linear,
    /// Gaussian kernel; bandwidth is the median pairwise distance.
    Rbf,
}

/// Centered kernel alignment between two row-aligned representations.
pub fn cka_agreement(a: &Matrix, b: &Matrix, kernel: CkaKernel) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::LengthMismatch {
            left: a.rows(),
            right: b.rows(),
        });
    }
    if a.rows() < 2 {
        return Err(Error::TooFewElements {
            needed: 2,
            found: a.rows(),
        });
    }
    let ka = centered_gram(a, kernel)?;
    let kb = centered_gram(b, kernel)?;
    let cross: f64 = ka.iter().zip(&kb).map(|(x, y)| x * y).sum();
    let na = ka.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = kb.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((cross / (na * nb)).clamp(0.0, 1.0))
}

/// `H K H` for the chosen kernel, flattened `k × k`.
fn centered_gram(x: &Matrix, kernel: CkaKernel) -> Result<Vec<f64>> {
    let k = x.rows();
    let mut gram = vec![0.0; k * k];
    let floor = match kernel {
        CkaKernel::Linear => {
            for i in 0..k {
                for j in i..k {
                    let v = dot(x.row(i), x.row(j));
                    gram[i * k + j] = v;
                    gram[j * k + i] = v;
                }
            }
            let raw = x.as_slice().iter().map(|v| v * v).fold(0.0, f64::max);
            1e-12 * raw * x.cols() as f64
        }
        CkaKernel::Rbf => {
            let mut sq = vec![0.0; k * k];
            let mut dists = Vec::with_capacity(k * (k - 1) / 2);
            for i in 0..k {
                for j in i + 1..k {
                    let d2: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                    sq[i * k + j] = d2;
                    sq[j * k + i] = d2;
                    dists.push(d2.sqrt());
                }
            }
            dists.sort_unstable_by(f64::total_cmp);
            let m = dists.len();
            let sigma = if m % 2 == 1 {
                dists[m / 2]
            } else {
                0.5 * (dists[m / 2 - 1] + dists[m / 2])
            };
            if !(sigma > 0.0) {
                return Err(Error::DegenerateFeatures(
                    "median pairwise distance is zero".into(),
                ));
            }
            let denom = 2.0 * sigma * sigma;
            for (g, s) in gram.iter_mut().zip(&sq) {
                *g = (-s / denom).exp();
            }
            1e-12
        }
    };
    let row_means: Vec<f64> = (0..k)
        .map(|i| gram[i * k..(i + 1) * k].iter().sum::<f64>() / k as f64)
        .collect();
    let total = row_means.iter().sum::<f64>() / k as f64;
    for i in 0..k {
        for j in 0..k {
            // the gram matrix is symmetric, so column means equal row means
            gram[i * k + j] += total - row_means[i] - row_means[j];
        }
    }
    let scale = gram.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !(scale > floor) {
        return Err(Error::DegenerateFeatures(
            "centered kernel matrix vanishes".into(),
        ));
    }
    Ok(gram)
}

/// Pearson correlation; used for model-vs-model agreement and for
/// agreement-vs-correctness diagnostics.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::TooFewElements {
            needed: 2,
            found: a.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of two models' per-sample agreement vectors.
pub fn pairwise_model_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveBin {
    pub center: f64,
    /// `None` for empty bins.
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// Mean correctness over equal-width bins spanning the score range.
pub fn agreement_accuracy_curve(
    scores: &[f64],
    correct: &[bool],
    bins: usize,
) -> Result<Vec<CurveBin>> {
    if scores.len() != correct.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: correct.len(),
        });
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be at least 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::TooFewElements {
            needed: 1,
            found: 0,
        });
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (&s, &c) in scores.iter().zip(correct) {
        let b = if width > 0.0 {
            (((s - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
        hits[b] += usize::from(c);
    }
    Ok((0..bins)
        .map(|b| CurveBin {
            center: lo + (b as f64 + 0.5) * width,
            accuracy: (counts[b] > 0).then(|| hits[b] as f64 / counts[b] as f64),
            count: counts[b],
        })
        .collect())
}

/// Which agreement measure a batch run computes per query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementMeasure {
    Ndcg,
    Spearman,
    Jaccard,
    Cka(CkaKernel),
}

impl AgreementMeasure {
    pub fn name(&self) -> &'static str {
        match self {
            AgreementMeasure::Ndcg => "ndcg",
            AgreementMeasure::Spearman => "spearman",
            AgreementMeasure::Jaccard => "jaccard",
            AgreementMeasure::Cka(CkaKernel::Linear) => "cka_linear",
            AgreementMeasure::Cka(CkaKernel::Rbf) => "cka_rbf",
        }
    }
}

/// Pool and query embeddings of one latent space.
#[derive(Debug, Clone, Copy)]
pub struct Space<'a> {
    pub pool: &'a Pool,
    pub queries: &'a Matrix,
}

#[derive(Debug, Clone)]
pub struct AgreementInput<'a> {
    pub classifier: Space<'a>,
    pub foundation: Vec<(String, Space<'a>)>,
}

impl AgreementInput<'_> {
    fn validate(&self) -> Result<()> {
        if self.foundation.is_empty() {
            return Err(Error::EmptyModelList);
        }
        let n = self.classifier.pool.len();
        let q = self.classifier.queries.rows();
        for (_, s) in &self.foundation {
            if s.pool.len() != n {
                return Err(Error::RowCountMismatch {
                    what: "foundation pool".into(),
                    expected: n,
                    found: s.pool.len(),
                });
            }
            if s.queries.rows() != q {
                return Err(Error::RowCountMismatch {
                    what: "foundation queries".into(),
                    expected: q,
                    found: s.queries.rows(),
                });
            }
        }
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.classifier.queries.rows()
    }
}

/// Per-query agreement scores for one neighborhood size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementVector {
    pub scores: Vec<f64>,
    pub model_ids: Vec<String>,
    pub k: usize,
    /// `per_model[m][q]`: the single-model score of query `q` against model `m`.
    pub per_model: Vec<Vec<f64>>,
}

impl AgreementVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Restricts to a subset of models, re-averaging per query.
    pub fn select_models(&self, ids: &[String]) -> Result<AgreementVector> {
        if ids.is_empty() {
            return Err(Error::EmptyModelList);
        }
        let idx = ids
            .iter()
            .map(|id| {
                self.model_ids
                    .iter()
                    .position(|m| m == id)
                    .ok_or_else(|| Error::UnknownModel(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let per_model: Vec<Vec<f64>> = idx.iter().map(|&i| self.per_model[i].clone()).collect();
        Ok(AgreementVector {
            scores: mean_over_models(&per_model, self.len()),
            model_ids: ids.to_vec(),
            k: self.k,
            per_model,
        })
    }
}

fn mean_over_models(per_model: &[Vec<f64>], len: usize) -> Vec<f64> {
    (0..len)
        .map(|q| per_model.iter().map(|m| m[q]).sum::<f64>() / per_model.len() as f64)
        .collect()
}

/// Indicator-NDCG agreement for every query.
pub fn agreement_batch(input: &AgreementInput<'_>, k: usize) -> Result<AgreementVector> {
    Ok(agreement_batch_multi(input, &[k], AgreementMeasure::Ndcg, Parallelism::default())?
        .pop()
        .expect("one k requested"))
}

/// Agreement for several neighborhood sizes in one ranking pass. Output
/// order follows `ks`; per-query values are independent of `par`.
pub fn agreement_batch_multi(
    input: &AgreementInput<'_>,
    ks: &[usize],
    measure: AgreementMeasure,
    par: Parallelism,
) -> Result<Vec<AgreementVector>> {
    input.validate()?;
    let n = input.classifier.pool.len();
    for &k in ks {
        check_k(k, n)?;
        if matches!(measure, AgreementMeasure::Cka(_)) && k < 2 {
            return Err(Error::KOutOfRange { k, n });
        }
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let m = input.foundation.len();

    // rows: query; columns: (k, model) flattened as k_idx * m + model
    let per_query = par.try_map_range(input.num_queries(), |q| {
        let c_sims = input
            .classifier
            .pool
            .similarities(input.classifier.queries.row(q))?;
        let mut out = vec![0.0; ks.len() * m];
        let mut scratch = Vec::new();
        match measure {
            AgreementMeasure::Ndcg => {
                let ideal = top_k_scores(&c_sims, k_max);
                for (mi, (_, space)) in input.foundation.iter().enumerate() {
                    let f_sims = space.pool.similarities(space.queries.row(q))?;
                    let positions = Permutation::from_scores(&f_sims).positions();
                    for (ki, &k) in ks.iter().enumerate() {
                        out[ki * m + mi] = indicator_ndcg(&ideal[..k], &positions, &mut scratch);
                    }
                }
            }
            AgreementMeasure::Spearman => {
                let c_pos = Permutation::from_scores(&c_sims).positions();
                for (mi, (_, space)) in input.foundation.iter().enumerate() {
                    let f_sims = space.pool.similarities(space.queries.row(q))?;
                    let f_pos = Permutation::from_scores(&f_sims).positions();
                    let rho = spearman_from_positions(&c_pos, &f_pos)?;
                    for ki in 0..ks.len() {
                        out[ki * m + mi] = rho;
                    }
                }
            }
            AgreementMeasure::Jaccard => {
                let ideal = top_k_scores(&c_sims, k_max);
                for (mi, (_, space)) in input.foundation.iter().enumerate() {
                    let f_sims = space.pool.similarities(space.queries.row(q))?;
                    let cand = top_k_scores(&f_sims, k_max);
                    for (ki, &k) in ks.iter().enumerate() {
                        out[ki * m + mi] = jaccard_sets(&ideal[..k], &cand[..k], n);
                    }
                }
            }
            AgreementMeasure::Cka(kernel) => {
                let ideal = top_k_scores(&c_sims, k_max);
                for (ki, &k) in ks.iter().enumerate() {
                    let a = input.classifier.pool.features().select_rows(&ideal[..k]);
                    for (mi, (_, space)) in input.foundation.iter().enumerate() {
                        let b = space.pool.features().select_rows(&ideal[..k]);
                        out[ki * m + mi] = cka_agreement(&a, &b, kernel)?;
                    }
                }
            }
        }
        Ok::<_, Error>(out)
    })?;

    let model_ids: Vec<String> = input.foundation.iter().map(|(id, _)| id.clone()).collect();
    let nq = per_query.len();
    Ok(ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let per_model: Vec<Vec<f64>> = (0..m)
                .map(|mi| per_query.iter().map(|row| row[ki * m + mi]).collect())
                .collect();
            AgreementVector {
                scores: mean_over_models(&per_model, nq),
                model_ids: model_ids.clone(),
                k,
                per_model,
            }
        })
        .collect())
}
