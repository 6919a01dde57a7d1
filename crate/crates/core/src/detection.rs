//! Failure detection: confidence baselines, agreement-aware temperature
//! scaling, exact AUROC and the evaluation pipeline with its sweeps.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::agreement::{
    agreement_batch_multi, AgreementInput, AgreementMeasure, AgreementVector, CkaKernel, Space,
};
use crate::arraystore::Bundle;
use crate::calibration::{self, CalibrationModel, Variant};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::matrix::{euclidean, LabelVector, Matrix};
use crate::neighborhood::Pool;

/// Neighborhood sizes searched on the validation split by default.
pub const DEFAULT_K_GRID: [usize; 7] = [10, 20, 50, 100, 200, 500, 1000];

const TRUST_DIST_FLOOR: f64 = 1e-12;
const TRUST_RATIO_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MethodId {
    Msp,
    Entropy,
    Energy,
    MaxLogit,
    TrustScore,
    TsVanilla,
    TsAgreementSingle,
    TsAgreementMulti,
    Custom(String),
}

impl MethodId {
    pub fn label(&self) -> &str {
        match self {
            MethodId::Msp => "msp",
            MethodId::Entropy => "entropy",
            MethodId::Energy => "energy",
            MethodId::MaxLogit => "maxlogit",
            MethodId::TrustScore => "trustscore",
            MethodId::TsVanilla => "ts_vanilla",
            MethodId::TsAgreementSingle => "ts_agreement_single",
            MethodId::TsAgreementMulti => "ts_agreement_multi",
            MethodId::Custom(s) => s,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for MethodId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

/// Per-sample confidence; higher means more likely correct.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScore {
    pub method: MethodId,
    pub scores: Vec<f64>,
}

fn checked_rows(logits: &Matrix) -> Result<()> {
    for i in 0..logits.rows() {
        if logits.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogit { row: i });
        }
    }
    Ok(())
}

fn row_max(r: &[f64]) -> f64 {
    r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn logsumexp(r: &[f64]) -> f64 {
    let m = row_max(r);
    m + r.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

pub fn score_msp(logits: &Matrix) -> Result<MethodScore> {
    checked_rows(logits)?;
    Ok(MethodScore {
        method: MethodId::Msp,
        scores: calibration::confidence(&calibration::softmax(logits)?),
    })
}

/// Negative softmax entropy, in nats.
pub fn score_entropy(logits: &Matrix) -> Result<MethodScore> {
    checked_rows(logits)?;
    let probs = calibration::softmax(logits)?;
    let scores = probs
        .iter_rows()
        .map(|p| {
            p.iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.ln())
                .sum::<f64>()
        })
        .collect();
    Ok(MethodScore {
        method: MethodId::Entropy,
        scores,
    })
}

/// Negative energy at unit temperature, i.e. `logsumexp(logits)`.
pub fn score_energy(logits: &Matrix) -> Result<MethodScore> {
    checked_rows(logits)?;
    Ok(MethodScore {
        method: MethodId::Energy,
        scores: logits.iter_rows().map(logsumexp).collect(),
    })
}

pub fn score_maxlogit(logits: &Matrix) -> Result<MethodScore> {
    checked_rows(logits)?;
    Ok(MethodScore {
        method: MethodId::MaxLogit,
        scores: logits.iter_rows().map(row_max).collect(),
    })
}

/// Nearest-neighbor distance ratio: distance to the closest pool point of
/// any other class over distance to the closest point of the predicted
/// class. Capped at 1e6.
pub fn score_trustscore(
    test_features: &Matrix,
    predicted: &[usize],
    pool_features: &Matrix,
    pool_labels: &LabelVector,
) -> Result<MethodScore> {
    if test_features.rows() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: test_features.rows(),
            right: predicted.len(),
        });
    }
    if pool_features.rows() != pool_labels.len() {
        return Err(Error::LengthMismatch {
            left: pool_features.rows(),
            right: pool_labels.len(),
        });
    }
    if test_features.cols() != pool_features.cols() {
        return Err(Error::DimensionMismatch {
            expected: pool_features.cols(),
            found: test_features.cols(),
        });
    }
    let classes = pool_labels.as_slice().iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; classes.max(1)];
    for &l in pool_labels.as_slice() {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidParameter(
            "trust score needs at least two classes in the pool".into(),
        ));
    }
    if let Some(&c) = predicted.iter().find(|&&c| c >= classes || !present[c]) {
        return Err(Error::MissingClassInPool(c));
    }
    let labels = pool_labels.as_slice();
    let scores = Parallelism::default().map_range(test_features.rows(), |i| {
        let x = test_features.row(i);
        let (mut own, mut other) = (f64::INFINITY, f64::INFINITY);
        for (j, row) in pool_features.iter_rows().enumerate() {
            let d = euclidean(x, row);
            if labels[j] == predicted[i] {
                own = own.min(d);
            } else {
                other = other.min(d);
            }
        }
        (other.max(TRUST_DIST_FLOOR) / own.max(TRUST_DIST_FLOOR)).min(TRUST_RATIO_CAP)
    });
    Ok(MethodScore {
        method: MethodId::TrustScore,
        scores,
    })
}

/// Exact AUROC with correct predictions as positives: the probability that a
/// random correct sample outscores a random incorrect one, ties counting 1/2.
pub fn auroc(scores: &[f64], correct: &[bool]) -> Result<f64> {
    if scores.len() != correct.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: correct.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter("non-finite confidence score".into()));
    }
    let pos = correct.iter().filter(|&&c| c).count() as u128;
    let neg = correct.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassDegenerate);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U, kept integral
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if correct[idx[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        u2 += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        i = j;
    }
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|r| {
            let mut best = 0;
            for (c, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// `argmax(logits) == label` per sample.
pub fn correctness(logits: &Matrix, labels: &LabelVector) -> Result<Vec<bool>> {
    if logits.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: logits.rows(),
            right: labels.len(),
        });
    }
    Ok(argmax_rows(logits)
        .into_iter()
        .zip(labels.as_slice())
        .map(|(p, &y)| p == y)
        .collect())
}

/// In-memory arrays of one split.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub id: String,
    pub seed: u64,
    pub classifier: Matrix,
    pub foundation: Vec<(String, Matrix)>,
    pub logits: Matrix,
    pub labels: LabelVector,
}

impl SplitData {
    pub fn from_bundle(b: &Bundle) -> Self {
        Self {
            id: b.dataset_id(),
            seed: b.manifest.seed,
            classifier: b.classifier.to_f64(),
            foundation: b
                .foundation
                .iter()
                .map(|f| (f.model_id.clone(), f.features.to_f64()))
                .collect(),
            logits: b.logits.to_f64(),
            labels: b.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.foundation.iter().map(|(id, _)| id.clone()).collect()
    }

    fn foundation(&self, id: &str) -> Result<&Matrix> {
        self.foundation
            .iter()
            .find(|(m, _)| m == id)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    /// Rows `indices` of every array.
    pub fn subset(&self, indices: &[usize]) -> SplitData {
        SplitData {
            id: self.id.clone(),
            seed: self.seed,
            classifier: self.classifier.select_rows(indices),
            foundation: self
                .foundation
                .iter()
                .map(|(id, f)| (id.clone(), f.select_rows(indices)))
                .collect(),
            logits: self.logits.select_rows(indices),
            labels: self.labels.select(indices),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ModelSelection {
    /// The first foundation model declared in the pool manifest.
    Single,
    /// Every declared foundation model.
    #[default]
    Multiple,
    Explicit(Vec<String>),
}

impl ModelSelection {
    pub fn parse(s: &str) -> Self {
        match s {
            "single" => ModelSelection::Single,
            "multiple" | "all" => ModelSelection::Multiple,
            list => ModelSelection::Explicit(
                list.split(',')
                    .map(|m| m.trim().to_string())
                    .filter(|m| !m.is_empty())
                    .collect(),
            ),
        }
    }

    pub fn resolve(&self, available: &[String]) -> Result<Vec<String>> {
        let ids = match self {
            ModelSelection::Single => available.iter().take(1).cloned().collect(),
            ModelSelection::Multiple => available.to_vec(),
            ModelSelection::Explicit(ids) => {
                for id in ids {
                    if !available.contains(id) {
                        return Err(Error::UnknownModel(id.clone()));
                    }
                }
                ids.clone()
            }
        };
        if ids.is_empty() {
            return Err(Error::EmptyModelList);
        }
        Ok(ids)
    }
}

/// Normalized pools for the classifier space and each selected model.
pub struct PoolSpaces {
    pub classifier: Pool,
    pub foundation: Vec<(String, Pool)>,
}

impl PoolSpaces {
    pub fn build(pool: &SplitData, models: &[String]) -> Result<Self> {
        let classifier = Pool::new(&pool.classifier)?.with_labels(pool.labels.clone())?;
        let foundation = models
            .iter()
            .map(|id| Ok((id.clone(), Pool::new(pool.foundation(id)?)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classifier,
            foundation,
        })
    }

    pub fn len(&self) -> usize {
        self.classifier.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classifier.is_empty()
    }

    /// Agreement of `queries` against the pool for each `k`.
    pub fn agreement(
        &self,
        queries: &SplitData,
        ks: &[usize],
        measure: AgreementMeasure,
        par: Parallelism,
    ) -> Result<Vec<AgreementVector>> {
        let foundation = self
            .foundation
            .iter()
            .map(|(id, pool)| {
                Ok((
                    id.clone(),
                    Space {
                        pool,
                        queries: queries.foundation(id)?,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let input = AgreementInput {
            classifier: Space {
                pool: &self.classifier,
                queries: &queries.classifier,
            },
            foundation,
        };
        agreement_batch_multi(&input, ks, measure, par)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub k: usize,
    pub models: ModelSelection,
    /// Also score Spearman / Jaccard / linear-CKA agreement through the same
    /// calibration.
    pub ablation: bool,
    pub par: Parallelism,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            k: 50,
            models: ModelSelection::default(),
            ablation: false,
            par: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: MethodId,
    pub auroc: f64,
    pub n: usize,
    pub k: Option<usize>,
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedCalibration {
    pub method: MethodId,
    pub model: CalibrationModel,
    pub validation_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub rows: Vec<ReportRow>,
    pub seed: u64,
    pub models: Vec<String>,
    pub calibration: Vec<FittedCalibration>,
    pub test_accuracy: f64,
    pub notes: String,
    pub timestamp: Option<u64>,
}

impl EvalReport {
    pub fn auroc_of(&self, method: &MethodId) -> Option<f64> {
        self.rows.iter().find(|r| &r.method == method).map(|r| r.auroc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,auroc,n,k,m\n");
        for r in &self.rows {
            let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method,
                r.auroc,
                r.n,
                opt(r.k),
                opt(r.m)
            ));
        }
        out
    }
}

const REPORT_NOTES: &str = "auroc treats correct predictions as positives; \
trustscore is the nearest-neighbor class-distance ratio without density filtering; \
energy uses temperature 1; entropy in nats";

struct Fitted {
    model: CalibrationModel,
    nll: f64,
}

fn fit_agreement(val: &SplitData, scores: &[f64], par: Parallelism) -> Result<Fitted> {
    let model = calibration::fit_with(&val.logits, &val.labels, Some(scores), Variant::Agreement, par)?;
    let nll = model.nll(&val.logits, &val.labels, Some(scores))?;
    Ok(Fitted { model, nll })
}

fn calibrated_confidence(model: &CalibrationModel, logits: &Matrix, scores: Option<&[f64]>) -> Result<Vec<f64>> {
    Ok(calibration::confidence(&calibration::apply(model, logits, scores)?))
}

/// Fits calibration on the validation split and scores every method on
/// the test split.
pub fn run_pipeline(
    pool: &SplitData,
    val: &SplitData,
    test: &SplitData,
    opts: &PipelineOptions,
) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let models = opts.models.resolve(&pool.model_ids())?;
    let spaces = PoolSpaces::build(pool, &models)?;
    let k = opts.k;
    let m = models.len();
    let par = opts.par;

    let val_agree = spaces
        .agreement(val, &[k], AgreementMeasure::Ndcg, par)?
        .remove(0);
    let test_agree = spaces
        .agreement(test, &[k], AgreementMeasure::Ndcg, par)?
        .remove(0);
    let test_correct = correctness(&test.logits, &test.labels)?;
    let n = test.len();

    let mut rows = Vec::new();
    let mut calib = Vec::new();
    let mut push = |method: MethodId, scores: &[f64], k: Option<usize>, m: Option<usize>| -> Result<()> {
        rows.push(ReportRow {
            auroc: auroc(scores, &test_correct)?,
            method,
            n,
            k,
            m,
        });
        Ok(())
    };

    for s in [
        score_msp(&test.logits)?,
        score_entropy(&test.logits)?,
        score_energy(&test.logits)?,
        score_maxlogit(&test.logits)?,
    ] {
        push(s.method, &s.scores, None, None)?;
    }
    let trust = score_trustscore(
        &test.classifier,
        &argmax_rows(&test.logits),
        &pool.classifier,
        &pool.labels,
    )?;
    push(trust.method, &trust.scores, None, None)?;

    let vanilla = calibration::fit_with(&val.logits, &val.labels, None, Variant::Vanilla, par)?;
    calib.push(FittedCalibration {
        method: MethodId::TsVanilla,
        model: vanilla,
        validation_nll: vanilla.nll(&val.logits, &val.labels, None)?,
    });
    push(
        MethodId::TsVanilla,
        &calibrated_confidence(&vanilla, &test.logits, None)?,
        None,
        None,
    )?;

    let mut variants = vec![(MethodId::TsAgreementSingle, vec![models[0].clone()])];
    if m > 1 {
        variants.push((MethodId::TsAgreementMulti, models.clone()));
    }
    for (method, ids) in variants {
        let v = val_agree.select_models(&ids)?;
        let t = test_agree.select_models(&ids)?;
        let fitted = fit_agreement(val, &v.scores, par)?;
        push(
            method.clone(),
            &calibrated_confidence(&fitted.model, &test.logits, Some(&t.scores))?,
            Some(k),
            Some(ids.len()),
        )?;
        calib.push(FittedCalibration {
            method,
            model: fitted.model,
            validation_nll: fitted.nll,
        });
    }

    if opts.ablation {
        for measure in [
            AgreementMeasure::Spearman,
            AgreementMeasure::Jaccard,
            AgreementMeasure::Cka(CkaKernel::Linear),
        ] {
            let v = spaces.agreement(val, &[k], measure, par)?.remove(0);
            let t = spaces.agreement(test, &[k], measure, par)?.remove(0);
            let fitted = fit_agreement(val, &v.scores, par)?;
            let method = MethodId::Custom(format!("ts_{}", measure.name()));
            push(
                method.clone(),
                &calibrated_confidence(&fitted.model, &test.logits, Some(&t.scores))?,
                Some(k),
                Some(m),
            )?;
            calib.push(FittedCalibration {
                method,
                model: fitted.model,
                validation_nll: fitted.nll,
            });
        }
    }

    let test_accuracy = test_correct.iter().filter(|&&c| c).count() as f64 / n as f64;
    Ok(EvalReport {
        dataset_id: test.id.clone(),
        rows,
        seed: test.seed,
        models,
        calibration: calib,
        test_accuracy,
        notes: REPORT_NOTES.to_string(),
        timestamp: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    /// `None` when `k` exceeds the pool size and was skipped.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweep {
    pub best_k: usize,
    pub rows: Vec<KSweepRow>,
    pub warnings: Vec<String>,
}

impl KSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,auroc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{}\n",
                r.k,
                r.auroc.map_or(String::new(), |a| a.to_string())
            ));
        }
        out
    }
}

/// Highest AUROC wins; ties go to the smaller `k`.
pub fn select_best_k(table: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(k, a) in table {
        best = match best {
            Some((bk, ba)) if ba > a || (ba == a && bk < k) => Some((bk, ba)),
            _ => Some((k, a)),
        };
    }
    best.map(|(k, _)| k)
}

/// Validation AUROC of agreement-aware temperature scaling for each `k` in
/// `grid`. Values of `k` beyond the pool size are skipped with a warning.
pub fn sweep_k(
    pool: &SplitData,
    val: &SplitData,
    grid: &[usize],
    models: &ModelSelection,
    par: Parallelism,
) -> Result<KSweep> {
    if val.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let ids = models.resolve(&pool.model_ids())?;
    let spaces = PoolSpaces::build(pool, &ids)?;
    let n = spaces.len();
    let valid: Vec<usize> = grid.iter().copied().filter(|&k| k >= 1 && k <= n).collect();
    let warnings: Vec<String> = grid
        .iter()
        .filter(|&&k| k == 0 || k > n)
        .map(|k| format!("k={k} skipped: pool has {n} rows"))
        .collect();
    if valid.is_empty() {
        return Err(Error::KOutOfRange {
            k: grid.iter().copied().max().unwrap_or(0),
            n,
        });
    }
    let correct = correctness(&val.logits, &val.labels)?;
    let agreements = spaces.agreement(val, &valid, AgreementMeasure::Ndcg, par)?;
    let mut table = Vec::with_capacity(valid.len());
    for a in &agreements {
        let fitted = fit_agreement(val, &a.scores, par)?;
        let conf = calibrated_confidence(&fitted.model, &val.logits, Some(&a.scores))?;
        table.push((a.k, auroc(&conf, &correct)?));
    }
    let best_k = select_best_k(&table).expect("non-empty table");
    let rows = grid
        .iter()
        .map(|&k| KSweepRow {
            k,
            auroc: table.iter().find(|(tk, _)| *tk == k).map(|(_, a)| *a),
        })
        .collect();
    Ok(KSweep {
        best_k,
        rows,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolSweepRow {
    pub n: usize,
    pub k: usize,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolSweep {
    pub rows: Vec<PoolSweepRow>,
    /// `(n, best_k)` per pool size.
    pub best: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl PoolSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,k,auroc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.n,
                r.k,
                r.auroc.map_or(String::new(), |a| a.to_string())
            ));
        }
        out
    }
}

/// Seeded uniform subsample of `size` row indices, in ascending order.
pub fn subsample_indices(total: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 || size > total {
        return Err(Error::SizeOutOfRange {
            size,
            available: total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (size as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx = rand::seq::index::sample(&mut rng, total, size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Runs [`sweep_k`] on seeded subsamples of the pool.
pub fn sweep_pool_size(
    pool: &SplitData,
    val: &SplitData,
    sizes: &[usize],
    grid: &[usize],
    seed: u64,
    models: &ModelSelection,
    par: Parallelism,
) -> Result<PoolSweep> {
    for &s in sizes {
        if s == 0 || s > pool.len() {
            return Err(Error::SizeOutOfRange {
                size: s,
                available: pool.len(),
            });
        }
    }
    let mut rows = Vec::new();
    let mut best = Vec::new();
    let mut warnings = Vec::new();
    for &size in sizes {
        let idx = subsample_indices(pool.len(), size, seed)?;
        let sub = pool.subset(&idx);
        let sweep = sweep_k(&sub, val, grid, models, par)?;
        best.push((size, sweep.best_k));
        warnings.extend(sweep.warnings.iter().map(|w| format!("n={size}: {w}")));
        rows.extend(sweep.rows.into_iter().map(|r| PoolSweepRow {
            n: size,
            k: r.k,
            auroc: r.auroc,
        }));
    }
    Ok(PoolSweep {
        rows,
        best,
        warnings,
    })
}
