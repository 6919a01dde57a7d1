//! Synthetic checks of the two theoretical guarantees behind agreement
//! scoring:
//!
//! * the regression error bound relating a classifier's error to the
//!   distance between its features and a rotated foundation embedding, and
//! * the NDCG lower bound `1/delta^2` under a delta-local approximate
//!   isometry with reciprocal-distance importance.
//!
//! Distances here are Euclidean; the main pipeline ranks by cosine.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::agreement::{ndcg, ImportanceFn};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::matrix::{dot, euclidean, norm, Matrix};
use crate::neighborhood::Permutation;

const EPS: f64 = 1e-9;
const RESAMPLE_BUDGET: usize = 100;
const MIN_QUERY_DISTANCE: f64 = 1e-12;

/// SplitMix64 finalizer; derives independent per-trial seeds.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let len = norm(&v);
        if len > 1e-8 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Haar-distributed orthogonal matrix from the QR factorization of a
/// Gaussian matrix.
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Matrix {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = Matrix::zeros(d, d);
    for j in 0..d {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            out.row_mut(i)[j] = q[(i, j)] * sign;
        }
    }
    out
}

/// `m · v` for a square matrix.
fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|r| dot(r, v)).collect()
}

/// `mᵀ · v`.
fn mat_t_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (row, &vi) in m.iter_rows().zip(v) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r * vi;
        }
    }
    out
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Regression instance where a rotated foundation encoder predicts every
/// target exactly.
#[derive(Debug, Clone)]
pub struct SyntheticRegression {
    /// Unit-norm classifier features, `n × k`.
    pub b0: Matrix,
    pub w0: Vec<f64>,
    /// Orthogonal alignment between the two latent spaces.
    pub u_h: Matrix,
    /// Foundation features, `n × k`.
    pub h: Matrix,
    pub w_h: Vec<f64>,
    pub delta_head: Vec<f64>,
    /// Bound on the head mismatch.
    pub c: f64,
    pub y: Vec<f64>,
}

/// `noise` is the largest per-sample residual `‖B0(x) - U_h H(x)‖`; each
/// sample's residual is drawn uniformly from `[0, noise]`.
pub fn gen_regression(n: usize, k: usize, c: f64, noise: f64, seed: u64) -> Result<SyntheticRegression> {
    if k < 2 || n == 0 {
        return Err(Error::InvalidParameter(format!(
            "need n >= 1 and k >= 2, got n={n}, k={k}"
        )));
    }
    if !(c >= 0.0) || !(noise >= 0.0) {
        return Err(Error::InvalidParameter("C and noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b0 = Matrix::zeros(n, k);
    for i in 0..n {
        b0.row_mut(i).copy_from_slice(&unit_vec(&mut rng, k));
    }
    let u_h = random_orthogonal(&mut rng, k);
    let w0 = gaussian_vec(&mut rng, k);
    let delta_len = c * rng.random::<f64>();
    let delta_head: Vec<f64> = unit_vec(&mut rng, k).into_iter().map(|v| v * delta_len).collect();
    let shifted: Vec<f64> = w0.iter().zip(&delta_head).map(|(a, b)| a + b).collect();
    let w_h = mat_t_vec(&u_h, &shifted);

    let mut h = Matrix::zeros(n, k);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let scale = noise * rng.random::<f64>();
        let e: Vec<f64> = unit_vec(&mut rng, k).into_iter().map(|v| v * scale).collect();
        let target: Vec<f64> = b0.row(i).iter().zip(&e).map(|(b, e)| b + e).collect();
        let hi = mat_t_vec(&u_h, &target);
        y.push(dot(&w_h, &hi));
        h.row_mut(i).copy_from_slice(&hi);
    }
    Ok(SyntheticRegression {
        b0,
        w0,
        u_h,
        h,
        w_h,
        delta_head,
        c,
        y,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prop1Row {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub holds: bool,
}

/// Evaluates `|w0·B0(x) - y| <= (C + ‖w0‖)·‖B0(x) - U_h H(x)‖ + C` per sample.
pub fn check_prop1(inst: &SyntheticRegression) -> Result<Vec<Prop1Row>> {
    let mismatch = sub(&mat_vec(&inst.u_h, &inst.w_h), &inst.w0);
    if norm(&mismatch) > inst.c + EPS {
        return Err(Error::ConstructionViolated(format!(
            "head mismatch {} exceeds C = {}",
            norm(&mismatch),
            inst.c
        )));
    }
    let w0_norm = norm(&inst.w0);
    let mut rows = Vec::with_capacity(inst.y.len());
    for i in 0..inst.y.len() {
        let h = inst.h.row(i);
        let foundation_loss = (dot(&inst.w_h, h) - inst.y[i]).abs();
        if foundation_loss > EPS {
            return Err(Error::ConstructionViolated(format!(
                "foundation loss {foundation_loss} at sample {i}"
            )));
        }
        let b0 = inst.b0.row(i);
        let lhs = (dot(&inst.w0, b0) - inst.y[i]).abs();
        let residual = euclidean(b0, &mat_vec(&inst.u_h, h));
        let rhs = (inst.c + w0_norm) * residual + inst.c;
        rows.push(Prop1Row {
            lhs,
            rhs,
            residual,
            holds: lhs <= rhs + EPS,
        });
    }
    Ok(rows)
}

/// A query, its Euclidean k-neighborhood and a map `f` certified to keep
/// every neighbor's distance ratio inside `(1/delta, delta)`.
#[derive(Debug, Clone)]
pub struct DistortionField {
    pub base_points: Matrix,
    pub query: Vec<f64>,
    pub transformed: Matrix,
    pub transformed_query: Vec<f64>,
    /// Indices of the k nearest base points, nearest first.
    pub neighbors: Vec<usize>,
    pub delta: f64,
    /// Attempts used before certification succeeded.
    pub attempts: usize,
}

impl DistortionField {
    /// Distance ratio `‖f(z) - f(x)‖ / ‖z - x‖` for each neighbor.
    pub fn ratios(&self) -> Vec<f64> {
        self.neighbors
            .iter()
            .map(|&j| {
                euclidean(self.transformed.row(j), &self.transformed_query)
                    / euclidean(self.base_points.row(j), &self.query)
            })
            .collect()
    }

    /// Re-checks the ratio bound. With `delta == 1` the open interval is
    /// empty, so ratios must equal 1 to within 1e-12.
    pub fn verify(&self) -> bool {
        ratios_within(&self.ratios(), self.delta)
    }
}

fn ratios_within(ratios: &[f64], delta: f64) -> bool {
    if delta == 1.0 {
        ratios.iter().all(|r| (r - 1.0).abs() <= 1e-12)
    } else {
        ratios.iter().all(|&r| r > 1.0 / delta && r < delta)
    }
}

pub fn gen_distortion(n: usize, d: usize, k: usize, delta: f64, seed: u64) -> Result<DistortionField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Matrix::zeros(n, d);
    for i in 0..n {
        points.row_mut(i).copy_from_slice(&gaussian_vec(&mut rng, d));
    }
    let query = gaussian_vec(&mut rng, d);
    distort(points, query, k, delta, &mut rng)
}

/// Builds a certified field around `query`: `f` is a random rotation and
/// translation composed with a smooth radial modulation `s(ρ)` in
/// `[1/δ', δ']`, `δ' = 0.99·δ + 0.01`.
pub fn distort(
    points: Matrix,
    query: Vec<f64>,
    k: usize,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<DistortionField> {
    if !(delta >= 1.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!("delta must be >= 1, got {delta}")));
    }
    if points.cols() != query.len() {
        return Err(Error::DimensionMismatch {
            expected: points.cols(),
            found: query.len(),
        });
    }
    if k == 0 || k > points.rows() {
        return Err(Error::KOutOfRange { k, n: points.rows() });
    }
    let dist: Vec<f64> = points.iter_rows().map(|r| euclidean(r, &query)).collect();
    if let Some(j) = dist.iter().position(|&v| v < MIN_QUERY_DISTANCE) {
        return Err(Error::InvalidParameter(format!(
            "pool point {j} coincides with the query"
        )));
    }
    let neg: Vec<f64> = dist.iter().map(|v| -v).collect();
    let neighbors = Permutation::from_scores(&neg).order()[..k].to_vec();
    let radius = dist[neighbors[k - 1]];
    let d = query.len();
    let inner = 0.99 * delta + 0.01;

    for attempt in 1..=RESAMPLE_BUDGET {
        let rot = random_orthogonal(rng, d);
        let shift = gaussian_vec(rng, d);
        let freq = rng.random_range(1.0..12.0) / radius;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let modulation = |rho: f64| inner.powf((freq * rho + phase).sin());

        let fq: Vec<f64> = mat_vec(&rot, &query).iter().zip(&shift).map(|(a, b)| a + b).collect();
        let mut transformed = Matrix::zeros(points.rows(), d);
        for (j, row) in points.iter_rows().enumerate() {
            let diff = sub(row, &query);
            let s = if delta == 1.0 { 1.0 } else { modulation(dist[j]) };
            let scaled: Vec<f64> = diff.iter().map(|v| v * s).collect();
            let image: Vec<f64> = mat_vec(&rot, &scaled).iter().zip(&fq).map(|(a, b)| a + b).collect();
            transformed.row_mut(j).copy_from_slice(&image);
        }
        let field = DistortionField {
            base_points: points.clone(),
            query: query.clone(),
            transformed,
            transformed_query: fq,
            neighbors: neighbors.clone(),
            delta,
            attempts: attempt,
        };
        if field.verify() {
            return Ok(field);
        }
    }
    Err(Error::ResampleBudgetExceeded(RESAMPLE_BUDGET))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prop2Result {
    pub ndcg: f64,
    pub lower_bound: f64,
    pub holds: bool,
}

/// NDCG over the k-neighborhood between base and transformed Euclidean
/// rankings, with importance `1 / base distance`.
pub fn check_prop2(field: &DistortionField) -> Result<Prop2Result> {
    if !field.verify() {
        return Err(Error::ConstructionViolated("distortion field is not certified".into()));
    }
    let base: Vec<f64> = field
        .neighbors
        .iter()
        .map(|&j| euclidean(field.base_points.row(j), &field.query))
        .collect();
    let moved: Vec<f64> = field
        .neighbors
        .iter()
        .map(|&j| euclidean(field.transformed.row(j), &field.transformed_query))
        .collect();
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let pi_star = Permutation::from_scores(&neg(&base));
    let pi_prime = Permutation::from_scores(&neg(&moved));
    let value = ndcg(
        &pi_star,
        &pi_prime,
        &ImportanceFn::ReciprocalDistance { distances: base },
    )?;
    let lower_bound = 1.0 / (field.delta * field.delta);
    Ok(Prop2Result {
        ndcg: value,
        lower_bound,
        holds: value >= lower_bound - EPS,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryConfig {
    pub seed: u64,
    pub prop1_trials: usize,
    pub prop1_c: Vec<f64>,
    pub prop1_samples: usize,
    pub prop1_dim: usize,
    pub prop1_noise: f64,
    pub prop2_trials: usize,
    pub prop2_deltas: Vec<f64>,
    pub prop2_points: usize,
    pub prop2_dim: usize,
    pub prop2_k: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prop1_trials: 1000,
            prop1_c: vec![0.0, 0.1, 1.0],
            prop1_samples: 32,
            prop1_dim: 16,
            prop1_noise: 1.0,
            prop2_trials: 1000,
            prop2_deltas: vec![1.1, 1.5, 2.0, 5.0],
            prop2_points: 200,
            prop2_dim: 8,
            prop2_k: 20,
        }
    }
}

/// One row of the per-trial CSV.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRow {
    pub bench: &'static str,
    pub trial: usize,
    pub seed: u64,
    /// C for prop1, delta for prop2.
    pub param: f64,
    pub value: f64,
    pub bound: f64,
    pub slack: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub trials: usize,
    pub checks: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub max_slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop2Extra {
    pub delta: f64,
    pub mean_ndcg: f64,
    pub min_ndcg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheorySummary {
    pub prop1: BenchSummary,
    pub prop2: BenchSummary,
    pub prop2_by_delta: Vec<Prop2Extra>,
    #[serde(skip)]
    pub trials: Vec<TrialRow>,
}

impl TheorySummary {
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("bench,trial,seed,param,value,bound,slack,holds\n");
        for t in &self.trials {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                t.bench, t.trial, t.seed, t.param, t.value, t.bound, t.slack, t.holds
            ));
        }
        out
    }
}

fn summarize(rows: &[TrialRow], trials: usize) -> BenchSummary {
    BenchSummary {
        trials,
        checks: rows.len(),
        violations: rows.iter().filter(|r| !r.holds).count(),
        min_slack: rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
        max_slack: rows.iter().map(|r| r.slack).fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Runs both benches. Each trial seeds its own RNG from `(seed, trial)`, so
/// results do not depend on scheduling.
pub fn run_theory(cfg: &TheoryConfig, par: Parallelism) -> Result<TheorySummary> {
    if cfg.prop1_c.is_empty() || cfg.prop2_deltas.is_empty() {
        return Err(Error::InvalidParameter("empty parameter list".into()));
    }
    let p1 = par.try_map_range(cfg.prop1_trials, |t| {
        let seed = trial_seed(cfg.seed, t as u64);
        let c = cfg.prop1_c[t % cfg.prop1_c.len()];
        let inst = gen_regression(cfg.prop1_samples, cfg.prop1_dim, c, cfg.prop1_noise, seed)?;
        Ok::<_, Error>(
            check_prop1(&inst)?
                .into_iter()
                .map(|r| TrialRow {
                    bench: "prop1",
                    trial: t,
                    seed,
                    param: c,
                    value: r.lhs,
                    bound: r.rhs,
                    slack: r.rhs - r.lhs,
                    holds: r.holds,
                })
                .collect::<Vec<_>>(),
        )
    })?;
    let p1: Vec<TrialRow> = p1.into_iter().flatten().collect();

    let offset = cfg.prop1_trials as u64;
    let p2 = par.try_map_range(cfg.prop2_trials, |t| {
        let seed = trial_seed(cfg.seed, offset + t as u64);
        let delta = cfg.prop2_deltas[t % cfg.prop2_deltas.len()];
        let field = gen_distortion(cfg.prop2_points, cfg.prop2_dim, cfg.prop2_k, delta, seed)?;
        let r = check_prop2(&field)?;
        Ok::<_, Error>(TrialRow {
            bench: "prop2",
            trial: t,
            seed,
            param: delta,
            value: r.ndcg,
            bound: r.lower_bound,
            slack: r.ndcg - r.lower_bound,
            holds: r.holds,
        })
    })?;

    let prop2_by_delta = cfg
        .prop2_deltas
        .iter()
        .map(|&delta| {
            let vals: Vec<f64> = p2.iter().filter(|r| r.param == delta).map(|r| r.value).collect();
            Prop2Extra {
                delta,
                mean_ndcg: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                min_ndcg: vals.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })
        .collect();

    let prop1 = summarize(&p1, cfg.prop1_trials);
    let prop2 = summarize(&p2, cfg.prop2_trials);
    let mut trials = p1;
    trials.extend(p2);
    Ok(TheorySummary {
        prop1,
        prop2,
        prop2_by_delta,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthogonal(&mut rng, 6);
        for i in 0..6 {
            for j in 0..6 {
                let v: f64 = (0..6).map(|l| q.row(l)[i] * q.row(l)[j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_agreement_has_zero_error() {
        let inst = gen_regression(20, 5, 0.0, 0.0, 3).unwrap();
        for r in check_prop1(&inst).unwrap() {
            assert!(r.lhs < 1e-12 && r.rhs < 1e-12, "{r:?}");
            assert!(r.holds);
        }
    }

    #[test]
    fn zero_head_mismatch_bound() {
        let inst = gen_regression(50, 8, 0.0, 0.7, 11).unwrap();
        let w0 = norm(&inst.w0);
        for r in check_prop1(&inst).unwrap() {
            assert!(r.lhs <= w0 * r.residual + 1e-12);
        }
    }

    #[test]
    fn regression_is_seeded() {
        let a = gen_regression(10, 4, 0.1, 0.5, 99).unwrap();
        let b = gen_regression(10, 4, 0.1, 0.5, 99).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.h, b.h);
        for i in 0..10 {
            assert!((norm(a.b0.row(i)) - 1.0).abs() < 1e-9);
        }
        assert!(norm(&a.delta_head) <= 0.1 + 1e-12);
    }

    #[test]
    fn tampered_instance_is_rejected() {
        let mut inst = gen_regression(5, 4, 0.1, 0.2, 1).unwrap();
        inst.y[2] += 1.0;
        assert!(matches!(check_prop1(&inst), Err(Error::ConstructionViolated(_))));
    }

    #[test]
    fn isometry_gives_perfect_ndcg() {
        let f = gen_distortion(100, 5, 15, 1.0, 5).unwrap();
        assert!(f.ratios().iter().all(|r| (r - 1.0).abs() < 1e-12));
        let r = check_prop2(&f).unwrap();
        assert_eq!(r.ndcg, 1.0);
        assert!(r.holds);
    }

    #[test]
    fn certified_field_ratios() {
        let f = gen_distortion(200, 8, 20, 1.5, 17).unwrap();
        assert!(f.ratios().iter().all(|&r| r > 2.0 / 3.0 && r < 1.5));
        assert!(check_prop2(&f).unwrap().holds);
    }

    #[test]
    fn query_in_pool_rejected() {
        let pts = Matrix::new(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            distort(pts, vec![1.0, 1.0], 2, 1.5, &mut rng),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn trial_seeds_differ() {
        assert_ne!(trial_seed(0, 0), trial_seed(0, 1));
        assert_ne!(trial_seed(0, 5), trial_seed(1, 5));
    }
}
