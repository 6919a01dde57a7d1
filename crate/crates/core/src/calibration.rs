//! Agreement-aware temperature scaling.
//!
//! Each sample gets its own temperature `tau(x) = t + t_s * AS(x)`, floored at
//! `tau_floor`, and probabilities are `softmax(logits / tau(x))`. The vanilla
//! variant fixes `t_s = 0`. Parameters are fit by minimizing validation NLL:
//! a coarse deterministic grid, then Nelder–Mead from the best cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::matrix::{LabelVector, Matrix};
use crate::optim::{nelder_mead, NelderMeadOptions};

pub const DEFAULT_TAU_FLOOR: f64 = 1e-3;
/// Probabilities are floored at this value inside the NLL logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const T_GRID: (f64, f64, usize) = (0.05, 10.0, 60);
const TS_GRID: (f64, f64, usize) = (-5.0, 5.0, 61);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Agreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub variant: Variant,
    pub t: f64,
    pub t_s: f64,
    pub tau_floor: f64,
}

impl CalibrationModel {
    pub fn identity(variant: Variant) -> Self {
        Self {
            variant,
            t: 1.0,
            t_s: 0.0,
            tau_floor: DEFAULT_TAU_FLOOR,
        }
    }

    pub fn vanilla(t: f64) -> Self {
        Self {
            variant: Variant::Vanilla,
            t,
            t_s: 0.0,
            tau_floor: DEFAULT_TAU_FLOOR,
        }
    }

    pub fn agreement(t: f64, t_s: f64) -> Self {
        Self {
            variant: Variant::Agreement,
            t,
            t_s,
            tau_floor: DEFAULT_TAU_FLOOR,
        }
    }

    /// Effective temperature for a sample with agreement `score`.
    #[inline]
    pub fn tau(&self, score: f64) -> f64 {
        let raw = match self.variant {
            Variant::Vanilla => self.t,
            Variant::Agreement => self.t + self.t_s * score,
        };
        raw.max(self.tau_floor)
    }

    /// Mean NLL of the calibrated probabilities; equals
    /// `nll(&apply(..), labels)` without materializing the probabilities.
    pub fn nll(&self, logits: &Matrix, labels: &LabelVector, agreement: Option<&[f64]>) -> Result<f64> {
        let scores = check_inputs(self, logits, agreement)?;
        check_labels(logits, labels)?;
        Ok(self.nll_unchecked(logits, labels, scores, Parallelism::default()))
    }

    fn nll_unchecked(
        &self,
        logits: &Matrix,
        labels: &LabelVector,
        scores: Option<&[f64]>,
        par: Parallelism,
    ) -> f64 {
        let c = logits.cols();
        let total = par.sum_range(logits.rows(), |i| {
            let mut buf = vec![0.0; c];
            let tau = self.tau(scores.map_or(0.0, |s| s[i]));
            softmax_row_into(logits.row(i), tau, &mut buf);
            -buf[labels.as_slice()[i]].max(PROB_FLOOR).ln()
        });
        total / logits.rows() as f64
    }
}

/// Writes `softmax(row / tau)` into `out`.
#[inline]
pub(crate) fn softmax_row_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = ((z - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn check_logits(logits: &Matrix) -> Result<()> {
    if logits.cols() < 2 {
        return Err(Error::InvalidParameter(format!(
            "logits need at least 2 classes, found {}",
            logits.cols()
        )));
    }
    for i in 0..logits.rows() {
        if logits.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogit { row: i });
        }
    }
    Ok(())
}

fn check_inputs<'a>(
    model: &CalibrationModel,
    logits: &Matrix,
    agreement: Option<&'a [f64]>,
) -> Result<Option<&'a [f64]>> {
    check_logits(logits)?;
    match (model.variant, agreement) {
        (Variant::Vanilla, _) => Ok(None),
        (Variant::Agreement, None) => Err(Error::InvalidParameter(
            "agreement variant needs agreement scores".into(),
        )),
        (Variant::Agreement, Some(s)) => {
            if s.len() != logits.rows() {
                return Err(Error::LengthMismatch {
                    left: s.len(),
                    right: logits.rows(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite agreement score".into()));
            }
            Ok(Some(s))
        }
    }
}

fn check_labels(logits: &Matrix, labels: &LabelVector) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: logits.rows(),
        });
    }
    if let Some((row, &l)) = labels
        .as_slice()
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= logits.cols())
    {
        return Err(Error::LabelOutOfRange {
            row,
            label: l as i64,
            classes: logits.cols(),
        });
    }
    Ok(())
}

/// Plain row-wise softmax.
pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    apply(&CalibrationModel::identity(Variant::Vanilla), logits, None)
}

/// Calibrated probabilities `softmax(logits / tau(x))`.
pub fn apply(
    model: &CalibrationModel,
    logits: &Matrix,
    agreement: Option<&[f64]>,
) -> Result<Matrix> {
    let scores = check_inputs(model, logits, agreement)?;
    let c = logits.cols();
    let rows = Parallelism::default().map_range(logits.rows(), |i| {
        let mut out = vec![0.0; c];
        softmax_row_into(logits.row(i), model.tau(scores.map_or(0.0, |s| s[i])), &mut out);
        out
    });
    Matrix::new(logits.rows(), c, rows.concat())
}

/// Mean negative log-likelihood of the true labels.
pub fn nll(probabilities: &Matrix, labels: &LabelVector) -> Result<f64> {
    check_labels(probabilities, labels)?;
    if labels.is_empty() {
        return Err(Error::TooFewElements {
            needed: 1,
            found: 0,
        });
    }
    let total = Parallelism::default().sum_range(labels.len(), |i| {
        -probabilities.row(i)[labels.as_slice()[i]]
            .max(PROB_FLOOR)
            .ln()
    });
    Ok(total / labels.len() as f64)
}

/// Row-wise maximum probability.
pub fn confidence(probabilities: &Matrix) -> Vec<f64> {
    probabilities
        .iter_rows()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn grid(lo: f64, hi: f64, n: usize, log: bool) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            if log {
                lo * (hi / lo).powf(f)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Fits `(t, t_s)` by minimizing validation NLL.
///
/// The agreement variant searches a space containing the vanilla optimum,
/// so its fitted NLL never exceeds the vanilla one.
pub fn fit(
    logits: &Matrix,
    labels: &LabelVector,
    agreement: Option<&[f64]>,
    variant: Variant,
) -> Result<CalibrationModel> {
    fit_with(logits, labels, agreement, variant, Parallelism::default())
}

pub fn fit_with(
    logits: &Matrix,
    labels: &LabelVector,
    agreement: Option<&[f64]>,
    variant: Variant,
    par: Parallelism,
) -> Result<CalibrationModel> {
    if logits.rows() == 0 {
        return Err(Error::EmptyValidationSet);
    }
    let probe = CalibrationModel::identity(variant);
    let scores = check_inputs(&probe, logits, agreement)?;
    check_labels(logits, labels)?;
    let degenerate = logits
        .iter_rows()
        .all(|r| r.iter().all(|&v| v == r[0]));
    if degenerate {
        return Err(Error::DegenerateLogits);
    }

    let vanilla_obj = |t: f64| CalibrationModel::vanilla(t).nll_unchecked(logits, labels, None, par);
    let t_grid = grid(T_GRID.0, T_GRID.1, T_GRID.2, true);
    let mut best = (1.0, vanilla_obj(1.0), usize::MAX);
    for (i, &t) in t_grid.iter().enumerate() {
        let v = vanilla_obj(t);
        if v < best.1 {
            best = (t, v, i);
        }
    }
    let t_step = match best.2 {
        usize::MAX => 0.1,
        i => t_grid[i] * ((T_GRID.1 / T_GRID.0).powf(1.0 / (T_GRID.2 - 1) as f64) - 1.0),
    };
    let refined = nelder_mead(
        |x| vanilla_obj(x[0]),
        &[best.0],
        &[t_step],
        NelderMeadOptions::default(),
    );
    let vanilla = CalibrationModel::vanilla(refined.x[0]);
    if variant == Variant::Vanilla {
        return Ok(vanilla);
    }

    let scores = scores.expect("checked above");
    let agree_obj = |t: f64, ts: f64| {
        CalibrationModel::agreement(t, ts).nll_unchecked(logits, labels, Some(scores), par)
    };
    let ts_grid = grid(TS_GRID.0, TS_GRID.1, TS_GRID.2, false);
    let mut best = (vanilla.t, 0.0, refined.value);
    for &t in &t_grid {
        for &ts in &ts_grid {
            let v = agree_obj(t, ts);
            if v < best.2 {
                best = (t, ts, v);
            }
        }
    }
    let ts_step = (TS_GRID.1 - TS_GRID.0) / (TS_GRID.2 - 1) as f64;
    let refined = nelder_mead(
        |x| agree_obj(x[0], x[1]),
        &[best.0, best.1],
        &[best.0.abs().max(0.05) * 0.1, ts_step],
        NelderMeadOptions::default(),
    );
    Ok(CalibrationModel::agreement(refined.x[0], refined.x[1]))
}
