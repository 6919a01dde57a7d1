//! Inter-model latent agreement: how consistently a classifier and one or
//! more foundation models rank the neighbors of a sample, and how that
//! agreement helps calibrate confidence and detect misclassifications.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agreement;
pub mod arraystore;
pub mod calibration;
pub mod detection;
pub mod error;
pub mod exec;
pub mod matrix;
pub mod neighborhood;
pub mod optim;
pub mod synth;
pub mod theory;

pub use agreement::{agreement_batch, agreement_score, ndcg, AgreementVector, ImportanceFn};
pub use calibration::{CalibrationModel, Variant};
pub use detection::{auroc, run_pipeline, EvalReport, PipelineOptions, SplitData};
pub use error::{Error, ErrorClass, Result};
pub use exec::Parallelism;
pub use matrix::{FeatureMatrix, LabelVector, Matrix};
pub use neighborhood::{rank, Permutation, Pool};
