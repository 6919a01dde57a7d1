//! Seeded synthetic datasets: a classifier / foundation-model bundle whose
//! misclassified samples sit in distorted foundation neighborhoods, and
//! logits that are calibrated at a known temperature.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::arraystore::{write_container, write_labels, DatasetManifest, FoundationEntry, Split};
use crate::calibration::softmax_row_into;
use crate::detection::SplitData;
use crate::error::{Error, Result};
use crate::matrix::{LabelVector, Matrix};
use crate::theory::{random_orthogonal, trial_seed};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub pool: usize,
    pub validation: usize,
    pub test: usize,
    pub models: usize,
    /// Fraction of validation/test samples the classifier gets right.
    pub accuracy: f64,
    /// Norm of each class mean.
    pub separation: f64,
    /// Per-coordinate noise of classifier features.
    pub noise: f64,
    /// Base per-coordinate noise a foundation model adds on top of its
    /// rotation; each sample scales it by a factor drawn from `[0.5, 4)`.
    pub foundation_noise: f64,
    /// Misclassified samples' content is blended towards their true class
    /// by a fraction drawn from `[min_blend, 1]`.
    pub min_blend: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            pool: 10_000,
            validation: 1000,
            test: 1000,
            models: 2,
            accuracy: 0.8,
            separation: 3.0,
            noise: 0.15,
            foundation_noise: 0.05,
            min_blend: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub pool: SplitData,
    pub validation: SplitData,
    pub test: SplitData,
}

struct World {
    means: Vec<Vec<f64>>,
    rotations: Vec<Matrix>,
}

impl World {
    fn encode(&self, cfg: &SynthConfig, rng: &mut impl Rng, class: usize) -> Vec<f64> {
        self.means[class]
            .iter()
            .map(|m| m + cfg.noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `z` moved a fraction `blend` of the way from class `from` to `to`.
    fn shift(&self, z: &[f64], from: usize, to: usize, blend: f64) -> Vec<f64> {
        z.iter()
            .zip(self.means[from].iter().zip(&self.means[to]))
            .map(|(v, (a, b))| v + blend * (b - a))
            .collect()
    }

    fn foundation(&self, rng: &mut impl Rng, model: usize, z: &[f64], noise: f64) -> Vec<f64> {
        self.rotations[model]
            .iter_rows()
            .map(|r| {
                let v: f64 = r.iter().zip(z).map(|(a, b)| a * b).sum();
                v + noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }
}

fn logits_row(rng: &mut impl Rng, classes: usize, pred: usize, margin: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..classes).map(|_| rng.sample(StandardNormal)).collect();
    let best_other = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != pred)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    row[pred] = best_other + margin;
    row
}

fn make_split(
    cfg: &SynthConfig,
    world: &World,
    n: usize,
    accuracy: f64,
    id: &str,
    seed: u64,
) -> Result<SplitData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classifier = Vec::with_capacity(n);
    let mut foundation: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); cfg.models];
    let mut logits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..cfg.classes);
        let correct = rng.random::<f64>() < accuracy;
        let pred = if correct {
            y
        } else {
            (y + rng.random_range(1..cfg.classes)) % cfg.classes
        };
        // The classifier encodes the class it believes in; the foundation
        // models see the sample's true content.
        let z = world.encode(cfg, &mut rng, pred);
        // Misclassified content sits partway between the predicted and true
        // class, and foundation noise varies per sample, so agreement is
        // informative without separating the two groups perfectly.
        let content = if correct {
            z.clone()
        } else {
            let blend = rng.random_range(cfg.min_blend..=1.0);
            world.shift(&z, pred, y, blend)
        };
        let noise = cfg.foundation_noise * rng.random_range(0.5..4.0);
        for (m, out) in foundation.iter_mut().enumerate() {
            out.push(world.foundation(&mut rng, m, &content, noise));
        }
        let margin = if correct {
            rng.random_range(0.5..4.0)
        } else {
            rng.random_range(0.0..3.0)
        };
        logits.push(logits_row(&mut rng, cfg.classes, pred, margin));
        classifier.push(z);
        labels.push(y);
    }
    Ok(SplitData {
        id: id.to_string(),
        seed,
        classifier: Matrix::from_rows(&classifier)?,
        foundation: foundation
            .into_iter()
            .enumerate()
            .map(|(m, rows)| Ok((format!("fm{m}"), Matrix::from_rows(&rows)?)))
            .collect::<Result<_>>()?,
        logits: Matrix::from_rows(&logits)?,
        labels: LabelVector::with_classes(labels, cfg.classes)?,
    })
}

/// Pool, validation and test splits sharing one set of class means and
/// foundation rotations. Pool samples are all classified correctly.
pub fn synthetic_splits(cfg: &SynthConfig) -> Result<SyntheticSplits> {
    if cfg.classes < 2 || cfg.dim < 2 || cfg.models == 0 || cfg.pool == 0 {
        return Err(Error::InvalidParameter(
            "synthetic data needs classes >= 2, dim >= 2, models >= 1 and a non-empty pool".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.min_blend) {
        return Err(Error::InvalidParameter(format!(
            "min_blend must lie in [0, 1], got {}",
            cfg.min_blend
        )));
    }
    if !(0.0..=1.0).contains(&cfg.accuracy) {
        return Err(Error::InvalidParameter(format!(
            "accuracy must lie in [0, 1], got {}",
            cfg.accuracy
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * cfg.separation / len).collect()
        })
        .collect();
    let rotations = (0..cfg.models).map(|_| random_orthogonal(&mut rng, cfg.dim)).collect();
    let world = World { means, rotations };
    let id = format!("synthetic-{}", cfg.seed);
    Ok(SyntheticSplits {
        pool: make_split(cfg, &world, cfg.pool, 1.0, &id, trial_seed(cfg.seed, 0))?,
        validation: make_split(cfg, &world, cfg.validation, cfg.accuracy, &id, trial_seed(cfg.seed, 1))?,
        test: make_split(cfg, &world, cfg.test, cfg.accuracy, &id, trial_seed(cfg.seed, 2))?,
    })
}

/// Writes one split as LATC files plus `manifest.json` under `dir`.
pub fn write_split(data: &SplitData, split: Split, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_container(&data.classifier.to_f32()?, dir.join("classifier.latc"))?;
    let mut foundation = Vec::new();
    for (id, m) in &data.foundation {
        let name = format!("{id}.latc");
        write_container(&m.to_f32()?, dir.join(&name))?;
        foundation.push(FoundationEntry {
            model_id: id.clone(),
            path: name,
        });
    }
    write_container(&data.logits.to_f32()?, dir.join("logits.latc"))?;
    write_labels(&data.labels, dir.join("labels.latc"))?;
    DatasetManifest {
        classifier_features: "classifier.latc".into(),
        foundation_features: foundation,
        logits: "logits.latc".into(),
        labels: "labels.latc".into(),
        split,
        seed: data.seed,
    }
    .save(dir.join("manifest.json"))
}

/// Logits whose labels are drawn from `softmax(logits / temperature)`, so
/// the NLL-optimal vanilla temperature is `temperature`.
pub fn calibrated_logits(
    n: usize,
    classes: usize,
    temperature: f64,
    spread: f64,
    seed: u64,
) -> Result<(Matrix, LabelVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = Matrix::zeros(n, classes);
    let mut labels = Vec::with_capacity(n);
    let mut probs = vec![0.0; classes];
    for i in 0..n {
        let base: Vec<f64> = (0..classes)
            .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        softmax_row_into(&base, 1.0, &mut probs);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = classes - 1;
        for (c, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                label = c;
                break;
            }
        }
        labels.push(label);
        for (o, b) in logits.row_mut(i).iter_mut().zip(&base) {
            *o = b * temperature;
        }
    }
    Ok((logits, LabelVector::with_classes(labels, classes)?))
}
