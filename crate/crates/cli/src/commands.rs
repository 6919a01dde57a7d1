use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lata::agreement::{agreement_accuracy_curve, pearson, AgreementMeasure, AgreementVector};
use lata::arraystore::{
    import_csv_labels, import_csv_matrix, load_manifest, write_container, write_labels, DatasetManifest,
    FoundationEntry, Split,
};
use lata::calibration::{fit, CalibrationModel, Variant};
use lata::detection::{
    correctness, run_pipeline, sweep_k, sweep_pool_size, ModelSelection, PipelineOptions, PoolSpaces, SplitData,
    DEFAULT_K_GRID,
};
use lata::neighborhood::{knn_proxy_accuracy, Pool};
use lata::synth::{synthetic_splits, write_split, SynthConfig};
use lata::theory::{run_theory, TheoryConfig};
use lata::{Error, Matrix, Parallelism};
use serde::Serialize;

use crate::args::*;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

const DEFAULT_K: usize = 50;

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    println!("{}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_split(path: &Path) -> Result<SplitData> {
    Ok(SplitData::from_bundle(&load_manifest(path)?))
}

fn models(pool: &PoolArgs) -> ModelSelection {
    pool.models.as_deref().map(ModelSelection::parse).unwrap_or_default()
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn warn(messages: &[String]) {
    for m in messages {
        eprintln!("warning: {m}");
    }
}

/// Agreement of `queries` against the pool for one `k`, with the resolved model ids.
fn agreement_of(pool: &SplitData, queries: &SplitData, sel: &ModelSelection, k: usize) -> Result<AgreementVector> {
    let ids = sel.resolve(&pool.model_ids())?;
    let spaces = PoolSpaces::build(pool, &ids)?;
    Ok(spaces
        .agreement(queries, &[k], AgreementMeasure::Ndcg, Parallelism::default())?
        .remove(0))
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("lata-out"));
    let features = import_csv_matrix(required(&a.features, "features")?)?;
    let logits = import_csv_matrix(required(&a.logits, "logits")?)?;
    let classes = a.classes.unwrap_or(logits.cols());
    let labels = import_csv_labels(required(&a.labels, "labels")?, classes)?;
    if a.foundation.is_empty() {
        return Err(CliError::MissingArgument("at least one --foundation ID=CSV is required".into()));
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut entries = Vec::new();
    for spec in &a.foundation {
        let (id, path) = spec
            .split_once('=')
            .filter(|(id, p)| !id.is_empty() && !p.is_empty())
            .ok_or_else(|| CliError::Usage(format!("--foundation expects ID=CSV, got {spec:?}")))?;
        if entries.iter().any(|e: &FoundationEntry| e.model_id == id) {
            return Err(CliError::Usage(format!("foundation model {id:?} given twice")));
        }
        let name = format!("foundation_{id}.latc");
        write_container(&import_csv_matrix(path)?, out.join(&name))?;
        entries.push(FoundationEntry {
            model_id: id.to_string(),
            path: name,
        });
    }
    write_container(&features, out.join("classifier.latc"))?;
    write_container(&logits, out.join("logits.latc"))?;
    write_labels(&labels, out.join("labels.latc"))?;
    let split = match a.split.unwrap_or(SplitArg::Test) {
        SplitArg::Pool => Split::Pool,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    };
    let manifest_path = out.join("manifest.json");
    DatasetManifest {
        classifier_features: "classifier.latc".into(),
        foundation_features: entries,
        logits: "logits.latc".into(),
        labels: "labels.latc".into(),
        split,
        seed: a.seed.unwrap_or(0),
    }
    .save(&manifest_path)?;
    let bundle = load_manifest(&manifest_path)?;
    println!("{}", manifest_path.display());
    println!(
        "{} rows, {} classifier dims, {} foundation models",
        bundle.len(),
        bundle.classifier.cols(),
        bundle.foundation.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ModelScores<'a> {
    model_id: &'a str,
    scores: &'a [f64],
}

#[derive(Serialize)]
struct AgreementOutput<'a> {
    k: usize,
    n: usize,
    models: &'a [String],
    scores: &'a [f64],
    per_model: Vec<ModelScores<'a>>,
}

pub fn agree(a: &AgreeArgs) -> Result<()> {
    let queries_path = required(&a.manifest, "manifest")?;
    let pool_path = required(&a.pool.pool, "pool")?;
    let queries = load_split(&queries_path)?;
    let pool = load_split(&pool_path)?;
    let k = a.k.unwrap_or(DEFAULT_K);
    let v = agreement_of(&pool, &queries, &models(&a.pool), k)?;

    let dir = a.output.dir();
    let fmt = a.output.format();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let column = Matrix::new(v.len(), 1, v.scores.clone())?.to_f32()?;
    let latc = dir.join("agreement.latc");
    write_container(&column, &latc)?;
    println!("{}", latc.display());
    if fmt.csv() {
        let mut csv = String::from("sample_id,score");
        for id in &v.model_ids {
            csv.push(',');
            csv.push_str(id);
        }
        csv.push('\n');
        for (i, s) in v.scores.iter().enumerate() {
            csv.push_str(&format!("{i},{s}"));
            for m in &v.per_model {
                csv.push_str(&format!(",{}", m[i]));
            }
            csv.push('\n');
        }
        write(&dir, "agreement.csv", &csv)?;
    }
    if fmt.json() {
        let out = AgreementOutput {
            k,
            n: v.len(),
            models: &v.model_ids,
            scores: &v.scores,
            per_model: v
                .model_ids
                .iter()
                .zip(&v.per_model)
                .map(|(id, s)| ModelScores { model_id: id, scores: s })
                .collect(),
        };
        write_json(&dir, "agreement.json", &out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Fitted {
    #[serde(flatten)]
    model: CalibrationModel,
    validation_nll: f64,
}

#[derive(Serialize)]
struct CalibrationOutput {
    k: usize,
    n: usize,
    models: Vec<String>,
    fits: Vec<Fitted>,
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let pool = load_split(&required(&a.pool.pool, "pool")?)?;
    let val = load_split(&required(&a.val, "val")?)?;
    let k = a.k.unwrap_or(DEFAULT_K);
    let agreement = agreement_of(&pool, &val, &models(&a.pool), k)?;
    let vanilla = fit(&val.logits, &val.labels, None, Variant::Vanilla)?;
    let aware = fit(&val.logits, &val.labels, Some(&agreement.scores), Variant::Agreement)?;
    let out = CalibrationOutput {
        k,
        n: val.len(),
        models: agreement.model_ids.clone(),
        fits: vec![
            Fitted {
                model: vanilla,
                validation_nll: vanilla.nll(&val.logits, &val.labels, None)?,
            },
            Fitted {
                model: aware,
                validation_nll: aware.nll(&val.logits, &val.labels, Some(&agreement.scores))?,
            },
        ],
    };
    let dir = a.output.dir();
    let fmt = a.output.format();
    if fmt.json() {
        write_json(&dir, "calibration.json", &out)?;
    }
    if fmt.csv() {
        let mut csv = String::from("variant,t,t_s,tau_floor,validation_nll\n");
        for f in &out.fits {
            let variant = match f.model.variant {
                Variant::Vanilla => "vanilla",
                Variant::Agreement => "agreement",
            };
            csv.push_str(&format!(
                "{variant},{},{},{},{}\n",
                f.model.t, f.model.t_s, f.model.tau_floor, f.validation_nll
            ));
        }
        write(&dir, "calibration.csv", &csv)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let pool = load_split(&required(&a.pool.pool, "pool")?)?;
    let val = load_split(&required(&a.val, "val")?)?;
    let test = load_split(&required(&a.test, "test")?)?;
    let opts = PipelineOptions {
        k: a.k.unwrap_or(DEFAULT_K),
        models: models(&a.pool),
        ablation: a.ablation,
        par: Parallelism::default(),
    };
    let mut report = run_pipeline(&pool, &val, &test, &opts)?;
    report.timestamp = Some(unix_time());
    let dir = a.output.dir();
    let fmt = a.output.format();
    if fmt.json() {
        write_json(&dir, "report.json", &report)?;
    }
    if fmt.csv() {
        write(&dir, "report.csv", &report.to_csv())?;
    }
    Ok(())
}

fn k_grid(given: &[usize]) -> Vec<usize> {
    if given.is_empty() {
        DEFAULT_K_GRID.to_vec()
    } else {
        given.to_vec()
    }
}

pub fn sweep_k_cmd(a: &SweepKArgs) -> Result<()> {
    let pool = load_split(&required(&a.pool.pool, "pool")?)?;
    let val = load_split(&required(&a.val, "val")?)?;
    let sweep = sweep_k(&pool, &val, &k_grid(&a.k_grid), &models(&a.pool), Parallelism::default())?;
    warn(&sweep.warnings);
    let dir = a.output.dir();
    let fmt = a.output.format();
    if fmt.json() {
        write_json(&dir, "sweep_k.json", &sweep)?;
    }
    if fmt.csv() {
        write(&dir, "sweep_k.csv", &sweep.to_csv())?;
    }
    Ok(())
}

pub fn sweep_pool_cmd(a: &SweepPoolArgs) -> Result<()> {
    if a.pool_sizes.is_empty() {
        return Err(CliError::MissingArgument("--pool-sizes is required".into()));
    }
    let pool = load_split(&required(&a.pool.pool, "pool")?)?;
    let val = load_split(&required(&a.val, "val")?)?;
    let sweep = sweep_pool_size(
        &pool,
        &val,
        &a.pool_sizes,
        &k_grid(&a.k_grid),
        a.seed.unwrap_or(0),
        &models(&a.pool),
        Parallelism::default(),
    )?;
    warn(&sweep.warnings);
    let dir = a.output.dir();
    let fmt = a.output.format();
    if fmt.json() {
        write_json(&dir, "sweep_pool.json", &sweep)?;
    }
    if fmt.csv() {
        write(&dir, "sweep_pool.csv", &sweep.to_csv())?;
    }
    Ok(())
}

pub fn theory(a: &TheoryArgs) -> Result<()> {
    let defaults = TheoryConfig::default();
    let cfg = TheoryConfig {
        seed: a.seed.unwrap_or(0),
        prop1_trials: a.trials.unwrap_or(defaults.prop1_trials),
        prop2_trials: a.trials.unwrap_or(defaults.prop2_trials),
        ..defaults
    };
    let summary = run_theory(&cfg, Parallelism::default())?;
    let dir = a.output.dir();
    let fmt = a.output.format();
    if fmt.json() {
        write_json(&dir, "theory_summary.json", &summary)?;
    }
    if fmt.csv() {
        let mut csv = String::from("bench,trials,checks,violations,min_slack,max_slack\n");
        for (name, s) in [("prop1", &summary.prop1), ("prop2", &summary.prop2)] {
            csv.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                s.trials, s.checks, s.violations, s.min_slack, s.max_slack
            ));
        }
        write(&dir, "theory_summary.csv", &csv)?;
    }
    write(&dir, "theory_trials.csv", &summary.trials_csv())?;
    Ok(())
}

#[derive(Serialize)]
struct KnnProxy {
    space: String,
    k: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct Correlation {
    models: Vec<String>,
    matrix: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct FullReport {
    #[serde(flatten)]
    eval: lata::EvalReport,
    knn_proxy: Vec<KnnProxy>,
    model_correlation: Correlation,
    agreement_accuracy: Vec<lata::agreement::CurveBin>,
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let pool = load_split(&required(&a.pool.pool, "pool")?)?;
    let val = load_split(&required(&a.val, "val")?)?;
    let test = load_split(&required(&a.test, "test")?)?;
    let k = a.k.unwrap_or(DEFAULT_K);
    let sel = models(&a.pool);
    let opts = PipelineOptions {
        k,
        models: sel.clone(),
        ablation: false,
        par: Parallelism::default(),
    };
    let mut eval = run_pipeline(&pool, &val, &test, &opts)?;
    eval.timestamp = Some(unix_time());

    let agreement = agreement_of(&pool, &test, &sel, k)?;
    let correct = correctness(&test.logits, &test.labels)?;
    let curve = agreement_accuracy_curve(&agreement.scores, &correct, a.bins.unwrap_or(10))?;

    let m = agreement.model_ids.len();
    let mut matrix = vec![vec![1.0; m]; m];
    for (i, a) in agreement.per_model.iter().enumerate() {
        for (j, b) in agreement.per_model.iter().enumerate().skip(i + 1) {
            let r = pearson(a, b)?;
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }

    let mut knn = Vec::new();
    let mut spaces: Vec<(String, &Matrix, &Matrix)> = vec![("classifier".into(), &pool.classifier, &test.classifier)];
    for id in &agreement.model_ids {
        let p = pool.foundation.iter().find(|(m, _)| m == id).map(|(_, f)| f);
        let t = test.foundation.iter().find(|(m, _)| m == id).map(|(_, f)| f);
        if let (Some(p), Some(t)) = (p, t) {
            spaces.push((id.clone(), p, t));
        } else {
            return Err(Error::UnknownModel(id.clone()).into());
        }
    }
    for (space, p, t) in spaces {
        let pool_index = Pool::new(p)?.with_labels(pool.labels.clone())?;
        knn.push(KnnProxy {
            space,
            k,
            accuracy: knn_proxy_accuracy(&pool_index, t, &test.labels, k)?,
        });
    }

    let full = FullReport {
        eval,
        knn_proxy: knn,
        model_correlation: Correlation {
            models: agreement.model_ids.clone(),
            matrix,
        },
        agreement_accuracy: curve,
    };
    let dir = a.output.dir();
    let fmt = a.output.format();
    if fmt.json() {
        write_json(&dir, "report.json", &full)?;
    }
    if fmt.csv() {
        write(&dir, "report.csv", &full.eval.to_csv())?;
        let mut csv = String::from("bin_center,accuracy,count\n");
        for b in &full.agreement_accuracy {
            let acc = b.accuracy.map_or(String::new(), |v| v.to_string());
            csv.push_str(&format!("{},{acc},{}\n", b.center, b.count));
        }
        write(&dir, "agreement_accuracy.csv", &csv)?;
        let mut csv = String::from("model");
        for id in &full.model_correlation.models {
            csv.push_str(&format!(",{id}"));
        }
        csv.push('\n');
        for (id, row) in full.model_correlation.models.iter().zip(&full.model_correlation.matrix) {
            csv.push_str(id);
            for v in row {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        write(&dir, "model_correlation.csv", &csv)?;
        let mut csv = String::from("space,k,accuracy\n");
        for r in &full.knn_proxy {
            csv.push_str(&format!("{},{},{}\n", r.space, r.k, r.accuracy));
        }
        write(&dir, "knn_proxy.csv", &csv)?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: a.seed.unwrap_or(d.seed),
        pool: a.n_pool.unwrap_or(d.pool),
        validation: a.n_val.unwrap_or(d.validation),
        test: a.n_test.unwrap_or(d.test),
        dim: a.dim.unwrap_or(d.dim),
        classes: a.classes.unwrap_or(d.classes),
        models: a.n_models.unwrap_or(d.models),
        ..d
    };
    let splits = synthetic_splits(&cfg)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("lata-out"));
    for (name, data, split) in [
        ("pool", &splits.pool, Split::Pool),
        ("val", &splits.validation, Split::Validation),
        ("test", &splits.test, Split::Test),
    ] {
        let dir = out.join(name);
        write_split(data, split, &dir)?;
        println!("{}", dir.join("manifest.json").display());
    }
    Ok(())
}
