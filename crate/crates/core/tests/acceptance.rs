//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Each check also enforces its wall-clock budget.

use std::time::{Duration, Instant};

use lata::agreement::{
    agreement_batch, ndcg, ndcg_with_base, pearson, AgreementInput, AgreementMeasure, ImportanceFn,
    LogBase, Space,
};
use lata::arraystore::{decode, encode_features, encode_labels, read_container, Container};
use lata::calibration::{self, fit, CalibrationModel, Variant};
use lata::detection::{
    argmax_rows, auroc, correctness, run_pipeline, select_best_k, sweep_k, MethodId, ModelSelection,
    PipelineOptions, PoolSpaces, DEFAULT_K_GRID,
};
use lata::error::Error;
use lata::exec::Parallelism;
use lata::matrix::{FeatureMatrix, LabelVector, Matrix};
use lata::neighborhood::{Permutation, Pool};
use lata::synth::{calibrated_logits, synthetic_splits, SynthConfig};
use lata::theory::{check_prop2, gen_distortion, random_orthogonal, run_theory, TheoryConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

/// Name, time budget in seconds, check.
type Criterion = (&'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

/// All permutations of `0..n` in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Straight from the definition: relevance of the item at each rank,
/// discounted by log2(rank + 1).
fn oracle_ndcg(ideal: &[usize], cand: &[usize], relevance: &dyn Fn(usize) -> f64) -> f64 {
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .enumerate()
            .map(|(i, &item)| relevance(item) / ((i + 2) as f64).log2())
            .sum()
    };
    dcg(cand) / dcg(ideal)
}

fn ndcg_correctness() -> Check {
    let id = Permutation::from_order(vec![0, 1, 2, 3, 4]).unwrap();
    let v = ndcg(&id, &id, &ImportanceFn::Indicator { k: 3 }).map_err(e2s)?;
    ensure(v == 1.0, || format!("identity gave {v}"))?;

    let star = Permutation::from_order(vec![0, 1, 2, 3]).unwrap();
    let prime = Permutation::from_order(vec![1, 2, 0, 3]).unwrap();
    let v = ndcg(&star, &prime, &ImportanceFn::Indicator { k: 2 }).map_err(e2s)?;
    let want = 1.5 / (1.0 + 1.0 / 3f64.log2());
    ensure((v - want).abs() <= 1e-9, || format!("hand fixture {v} vs {want}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for n in 1..=6 {
        let perms = permutations(n);
        let mut ideal: Vec<usize> = (0..n).collect();
        ideal.shuffle(&mut rng);
        let star = Permutation::from_order(ideal.clone()).unwrap();
        let mut sorted_d: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        sorted_d.sort_by(f64::total_cmp);
        let mut distances = vec![0.0; n];
        for (rank, &item) in ideal.iter().enumerate() {
            distances[item] = sorted_d[rank];
        }
        for p in &perms {
            let cand = Permutation::from_order(p.clone()).unwrap();
            for k in 1..=n {
                let top: Vec<usize> = ideal[..k].to_vec();
                let want = oracle_ndcg(&ideal, p, &|i| if top.contains(&i) { 1.0 } else { 0.0 });
                let got = ndcg(&star, &cand, &ImportanceFn::Indicator { k }).map_err(e2s)?;
                ensure((got - want).abs() <= 1e-12, || format!("n={n} k={k} {p:?}: {got} vs {want}"))?;
                checked += 1;
            }
            let want = oracle_ndcg(&ideal, p, &|i| 1.0 / distances[i]);
            let got = ndcg(
                &star,
                &cand,
                &ImportanceFn::ReciprocalDistance {
                    distances: distances.clone(),
                },
            )
            .map_err(e2s)?;
            ensure((got - want).abs() <= 1e-12, || format!("reciprocal n={n} {p:?}: {got} vs {want}"))?;
            checked += 1;
        }
    }
    Ok(format!("hand fixture {v:.11}, {checked} oracle comparisons"))
}

fn ndcg_log_base() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let k = rng.random_range(1..=n);
        let mut a: Vec<usize> = (0..n).collect();
        let mut b = a.clone();
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let (a, b) = (
            Permutation::from_order(a).unwrap(),
            Permutation::from_order(b).unwrap(),
        );
        let r = ImportanceFn::Indicator { k };
        let v2 = ndcg_with_base(&a, &b, &r, LogBase::Two).map_err(e2s)?;
        for base in [LogBase::E, LogBase::Ten] {
            let v = ndcg_with_base(&a, &b, &r, base).map_err(e2s)?;
            worst = worst.max((v - v2).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max base disagreement {worst:e}"))?;
    Ok(format!("max disagreement {worst:e}"))
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn mean_agreement(c_pool: &Matrix, c_q: &Matrix, f_pool: &Matrix, f_q: &Matrix, k: usize) -> Result<Vec<f64>, String> {
    let cp = Pool::new(c_pool).map_err(e2s)?;
    let fp = Pool::new(f_pool).map_err(e2s)?;
    let input = AgreementInput {
        classifier: Space {
            pool: &cp,
            queries: c_q,
        },
        foundation: vec![(
            "f".to_string(),
            Space {
                pool: &fp,
                queries: f_q,
            },
        )],
    };
    Ok(agreement_batch(&input, k).map_err(e2s)?.scores)
}

fn as_invariances() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, d, q) = (500, 32, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(5..100);
        let c_pool = gaussian(&mut rng, n, d);
        let c_q = gaussian(&mut rng, q, d);
        let f_pool = gaussian(&mut rng, n, d);
        let f_q = gaussian(&mut rng, q, d);
        let base = mean_agreement(&c_pool, &c_q, &f_pool, &f_q, k)?;

        let rot = random_orthogonal(&mut rng, d);
        let scale = rng.random_range(0.01..100.0);
        let variants = [
            mean_agreement(&c_pool, &c_q, &f_pool.matmul(&rot).unwrap(), &f_q.matmul(&rot).unwrap(), k)?,
            mean_agreement(&c_pool.matmul(&rot).unwrap(), &c_q.matmul(&rot).unwrap(), &f_pool, &f_q, k)?,
            mean_agreement(&c_pool, &c_q, &f_pool.scale(scale), &f_q.scale(scale), k)?,
            mean_agreement(&c_pool.scale(scale), &c_q.scale(scale), &f_pool, &f_q, k)?,
        ];
        for v in &variants {
            for (a, b) in base.iter().zip(v) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max AS change {worst:e}"))?;
    Ok(format!("max AS change {worst:e}"))
}

fn prop1_bench() -> Check {
    let cfg = TheoryConfig {
        prop2_trials: 0,
        ..TheoryConfig::default()
    };
    let s = run_theory(&cfg, Parallelism::default()).map_err(e2s)?;
    ensure(s.prop1.trials == 1000, || "wrong trial count".into())?;
    ensure(s.prop1.violations == 0, || format!("{} violations", s.prop1.violations))?;
    let mut seen = cfg.prop1_c.clone();
    seen.retain(|c| s.trials.iter().any(|t| t.param == *c));
    ensure(seen.len() == 3, || "not every C exercised".into())?;
    Ok(format!(
        "{} checks over C in {:?}, min slack {:e}",
        s.prop1.checks, cfg.prop1_c, s.prop1.min_slack
    ))
}

fn prop2_bench() -> Check {
    let cfg = TheoryConfig {
        prop1_trials: 0,
        ..TheoryConfig::default()
    };
    let s = run_theory(&cfg, Parallelism::default()).map_err(e2s)?;
    ensure(s.prop2.trials == 1000, || "wrong trial count".into())?;
    ensure(s.prop2.violations == 0, || format!("{} violations", s.prop2.violations))?;
    for seed in 0..100 {
        let f = gen_distortion(200, 8, 20, 1.0, seed).map_err(e2s)?;
        let r = check_prop2(&f).map_err(e2s)?;
        ensure(r.ndcg == 1.0, || format!("delta=1 seed {seed}: NDCG {}", r.ndcg))?;
    }
    let mins: Vec<String> = s
        .prop2_by_delta
        .iter()
        .map(|e| format!("{}:{:.4}", e.delta, e.min_ndcg))
        .collect();
    Ok(format!("min NDCG by delta [{}], delta=1 exact on 100 fields", mins.join(" ")))
}

fn calibration_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (rows, classes, block) = (100_000, 10, 1000);
    let logits = gaussian(&mut rng, rows, classes).scale(4.0);
    let scores: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
    let before = argmax_rows(&logits);
    let mut flips = 0;
    for b in 0..rows / block {
        let idx: Vec<usize> = (b * block..(b + 1) * block).collect();
        let model = CalibrationModel::agreement(rng.random_range(-3.0..10.0), rng.random_range(-10.0..10.0));
        let sub = logits.select_rows(&idx);
        let probs = calibration::apply(&model, &sub, Some(&scores[b * block..(b + 1) * block])).map_err(e2s)?;
        flips += argmax_rows(&probs)
            .iter()
            .zip(&before[b * block..])
            .filter(|(a, b)| a != b)
            .count();
    }
    ensure(flips == 0, || format!("{flips} argmax flips"))?;

    let (l, y) = calibrated_logits(10_000, 10, 3.0, 1.5, 5).map_err(e2s)?;
    let t = fit(&l, &y, None, Variant::Vanilla).map_err(e2s)?.t;
    ensure((t - 3.0).abs() <= 0.15, || format!("fitted t = {t}"))?;

    let s = synthetic_splits(&SynthConfig {
        pool: 2000,
        validation: 1000,
        test: 10,
        seed: 3,
        ..SynthConfig::default()
    })
    .map_err(e2s)?;
    let spaces = PoolSpaces::build(&s.pool, &s.pool.model_ids()).map_err(e2s)?;
    let agree = spaces
        .agreement(&s.validation, &[50], AgreementMeasure::Ndcg, Parallelism::default())
        .map_err(e2s)?
        .remove(0)
        .scores;
    let val = &s.validation;
    let vanilla = fit(&val.logits, &val.labels, None, Variant::Vanilla).map_err(e2s)?;
    let aware = fit(&val.logits, &val.labels, Some(&agree), Variant::Agreement).map_err(e2s)?;
    let nv = vanilla.nll(&val.logits, &val.labels, None).map_err(e2s)?;
    let na = aware.nll(&val.logits, &val.labels, Some(&agree)).map_err(e2s)?;
    ensure(na <= nv + 1e-9, || format!("agreement NLL {na} > vanilla {nv}"))?;
    Ok(format!(
        "0 flips on {rows} rows, fitted t={t:.4}, NLL vanilla {nv:.4} agreement {na:.4}"
    ))
}

fn pairwise_auroc(scores: &[f64], correct: &[bool]) -> f64 {
    let (mut wins, mut pos, mut neg) = (0.0, 0usize, 0usize);
    for (i, &ci) in correct.iter().enumerate() {
        if !ci {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &cj) in correct.iter().enumerate() {
            if !cj {
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / (pos * neg) as f64
}

fn auroc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let n = rng.random_range(2..=1000);
        let levels = if trial % 2 == 0 { 5 } else { 1000 };
        let mut correct: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
        correct[0] = true;
        correct[1] = false;
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / 8.0 - 2.0)
            .collect();
        let got = auroc(&scores, &correct).map_err(e2s)?;
        let want = pairwise_auroc(&scores, &correct);
        worst = worst.max((got - want).abs());
        for f in [|s: f64| s.exp(), |s: f64| 5.0 * s + 3.0, |s: f64| s * s * s] {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let v = auroc(&mapped, &correct).map_err(e2s)?;
            ensure(v == got, || format!("trial {trial}: transform changed {got} to {v}"))?;
        }
    }
    ensure(worst <= 1e-12, || format!("max oracle gap {worst:e}"))?;
    Ok(format!("max oracle gap {worst:e}"))
}

fn synthetic_end_to_end() -> Check {
    let s = synthetic_splits(&SynthConfig::default()).map_err(e2s)?;
    let opts = PipelineOptions::default();
    let report = run_pipeline(&s.pool, &s.validation, &s.test, &opts).map_err(e2s)?;
    let spaces = PoolSpaces::build(&s.pool, &report.models).map_err(e2s)?;
    let agree = spaces
        .agreement(&s.test, &[opts.k], AgreementMeasure::Ndcg, opts.par)
        .map_err(e2s)?
        .remove(0)
        .scores;
    let correct: Vec<f64> = correctness(&s.test.logits, &s.test.labels)
        .map_err(e2s)?
        .into_iter()
        .map(|c| if c { 1.0 } else { 0.0 })
        .collect();
    let r = pearson(&agree, &correct).map_err(e2s)?;
    let msp = report.auroc_of(&MethodId::Msp).ok_or("msp missing")?;
    let ts = report
        .auroc_of(&MethodId::TsAgreementMulti)
        .ok_or("ts_agreement missing")?;
    ensure(r > 0.3, || format!("Pearson(AS, correct) = {r}"))?;
    ensure(ts >= msp + 0.01, || format!("ts_agreement {ts} vs msp {msp}"))?;
    Ok(format!(
        "Pearson {r:.4}, AUROC ts_agreement {ts:.4} vs msp {msp:.4}, accuracy {:.3}",
        report.test_accuracy
    ))
}

fn k_sweep() -> Check {
    ensure(DEFAULT_K_GRID == [10, 20, 50, 100, 200, 500, 1000], || {
        format!("default grid {DEFAULT_K_GRID:?}")
    })?;
    let table = [(10, 0.71), (20, 0.84), (50, 0.84), (100, 0.80), (200, 0.62)];
    ensure(select_best_k(&table) == Some(20), || "fixture optimum not chosen".into())?;
    let table = [(10, 0.5), (20, 0.6), (50, 0.9), (100, 0.7)];
    ensure(select_best_k(&table) == Some(50), || "fixture optimum not chosen".into())?;

    let s = synthetic_splits(&SynthConfig {
        pool: 600,
        validation: 300,
        test: 10,
        dim: 32,
        seed: 9,
        ..SynthConfig::default()
    })
    .map_err(e2s)?;
    let sweep = sweep_k(
        &s.pool,
        &s.validation,
        &DEFAULT_K_GRID,
        &ModelSelection::Multiple,
        Parallelism::default(),
    )
    .map_err(e2s)?;
    ensure(sweep.warnings.len() == 1, || format!("warnings {:?}", sweep.warnings))?;
    let evaluated: Vec<(usize, f64)> = sweep.rows.iter().filter_map(|r| r.auroc.map(|a| (r.k, a))).collect();
    let best = evaluated.iter().map(|(_, a)| *a).fold(f64::NEG_INFINITY, f64::max);
    let expect = evaluated.iter().find(|(_, a)| *a == best).map(|(k, _)| *k);
    ensure(Some(sweep.best_k) == expect, || format!("best_k {} vs {expect:?}", sweep.best_k))?;
    Ok(format!("grid ok, sweep best_k={} over {} evaluated k", sweep.best_k, evaluated.len()))
}

fn header(dtype: u8, rows: u64, cols: u64) -> Vec<u8> {
    let mut b = b"LATC".to_vec();
    b.push(1);
    b.push(dtype);
    b.extend([0, 0]);
    b.extend(rows.to_le_bytes());
    b.extend(cols.to_le_bytes());
    b
}

fn latc_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let specials = [0.0f32, -0.0, f32::MIN_POSITIVE, 1e-45, f32::MAX, f32::MIN, 1.0, -1.0];
    for i in 0..1000 {
        let rows = rng.random_range(1..40);
        let cols = rng.random_range(1..40);
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| {
                if rng.random::<f64>() < 0.05 {
                    specials[rng.random_range(0..specials.len())]
                } else {
                    rng.sample::<f32, _>(rand_distr::StandardNormal) * 10f32.powi(rng.random_range(-10..10))
                }
            })
            .collect();
        let m = FeatureMatrix::new(rows, cols, data).unwrap();
        let bytes = encode_features(&m).map_err(e2s)?;
        ensure(bytes.len() == 24 + 4 * rows * cols, || format!("size {}", bytes.len()))?;
        let back = decode(&bytes).map_err(e2s)?.into_features().map_err(e2s)?;
        let same = back.rows() == rows
            && back.cols() == cols
            && back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("matrix {i} not bit-identical"))?;

        if i % 10 == 0 {
            let classes = rng.random_range(2..50);
            let labels = LabelVector::with_classes((0..rows).map(|_| rng.random_range(0..classes)).collect(), classes)
                .unwrap();
            let back = decode(&encode_labels(&labels).map_err(e2s)?)
                .map_err(e2s)?
                .into_labels(classes)
                .map_err(e2s)?;
            ensure(back == labels, || "labels differ".into())?;
        }
    }

    let mut ok = header(0, 1, 2);
    ok.extend(1f32.to_le_bytes());
    ok.extend(2f32.to_le_bytes());
    let mut cases: Vec<(&str, Vec<u8>)> = Vec::new();
    cases.push(("BadMagic", b"LAT".to_vec()));
    let mut v = ok.clone();
    v[0] = b'X';
    cases.push(("BadMagic", v));
    let mut v = ok.clone();
    v[4] = 2;
    cases.push(("UnsupportedVersion", v));
    let mut v = ok.clone();
    v[5] = 7;
    cases.push(("UnsupportedDtype", v));
    let mut v = ok.clone();
    v[6] = 1;
    cases.push(("MalformedHeader", v));
    cases.push(("MalformedHeader", ok[..20].to_vec()));
    cases.push(("MalformedHeader", header(0, 0, 2)));
    cases.push(("TruncatedPayload", ok[..27].to_vec()));
    let mut v = ok.clone();
    v.push(0);
    cases.push(("TrailingBytes", v));
    let mut v = header(0, 1, 2);
    v.extend(1f32.to_le_bytes());
    v.extend(f32::NAN.to_le_bytes());
    cases.push(("NonFiniteElement", v));
    let mut v = header(0, 1, 1);
    v.extend(f32::INFINITY.to_le_bytes());
    cases.push(("NonFiniteElement", v));
    for (want, bytes) in &cases {
        match decode(bytes) {
            Err(e) => ensure(e.kind() == *want, || format!("expected {want}, got {}", e.kind()))?,
            Ok(_) => return Err(format!("expected {want}, decoded fine")),
        }
    }
    let mut ints = header(1, 1, 1);
    ints.extend(3i32.to_le_bytes());
    match decode(&ints).map_err(e2s)? {
        c @ Container::I32(_) => {
            let e = c.into_features().err().ok_or("i32 accepted as features")?;
            ensure(e.kind() == "DtypeMismatch", || e.kind().to_string())?;
        }
        _ => return Err("i32 container decoded as f32".into()),
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let e = read_container(dir.path().join("absent.latc")).err().ok_or("missing file read")?;
    ensure(e.kind() == "MissingFile", || e.kind().to_string())?;
    Ok(format!("1000 matrices bit-exact, {} malformed cases", cases.len() + 2))
}

fn main() {
    let checks: [Criterion; 10] = [
        ("ndcg-correctness", 1, ndcg_correctness),
        ("ndcg-log-base-invariance", 1, ndcg_log_base),
        ("agreement-invariances", 5, as_invariances),
        ("regression-bound-bench", 10, prop1_bench),
        ("distortion-ndcg-bench", 30, prop2_bench),
        ("calibration", 30, calibration_checks),
        ("auroc-oracle", 5, auroc_oracle),
        ("synthetic-end-to-end", 60, synthetic_end_to_end),
        ("k-sweep", 10, k_sweep),
        ("latc-round-trip", 5, latc_round_trip),
    ];
    let mut failed = 0;
    for (name, budget, check) in checks {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(budget) => {
                Err(format!("{detail}; over budget {budget}s"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {name} ({:.2}s) {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({:.2}s) {detail}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
