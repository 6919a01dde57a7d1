use lata::agreement::{
    agreement_batch_multi, ndcg, ndcg_with_base, AgreementInput, AgreementMeasure, ImportanceFn, LogBase, Space,
};
use lata::arraystore::{decode, encode_features};
use lata::calibration::{apply, CalibrationModel};
use lata::detection::{argmax_rows, auroc};
use lata::neighborhood::{rank, rank_batch, Permutation, Pool};
use lata::{FeatureMatrix, Matrix, Parallelism};
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Permutation> {
    Just((0..n).collect::<Vec<usize>>())
        .prop_shuffle()
        .prop_map(|o| Permutation::from_order(o).unwrap())
}

fn perm_pair() -> impl Strategy<Value = (Permutation, Permutation, usize)> {
    (1usize..40).prop_flat_map(|n| (permutation(n), permutation(n), 1..=n))
}

fn has_zero_row(m: &Matrix) -> bool {
    m.iter_rows().any(|r| r.iter().all(|&v| v == 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn latc_round_trip(
        (rows, cols, bits) in (1usize..20, 1usize..20)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(any::<u32>(), r * c))),
    ) {
        let data: Vec<f32> = bits
            .into_iter()
            .map(|b| {
                let v = f32::from_bits(b);
                if v.is_finite() { v } else { 0.5 }
            })
            .collect();
        let m = FeatureMatrix::new(rows, cols, data).unwrap();
        let back = decode(&encode_features(&m).unwrap()).unwrap().into_features().unwrap();
        prop_assert_eq!(back.rows(), rows);
        prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ranking_is_a_sorted_bijection(pool in matrix(1..30, 1..6), query in prop::collection::vec(-1.0f64..1.0, 6)) {
        prop_assume!(!has_zero_row(&pool));
        let q = &query[..pool.cols()];
        prop_assume!(q.iter().any(|&v| v != 0.0));
        let p = Pool::new(&pool).unwrap();
        let perm = rank(q, &p).unwrap();
        let mut seen = perm.order().to_vec();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pool.rows()).collect::<Vec<_>>());
        prop_assert!(perm.similarities().windows(2).all(|w| w[0] >= w[1]));
        for (pos, &item) in perm.order().iter().enumerate() {
            prop_assert_eq!(perm.positions()[item], pos);
        }
    }

    #[test]
    fn ranking_ignores_signed_permutations_and_scale(
        pool in matrix(2..30, 2..6),
        shift in 0usize..6,
        exp in -4i32..4,
    ) {
        prop_assume!(!has_zero_row(&pool));
        let d = pool.cols();
        let map = |r: &[f64]| -> Vec<f64> {
            (0..d).map(|j| {
                let v = r[(j + shift) % d] * 2f64.powi(exp);
                if j % 2 == 0 { -v } else { v }
            }).collect()
        };
        let moved = Matrix::from_rows(&pool.iter_rows().map(map).collect::<Vec<_>>()).unwrap();
        let (a, b) = (Pool::new(&pool).unwrap(), Pool::new(&moved).unwrap());
        for i in 0..pool.rows().min(3) {
            let ra = rank(pool.row(i), &a).unwrap();
            let rb = rank(moved.row(i), &b).unwrap();
            prop_assert_eq!(ra.order(), rb.order());
        }
    }

    #[test]
    fn batch_ranking_matches_loop(pool in matrix(1..40, 3..4), queries in matrix(0..20, 3..4)) {
        prop_assume!(!has_zero_row(&pool) && !has_zero_row(&queries));
        let p = Pool::new(&pool).unwrap();
        let batch = rank_batch(&queries, &p).unwrap();
        prop_assert_eq!(batch.len(), queries.rows());
        for (i, perm) in batch.iter().enumerate() {
            let single = rank(queries.row(i), &p).unwrap();
            prop_assert_eq!(perm.order(), single.order());
            prop_assert_eq!(perm.similarities(), single.similarities());
        }
    }

    #[test]
    fn ndcg_bounded_and_base_free((a, b, k) in perm_pair()) {
        let r = ImportanceFn::Indicator { k };
        let v = ndcg(&a, &b, &r).unwrap();
        prop_assert!(v > 0.0 && v <= 1.0 + 1e-12);
        prop_assert_eq!(ndcg(&a, &a, &r).unwrap(), 1.0);
        for base in [LogBase::E, LogBase::Ten, LogBase::Other(3.5)] {
            prop_assert!((ndcg_with_base(&a, &b, &r, base).unwrap() - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn ideal_order_maximizes_reciprocal_dcg((a, b, _) in perm_pair(), scale in 0.1f64..10.0) {
        let n = a.len();
        let mut distances = vec![0.0; n];
        for (pos, &item) in a.order().iter().enumerate() {
            distances[item] = scale * (1.0 + pos as f64);
        }
        let v = ndcg(&a, &b, &ImportanceFn::ReciprocalDistance { distances }).unwrap();
        prop_assert!(v > 0.0 && v <= 1.0 + 1e-12);
    }

    #[test]
    fn auroc_symmetry_and_exact_monotone_invariance(
        raw in prop::collection::vec((0i32..12, any::<bool>()), 2..200),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
        let correct: Vec<bool> = raw.iter().map(|(_, c)| *c).collect();
        prop_assume!(correct.iter().any(|&c| c) && correct.iter().any(|&c| !c));
        let a = auroc(&scores, &correct).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + auroc(&neg, &correct).unwrap() - 1.0).abs() <= 1e-12);
        let mapped: Vec<f64> = scores.iter().map(|s| 4.0 * s + 1.0).collect();
        prop_assert_eq!(auroc(&mapped, &correct).unwrap(), a);
        let squashed: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(auroc(&squashed, &correct).unwrap(), a);
    }

    #[test]
    fn calibration_keeps_argmax_and_normalizes(
        logits in matrix(1..30, 2..8),
        t in -2.0f64..10.0,
        t_s in -10.0f64..10.0,
        agreement in prop::collection::vec(0.0f64..1.0, 30),
    ) {
        let model = CalibrationModel::agreement(t, t_s);
        let probs = apply(&model, &logits, Some(&agreement[..logits.rows()])).unwrap();
        for row in probs.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let raw = argmax_rows(&logits);
        let after = argmax_rows(&probs);
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let top = row[raw[i]];
            // Rows whose top two logits are within rounding of each other may
            // legitimately collapse to a tie after scaling.
            let unique = row.iter().filter(|&&v| v == top).count() == 1
                && row.iter().enumerate().all(|(j, &v)| j == raw[i] || top - v > 1e-9);
            if unique {
                prop_assert_eq!(after[i], raw[i]);
            }
        }
    }

    #[test]
    fn parallel_agreement_is_bit_identical(
        c_pool in matrix(20..40, 4..5),
        f_pool in matrix(20..40, 4..5),
        queries in matrix(1..12, 4..5),
    ) {
        let n = c_pool.rows().min(f_pool.rows());
        let idx: Vec<usize> = (0..n).collect();
        let (c_pool, f_pool) = (c_pool.select_rows(&idx), f_pool.select_rows(&idx));
        prop_assume!(!has_zero_row(&c_pool) && !has_zero_row(&f_pool) && !has_zero_row(&queries));
        let (cp, fp) = (Pool::new(&c_pool).unwrap(), Pool::new(&f_pool).unwrap());
        let input = AgreementInput {
            classifier: Space { pool: &cp, queries: &queries },
            foundation: vec![("f".into(), Space { pool: &fp, queries: &queries })],
        };
        let ks = [1, 5, n];
        let seq = agreement_batch_multi(&input, &ks, AgreementMeasure::Ndcg, Parallelism::Sequential).unwrap();
        let par = agreement_batch_multi(&input, &ks, AgreementMeasure::Ndcg, Parallelism::Parallel).unwrap();
        prop_assert_eq!(seq, par);
    }
}
