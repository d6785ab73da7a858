use muse_core::coreset::{select_class_balanced, select_top_k};
use muse_core::cost::{overhead, Method, WorkloadParams};
use muse_core::eval::{run_lds_with, AttributionMatrix, EvalError, LdsConfig, OutcomeOracle};
use muse_core::ltc::LtcScores;
use muse_core::stats::{pearson, rank_average_ties, spearman};
use muse_core::trajectory::Dtype;
use muse_core::{compute_deltas, ltc_avg, ltc_matrix, ltc_pair, ltcm, read_dataset, write_dataset};
use muse_core::{DeltaMatrix, TrajectoryDataset};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -1e3f64..1e3
}

fn vec_pair(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| {
        (
            prop::collection::vec(finite(), n),
            prop::collection::vec(finite(), n),
        )
    })
}

fn dataset() -> impl Strategy<Value = TrajectoryDataset> {
    (1usize..12, 2usize..6, 1u32..5, any::<bool>()).prop_flat_map(|(n, s, c, wide)| {
        (
            prop::collection::hash_set(any::<u64>(), n),
            prop::collection::vec(0..c, n),
            prop::collection::vec(0.0f64..20.0, n * s),
            "[a-z]{0,8}",
        )
            .prop_map(move |(ids, labels, losses, tag)| {
                let dtype = if wide { Dtype::F64 } else { Dtype::F32 };
                TrajectoryDataset::new(tag, dtype, c, ids.into_iter().collect(), labels, s, losses).unwrap()
            })
    })
}

fn deltas(n: usize, t: usize, offset: u64) -> impl Strategy<Value = DeltaMatrix> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, t), n).prop_map(move |rows| {
        DeltaMatrix::from_rows((0..rows.len() as u64).map(|i| i + offset).collect(), &rows).unwrap()
    })
}

fn scores(values: Vec<f64>) -> LtcScores {
    LtcScores {
        train_ids: (0..values.len() as u64).collect(),
        scores: values,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn trajectory_round_trip(d in dataset()) {
        let mut buf = Vec::new();
        let written = write_dataset(&d, &mut buf).unwrap();
        prop_assert_eq!(written, buf.len());
        prop_assert_eq!(written, d.encoded_len());
        prop_assert_eq!(read_dataset(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn pearson_symmetric_bounded((x, y) in vec_pair(2..30)) {
        let a = pearson(&x, &y).unwrap();
        let b = pearson(&y, &x).unwrap();
        prop_assert_eq!(a.degenerate, b.degenerate);
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a.value));
    }

    #[test]
    fn pearson_affine_invariance((x, y) in vec_pair(3..30), scale in 0.1f64..10.0, shift in finite()) {
        let r = pearson(&x, &y).unwrap();
        prop_assume!(!r.degenerate);
        let moved: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let s = pearson(&moved, &y).unwrap();
        prop_assert!((r.value - s.value).abs() < 1e-9);
        let flipped: Vec<f64> = x.iter().map(|v| -scale * v + shift).collect();
        prop_assert!((pearson(&flipped, &y).unwrap().value + r.value).abs() < 1e-9);
    }

    #[test]
    fn spearman_monotone_invariance((x, y) in vec_pair(3..30)) {
        let r = spearman(&x, &y).unwrap();
        let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let s = spearman(&cubed, &y).unwrap();
        prop_assert_eq!(r.degenerate, s.degenerate);
        prop_assert!((r.value - s.value).abs() < 1e-12);
    }

    #[test]
    fn ranks_sum_to_triangle(x in prop::collection::vec(-3i32..3, 1..40)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let n = x.len() as f64;
        let ranks = rank_average_ties(&x).unwrap();
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn matrix_matches_pairs(
        (train, query) in (1usize..6, 1usize..4, 2usize..8)
            .prop_flat_map(|(n, q, t)| (deltas(n, t, 0), deltas(q, t, 100))),
        workers in 1usize..4,
    ) {
        let m = ltc_matrix(&train, &query, workers).unwrap();
        for q in 0..query.n_samples() {
            for i in 0..train.n_samples() {
                let r = ltc_pair(train.row(i), query.row(q)).unwrap();
                prop_assert_eq!(m.is_degenerate(q, i), r.degenerate);
                prop_assert!((m.value(q, i) - r.value).abs() <= 1e-10);
            }
        }
        prop_assert_eq!(&m, &ltc_matrix(&train, &query, 1).unwrap());
        let avg = ltc_avg(&m).unwrap();
        prop_assert!(avg.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn ltcm_round_trip_within_f32(
        (train, query) in (1usize..6, 1usize..4, 2usize..6)
            .prop_flat_map(|(n, q, t)| (deltas(n, t, 0), deltas(q, t, 50))),
    ) {
        let m = ltc_matrix(&train, &query, 1).unwrap();
        let back = ltcm::read_matrix(ltcm::encode(&m).as_slice()).unwrap();
        prop_assert_eq!(back.train_ids(), m.train_ids());
        prop_assert_eq!(back.query_ids(), m.query_ids());
        prop_assert_eq!(back.degenerate_mask(), m.degenerate_mask());
        for (a, b) in back.values().iter().zip(m.values()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn deltas_telescope(d in dataset()) {
        let deltas = compute_deltas(&d);
        let t = d.n_snapshots();
        prop_assert_eq!(deltas.n_deltas(), t.saturating_sub(1));
        for m in 0..d.n_samples() {
            let total: f64 = deltas.row(m).iter().sum();
            let expected = d.loss(m, t - 1) - d.loss(m, 0);
            prop_assert!((total - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_invariant_under_monotone_transform(
        values in prop::collection::vec(-1.0f64..1.0, 1..40),
        k_frac in 0.0f64..1.0,
    ) {
        let k = ((values.len() as f64 * k_frac) as usize).max(1);
        let a = select_top_k(&scores(values.clone()), None, k).unwrap();
        let moved: Vec<f64> = values.iter().map(|v| v.exp() * 3.0 - 7.0).collect();
        let b = select_top_k(&scores(moved), None, k).unwrap();
        prop_assert_eq!(a.selected_ids(), b.selected_ids());
    }

    #[test]
    fn top_k_sets_are_nested(values in prop::collection::vec(-1.0f64..1.0, 2..40)) {
        let s = scores(values);
        let mut prev: Vec<u64> = Vec::new();
        for k in 1..=s.len() {
            let ids = select_top_k(&s, None, k).unwrap().selected_ids();
            prop_assert_eq!(ids.len(), k);
            prop_assert!(prev.iter().all(|id| ids.contains(id)));
            prev = ids;
        }
    }

    #[test]
    fn class_balanced_meets_quota(
        (c, per, values) in (1u32..5, 1usize..10)
            .prop_flat_map(|(c, per)| (Just(c), Just(per), prop::collection::vec(-1.0f64..1.0, c as usize * per))),
        quota_frac in 0.0f64..1.0,
    ) {
        let quota = ((per as f64 * quota_frac) as usize).max(1);
        let labels: Vec<u32> = (0..values.len()).map(|i| (i % c as usize) as u32).collect();
        let k = quota * c as usize;
        let m = select_class_balanced(&scores(values), &labels, k, c).unwrap();
        prop_assert_eq!(m.selected.len(), k);
        prop_assert!(m.warnings.is_empty());
        for class in 0..c {
            prop_assert_eq!(m.per_class_count.get(&class).copied().unwrap_or(0), quota);
        }
    }

    #[test]
    fn cost_scaling(n in 1e3f64..1e8, t in 1.0f64..500.0, q in 1.0f64..1e5, f in 1e6f64..1e10) {
        let mut p = WorkloadParams::imagenet_resnet18();
        p.n = Some(n);
        p.t = Some(t);
        p.q = Some(q);
        p.f = Some(f);
        p.alpha = Some(0.5);
        p.p_prime = Some(2048.0);
        let (grand, _) = overhead(Method::GraNd, &p).unwrap();
        let (slocurv, _) = overhead(Method::Slocurv, &p).unwrap();
        prop_assert!((grand / slocurv - t).abs() <= 1e-9 * t);

        let (ltc_c, ltc_s) = overhead(Method::Ltc, &p).unwrap();
        let mut other = p.clone();
        other.n = Some(n * 2.0);
        prop_assert_eq!(overhead(Method::Ltc, &other).unwrap().0, ltc_c);
        other = p.clone();
        other.q = Some(q * 2.0);
        prop_assert_eq!(overhead(Method::Ltc, &other).unwrap().1, ltc_s);

        for method in Method::CORESET.iter().chain(Method::TDA.iter()) {
            let (c0, s0) = overhead(*method, &p).unwrap();
            let mut bigger = p.clone();
            bigger.n = Some(n * 1.5);
            bigger.t = Some(t * 1.5);
            let (c1, s1) = overhead(*method, &bigger).unwrap();
            prop_assert!(c1 >= c0 && s1 >= s0, "{} not monotone", method);
        }
    }

    #[test]
    fn lds_invariant_under_positive_affine_attribution(
        row in prop::collection::vec(-1.0f64..1.0, 6..20),
        scale in 0.1f64..5.0,
        shift in -2.0f64..2.0,
    ) {
        let n = row.len();
        let oracle = SumOracle(row.iter().map(|v| v * v - v).collect());
        let config = LdsConfig {
            n_subsets: 12,
            sampling_ratio: 0.5,
            retrains_per_subset: 1,
            seed: 3,
            measurable: Default::default(),
            workers: 1,
        };
        let a = AttributionMatrix::new(vec![0], (0..n as u64).collect(), row.clone()).unwrap();
        let moved = row.iter().map(|v| scale * v + shift).collect();
        let b = AttributionMatrix::new(vec![0], (0..n as u64).collect(), moved).unwrap();
        let ra = run_lds_with(&oracle, &a, &config).unwrap();
        let rb = run_lds_with(&oracle, &b, &config).unwrap();
        prop_assert_eq!(&ra.subsets, &rb.subsets);
        prop_assert_eq!(ra.per_query[0].degenerate, rb.per_query[0].degenerate);
        prop_assert!((ra.per_query[0].value - rb.per_query[0].value).abs() < 1e-9);
    }
}

/// Outcome of the single query is a fixed additive function of the subset.
struct SumOracle(Vec<f64>);

impl OutcomeOracle for SumOracle {
    fn outcomes(&self, subset: &[usize], _seed: u64) -> Result<Vec<f64>, EvalError> {
        Ok(vec![subset.iter().map(|&i| self.0[i]).sum()])
    }
}

#[test]
fn subset_inclusion_is_uniform() {
    let (n, size, count) = (20, 5, 4000);
    let mut hits = vec![0usize; n];
    for s in muse_core::eval::sample_subsets(n, size, count, 11) {
        assert_eq!(s.len(), size);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for i in s {
            hits[i] += 1;
        }
    }
    let expected = (count * size) as f64 / n as f64;
    // binomial sd is about 27 here
    for h in hits {
        assert!((h as f64 - expected).abs() < 5.0 * 27.4, "{h} vs {expected}");
    }
}
