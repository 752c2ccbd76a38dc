use fairgen::losses::{
    self, cross_entropy, cvar_inner, cvar_oracle, margin_loss, MarginTable, CVAR_LEVEL_GRID,
};
use fairgen::metrics::{self, metric_oracle, MetricId, PredictionRecord};
use fairgen::model::adain_fuse;
use fairgen::numerics::channel_moments;
use fairgen::Tensor;
use proptest::prelude::*;

fn objective(losses: &[f64], eta: f64, alpha: f64) -> f64 {
    let m = losses.len() as f64;
    eta + losses.iter().map(|&l| (l - eta).max(0.0)).sum::<f64>() / (alpha * m)
}

fn level() -> impl Strategy<Value = f64> {
    prop::sample::select(CVAR_LEVEL_GRID.to_vec())
}

fn loss_list() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..10.0f64, 1..200)
}

proptest! {
    #[test]
    fn cvar_matches_oracle(losses in loss_list(), alpha in level()) {
        let fast = cvar_inner(&losses, alpha).unwrap();
        let oracle = cvar_oracle(&losses, alpha).unwrap();
        prop_assert!((fast.value - oracle).abs() <= 1e-9, "{} vs {oracle}", fast.value);
    }

    #[test]
    fn cvar_with_ties_matches_oracle(
        losses in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 2.0]), 1..60),
        alpha in level(),
    ) {
        let fast = cvar_inner(&losses, alpha).unwrap();
        prop_assert!((fast.value - cvar_oracle(&losses, alpha).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn cvar_at_full_level_is_the_mean(losses in loss_list()) {
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        prop_assert!((cvar_inner(&losses, 1.0).unwrap().value - mean).abs() <= 1e-12);
    }

    #[test]
    fn cvar_grows_as_level_shrinks(losses in loss_list()) {
        let values: Vec<f64> = CVAR_LEVEL_GRID.iter().map(|&a| cvar_inner(&losses, a).unwrap().value).collect();
        for w in values.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12, "{values:?}");
        }
        let max = losses.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(values[0] <= max + 1e-12);
    }

    #[test]
    fn threshold_is_locally_optimal(losses in loss_list(), alpha in level()) {
        let s = cvar_inner(&losses, alpha).unwrap();
        let at = objective(&losses, s.eta, alpha);
        prop_assert!((at - s.value).abs() <= 1e-9);
        for eta in [s.eta - 1e-6, s.eta + 1e-6] {
            prop_assert!(objective(&losses, eta, alpha) >= at - 1e-12);
        }
    }

    #[test]
    fn outer_level_one_is_mean_of_inner(
        groups in prop::collection::vec(prop::collection::vec(0.0..5.0f64, 1..20), 1..5),
        alpha_prime in level(),
    ) {
        let s = losses::fairness_loss(&groups, 1.0, alpha_prime).unwrap();
        let inner: Vec<f64> = groups.iter().map(|g| cvar_inner(g, alpha_prime).unwrap().value).collect();
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        prop_assert!((s.value - mean).abs() <= 1e-12);
    }

    #[test]
    fn zero_margins_are_cross_entropy(
        logits in prop::collection::vec(-20.0..20.0f64, 2..6),
        pick in 0usize..6,
    ) {
        let p = pick % logits.len();
        let table = MarginTable::zeros(logits.len());
        let m = margin_loss(&logits, p, &table).unwrap();
        prop_assert!((m - cross_entropy(&logits, p).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn positive_margin_raises_the_loss(
        logits in prop::collection::vec(-5.0..5.0f64, 2..6),
        margin in 0.01..3.0f64,
    ) {
        let table = MarginTable::from_values(vec![margin; logits.len()]);
        prop_assert!(margin_loss(&logits, 0, &table).unwrap() > cross_entropy(&logits, 0).unwrap());
    }
}

fn record() -> impl Strategy<Value = PredictionRecord> {
    (0.0..1.0f64, 0u8..2, 0usize..4).prop_map(|(score, y, d)| PredictionRecord {
        score,
        y_hat: u8::from(score >= 0.5),
        y,
        d,
    })
}

fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec(record(), 2..60)
}

fn fast(records: &[PredictionRecord], id: MetricId) -> fairgen::Result<f64> {
    match id {
        MetricId::Fpr => metrics::f_fpr(records),
        MetricId::Meo => metrics::f_meo(records),
        MetricId::Dp => metrics::f_dp(records),
        MetricId::Oae => metrics::f_oae(records),
        MetricId::Auc => metrics::record_auc(records),
    }
}

fn all_metrics(records: &[PredictionRecord]) -> Vec<Option<f64>> {
    MetricId::ALL
        .iter()
        .map(|&m| fast(records, m).ok())
        .collect()
}

fn same(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_match_oracle(r in records()) {
        for m in MetricId::ALL {
            match (fast(&r, m), metric_oracle(&r, m)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-12, "{m:?}: {a} vs {b}"),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{m:?}: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn metrics_ignore_record_order(r in records(), seed in any::<u64>()) {
        let mut shuffled = r.clone();
        let n = shuffled.len();
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.swap(i, (state % (i as u64 + 1)) as usize);
        }
        prop_assert!(same(&all_metrics(&r), &all_metrics(&shuffled)));
    }

    #[test]
    fn metrics_ignore_subgroup_names(r in records(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let relabeled: Vec<PredictionRecord> = r.iter().map(|x| PredictionRecord { d: perm[x.d] + 7, ..*x }).collect();
        prop_assert!(same(&all_metrics(&r), &all_metrics(&relabeled)));
    }

    #[test]
    fn metrics_ignore_duplication(r in records()) {
        let doubled: Vec<PredictionRecord> = r.iter().chain(r.iter()).copied().collect();
        prop_assert!(same(&all_metrics(&r), &all_metrics(&doubled)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn identical_subgroups_have_no_disparity(base in prop::collection::vec(record(), 2..30), groups in 2usize..5) {
        prop_assume!(base.iter().any(|r| r.y == 0));
        let r: Vec<PredictionRecord> =
            (0..groups).flat_map(|g| base.iter().map(move |x| PredictionRecord { d: g, ..*x })).collect();
        for m in [MetricId::Fpr, MetricId::Meo, MetricId::Dp, MetricId::Oae] {
            prop_assert!(fast(&r, m).unwrap().abs() <= 1e-12, "{m:?}");
        }
    }
}

fn feature_map() -> impl Strategy<Value = Tensor> {
    (1usize..4, 2usize..5).prop_flat_map(|(c, hw)| {
        prop::collection::vec(-3.0..3.0f64, c * hw * hw)
            .prop_map(move |v| Tensor::new(vec![c, hw, hw], v).unwrap())
    })
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    feature_map().prop_flat_map(|f| {
        let n = f.len();
        let shape = f.shape().to_vec();
        (
            Just(f),
            prop::collection::vec(-3.0..3.0f64, n)
                .prop_map(move |v| Tensor::new(shape.clone(), v).unwrap()),
        )
    })
}

proptest! {
    #[test]
    fn adain_takes_style_moments((f_g, d) in pair()) {
        let a = channel_moments(&f_g).unwrap();
        prop_assume!(a.iter().all(|&(_, s)| s > 1e-3));
        let fused = adain_fuse(&f_g, &d, 0.0).unwrap();
        for ((mf, sf), (md, sd)) in channel_moments(&fused).unwrap().into_iter().zip(channel_moments(&d).unwrap()) {
            prop_assert!((mf - md).abs() <= 1e-9 && (sf - sd).abs() <= 1e-9);
        }
    }

    #[test]
    fn adain_of_itself_is_identity(f in feature_map()) {
        prop_assume!(channel_moments(&f).unwrap().iter().all(|&(_, s)| s > 1e-3));
        let out = adain_fuse(&f, &f, 0.0).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn adain_ignores_content_scale((f_g, d) in pair(), scale in 0.1..10.0f64) {
        prop_assume!(channel_moments(&f_g).unwrap().iter().all(|&(_, s)| s > 1e-3));
        let mut scaled = f_g.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= scale);
        let a = adain_fuse(&f_g, &d, 0.0).unwrap();
        let b = adain_fuse(&scaled, &d, 0.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}
