//! Acceptance criteria, one line each. Run with `cargo test -p fairgen-cli --test acceptance`.
//!
//! The process fails when a criterion fails, except for those listed in
//! `KNOWN_FAILING`, whose lines still read FAIL.

use std::process::ExitCode;
use std::time::Instant;

use fairgen::dataset::{
    generate_synthetic, subgroup_stats, Dataset, DatasetSpec, ImageShape, PairSampler,
    SubgroupStats,
};
use fairgen::losses::{
    self, compute_margins, cross_entropy, cvar_inner, cvar_oracle, margin_loss, LossConfig,
    MarginTable, CVAR_LEVEL_GRID,
};
use fairgen::metrics::{self, metric_oracle, MetricId, MetricsReport, PredictionRecord};
use fairgen::model::{adain_fuse, HeadId, Model, ModelConfig, ADAIN_EPS};
use fairgen::numerics::{channel_moments, check_gradients, evaluate_with_gradients, sgd_step};
use fairgen::probe::{LinearProbe, ProbeConfig};
use fairgen::trainer::{predict, sharpness, train, Perturbation, TrainMode, TrainRunConfig};
use fairgen::{ParameterStore, Result, Tape, Tensor, Var};
use fairgen_cli::commands::{self, CHECKPOINT_FILE, HISTORY_FILE};
use fairgen_cli::config::RunConfigFile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that fail on this implementation; see the README.
const KNOWN_FAILING: &[u32] = &[9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut skipped, mut failures, mut worst, mut worst_abs) =
        (0, 0, 0, 0.0f64, 0.0f64);
    let configs = 100;
    for case in 0..configs as u64 {
        let mut spec = DatasetSpec {
            n_real: 8,
            n_fake: 8,
            image: ImageShape {
                channels: 2,
                height: 8,
                width: 8,
            },
            seed: case,
            ..DatasetSpec::default()
        };
        spec.subgroups.iter_mut().for_each(|g| g.weight = 0.5);
        let data = generate_synthetic(&spec).unwrap();
        let model = Model::new(ModelConfig {
            image: spec.image,
            feature_channels: 2,
            hidden_channels: 2,
            head_hidden: 3,
            num_domains: data.domains().len(),
            num_subgroups: data.subgroups().len(),
            adain_eps: ADAIN_EPS,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let mut params = model.init(case);
        for i in 0..params.len() {
            for v in params.value_at_mut(i).data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let cfg = LossConfig {
            margin: rng.random_range(0.5..3.0),
            alpha: CVAR_LEVEL_GRID[case as usize % 5],
            alpha_prime: CVAR_LEVEL_GRID[(case as usize / 5) % 5],
            ..LossConfig::default()
        };
        let margins = compute_margins(&subgroup_stats(&data), cfg.delta).unwrap();
        let batch = PairSampler::new(&data, 4, case).unwrap().epoch(0).remove(0);
        let parts = |t: &mut Tape, p: &ParameterStore| -> Result<(Var, Vec<Vec<Var>>)> {
            let enc = losses::encode_batch(t, &model, p, &data, &batch)?;
            let l_dis = losses::disentanglement(t, &model, p, &data, &enc, &margins, &cfg)?;
            let mut nodes = vec![Vec::new(); data.subgroups().len()];
            for img in &enc.images {
                let s = data.sample(img.index);
                let fused = model.fuse(t, img.features.f_g, img.features.d)?;
                let z = model.head(t, p, HeadId::Fused, fused)?;
                nodes[s.d].push(t.cross_entropy(z, s.y as usize)?);
            }
            Ok((l_dis, nodes))
        };
        let mut tape = Tape::new();
        let (_, nodes) = parts(&mut tape, &params).unwrap();
        let values: Vec<Vec<f64>> = nodes
            .iter()
            .map(|g| g.iter().map(|&v| tape.scalar(v)).collect())
            .collect();
        let solution = losses::fairness_loss(&values, cfg.alpha, cfg.alpha_prime).unwrap();
        let graph = |t: &mut Tape, p: &ParameterStore| {
            let (l_dis, nodes) = parts(t, p)?;
            let fair = losses::fairness_term(t, &nodes, &solution, cfg.alpha, cfg.alpha_prime)?;
            let fair = t.scale(fair, cfg.lambda)?;
            t.add(l_dis, fair)
        };
        let r = check_gradients(&graph, &params, 1e-6, 1e-4, 1e-6, Some(3)).unwrap();
        checked += r.checked;
        skipped += r.skipped;
        failures += r.failures.len();
        worst = worst.max(r.max_rel_err);
        worst_abs = worst_abs.max(r.max_abs_err);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 60.0,
        format!(
            "{configs} configurations, {checked} coordinates ({skipped} kink-adjacent skipped), {failures} over rel 1e-4/abs 1e-6, max abs err {worst_abs:.1e}, max rel err above abs tol {worst:.1e}, {secs:.1}s (< 60s)"
        ),
    )
}

fn cvar_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut worst_mean) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let m = rng.random_range(1..=200);
        let alpha = CVAR_LEVEL_GRID[case % 5];
        let losses: Vec<f64> = (0..m)
            .map(|_| {
                let v = rng.random_range(0.0..10.0);
                if case % 3 == 0 {
                    (v * 2.0f64).round() / 2.0
                } else {
                    v
                }
            })
            .collect();
        let fast = cvar_inner(&losses, alpha).unwrap().value;
        worst = worst.max((fast - cvar_oracle(&losses, alpha).unwrap()).abs());
        let mean = losses.iter().sum::<f64>() / m as f64;
        worst_mean = worst_mean.max((cvar_inner(&losses, 1.0).unwrap().value - mean).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && worst_mean <= 1e-12 && secs < 10.0,
        format!("1000 instances: max |solver - oracle| = {worst:.1e} (<= 1e-9), alpha=1 vs mean {worst_mean:.1e} (<= 1e-12), {secs:.2}s (< 10s)"),
    )
}

fn margin_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..6);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let p = rng.random_range(0..k);
        let m = margin_loss(&logits, p, &MarginTable::zeros(k)).unwrap();
        worst = worst.max((m - cross_entropy(&logits, p).unwrap()).abs());
    }
    let exact = [(16, 2.0, 1.0), (81, 3.0, 1.0), (1, 2.89, 2.89)]
        .into_iter()
        .all(|(n, delta, want)| {
            compute_margins(&SubgroupStats { counts: vec![n] }, delta)
                .unwrap()
                .values()
                == [want]
        });
    outcome(
        worst <= 1e-12 && exact,
        format!("100 logit vectors: max |margin - CE| = {worst:.1e} (<= 1e-12); margins (16,2)->1 (81,3)->1 (1,2.89)->2.89 exact: {exact}"),
    )
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<PredictionRecord> {
    let n = rng.random_range(2..100);
    let groups = rng.random_range(2..5);
    (0..n)
        .map(|_| {
            let score: f64 = rng.random();
            PredictionRecord {
                score,
                y_hat: u8::from(score >= 0.5),
                y: rng.random_range(0..2),
                d: rng.random_range(0..groups),
            }
        })
        .collect()
}

fn fast_metric(r: &[PredictionRecord], m: MetricId) -> Result<f64> {
    match m {
        MetricId::Fpr => metrics::f_fpr(r),
        MetricId::Meo => metrics::f_meo(r),
        MetricId::Dp => metrics::f_dp(r),
        MetricId::Oae => metrics::f_oae(r),
        MetricId::Auc => metrics::record_auc(r),
    }
}

fn metric_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut mismatched) = (0.0f64, 0);
    for _ in 0..500 {
        let r = random_records(&mut rng);
        for m in MetricId::ALL {
            match (fast_metric(&r, m), metric_oracle(&r, m)) {
                (Ok(a), Ok(b)) => worst = worst.max((a - b).abs()),
                (Err(_), Err(_)) => {}
                _ => mismatched += 1,
            }
        }
    }
    let rec = |y, y_hat, d| PredictionRecord {
        score: if y_hat == 1 { 0.8 } else { 0.2 },
        y_hat,
        y,
        d,
    };
    let fixture = [
        rec(0, 1, 0),
        rec(0, 0, 0),
        rec(1, 1, 0),
        rec(0, 0, 1),
        rec(1, 1, 1),
    ];
    let got = [
        metrics::f_fpr(&fixture).unwrap(),
        metrics::f_dp(&fixture).unwrap(),
        metrics::f_meo(&fixture).unwrap(),
        metrics::f_oae(&fixture).unwrap(),
    ];
    let want = [0.5, 1.0 / 6.0, 0.5, 1.0 / 3.0];
    let fixture_ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-15);
    outcome(
        worst <= 1e-12 && mismatched == 0 && fixture_ok,
        format!(
            "500 record sets: max |fast - oracle| = {worst:.1e} (<= 1e-12), {mismatched} error mismatches; fixture FPR/DP/MEO/OAE = {:.6}/{:.6}/{:.6}/{:.6} (1/2, 1/6, 1/2, 1/3)",
            got[0], got[1], got[2], got[3]
        ),
    )
}

fn adain_moments() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut worst_id, mut cases) = (0.0f64, 0.0f64, 0);
    while cases < 100 {
        let (c, hw) = (rng.random_range(1..9), rng.random_range(2..6));
        let t = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                vec![c, hw, hw],
                (0..c * hw * hw)
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect(),
            )
            .unwrap()
        };
        let (f_g, d) = (t(&mut rng), t(&mut rng));
        if channel_moments(&f_g)
            .unwrap()
            .iter()
            .any(|&(_, s)| s <= 1e-3)
        {
            continue;
        }
        cases += 1;
        let fused = adain_fuse(&f_g, &d, 0.0).unwrap();
        for ((mf, sf), (md, sd)) in channel_moments(&fused)
            .unwrap()
            .into_iter()
            .zip(channel_moments(&d).unwrap())
        {
            worst = worst.max((mf - md).abs()).max((sf - sd).abs());
        }
        let same = adain_fuse(&f_g, &f_g, 0.0).unwrap();
        worst_id = same
            .data()
            .iter()
            .zip(f_g.data())
            .fold(worst_id, |w, (a, b)| w.max((a - b).abs()));
    }
    outcome(
        worst <= 1e-9 && worst_id <= 1e-9,
        format!(
            "100 maps: max moment error {worst:.1e} (<= 1e-9), max |adain(f,f) - f| {worst_id:.1e}"
        ),
    )
}

fn small_run(seed: u64) -> (Dataset, TrainRunConfig) {
    let mut spec = DatasetSpec {
        n_real: 16,
        n_fake: 16,
        image: ImageShape {
            channels: 3,
            height: 8,
            width: 8,
        },
        seed,
        ..DatasetSpec::default()
    };
    spec.subgroups[1].artifact_bias = 0.5;
    let data = generate_synthetic(&spec).unwrap();
    let cfg = TrainRunConfig {
        model: ModelConfig {
            image: spec.image,
            feature_channels: 3,
            hidden_channels: 3,
            head_hidden: 6,
            num_domains: data.domains().len(),
            num_subgroups: data.subgroups().len(),
            ..ModelConfig::default()
        },
        batch_size: 8,
        epochs: 25,
        seed,
        perturbation: Perturbation::Sign,
        ..TrainRunConfig::default()
    };
    (data, cfg)
}

fn sam_ascent_and_reduction() -> Outcome {
    let (data, cfg) = small_run(6);
    let (_, history) = train(&data, &cfg).unwrap();
    let negative = history.rows.iter().filter(|r| r.ascent < 0.0).count();
    let steps = history.len();

    let mut cfg = TrainRunConfig { epochs: 2, ..cfg };
    cfg.loss.gamma = 0.0;
    cfg.loss.lambda = 0.0;
    let (trained, _) = train(&data, &cfg).unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let margins = compute_margins(&subgroup_stats(&data), cfg.loss.delta).unwrap();
    let sampler = PairSampler::new(&data, cfg.batch_size, cfg.seed).unwrap();
    let mut p = model.init(cfg.seed);
    for epoch in 0..cfg.epochs {
        for batch in sampler.epoch(epoch) {
            let graph = |t: &mut Tape, s: &ParameterStore| {
                let enc = losses::encode_batch(t, &model, s, &data, &batch)?;
                losses::disentanglement(t, &model, s, &data, &enc, &margins, &cfg.loss)
            };
            let (_, g) = evaluate_with_gradients(&graph, &p).unwrap();
            sgd_step(&mut p, &g, cfg.loss.lr).unwrap();
        }
    }
    let bitwise = trained.values().iter().zip(p.values()).all(|(a, b)| {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    outcome(
        steps == 200 && negative == 0 && bitwise,
        format!("{steps}-step sign-SAM run: {negative} steps with eps*.grad < 0; gamma=0, lambda=0 run bitwise equal to SGD on L_dis: {bitwise}"),
    )
}

/// Settings shared by criteria 7 to 9.
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TRAIN: usize = 2000;
const TEST: usize = 500;
const EPOCHS: u64 = 10;

struct SeedResult {
    gap_base: f64,
    gap_full: f64,
    auc_base: f64,
    auc_full: f64,
    sharp_sam: f64,
    sharp_flat: f64,
    probe_d: f64,
    probe_fg: f64,
}

fn fpr_gap(r: &MetricsReport) -> f64 {
    let f: Vec<f64> = r.subgroups.iter().filter_map(|s| s.fpr).collect();
    f.iter().cloned().fold(f64::MIN, f64::max) - f.iter().cloned().fold(f64::MAX, f64::min)
}

fn features(
    model: &Model,
    p: &ParameterStore,
    d: &Dataset,
    demographic: bool,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    d.samples()
        .iter()
        .map(|s| {
            let f = model.encode_values(p, &s.x).unwrap();
            (if demographic { f.d } else { f.f_g }.data().to_vec(), s.d)
        })
        .unzip()
}

fn probe_accuracy(
    model: &Model,
    p: &ParameterStore,
    train: &Dataset,
    test: &Dataset,
    demographic: bool,
) -> f64 {
    let (xs, ys) = features(model, p, train, demographic);
    let (xt, yt) = features(model, p, test, demographic);
    let probe =
        LinearProbe::fit(&xs, &ys, train.subgroups().len(), &ProbeConfig::default()).unwrap();
    100.0 * probe.balanced_accuracy(&xt, &yt).unwrap()
}

/// Generated dataset with subgroup weights (0.8, 0.2) where the minority's
/// real images carry part of the shared forgery artifact.
fn biased_split(seed: u64) -> (Dataset, Dataset) {
    let mut spec = DatasetSpec {
        n_real: (TRAIN + TEST) / 2,
        n_fake: (TRAIN + TEST) / 2,
        seed,
        ..DatasetSpec::default()
    };
    spec.subgroups[1].artifact_bias = 0.5;
    let all = generate_synthetic(&spec).unwrap();
    let train: Vec<usize> = (0..TRAIN).collect();
    let test: Vec<usize> = (TRAIN..TRAIN + TEST).collect();
    (all.select(&train), all.select(&test))
}

fn synthetic_seed(seed: u64) -> SeedResult {
    let (tr, te) = biased_split(seed);
    let idx: Vec<usize> = (0..te.len()).collect();
    let run = |mode: TrainMode, gamma: f64| {
        let mut cfg = TrainRunConfig {
            epochs: EPOCHS,
            seed,
            mode,
            perturbation: Perturbation::L2,
            ..TrainRunConfig::default()
        };
        cfg.loss.lr = if mode == TrainMode::Baseline {
            0.002
        } else {
            0.001
        };
        cfg.loss.gamma = gamma;
        let (p, _) = train(&tr, &cfg).unwrap();
        let model = Model::new(cfg.model.clone()).unwrap();
        let report = MetricsReport::compute(&predict(&model, &p, &te, mode, 0.5).unwrap()).unwrap();
        let sharp = sharpness(&model, &p, &te, &idx, mode, 0.05, 64, 99).unwrap();
        (model, p, report, sharp)
    };
    let (_, _, base, _) = run(TrainMode::Baseline, 0.0);
    let (model, p, full, sharp_sam) = run(TrainMode::Full, 0.05);
    let (_, _, _, sharp_flat) = run(TrainMode::Full, 0.0);
    SeedResult {
        gap_base: fpr_gap(&base),
        gap_full: fpr_gap(&full),
        auc_base: base.auc,
        auc_full: full.auc,
        sharp_sam,
        sharp_flat,
        probe_d: probe_accuracy(&model, &p, &tr, &te, true),
        probe_fg: probe_accuracy(&model, &p, &tr, &te, false),
    }
}

fn fairness_effect(r: &[SeedResult], secs: f64) -> Outcome {
    let reduction = median(
        r.iter()
            .map(|s| {
                if s.gap_base > 0.0 {
                    1.0 - s.gap_full / s.gap_base
                } else {
                    0.0
                }
            })
            .collect(),
    );
    let auc_drop = median(r.iter().map(|s| s.auc_base - s.auc_full).collect());
    let per_run = secs / (3 * r.len()) as f64;
    outcome(
        reduction >= 0.30 && auc_drop <= 5.0 && per_run <= 600.0,
        format!(
            "median FPR-gap reduction {:.1}% (>= 30%), gaps baseline {:.2} vs full {:.2}; median AUC drop {auc_drop:.2} points (<= 5); {per_run:.0}s per run",
            100.0 * reduction,
            median(r.iter().map(|s| s.gap_base).collect()),
            median(r.iter().map(|s| s.gap_full).collect()),
        ),
    )
}

fn flatness(r: &[SeedResult]) -> Outcome {
    let sam = median(r.iter().map(|s| s.sharp_sam).collect());
    let flat = median(r.iter().map(|s| s.sharp_flat).collect());
    outcome(
        sam < flat,
        format!(
            "median sharpness over 64 directions at radius 0.05: SAM {sam:.5} vs gamma=0 {flat:.5}"
        ),
    )
}

fn disentanglement(r: &[SeedResult]) -> Outcome {
    let chance = 50.0;
    let d = median(r.iter().map(|s| s.probe_d).collect());
    let fg = median(r.iter().map(|s| s.probe_fg).collect());
    outcome(
        d >= chance + 20.0 && (fg - chance).abs() <= 10.0,
        format!("median balanced accuracy of subgroup probe: d {d:.1} (>= {:.0}), f_g {fg:.1} (within 10 of {chance:.0})", chance + 20.0),
    )
}

const DETERMINISM_CONFIG: &str = r#"
[dataset]
n_real = 24
n_fake = 24
height = 8
width = 8
seed = 5

[model]
feature_channels = 4
hidden_channels = 4
head_hidden = 8

[train]
batch_size = 8
epochs = 2
seed = 13
"#;

fn determinism() -> Outcome {
    let cfg = RunConfigFile::parse(DETERMINISM_CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        commands::cmd_train(&cfg, out, None, &mut std::io::sink()).unwrap();
    }
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let (h, c) = (same(HISTORY_FILE), same(CHECKPOINT_FILE));
    outcome(
        h && c,
        format!("two seeded cmd_train runs: history identical {h}, checkpoint identical {c}"),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!(
            "criterion {id:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "CVaR solver exactness", cvar_exactness());
    report(3, "margin-loss reduction", margin_reduction());
    report(4, "metric exactness", metric_exactness());
    report(5, "AdaIN moment matching", adain_moments());
    report(6, "SAM ascent and reduction", sam_ascent_and_reduction());
    let start = Instant::now();
    let seeds: Vec<SeedResult> = SEEDS.iter().map(|&s| synthetic_seed(s)).collect();
    let secs = start.elapsed().as_secs_f64();
    report(
        7,
        "directional fairness effect",
        fairness_effect(&seeds, secs),
    );
    report(8, "directional flatness", flatness(&seeds));
    report(9, "disentanglement signal", disentanglement(&seeds));
    report(10, "determinism", determinism());

    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(id, _, o)| !o.pass && !KNOWN_FAILING.contains(id))
        .map(|(id, _, _)| *id)
        .collect();
    let passed = results.iter().filter(|(_, _, o)| o.pass).count();
    println!("{passed}/{} criteria pass", results.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
