use fairgen::dataset::{
    generate_synthetic, subgroup_stats, Dataset, DatasetSpec, ImageShape, PairSampler,
};
use fairgen::losses::{self, compute_margins, cross_entropy, LossConfig};
use fairgen::model::{adain_fuse, HeadId, Model, ModelConfig};
use fairgen::numerics::{evaluate_with_gradients, sgd_step};
use fairgen::trainer::{
    eval_loss, filter_normalized_direction, loss_landscape_slice, train, NoClock, Perturbation,
    StepContext, TrainMode, TrainRunConfig, Trainer,
};
use fairgen::{GradientMap, ParameterStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(n: usize, seed: u64) -> Dataset {
    let mut spec = DatasetSpec {
        n_real: n / 2,
        n_fake: n - n / 2,
        image: ImageShape {
            channels: 3,
            height: 8,
            width: 8,
        },
        seed,
        ..DatasetSpec::default()
    };
    spec.subgroups[1].artifact_bias = 0.5;
    generate_synthetic(&spec).unwrap()
}

fn config(d: &Dataset) -> TrainRunConfig {
    TrainRunConfig {
        model: ModelConfig {
            image: d.image(),
            feature_channels: 3,
            hidden_channels: 3,
            head_hidden: 6,
            num_domains: d.domains().len(),
            num_subgroups: d.subgroups().len(),
            ..ModelConfig::default()
        },
        batch_size: 8,
        epochs: 2,
        seed: 9,
        ..TrainRunConfig::default()
    }
}

fn bits(p: &ParameterStore) -> Vec<u64> {
    p.values()
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn no_perturbation_no_fairness_is_plain_sgd_on_l_dis() {
    let d = data(24, 1);
    let mut cfg = config(&d);
    cfg.loss.gamma = 0.0;
    cfg.loss.lambda = 0.0;
    let (trained, history) = train(&d, &cfg).unwrap();

    let model = Model::new(cfg.model.clone()).unwrap();
    let margins = compute_margins(&subgroup_stats(&d), cfg.loss.delta).unwrap();
    let sampler = PairSampler::new(&d, cfg.batch_size, cfg.seed).unwrap();
    let mut p = model.init(cfg.seed);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        for batch in sampler.epoch(epoch) {
            let graph = |t: &mut Tape, s: &ParameterStore| {
                let enc = losses::encode_batch(t, &model, s, &d, &batch)?;
                losses::disentanglement(t, &model, s, &d, &enc, &margins, &cfg.loss)
            };
            let (loss, g) = evaluate_with_gradients(&graph, &p).unwrap();
            assert_eq!(loss.to_bits(), history.rows[steps].l_dis.to_bits());
            sgd_step(&mut p, &g, cfg.loss.lr).unwrap();
            steps += 1;
        }
    }
    assert_eq!(steps, history.len());
    assert_eq!(bits(&trained), bits(&p));
}

#[test]
fn all_weights_zero_reduces_to_baseline() {
    let d = data(24, 2);
    let mut full = config(&d);
    full.loss = LossConfig {
        rho1: 0.0,
        rho2: 0.0,
        rho3: 0.0,
        rho4: 0.0,
        lambda: 0.0,
        gamma: 0.0,
        ..full.loss
    };
    let baseline = TrainRunConfig {
        mode: TrainMode::Baseline,
        ..full.clone()
    };

    let mut a = Trainer::new(&d, full).unwrap();
    let mut b = Trainer::new(&d, baseline).unwrap();
    while let Some(row) = a.step(&mut NoClock).unwrap() {
        let (l, it) = (row.l_dis, row.iteration);
        let other = b.step(&mut NoClock).unwrap().expect("same length");
        assert_eq!(l.to_bits(), other.l_dis.to_bits(), "iteration {it}");
        assert_eq!(bits(a.params()), bits(b.params()), "iteration {it}");
    }
    assert!(b.is_finished());
}

#[test]
fn seeded_runs_are_identical() {
    let d = data(24, 3);
    let cfg = config(&d);
    let (p1, h1) = train(&d, &cfg).unwrap();
    let (p2, h2) = train(&d, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(bits(&p1), bits(&p2));
    for row in &h1.rows {
        assert!((row.total - (row.l_dis + cfg.loss.lambda * row.l_fair)).abs() <= 1e-9);
    }
}

fn cvar_objective(losses: &[f64], eta: f64, alpha: f64) -> f64 {
    eta + losses.iter().map(|&l| (l - eta).max(0.0)).sum::<f64>() / (alpha * losses.len() as f64)
}

/// Per-subgroup fused-head CE of the distinct images of `pairs`, recomputed
/// outside the tape.
fn fused_losses(
    model: &Model,
    p: &ParameterStore,
    d: &Dataset,
    pairs: &[(usize, usize)],
) -> Vec<Vec<f64>> {
    let mut seen = Vec::new();
    let mut out = vec![Vec::new(); d.subgroups().len()];
    for &(a, b) in pairs {
        for i in [a, b] {
            if seen.contains(&i) {
                continue;
            }
            seen.push(i);
            let s = d.sample(i);
            let f = model.encode_values(p, &s.x).unwrap();
            let fused = adain_fuse(&f.f_g, &f.d, model.config().adain_eps).unwrap();
            let z = model.head_forward(p, HeadId::Fused, &fused).unwrap();
            out[s.d].push(cross_entropy(&z, s.y as usize).unwrap());
        }
    }
    out
}

#[test]
fn logged_thresholds_are_locally_optimal() {
    let d = data(32, 4);
    let cfg = config(&d);
    let (alpha, alpha_prime) = (cfg.loss.alpha, cfg.loss.alpha_prime);
    let mut t = Trainer::new(&d, cfg.clone()).unwrap();
    let sampler = PairSampler::new(&d, cfg.batch_size, cfg.seed).unwrap();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        for batch in sampler.epoch(epoch) {
            let before = t.params().clone();
            let row = t.step(&mut NoClock).unwrap().unwrap().clone();
            let groups = fused_losses(t.model(), &before, &d, &batch.pairs);
            let mut inner = Vec::new();
            for (losses, eta) in groups.iter().zip(&row.eta_j) {
                let Some(eta) = *eta else {
                    assert!(losses.is_empty());
                    continue;
                };
                let at = cvar_objective(losses, eta, alpha_prime);
                for e in [eta - 1e-6, eta + 1e-6] {
                    assert!(
                        cvar_objective(losses, e, alpha_prime) >= at - 1e-12,
                        "step {steps}"
                    );
                }
                inner.push(at);
            }
            let eta = row.eta.unwrap();
            let at = cvar_objective(&inner, eta, alpha);
            for e in [eta - 1e-6, eta + 1e-6] {
                assert!(
                    cvar_objective(&inner, e, alpha) >= at - 1e-12,
                    "step {steps}"
                );
            }
            assert!(
                (at - row.l_fair).abs() <= 1e-9,
                "step {steps}: {at} vs {}",
                row.l_fair
            );
            steps += 1;
        }
    }
    assert_eq!(steps, 16);
}

#[test]
fn sign_step_is_an_ascent_direction() {
    let d = data(32, 5);
    let cfg = TrainRunConfig {
        epochs: 25,
        perturbation: Perturbation::Sign,
        ..config(&d)
    };
    let (_, h) = train(&d, &cfg).unwrap();
    assert_eq!(h.len(), 200);
    assert!(h.rows.iter().all(|r| r.ascent >= 0.0));
}

#[test]
fn repeated_batch_decreases_total_loss() {
    let d = data(16, 6);
    let cfg = TrainRunConfig {
        batch_size: 16,
        ..config(&d)
    };
    let model = Model::new(cfg.model.clone()).unwrap();
    let margins = compute_margins(&subgroup_stats(&d), cfg.loss.delta).unwrap();
    let ctx = StepContext {
        model: &model,
        dataset: &d,
        margins: &margins,
        config: &cfg,
    };
    let batch = PairSampler::new(&d, 16, cfg.seed)
        .unwrap()
        .epoch(0)
        .remove(0);
    assert_eq!(batch.pairs.len(), 8);
    let mut p = model.init(cfg.seed);
    let rows: Vec<f64> = (0..50)
        .map(|i| ctx.training_step(&mut p, &batch, i).unwrap().total)
        .collect();
    assert!(rows[49] < rows[0], "{} -> {}", rows[0], rows[49]);
}

fn negate(g: &GradientMap) -> GradientMap {
    let mut out = g.clone();
    for i in 0..out.len() {
        out.value_at_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = -*v);
    }
    out
}

#[test]
fn landscape_center_and_point_symmetry() {
    let d = data(16, 7);
    let cfg = config(&d);
    let model = Model::new(cfg.model.clone()).unwrap();
    let p = model.init(3);
    let idx: Vec<usize> = (0..8).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d1, d2) = (
        filter_normalized_direction(&p, &mut rng),
        filter_normalized_direction(&p, &mut rng),
    );
    for mode in [TrainMode::Full, TrainMode::Baseline] {
        let base = eval_loss(&model, &p, &d, &idx, mode).unwrap();
        let one = loss_landscape_slice(&model, &p, &d, &idx, mode, &d1, &d2, 1.0, 1).unwrap();
        assert_eq!(one.values[0][0].to_bits(), base.to_bits());

        let r = 5;
        let g = loss_landscape_slice(&model, &p, &d, &idx, mode, &d1, &d2, 0.5, r).unwrap();
        let flipped = loss_landscape_slice(
            &model,
            &p,
            &d,
            &idx,
            mode,
            &negate(&d1),
            &negate(&d2),
            0.5,
            r,
        )
        .unwrap();
        assert_eq!(g.values[2][2].to_bits(), base.to_bits());
        for i in 0..r {
            for j in 0..r {
                assert_eq!(
                    g.values[i][j].to_bits(),
                    flipped.values[r - 1 - i][r - 1 - j].to_bits()
                );
            }
        }
    }
}

#[test]
fn directions_match_parameter_norms() {
    let d = data(16, 8);
    let model = Model::new(config(&d).model).unwrap();
    let p = model.init(4);
    let dir = filter_normalized_direction(&p, &mut ChaCha8Rng::seed_from_u64(2));
    for (t, g) in p.values().iter().zip(dir.values()) {
        assert!((t.l2_norm() - g.l2_norm()).abs() <= 1e-12 * t.l2_norm().max(1.0));
    }
}
