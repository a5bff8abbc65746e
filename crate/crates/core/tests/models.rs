use mapd::channel::{ArrayLayout, BoxBounds, Vec3};
use mapd::dataset::{sinusoidal_motion, split_windows, SplitFractions};
use mapd::models::*;
use mapd::nn::{gradient_check, ParamStore};
use mapd::rng::seeded;
use rand_distr::{Distribution, StandardNormal};

const STEP: f64 = 1e-5;

fn randn(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn toy(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        antennas: 2,
        hist: 4,
        pre: 2,
        lstm_hidden: 3,
        d_model: 4,
        heads: 2,
        bilstm_hidden: 3,
        baseline_hidden: 3,
        ffn_hidden: 5,
        narx_delays: 2,
        narx_hidden: 4,
        dropout: 0.3,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn check_model(config: ModelConfig, with_dropout: bool) -> f64 {
    let mut model = Model::new(config.clone()).unwrap();
    let w = config.width();
    let r = randn(5, config.pre * w);
    let mut inputs = vec![randn(6, config.hist * w)];
    let mut store = std::mem::take(&mut model.store);
    let report = gradient_check(&mut store, &mut inputs, STEP, |s: &mut ParamStore, x, back| {
        std::mem::swap(&mut model.store, s);
        let mut rng = seeded(99);
        let (y, cache) = model.forward(&x[0], with_dropout.then_some(&mut rng)).unwrap();
        let loss: f64 = y.iter().zip(&r).map(|(a, b)| a * b).sum();
        let dx = if back { vec![model.backward(&cache, &r)] } else { vec![] };
        std::mem::swap(&mut model.store, s);
        (loss, dx)
    });
    assert_eq!(report.checked, store.count() + config.hist * w);
    assert!(report.max_rel_error < 1e-4, "{:?} {report:?}", config.kind);
    report.max_rel_error
}

#[test]
fn gradients_match_finite_differences_for_every_model() {
    for kind in ModelKind::ALL {
        for residual in [false, true] {
            check_model(ModelConfig { residual, ..toy(kind) }, false);
        }
    }
}

#[test]
fn proposed_gradients_with_dropout_and_antenna_attention() {
    check_model(toy(ModelKind::Proposed), true);
    let antenna = ModelConfig { attention_axis: AttentionAxis::Antenna, lstm_hidden: 4, ..toy(ModelKind::Proposed) };
    check_model(antenna.clone(), false);
    check_model(antenna, true);
}

#[test]
fn parameter_counts_match_closed_form() {
    for kind in ModelKind::ALL {
        for config in [toy(kind), ModelConfig { kind, ..ModelConfig::default() }] {
            let model = Model::new(config.clone()).unwrap();
            assert_eq!(model.param_count(), expected_param_count(&config), "{kind}");
        }
    }
    // Hand count for the shipped proposed sizes.
    let c = ModelConfig::default();
    let (m, h, d, b, out) = (9, 16, 32, 16, 10 * 27);
    let hand = m * (4 * h * (3 + h) + 4 * h)
        + (m * h * d + d)
        + 4 * d * d
        + 2 * (4 * b * (m * h + d + b) + 4 * b)
        + (2 * b * out + out);
    assert_eq!(expected_param_count(&c), hand);
    let antenna = ModelConfig { attention_axis: AttentionAxis::Antenna, ..c };
    assert_eq!(Model::new(antenna.clone()).unwrap().param_count(), hand - 4 * d * d + 4 * h * h);
}

#[test]
fn zero_head_with_residual_is_persistence() {
    for kind in ModelKind::ALL {
        let mut model = Model::new(toy(kind)).unwrap();
        let head = if kind == ModelKind::Narx { "out." } else { "head." };
        for p in model.store.params_mut().iter_mut().filter(|p| p.name.starts_with(head)) {
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = randn(3, 4 * 6);
        let y = model.predict_normalized(&x).unwrap();
        assert_eq!(y, persistence(&x, 6, 2), "{kind}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_heads = ModelConfig { d_model: 6, heads: 4, ..ModelConfig::default() };
    assert!(matches!(Model::new(bad_heads), Err(ModelError::Config(_))));
    let narx = ModelConfig { kind: ModelKind::Narx, narx_delays: 30, ..ModelConfig::default() };
    assert!(matches!(Model::new(narx), Err(ModelError::Config(_))));
    let model = Model::new(toy(ModelKind::LstmOnly)).unwrap();
    assert!(matches!(model.predict_normalized(&[0.0; 5]), Err(ModelError::Input { expected: 24, found: 5 })));
}

#[test]
fn kinds_round_trip_through_names() {
    for kind in ModelKind::ALL {
        assert_eq!(ModelKind::parse(kind.name()), Some(kind));
        assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{kind}\""));
    }
    assert_eq!(ModelKind::parse("gru"), None);
}

fn small_set() -> (mapd::dataset::WindowSet, BoxBounds) {
    let bounds = BoxBounds::new(Vec3::new(-0.05, -0.05, -0.01), Vec3::new(0.05, 0.05, 0.01));
    let base = ArrayLayout::fixed_reference(&bounds, 2, 0.02);
    let ds = sinusoidal_motion(&base, bounds, 80, 0.004, 16.0, 3);
    (split_windows(&ds, 4, 2, 1, SplitFractions::default()).unwrap(), bounds)
}

#[test]
fn training_is_deterministic_and_keeps_best_validation_weights() {
    let (set, bounds) = small_set();
    let config = ModelConfig { epochs: 12, batch_size: 8, learning_rate: 0.01, ..toy(ModelKind::Proposed) };
    let (a, ra) = train(&config, &set, bounds).unwrap();
    let (b, rb) = train(&config, &set, bounds).unwrap();
    assert_eq!(ra.loss_curve(), rb.loss_curve());
    assert_eq!(ra.val_curve(), rb.val_curve());
    assert_eq!(a.store, b.store);
    let best = ra.val_curve().iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(ra.epochs[ra.best_epoch - 1].val_nmse, best);
    let val = set.subset(&set.val);
    assert!((window_nmse(&a, &val).unwrap() - best).abs() < 1e-12);

    let mut csv = Vec::new();
    ra.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,train_nmse,val_nmse\n"));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn training_reduces_loss_for_every_model() {
    let (set, bounds) = small_set();
    for kind in ModelKind::ALL {
        let config = ModelConfig { epochs: 30, batch_size: 8, learning_rate: 0.01, ..toy(kind) };
        let (_, report) = train(&config, &set, bounds).unwrap();
        let curve = report.loss_curve();
        let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = curve[curve.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{kind}: {head} -> {tail}");
    }
}

#[test]
fn divergence_reports_the_epoch() {
    let (set, bounds) = small_set();
    let config = ModelConfig { epochs: 5, learning_rate: f64::MAX, ..toy(ModelKind::LstmOnly) };
    match train(&config, &set, bounds) {
        Err(ModelError::Diverged { epoch, .. }) => assert!((1..=5).contains(&epoch)),
        other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r)),
    }
}

#[test]
fn predictions_are_clamped_into_the_box() {
    let (set, bounds) = small_set();
    let mut model = Model::new(ModelConfig { residual: false, ..toy(ModelKind::TransformerOnly) }).unwrap();
    model.normalizer = set.normalizer;
    model.bounds = bounds;
    for p in model.store.params_mut().iter_mut().filter(|p| p.name == "head.b") {
        p.value.data.iter_mut().for_each(|v| *v = 50.0);
    }
    let history = vec![0.0; 4 * 6];
    let p = model.predict(&history).unwrap();
    assert_eq!(p.clamped, 12);
    for q in p.positions.chunks_exact(3) {
        assert!(bounds.contains(Vec3::from_slice(q), 0.0));
    }
    let r = model.rollout(&history, 5).unwrap();
    assert_eq!(r.positions.len(), 5 * 6);
    assert_eq!(r.clamped, 36);
}

#[test]
fn model_files_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (set, bounds) = small_set();
    for kind in ModelKind::ALL {
        let (model, _) = train(&ModelConfig { epochs: 2, ..toy(kind) }, &set, bounds).unwrap();
        let path = dir.path().join(format!("{kind}.model"));
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path, Some(kind)).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.normalizer, model.normalizer);
        for (a, b) in loaded.store.params().iter().zip(model.store.params()) {
            assert_eq!(a.value, b.value);
        }
        let x = &set.windows[0].input;
        assert_eq!(loaded.predict_normalized(x).unwrap(), model.predict_normalized(x).unwrap());
    }
}

#[test]
fn model_file_errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(toy(ModelKind::Narx)).unwrap();
    let path = dir.path().join("narx.model");
    save_model(&model, &path).unwrap();
    assert!(matches!(
        load_model(&path, Some(ModelKind::Proposed)),
        Err(ModelError::KindMismatch { expected: ModelKind::Proposed, found: ModelKind::Narx })
    ));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.model");
    std::fs::write(&cut, &bytes[..bytes.len() - 12]).unwrap();
    let full = 8 * model.param_count();
    match load_model(&cut, None) {
        Err(ModelError::Truncated { expected, actual }) => assert_eq!((expected, actual), (full, full - 12)),
        other => panic!("{:?}", other.map(|m| m.kind())),
    }

    let text = String::from_utf8_lossy(&bytes).replacen("MAPD-MODEL v1", "MAPD-MODEL v7", 1);
    let future = dir.path().join("future.model");
    std::fs::write(&future, text.as_bytes()).unwrap();
    assert!(matches!(load_model(&future, None), Err(ModelError::Version { found: 7, supported: 1 })));

    let garbage = dir.path().join("garbage.model");
    std::fs::write(&garbage, b"hello\n").unwrap();
    assert!(matches!(load_model(&garbage, None), Err(ModelError::Format(_))));
    assert!(matches!(load_model(&dir.path().join("missing"), None), Err(ModelError::Io { .. })));
}
