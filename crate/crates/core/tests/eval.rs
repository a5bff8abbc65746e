use mapd::channel::ArrayLayout;
use mapd::dataset::*;
use mapd::eval::*;
use mapd::models::{Model, ModelConfig, ModelKind};
use mapd::scenario::{ScenarioConfig, SwarmSettings};
use proptest::prelude::*;

fn small_dataset(slots: usize) -> Dataset {
    let scenario = ScenarioConfig::default();
    let swarm = SwarmSettings { particles: 8, iterations: 6, ..SwarmSettings::default() };
    let bob = TrajectorySpec {
        kind: TrajectoryKind::WaypointLinear { start: [70.0, -40.0, 50.0], end: [70.0, 40.0, 50.0] },
        slots,
        dt: 0.1,
    };
    let eve = TrajectorySpec {
        kind: TrajectoryKind::ParametricSinusoid {
            center: [35.0, 0.0, 40.0],
            velocity: [0.0; 3],
            amplitude: [0.0, 15.0, 5.0],
            angular_frequency: [0.0, 0.3, 0.5],
            phase: [0.0; 3],
        },
        slots,
        dt: 0.1,
    };
    build_dataset(&scenario, &bob, &eve, &swarm, 5).unwrap()
}

#[test]
fn nmse_identities() {
    let y = [0.3, -1.2, 4.0, 0.01, 2.5, -0.7];
    assert_eq!(nmse(&y, &y).unwrap(), 0.0);
    assert!((nmse(&[0.0; 6], &y).unwrap() - 1.0).abs() < 1e-12);
    let twice: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    assert!((nmse(&twice, &y).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(nmse(&y, &[0.0; 6]), Err(EvalError::ZeroNorm)));
    assert!(matches!(nmse(&y[..3], &y), Err(EvalError::Length { pred: 3, truth: 6 })));
}

proptest! {
    #[test]
    fn nmse_is_scale_covariant(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
        c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(t.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let a = nmse(&p, &t).unwrap();
        let pc: Vec<f64> = p.iter().map(|v| c * v).collect();
        let tc: Vec<f64> = t.iter().map(|v| c * v).collect();
        let b = nmse(&pc, &tc).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn accuracy_is_monotone_in_eps(
        pairs in prop::collection::vec((-1e-3f64..1e-3, -1e-3f64..1e-3), 3..60),
        e1 in 1e-6f64..2e-3,
        e2 in 1e-6f64..2e-3,
    ) {
        let n = pairs.len() / 3 * 3;
        let (p, t): (Vec<f64>, Vec<f64>) = pairs[..n].iter().copied().unzip();
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let a = accuracy_at_threshold(&p, &t, lo).unwrap();
        let b = accuracy_at_threshold(&p, &t, hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && a <= b);
    }
}

#[test]
fn accuracy_examples() {
    let eps = 5e-4;
    let truth: Vec<f64> = (0..24).map(|i| i as f64 * 0.01).collect();
    assert_eq!(accuracy_at_threshold(&truth, &truth, eps).unwrap(), 1.0);
    // Every antenna displaced by 2·eps along a diagonal.
    let d = 2.0 * eps / 3f64.sqrt();
    let off: Vec<f64> = truth.iter().map(|v| v + d).collect();
    assert_eq!(accuracy_at_threshold(&off, &truth, eps).unwrap(), 0.0);
    // Half of the antennas exact, the other half 10·eps away along x.
    let mut half = truth.clone();
    for a in (0..8).filter(|a| a % 2 == 1) {
        half[3 * a] += 10.0 * eps;
    }
    assert_eq!(accuracy_at_threshold(&half, &truth, eps).unwrap(), 0.5);
    assert!(matches!(accuracy_at_threshold(&truth, &truth, 0.0), Err(EvalError::Threshold(_))));
}

#[test]
fn box_statistics() {
    let s = mse_stats(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
    assert_eq!((s.whisker_lo, s.whisker_hi, s.outliers), (1.0, 4.0, 0));

    let c = mse_stats(&[0.7; 9]).unwrap();
    assert_eq!((c.min, c.q1, c.median, c.q3, c.max), (0.7, 0.7, 0.7, 0.7, 0.7));
    assert_eq!(c.q3 - c.q1, 0.0);

    // q1 = 2, q3 = 4, IQR = 2, upper fence 7.
    let o = mse_stats(&[1.0, 2.0, 3.0, 4.0, 5.0, 50.0, 2.0, 4.0, 3.0]).unwrap();
    assert_eq!((o.q1, o.median, o.q3), (2.0, 3.0, 4.0));
    assert_eq!(o.whisker_hi, 5.0);
    assert_eq!(o.max, 50.0);
    assert_eq!(o.outliers, 1);
    assert!(o.q1 <= o.median && o.median <= o.q3);

    assert!(matches!(mse_stats(&[1.0, 2.0, 3.0]), Err(EvalError::TooFewSamples { needed: 4, found: 3 })));
}

#[test]
fn quantile_matches_order_statistics_oracle() {
    let data: Vec<f64> = (0..11).map(|i| (i * i) as f64).collect();
    // Position q·10 lands on an integer for these q.
    for (q, idx) in [(0.0, 0), (0.1, 1), (0.5, 5), (0.9, 9), (1.0, 10)] {
        assert!((quantile(&data, q) - data[idx]).abs() < 1e-9);
    }
    // Halfway between 9 and 16 at position 3.5.
    assert!((quantile(&data, 0.35) - 12.5).abs() < 1e-9);
}

#[test]
fn replay_columns_and_pure_los_monotonicity() {
    let ds = small_dataset(6);
    let scenario = ScenarioConfig::default();
    let slots: Vec<usize> = (0..6).collect();
    let optimal: Vec<ArrayLayout> = ds.records.iter().map(|r| r.layout.clone()).collect();
    let cfg = EvalConfig::default();
    let rows = secrecy_replay(&ds, &slots, &optimal, &scenario, &cfg.sweeps(), true, 1).unwrap();
    assert_eq!(rows.len(), 6 * 15);
    for r in &rows {
        assert_eq!(r.optimal, r.predicted);
        assert!(r.fixed >= 0.0 && r.optimal >= 0.0);
    }
    for slot in slots {
        for (param, decreasing) in [(SweepParam::Alpha, true), (SweepParam::NoisePower, true), (SweepParam::TxPower, false)] {
            let mut col: Vec<&ReplayRow> = rows.iter().filter(|r| r.slot == slot && r.param == param).collect();
            col.sort_by(|a, b| a.value.total_cmp(&b.value));
            for pair in col.windows(2) {
                for (a, b) in [(pair[0].fixed, pair[1].fixed), (pair[0].optimal, pair[1].optimal)] {
                    if decreasing {
                        assert!(b <= a, "{param:?} slot {slot}: {a} -> {b}");
                    } else {
                        assert!(b >= a, "{param:?} slot {slot}: {a} -> {b}");
                    }
                }
            }
        }
    }
}

#[test]
fn replay_with_scattering_is_seed_deterministic() {
    let ds = small_dataset(3);
    let scenario = ScenarioConfig::default();
    let layouts: Vec<ArrayLayout> = ds.records.iter().map(|r| r.layout.clone()).collect();
    let sweeps = [Sweep { param: SweepParam::TxPower, values: vec![0.5, 1.0] }];
    let a = secrecy_replay(&ds, &[0, 1, 2], &layouts, &scenario, &sweeps, false, 9).unwrap();
    let b = secrecy_replay(&ds, &[0, 1, 2], &layouts, &scenario, &sweeps, false, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn horizon_nmse_of_persistence_matches_direct_computation() {
    let ds = small_dataset(30);
    let w = 27;
    let flat = layout_matrix(&ds);
    let got = horizon_nmse(&Persistence { width: w }, &ds, 5, 20, &[3, 10]).unwrap();
    for (h, v) in got {
        let last = &flat[19 * w..20 * w];
        let (mut num, mut den) = (0.0, 0.0);
        for t in 20..20 + h {
            for i in 0..w {
                let y = flat[t * w + i];
                num += (last[i] - y).powi(2);
                den += y * y;
            }
        }
        assert!((v - num / den).abs() < 1e-15);
    }
    assert!(matches!(
        horizon_nmse(&Persistence { width: w }, &ds, 5, 25, &[10]),
        Err(EvalError::Horizon { horizon: 10, origin: 25, slots: 30 })
    ));
}

#[test]
fn inference_timing_counts_runs() {
    let model = Model::new(ModelConfig { kind: ModelKind::Narx, ..ModelConfig::default() }).unwrap();
    let history = vec![0.01; 20 * 27];
    let t = time_inference(&model, &history, 10).unwrap();
    assert_eq!(t.runs_ms.len(), 10);
    assert!(t.mean_ms > 0.0 && t.std_ms >= 0.0);
    assert!(matches!(time_inference(&model, &history, 9), Err(EvalError::Repetitions(9))));
}

fn fake_report(name: &str, offset: f64) -> MetricReport {
    MetricReport {
        model: name.into(),
        nmse: 0.01 + offset,
        horizon_nmse: vec![(10, 0.01 + offset), (20, 0.02 + offset)],
        accuracy: 0.5,
        mse: mse_stats(&[1e-6, 2e-6, 3e-6, 4e-6]).unwrap(),
        inference: Some(Timing { runs_ms: vec![1.0; 10], mean_ms: 1.0, std_ms: 0.0 }),
        replay: vec![ReplayRow { slot: 3, param: SweepParam::Alpha, value: 2.0, fixed: 1.0, optimal: 2.0, predicted: 1.5 }],
    }
}

#[test]
fn report_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let empty = emit_report(&[], &dir.path().join("empty")).unwrap();
    assert!(empty.models.is_empty());
    assert!(dir.path().join("empty/manifest.json").exists());

    let reports = [fake_report("proposed", 0.0), fake_report("narx", 0.01)];
    let out = dir.path().join("two");
    let m = emit_report(&reports, &out).unwrap();
    assert_eq!(m.models, vec!["proposed", "narx"]);
    let svg = std::fs::read_to_string(out.join("nmse_by_horizon.svg")).unwrap();
    assert!(svg.starts_with("<svg") && !svg.contains("href"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">proposed<") && svg.contains(">narx<"));
    for entry in &m.files {
        assert!(out.join(&entry.file).exists(), "{}", entry.file);
    }

    let again = dir.path().join("again");
    emit_report(&reports, &again).unwrap();
    for entry in m.files.iter().filter(|e| e.deterministic) {
        let a = std::fs::read(out.join(&entry.file)).unwrap();
        let b = std::fs::read(again.join(&entry.file)).unwrap();
        assert_eq!(a, b, "{}", entry.file);
    }
    let csv = std::fs::read_to_string(out.join("nmse_by_horizon.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("model,horizon,nmse"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn evaluate_persistence_end_to_end() {
    let ds = small_dataset(60);
    let set = split_windows(&ds, 5, 3, 1, SplitFractions::default()).unwrap();
    let scenario = ScenarioConfig::default();
    let cfg = EvalConfig { horizons: vec![3, 9], alpha_grid: vec![2.0, 3.0], noise_grid_w: vec![1e-5], power_grid_w: vec![1.0], ..EvalConfig::default() };
    let r = evaluate(&Persistence { width: 27 }, &ds, &set, &scenario, &cfg, 0).unwrap();
    assert_eq!(r.model, "persistence");
    assert_eq!(r.horizon_nmse.iter().map(|p| p.0).collect::<Vec<_>>(), vec![3, 9]);
    assert_eq!(r.mse.count, set.test.len());
    let blocks = test_blocks(&set, 60);
    assert_eq!(blocks, vec![51, 54, 57]);
    assert_eq!(r.replay.len(), 9 * 4);
    assert!(r.nmse.is_finite() && (0.0..=1.0).contains(&r.accuracy));
}
