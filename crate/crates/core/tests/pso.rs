use std::sync::atomic::{AtomicUsize, Ordering};

use cpu_time::ThreadTime;
use mapd::channel::{ArrayLayout, BoxBounds, Vec3};
use mapd::pso::{optimize_slot, project, SwarmConfig, FEASIBILITY_TOL};
use mapd::rng::seeded;
use proptest::prelude::*;
use rand::Rng as _;

const LAMBDA: f64 = 0.0107;

fn ma_config(antennas: usize, particles: usize, iterations: usize, seed: u64) -> SwarmConfig {
    SwarmConfig {
        particles,
        iterations,
        c1: 1.5,
        c2: 1.5,
        omega_max: 0.7,
        omega_min: 0.3,
        bounds: BoxBounds::new(Vec3::ZERO, Vec3::new(10.0 * LAMBDA, 10.0 * LAMBDA, 2.0 * LAMBDA)),
        antennas,
        max_step: 0.1 * LAMBDA,
        min_spacing: LAMBDA / 2.0,
        seed,
        per_coordinate: true,
        asynchronous: true,
        cache_resolution: 1e-6,
    }
}

/// Interior target on a 3×3 grid with λ spacing, offset off the lattice.
fn sphere_target(seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed ^ 0xABCD);
    let jitter = |rng: &mut mapd::rng::Rng| rng.gen_range(-0.2..0.2) * LAMBDA;
    let mut t = Vec::new();
    for r in 0..3 {
        for c in 0..3 {
            t.push((3.0 + 2.0 * c as f64) * LAMBDA + jitter(&mut rng));
            t.push((3.0 + 2.0 * r as f64) * LAMBDA + jitter(&mut rng));
            t.push(LAMBDA + jitter(&mut rng));
        }
    }
    t
}

fn sphere(target: &[f64]) -> impl Fn(&ArrayLayout) -> f64 + Sync + '_ {
    move |l: &ArrayLayout| -l.to_flat().iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

fn max_abs_error(q: &[f64], target: &[f64]) -> f64 {
    q.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[test]
fn sphere_optimum_recovered_in_27_dimensions() {
    for seed in 0..5 {
        let target = sphere_target(seed);
        let sol = optimize_slot(&sphere(&target), &ma_config(9, 50, 100, seed), None, None).unwrap();
        let err = max_abs_error(&sol.layout.to_flat(), &target);
        assert!(err < 1e-3, "seed {seed}: error {err}");
    }
}

#[test]
fn history_is_monotone_on_a_rugged_landscape() {
    let rastrigin = |l: &ArrayLayout| {
        -l.to_flat()
            .iter()
            .map(|x| {
                let u = x / LAMBDA;
                u * u - (2.0 * std::f64::consts::PI * u).cos()
            })
            .sum::<f64>()
    };
    for seed in 0..10 {
        for asynchronous in [true, false] {
            let mut c = ma_config(4, 20, 40, seed);
            c.asynchronous = asynchronous;
            let sol = optimize_slot(&rastrigin, &c, None, None).unwrap();
            assert_eq!(sol.history.len(), 41);
            assert!(sol.history.windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(*sol.history.last().unwrap(), sol.fitness);
        }
    }
}

#[test]
fn every_evaluated_and_returned_layout_is_feasible() {
    let mut prev = ArrayLayout::fixed_reference(&ma_config(9, 1, 0, 0).bounds, 9, LAMBDA / 2.0);
    for seed in 0..6 {
        let c = ma_config(9, 30, 30, seed);
        let target = sphere_target(seed + 100);
        let outside = AtomicUsize::new(0);
        let bounds = c.bounds;
        let f = |l: &ArrayLayout| {
            if !l.positions.iter().all(|&p| bounds.contains(p, FEASIBILITY_TOL)) {
                outside.fetch_add(1, Ordering::Relaxed);
            }
            sphere(&target)(l)
        };
        let sol = optimize_slot(&f, &c, Some(&prev), Some(&prev)).unwrap();
        assert_eq!(outside.load(Ordering::Relaxed), 0);
        assert_eq!(sol.layout.slot, prev.slot + 1);
        sol.layout.check(9, &c.rules(Some(&prev))).unwrap();
        prev = sol.layout;
    }
}

#[test]
fn more_iterations_reduce_the_median_error() {
    let errors = |iterations: usize| {
        median(
            (0..20)
                .map(|seed| {
                    let target = sphere_target(seed);
                    let sol = optimize_slot(&sphere(&target), &ma_config(9, 20, iterations, seed), None, None).unwrap();
                    max_abs_error(&sol.layout.to_flat(), &target)
                })
                .collect(),
        )
    };
    let (short, long) = (errors(10), errors(100));
    assert!(long < short, "I=10 median {short}, I=100 median {long}");
}

#[test]
fn pso_beats_the_95th_percentile_of_a_grid_table() {
    let n = 21;
    let bounds = BoxBounds::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 0.0));
    let mut wins = 0;
    for seed in 0..20 {
        let mut rng = seeded(1000 + seed);
        let table: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        let lookup = |l: &ArrayLayout| {
            let p = l.positions[0];
            let i = (p.x * (n - 1) as f64).round() as usize;
            let j = (p.y * (n - 1) as f64).round() as usize;
            table[i * n + j]
        };
        let mut sorted = table.clone();
        sorted.sort_by(f64::total_cmp);
        let p95 = sorted[(0.95 * (sorted.len() - 1) as f64).ceil() as usize];
        let c = SwarmConfig { bounds, max_step: 1.0, min_spacing: 0.0, ..ma_config(1, 10, 20, seed) };
        let sol = optimize_slot(&lookup, &c, None, None).unwrap();
        if sol.fitness >= p95 {
            wins += 1;
        }
    }
    assert!(wins >= 19, "{wins}/20 seeds reached the 95th percentile");
}

#[test]
fn identical_seeds_give_identical_bits() {
    let target = sphere_target(3);
    let c = ma_config(9, 15, 25, 99);
    let a = optimize_slot(&sphere(&target), &c, None, None).unwrap();
    let b = optimize_slot(&sphere(&target), &c, None, None).unwrap();
    assert_eq!(a, b);
    let other = optimize_slot(&sphere(&target), &SwarmConfig { seed: 100, ..c }, None, None).unwrap();
    assert_ne!(a.layout, other.layout);
}

#[test]
fn synchronous_mode_ignores_thread_count() {
    let target = sphere_target(5);
    let c = SwarmConfig { asynchronous: false, ..ma_config(9, 16, 20, 8) };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| optimize_slot(&sphere(&target), &c, None, None).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn runtime_is_linear_in_particle_iterations() {
    // Fixed work per call, independent of the coordinates.
    let cost = |l: &ArrayLayout| {
        let mut acc = std::hint::black_box(l.positions[0].x);
        for _ in 0..100_000 {
            acc = acc * 0.999_999 + 1e-9;
        }
        acc
    };
    let runs = [(8, 10), (16, 10), (8, 40), (32, 20), (16, 40), (32, 40)];
    let mut points = Vec::new();
    for &(k, i) in &runs {
        let c = SwarmConfig { cache_resolution: 0.0, ..ma_config(2, k, i, 1) };
        optimize_slot(&cost, &c, None, None).unwrap();
        let best = (0..3)
            .map(|_| {
                let start = ThreadTime::now();
                optimize_slot(&cost, &c, None, None).unwrap();
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        points.push(((k * (i + 1)) as f64, best));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let intercept = my - slope * mx;
    for (x, t) in points {
        let fit = intercept + slope * x;
        assert!((t - fit).abs() <= 0.3 * fit, "K·I={x}: {t}s vs linear fit {fit}s");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_always_feasible(
        raw in prop::collection::vec(-0.05f64..0.15, 27),
        seed in 0u64..1000,
        with_prev in any::<bool>(),
    ) {
        let c = ma_config(9, 1, 0, seed);
        let prev = ArrayLayout::fixed_reference(&c.bounds, 9, LAMBDA / 2.0);
        let prev = with_prev.then_some(&prev);
        let proj = project(&raw, &c, prev, &mut seeded(seed)).unwrap();
        prop_assert!(ArrayLayout::from_flat(&proj.q, 0).check(9, &c.rules(prev)).is_ok());
    }

    #[test]
    fn interior_candidates_pass_through_unchanged(
        offsets in prop::collection::vec(-0.2f64..0.2, 27),
    ) {
        let c = ma_config(9, 1, 0, 0);
        let base = ArrayLayout::fixed_reference(&c.bounds, 9, 1.5 * LAMBDA).to_flat();
        let q: Vec<f64> = base.iter().zip(&offsets).map(|(b, o)| b + o * LAMBDA).collect();
        let proj = project(&q, &c, None, &mut seeded(0)).unwrap();
        prop_assert_eq!(proj.q, q);
        prop_assert_eq!(proj.repairs, 0);
    }
}
