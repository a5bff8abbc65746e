//! Constrained particle swarm search over antenna layouts.
//!
//! A particle is the flattened `x, y, z` coordinates of all M antennas. After
//! every move a particle is projected back onto the feasible set: box clamp,
//! radial truncation of each antenna's displacement from the previous slot's
//! layout, then pairwise-spacing repair. Fitness is maximised.
//!
//! By default updates are asynchronous: each particle is evaluated right after
//! it moves and may replace the global best seen by the next particle. The
//! synchronous mode moves every particle against the previous iteration's
//! global best, evaluates them in parallel and merges the bests sequentially.
//! Each particle draws from its own substream keyed by
//! `(seed, particle, iteration)`, so results never depend on thread count.

use std::collections::HashMap;
use std::io::{self, Write};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ArrayLayout, BoxBounds, Feasibility, Vec3, Violation};
use crate::rng::{substream, Rng};

/// Numerical slack used by every feasibility check.
pub const FEASIBILITY_TOL: f64 = 1e-9;

const REPAIR_PASSES: usize = 50;
const RESAMPLE_ATTEMPTS: usize = 200;
// relative margin added when separating a pair, so repaired pairs sit strictly
// above the minimum spacing
const SPACING_MARGIN: f64 = 1e-6;

/// Velocity factor applied (with reversed sign) to a coordinate clamped at a
/// box face. Zeroing instead lets a whole swarm settle on a face.
pub const BOUNCE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsoError {
    #[error("invalid swarm configuration: {0}")]
    InvalidConfig(String),
    #[error("no feasible layout found: {violation}")]
    Infeasible { violation: Violation },
    #[error("previous layout has {found} antennas, expected {expected}")]
    PreviousMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwarmConfig {
    /// Particle count K.
    pub particles: usize,
    /// Iteration count I_max.
    pub iterations: usize,
    pub c1: f64,
    pub c2: f64,
    pub omega_max: f64,
    pub omega_min: f64,
    /// Movement box shared by all antennas, m.
    pub bounds: BoxBounds,
    pub antennas: usize,
    /// Per-antenna displacement cap between slots, m.
    pub max_step: f64,
    /// Minimum inter-antenna distance, m.
    pub min_spacing: f64,
    pub seed: u64,
    /// Draw the cognitive/social coefficients per coordinate instead of once
    /// per particle and iteration.
    #[serde(default = "yes")]
    pub per_coordinate: bool,
    /// Update the global best after every particle instead of once per
    /// iteration (which allows parallel evaluation).
    #[serde(default = "yes")]
    pub asynchronous: bool,
    /// Fitness cache quantisation, m. Zero disables the cache.
    #[serde(default = "default_cache_resolution")]
    pub cache_resolution: f64,
}

fn yes() -> bool {
    true
}

fn default_cache_resolution() -> f64 {
    1e-6
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<(), PsoError> {
        let bad = |m: &str| Err(PsoError::InvalidConfig(m.to_string()));
        if self.particles == 0 {
            return bad("particle count must be at least 1");
        }
        if self.antennas == 0 {
            return bad("antenna count must be at least 1");
        }
        if !(self.omega_min > 0.0 && self.omega_max >= self.omega_min) {
            return bad("inertia bounds must satisfy omega_max >= omega_min > 0");
        }
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) {
            return bad("learning coefficients must be nonnegative");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        if !(self.min_spacing >= 0.0) {
            return bad("min_spacing must be nonnegative");
        }
        if !self.bounds.is_valid() {
            return bad("bounds must be finite with min <= max on every axis");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        3 * self.antennas
    }

    /// Constraint set for a slot following `prev`.
    pub fn rules<'a>(&self, prev: Option<&'a ArrayLayout>) -> Feasibility<'a> {
        Feasibility {
            bounds: self.bounds,
            min_spacing: self.min_spacing,
            previous: prev.map(|p| (p, self.max_step)),
            tol: FEASIBILITY_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub pbest_q: Vec<f64>,
    pub pbest_fit: f64,
}

/// Per-iteration diagnostics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub gbest_fit: f64,
    pub mean_fit: f64,
    pub repairs: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub particles: Vec<Particle>,
    pub gbest_q: Vec<f64>,
    pub gbest_fit: f64,
    pub iteration: usize,
    /// Global best fitness after initialisation and after every iteration.
    pub history: Vec<f64>,
    pub diagnostics: Vec<IterationStats>,
}

/// Random coefficients of one velocity update.
#[derive(Debug, Clone, PartialEq)]
pub enum Attraction {
    Scalar(f64, f64),
    PerCoordinate(Vec<f64>, Vec<f64>),
}

impl Attraction {
    fn draw(rng: &mut Rng, dim: usize, per_coordinate: bool) -> Self {
        if per_coordinate {
            let s1 = (0..dim).map(|_| rng.gen::<f64>()).collect();
            let s2 = (0..dim).map(|_| rng.gen::<f64>()).collect();
            Attraction::PerCoordinate(s1, s2)
        } else {
            Attraction::Scalar(rng.gen(), rng.gen())
        }
    }

    fn at(&self, i: usize) -> (f64, f64) {
        match self {
            Attraction::Scalar(a, b) => (*a, *b),
            Attraction::PerCoordinate(a, b) => (a[i], b[i]),
        }
    }
}

/// Linearly decreasing inertia: `omega_max` at 0, `omega_min` at `I_max`.
pub fn inertia(i: usize, config: &SwarmConfig) -> f64 {
    if config.iterations == 0 {
        return config.omega_max;
    }
    let frac = i.min(config.iterations) as f64 / config.iterations as f64;
    config.omega_max - (config.omega_max - config.omega_min) * frac
}

pub fn update_velocity(p: &Particle, gbest_q: &[f64], omega: f64, c1: f64, c2: f64, s: &Attraction) -> Vec<f64> {
    (0..p.q.len())
        .map(|i| {
            let (s1, s2) = s.at(i);
            omega * p.v[i] + c1 * s1 * (p.pbest_q[i] - p.q[i]) + c2 * s2 * (gbest_q[i] - p.q[i])
        })
        .collect()
}

/// Result of projecting a candidate position onto the feasible set.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub q: Vec<f64>,
    /// Coordinates that were clamped to a box face.
    pub clamped: Vec<bool>,
    pub repairs: usize,
    pub resampled: bool,
}

/// Moves the particle by `v_new` and projects it. Returns the projection and
/// the velocity, with clamped components reversed and damped by [`BOUNCE`].
pub fn update_position(
    p: &Particle,
    v_new: &[f64],
    config: &SwarmConfig,
    prev: Option<&ArrayLayout>,
    rng: &mut Rng,
) -> Result<(Projection, Vec<f64>), PsoError> {
    let candidate: Vec<f64> = p.q.iter().zip(v_new).map(|(q, v)| q + v).collect();
    let proj = project(&candidate, config, prev, rng)?;
    let v = v_new
        .iter()
        .zip(&proj.clamped)
        .map(|(&v, &c)| if c { -BOUNCE * v } else { v })
        .collect();
    Ok((proj, v))
}

fn clamp_into(bounds: &BoxBounds, q: &mut [f64], clamped: Option<&mut [bool]>) {
    let lo = bounds.min.to_array();
    let hi = bounds.max.to_array();
    let mut flags = clamped;
    for (i, x) in q.iter_mut().enumerate() {
        let a = i % 3;
        let c = x.clamp(lo[a], hi[a]);
        if c != *x {
            if let Some(f) = flags.as_deref_mut() {
                f[i] = true;
            }
            *x = c;
        }
    }
}

fn truncate_steps(q: &mut [f64], prev: &ArrayLayout, max_step: f64) {
    for (chunk, o) in q.chunks_exact_mut(3).zip(&prev.positions) {
        let d = Vec3::from_slice(chunk) - *o;
        let n = d.norm();
        if n > max_step {
            let p = *o + d * (max_step / n);
            chunk.copy_from_slice(&p.to_array());
        }
    }
}

fn random_unit(rng: &mut Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v * (1.0 / n);
        }
    }
}

/// Pushes apart every pair closer than the minimum spacing, re-applying the
/// box and step constraints after each pass. Returns the number of pair pushes.
fn repair_spacing(q: &mut [f64], config: &SwarmConfig, prev: Option<&ArrayLayout>, rng: &mut Rng) -> usize {
    let m = config.antennas;
    let target = config.min_spacing * (1.0 + SPACING_MARGIN);
    let mut pushes = 0;
    for _ in 0..REPAIR_PASSES {
        let mut moved = false;
        for i in 0..m {
            for j in i + 1..m {
                let pi = Vec3::from_slice(&q[3 * i..3 * i + 3]);
                let pj = Vec3::from_slice(&q[3 * j..3 * j + 3]);
                let d = pi.distance(pj);
                if d >= config.min_spacing {
                    continue;
                }
                let dir = if d > 1e-15 { (pi - pj) * (1.0 / d) } else { random_unit(rng) };
                let half = (target - d) / 2.0;
                q[3 * i..3 * i + 3].copy_from_slice(&(pi + dir * half).to_array());
                q[3 * j..3 * j + 3].copy_from_slice(&(pj - dir * half).to_array());
                pushes += 1;
                moved = true;
            }
        }
        clamp_into(&config.bounds, q, None);
        if let Some(prev) = prev {
            truncate_steps(q, prev, config.max_step);
        }
        if !moved {
            break;
        }
    }
    pushes
}

/// Uniform sample in the box, restricted to the step ball around `prev`.
fn sample_feasible_candidate(config: &SwarmConfig, prev: Option<&ArrayLayout>, rng: &mut Rng) -> Vec<f64> {
    let (lo, hi) = (config.bounds.min.to_array(), config.bounds.max.to_array());
    let mut q = Vec::with_capacity(config.dim());
    for m in 0..config.antennas {
        let p = match prev {
            Some(prev) => {
                let r = config.max_step * rng.gen::<f64>().cbrt();
                config.bounds.clamp(prev.positions[m] + random_unit(rng) * r)
            }
            None => Vec3::from_slice(
                &(0..3)
                    .map(|a| if hi[a] > lo[a] { rng.gen_range(lo[a]..=hi[a]) } else { lo[a] })
                    .collect::<Vec<_>>(),
            ),
        };
        q.extend_from_slice(&p.to_array());
    }
    q
}

/// Projects a candidate onto the feasible set. Falls back to resampling, and
/// finally to the previous layout, when spacing repair does not converge.
pub fn project(candidate: &[f64], config: &SwarmConfig, prev: Option<&ArrayLayout>, rng: &mut Rng) -> Result<Projection, PsoError> {
    let rules = config.rules(prev);
    let mut q = candidate.to_vec();
    let mut clamped = vec![false; q.len()];
    clamp_into(&config.bounds, &mut q, Some(&mut clamped));
    if let Some(prev) = prev {
        truncate_steps(&mut q, prev, config.max_step);
    }
    let mut repairs = repair_spacing(&mut q, config, prev, rng);
    let mut last = match ArrayLayout::from_flat(&q, 0).check(config.antennas, &rules) {
        Ok(()) => return Ok(Projection { q, clamped, repairs, resampled: false }),
        Err(v) => v,
    };
    for _ in 0..RESAMPLE_ATTEMPTS {
        let mut q = sample_feasible_candidate(config, prev, rng);
        repairs += repair_spacing(&mut q, config, prev, rng);
        match ArrayLayout::from_flat(&q, 0).check(config.antennas, &rules) {
            Ok(()) => return Ok(Projection { q, clamped, repairs, resampled: true }),
            Err(v) => last = v,
        }
    }
    match prev {
        Some(prev) if prev.check(config.antennas, &config.rules(None)).is_ok() => {
            Ok(Projection { q: prev.to_flat(), clamped, repairs, resampled: true })
        }
        _ => Err(PsoError::Infeasible { violation: last }),
    }
}

fn check_previous(config: &SwarmConfig, prev: Option<&ArrayLayout>) -> Result<(), PsoError> {
    match prev {
        Some(p) if p.len() != config.antennas => {
            Err(PsoError::PreviousMismatch { expected: config.antennas, found: p.len() })
        }
        _ => Ok(()),
    }
}

/// Quick necessary condition: two antennas must fit in the box diagonal.
fn check_box_capacity(config: &SwarmConfig) -> Result<(), PsoError> {
    if config.antennas >= 2 && config.bounds.extent().norm() < config.min_spacing {
        return Err(PsoError::Infeasible {
            violation: Violation::Spacing { first: 0, second: 1, distance: config.bounds.extent().norm() },
        });
    }
    Ok(())
}

/// Fitness wrapper with an optional quantised-position cache.
struct CachedFitness<'f, F> {
    f: &'f F,
    resolution: f64,
    cache: HashMap<Vec<i64>, f64>,
}

impl<'f, F: Fn(&ArrayLayout) -> f64 + Sync> CachedFitness<'f, F> {
    fn new(f: &'f F, resolution: f64) -> Self {
        Self { f, resolution, cache: HashMap::new() }
    }

    fn key(&self, q: &[f64]) -> Vec<i64> {
        q.iter().map(|x| (x / self.resolution).round() as i64).collect()
    }

    fn eval_all(&mut self, qs: &[&[f64]], slot: usize) -> Vec<f64> {
        if self.resolution <= 0.0 {
            return qs.par_iter().map(|q| (self.f)(&ArrayLayout::from_flat(q, slot))).collect();
        }
        let keys: Vec<Vec<i64>> = qs.iter().map(|q| self.key(q)).collect();
        let mut pending: Vec<usize> = Vec::new();
        let mut seen: HashMap<&Vec<i64>, ()> = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            if !self.cache.contains_key(k) && seen.insert(k, ()).is_none() {
                pending.push(i);
            }
        }
        let f = self.f;
        let fresh: Vec<f64> = pending
            .par_iter()
            .map(|&i| f(&ArrayLayout::from_flat(qs[i], slot)))
            .collect();
        for (&i, v) in pending.iter().zip(fresh) {
            self.cache.insert(keys[i].clone(), v);
        }
        keys.iter().map(|k| self.cache[k]).collect()
    }
}

fn init_particles(
    config: &SwarmConfig,
    prev: Option<&ArrayLayout>,
    warm_start: Option<&ArrayLayout>,
) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, usize), PsoError> {
    let ext = config.bounds.extent().to_array();
    let mut out = Vec::with_capacity(config.particles);
    let mut repairs = 0;
    for k in 0..config.particles {
        let mut rng = substream(config.seed, &[k as u64, u64::MAX]);
        let v: Vec<f64> = (0..config.dim())
            .map(|i| {
                let r = ext[i % 3] / 10.0;
                if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 }
            })
            .collect();
        let q = match (k, warm_start) {
            (0, Some(w)) => project(&w.to_flat(), config, prev, &mut rng)?.q,
            _ => {
                let raw = sample_feasible_candidate(config, prev, &mut rng);
                let p = project(&raw, config, prev, &mut rng)?;
                repairs += p.repairs;
                p.q
            }
        };
        out.push((q, v));
    }
    Ok((out, repairs))
}

fn swarm_from<F: Fn(&ArrayLayout) -> f64 + Sync>(
    init: Vec<(Vec<f64>, Vec<f64>)>,
    repairs: usize,
    cache: &mut CachedFitness<'_, F>,
    slot: usize,
) -> SwarmState {
    let qs: Vec<&[f64]> = init.iter().map(|(q, _)| q.as_slice()).collect();
    let fits = cache.eval_all(&qs, slot);
    let particles: Vec<Particle> = init
        .into_iter()
        .zip(&fits)
        .map(|((q, v), &f)| Particle { pbest_q: q.clone(), q, v, pbest_fit: f })
        .collect();
    let best = best_index(&particles);
    let gbest_fit = particles[best].pbest_fit;
    SwarmState {
        gbest_q: particles[best].pbest_q.clone(),
        gbest_fit,
        iteration: 0,
        history: vec![gbest_fit],
        diagnostics: vec![IterationStats { iteration: 0, gbest_fit, mean_fit: mean(&fits), repairs, resamples: 0 }],
        particles,
    }
}

fn best_index(ps: &[Particle]) -> usize {
    let mut best = 0;
    for (k, p) in ps.iter().enumerate() {
        if p.pbest_fit > ps[best].pbest_fit {
            best = k;
        }
    }
    best
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Records `f` as the particle's fitness and updates the personal and global
/// bests. Returns whether the global best improved.
fn merge_best(p: &mut Particle, f: f64, gbest_q: &mut Vec<f64>, gbest_fit: &mut f64) -> bool {
    if f > p.pbest_fit {
        p.pbest_fit = f;
        p.pbest_q.clone_from(&p.q);
    }
    if p.pbest_fit > *gbest_fit {
        *gbest_fit = p.pbest_fit;
        gbest_q.clone_from(&p.pbest_q);
        return true;
    }
    false
}

/// Samples K feasible particles (particle 0 is `warm_start` when given) and
/// evaluates them.
pub fn init_swarm<F: Fn(&ArrayLayout) -> f64 + Sync>(
    config: &SwarmConfig,
    prev: Option<&ArrayLayout>,
    warm_start: Option<&ArrayLayout>,
    fitness: &F,
) -> Result<SwarmState, PsoError> {
    config.validate()?;
    check_previous(config, prev)?;
    check_box_capacity(config)?;
    let (init, repairs) = init_particles(config, prev, warm_start)?;
    let mut cache = CachedFitness::new(fitness, config.cache_resolution);
    Ok(swarm_from(init, repairs, &mut cache, prev.map_or(0, |p| p.slot + 1)))
}

/// Output of one slot's optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSolution {
    pub layout: ArrayLayout,
    pub fitness: f64,
    /// Global best after initialisation and each of the `I_max` iterations.
    pub history: Vec<f64>,
    pub diagnostics: Vec<IterationStats>,
    /// Last iteration at which the global best improved.
    pub converged_at: usize,
}

impl SlotSolution {
    pub fn write_diagnostics_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iteration,gbest_fit,mean_fit,feasibility_repairs")?;
        for d in &self.diagnostics {
            writeln!(w, "{},{},{},{}", d.iteration, d.gbest_fit, d.mean_fit, d.repairs + d.resamples)?;
        }
        Ok(())
    }
}

/// Runs the swarm for `config.iterations` iterations and returns the global best.
///
/// `prev` imposes the per-slot step constraint; `warm_start` is injected as
/// particle 0. The returned layout carries slot index `prev.slot + 1` (0
/// without a previous layout).
pub fn optimize_slot<F: Fn(&ArrayLayout) -> f64 + Sync>(
    fitness: &F,
    config: &SwarmConfig,
    prev: Option<&ArrayLayout>,
    warm_start: Option<&ArrayLayout>,
) -> Result<SlotSolution, PsoError> {
    config.validate()?;
    check_previous(config, prev)?;
    check_box_capacity(config)?;
    let slot = prev.map_or(0, |p| p.slot + 1);
    let mut cache = CachedFitness::new(fitness, config.cache_resolution);
    let (init, repairs) = init_particles(config, prev, warm_start)?;
    let mut state = swarm_from(init, repairs, &mut cache, slot);
    let mut converged_at = 0;

    for i in 1..=config.iterations {
        let omega = inertia(i - 1, config);
        let mut repairs = 0;
        let mut resamples = 0;
        let mut fits = Vec::with_capacity(state.particles.len());
        for (k, p) in state.particles.iter_mut().enumerate() {
            let mut rng = substream(config.seed, &[k as u64, i as u64]);
            let s = Attraction::draw(&mut rng, config.dim(), config.per_coordinate);
            let v = update_velocity(p, &state.gbest_q, omega, config.c1, config.c2, &s);
            let (proj, v) = update_position(p, &v, config, prev, &mut rng)?;
            repairs += proj.repairs;
            resamples += proj.resampled as usize;
            p.q = proj.q;
            p.v = v;
            if config.asynchronous {
                let f = cache.eval_all(&[p.q.as_slice()], slot)[0];
                fits.push(f);
                if merge_best(p, f, &mut state.gbest_q, &mut state.gbest_fit) {
                    converged_at = i;
                }
            }
        }
        if !config.asynchronous {
            let qs: Vec<&[f64]> = state.particles.iter().map(|p| p.q.as_slice()).collect();
            fits = cache.eval_all(&qs, slot);
            for (p, &f) in state.particles.iter_mut().zip(&fits) {
                if merge_best(p, f, &mut state.gbest_q, &mut state.gbest_fit) {
                    converged_at = i;
                }
            }
        }
        state.iteration = i;
        state.history.push(state.gbest_fit);
        state.diagnostics.push(IterationStats {
            iteration: i,
            gbest_fit: state.gbest_fit,
            mean_fit: mean(&fits),
            repairs,
            resamples,
        });
    }

    Ok(SlotSolution {
        layout: ArrayLayout::from_flat(&state.gbest_q, slot),
        fitness: state.gbest_fit,
        history: state.history,
        diagnostics: state.diagnostics,
        converged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn config(antennas: usize, particles: usize, iterations: usize) -> SwarmConfig {
        SwarmConfig {
            particles,
            iterations,
            c1: 1.5,
            c2: 1.5,
            omega_max: 0.9,
            omega_min: 0.4,
            bounds: BoxBounds::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)),
            antennas,
            max_step: 0.05,
            min_spacing: 0.01,
            seed: 42,
            per_coordinate: false,
            asynchronous: false,
            cache_resolution: 1e-6,
        }
    }

    fn particle(q: &[f64], v: &[f64], pbest: &[f64]) -> Particle {
        Particle { q: q.to_vec(), v: v.to_vec(), pbest_q: pbest.to_vec(), pbest_fit: 0.0 }
    }

    #[test]
    fn inertia_schedule() {
        let mut c = config(1, 1, 10);
        assert_eq!(inertia(0, &c), 0.9);
        assert!((inertia(10, &c) - 0.4).abs() < 1e-15);
        assert!((inertia(5, &c) - 0.65).abs() < 1e-15);
        c.iterations = 0;
        assert_eq!(inertia(0, &c), 0.9);
    }

    #[test]
    fn velocity_update_cases() {
        let p = particle(&[0.3, 0.1], &[0.5, -0.2], &[0.9, 0.9]);
        let v = update_velocity(&p, &[0.0, 0.0], 1.0, 0.0, 0.0, &Attraction::Scalar(0.7, 0.2));
        assert_eq!(v, vec![0.5, -0.2]);
        let p = particle(&[0.3], &[0.8], &[0.3]);
        let v = update_velocity(&p, &[0.3], 0.5, 2.0, 2.0, &Attraction::Scalar(0.7, 0.2));
        assert_eq!(v, vec![0.4]);
        let p = particle(&[0.0], &[2.0], &[1.0]);
        let v = update_velocity(&p, &[3.0], 0.5, 1.0, 1.0, &Attraction::Scalar(1.0, 1.0));
        assert_eq!(v, vec![5.0]);
    }

    #[test]
    fn position_update_interior_is_exact() {
        let c = config(1, 1, 1);
        let p = particle(&[0.5, 0.5, 0.5], &[0.0; 3], &[0.5; 3]);
        let (proj, v) = update_position(&p, &[0.1, -0.2, 0.05], &c, None, &mut seeded(0)).unwrap();
        assert_eq!(proj.q, vec![0.5 + 0.1, 0.5 - 0.2, 0.5 + 0.05]);
        assert_eq!(v, vec![0.1, -0.2, 0.05]);
    }

    #[test]
    fn position_update_clamps_to_face_and_reflects_velocity() {
        let c = config(1, 1, 1);
        let p = particle(&[1.0, 0.5, 0.5], &[0.0; 3], &[0.5; 3]);
        let (proj, v) = update_position(&p, &[0.3, 0.1, 0.0], &c, None, &mut seeded(0)).unwrap();
        assert_eq!(proj.q[0], 1.0);
        assert_eq!(v, vec![-0.15, 0.1, 0.0]);
    }

    #[test]
    fn position_update_truncates_step_radially() {
        let c = config(1, 1, 1);
        let prev = ArrayLayout::new(vec![Vec3::new(0.5, 0.5, 0.5)], 0);
        let p = particle(&[0.5, 0.5, 0.5], &[0.0; 3], &[0.5; 3]);
        let (proj, _) = update_position(&p, &[2.0 * c.max_step, 0.0, 0.0], &c, Some(&prev), &mut seeded(0)).unwrap();
        assert!((proj.q[0] - (0.5 + c.max_step)).abs() < 1e-15);
        assert_eq!(&proj.q[1..], &[0.5, 0.5]);
    }

    #[test]
    fn spacing_repair_separates_coincident_antennas() {
        let mut c = config(3, 1, 1);
        c.min_spacing = 0.2;
        let q = vec![0.5; 9];
        let proj = project(&q, &c, None, &mut seeded(4)).unwrap();
        let l = ArrayLayout::from_flat(&proj.q, 0);
        assert!(l.check(3, &c.rules(None)).is_ok());
        assert!(proj.repairs > 0);
    }

    #[test]
    fn infeasible_box_is_reported_with_pair() {
        let mut c = config(2, 4, 2);
        c.bounds = BoxBounds::new(Vec3::ZERO, Vec3::new(0.001, 0.001, 0.0));
        c.min_spacing = 0.01;
        let err = optimize_slot(&|_: &ArrayLayout| 0.0, &c, None, None).unwrap_err();
        assert!(matches!(err, PsoError::Infeasible { violation: Violation::Spacing { first: 0, second: 1, .. } }));
    }

    #[test]
    fn zero_iterations_returns_best_initial_sample() {
        let c = config(2, 7, 0);
        let f = |l: &ArrayLayout| -l.positions[0].distance(Vec3::new(0.2, 0.2, 0.2));
        let state = init_swarm(&c, None, None, &f).unwrap();
        let best = state.particles.iter().map(|p| p.pbest_fit).fold(f64::NEG_INFINITY, f64::max);
        let sol = optimize_slot(&f, &c, None, None).unwrap();
        assert_eq!(sol.fitness, best);
        assert_eq!(sol.history.len(), 1);
        assert_eq!(sol.layout.to_flat(), state.gbest_q);
        let lone = optimize_slot(&f, &config(2, 1, 0), None, None).unwrap();
        let lone_init = init_swarm(&config(2, 1, 0), None, None, &f).unwrap();
        assert_eq!(lone.layout.to_flat(), lone_init.particles[0].q);
    }

    #[test]
    fn warm_start_is_particle_zero() {
        let c = config(2, 5, 0);
        let prev = ArrayLayout::new(vec![Vec3::new(0.2, 0.2, 0.2), Vec3::new(0.6, 0.6, 0.6)], 3);
        let state = init_swarm(&c, Some(&prev), Some(&prev), &|_: &ArrayLayout| 0.0).unwrap();
        assert_eq!(state.particles[0].q, prev.to_flat());
    }

    #[test]
    fn init_is_deterministic_and_feasible() {
        let mut c = config(9, 50, 0);
        c.min_spacing = 0.0107 / 2.0;
        c.bounds = BoxBounds::new(Vec3::ZERO, Vec3::new(0.107, 0.107, 0.0214));
        let f = |_: &ArrayLayout| 0.0;
        let a = init_swarm(&c, None, None, &f).unwrap();
        let b = init_swarm(&c, None, None, &f).unwrap();
        assert_eq!(a, b);
        for p in &a.particles {
            let l = ArrayLayout::from_flat(&p.q, 0);
            // brute-force check over all 36 pairs
            for i in 0..9 {
                for j in i + 1..9 {
                    assert!(l.positions[i].distance(l.positions[j]) >= c.min_spacing - 1e-9);
                }
            }
        }
    }

    #[test]
    fn diagnostics_csv_has_one_row_per_iteration() {
        let c = config(1, 4, 3);
        let sol = optimize_slot(&|l: &ArrayLayout| l.positions[0].x, &c, None, None).unwrap();
        let mut buf = Vec::new();
        sol.write_diagnostics_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("iteration,gbest_fit,mean_fit,feasibility_repairs"));
    }
}
