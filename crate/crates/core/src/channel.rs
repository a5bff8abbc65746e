//! Geometry, Rician multipath fading, SNR and secrecy rate for a base station
//! whose transmit antennas can be repositioned inside a bounded region.
//!
//! Antenna positions are local coordinates relative to the base station. The
//! link distance of a node is measured from the centre of the movement region,
//! and per-antenna offsets enter only through the steering phases.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("node at {node} coincides with the array reference point")]
    CollocatedNodes { node: Vec3 },
    #[error("rician factor {kappa} > 0 requires at least one LoS path")]
    MissingLos { kappa: f64 },
    #[error("channel vector has zero norm")]
    ZeroChannel,
    #[error("channel length {channel} does not match weight length {weights}")]
    LengthMismatch { channel: usize, weights: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2])
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Axis-aligned movement region shared by all antennas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoxBounds {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite()
            && self.max.is_finite()
            && self.min.x <= self.max.x
            && self.min.y <= self.max.y
            && self.min.z <= self.max.z
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        p.x >= self.min.x - tol
            && p.x <= self.max.x + tol
            && p.y >= self.min.y - tol
            && p.y <= self.max.y + tol
            && p.z >= self.min.z - tol
            && p.z <= self.max.z + tol
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    pub fn axis(&self, axis: usize) -> (f64, f64) {
        let (lo, hi) = (self.min.to_array(), self.max.to_array());
        (lo[axis], hi[axis])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    BaseStation,
    Bob,
    Eve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub position: Vec3,
    pub role: Role,
}

impl NodeState {
    pub fn bob(position: Vec3) -> Self {
        Self { position, role: Role::Bob }
    }

    pub fn eve(position: Vec3) -> Self {
        Self { position, role: Role::Eve }
    }
}

/// A constraint violated by an [`ArrayLayout`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Count { expected: usize, found: usize },
    OutOfBox { antenna: usize, position: Vec3 },
    Spacing { first: usize, second: usize, distance: f64 },
    Step { antenna: usize, displacement: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Count { expected, found } => {
                write!(f, "expected {expected} antennas, found {found}")
            }
            Violation::OutOfBox { antenna, position } => {
                write!(f, "antenna {antenna} at {position} is outside the movement box")
            }
            Violation::Spacing { first, second, distance } => {
                write!(f, "antennas {first} and {second} are {distance} m apart")
            }
            Violation::Step { antenna, displacement } => {
                write!(f, "antenna {antenna} moved {displacement} m in one slot")
            }
        }
    }
}

/// Constraint set a layout must satisfy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility<'a> {
    pub bounds: BoxBounds,
    pub min_spacing: f64,
    /// Previous slot's layout and the per-antenna step cap.
    pub previous: Option<(&'a ArrayLayout, f64)>,
    pub tol: f64,
}

/// Positions of the M movable antennas during one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayLayout {
    pub positions: Vec<Vec3>,
    pub slot: usize,
}

impl ArrayLayout {
    pub fn new(positions: Vec<Vec3>, slot: usize) -> Self {
        Self { positions, slot }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Flattened `x, y, z` per antenna.
    pub fn to_flat(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|p| p.to_array()).collect()
    }

    pub fn from_flat(q: &[f64], slot: usize) -> Self {
        Self::new(q.chunks_exact(3).map(Vec3::from_slice).collect(), slot)
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.positions.len().max(1) as f64;
        self.positions.iter().fold(Vec3::ZERO, |a, &p| a + p) * (1.0 / n)
    }

    pub fn min_pairwise_distance(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.positions.len() {
            for j in i + 1..self.positions.len() {
                let d = self.positions[i].distance(self.positions[j]);
                if best.map_or(true, |b| d < b.2) {
                    best = Some((i, j, d));
                }
            }
        }
        best
    }

    /// Returns the first violated constraint, if any.
    pub fn check(&self, expected: usize, rules: &Feasibility<'_>) -> Result<(), Violation> {
        if self.positions.len() != expected {
            return Err(Violation::Count { expected, found: self.positions.len() });
        }
        for (m, &p) in self.positions.iter().enumerate() {
            if !p.is_finite() || !rules.bounds.contains(p, rules.tol) {
                return Err(Violation::OutOfBox { antenna: m, position: p });
            }
        }
        if let Some((i, j, d)) = self.min_pairwise_distance() {
            if d < rules.min_spacing - rules.tol {
                return Err(Violation::Spacing { first: i, second: j, distance: d });
            }
        }
        if let Some((prev, step)) = rules.previous {
            for (m, (&p, &o)) in self.positions.iter().zip(&prev.positions).enumerate() {
                let d = p.distance(o);
                if d > step + rules.tol {
                    return Err(Violation::Step { antenna: m, displacement: d });
                }
            }
        }
        Ok(())
    }

    /// Uniform `rows × cols` planar grid with the given spacing, centred in
    /// the box at its mid-height.
    pub fn planar_grid(bounds: &BoxBounds, rows: usize, cols: usize, spacing: f64) -> Self {
        let c = bounds.center();
        let x0 = c.x - spacing * (cols as f64 - 1.0) / 2.0;
        let y0 = c.y - spacing * (rows as f64 - 1.0) / 2.0;
        let positions = (0..rows)
            .flat_map(|r| {
                (0..cols).map(move |k| Vec3::new(x0 + k as f64 * spacing, y0 + r as f64 * spacing, c.z))
            })
            .collect();
        Self::new(positions, 0)
    }

    /// Near-square grid holding exactly `m` antennas.
    pub fn fixed_reference(bounds: &BoxBounds, m: usize, spacing: f64) -> Self {
        let cols = (m as f64).sqrt().ceil().max(1.0) as usize;
        let rows = m.div_ceil(cols);
        let mut grid = Self::planar_grid(bounds, rows, cols, spacing);
        grid.positions.truncate(m);
        grid
    }
}

/// Elevation `theta` and azimuth `phi` of one propagation path, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathAngle {
    pub theta: f64,
    pub phi: f64,
}

impl PathAngle {
    pub fn direction(&self) -> Vec3 {
        direction_vector(self.theta, self.phi)
    }

    /// Angles of the unit vector pointing from `from` to `to`.
    pub fn between(from: Vec3, to: Vec3) -> Self {
        let d = to - from;
        let n = d.norm();
        let theta = (d.z / n).clamp(-1.0, 1.0).asin();
        let phi = d.y.atan2(d.x);
        Self { theta, phi }
    }
}

/// Propagation paths of one link, LoS entries first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub los_count: usize,
    pub nlos_count: usize,
    pub angles: Vec<PathAngle>,
}

impl PathSet {
    pub fn los(angle: PathAngle) -> Self {
        Self { los_count: 1, nlos_count: 0, angles: vec![angle] }
    }

    pub fn total(&self) -> usize {
        self.los_count + self.nlos_count
    }

    /// Appends the NLoS entries of `other` after this set's paths.
    pub fn with_nlos(mut self, other: &PathSet) -> Self {
        self.nlos_count += other.nlos_count;
        self.angles.extend_from_slice(&other.angles[other.los_count..]);
        self
    }

    fn wave_vectors(&self, lambda: f64) -> Vec<Vec3> {
        let k = 2.0 * PI / lambda;
        self.angles.iter().map(|a| a.direction() * k).collect()
    }
}

/// Complex path gains of one link for one fading draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub sigma_los: Complex64,
    pub sigma_nlos: Vec<Complex64>,
    pub distance: f64,
    pub alpha: f64,
    pub beta0: f64,
}

impl ChannelRealization {
    pub fn draw<R: Rng + ?Sized>(nlos: usize, distance: f64, loss: PathLoss, rng: &mut R) -> Self {
        let gain = loss.gain(distance);
        let sigma_nlos = (0..nlos)
            .map(|_| complex_gaussian(rng, gain / nlos as f64))
            .collect();
        Self {
            sigma_los: Complex64::new(gain.sqrt(), 0.0),
            sigma_nlos,
            distance,
            alpha: loss.alpha,
            beta0: loss.beta0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLoss {
    pub alpha: f64,
    pub beta0: f64,
}

impl PathLoss {
    /// Large-scale power gain `beta0 * d^-alpha`.
    pub fn gain(&self, distance: f64) -> f64 {
        self.beta0 * distance.powf(-self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    /// Transmit power, W.
    pub tx_power: f64,
    /// Receiver noise power, W.
    pub noise_power: f64,
    pub rician_kappa: f64,
    /// Carrier wavelength, m.
    pub wavelength: f64,
}

/// Everything needed to evaluate a Monte Carlo secrecy rate for a layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub budget: LinkBudget,
    pub loss: PathLoss,
    pub los_paths: usize,
    pub nlos_paths: usize,
    /// Number of NLoS draws averaged per fitness evaluation.
    pub mc_samples: usize,
    /// Fixed reference point of the array (base station plus region centre).
    pub array_center: Vec3,
}

/// Draws a circularly-symmetric complex Gaussian of total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

pub fn direction_vector(theta: f64, phi: f64) -> Vec3 {
    Vec3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin())
}

/// Per-path phase factors `exp(i 2π/λ pᵀr_j)` seen from antenna position `p`.
pub fn steering_vector(p: Vec3, paths: &PathSet, lambda: f64) -> Vec<Complex64> {
    let k = 2.0 * PI / lambda;
    paths
        .angles
        .iter()
        .map(|a| Complex64::from_polar(1.0, k * p.dot(a.direction())))
        .collect()
}

/// `L_t × M` matrix whose m-th column is the steering vector of antenna m.
pub fn field_response_matrix(layout: &ArrayLayout, paths: &PathSet, lambda: f64) -> Array2<Complex64> {
    let mut g = Array2::zeros((paths.total(), layout.len()));
    for (m, &p) in layout.positions.iter().enumerate() {
        for (j, v) in steering_vector(p, paths, lambda).into_iter().enumerate() {
            g[[j, m]] = v;
        }
    }
    g
}

pub fn sample_nlos_paths<R: Rng + ?Sized>(rng: &mut R, count: usize) -> PathSet {
    let angles = (0..count)
        .map(|_| PathAngle {
            theta: rng.gen_range(-PI / 2.0..=PI / 2.0),
            phi: rng.gen_range(-PI..=PI),
        })
        .collect();
    PathSet { los_count: 0, nlos_count: count, angles }
}

/// Combines the LoS and NLoS field-response channels of one realization with
/// the Rician weights. The receive response vector is all-ones, so each link
/// class reduces to a gain-weighted sum of steering phases.
pub fn channel_vector(
    layout: &ArrayLayout,
    paths: &PathSet,
    realization: &ChannelRealization,
    kappa: f64,
    lambda: f64,
) -> Result<Vec<Complex64>, ChannelError> {
    if kappa > 0.0 && paths.los_count == 0 {
        return Err(ChannelError::MissingLos { kappa });
    }
    let (a_los, a_nlos) = rician_weights(kappa);
    let waves = paths.wave_vectors(lambda);
    let (los, nlos) = waves.split_at(paths.los_count);
    Ok(layout
        .positions
        .iter()
        .map(|&p| {
            let h_los: Complex64 = los
                .iter()
                .map(|k| realization.sigma_los * Complex64::cis(k.dot(p)))
                .sum();
            let h_nlos: Complex64 = nlos
                .iter()
                .zip(&realization.sigma_nlos)
                .map(|(k, s)| s * Complex64::cis(k.dot(p)))
                .sum();
            h_los * a_los + h_nlos * a_nlos
        })
        .collect())
}

fn rician_weights(kappa: f64) -> (f64, f64) {
    if kappa.is_infinite() {
        return (1.0, 0.0);
    }
    ((kappa / (kappa + 1.0)).sqrt(), (1.0 / (kappa + 1.0)).sqrt())
}

/// Draws one fading realization for `node` and returns its channel vector.
/// `paths` must already hold the LoS direction(s) followed by the NLoS angles.
pub fn sample_channel<R: Rng + ?Sized>(
    layout: &ArrayLayout,
    array_center: Vec3,
    node: &NodeState,
    paths: &PathSet,
    budget: &LinkBudget,
    loss: PathLoss,
    rng: &mut R,
) -> Result<Vec<Complex64>, ChannelError> {
    let distance = node.position.distance(array_center);
    if distance == 0.0 {
        return Err(ChannelError::CollocatedNodes { node: node.position });
    }
    let realization = ChannelRealization::draw(paths.nlos_count, distance, loss, rng);
    channel_vector(layout, paths, &realization, budget.rician_kappa, budget.wavelength)
}

/// `|Hᴴw|² / noise`.
pub fn snr(h: &[Complex64], w: &[Complex64], noise_power: f64) -> f64 {
    inner(h, w).norm_sqr() / noise_power
}

fn inner(h: &[Complex64], w: &[Complex64]) -> Complex64 {
    h.iter().zip(w).map(|(h, w)| h.conj() * w).sum()
}

/// Shannon secrecy rate `[log2(1+γ_b) − log2(1+γ_e)]⁺`, bit/s/Hz.
pub fn secrecy_rate(gamma_bob: f64, gamma_eve: f64) -> f64 {
    (gamma_bob.ln_1p() - gamma_eve.ln_1p()).max(0.0) / std::f64::consts::LN_2
}

pub fn equal_power_weights(m: usize, tx_power: f64) -> Vec<Complex64> {
    vec![Complex64::new((tx_power / m as f64).sqrt(), 0.0); m]
}

pub fn mrt_weights(h_bob: &[Complex64], tx_power: f64) -> Result<Vec<Complex64>, ChannelError> {
    let norm = h_bob.iter().map(|h| h.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ChannelError::ZeroChannel);
    }
    let s = tx_power.sqrt() / norm;
    Ok(h_bob.iter().map(|h| h * s).collect())
}

/// Array factor power `|Σ w_m exp(i 2π/λ p_mᵀ r(θ, φ))|²`.
pub fn array_pattern_gain(layout: &ArrayLayout, w: &[Complex64], theta: f64, phi: f64, lambda: f64) -> f64 {
    let k = direction_vector(theta, phi) * (2.0 * PI / lambda);
    layout
        .positions
        .iter()
        .zip(w)
        .map(|(&p, w)| w * Complex64::cis(k.dot(p)))
        .sum::<Complex64>()
        .norm_sqr()
}

/// One link's precomputed Monte Carlo draws.
#[derive(Debug, Clone)]
struct LinkDraws {
    los_wave: Vec<Vec3>,
    sigma_los: Complex64,
    /// Per draw: NLoS wave vectors and gains.
    nlos: Vec<(Vec<Vec3>, Vec<Complex64>)>,
}

impl LinkDraws {
    fn draw<R: Rng + ?Sized>(model: &LinkModel, node: Vec3, draws: usize, rng: &mut R) -> Result<Self, ChannelError> {
        let distance = node.distance(model.array_center);
        if distance == 0.0 {
            return Err(ChannelError::CollocatedNodes { node });
        }
        let kappa = model.budget.rician_kappa;
        if kappa > 0.0 && model.los_paths == 0 {
            return Err(ChannelError::MissingLos { kappa });
        }
        let lambda = model.budget.wavelength;
        let los = PathSet {
            los_count: model.los_paths,
            nlos_count: 0,
            angles: vec![PathAngle::between(model.array_center, node); model.los_paths],
        };
        let mut nlos = Vec::with_capacity(draws);
        let mut sigma_los = Complex64::new(model.loss.gain(distance).sqrt(), 0.0);
        for _ in 0..draws {
            let paths = sample_nlos_paths(rng, model.nlos_paths);
            let r = ChannelRealization::draw(model.nlos_paths, distance, model.loss, rng);
            sigma_los = r.sigma_los;
            nlos.push((paths.wave_vectors(lambda), r.sigma_nlos));
        }
        Ok(Self { los_wave: los.wave_vectors(lambda), sigma_los, nlos })
    }

    /// Mean of `|Hᴴw|²` contributions, returned per draw.
    fn gains(&self, positions: &[Vec3], w: &[Complex64], kappa: f64, out: &mut Vec<f64>) {
        let (a_los, a_nlos) = rician_weights(kappa);
        let los_inner: Complex64 = positions
            .iter()
            .zip(w)
            .map(|(&p, &w)| {
                let h: Complex64 = self.los_wave.iter().map(|k| Complex64::cis(k.dot(p))).sum();
                (h * self.sigma_los * a_los).conj() * w
            })
            .sum();
        out.clear();
        if self.nlos.is_empty() {
            out.push(los_inner.norm_sqr());
            return;
        }
        for (waves, sigmas) in &self.nlos {
            let mut acc = los_inner;
            for (k, s) in waves.iter().zip(sigmas) {
                let field: Complex64 = positions
                    .iter()
                    .zip(w)
                    .map(|(&p, &w)| Complex64::cis(-k.dot(p)) * w)
                    .sum();
                acc += (s * a_nlos).conj() * field;
            }
            out.push(acc.norm_sqr());
        }
    }
}

/// Monte Carlo secrecy-rate objective for fixed Bob/Eve positions.
///
/// The NLoS draws are made once at construction, so `evaluate` is a
/// deterministic function of the layout (common random numbers across all
/// candidate layouts of a slot).
#[derive(Debug, Clone)]
pub struct SecrecyEvaluator {
    bob: LinkDraws,
    eve: LinkDraws,
    budget: LinkBudget,
}

impl SecrecyEvaluator {
    pub fn new<R: Rng + ?Sized>(model: &LinkModel, bob: &NodeState, eve: &NodeState, rng: &mut R) -> Result<Self, ChannelError> {
        let draws = if model.nlos_paths == 0 { 0 } else { model.mc_samples.max(1) };
        let bob = LinkDraws::draw(model, bob.position, draws, rng)?;
        let eve = LinkDraws::draw(model, eve.position, draws, rng)?;
        Ok(Self { bob, eve, budget: model.budget })
    }

    pub fn evaluate(&self, layout: &ArrayLayout) -> f64 {
        let w = equal_power_weights(layout.len(), self.budget.tx_power);
        self.evaluate_with(layout, &w, self.budget)
    }

    /// Evaluates with explicit weights and a (possibly swept) budget. The
    /// wavelength of `budget` must match the one used at construction.
    pub fn evaluate_with(&self, layout: &ArrayLayout, w: &[Complex64], budget: LinkBudget) -> f64 {
        let (mut gb, mut ge) = (Vec::new(), Vec::new());
        self.bob.gains(&layout.positions, w, budget.rician_kappa, &mut gb);
        self.eve.gains(&layout.positions, w, budget.rician_kappa, &mut ge);
        let n = budget.noise_power;
        let total: f64 = gb.iter().zip(&ge).map(|(b, e)| secrecy_rate(b / n, e / n)).sum();
        total / gb.len() as f64
    }
}

/// Mean secrecy rate over `model.mc_samples` NLoS realizations with fixed LoS
/// geometry and equal-power transmit weights.
pub fn expected_secrecy_rate<R: Rng + ?Sized>(
    layout: &ArrayLayout,
    bob: &NodeState,
    eve: &NodeState,
    model: &LinkModel,
    rng: &mut R,
) -> Result<f64, ChannelError> {
    Ok(SecrecyEvaluator::new(model, bob, eve, rng)?.evaluate(layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    const LAMBDA: f64 = 0.0107;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn single_path(theta: f64, phi: f64) -> PathSet {
        PathSet::los(PathAngle { theta, phi })
    }

    fn layout(ps: &[Vec3]) -> ArrayLayout {
        ArrayLayout::new(ps.to_vec(), 0)
    }

    #[test]
    fn direction_vector_cardinal_cases() {
        let d = direction_vector(0.0, 0.0);
        assert_abs_diff_eq!(d.x, 1.0, epsilon = 1e-15);
        let d = direction_vector(PI / 2.0, 0.0);
        assert_abs_diff_eq!(d.z, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.x, 0.0, epsilon = 1e-15);
        let d = direction_vector(0.0, PI / 2.0);
        assert_abs_diff_eq!(d.y, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.x, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn steering_vector_phases() {
        let paths = single_path(0.0, 0.0);
        let origin = steering_vector(Vec3::ZERO, &paths, LAMBDA);
        assert_eq!(origin, vec![c(1.0, 0.0)]);
        let half = steering_vector(Vec3::new(LAMBDA / 2.0, 0.0, 0.0), &paths, LAMBDA)[0];
        assert_abs_diff_eq!(half.re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(half.im, 0.0, epsilon = 1e-12);
        let quarter = steering_vector(Vec3::new(LAMBDA / 4.0, 0.0, 0.0), &paths, LAMBDA)[0];
        assert_abs_diff_eq!(quarter.re, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(quarter.im, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn field_response_matrix_columns() {
        let mut rng = seeded(3);
        let paths = sample_nlos_paths(&mut rng, 5);
        let g = field_response_matrix(&layout(&[Vec3::ZERO; 4]), &paths, LAMBDA);
        assert!(g.iter().all(|v| (*v - c(1.0, 0.0)).norm() < 1e-15));

        let p = Vec3::new(0.003, -0.002, 0.001);
        let g = field_response_matrix(&layout(&[p]), &paths, LAMBDA);
        let s = steering_vector(p, &paths, LAMBDA);
        assert_eq!(g.column(0).to_vec(), s);

        let g = field_response_matrix(
            &layout(&[Vec3::ZERO, Vec3::new(LAMBDA / 2.0, 0.0, 0.0)]),
            &single_path(0.0, 0.0),
            LAMBDA,
        );
        assert_abs_diff_eq!(g[[0, 0]].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[[0, 1]].re, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn nlos_sampling_is_seeded_and_centered() {
        assert_eq!(sample_nlos_paths(&mut seeded(1), 0).angles.len(), 0);
        let a = sample_nlos_paths(&mut seeded(11), 4);
        let b = sample_nlos_paths(&mut seeded(11), 4);
        assert_eq!(a, b);
        let big = sample_nlos_paths(&mut seeded(12), 100_000);
        let mean = big.angles.iter().map(|a| a.theta).sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.02, "mean theta {mean}");
        assert!(big
            .angles
            .iter()
            .all(|a| a.theta.abs() <= PI / 2.0 && a.phi.abs() <= PI));
    }

    fn unit_budget(kappa: f64) -> LinkBudget {
        LinkBudget { tx_power: 1.0, noise_power: 1e-5, rician_kappa: kappa, wavelength: LAMBDA }
    }

    const UNIT_LOSS: PathLoss = PathLoss { alpha: 2.0, beta0: 1.0 };

    #[test]
    fn sample_channel_pure_los_limits() {
        let node = NodeState::bob(Vec3::new(1.0, 0.0, 0.0));
        let paths = single_path(0.0, 0.0);
        let h = sample_channel(&layout(&[Vec3::ZERO]), Vec3::ZERO, &node, &paths, &unit_budget(1e12), UNIT_LOSS, &mut seeded(0)).unwrap();
        assert!((h[0] - c(1.0, 0.0)).norm() < 1e-5);

        let half = layout(&[Vec3::new(LAMBDA / 2.0, 0.0, 0.0)]);
        let h = sample_channel(&half, Vec3::ZERO, &node, &paths, &unit_budget(1e12), UNIT_LOSS, &mut seeded(0)).unwrap();
        assert!((h[0] - c(-1.0, 0.0)).norm() < 1e-5);
    }

    #[test]
    fn sample_channel_kappa_zero_is_pure_nlos() {
        let node = NodeState::eve(Vec3::new(3.0, 4.0, 0.0));
        let l = layout(&[Vec3::ZERO, Vec3::new(0.004, 0.001, 0.0)]);
        let nlos = sample_nlos_paths(&mut seeded(5), 3);
        let paths = PathSet::los(PathAngle::between(Vec3::ZERO, node.position)).with_nlos(&nlos);
        let h = sample_channel(&l, Vec3::ZERO, &node, &paths, &unit_budget(0.0), UNIT_LOSS, &mut seeded(9)).unwrap();

        let r = ChannelRealization::draw(3, 5.0, UNIT_LOSS, &mut seeded(9));
        let g = field_response_matrix(&l, &nlos, LAMBDA);
        for m in 0..2 {
            let expect: Complex64 = (0..3).map(|j| r.sigma_nlos[j] * g[[j, m]]).sum();
            assert!((h[m] - expect).norm() < 1e-15);
        }
    }

    #[test]
    fn sample_channel_rejects_collocated_node() {
        let node = NodeState::bob(Vec3::ZERO);
        let err = sample_channel(&layout(&[Vec3::ZERO]), Vec3::ZERO, &node, &single_path(0.0, 0.0), &unit_budget(1.0), UNIT_LOSS, &mut seeded(0));
        assert!(matches!(err, Err(ChannelError::CollocatedNodes { .. })));
    }

    #[test]
    fn nlos_gain_variance_matches_path_loss() {
        let loss = PathLoss { alpha: 2.0, beta0: 1.0 };
        let mut rng = seeded(21);
        let n = 40_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let r = ChannelRealization::draw(4, 2.0, loss, &mut rng);
            acc += r.sigma_nlos.iter().map(|s| s.norm_sqr()).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(r.sigma_los.norm(), 0.5, epsilon = 1e-15);
        }
        let var = acc / n as f64;
        assert!((var - 0.25 / 4.0).abs() < 0.0625 * 0.03, "variance {var}");
    }

    #[test]
    fn snr_examples() {
        assert_abs_diff_eq!(snr(&[c(1.0, 0.0)], &[c(1.0, 0.0)], 1e-5), 1e5, epsilon = 1e-6);
        assert_abs_diff_eq!(snr(&[c(1.0, 0.0), c(0.0, 1.0)], &[c(1.0, 0.0), c(0.0, 1.0)], 1.0), 4.0, epsilon = 1e-12);
        assert_eq!(snr(&[c(1.0, 0.0), c(1.0, 0.0)], &[c(1.0, 0.0), c(-1.0, 0.0)], 1.0), 0.0);
        let w = equal_power_weights(9, 1.0);
        let h = vec![c(1.0, 0.0); 9];
        assert_abs_diff_eq!(snr(&h, &w, 1e-5), 9e5, epsilon = 1e-6);
    }

    #[test]
    fn secrecy_rate_examples() {
        assert_abs_diff_eq!(secrecy_rate(3.0, 1.0), 1.0, epsilon = 1e-15);
        assert_eq!(secrecy_rate(2.5, 2.5), 0.0);
        assert_eq!(secrecy_rate(1.0, 3.0), 0.0);
    }

    #[test]
    fn mrt_examples() {
        let w = mrt_weights(&[c(1.0, 0.0), c(0.0, 0.0)], 1.0).unwrap();
        assert_eq!(w, vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let w = mrt_weights(&[c(1.0, 0.0), c(0.0, 1.0)], 2.0).unwrap();
        assert!((w[0] - c(1.0, 0.0)).norm() < 1e-15 && (w[1] - c(0.0, 1.0)).norm() < 1e-15);
        assert_eq!(mrt_weights(&[c(0.0, 0.0)], 1.0), Err(ChannelError::ZeroChannel));
        let h = [c(0.3, -1.2), c(2.0, 0.5), c(-0.7, 0.1)];
        let w = mrt_weights(&h, 1.5).unwrap();
        let norm2: f64 = h.iter().map(|v| v.norm_sqr()).sum();
        assert_abs_diff_eq!(snr(&h, &w, 1.0), 1.5 * norm2, epsilon = 1e-12);
        assert_abs_diff_eq!(w.iter().map(|v| v.norm_sqr()).sum::<f64>(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn pattern_gain_examples() {
        let w = equal_power_weights(4, 1.0);
        let l = layout(&[Vec3::ZERO; 4]);
        for (t, p) in [(0.0, 0.0), (0.4, -2.0), (-1.2, 3.0)] {
            assert_abs_diff_eq!(array_pattern_gain(&l, &w, t, p, LAMBDA), 4.0, epsilon = 1e-12);
        }
        let one = layout(&[Vec3::new(0.01, 0.02, 0.0)]);
        let w1 = [c(0.6, 0.8)];
        assert_abs_diff_eq!(array_pattern_gain(&one, &w1, 0.3, 1.0, LAMBDA), 1.0, epsilon = 1e-12);
        // broadside pair along x, observed end-fire
        let pair = layout(&[Vec3::ZERO, Vec3::new(LAMBDA / 2.0, 0.0, 0.0)]);
        let g = array_pattern_gain(&pair, &equal_power_weights(2, 1.0), 0.0, 0.0, LAMBDA);
        assert!(g < 1e-24);
    }

    #[test]
    fn fixed_reference_grid_is_centered() {
        let b = BoxBounds::new(Vec3::ZERO, Vec3::new(0.1, 0.1, 0.02));
        let g = ArrayLayout::fixed_reference(&b, 9, LAMBDA / 2.0);
        assert_eq!(g.len(), 9);
        let cen = g.centroid();
        assert!(cen.distance(b.center()) < 1e-15);
        let (_, _, d) = g.min_pairwise_distance().unwrap();
        assert_abs_diff_eq!(d, LAMBDA / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn layout_check_reports_violations() {
        let b = BoxBounds::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0));
        let rules = Feasibility { bounds: b, min_spacing: 0.1, previous: None, tol: 1e-9 };
        let l = layout(&[Vec3::new(0.5, 0.5, 0.5), Vec3::new(0.55, 0.5, 0.5)]);
        assert!(matches!(l.check(2, &rules), Err(Violation::Spacing { first: 0, second: 1, .. })));
        let l = layout(&[Vec3::new(1.5, 0.5, 0.5)]);
        assert!(matches!(l.check(1, &rules), Err(Violation::OutOfBox { antenna: 0, .. })));
        let prev = layout(&[Vec3::new(0.5, 0.5, 0.5)]);
        let moved = layout(&[Vec3::new(0.7, 0.5, 0.5)]);
        let stepped = Feasibility { previous: Some((&prev, 0.1)), ..rules };
        assert!(matches!(moved.check(1, &stepped), Err(Violation::Step { .. })));
    }
}
