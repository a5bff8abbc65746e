//! Physical scenario and swarm settings shared by the pipeline stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ArrayLayout, BoxBounds, LinkBudget, LinkModel, PathLoss, Vec3};
use crate::pso::SwarmConfig;

/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Largest accepted gap between a configured wavelength and `c / F`, m.
pub const WAVELENGTH_TOL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("wavelength {given} m disagrees with c/F = {derived} m")]
    WavelengthMismatch { given: f64, derived: f64 },
    #[error("either frequency_hz or wavelength_m must be set")]
    NoCarrier,
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Base station, array, and propagation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Number of movable antennas M.
    pub antennas: usize,
    /// Base station height H, m.
    pub bs_height_m: f64,
    /// Carrier frequency F, Hz.
    pub frequency_hz: Option<f64>,
    /// Carrier wavelength, m. Checked against `c / F` when both are set.
    pub wavelength_m: Option<f64>,
    /// Reference channel power gain at 1 m (linear).
    pub beta0: f64,
    /// Path-loss exponent.
    pub alpha: f64,
    /// Rician factor (linear power ratio).
    pub kappa: f64,
    pub los_paths: usize,
    pub nlos_paths: usize,
    /// Noise power N, W.
    pub noise_w: f64,
    /// Transmit power P_com, W.
    pub tx_power_w: f64,
    /// Movement region size per axis, in wavelengths. The region's lower
    /// corner sits at the origin of the array frame.
    pub region_lambda: [f64; 3],
    /// Per-slot antenna displacement cap, in wavelengths.
    pub max_step_lambda: f64,
    /// Minimum inter-antenna spacing, in wavelengths.
    pub min_spacing_lambda: f64,
    /// NLoS draws averaged per secrecy-rate evaluation.
    pub mc_samples: usize,
    /// Reuse one set of NLoS realisations for every slot, so the channel
    /// varies over time only through Bob and Eve's movement.
    pub static_scattering: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            antennas: 9,
            bs_height_m: 20.0,
            frequency_hz: Some(28e9),
            wavelength_m: Some(0.0107),
            beta0: 1.0,
            alpha: 2.5,
            kappa: 10.0,
            los_paths: 1,
            nlos_paths: 4,
            noise_w: 1e-5,
            tx_power_w: 1.0,
            region_lambda: [10.0, 10.0, 2.0],
            max_step_lambda: 0.1,
            min_spacing_lambda: 0.5,
            mc_samples: 16,
            static_scattering: true,
        }
    }
}

impl ScenarioConfig {
    /// Carrier wavelength, m. Derived as `c / F` when the frequency is set.
    pub fn wavelength(&self) -> Result<f64, ScenarioError> {
        match (self.frequency_hz, self.wavelength_m) {
            (Some(f), given) => {
                let derived = SPEED_OF_LIGHT / f;
                match given {
                    Some(l) if (l - derived).abs() > WAVELENGTH_TOL => {
                        Err(ScenarioError::WavelengthMismatch { given: l, derived })
                    }
                    _ => Ok(derived),
                }
            }
            (None, Some(l)) => Ok(l),
            (None, None) => Err(ScenarioError::NoCarrier),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        let lambda = self.wavelength()?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return bad("wavelength must be positive");
        }
        if self.antennas == 0 {
            return bad("antennas must be at least 1");
        }
        if !(self.beta0 > 0.0 && self.alpha >= 0.0 && self.kappa >= 0.0) {
            return bad("beta0 must be positive, alpha and kappa nonnegative");
        }
        if self.kappa > 0.0 && self.los_paths == 0 {
            return bad("kappa > 0 requires at least one LoS path");
        }
        if !(self.noise_w > 0.0 && self.tx_power_w >= 0.0) {
            return bad("noise_w must be positive and tx_power_w nonnegative");
        }
        if self.region_lambda.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return bad("region_lambda entries must be finite and nonnegative");
        }
        if !(self.max_step_lambda > 0.0 && self.min_spacing_lambda >= 0.0) {
            return bad("max_step_lambda must be positive and min_spacing_lambda nonnegative");
        }
        Ok(())
    }

    /// Antenna movement box in the array frame, m.
    pub fn bounds(&self) -> Result<BoxBounds, ScenarioError> {
        let l = self.wavelength()?;
        let [x, y, z] = self.region_lambda;
        Ok(BoxBounds::new(Vec3::ZERO, Vec3::new(x * l, y * l, z * l)))
    }

    pub fn max_step(&self) -> Result<f64, ScenarioError> {
        Ok(self.max_step_lambda * self.wavelength()?)
    }

    pub fn min_spacing(&self) -> Result<f64, ScenarioError> {
        Ok(self.min_spacing_lambda * self.wavelength()?)
    }

    /// Base station position plus the centre of the movement box.
    pub fn array_center(&self) -> Result<Vec3, ScenarioError> {
        Ok(Vec3::new(0.0, 0.0, self.bs_height_m) + self.bounds()?.center())
    }

    pub fn link_model(&self) -> Result<LinkModel, ScenarioError> {
        self.validate()?;
        Ok(LinkModel {
            budget: LinkBudget {
                tx_power: self.tx_power_w,
                noise_power: self.noise_w,
                rician_kappa: self.kappa,
                wavelength: self.wavelength()?,
            },
            loss: PathLoss { alpha: self.alpha, beta0: self.beta0 },
            los_paths: self.los_paths,
            nlos_paths: self.nlos_paths,
            mc_samples: self.mc_samples,
            array_center: self.array_center()?,
        })
    }

    /// The conventional fixed array: a λ/2-spaced near-square grid centred in
    /// the movement box.
    pub fn fixed_layout(&self) -> Result<ArrayLayout, ScenarioError> {
        let lambda = self.wavelength()?;
        Ok(ArrayLayout::fixed_reference(&self.bounds()?, self.antennas, lambda / 2.0))
    }
}

/// Swarm hyperparameters; geometry comes from the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwarmSettings {
    /// Particle count K.
    pub particles: usize,
    /// Iteration count I_max.
    pub iterations: usize,
    pub c1: f64,
    pub c2: f64,
    pub omega_max: f64,
    pub omega_min: f64,
    pub per_coordinate: bool,
    pub asynchronous: bool,
    /// Fitness cache quantum, m (0 disables the cache).
    pub cache_resolution_m: f64,
}

impl Default for SwarmSettings {
    fn default() -> Self {
        Self {
            particles: 50,
            iterations: 100,
            c1: 1.5,
            c2: 1.5,
            omega_max: 0.7,
            omega_min: 0.3,
            per_coordinate: true,
            asynchronous: true,
            cache_resolution_m: 1e-6,
        }
    }
}

impl SwarmSettings {
    pub fn swarm_config(&self, scenario: &ScenarioConfig, seed: u64) -> Result<SwarmConfig, ScenarioError> {
        Ok(SwarmConfig {
            particles: self.particles,
            iterations: self.iterations,
            c1: self.c1,
            c2: self.c2,
            omega_max: self.omega_max,
            omega_min: self.omega_min,
            bounds: scenario.bounds()?,
            antennas: scenario.antennas,
            max_step: scenario.max_step()?,
            min_spacing: scenario.min_spacing()?,
            seed,
            per_coordinate: self.per_coordinate,
            asynchronous: self.asynchronous,
            cache_resolution: self.cache_resolution_m,
        })
    }
}
