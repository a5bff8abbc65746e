//! One configuration for the whole pipeline. Defaults are the shipped
//! scenario.

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, DatasetError, SplitFractions, TrajectoryKind, TrajectorySpec, WindowSet};
use crate::eval::EvalConfig;
use crate::models::ModelConfig;
use crate::scenario::{ScenarioConfig, SwarmSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Slot count T_hist.
    pub slots: usize,
    /// Slot duration, s.
    pub dt: f64,
    pub bob: TrajectoryKind,
    pub eve: TrajectoryKind,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            slots: 200,
            dt: 0.1,
            bob: TrajectoryKind::WaypointLinear { start: [70.0, -40.0, 50.0], end: [70.0, 40.0, 50.0] },
            eve: TrajectoryKind::ParametricSinusoid {
                center: [35.0, 0.0, 40.0],
                velocity: [0.0; 3],
                amplitude: [0.0, 15.0, 5.0],
                angular_frequency: [0.0, 0.3, 0.5],
                phase: [0.0; 3],
            },
        }
    }
}

impl TrajectoryConfig {
    pub fn bob_spec(&self) -> TrajectorySpec {
        TrajectorySpec { kind: self.bob.clone(), slots: self.slots, dt: self.dt }
    }

    pub fn eve_spec(&self) -> TrajectorySpec {
        TrajectorySpec { kind: self.eve.clone(), slots: self.slots, dt: self.dt }
    }
}

/// Window slicing; lengths come from the model section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub stride: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self { stride: 1, train_fraction: f.train, val_fraction: f.val }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub swarm: SwarmSettings,
    pub trajectories: TrajectoryConfig,
    pub windows: WindowConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenario: ScenarioConfig::default(),
            swarm: SwarmSettings::default(),
            trajectories: TrajectoryConfig::default(),
            windows: WindowConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn build_dataset(&self, on_slot: impl FnMut(&dataset::SlotRecord)) -> Result<Dataset, DatasetError> {
        dataset::build_dataset_with(
            &self.scenario,
            &self.trajectories.bob_spec(),
            &self.trajectories.eve_spec(),
            &self.swarm,
            self.seed,
            on_slot,
        )
    }

    pub fn split(&self) -> SplitFractions {
        SplitFractions { train: self.windows.train_fraction, val: self.windows.val_fraction }
    }

    pub fn windows(&self, ds: &Dataset) -> Result<WindowSet, DatasetError> {
        dataset::split_windows(ds, self.model.hist, self.model.pre, self.windows.stride, self.split())
    }
}
