//! Experiment configuration: one JSON document plus command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mvpdmp::cell::{CellParams, CellReward, PopulationModel, SingleCellModel, TimeAugmentedPopulationModel};
use mvpdmp::pdmp::StopRule;
use mvpdmp::solver::{ConstantReward, Reward, TimeHorizon};
use mvpdmp::synthetic::ConstantRateModel;
use mvpdmp::{HybridState, PdmpModel, SolverConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SingleCell,
    Population,
    PopulationTimeAugmented,
    /// Frozen synthetic model with `λ ≡ 0`.
    NoJump,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `e^{-rt} Σ f(x_i)` on the time-augmented population.
    Cell,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub params: CellParams,
    /// Initial cell sizes; repeated sizes give multiplicities.
    pub initial: Vec<f64>,
    /// Common clock of the initial cells (time-augmented model only).
    pub clock: f64,
    pub reward: RewardKind,
    pub solver: SolverConfig,
    /// Number of jumps `n` bounding the stopping times.
    pub horizon: usize,
    pub epsilon: f64,
    pub mc_samples: usize,
    pub seed: u64,
    /// Stop rule for `simulate`.
    pub simulate: StopRule,
    /// Number of trajectories written by `simulate`.
    pub paths: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::PopulationTimeAugmented,
            params: CellParams::default(),
            initial: vec![3.0],
            clock: 0.0,
            reward: RewardKind::Cell,
            solver: SolverConfig::default(),
            horizon: 1,
            epsilon: 0.05,
            mc_samples: 100_000,
            seed: 1,
            simulate: StopRule::Jumps(1),
            paths: 1,
        }
    }
}

/// Command-line values that replace fields of the file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub nbpt: Option<usize>,
    pub tmax: Option<f64>,
    pub epsilon: Option<f64>,
    pub horizon: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(samples) = o.samples {
            self.mc_samples = samples;
        }
        if let Some(nbpt) = o.nbpt {
            self.solver.nbpt = nbpt;
        }
        if let Some(t) = o.tmax {
            self.solver.t_max = TimeHorizon::Fixed(t);
        }
        if let Some(eps) = o.epsilon {
            self.epsilon = eps;
        }
        if let Some(n) = o.horizon {
            self.horizon = n;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.params.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.solver.validate()?;
        if self.mc_samples < 2 {
            return bad(format!("mc_samples must be at least 2, got {}", self.mc_samples));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.initial.is_empty() {
            return bad("initial population is empty".into());
        }
        if let Some(s) = self.initial.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return bad(format!("initial sizes must be positive, got {s}"));
        }
        if !(self.clock >= 0.0 && self.clock.is_finite()) {
            return bad(format!("clock must be nonnegative, got {}", self.clock));
        }
        if self.model == ModelKind::SingleCell && self.initial.len() != 1 {
            return bad(format!("single_cell needs one initial size, got {}", self.initial.len()));
        }
        if self.reward == RewardKind::Cell && self.model != ModelKind::PopulationTimeAugmented {
            return bad("the cell reward needs the population_time_augmented model".into());
        }
        if let RewardKind::Constant(c) = self.reward {
            if !(c >= 0.0 && c.is_finite()) {
                return bad(format!("constant reward must be nonnegative, got {c}"));
            }
        }
        if self.paths == 0 {
            return bad("paths must be at least 1".into());
        }
        if let StopRule::Horizon(t) = self.simulate {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("simulation horizon must be nonnegative, got {t}"));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Box<dyn PdmpModel> {
        match self.model {
            ModelKind::SingleCell => Box::new(SingleCellModel::new(self.params)),
            ModelKind::Population => Box::new(PopulationModel::new(self.params)),
            ModelKind::PopulationTimeAugmented => Box::new(TimeAugmentedPopulationModel::new(self.params)),
            ModelKind::NoJump => Box::new(ConstantRateModel::frozen()),
        }
    }

    pub fn initial_state(&self) -> Result<HybridState, CliError> {
        let state = match self.model {
            ModelKind::SingleCell => SingleCellModel::new(self.params).state(self.initial[0])?,
            ModelKind::Population | ModelKind::NoJump => PopulationModel::new(self.params).state(&self.initial)?,
            ModelKind::PopulationTimeAugmented => {
                TimeAugmentedPopulationModel::new(self.params).state(&self.initial, self.clock)?
            }
        };
        Ok(state)
    }

    pub fn reward(&self) -> Box<dyn Reward> {
        match self.reward {
            RewardKind::Cell => Box::new(CellReward::new(self.params)),
            RewardKind::Constant(c) => Box::new(ConstantReward(c)),
        }
    }
}
