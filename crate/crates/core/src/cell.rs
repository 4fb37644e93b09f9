//! Growth-division cell models and the population/tagged-cell comparison.
//!
//! Cells grow exponentially, `φ(ξ, t) = ξ e^{rt}`, and divide into two halves
//! at rate `l(ξ) = ξ^α`. Three PDMPs are built on this dynamic:
//!
//! * [`SingleCellModel`]: one cell, one daughter kept at each division;
//! * [`PopulationModel`]: the whole population as a point measure of sizes;
//! * [`TimeAugmentedPopulationModel`]: atoms `(size, clock)` where every
//!   cell carries the elapsed time, so time-dependent rewards are functions of
//!   the state.
//!
//! The reward on the time-augmented population is
//! `g(Σ δ_{(x_i, t)}) = e^{-rt} Σ f(x_i)` with
//! `f(y) = (y - γ) 1{y < γ} + γ = min(y, γ)`. This choice of `f` is the one
//! for which the one-jump reward after a division at `T_1` of cell `I_1`
//! reads
//!
//! ```text
//! e^{-rT_1} [ Σ_{i≠I_1} (x_i e^{rT_1} - γ) 1{x_i < γ e^{-rT_1}}
//!             + (x_{I_1} e^{rT_1} - 2γ) 1{x_{I_1} < 2γ e^{-rT_1}} + (n+1)γ ]
//! ```
//!
//! term by term: the split cell contributes `2 f(x e^{rT_1}/2)`, hence the
//! doubled cap. [`closed_form_v0`] is that expression and is tested against
//! [`CellReward`] applied to the constructed post-jump state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pdmp::{
    simulate, state_at, JumpOutcome, KernelForm, Numerics, PdmpError, PdmpModel, StopRule,
};
use crate::point_measure::{HybridState, MeasureError, Mode, PointMeasure, LOCATION_REL_TOL};
use crate::quadrature::{cumulative_on_grid, QuadratureError, QuadratureOptions};
use crate::rng::RngStream;
use crate::solver::{uniform_grid, McEstimate, Reward, SolverConfig, SolverError, TimeHorizon};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("cell parameter {name} must be positive and finite, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("cells carry different clocks ({0} and {1})")]
    MixedClocks(f64, f64),
    #[error("expected atoms of dimension {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("cell sizes must be positive, got {0}")]
    InvalidSize(f64),
    #[error("split index {index} out of range for {len} cells")]
    SplitOutOfRange { index: usize, len: usize },
    #[error("population is empty")]
    EmptyPopulation,
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Pdmp(#[from] PdmpError),
    #[error("replication count must be at least 2, got {0}")]
    TooFewReplications(usize),
}

impl From<CellError> for SolverError {
    fn from(e: CellError) -> Self {
        SolverError::Reward(e.to_string())
    }
}

/// Growth rate `r`, division exponent `α` and reward cap `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellParams {
    pub r: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for CellParams {
    fn default() -> Self {
        Self {
            r: 2.0,
            alpha: 1.0,
            gamma: 1.0,
        }
    }
}

impl CellParams {
    pub fn new(r: f64, alpha: f64, gamma: f64) -> Result<Self, CellError> {
        let p = Self { r, alpha, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CellError> {
        for (name, value) in [("r", self.r), ("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(CellError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    pub fn division_rate(&self, size: f64) -> f64 {
        size.powf(self.alpha)
    }

    pub fn grow(&self, size: f64, t: f64) -> f64 {
        size * (self.r * t).exp()
    }

    /// `∫_0^t l(ξ e^{rs}) ds = l(ξ) (e^{rαt} - 1) / (αr)` times `rate_sum`.
    pub fn hazard(&self, rate_sum: f64, t: f64) -> f64 {
        let ra = self.r * self.alpha;
        rate_sum * (ra * t).exp_m1() / ra
    }

    /// Inverse of `t ↦ exp(-hazard(rate_sum, t))` at `u`.
    pub fn jump_time(&self, rate_sum: f64, u: f64) -> f64 {
        if rate_sum == 0.0 {
            return f64::INFINITY;
        }
        let ra = self.r * self.alpha;
        (ra * -u.ln() / rate_sum).ln_1p() / ra
    }

    /// `f(y) = (y - γ) 1{y < γ} + γ`.
    pub fn f(&self, y: f64) -> f64 {
        if y < self.gamma {
            (y - self.gamma) + self.gamma
        } else {
            self.gamma
        }
    }
}

const SINGLE_MODE: [Mode; 1] = [Mode(0)];

fn rate_sum(params: &CellParams, measure: &PointMeasure) -> f64 {
    measure.integrate(|loc| params.division_rate(loc[0]))
}

/// Outcomes `ζ - δ_{x_j} + 2 δ_{x_j/2}` with probability `l(x_j) / Σ l(x_i)`;
/// coordinates past the first (the clock) are copied to the daughters.
fn division_outcomes(params: &CellParams, y: &HybridState) -> Vec<JumpOutcome> {
    let total = rate_sum(params, &y.measure);
    y.measure
        .atoms()
        .iter()
        .enumerate()
        .map(|(j, atom)| {
            let mut daughter = atom.location().to_vec();
            daughter[0] *= 0.5;
            let measure = y
                .measure
                .replace_one(j, daughter, 2)
                .expect("index and dimension come from the measure itself");
            JumpOutcome {
                state: HybridState::new(y.mode, measure),
                probability: f64::from(atom.multiplicity()) * params.division_rate(atom.location()[0])
                    / total,
            }
        })
        .collect()
}

/// One cell of size `ξ`, encoded as `δ_ξ`; division keeps one half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleCellModel {
    pub params: CellParams,
}

impl SingleCellModel {
    pub fn new(params: CellParams) -> Self {
        Self { params }
    }

    pub fn state(&self, size: f64) -> Result<HybridState, CellError> {
        if !(size > 0.0) {
            return Err(CellError::InvalidSize(size));
        }
        Ok(HybridState::new(Mode(0), PointMeasure::dirac(vec![size])?))
    }
}

impl PdmpModel for SingleCellModel {
    fn modes(&self) -> &[Mode] {
        &SINGLE_MODE
    }

    fn flow(&self, x: &HybridState, t: f64) -> HybridState {
        let p = self.params;
        HybridState::new(x.mode, x.measure.map_locations(|loc| vec![p.grow(loc[0], t)]))
    }

    fn intensity(&self, x: &HybridState) -> f64 {
        rate_sum(&self.params, &x.measure)
    }

    fn kernel_form(&self) -> KernelForm {
        KernelForm::Enumerable
    }

    fn jump_outcomes(&self, y: &HybridState) -> Option<Vec<JumpOutcome>> {
        let halved = y.measure.map_locations(|loc| vec![0.5 * loc[0]]);
        Some(vec![JumpOutcome {
            state: HybridState::new(y.mode, halved),
            probability: 1.0,
        }])
    }

    fn closed_form_hazard(&self, x: &HybridState, t: f64) -> Option<f64> {
        Some(self.params.hazard(rate_sum(&self.params, &x.measure), t))
    }

    fn closed_form_jump_time(&self, x: &HybridState, u: f64) -> Option<f64> {
        Some(self.params.jump_time(rate_sum(&self.params, &x.measure), u))
    }
}

/// Whole population as a point measure of cell sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationModel {
    pub params: CellParams,
}

impl PopulationModel {
    pub fn new(params: CellParams) -> Self {
        Self { params }
    }

    pub fn state(&self, sizes: &[f64]) -> Result<HybridState, CellError> {
        if let Some(&bad) = sizes.iter().find(|&&s| !(s > 0.0)) {
            return Err(CellError::InvalidSize(bad));
        }
        let measure = PointMeasure::from_points(sizes.iter().map(|&s| vec![s]))?;
        Ok(HybridState::new(Mode(0), measure))
    }
}

impl PdmpModel for PopulationModel {
    fn modes(&self) -> &[Mode] {
        &SINGLE_MODE
    }

    fn flow(&self, x: &HybridState, t: f64) -> HybridState {
        let p = self.params;
        HybridState::new(x.mode, x.measure.map_locations(|loc| vec![p.grow(loc[0], t)]))
    }

    fn intensity(&self, x: &HybridState) -> f64 {
        rate_sum(&self.params, &x.measure)
    }

    fn kernel_form(&self) -> KernelForm {
        KernelForm::Enumerable
    }

    fn jump_outcomes(&self, y: &HybridState) -> Option<Vec<JumpOutcome>> {
        Some(division_outcomes(&self.params, y))
    }

    fn closed_form_hazard(&self, x: &HybridState, t: f64) -> Option<f64> {
        Some(self.params.hazard(rate_sum(&self.params, &x.measure), t))
    }

    fn closed_form_jump_time(&self, x: &HybridState, u: f64) -> Option<f64> {
        Some(self.params.jump_time(rate_sum(&self.params, &x.measure), u))
    }
}

/// Population with atoms `(size, clock)`; the flow advances every clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeAugmentedPopulationModel {
    pub params: CellParams,
}

impl TimeAugmentedPopulationModel {
    pub fn new(params: CellParams) -> Self {
        Self { params }
    }

    /// `Σ δ_{(x_i, clock)}`.
    pub fn state(&self, sizes: &[f64], clock: f64) -> Result<HybridState, CellError> {
        if let Some(&bad) = sizes.iter().find(|&&s| !(s > 0.0)) {
            return Err(CellError::InvalidSize(bad));
        }
        let measure = PointMeasure::from_points(sizes.iter().map(|&s| vec![s, clock]))?;
        Ok(HybridState::new(Mode(0), measure))
    }
}

impl PdmpModel for TimeAugmentedPopulationModel {
    fn modes(&self) -> &[Mode] {
        &SINGLE_MODE
    }

    fn flow(&self, x: &HybridState, t: f64) -> HybridState {
        let p = self.params;
        HybridState::new(
            x.mode,
            x.measure.map_locations(|loc| vec![p.grow(loc[0], t), loc[1] + t]),
        )
    }

    fn intensity(&self, x: &HybridState) -> f64 {
        rate_sum(&self.params, &x.measure)
    }

    fn kernel_form(&self) -> KernelForm {
        KernelForm::Enumerable
    }

    fn jump_outcomes(&self, y: &HybridState) -> Option<Vec<JumpOutcome>> {
        Some(division_outcomes(&self.params, y))
    }

    fn closed_form_hazard(&self, x: &HybridState, t: f64) -> Option<f64> {
        Some(self.params.hazard(rate_sum(&self.params, &x.measure), t))
    }

    fn closed_form_jump_time(&self, x: &HybridState, u: f64) -> Option<f64> {
        Some(self.params.jump_time(rate_sum(&self.params, &x.measure), u))
    }
}

/// Common clock of a time-augmented population.
pub fn common_clock(measure: &PointMeasure) -> Result<f64, CellError> {
    let mut clock: Option<f64> = None;
    for atom in measure.atoms() {
        let loc = atom.location();
        if loc.len() != 2 {
            return Err(CellError::Dimension {
                expected: 2,
                found: loc.len(),
            });
        }
        match clock {
            None => clock = Some(loc[1]),
            Some(c) => {
                let close = c == loc[1] || (c - loc[1]).abs() <= LOCATION_REL_TOL * c.abs().max(loc[1].abs());
                if !close {
                    return Err(CellError::MixedClocks(c, loc[1]));
                }
            }
        }
    }
    clock.ok_or(CellError::EmptyPopulation)
}

/// `g(Σ δ_{(x_i, t)}) = e^{-rt} Σ f(x_i)` on the time-augmented population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellReward {
    pub params: CellParams,
}

impl CellReward {
    pub fn new(params: CellParams) -> Self {
        Self { params }
    }

    pub fn value(&self, x: &HybridState) -> Result<f64, CellError> {
        if x.measure.is_empty() {
            return Ok(0.0);
        }
        let clock = common_clock(&x.measure)?;
        let p = self.params;
        Ok((-p.r * clock).exp() * x.measure.integrate(|loc| p.f(loc[0])))
    }
}

impl Reward for CellReward {
    fn evaluate(&self, x: &HybridState) -> Result<f64, SolverError> {
        Ok(self.value(x)?)
    }

    /// `f ≤ γ`, at most one extra cell per jump and the clock only grows.
    fn bound(&self, x: &HybridState, jumps: usize) -> f64 {
        let clock = common_clock(&x.measure).unwrap_or(0.0).max(0.0);
        self.params.gamma * (x.measure.total_mass() + jumps as u64) as f64 * (-self.params.r * clock).exp()
    }
}

/// Time-augmented state reached from `Σ δ_{(x_i, 0)}` when cell `split`
/// divides at time `t1`.
pub fn post_division_state(
    sizes: &[f64],
    split: usize,
    t1: f64,
    params: &CellParams,
) -> Result<HybridState, CellError> {
    if split >= sizes.len() {
        return Err(CellError::SplitOutOfRange {
            index: split,
            len: sizes.len(),
        });
    }
    let mut atoms: Vec<(Vec<f64>, u32)> = Vec::with_capacity(sizes.len() + 1);
    for (i, &x) in sizes.iter().enumerate() {
        if !(x > 0.0) {
            return Err(CellError::InvalidSize(x));
        }
        let grown = params.grow(x, t1);
        if i == split {
            atoms.push((vec![0.5 * grown, t1], 2));
        } else {
            atoms.push((vec![grown, t1], 1));
        }
    }
    Ok(HybridState::new(Mode(0), PointMeasure::new(atoms)?))
}

/// Reward right after the first division, written out term by term.
pub fn closed_form_v0(sizes: &[f64], split: usize, t1: f64, params: &CellParams) -> Result<f64, CellError> {
    if split >= sizes.len() {
        return Err(CellError::SplitOutOfRange {
            index: split,
            len: sizes.len(),
        });
    }
    let CellParams { r, gamma, .. } = *params;
    let n = sizes.len() as f64;
    let growth = (r * t1).exp();
    let decay = (-r * t1).exp();
    let mut bracket = (n + 1.0) * gamma;
    for (i, &x) in sizes.iter().enumerate() {
        if i == split {
            if x < 2.0 * gamma * decay {
                bracket += x * growth - 2.0 * gamma;
            }
        } else if x < gamma * decay {
            bracket += x * growth - gamma;
        }
    }
    Ok(decay * bracket)
}

/// Value computed on the time grid from explicit formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridValue {
    pub value: f64,
    pub arg_sup: f64,
    pub sup_j: f64,
    /// Expected reward when waiting for the first jump.
    pub k_value: f64,
    pub horizon: f64,
    /// `F(x, horizon)`: probability of no jump before the horizon.
    pub tail_probability: f64,
}

fn validate_sizes(sizes: &[f64]) -> Result<(), CellError> {
    if sizes.is_empty() {
        return Err(CellError::EmptyPopulation);
    }
    if let Some(&bad) = sizes.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(CellError::InvalidSize(bad));
    }
    Ok(())
}

fn grid_horizon(rate_sum: f64, params: &CellParams, config: &SolverConfig) -> f64 {
    match config.t_max {
        TimeHorizon::Fixed(t) => t,
        TimeHorizon::Auto { survival_floor, cap } => params.jump_time(rate_sum, survival_floor).min(cap),
    }
}

fn grid_value<J, S>(
    horizon: f64,
    rate_sum: f64,
    params: &CellParams,
    config: &SolverConfig,
    jump_reward: J,
    stop_reward: S,
) -> Result<GridValue, CellError>
where
    J: Fn(f64) -> f64,
    S: Fn(f64) -> f64,
{
    let times = uniform_grid(horizon, config.nbpt);
    let survival = |t: f64| (-params.hazard(rate_sum, t)).exp();
    let density = |s: f64| rate_sum * (params.r * params.alpha * s).exp() * survival(s);
    let opts = QuadratureOptions {
        abs_tol: config.quad_tol,
        ..QuadratureOptions::default()
    };
    let jumped = cumulative_on_grid(|s| density(s) * jump_reward(s), &times, &opts)?;
    let mut best = 0;
    let mut j_values = Vec::with_capacity(times.len());
    for (k, (&t, &e)) in times.iter().zip(&jumped).enumerate() {
        let j = e + stop_reward(t) * survival(t);
        if k > 0 && j > j_values[best] {
            best = k;
        }
        j_values.push(j);
    }
    let k_value = *jumped.last().expect("grid is non-empty");
    let sup_j = j_values[best];
    Ok(GridValue {
        value: sup_j.max(k_value),
        arg_sup: times[best],
        sup_j,
        k_value,
        horizon,
        tail_probability: survival(horizon),
    })
}

/// One-jump population value from `Σ δ_{(x_i, 0)}`: the supremum over the
/// grid of
///
/// `E[V_0(Z_1) 1{T_1 ≤ t}] + e^{-rt} (Σ f(x_i e^{rt})) P(T_1 > t)`
///
/// maxed with `E[V_0(Z_1)]`. The expectation over `(T_1, I_1)` integrates
/// the density of `T_1` and enumerates `P(I_1 = j) = x_j^α / Σ x_i^α`.
pub fn closed_form_v1(sizes: &[f64], params: &CellParams, config: &SolverConfig) -> Result<GridValue, CellError> {
    validate_sizes(sizes)?;
    params.validate()?;
    let rates: Vec<f64> = sizes.iter().map(|&x| params.division_rate(x)).collect();
    let total: f64 = rates.iter().sum();
    let horizon = grid_horizon(total, params, config);
    let CellParams { r, gamma, .. } = *params;
    let n = sizes.len() as f64;
    let jump_reward = |s: f64| {
        rates
            .iter()
            .enumerate()
            .map(|(j, &rate)| {
                rate / total * closed_form_v0(sizes, j, s, params).expect("split index in range")
            })
            .sum::<f64>()
    };
    let stop_reward = |t: f64| {
        let decay = (-r * t).exp();
        let mut bracket = n * gamma;
        for &x in sizes {
            if x < gamma * decay {
                bracket += x * (r * t).exp() - gamma;
            }
        }
        decay * bracket
    };
    grid_value(horizon, total, params, config, jump_reward, stop_reward)
}

/// [`closed_form_v1`] with the expectation over `(T_1, I_1)` replaced by the
/// empirical mean over `m` simulated first divisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloValue {
    pub value: f64,
    pub arg_sup: f64,
    /// Waiting for the first division beats every grid time.
    pub wait_for_jump: bool,
    /// Sample mean and standard error of the selected branch.
    pub estimate: McEstimate,
}

pub fn population_v1_monte_carlo(
    sizes: &[f64],
    params: &CellParams,
    config: &SolverConfig,
    m: usize,
    base: RngStream,
) -> Result<MonteCarloValue, CellError> {
    use rayon::prelude::*;
    validate_sizes(sizes)?;
    params.validate()?;
    if m < 2 {
        return Err(CellError::TooFewReplications(m));
    }
    let model = TimeAugmentedPopulationModel::new(*params);
    let reward = CellReward::new(*params);
    let x = model.state(sizes, 0.0)?;
    let num = config.numerics();
    let draws = (0..m as u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64), CellError> {
            let traj = simulate(&model, &x, StopRule::Jumps(1), base.substream(i), &num)?;
            let first = &traj.jumps[0];
            Ok((first.s, reward.value(&first.z)?))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let rate_sum: f64 = sizes.iter().map(|&s| params.division_rate(s)).sum();
    let times = uniform_grid(grid_horizon(rate_sum, params, config), config.nbpt);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| draws[a].0.total_cmp(&draws[b].0));

    let mut next = 0;
    let mut jumped_sum = 0.0;
    let mut best = (0, f64::NEG_INFINITY, 0.0);
    for (k, &t) in times.iter().enumerate() {
        while next < m && draws[order[next]].0 <= t {
            jumped_sum += draws[order[next]].1;
            next += 1;
        }
        let stop = reward.value(&model.flow(&x, t))?;
        let j = (jumped_sum + (m - next) as f64 * stop) / m as f64;
        if j > best.1 {
            best = (k, j, stop);
        }
    }
    let (k, sup_j, stop) = best;
    let waited: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let wait = McEstimate::from_samples(&waited);
    if wait.mean > sup_j {
        return Ok(MonteCarloValue {
            value: wait.mean,
            arg_sup: times[k],
            wait_for_jump: true,
            estimate: wait,
        });
    }
    let t = times[k];
    let stopped: Vec<f64> = draws.iter().map(|&(s, v)| if s <= t { v } else { stop }).collect();
    let estimate = McEstimate::from_samples(&stopped);
    Ok(MonteCarloValue {
        value: estimate.mean,
        arg_sup: t,
        wait_for_jump: false,
        estimate,
    })
}

/// Tagged-cell value functions: `V̂_0 = f` and `V̂_1(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggedValues {
    pub params: CellParams,
    pub size: f64,
    pub v1: GridValue,
}

impl TaggedValues {
    pub fn v0(&self, y: f64) -> f64 {
        self.params.f(y)
    }
}

/// `V̂_1(x) = sup_t { [(x e^{rt} - γ) 1{x e^{rt} < γ} + γ] P(T_1 > t)
///   + E[((x e^{rT_1}/2 - γ) 1{x e^{rT_1} < 2γ} + γ) 1{T_1 ≤ t}] } ∨ E[V̂_0(Z_1)]`
/// for a single cell of size `x`, undiscounted.
pub fn tagged_value_functions(x: f64, params: &CellParams, config: &SolverConfig) -> Result<TaggedValues, CellError> {
    validate_sizes(&[x])?;
    params.validate()?;
    let rate = params.division_rate(x);
    let horizon = grid_horizon(rate, params, config);
    let CellParams { r, gamma, .. } = *params;
    let jump_reward = |s: f64| {
        let grown = x * (r * s).exp();
        let mut v = gamma;
        if grown < 2.0 * gamma {
            v += grown / 2.0 - gamma;
        }
        v
    };
    let stop_reward = |t: f64| {
        let grown = x * (r * t).exp();
        let mut v = gamma;
        if grown < gamma {
            v += grown - gamma;
        }
        v
    };
    let v1 = grid_value(horizon, rate, params, config, jump_reward, stop_reward)?;
    Ok(TaggedValues {
        params: *params,
        size: x,
        v1,
    })
}

/// Exact `V̂_1(x)` where the indicator analysis settles it: for `x ≥ 2γ`
/// the cell never falls below the cap, so every term equals `γ`.
pub fn tagged_value_analytic(x: f64, params: &CellParams) -> Option<f64> {
    (x >= 2.0 * params.gamma).then_some(params.gamma)
}

/// Monte Carlo estimate of `E_x[e^{-rt} X_t(h)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalEstimate {
    pub estimate: McEstimate,
    /// Replications dropped because the trajectory was truncated before `t`.
    pub excluded: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn population_functional_estimate<M, H>(
    model: &M,
    x0: &HybridState,
    h: H,
    discount_rate: f64,
    t: f64,
    m: usize,
    base: RngStream,
    num: &Numerics,
) -> Result<FunctionalEstimate, CellError>
where
    M: PdmpModel + ?Sized,
    H: Fn(&[f64]) -> f64 + Sync,
{
    use rayon::prelude::*;
    if m < 2 {
        return Err(CellError::TooFewReplications(m));
    }
    let discount = (-discount_rate * t).exp();
    let draws = (0..m as u64)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>, CellError> {
            let traj = simulate(model, x0, StopRule::Horizon(t), base.substream(i), num)?;
            if traj.truncated {
                return Ok(None);
            }
            let state = state_at(&traj, model, t)?;
            Ok(Some(discount * state.measure.integrate(&h)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let kept: Vec<f64> = draws.iter().filter_map(|d| *d).collect();
    let excluded = m - kept.len();
    if excluded > 0 {
        log::warn!("{excluded} of {m} replications were truncated before t = {t} and excluded");
    }
    Ok(FunctionalEstimate {
        estimate: McEstimate::from_samples(&kept),
        excluded,
    })
}
