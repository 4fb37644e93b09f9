//! Measure-valued PDMPs: local characteristics and exact simulation.
//!
//! A model is given by its flow `Φ`, jump intensity `λ`, jump kernel `Q` and
//! exit time `t*`. Paths are generated from a single stream of uniforms
//! `U_1, U_2, ...`: odd draws invert the survivor function
//!
//! ```text
//! F(x, t) = 1{t < t*(x)} exp(-Λ(x, t)),   Λ(x, t) = ∫_0^t λ(Φ(x, s)) ds
//! ```
//!
//! to produce inter-jump times, even draws select the post-jump location.
//! The embedded chain `(Z_n, S_n)` carries all the randomness of the path and
//! the continuous-time process is reconstructed from it with [`state_at`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::point_measure::{HybridState, Mode};
use crate::quadrature::{adaptive_simpson, QuadratureError, QuadratureOptions};
use crate::rng::{RngStream, UniformSource};

pub const DEFAULT_MAX_JUMPS: usize = 1_000_000;

/// Jump-time search gives up (and reports `+∞`) past this time.
const JUMP_SEARCH_CAP: f64 = 1e18;

/// Probabilities of an enumerated kernel must sum to one within this.
const KERNEL_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdmpError {
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("uniform variate {0} is outside (0, 1)")]
    InvalidUniform(f64),
    #[error("time {0} must be nonnegative")]
    NegativeTime(f64),
    #[error("jump kernel has no outcomes at {0}")]
    EmptyKernel(String),
    #[error("jump kernel returned its input state {0}")]
    NoMoveJump(String),
    #[error("jump kernel probabilities are invalid (sum {sum}, min {min})")]
    InvalidKernel { sum: f64, min: f64 },
    #[error("model provides no usable jump kernel at {0}")]
    KernelUnavailable(String),
    #[error("mode {0:?} is not declared by the model")]
    UnknownMode(Mode),
    #[error("requested {requested} jumps but the model allows at most {max}")]
    TooManyJumps { requested: usize, max: usize },
    #[error("time {t} lies beyond the trajectory coverage {covered}")]
    OutOfCoverage { t: f64, covered: f64 },
    #[error("invalid model state: {0}")]
    Model(String),
}

/// Which representation of the jump kernel a model provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    /// Finite list of outcomes with probabilities.
    Enumerable,
    /// Only a sampler `(y, u) ↦ Ψ_2(y, u)`.
    Sampler,
    Both,
}

impl KernelForm {
    pub fn enumerable(self) -> bool {
        matches!(self, KernelForm::Enumerable | KernelForm::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpOutcome {
    pub state: HybridState,
    pub probability: f64,
}

/// Local characteristics `(Φ, λ, Q, t*)` of a PDMP on a hybrid state space.
///
/// Implementations must keep the mode under the flow, satisfy the semigroup
/// law `Φ(Φ(x, s), t) = Φ(x, s + t)` and never jump to the pre-jump state.
pub trait PdmpModel: Send + Sync {
    fn modes(&self) -> &[Mode];

    fn flow(&self, x: &HybridState, t: f64) -> HybridState;

    fn intensity(&self, x: &HybridState) -> f64;

    /// Time for the flow from `x` to reach the boundary, `+∞` if never.
    fn exit_time(&self, _x: &HybridState) -> f64 {
        f64::INFINITY
    }

    fn kernel_form(&self) -> KernelForm;

    /// Outcomes of `Q(y, ·)` in a fixed order, for enumerable kernels.
    fn jump_outcomes(&self, _y: &HybridState) -> Option<Vec<JumpOutcome>> {
        None
    }

    /// `Ψ_2(y, u)`. The default inverts the enumerated outcome list.
    fn sample_jump(&self, y: &HybridState, u: f64) -> Option<HybridState> {
        let outcomes = self.jump_outcomes(y)?;
        inverse_transform(&outcomes, u).map(|o| o.state.clone())
    }

    /// Closed form of `Λ(x, t)` when the model knows one.
    fn closed_form_hazard(&self, _x: &HybridState, _t: f64) -> Option<f64> {
        None
    }

    /// Closed form of `Ψ_1(x, u)` when the model knows one.
    fn closed_form_jump_time(&self, _x: &HybridState, _u: f64) -> Option<f64> {
        None
    }

    /// Explosion guard on the number of simulated jumps.
    fn max_jumps(&self) -> usize {
        DEFAULT_MAX_JUMPS
    }
}

/// Picks the first outcome whose cumulative probability exceeds `u`.
pub fn inverse_transform(outcomes: &[JumpOutcome], u: f64) -> Option<&JumpOutcome> {
    let mut cumulative = 0.0;
    for o in outcomes {
        cumulative += o.probability;
        if u < cumulative {
            return Some(o);
        }
    }
    // rounding in the cumulative sum: fall back to the last positive outcome
    outcomes.iter().rev().find(|o| o.probability > 0.0)
}

/// Checks an enumerated kernel at `y`: nonnegative probabilities summing to
/// one and no outcome equal to `y`.
pub fn validate_outcomes(y: &HybridState, outcomes: &[JumpOutcome]) -> Result<(), PdmpError> {
    if outcomes.is_empty() {
        return Err(PdmpError::EmptyKernel(y.to_string()));
    }
    let sum: f64 = outcomes.iter().map(|o| o.probability).sum();
    let min = outcomes
        .iter()
        .map(|o| o.probability)
        .fold(f64::INFINITY, f64::min);
    if !(min >= 0.0) || (sum - 1.0).abs() > KERNEL_SUM_TOL {
        return Err(PdmpError::InvalidKernel { sum, min });
    }
    if outcomes.iter().any(|o| o.state == *y) {
        return Err(PdmpError::NoMoveJump(y.to_string()));
    }
    Ok(())
}

/// Numerical settings for hazard integration and jump-time inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Numerics {
    pub quadrature: QuadratureOptions,
    /// Absolute tolerance of the bisection on the survivor function.
    pub root_tol: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            quadrature: QuadratureOptions::default(),
            root_tol: 1e-10,
        }
    }
}

/// `∫_a^b λ(Φ(x, s)) ds` for `0 ≤ a ≤ b`.
pub fn hazard_between<M: PdmpModel + ?Sized>(
    model: &M,
    x: &HybridState,
    a: f64,
    b: f64,
    num: &Numerics,
) -> Result<f64, PdmpError> {
    if a == b {
        return Ok(0.0);
    }
    if let (Some(hb), Some(ha)) = (model.closed_form_hazard(x, b), model.closed_form_hazard(x, a)) {
        return Ok(hb - ha);
    }
    let r = adaptive_simpson(|s| model.intensity(&model.flow(x, s)), a, b, &num.quadrature)?;
    Ok(r.value.max(0.0))
}

/// `Λ(x, t)`, with `t` clipped to the exit time.
pub fn cumulative_hazard<M: PdmpModel + ?Sized>(
    model: &M,
    x: &HybridState,
    t: f64,
    num: &Numerics,
) -> Result<f64, PdmpError> {
    if t < 0.0 || t.is_nan() {
        return Err(PdmpError::NegativeTime(t));
    }
    let t = t.min(model.exit_time(x));
    if t == 0.0 {
        return Ok(0.0);
    }
    if let Some(h) = model.closed_form_hazard(x, t) {
        return Ok(h);
    }
    hazard_between(model, x, 0.0, t, num)
}

/// `F(x, t) = 1{t < t*(x)} exp(-Λ(x, t))`.
pub fn survivor<M: PdmpModel + ?Sized>(
    model: &M,
    x: &HybridState,
    t: f64,
    num: &Numerics,
) -> Result<f64, PdmpError> {
    if t < 0.0 || t.is_nan() {
        return Err(PdmpError::NegativeTime(t));
    }
    if t >= model.exit_time(x) {
        return Ok(0.0);
    }
    Ok((-cumulative_hazard(model, x, t, num)?).exp())
}

/// `Ψ_1(x, u) = inf{t ≥ 0 : F(x, t) ≤ u}`; `+∞` when the survivor function
/// never drops to `u`.
pub fn sample_jump_time<M: PdmpModel + ?Sized>(
    model: &M,
    x: &HybridState,
    u: f64,
    num: &Numerics,
) -> Result<f64, PdmpError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(PdmpError::InvalidUniform(u));
    }
    let target = -u.ln();
    let t_star = model.exit_time(x);

    if let Some(mut t) = model.closed_form_jump_time(x, u) {
        if t >= t_star {
            return Ok(t_star);
        }
        if t.is_finite() {
            // absorb rounding so that F(x, t) <= u holds exactly
            for _ in 0..64 {
                match model.closed_form_hazard(x, t) {
                    Some(h) if (-h).exp() > u => t = t.next_up(),
                    _ => break,
                }
            }
        }
        return Ok(t);
    }

    let mut lo = 0.0;
    let mut hazard_lo = 0.0;
    let mut hi = 1.0f64.min(t_star);
    loop {
        if hi >= t_star {
            let hazard_star = hazard_lo + hazard_between(model, x, lo, t_star, num)?;
            if hazard_star < target {
                // the flow reaches the boundary first: forced jump at t*
                return Ok(t_star);
            }
            hi = t_star;
            break;
        }
        let hazard_hi = hazard_lo + hazard_between(model, x, lo, hi, num)?;
        if hazard_hi >= target {
            break;
        }
        if hi > JUMP_SEARCH_CAP {
            return Ok(f64::INFINITY);
        }
        lo = hi;
        hazard_lo = hazard_hi;
        hi = (2.0 * hi).min(t_star);
    }

    while hi - lo > num.root_tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let hazard_mid = hazard_lo + hazard_between(model, x, lo, mid, num)?;
        if hazard_mid >= target {
            hi = mid;
        } else {
            lo = mid;
            hazard_lo = hazard_mid;
        }
    }
    Ok(hi)
}

/// `Ψ_2(y, u)` with kernel validation.
pub fn post_jump_from_uniform<M: PdmpModel + ?Sized>(
    model: &M,
    y: &HybridState,
    u: f64,
) -> Result<HybridState, PdmpError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(PdmpError::InvalidUniform(u));
    }
    let next = if model.kernel_form().enumerable() {
        let outcomes = model
            .jump_outcomes(y)
            .ok_or_else(|| PdmpError::KernelUnavailable(y.to_string()))?;
        validate_outcomes(y, &outcomes)?;
        inverse_transform(&outcomes, u)
            .map(|o| o.state.clone())
            .ok_or_else(|| PdmpError::EmptyKernel(y.to_string()))?
    } else {
        model
            .sample_jump(y, u)
            .ok_or_else(|| PdmpError::KernelUnavailable(y.to_string()))?
    };
    if next == *y {
        return Err(PdmpError::NoMoveJump(y.to_string()));
    }
    Ok(next)
}

/// Draws a post-jump location from `Q(y, ·)` using the next uniform.
pub fn sample_post_jump<M: PdmpModel + ?Sized>(
    model: &M,
    y: &HybridState,
    uniforms: &mut UniformSource,
) -> Result<HybridState, PdmpError> {
    let u = uniforms.next_uniform();
    post_jump_from_uniform(model, y, u)
}

/// One step of the embedded chain from `z`: `Some((S, Z))`, or `None` when no
/// further jump ever occurs.
pub fn next_jump<M: PdmpModel + ?Sized>(
    model: &M,
    z: &HybridState,
    uniforms: &mut UniformSource,
    num: &Numerics,
) -> Result<Option<(f64, HybridState)>, PdmpError> {
    let s = sample_jump_time(model, z, uniforms.next_uniform(), num)?;
    if !s.is_finite() {
        return Ok(None);
    }
    let pre_jump = model.flow(z, s);
    let next = sample_post_jump(model, &pre_jump, uniforms)?;
    Ok(Some((s, next)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop after this many jumps.
    Jumps(usize),
    /// Stop at this time horizon.
    Horizon(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    /// Inter-jump time `S_n`.
    pub s: f64,
    /// Post-jump state `Z_n`.
    pub z: HybridState,
}

/// Embedded chain of a simulated path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: HybridState,
    pub jumps: Vec<JumpRecord>,
    /// Set when the jump budget was exhausted before the stop rule was met.
    pub truncated: bool,
    /// The path is known on `[0, covered_until]`; `None` means for all times.
    pub covered_until: Option<f64>,
}

impl Trajectory {
    /// `T_1, T_2, ...` as running sums of the inter-jump times.
    pub fn jump_times(&self) -> Vec<f64> {
        let mut t = 0.0;
        self.jumps
            .iter()
            .map(|j| {
                t += j.s;
                t
            })
            .collect()
    }

    /// Post-jump state `Z_n`, with `Z_0` the initial state.
    pub fn post_jump_state(&self, n: usize) -> Option<&HybridState> {
        if n == 0 {
            Some(&self.initial)
        } else {
            self.jumps.get(n - 1).map(|j| &j.z)
        }
    }

    /// One row per `Z_n`: `n,t,mode,atoms` where atoms are written as
    /// `x1 x2 ...:multiplicity` joined by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,t,mode,atoms\n");
        let times = std::iter::once(0.0).chain(self.jump_times());
        for (n, t) in times.enumerate() {
            let z = self.post_jump_state(n).expect("index within jumps");
            let atoms: Vec<String> = z
                .measure
                .atoms()
                .iter()
                .map(|a| {
                    let loc: Vec<String> = a.location().iter().map(|c| c.to_string()).collect();
                    format!("{}:{}", loc.join(" "), a.multiplicity())
                })
                .collect();
            out.push_str(&format!("{n},{t},{},{}\n", z.mode.0, atoms.join(";")));
        }
        out
    }
}

/// Simulates the embedded chain from `x0` until the stop rule is met.
pub fn simulate<M: PdmpModel + ?Sized>(
    model: &M,
    x0: &HybridState,
    stop: StopRule,
    stream: RngStream,
    num: &Numerics,
) -> Result<Trajectory, PdmpError> {
    if !model.modes().contains(&x0.mode) {
        return Err(PdmpError::UnknownMode(x0.mode));
    }
    let max_jumps = model.max_jumps();
    let (jump_limit, horizon) = match stop {
        StopRule::Jumps(n) => {
            if n > max_jumps {
                return Err(PdmpError::TooManyJumps {
                    requested: n,
                    max: max_jumps,
                });
            }
            (n, f64::INFINITY)
        }
        StopRule::Horizon(t) => {
            if !(t >= 0.0) {
                return Err(PdmpError::NegativeTime(t));
            }
            (max_jumps, t)
        }
    };

    let mut uniforms = stream.open();
    let mut jumps = Vec::new();
    let mut current = x0.clone();
    let mut elapsed = 0.0;
    let mut exhausted = false;
    while jumps.len() < jump_limit {
        match next_jump(model, &current, &mut uniforms, num)? {
            Some((s, z)) if elapsed + s <= horizon => {
                elapsed += s;
                current = z.clone();
                jumps.push(JumpRecord { s, z });
            }
            _ => {
                exhausted = true;
                break;
            }
        }
    }

    let truncated = matches!(stop, StopRule::Horizon(_)) && !exhausted;
    let covered_until = match stop {
        _ if truncated => {
            log::warn!(
                "trajectory hit the jump budget of {max_jumps} before time {horizon}; truncated at {elapsed}"
            );
            Some(elapsed)
        }
        StopRule::Horizon(t) => Some(t),
        StopRule::Jumps(_) if exhausted => None,
        StopRule::Jumps(_) => Some(elapsed),
    };
    Ok(Trajectory {
        initial: x0.clone(),
        jumps,
        truncated,
        covered_until,
    })
}

/// `X_t = Φ(Z_n, t - T_n)` for `T_n ≤ t < T_{n+1}`.
pub fn state_at<M: PdmpModel + ?Sized>(
    trajectory: &Trajectory,
    model: &M,
    t: f64,
) -> Result<HybridState, PdmpError> {
    if t < 0.0 || t.is_nan() {
        return Err(PdmpError::NegativeTime(t));
    }
    if let Some(covered) = trajectory.covered_until {
        if t > covered {
            return Err(PdmpError::OutOfCoverage { t, covered });
        }
    }
    let mut n = 0;
    let mut last_jump = 0.0;
    for (k, tk) in trajectory.jump_times().into_iter().enumerate() {
        if tk <= t {
            n = k + 1;
            last_jump = tk;
        } else {
            break;
        }
    }
    let z = trajectory.post_jump_state(n).expect("n bounded by jump count");
    if t == last_jump {
        Ok(z.clone())
    } else {
        Ok(model.flow(z, t - last_jump))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{CellParams, PopulationModel, SingleCellModel, TimeAugmentedPopulationModel};
    use crate::point_measure::PointMeasure;
    use crate::synthetic::{ConstantRateModel, FiniteExitModel, GenericOnly};

    const LN2_HALF: f64 = std::f64::consts::LN_2 / 2.0;

    fn pop() -> PopulationModel {
        PopulationModel::new(CellParams::default())
    }

    fn delta(x: f64) -> HybridState {
        HybridState::new(Mode(0), PointMeasure::dirac(vec![x]).unwrap())
    }

    #[test]
    fn hazard_examples() {
        let num = Numerics::default();
        let x = delta(3.0);
        assert_eq!(cumulative_hazard(&pop(), &x, 0.0, &num).unwrap(), 0.0);
        // closed form 3 (e^{2t} - 1) / 2 at t = ln 2 / 2
        let closed = cumulative_hazard(&pop(), &x, LN2_HALF, &num).unwrap();
        assert!((closed - 1.5).abs() < 1e-14);
        let generic = cumulative_hazard(&GenericOnly::new(pop()), &x, LN2_HALF, &num).unwrap();
        assert!((generic - 1.5).abs() < 1e-10);
        let constant = ConstantRateModel { rate: 0.7, drift: 1.0 };
        let c = cumulative_hazard(&GenericOnly::new(constant), &x, 2.0, &num).unwrap();
        assert!((c - 1.4).abs() < 1e-12);
        assert!(cumulative_hazard(&pop(), &x, -1.0, &num).is_err());
    }

    #[test]
    fn survivor_examples() {
        let num = Numerics::default();
        let x = delta(3.0);
        assert_eq!(survivor(&pop(), &x, 0.0, &num).unwrap(), 1.0);
        let f = survivor(&pop(), &x, LN2_HALF, &num).unwrap();
        assert!((f - 0.223_130_160_148_429_83).abs() < 1e-14);
        let wall = FiniteExitModel { wall: 2.0, rate: 0.5, reset: 0.0 };
        let at_zero = delta(0.0);
        assert_eq!(survivor(&wall, &at_zero, 2.0, &num).unwrap(), 0.0);
        assert_eq!(survivor(&wall, &at_zero, 5.0, &num).unwrap(), 0.0);
        assert!(survivor(&wall, &at_zero, 1.9, &num).unwrap() > 0.0);
    }

    #[test]
    fn jump_time_inversion_examples() {
        let num = Numerics::default();
        let x = delta(3.0);
        // u = exp(-3 (e^2 - 1) / 2) inverts to t = 1
        let u = (-3.0 * (2f64.exp() - 1.0) / 2.0).exp();
        let closed = sample_jump_time(&pop(), &x, u, &num).unwrap();
        assert!((closed - 1.0).abs() < 1e-12);
        let generic = sample_jump_time(&GenericOnly::new(pop()), &x, u, &num).unwrap();
        assert!((generic - 1.0).abs() < 1e-9);

        let near_one = 1.0 - 1e-15;
        assert!(sample_jump_time(&pop(), &x, near_one, &num).unwrap() < 1e-12);
        assert!(sample_jump_time(&GenericOnly::new(pop()), &x, near_one, &num).unwrap() < 1e-9);

        let frozen = GenericOnly::new(ConstantRateModel::frozen());
        assert_eq!(sample_jump_time(&frozen, &x, 0.3, &num).unwrap(), f64::INFINITY);

        for bad in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(
                sample_jump_time(&pop(), &x, bad, &num),
                Err(PdmpError::InvalidUniform(_))
            ));
        }
    }

    #[test]
    fn forced_jump_at_exit_time() {
        let num = Numerics::default();
        let wall = FiniteExitModel { wall: 2.0, rate: 0.0, reset: -1.0 };
        let x = delta(0.5);
        assert_eq!(sample_jump_time(&wall, &x, 0.01, &num).unwrap(), 1.5);
        let traj = simulate(&wall, &x, StopRule::Jumps(3), RngStream::new(1, 0), &num).unwrap();
        assert_eq!(traj.jumps.len(), 3);
        assert_eq!(traj.jumps[0].s, 1.5);
        assert_eq!(traj.jumps[0].z, delta(-1.0));
        assert_eq!(traj.jumps[1].s, 3.0);
    }

    #[test]
    fn post_jump_examples() {
        let single = SingleCellModel::new(CellParams::default());
        let mut uniforms = RngStream::new(3, 0).open();
        for _ in 0..10 {
            assert_eq!(sample_post_jump(&single, &delta(4.0), &mut uniforms).unwrap(), delta(2.0));
        }

        let y = HybridState::new(
            Mode(0),
            PointMeasure::from_points([vec![1.0], vec![2.0]]).unwrap(),
        );
        let outcomes = pop().jump_outcomes(&y).unwrap();
        assert_eq!(outcomes.len(), 2);
        assert!((outcomes[0].probability - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            outcomes[0].state.measure,
            PointMeasure::new([(vec![0.5], 2), (vec![2.0], 1)]).unwrap()
        );
        assert!((outcomes[1].probability - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(outcomes[1].state.measure, PointMeasure::new([(vec![1.0], 3)]).unwrap());
        assert_eq!(post_jump_from_uniform(&pop(), &y, 0.2).unwrap(), outcomes[0].state);
        assert_eq!(post_jump_from_uniform(&pop(), &y, 0.5).unwrap(), outcomes[1].state);
    }

    struct Stuck;

    impl PdmpModel for Stuck {
        fn modes(&self) -> &[Mode] {
            &[Mode(0)]
        }
        fn flow(&self, x: &HybridState, _t: f64) -> HybridState {
            x.clone()
        }
        fn intensity(&self, _x: &HybridState) -> f64 {
            1.0
        }
        fn kernel_form(&self) -> KernelForm {
            KernelForm::Enumerable
        }
        fn jump_outcomes(&self, y: &HybridState) -> Option<Vec<JumpOutcome>> {
            Some(vec![JumpOutcome { state: y.clone(), probability: 1.0 }])
        }
        fn max_jumps(&self) -> usize {
            5
        }
    }

    #[test]
    fn kernel_errors() {
        let y = delta(1.0);
        assert!(matches!(post_jump_from_uniform(&Stuck, &y, 0.5), Err(PdmpError::NoMoveJump(_))));
        let bad = [JumpOutcome { state: delta(2.0), probability: 0.7 }];
        assert!(matches!(validate_outcomes(&y, &bad), Err(PdmpError::InvalidKernel { .. })));
        assert!(matches!(validate_outcomes(&y, &[]), Err(PdmpError::EmptyKernel(_))));
    }

    #[test]
    fn simulate_examples() {
        let num = Numerics::default();
        let frozen = ConstantRateModel::frozen();
        let traj = simulate(&frozen, &delta(1.0), StopRule::Horizon(10.0), RngStream::new(1, 0), &num).unwrap();
        assert!(traj.jumps.is_empty());
        assert!(!traj.truncated);

        let traj = simulate(&pop(), &delta(3.0), StopRule::Jumps(1), RngStream::new(1, 0), &num).unwrap();
        assert_eq!(traj.jumps.len(), 1);
        assert_eq!(traj.jumps[0].z.measure.total_mass(), 2);

        assert!(matches!(
            simulate(&Stuck, &delta(1.0), StopRule::Jumps(6), RngStream::new(1, 0), &num),
            Err(PdmpError::TooManyJumps { .. })
        ));
        let bad_mode = HybridState::new(Mode(4), PointMeasure::dirac(vec![1.0]).unwrap());
        assert!(matches!(
            simulate(&pop(), &bad_mode, StopRule::Jumps(1), RngStream::new(1, 0), &num),
            Err(PdmpError::UnknownMode(_))
        ));
    }

    #[test]
    fn jump_budget_truncates_horizon_runs() {
        struct Budget(ConstantRateModel);
        impl PdmpModel for Budget {
            fn modes(&self) -> &[Mode] {
                self.0.modes()
            }
            fn flow(&self, x: &HybridState, t: f64) -> HybridState {
                self.0.flow(x, t)
            }
            fn intensity(&self, x: &HybridState) -> f64 {
                self.0.intensity(x)
            }
            fn kernel_form(&self) -> KernelForm {
                self.0.kernel_form()
            }
            fn jump_outcomes(&self, y: &HybridState) -> Option<Vec<JumpOutcome>> {
                self.0.jump_outcomes(y)
            }
            fn max_jumps(&self) -> usize {
                4
            }
        }
        let model = Budget(ConstantRateModel { rate: 50.0, drift: 0.0 });
        let num = Numerics::default();
        let traj = simulate(&model, &delta(1.0), StopRule::Horizon(100.0), RngStream::new(2, 0), &num).unwrap();
        assert!(traj.truncated);
        assert_eq!(traj.jumps.len(), 4);
        let end = *traj.jump_times().last().unwrap();
        assert_eq!(traj.covered_until, Some(end));
        assert!(state_at(&traj, &model, end + 1.0).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let num = Numerics::default();
        let model = pop();
        let x0 = delta(3.0);
        let traj = simulate(&model, &x0, StopRule::Jumps(4), RngStream::new(9, 2), &num).unwrap();
        assert_eq!(state_at(&traj, &model, 0.0).unwrap(), x0);
        let times = traj.jump_times();
        for (n, &t) in times.iter().enumerate() {
            assert_eq!(state_at(&traj, &model, t).unwrap(), traj.jumps[n].z);
        }
        let t = 0.5 * times[0];
        let expected = delta(3.0 * (2.0 * t).exp());
        assert_eq!(state_at(&traj, &model, t).unwrap(), expected);
        assert!(matches!(
            state_at(&traj, &model, times[3] + 0.1),
            Err(PdmpError::OutOfCoverage { .. })
        ));
    }

    #[test]
    fn trajectory_formats() {
        let num = Numerics::default();
        let model = TimeAugmentedPopulationModel::new(CellParams::default());
        let x0 = model.state(&[3.0], 0.0).unwrap();
        let traj = simulate(&model, &x0, StopRule::Jumps(2), RngStream::new(5, 0), &num).unwrap();
        let json = serde_json::to_string(&traj).unwrap();
        assert!(json.contains("\"jumps\":[{\"s\":"));
        let back: Trajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, traj);
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n,t,mode,atoms");
        assert_eq!(lines[1], "0,0,0,3 0:1");
        assert_eq!(lines.len(), 4);
    }
}
