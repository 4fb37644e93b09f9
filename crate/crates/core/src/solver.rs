//! Random-horizon optimal stopping by iterating dynamic-programming operators.
//!
//! For a reward `g` and a bounded function `w` on the state space:
//!
//! ```text
//! H w(x, t) = w(Φ(x, t∧t*)) e^{-Λ(x, t∧t*)}
//! I w(x, t) = ∫_0^{t∧t*} λ(Φ(x,s)) Qw(Φ(x,s)) e^{-Λ(x,s)} ds
//! K w(x)    = I w(x, t*) + Qw(Φ(x,t*)) e^{-Λ(x,t*)}
//! J(w,g)    = H g + I w
//! L(w,g)(x) = max( sup_t J(w,g)(x,t), K w(x) )
//! ```
//!
//! and `V_0 = g`, `V_n = L(V_{n-1}, g)`. `V_n(x)` is the best expected reward
//! over stopping times bounded by the `n`-th jump time. Inner evaluations of
//! `V_{n-1}` are done on demand at post-jump states and memoized.
//!
//! The supremum over `t` is taken on a uniform grid of `nbpt` points over
//! `[0, t_max ∧ t*]`. When `t* = +∞` the horizon `t_max` is the
//! `survival_floor`-quantile of the first jump time, and every value carries
//! the truncation bound `‖w‖∞ F(x, t_max)`.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pdmp::{
    cumulative_hazard, next_jump, sample_jump_time, survivor, validate_outcomes, Numerics,
    PdmpError, PdmpModel,
};
use crate::point_measure::HybridState;
use crate::quadrature::{adaptive_simpson, cumulative_on_grid, QuadratureError, QuadratureOptions};
use crate::rng::RngStream;

/// Truncation bounds above this are logged.
const TRUNCATION_WARN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Pdmp(#[from] PdmpError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("reward evaluation failed: {0}")]
    Reward(String),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("invalid policy: {0}")]
    Policy(String),
}

/// Nonnegative bounded reward `g`.
pub trait Reward: Send + Sync {
    fn evaluate(&self, x: &HybridState) -> Result<f64, SolverError>;

    /// Upper bound of `g` over the states reachable from `x` within `jumps`
    /// jumps.
    fn bound(&self, x: &HybridState, jumps: usize) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantReward(pub f64);

impl Reward for ConstantReward {
    fn evaluate(&self, _x: &HybridState) -> Result<f64, SolverError> {
        Ok(self.0)
    }

    fn bound(&self, _x: &HybridState, _jumps: usize) -> f64 {
        self.0
    }
}

/// How the time horizon of the supremum search is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeHorizon {
    Fixed(f64),
    /// Smallest time with `F(x, t) ≤ survival_floor`, capped at `cap`.
    Auto { survival_floor: f64, cap: f64 },
}

impl Default for TimeHorizon {
    fn default() -> Self {
        TimeHorizon::Auto {
            survival_floor: 1e-8,
            cap: 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub t_max: TimeHorizon,
    pub nbpt: usize,
    pub quad_tol: f64,
    pub kernel_mc_samples: usize,
    pub comparison_tol: f64,
    /// Golden-section refinement of the supremum around the best grid point.
    pub refine: bool,
    /// Seed of the fixed substreams used for non-enumerable kernels.
    pub kernel_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            t_max: TimeHorizon::default(),
            nbpt: 10_000,
            quad_tol: 1e-10,
            kernel_mc_samples: 1_000,
            comparison_tol: 1e-9,
            refine: false,
            kernel_seed: 0x5eed,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::Config(m));
        if self.nbpt < 2 {
            return bad(format!("nbpt must be at least 2, got {}", self.nbpt));
        }
        if !(self.quad_tol > 0.0) {
            return bad(format!("quad_tol must be positive, got {}", self.quad_tol));
        }
        if !(self.comparison_tol >= 0.0) {
            return bad(format!("comparison_tol must be nonnegative, got {}", self.comparison_tol));
        }
        if self.kernel_mc_samples == 0 {
            return bad("kernel_mc_samples must be positive".into());
        }
        match self.t_max {
            TimeHorizon::Fixed(t) if !(t > 0.0 && t.is_finite()) => {
                bad(format!("t_max must be positive and finite, got {t}"))
            }
            TimeHorizon::Auto { survival_floor, cap }
                if !(survival_floor > 0.0 && survival_floor < 1.0) || !(cap > 0.0 && cap.is_finite()) =>
            {
                bad(format!("invalid automatic horizon (floor {survival_floor}, cap {cap})"))
            }
            _ => Ok(()),
        }
    }

    pub fn numerics(&self) -> Numerics {
        Numerics {
            quadrature: QuadratureOptions {
                abs_tol: self.quad_tol,
                ..QuadratureOptions::default()
            },
            ..Numerics::default()
        }
    }
}

/// A bounded function on the state space, as seen by the operators.
pub type StateFn<'a> = dyn Fn(&HybridState) -> Result<f64, SolverError> + Sync + 'a;

/// End of the supremum search interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHorizon {
    pub end: f64,
    /// `end` is the exit time `t*(x)`.
    pub at_exit: bool,
    /// `F(x, end)`, zero when `at_exit`.
    pub tail_probability: f64,
}

pub fn search_horizon<M: PdmpModel + ?Sized>(
    model: &M,
    x: &HybridState,
    config: &SolverConfig,
) -> Result<SearchHorizon, SolverError> {
    let num = config.numerics();
    let t_star = model.exit_time(x);
    let end = match config.t_max {
        TimeHorizon::Fixed(t) => t.min(t_star),
        TimeHorizon::Auto { survival_floor, cap } => {
            sample_jump_time(model, x, survival_floor, &num)?.min(cap).min(t_star)
        }
    };
    let at_exit = end >= t_star;
    let tail_probability = if at_exit {
        0.0
    } else {
        survivor(model, x, end, &num)?
    };
    Ok(SearchHorizon {
        end,
        at_exit,
        tail_probability,
    })
}

fn stable_hash(key: &str, salt: u64) -> u64 {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    salt.hash(&mut h);
    h.finish()
}

/// `Qw(y) = ∫ w(z) Q(y, dz)`: exact for enumerable kernels, otherwise a
/// Monte Carlo mean over a substream fixed by `(y, salt)`.
pub fn kernel_expectation<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    y: &HybridState,
    config: &SolverConfig,
    salt: u64,
) -> Result<f64, SolverError> {
    if model.kernel_form().enumerable() {
        let outcomes = model
            .jump_outcomes(y)
            .ok_or_else(|| PdmpError::KernelUnavailable(y.to_string()))?;
        validate_outcomes(y, &outcomes)?;
        let mut acc = 0.0;
        for o in outcomes.iter().filter(|o| o.probability > 0.0) {
            acc += o.probability * w(&o.state)?;
        }
        return Ok(acc);
    }
    let stream = RngStream::new(config.kernel_seed, stable_hash(&y.canonical_key(), salt));
    let mut uniforms = stream.open();
    let mut acc = 0.0;
    for _ in 0..config.kernel_mc_samples {
        let z = model
            .sample_jump(y, uniforms.next_uniform())
            .ok_or_else(|| PdmpError::KernelUnavailable(y.to_string()))?;
        acc += w(&z)?;
    }
    Ok(acc / config.kernel_mc_samples as f64)
}

/// `s ↦ λ(Φ(x,s)) Qw(Φ(x,s)) e^{-Λ(x,s)}`, the density of jumping at `s`
/// weighted by `Qw`.
fn jump_integrand<'m, M: PdmpModel + ?Sized>(
    model: &'m M,
    w: &'m StateFn<'m>,
    x: &'m HybridState,
    config: &'m SolverConfig,
    error: &'m RwLock<Option<SolverError>>,
) -> impl FnMut(f64) -> f64 + 'm {
    let num = config.numerics();
    let salt = stable_hash(&x.canonical_key(), 0);
    move |s| {
        let eval = || -> Result<f64, SolverError> {
            let y = model.flow(x, s);
            let rate = model.intensity(&y);
            if rate == 0.0 {
                return Ok(0.0);
            }
            let qw = kernel_expectation(model, w, &y, config, salt)?;
            Ok(rate * qw * (-cumulative_hazard(model, x, s, &num)?).exp())
        };
        match eval() {
            Ok(v) => v,
            Err(e) => {
                error.write().get_or_insert(e);
                f64::NAN
            }
        }
    }
}

fn take_error<T>(
    result: Result<T, QuadratureError>,
    error: RwLock<Option<SolverError>>,
) -> Result<T, SolverError> {
    if let Some(e) = error.into_inner() {
        return Err(e);
    }
    Ok(result?)
}

/// `H w(x, t)`.
pub fn op_h<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    x: &HybridState,
    t: f64,
    config: &SolverConfig,
) -> Result<f64, SolverError> {
    if t < 0.0 || t.is_nan() {
        return Err(PdmpError::NegativeTime(t).into());
    }
    let t = t.min(model.exit_time(x));
    let hazard = cumulative_hazard(model, x, t, &config.numerics())?;
    Ok(w(&model.flow(x, t))? * (-hazard).exp())
}

/// `I w(x, t)` by adaptive quadrature.
pub fn op_i<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    x: &HybridState,
    t: f64,
    config: &SolverConfig,
) -> Result<f64, SolverError> {
    if t < 0.0 || t.is_nan() {
        return Err(PdmpError::NegativeTime(t).into());
    }
    let end = t.min(model.exit_time(x));
    let error = RwLock::new(None);
    let result = adaptive_simpson(
        jump_integrand(model, w, x, config, &error),
        0.0,
        end,
        &config.numerics().quadrature,
    );
    take_error(result, error).map(|r| r.value)
}

/// `K w(x)`, truncated at the search horizon when `t* = +∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KValue {
    pub value: f64,
    pub horizon: SearchHorizon,
}

pub fn op_k<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    x: &HybridState,
    config: &SolverConfig,
) -> Result<KValue, SolverError> {
    let horizon = search_horizon(model, x, config)?;
    let mut value = op_i(model, w, x, horizon.end, config)?;
    if horizon.at_exit {
        value += boundary_term(model, w, x, horizon.end, config)?;
    }
    Ok(KValue { value, horizon })
}

fn boundary_term<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    x: &HybridState,
    t_star: f64,
    config: &SolverConfig,
) -> Result<f64, SolverError> {
    let edge = model.flow(x, t_star);
    let hazard = cumulative_hazard(model, x, t_star, &config.numerics())?;
    let salt = stable_hash(&x.canonical_key(), 1);
    Ok(kernel_expectation(model, w, &edge, config, salt)? * (-hazard).exp())
}

/// `J(w, g)(x, t) = H g(x, t) + I w(x, t)`.
pub fn op_j<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    g: &StateFn<'_>,
    x: &HybridState,
    t: f64,
    config: &SolverConfig,
) -> Result<f64, SolverError> {
    Ok(op_h(model, g, x, t, config)? + op_i(model, w, x, t, config)?)
}

/// `t ↦ J(w, g)(x, t)` on the search grid, together with `K w(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompromiseCurve {
    pub times: Vec<f64>,
    pub j_values: Vec<f64>,
    pub k_value: f64,
    pub horizon: SearchHorizon,
}

impl CompromiseCurve {
    /// Index of the first grid maximum of `J`.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.j_values.iter().enumerate() {
            if v > self.j_values[best] {
                best = k;
            }
        }
        best
    }

    pub fn sup_j(&self) -> f64 {
        self.j_values[self.argmax()]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,j\n");
        for (t, j) in self.times.iter().zip(&self.j_values) {
            out.push_str(&format!("{t},{j}\n"));
        }
        out
    }
}

pub fn uniform_grid(end: f64, points: usize) -> Vec<f64> {
    let last = (points - 1) as f64;
    (0..points)
        .map(|k| if k + 1 == points { end } else { end * k as f64 / last })
        .collect()
}

pub fn compromise_curve<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    g: &StateFn<'_>,
    x: &HybridState,
    config: &SolverConfig,
) -> Result<CompromiseCurve, SolverError> {
    let num = config.numerics();
    let horizon = search_horizon(model, x, config)?;
    let times = uniform_grid(horizon.end, config.nbpt);
    let error = RwLock::new(None);
    let cumulative = cumulative_on_grid(
        jump_integrand(model, w, x, config, &error),
        &times,
        &num.quadrature,
    );
    let cumulative = take_error(cumulative, error)?;
    let mut j_values = Vec::with_capacity(times.len());
    for (&t, &i) in times.iter().zip(&cumulative) {
        let hazard = cumulative_hazard(model, x, t, &num)?;
        j_values.push(g(&model.flow(x, t))? * (-hazard).exp() + i);
    }
    let mut k_value = *cumulative.last().expect("grid has at least two points");
    if horizon.at_exit {
        k_value += boundary_term(model, w, x, horizon.end, config)?;
    }
    Ok(CompromiseCurve {
        times,
        j_values,
        k_value,
        horizon,
    })
}

/// Result of `L(w, g)(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LValue {
    pub value: f64,
    /// Smallest grid time attaining the supremum of `J`.
    pub arg_sup: f64,
    pub sup_j: f64,
    pub k_value: f64,
    pub horizon: SearchHorizon,
}

fn golden_refine<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    g: &StateFn<'_>,
    x: &HybridState,
    curve: &CompromiseCurve,
    config: &SolverConfig,
) -> Result<(f64, f64), SolverError> {
    let best = curve.argmax();
    let lo_idx = best.saturating_sub(1);
    let hi_idx = (best + 1).min(curve.times.len() - 1);
    let (mut a, mut b) = (curve.times[lo_idx], curve.times[hi_idx]);
    let j = |t: f64| op_j(model, w, g, x, t, config);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut jc, mut jd) = (j(c)?, j(d)?);
    for _ in 0..60 {
        if (b - a).abs() <= config.quad_tol {
            break;
        }
        if jc >= jd {
            b = d;
            d = c;
            jd = jc;
            c = b - ratio * (b - a);
            jc = j(c)?;
        } else {
            a = c;
            c = d;
            jc = jd;
            d = a + ratio * (b - a);
            jd = j(d)?;
        }
    }
    Ok(if jc >= jd { (c, jc) } else { (d, jd) })
}

/// `L(w, g)(x)` with the supremum taken on the configured grid.
pub fn op_l<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    g: &StateFn<'_>,
    x: &HybridState,
    config: &SolverConfig,
) -> Result<LValue, SolverError> {
    let curve = compromise_curve(model, w, g, x, config)?;
    l_from_curve(model, w, g, x, &curve, config)
}

fn l_from_curve<M: PdmpModel + ?Sized>(
    model: &M,
    w: &StateFn<'_>,
    g: &StateFn<'_>,
    x: &HybridState,
    curve: &CompromiseCurve,
    config: &SolverConfig,
) -> Result<LValue, SolverError> {
    let best = curve.argmax();
    let (mut arg_sup, mut sup_j) = (curve.times[best], curve.j_values[best]);
    if config.refine {
        let (t, v) = golden_refine(model, w, g, x, curve, config)?;
        if v > sup_j {
            arg_sup = t;
            sup_j = v;
        }
    }
    Ok(LValue {
        value: sup_j.max(curve.k_value),
        arg_sup,
        sup_j,
        k_value: curve.k_value,
        horizon: curve.horizon,
    })
}

/// Diagnostics attached to a value query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueDiagnostics {
    pub n: usize,
    pub value: f64,
    pub arg_sup: f64,
    pub sup_j: f64,
    pub k_value: f64,
    pub horizon: f64,
    /// `‖V_{n-1}‖∞ F(x, t_max)`, the error from truncating `K` and `I`.
    pub truncation_bound: f64,
}

/// `r_{n,ε}(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub time: f64,
    /// Waiting for the next jump beats stopping along the flow.
    pub wait_for_jump: bool,
    pub sup_j: f64,
    pub k_value: f64,
}

type ThresholdKey = (usize, u64, String);

/// Memoized value iteration `V_0 = g`, `V_n = L(V_{n-1}, g)`.
pub struct ValueIteration<'a, M: ?Sized> {
    model: &'a M,
    reward: &'a dyn Reward,
    config: SolverConfig,
    values: RwLock<HashMap<(usize, String), ValueDiagnostics>>,
    thresholds: RwLock<HashMap<ThresholdKey, Threshold>>,
    cost_warned: RwLock<bool>,
}

impl<'a, M: PdmpModel + ?Sized> ValueIteration<'a, M> {
    pub fn new(model: &'a M, reward: &'a dyn Reward, config: SolverConfig) -> Result<Self, SolverError> {
        config.validate()?;
        Ok(Self {
            model,
            reward,
            config,
            values: RwLock::new(HashMap::new()),
            thresholds: RwLock::new(HashMap::new()),
            cost_warned: RwLock::new(false),
        })
    }

    pub fn model(&self) -> &'a M {
        self.model
    }

    pub fn reward(&self) -> &'a dyn Reward {
        self.reward
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// `V_n(x)`.
    pub fn value(&self, n: usize, x: &HybridState) -> Result<f64, SolverError> {
        if n == 0 {
            return self.reward.evaluate(x);
        }
        Ok(self.diagnostics(n, x)?.value)
    }

    fn warn_cost(&self, n: usize, x: &HybridState) {
        if n <= 3 || *self.cost_warned.read() || !self.model.kernel_form().enumerable() {
            return;
        }
        let outcomes = self.model.jump_outcomes(x).map_or(0, |o| o.len());
        if outcomes > 8 {
            *self.cost_warned.write() = true;
            log::warn!(
                "value iteration at depth {n} with {outcomes} kernel outcomes: nested evaluation grows exponentially"
            );
        }
    }

    /// The grid of `J(V_{n-1}, g)(x, ·)` used to compute `V_n(x)`, `n ≥ 1`.
    pub fn curve(&self, n: usize, x: &HybridState) -> Result<CompromiseCurve, SolverError> {
        if n == 0 {
            return Err(SolverError::Config("the compromise curve is defined for n >= 1".into()));
        }
        let inner = |y: &HybridState| self.value(n - 1, y);
        let g = |y: &HybridState| self.reward.evaluate(y);
        compromise_curve(self.model, &inner, &g, x, &self.config)
    }

    pub fn diagnostics(&self, n: usize, x: &HybridState) -> Result<ValueDiagnostics, SolverError> {
        if n == 0 {
            let value = self.reward.evaluate(x)?;
            return Ok(ValueDiagnostics {
                n,
                value,
                arg_sup: 0.0,
                sup_j: value,
                k_value: f64::NAN,
                horizon: 0.0,
                truncation_bound: 0.0,
            });
        }
        let key = (n, x.canonical_key());
        if let Some(d) = self.values.read().get(&key) {
            return Ok(*d);
        }
        self.warn_cost(n, x);
        let curve = self.curve(n, x)?;
        let inner = |y: &HybridState| self.value(n - 1, y);
        let g = |y: &HybridState| self.reward.evaluate(y);
        let l = l_from_curve(self.model, &inner, &g, x, &curve, &self.config)?;
        let truncation_bound = self.reward.bound(x, n) * l.horizon.tail_probability;
        if truncation_bound > TRUNCATION_WARN {
            log::warn!("truncation bound {truncation_bound:e} at {x} exceeds {TRUNCATION_WARN:e}");
        }
        let d = ValueDiagnostics {
            n,
            value: l.value,
            arg_sup: l.arg_sup,
            sup_j: l.sup_j,
            k_value: l.k_value,
            horizon: l.horizon.end,
            truncation_bound,
        };
        self.values.write().insert(key, d);
        Ok(d)
    }

    /// `r_{n,ε}(x)`: the exit time (or the search horizon when `t* = +∞`)
    /// if waiting for the jump is strictly better, otherwise the first grid
    /// time within `ε` of the supremum of `J(V_n, g)(x, ·)`.
    pub fn threshold(&self, n: usize, x: &HybridState, epsilon: f64) -> Result<Threshold, SolverError> {
        if !(epsilon > 0.0) {
            return Err(SolverError::Policy(format!("epsilon must be positive, got {epsilon}")));
        }
        let key = (n, epsilon.to_bits(), x.canonical_key());
        if let Some(t) = self.thresholds.read().get(&key) {
            return Ok(*t);
        }
        let curve = self.curve(n + 1, x)?;
        let sup_j = curve.sup_j();
        let threshold = if curve.k_value > sup_j + self.config.comparison_tol {
            let t_star = self.model.exit_time(x);
            Threshold {
                time: if t_star.is_finite() { t_star } else { curve.horizon.end },
                wait_for_jump: true,
                sup_j,
                k_value: curve.k_value,
            }
        } else {
            let k = curve
                .j_values
                .iter()
                .position(|&j| j >= sup_j - epsilon)
                .expect("the maximum itself qualifies");
            Threshold {
                time: curve.times[k],
                wait_for_jump: false,
                sup_j,
                k_value: curve.k_value,
            }
        };
        self.thresholds.write().insert(key, threshold);
        Ok(threshold)
    }
}

/// `V_n` as a pointwise-evaluable function.
pub struct ValueEstimate<'a, M: ?Sized> {
    solver: ValueIteration<'a, M>,
    n: usize,
}

impl<'a, M: PdmpModel + ?Sized> ValueEstimate<'a, M> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn evaluate(&self, x: &HybridState) -> Result<f64, SolverError> {
        self.solver.value(self.n, x)
    }

    pub fn diagnostics(&self, x: &HybridState) -> Result<ValueDiagnostics, SolverError> {
        self.solver.diagnostics(self.n, x)
    }

    pub fn solver(&self) -> &ValueIteration<'a, M> {
        &self.solver
    }
}

pub fn value_iterate<'a, M: PdmpModel + ?Sized>(
    model: &'a M,
    reward: &'a dyn Reward,
    n: usize,
    config: SolverConfig,
) -> Result<ValueEstimate<'a, M>, SolverError> {
    Ok(ValueEstimate {
        solver: ValueIteration::new(model, reward, config)?,
        n,
    })
}

/// The stopping rule `S_{n,ε}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingPolicy {
    pub n: usize,
    pub epsilon: f64,
}

impl StoppingPolicy {
    pub fn new(n: usize, epsilon: f64) -> Result<Self, SolverError> {
        if n == 0 {
            return Err(SolverError::Policy("horizon n must be at least 1".into()));
        }
        if !(epsilon > 0.0) {
            return Err(SolverError::Policy(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { n, epsilon })
    }

    /// Tolerance used at stage `k`: `ε / 2^{k+1}`, so the stage losses sum
    /// to less than `ε`.
    pub fn stage_epsilon(&self, k: usize) -> f64 {
        self.epsilon / 2f64.powi(k as i32 + 1)
    }
}

/// One term `R_{n,k} ∧ S_{k+1}` of the stopping-time decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStage {
    pub level: usize,
    pub epsilon: f64,
    /// `R_{n,k}`; zero once the policy has stopped.
    pub threshold: f64,
    pub wait_for_jump: bool,
    /// `S_{k+1}` when it was simulated, `None` when never needed or infinite.
    pub inter_jump: Option<f64>,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub stop_time: f64,
    pub stopped_state: HybridState,
    pub reward: f64,
    pub stages: Vec<PolicyStage>,
    /// Jump times `T_1, T_2, ...` observed along the path.
    pub jump_times: Vec<f64>,
}

impl PolicyOutcome {
    /// `Σ_k R_{n,k} ∧ S_{k+1}` re-summed from the recorded stages.
    pub fn decomposition_sum(&self) -> f64 {
        self.stages.iter().fold(0.0, |acc, s| acc + s.contribution)
    }
}

/// Runs `S_{n,ε}` on one path drawn from `stream`.
pub fn execute_policy<M: PdmpModel + ?Sized>(
    solver: &ValueIteration<'_, M>,
    policy: &StoppingPolicy,
    x: &HybridState,
    stream: RngStream,
) -> Result<PolicyOutcome, SolverError> {
    let model = solver.model();
    let num = solver.config().numerics();
    let mut uniforms = stream.open();
    let mut current = x.clone();
    let mut elapsed = 0.0;
    let mut stages = Vec::with_capacity(policy.n);
    let mut jump_times = Vec::new();
    let mut stopped: Option<(f64, HybridState)> = None;

    for k in 0..policy.n {
        let level = policy.n - k - 1;
        let epsilon = policy.stage_epsilon(k);
        let threshold = solver.threshold(level, &current, epsilon)?;
        let r = threshold.time;
        match next_jump(model, &current, &mut uniforms, &num)? {
            Some((s, z)) if s <= r => {
                elapsed += s;
                jump_times.push(elapsed);
                stages.push(PolicyStage {
                    level,
                    epsilon,
                    threshold: r,
                    wait_for_jump: threshold.wait_for_jump,
                    inter_jump: Some(s),
                    contribution: s,
                });
                current = z;
            }
            jump => {
                stages.push(PolicyStage {
                    level,
                    epsilon,
                    threshold: r,
                    wait_for_jump: threshold.wait_for_jump,
                    inter_jump: jump.map(|(s, _)| s),
                    contribution: r,
                });
                stopped = Some((elapsed + r, model.flow(&current, r)));
                for later in k + 1..policy.n {
                    stages.push(PolicyStage {
                        level: policy.n - later - 1,
                        epsilon: policy.stage_epsilon(later),
                        threshold: 0.0,
                        wait_for_jump: false,
                        inter_jump: None,
                        contribution: 0.0,
                    });
                }
                break;
            }
        }
    }

    let (stop_time, stopped_state) = stopped.unwrap_or((elapsed, current));
    let reward = solver.reward().evaluate(&stopped_state)?;
    Ok(PolicyOutcome {
        stop_time,
        stopped_state,
        reward,
        stages,
        jump_times,
    })
}

/// Monte Carlo mean of a sample with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
    pub samples: usize,
}

impl McEstimate {
    /// Welford accumulation; a constant sample gives exactly that constant
    /// and a zero standard error.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (k, &x) in samples.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (x - mean);
        }
        let n = samples.len();
        let variance = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        let stderr = if n > 0 { (variance / n as f64).sqrt() } else { f64::NAN };
        Self {
            mean,
            stderr,
            ci95: (mean - 1.96 * stderr, mean + 1.96 * stderr),
            samples: n,
        }
    }
}

/// Mean reward of `S_{n,ε}` over `m` replications on streams
/// `base.substream(0..m)`.
pub fn evaluate_policy<M: PdmpModel + ?Sized>(
    solver: &ValueIteration<'_, M>,
    policy: &StoppingPolicy,
    x: &HybridState,
    m: usize,
    base: RngStream,
) -> Result<McEstimate, SolverError> {
    if m < 2 {
        return Err(SolverError::Policy(format!("need at least 2 replications, got {m}")));
    }
    // the first stage is shared by every path
    solver.threshold(policy.n - 1, x, policy.stage_epsilon(0))?;
    let rewards = (0..m as u64)
        .into_par_iter()
        .map(|i| execute_policy(solver, policy, x, base.substream(i)).map(|o| o.reward))
        .collect::<Result<Vec<f64>, SolverError>>()?;
    Ok(McEstimate::from_samples(&rewards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{CellParams, CellReward, TimeAugmentedPopulationModel};
    use crate::pdmp::simulate;
    use crate::pdmp::StopRule;
    use crate::point_measure::{Mode, PointMeasure};
    use crate::synthetic::{ConstantRateModel, FiniteExitModel};

    // 3 e^{3/2} E_1(3/2)
    const V1_ORACLE: f64 = 1.344_770_007_874_748_9;
    const LN2_HALF: f64 = std::f64::consts::LN_2 / 2.0;

    fn cell() -> (TimeAugmentedPopulationModel, CellReward, HybridState) {
        let params = CellParams::default();
        let model = TimeAugmentedPopulationModel::new(params);
        let x = model.state(&[3.0], 0.0).unwrap();
        (model, CellReward::new(params), x)
    }

    fn delta(x: f64) -> HybridState {
        HybridState::new(Mode(0), PointMeasure::dirac(vec![x]).unwrap())
    }

    fn position(y: &HybridState) -> f64 {
        y.measure.atoms()[0].location()[0]
    }

    struct Bump;

    impl Reward for Bump {
        fn evaluate(&self, x: &HybridState) -> Result<f64, SolverError> {
            Ok((-(position(x) - 2.0).powi(2)).exp())
        }
        fn bound(&self, _x: &HybridState, _jumps: usize) -> f64 {
            1.0
        }
    }

    #[test]
    fn h_examples() {
        let (model, g, x) = cell();
        let config = SolverConfig::default();
        let gf = |y: &HybridState| g.evaluate(y);
        assert_eq!(op_h(&model, &gf, &x, 0.0, &config).unwrap(), 1.0);
        let h = op_h(&model, &gf, &x, LN2_HALF, &config).unwrap();
        assert!((h - 0.111_565_080_074_214_91).abs() < 1e-14);
        let one = |_: &HybridState| Ok(1.0);
        let f = survivor(&model, &x, 0.4, &config.numerics()).unwrap();
        assert_eq!(op_h(&model, &one, &x, 0.4, &config).unwrap(), f);
        assert!(op_h(&model, &one, &x, -0.1, &config).is_err());
    }

    #[test]
    fn i_examples() {
        let (model, g, x) = cell();
        let config = SolverConfig::default();
        let gf = |y: &HybridState| g.evaluate(y);
        let one = |_: &HybridState| Ok(1.0);
        assert_eq!(op_i(&model, &gf, &x, 0.0, &config).unwrap(), 0.0);
        let total = op_i(&model, &one, &x, 5.0, &config).unwrap();
        let f = survivor(&model, &x, 5.0, &config.numerics()).unwrap();
        assert!((total - (1.0 - f)).abs() < 1e-9);
        let mut last = 0.0;
        for t in [0.1, 0.2, 0.4, 0.8, 1.6] {
            let v = op_i(&model, &gf, &x, t, &config).unwrap();
            assert!(v >= last);
            last = v;
        }
        assert!((last - V1_ORACLE).abs() < 1e-8);
    }

    #[test]
    fn k_examples() {
        let (model, g, x) = cell();
        let config = SolverConfig::default();
        let gf = |y: &HybridState| g.evaluate(y);
        let k = op_k(&model, &gf, &x, &config).unwrap();
        assert!(!k.horizon.at_exit);
        assert!(k.horizon.tail_probability <= 1e-8);
        assert!((k.value - V1_ORACLE).abs() < 1e-7);

        let c = |_: &HybridState| Ok(2.5);
        let kc = op_k(&model, &c, &x, &config).unwrap();
        assert!((kc.value - 2.5).abs() <= 2.5 * kc.horizon.tail_probability + 1e-9);

        // pure boundary jump: Qw(Φ(x, t*)) = w(δ_{-1})
        let wall = FiniteExitModel { wall: 2.0, rate: 0.0, reset: -1.0 };
        let w = |y: &HybridState| Ok(position(y) + 5.0);
        let kb = op_k(&wall, &w, &delta(0.5), &config).unwrap();
        assert!(kb.horizon.at_exit);
        assert_eq!(kb.horizon.end, 1.5);
        assert!((kb.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn j_examples() {
        let (model, g, x) = cell();
        let config = SolverConfig::default();
        let gf = |y: &HybridState| g.evaluate(y);
        assert_eq!(op_j(&model, &gf, &gf, &x, 0.0, &config).unwrap(), 1.0);
        let one = |_: &HybridState| Ok(1.0);
        let wall = FiniteExitModel { wall: 2.0, rate: 0.7, reset: -1.0 };
        for t in [0.0, 0.3, 1.0, 1.9] {
            let j = op_j(&wall, &one, &one, &delta(0.0), t, &config).unwrap();
            assert!((j - 1.0).abs() < 1e-10);
        }
        let far = op_j(&model, &gf, &gf, &x, 2.0, &config).unwrap();
        assert!((far - V1_ORACLE).abs() < 1e-7);
    }

    #[test]
    fn l_examples() {
        let (model, g, x) = cell();
        let config = SolverConfig::default();
        let gf = |y: &HybridState| g.evaluate(y);
        let l = op_l(&model, &gf, &gf, &x, &config).unwrap();
        assert!((l.value - 1.3447).abs() < 5e-3);
        assert!((l.value - V1_ORACLE).abs() < 1e-3);

        let zero = |_: &HybridState| Ok(0.0);
        let l0 = op_l(&model, &zero, &zero, &x, &config).unwrap();
        assert_eq!((l0.value, l0.arg_sup), (0.0, 0.0));

        // reward largest at the start and at the reset point
        let wall = FiniteExitModel { wall: 2.0, rate: 1.0, reset: -0.5 };
        let decay = |y: &HybridState| Ok((-position(y).abs()).exp());
        let lw = op_l(&wall, &decay, &decay, &delta(0.0), &config).unwrap();
        assert!((lw.value - 1.0).abs() < 1e-9);
        assert_eq!(lw.arg_sup, 0.0);
    }

    #[test]
    fn grid_and_refinement() {
        let grid = uniform_grid(2.0, 5);
        assert_eq!(grid, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let model = ConstantRateModel { rate: 0.0, drift: 1.0 };
        let config = SolverConfig {
            nbpt: 7,
            t_max: TimeHorizon::Fixed(3.0),
            ..SolverConfig::default()
        };
        let g = |y: &HybridState| Bump.evaluate(y);
        let coarse = op_l(&model, &g, &g, &delta(0.3), &config).unwrap();
        assert_eq!(coarse.arg_sup, 1.5);
        let refined = op_l(&model, &g, &g, &delta(0.3), &SolverConfig { refine: true, ..config }).unwrap();
        assert!((refined.arg_sup - 1.7).abs() < 1e-6);
        assert!(refined.value > coarse.value);
    }

    #[test]
    fn value_iteration_examples() {
        let (model, g, x) = cell();
        let v = value_iterate(&model, &g, 0, SolverConfig::default()).unwrap();
        assert_eq!(v.evaluate(&x).unwrap(), 1.0);
        let v1 = value_iterate(&model, &g, 1, SolverConfig::default()).unwrap();
        let d = v1.diagnostics(&x).unwrap();
        assert!((d.value - 1.3447).abs() < 5e-3);
        assert!((d.value - V1_ORACLE).abs() < 1e-3);
        assert!(d.truncation_bound < 2.1e-8);
        assert_eq!(d.value, d.sup_j.max(d.k_value));

        let coarse = SolverConfig { nbpt: 40, ..SolverConfig::default() };
        let solver = ValueIteration::new(&model, &g, coarse).unwrap();
        let v1 = solver.value(1, &x).unwrap();
        let v2 = solver.value(2, &x).unwrap();
        assert!(v2 >= v1 - 1e-9);
        assert!(v1 >= 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for bad in [
            SolverConfig { nbpt: 1, ..SolverConfig::default() },
            SolverConfig { quad_tol: 0.0, ..SolverConfig::default() },
            SolverConfig { t_max: TimeHorizon::Fixed(-1.0), ..SolverConfig::default() },
            SolverConfig { t_max: TimeHorizon::Auto { survival_floor: 1.5, cap: 10.0 }, ..SolverConfig::default() },
            SolverConfig { kernel_mc_samples: 0, ..SolverConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(SolverError::Config(_))));
        }
        let json = serde_json::to_string(&SolverConfig::default()).unwrap();
        assert!(json.contains("\"auto\":{\"survival_floor\":1e-8"));
        let partial: SolverConfig = serde_json::from_str(r#"{"nbpt": 50, "t_max": {"fixed": 4.0}}"#).unwrap();
        assert_eq!(partial.nbpt, 50);
        assert_eq!(partial.t_max, TimeHorizon::Fixed(4.0));
        assert_eq!(partial.quad_tol, 1e-10);
    }

    #[test]
    fn threshold_examples() {
        let (model, g, x) = cell();
        let c = ConstantReward(0.8);
        let solver = ValueIteration::new(&model, &c, SolverConfig::default()).unwrap();
        let th = solver.threshold(0, &x, 1e-3).unwrap();
        assert_eq!(th.time, 0.0);
        assert!(!th.wait_for_jump);

        let solver = ValueIteration::new(&model, &g, SolverConfig::default()).unwrap();
        let big = solver.threshold(0, &x, 10.0).unwrap();
        assert_eq!(big.time, 0.0);

        // J increases towards K; on the truncated grid the last point ties
        // with K, so the rule settles on the first time within ε
        let curve = solver.curve(1, &x).unwrap();
        let last = curve.times.len() - 1;
        let tail = curve.times[last] - 0.05;
        for (t, j) in curve.times.iter().zip(&curve.j_values) {
            if *t < tail {
                assert!(curve.k_value - j > 0.0);
            }
        }
        let th = solver.threshold(0, &x, 1e-3).unwrap();
        assert!(!th.wait_for_jump);
        let k = curve.times.iter().position(|&t| t == th.time).unwrap();
        assert!(curve.j_values[k] >= th.sup_j - 1e-3);
        assert!(curve.j_values[k - 1] < th.sup_j - 1e-3);
        assert!(solver.threshold(0, &x, 0.0).is_err());
    }

    #[test]
    fn threshold_waits_when_jump_dominates() {
        // the reset point carries all the reward; the wall is at distance 1.5
        let wall = FiniteExitModel { wall: 2.0, rate: 0.3, reset: -1.0 };
        struct AtReset;
        impl Reward for AtReset {
            fn evaluate(&self, x: &HybridState) -> Result<f64, SolverError> {
                Ok(if position(x) < 0.0 { 1.0 } else { 0.0 })
            }
            fn bound(&self, _x: &HybridState, _jumps: usize) -> f64 {
                1.0
            }
        }
        let solver = ValueIteration::new(&wall, &AtReset, SolverConfig::default()).unwrap();
        let th = solver.threshold(0, &delta(0.5), 1e-3).unwrap();
        assert!(th.wait_for_jump);
        assert_eq!(th.time, 1.5);
        assert!((th.k_value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_stage_policy_is_threshold_or_first_jump() {
        let (model, g, x) = cell();
        let config = SolverConfig { nbpt: 2000, ..SolverConfig::default() };
        let solver = ValueIteration::new(&model, &g, config).unwrap();
        let policy = StoppingPolicy::new(1, 0.05).unwrap();
        let r = solver.threshold(0, &x, 0.025).unwrap().time;
        let num = config.numerics();
        for i in 0..200 {
            let stream = RngStream::new(11, i);
            let out = execute_policy(&solver, &policy, &x, stream).unwrap();
            let traj = simulate(&model, &x, StopRule::Jumps(1), stream, &num).unwrap();
            let t1 = traj.jumps[0].s;
            assert_eq!(out.stop_time, r.min(t1));
            assert_eq!(out.stages.len(), 1);
            assert_eq!(out.decomposition_sum(), out.stop_time);
            assert_eq!(out.reward, g.evaluate(&out.stopped_state).unwrap());
        }
    }

    #[test]
    fn policy_without_jumps_is_deterministic() {
        let model = ConstantRateModel { rate: 0.0, drift: 1.0 };
        let solver = ValueIteration::new(&model, &Bump, SolverConfig::default()).unwrap();
        let policy = StoppingPolicy::new(1, 2e-3).unwrap();
        let r = solver.threshold(0, &delta(0.0), 1e-3).unwrap();
        assert!(!r.wait_for_jump);
        // first grid point with e^{-(t-2)^2} ≥ 1 - 10^{-3}
        assert!((r.time - 2.0).abs() < 0.032);
        for i in 0..5 {
            let out = execute_policy(&solver, &policy, &delta(0.0), RngStream::new(1, i)).unwrap();
            assert_eq!(out.stop_time, r.time);
            assert!(out.jump_times.is_empty());
        }
    }

    #[test]
    fn constant_reward_policy_value() {
        let (model, _, x) = cell();
        let c = ConstantReward(0.37);
        let solver = ValueIteration::new(&model, &c, SolverConfig { nbpt: 200, ..SolverConfig::default() }).unwrap();
        let policy = StoppingPolicy::new(2, 0.05).unwrap();
        let est = evaluate_policy(&solver, &policy, &x, 500, RngStream::new(3, 0)).unwrap();
        assert_eq!(est.mean, 0.37);
        assert_eq!(est.stderr, 0.0);
        assert_eq!(est.ci95, (0.37, 0.37));
        assert!(evaluate_policy(&solver, &policy, &x, 1, RngStream::new(3, 0)).is_err());
        assert!(StoppingPolicy::new(0, 0.1).is_err());
        assert!(StoppingPolicy::new(1, 0.0).is_err());
    }

    #[test]
    fn mc_estimate_matches_direct_formulas() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let e = McEstimate::from_samples(&xs);
        assert!((e.mean - 3.5).abs() < 1e-15);
        let var: f64 = xs.iter().map(|x| (x - 3.5f64).powi(2)).sum::<f64>() / 3.0;
        assert!((e.stderr - (var / 4.0).sqrt()).abs() < 1e-15);
        assert!((e.ci95.1 - e.mean - 1.96 * e.stderr).abs() < 1e-15);
    }

    #[test]
    fn sampler_kernels_use_fixed_substreams() {
        let (model, g, x) = cell();
        let generic = crate::synthetic::GenericOnly::sampler_only(model);
        let config = SolverConfig { kernel_mc_samples: 64, ..SolverConfig::default() };
        let gf = |y: &HybridState| g.evaluate(y);
        let y = model.flow(&x, 0.3);
        let a = kernel_expectation(&generic, &gf, &y, &config, 7).unwrap();
        let b = kernel_expectation(&generic, &gf, &y, &config, 7).unwrap();
        assert_eq!(a, b);
        // one outcome only, so the Monte Carlo mean is exact
        let exact = kernel_expectation(&model, &gf, &y, &config, 7).unwrap();
        assert!((a - exact).abs() < 1e-15);
    }
}
