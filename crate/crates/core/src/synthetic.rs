//! Small reference models with known behaviour.

use crate::pdmp::{JumpOutcome, KernelForm, PdmpModel};
use crate::point_measure::{HybridState, Mode, PointMeasure};

const SINGLE_MODE: [Mode; 1] = [Mode(0)];

/// Atoms drift at constant speed; jumps at constant rate add a unit atom at
/// the origin. With `rate = 0` the process never jumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRateModel {
    pub rate: f64,
    pub drift: f64,
}

impl ConstantRateModel {
    pub fn frozen() -> Self {
        Self {
            rate: 0.0,
            drift: 0.0,
        }
    }
}

impl PdmpModel for ConstantRateModel {
    fn modes(&self) -> &[Mode] {
        &SINGLE_MODE
    }

    fn flow(&self, x: &HybridState, t: f64) -> HybridState {
        if self.drift == 0.0 || t == 0.0 {
            return x.clone();
        }
        let d = self.drift * t;
        HybridState::new(x.mode, x.measure.map_locations(|loc| loc.iter().map(|c| c + d).collect()))
    }

    fn intensity(&self, _x: &HybridState) -> f64 {
        self.rate
    }

    fn kernel_form(&self) -> KernelForm {
        KernelForm::Enumerable
    }

    fn jump_outcomes(&self, y: &HybridState) -> Option<Vec<JumpOutcome>> {
        let dim = y.measure.dimension().unwrap_or(1);
        let birth = PointMeasure::dirac(vec![0.0; dim]).ok()?;
        Some(vec![JumpOutcome {
            state: HybridState::new(y.mode, y.measure.add(&birth).ok()?),
            probability: 1.0,
        }])
    }

    fn closed_form_hazard(&self, _x: &HybridState, t: f64) -> Option<f64> {
        Some(self.rate * t)
    }
}

/// A particle moving right at unit speed on `(-∞, wall)`. It jumps at rate
/// `rate` and is forced to jump when it reaches the wall; every jump sends it
/// back to `reset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteExitModel {
    pub wall: f64,
    pub rate: f64,
    pub reset: f64,
}

impl FiniteExitModel {
    fn position(x: &HybridState) -> f64 {
        x.measure.atoms().first().map_or(0.0, |a| a.location()[0])
    }
}

impl PdmpModel for FiniteExitModel {
    fn modes(&self) -> &[Mode] {
        &SINGLE_MODE
    }

    fn flow(&self, x: &HybridState, t: f64) -> HybridState {
        HybridState::new(x.mode, x.measure.map_locations(|loc| vec![loc[0] + t]))
    }

    fn intensity(&self, _x: &HybridState) -> f64 {
        self.rate
    }

    fn exit_time(&self, x: &HybridState) -> f64 {
        (self.wall - Self::position(x)).max(0.0)
    }

    fn kernel_form(&self) -> KernelForm {
        KernelForm::Enumerable
    }

    fn jump_outcomes(&self, y: &HybridState) -> Option<Vec<JumpOutcome>> {
        let target = PointMeasure::dirac(vec![self.reset]).ok()?;
        Some(vec![JumpOutcome {
            state: HybridState::new(y.mode, target),
            probability: 1.0,
        }])
    }
}

/// Hides the closed forms of the wrapped model so the generic quadrature and
/// bisection paths are exercised. Optionally hides the enumeration too,
/// leaving only the sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenericOnly<M> {
    pub inner: M,
    pub sampler_only: bool,
}

impl<M> GenericOnly<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            sampler_only: false,
        }
    }

    pub fn sampler_only(inner: M) -> Self {
        Self {
            inner,
            sampler_only: true,
        }
    }
}

impl<M: PdmpModel> PdmpModel for GenericOnly<M> {
    fn modes(&self) -> &[Mode] {
        self.inner.modes()
    }

    fn flow(&self, x: &HybridState, t: f64) -> HybridState {
        self.inner.flow(x, t)
    }

    fn intensity(&self, x: &HybridState) -> f64 {
        self.inner.intensity(x)
    }

    fn exit_time(&self, x: &HybridState) -> f64 {
        self.inner.exit_time(x)
    }

    fn kernel_form(&self) -> KernelForm {
        if self.sampler_only {
            KernelForm::Sampler
        } else {
            self.inner.kernel_form()
        }
    }

    fn jump_outcomes(&self, y: &HybridState) -> Option<Vec<JumpOutcome>> {
        if self.sampler_only {
            None
        } else {
            self.inner.jump_outcomes(y)
        }
    }

    fn sample_jump(&self, y: &HybridState, u: f64) -> Option<HybridState> {
        self.inner.sample_jump(y, u)
    }

    fn max_jumps(&self) -> usize {
        self.inner.max_jumps()
    }
}
