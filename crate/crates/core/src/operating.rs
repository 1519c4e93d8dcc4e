//! A system together with its solved mean-field operating point.

use crate::cavity::{self, PoleProximity};
use crate::model::{System, SteadyState, C64};
use crate::steady::{solve_steady_state, SteadyStateError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GainError {
    #[error(transparent)]
    SteadyState(#[from] SteadyStateError),
    #[error("cannot normalize gain: Re 𝒯(Δ) of the unit filter is zero (no light or no detection?)")]
    Undefined,
    #[error("gain normalization did not converge (last relative change {0:.3e})")]
    NoConvergence(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub system: System,
    pub steady: SteadyState,
}

impl OperatingPoint {
    /// Solves the steady state with the filter's gain_scale as given.
    pub fn new(system: System) -> Result<Self, SteadyStateError> {
        let steady = solve_steady_state(&system)?;
        Ok(Self { system, steady })
    }

    /// Sets gain_scale so that Re 𝒯(Δ) = `target`.
    ///
    /// When the filter passes DC the mean offset changes α_s and therefore 𝒯,
    /// so the steady state and gain are iterated together.
    pub fn with_gain(mut system: System, target: f64) -> Result<Self, GainError> {
        system.filter.gain_scale = 0.0;
        let mut op = Self::new(system.clone())?;
        if target == 0.0 {
            return Ok(op);
        }
        let mut last = f64::NAN;
        for _ in 0..200 {
            let s = &op.system;
            let gs = cavity::gain_scale_for(target, &s.cavity, &s.filter, &op.steady).ok_or(GainError::Undefined)?;
            let change = ((gs - last) / gs).abs();
            system.filter.gain_scale = gs;
            op = Self::new(system.clone())?;
            if op.system.filter.dc_response() == 0.0 || change < 1e-14 {
                return Ok(op);
            }
            last = gs;
        }
        Err(GainError::NoConvergence(((system.filter.gain_scale - last) / last).abs()))
    }

    /// 𝒢 = Re 𝒯(Δ).
    pub fn gain(&self) -> f64 {
        self.transfer(self.steady.delta).re
    }

    pub fn kappa(&self) -> f64 {
        self.system.cavity.kappa
    }

    pub fn chi_c(&self, omega: f64) -> C64 {
        cavity::bare_susceptibility(omega, &self.system.cavity, &self.steady)
    }

    pub fn chi_fb(&self, omega: f64) -> C64 {
        cavity::loop_gain(omega, &self.system.cavity, &self.system.filter, &self.steady)
    }

    pub fn chi_eff(&self, omega: f64) -> Result<C64, PoleProximity> {
        cavity::effective_susceptibility(omega, &self.system.cavity, &self.system.filter, &self.steady)
    }

    pub fn transfer(&self, omega: f64) -> C64 {
        cavity::open_loop_transfer(omega, &self.system.cavity, &self.system.filter, &self.steady)
    }

    pub fn loop_factor(&self, omega: f64) -> C64 {
        cavity::loop_factor(omega, &self.system.cavity, &self.system.filter, &self.steady)
    }

    /// (κ_eff, Δ_eff).
    pub fn effective_linewidth_detuning(&self) -> (f64, f64) {
        cavity::effective_linewidth_detuning(&self.system.cavity, &self.system.filter, &self.steady)
    }

    pub fn transmission(&self, omega: f64) -> Result<C64, PoleProximity> {
        cavity::transmission_coefficient(omega, &self.system.cavity, &self.system.filter, &self.steady)
    }

    /// Paper margin max Re L(ω) over the default grid.
    pub fn stability_margin(&self) -> cavity::StabilityMargin {
        let (c, f, s) = (&self.system.cavity, &self.system.filter, &self.steady);
        cavity::stability_margin(c, f, s, &cavity::margin_grid(c, f, s))
    }
}
