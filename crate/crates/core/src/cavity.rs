//! Bare and feedback-modified cavity response.

use crate::model::{CavityParams, FeedbackFilter, SteadyState, C64};
use log::warn;

/// |1 − L(ω)| below this fraction of |χ_fb·χ_c| is treated as a pole.
pub const POLE_PROXIMITY_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("effective susceptibility has a pole at ω = {omega:.6e} rad/s (|denominator| = {denominator:.3e})")]
pub struct PoleProximity {
    pub omega: f64,
    pub denominator: f64,
}

/// χ_c(ω) = 1/(κ − i(ω − Δ)).
#[inline]
pub fn bare_susceptibility(omega: f64, cavity: &CavityParams, steady: &SteadyState) -> C64 {
    C64::new(cavity.kappa, -(omega - steady.delta)).inv()
}

/// χ_fb(ω) = η·√(2κ₀)·2κ′·α_s·g̃_fb(ω).
#[inline]
pub fn loop_gain(omega: f64, cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> C64 {
    filter.response(omega) * loop_prefactor(cavity, filter, steady)
}

/// η·√(2κ₀)·2κ′·α_s, the factor multiplying g̃_fb in χ_fb.
#[inline]
pub fn loop_prefactor(cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> f64 {
    filter.eta * (2.0 * cavity.kappa0).sqrt() * 2.0 * cavity.kappa_prime * steady.alpha_s
}

/// L(ω) = χ_fb(ω)[χ_c(ω)e^{−iθ} + χ_c*(−ω)e^{iθ}], the loop factor whose
/// real part is the stability margin.
pub fn loop_factor(omega: f64, cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> C64 {
    let ph = C64::from_polar(1.0, -steady.theta_delta);
    let c_plus = bare_susceptibility(omega, cavity, steady);
    let c_minus = bare_susceptibility(-omega, cavity, steady).conj();
    loop_gain(omega, cavity, filter, steady) * (c_plus * ph + c_minus * ph.conj())
}

/// χ_eff(ω) = χ_c(ω)/(1 − L(ω)).
pub fn effective_susceptibility(
    omega: f64,
    cavity: &CavityParams,
    filter: &FeedbackFilter,
    steady: &SteadyState,
) -> Result<C64, PoleProximity> {
    let chi = bare_susceptibility(omega, cavity, steady);
    let fb = loop_gain(omega, cavity, filter, steady);
    let den = 1.0 - loop_factor(omega, cavity, filter, steady);
    if den.norm() < POLE_PROXIMITY_RTOL * (fb * chi).norm() {
        return Err(PoleProximity { omega, denominator: den.norm() });
    }
    Ok(chi / den)
}

/// 𝒯(ω) = χ_fb(ω)χ_c(ω)e^{−iθ}.
pub fn open_loop_transfer(omega: f64, cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> C64 {
    loop_gain(omega, cavity, filter, steady)
        * bare_susceptibility(omega, cavity, steady)
        * C64::from_polar(1.0, -steady.theta_delta)
}

/// (κ_eff, Δ_eff) = (κ(1 − Re𝒯(Δ)), Δ − κ Im𝒯(Δ)).
pub fn effective_linewidth_detuning(cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> (f64, f64) {
    if steady.delta.abs() < 10.0 * cavity.kappa {
        warn!(
            "effective linewidth/detuning assume Δ ≫ κ; Δ/κ = {:.2}",
            steady.delta / cavity.kappa
        );
    }
    let t = open_loop_transfer(steady.delta, cavity, filter, steady);
    (cavity.kappa * (1.0 - t.re), steady.delta - cavity.kappa * t.im)
}

/// 2√(κ₀κ′) e^{−iθ} χ_eff(ω).
pub fn transmission_coefficient(
    omega: f64,
    cavity: &CavityParams,
    filter: &FeedbackFilter,
    steady: &SteadyState,
) -> Result<C64, PoleProximity> {
    let chi = effective_susceptibility(omega, cavity, filter, steady)?;
    Ok(transmission_prefactor(cavity, steady) * chi)
}

/// 2√(κ₀κ′) e^{−iθ}/(κ_eff − i(ω − Δ_eff)).
pub fn transmission_lorentzian(omega: f64, cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> C64 {
    let (k, d) = effective_linewidth_detuning(cavity, filter, steady);
    transmission_prefactor(cavity, steady) / C64::new(k, -(omega - d))
}

fn transmission_prefactor(cavity: &CavityParams, steady: &SteadyState) -> C64 {
    C64::from_polar(2.0 * (cavity.kappa0 * cavity.kappa_prime).sqrt(), -steady.theta_delta)
}

/// gain_scale that makes Re𝒯(Δ) equal to `target` at a fixed operating point.
pub fn gain_scale_for(target: f64, cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> Option<f64> {
    let unit = open_loop_transfer(steady.delta, cavity, &filter.with_gain_scale(1.0), steady).re;
    if target == 0.0 {
        return Some(0.0);
    }
    (unit != 0.0 && unit.is_finite()).then(|| target / unit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityMargin {
    /// max over the grid of Re L(ω).
    pub max_margin: f64,
    pub omega_at_max: f64,
    /// max_margin ≤ 1.
    pub stable: bool,
    /// Whether the grid met the coverage and resolution requirement.
    pub resolved: bool,
}

/// Evaluates the frequency-domain stability condition Re L(ω) ≤ 1 on `grid`.
pub fn stability_margin(cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState, grid: &[f64]) -> StabilityMargin {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &w in grid {
        let m = loop_factor(w, cavity, filter, steady).re;
        if m > best.0 {
            best = (m, w);
        }
    }
    let resolved = grid_resolves(cavity, filter, steady, grid);
    if !resolved {
        warn!("stability grid does not cover [0, Δ + 10κ] at κ_eff/10 resolution");
    }
    StabilityMargin { max_margin: best.0, omega_at_max: best.1, stable: best.0 <= 1.0, resolved }
}

/// Step required by the stability scan: κ_eff/10, floored at κ/1000.
pub fn margin_resolution(cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> f64 {
    let t = open_loop_transfer(steady.delta, cavity, filter, steady);
    let k_eff = (cavity.kappa * (1.0 - t.re)).abs();
    (k_eff / 10.0).clamp(cavity.kappa / 1000.0, cavity.kappa / 10.0)
}

fn grid_resolves(cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState, grid: &[f64]) -> bool {
    if grid.len() < 2 {
        return false;
    }
    let need = steady.delta.abs() + 10.0 * cavity.kappa;
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let step = margin_resolution(cavity, filter, steady);
    let max_gap = grid.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    lo <= 0.0 && hi >= need && max_gap <= step * (1.0 + 1e-9)
}

/// Uniform grid over [0, |Δ| + 10κ] at the required resolution.
pub fn margin_grid(cavity: &CavityParams, filter: &FeedbackFilter, steady: &SteadyState) -> Vec<f64> {
    let hi = steady.delta.abs() + 10.0 * cavity.kappa;
    let step = margin_resolution(cavity, filter, steady);
    let n = (hi / step).ceil() as usize + 1;
    (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect()
}

/// All cavity-side quantities at one frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopResponse {
    pub omega: f64,
    pub chi_c: C64,
    pub chi_eff: C64,
    pub transfer: C64,
    pub t_coeff: C64,
    /// Re L(ω).
    pub margin: f64,
}

pub fn loop_response(
    omega: f64,
    cavity: &CavityParams,
    filter: &FeedbackFilter,
    steady: &SteadyState,
) -> Result<LoopResponse, PoleProximity> {
    let chi_eff = effective_susceptibility(omega, cavity, filter, steady)?;
    Ok(LoopResponse {
        omega,
        chi_c: bare_susceptibility(omega, cavity, steady),
        chi_eff,
        transfer: open_loop_transfer(omega, cavity, filter, steady),
        t_coeff: transmission_prefactor(cavity, steady) * chi_eff,
        margin: loop_factor(omega, cavity, filter, steady).re,
    })
}
