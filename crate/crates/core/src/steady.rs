//! Mean-field fixed point: intracavity amplitude, light-shifted detuning,
//! static displacements and mean feedback offset.

use crate::model::{CavityParams, FeedbackFilter, MechanicalMode, PumpParams, SteadyState, System};
use log::warn;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SteadyStateError {
    #[error("steady state did not converge after {iterations} iterations (residual {residual:.3e} rad/s)")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("mean feedback offset has no finite solution at detuning {delta:.6e} rad/s (DC loop gain too large)")]
    Runaway { delta: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Damping of the fixed-point update on Δ.
    pub damping: f64,
    /// Tolerance on the detuning residual, relative to max(|Δ₀|, κ).
    pub rtol: f64,
    /// Samples of the multistability scan over [Δ₀ − 10κ, Δ₀].
    pub scan_points: usize,
    /// Power steps used to follow the zero-power branch.
    pub continuation_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 500, damping: 0.5, rtol: 1e-13, scan_points: 2001, continuation_steps: 40 }
    }
}

/// Intracavity amplitude at a given effective detuning, with the mean
/// feedback offset solved self-consistently.
///
/// α = c(𝓔 + kα²) with c = √κ₀/|κ + iΔ| and k = η·2κ′·g̃_fb(0); the root that
/// tends to c𝓔 as k → 0 is returned.
pub fn amplitude_at(delta: f64, cavity: &CavityParams, filter: &FeedbackFilter, pump: &PumpParams) -> Result<f64, SteadyStateError> {
    let e = pump.amplitude;
    let c = cavity.kappa0.sqrt() / cavity.kappa.hypot(delta);
    let k = filter.eta * 2.0 * cavity.kappa_prime * filter.dc_response();
    let disc = 1.0 - 4.0 * c * c * k * e;
    if disc < 0.0 {
        return Err(SteadyStateError::Runaway { delta });
    }
    Ok(2.0 * c * e / (1.0 + disc.sqrt()))
}

fn light_shift(alpha: f64, modes: &[MechanicalMode; 2]) -> f64 {
    modes.iter().map(|m| m.g0 * m.g0 * alpha * alpha / m.omega_m).sum()
}

/// Δ₀ − Σ g₀²α(Δ)²/ω_m − Δ.
pub fn detuning_residual(delta: f64, system: &System) -> Result<f64, SteadyStateError> {
    let a = amplitude_at(delta, &system.cavity, &system.filter, &system.pump)?;
    Ok(system.cavity.delta0 - light_shift(a, &system.modes) - delta)
}

/// Bare detuning that produces the requested light-shifted detuning.
/// Explicit: Δ₀ = Δ + Σ g₀²α(Δ)²/ω_m.
pub fn bare_detuning_for(
    delta: f64,
    cavity: &CavityParams,
    modes: &[MechanicalMode; 2],
    filter: &FeedbackFilter,
    pump: &PumpParams,
) -> Result<f64, SteadyStateError> {
    let a = amplitude_at(delta, cavity, filter, pump)?;
    Ok(delta + light_shift(a, modes))
}

fn assemble(system: &System, delta: f64) -> Result<SteadyState, SteadyStateError> {
    let c = &system.cavity;
    let a = amplitude_at(delta, c, &system.filter, &system.pump)?;
    Ok(SteadyState {
        alpha_s: a,
        delta,
        q_s: [0, 1].map(|j| system.modes[j].g0 * a * a / system.modes[j].omega_m),
        phi_bar: system.filter.eta * 2.0 * c.kappa_prime * a * a * system.filter.dc_response(),
        theta_delta: (-delta / c.kappa).atan(),
        other_branches: Vec::new(),
    })
}

/// Damped fixed-point iteration on Δ from `start`; `None` when it stalls.
fn fixed_point(system: &System, start: f64, opts: &SolverOptions, tol: f64) -> Result<Option<f64>, SteadyStateError> {
    let mut d = start;
    let mut best = f64::INFINITY;
    let mut stall = 0;
    for _ in 0..opts.max_iter {
        let r = match detuning_residual(d, system) {
            Ok(r) => r,
            // Overshot into the region without a physical amplitude.
            Err(SteadyStateError::Runaway { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        if r.abs() <= tol {
            return Ok(Some(d));
        }
        if r.abs() < 0.9 * best {
            best = r.abs();
            stall = 0;
        } else {
            stall += 1;
            if stall > 20 {
                return Ok(None);
            }
        }
        d += opts.damping * r;
    }
    Ok(None)
}

fn bisect(system: &System, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64, SteadyStateError> {
    let mut r_lo = detuning_residual(lo, system)?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = detuning_residual(mid, system)?;
        if r.abs() <= tol || (hi - lo) <= f64::EPSILON * mid.abs().max(1.0) {
            return Ok(mid);
        }
        if (r > 0.0) == (r_lo > 0.0) {
            lo = mid;
            r_lo = r;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Roots of the detuning residual inside [Δ₀ − 10κ, Δ₀]. Detunings where the
/// mean feedback offset runs away are skipped.
fn scan_roots(system: &System, opts: &SolverOptions, tol: f64) -> Result<Vec<f64>, SteadyStateError> {
    let d0 = system.cavity.delta0;
    let lo = d0 - 10.0 * system.cavity.kappa;
    let n = opts.scan_points.max(3);
    let mut roots = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..n {
        let d = lo + (d0 - lo) * i as f64 / (n - 1) as f64;
        let r = match detuning_residual(d, system) {
            Ok(r) => r,
            Err(SteadyStateError::Runaway { .. }) => {
                prev = None;
                continue;
            }
            Err(e) => return Err(e),
        };
        if r == 0.0 {
            roots.push(d);
        } else if let Some((pd, pr)) = prev {
            if pr != 0.0 && (r > 0.0) != (pr > 0.0) {
                roots.push(bisect(system, pd, d, tol)?);
            }
        }
        prev = Some((d, r));
    }
    Ok(roots)
}

/// Follows the solution from near-zero power up to the configured pump.
fn continuation_root(system: &System, opts: &SolverOptions, tol: f64) -> Result<f64, SteadyStateError> {
    let mut sys = system.clone();
    let mut d = system.cavity.delta0;
    for k in 1..=opts.continuation_steps {
        let s = k as f64 / opts.continuation_steps as f64;
        sys.pump.power = system.pump.power * s;
        sys.pump.amplitude = system.pump.amplitude * s.sqrt();
        d = match fixed_point(&sys, d, opts, tol)? {
            Some(v) => v,
            None => d,
        };
    }
    Ok(d)
}

/// Solves the mean-field equations with default options.
pub fn solve_steady_state(system: &System) -> Result<SteadyState, SteadyStateError> {
    solve_steady_state_with(system, &SolverOptions::default())
}

pub fn solve_steady_state_with(system: &System, opts: &SolverOptions) -> Result<SteadyState, SteadyStateError> {
    let cav = &system.cavity;
    let d0 = cav.delta0;
    if system.pump.amplitude == 0.0 {
        return assemble(system, d0);
    }
    let tol = opts.rtol * d0.abs().max(cav.kappa);

    let mut roots = scan_roots(system, opts, tol)?;
    let chosen = if roots.len() > 1 {
        let follow = continuation_root(system, opts, tol)?;
        roots.sort_by(|a, b| (a - follow).abs().total_cmp(&(b - follow).abs()));
        warn!(
            "multistable steady state: {} detuning roots, keeping the branch connected to zero power at {:.6e} rad/s",
            roots.len(),
            roots[0]
        );
        roots[0]
    } else if roots.len() == 1 {
        roots[0]
    } else {
        match fixed_point(system, d0, opts, tol)? {
            Some(d) => d,
            None => {
                // The light shift is bounded by its value at Δ = 0, which brackets the root.
                let a_max = amplitude_at(0.0, cav, &system.filter, &system.pump)?;
                let span = light_shift(a_max, &system.modes) * 1.01 + 1e-9 * cav.kappa;
                let d = bisect(system, d0 - span, d0, tol)?;
                let r = detuning_residual(d, system)?;
                if r.abs() > tol {
                    return Err(SteadyStateError::NoConvergence { iterations: opts.max_iter, residual: r.abs() });
                }
                d
            }
        }
    };

    let mut st = assemble(system, chosen)?;
    if roots.len() > 1 {
        st.other_branches = roots[1..].to_vec();
    }
    Ok(st)
}

/// Relative residuals of the amplitude, detuning and offset equations.
pub fn residuals(system: &System, st: &SteadyState) -> [f64; 3] {
    let c = &system.cavity;
    let rel = |a: f64, b: f64, scale: f64| (a - b).abs() / scale.max(f64::MIN_POSITIVE);
    let alpha = c.kappa0.sqrt() / c.kappa.hypot(st.delta) * (system.pump.amplitude + st.phi_bar);
    let delta = c.delta0 - light_shift(st.alpha_s, &system.modes);
    let phi = system.filter.eta * 2.0 * c.kappa_prime * st.alpha_s * st.alpha_s * system.filter.dc_response();
    [
        rel(st.alpha_s, alpha, st.alpha_s.abs()),
        rel(st.delta, delta, c.delta0.abs().max(c.kappa)),
        rel(st.phi_bar, phi, st.phi_bar.abs().max(system.pump.amplitude)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{hz_to_rad, validate_system};

    fn system(power: f64, g: [f64; 2], dc_gain: f64) -> System {
        let cav = CavityParams::symmetric(hz_to_rad(20.1e3), hz_to_rad(560e3));
        let modes = [
            MechanicalMode::new(hz_to_rad(546.91e3), hz_to_rad(2.5), g[0], 1e7),
            MechanicalMode::new(hz_to_rad(547.26e3), hz_to_rad(3.0), g[1], 1e7),
        ];
        let filt = FeedbackFilter::flat(dc_gain, 750e-9, 0.9);
        validate_system(cav, &modes, filt, PumpParams::new(power, 1064e-9)).unwrap()
    }

    #[test]
    fn dark_pump_is_trivial() {
        let s = system(0.0, [hz_to_rad(0.42), hz_to_rad(0.67)], 0.0);
        let st = solve_steady_state(&s).unwrap();
        assert_eq!(st.alpha_s, 0.0);
        assert_eq!(st.delta, s.cavity.delta0);
        assert_eq!(st.q_s, [0.0, 0.0]);
        assert_eq!(st.phi_bar, 0.0);
    }

    #[test]
    fn decoupled_closed_form() {
        let s = system(74e-6, [0.0, 0.0], 0.0);
        let st = solve_steady_state(&s).unwrap();
        let c = &s.cavity;
        let expect = c.kappa0.sqrt() * s.pump.amplitude / c.kappa.hypot(c.delta0);
        assert!((st.alpha_s / expect - 1.0).abs() < 1e-14);
        assert_eq!(st.delta, c.delta0);
    }

    #[test]
    fn linear_in_pump_amplitude_when_decoupled() {
        let a1 = solve_steady_state(&system(10e-6, [0.0, 0.0], 0.0)).unwrap().alpha_s;
        let a4 = solve_steady_state(&system(40e-6, [0.0, 0.0], 0.0)).unwrap().alpha_s;
        assert!((a4 / a1 - 2.0).abs() < 1e-13);
    }

    #[test]
    fn residuals_small_with_feedback_offset() {
        let s = system(74e-6, [hz_to_rad(0.42), hz_to_rad(0.67)], 1e-5);
        let st = solve_steady_state(&s).unwrap();
        assert!(st.phi_bar != 0.0);
        for r in residuals(&s, &st) {
            assert!(r < 1e-10, "residual {r}");
        }
    }

    #[test]
    fn runaway_dc_loop_reported() {
        let s = system(74e-6, [0.0, 0.0], 1.0);
        assert!(matches!(solve_steady_state(&s), Err(SteadyStateError::Runaway { .. })));
    }

    #[test]
    fn bare_detuning_inverse() {
        let s = system(74e-6, [hz_to_rad(42.0), hz_to_rad(67.0)], 0.0);
        let target = hz_to_rad(560e3);
        let d0 = bare_detuning_for(target, &s.cavity, &s.modes, &s.filter, &s.pump).unwrap();
        let mut s2 = s.clone();
        s2.cavity.delta0 = d0;
        let st = solve_steady_state(&s2).unwrap();
        assert!((st.delta - target).abs() < 1e-9 * target);
        assert!(d0 > target);
    }

    #[test]
    fn bistable_branch_follows_zero_power() {
        // Δ₀ = 5κ with g₀²κ₀𝓔²/ω_m = 10κ³ gives three roots of
        // (Δ₀ − Δ)(κ² + Δ²) = g₀²κ₀𝓔²/ω_m.
        let mut s = system(1e-9, [hz_to_rad(3e3), 0.0], 0.0);
        let c = s.cavity;
        let e2 = 10.0 * c.kappa.powi(3) * s.modes[0].omega_m / (c.kappa0 * s.modes[0].g0.powi(2));
        let wl = s.pump.wavelength;
        s.pump = PumpParams::new(e2 * crate::model::HBAR * 2.0 * std::f64::consts::PI * crate::model::SPEED_OF_LIGHT / wl, wl);
        s.cavity.delta0 = 5.0 * c.kappa;
        let st = solve_steady_state(&s).unwrap();
        assert!(!st.other_branches.is_empty(), "expected several branches");
        // Zero-power branch is the one closest to Δ₀ (smallest light shift).
        assert_eq!(st.other_branches.len(), 2);
        for b in &st.other_branches {
            assert!(st.delta > *b);
        }
        assert!(detuning_residual(st.delta, &s).unwrap().abs() < 1e-6);
    }
}
