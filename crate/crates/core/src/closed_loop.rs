//! Exact closed-loop stability of the coupled cavity/doublet system.
//!
//! The linearized equations for (δa, δa†, δq₁, δq₂) read M(ω)·x = inputs. With
//! the e^{−iωt} convention a growing solution is a zero of det M in the upper
//! half-plane. The open-loop reference M₀ (feedback and optomechanical
//! coupling removed) has all its zeros in the lower half-plane, so the number
//! of unstable poles equals the winding of det M/det M₀ along the real axis.
//! The filter enters only through its real-frequency response, which is
//! assumed to belong to a causal, stable element.

use crate::model::C64;
use crate::operating::OperatingPoint;
use nalgebra::Matrix4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClosedLoopError {
    #[error("closed-loop determinant vanishes on the real axis near ω = {0:.6e} rad/s (marginal stability)")]
    Marginal(f64),
    #[error("winding number not resolved (accumulated phase {0:.4} π)")]
    Unresolved(f64),
}

/// M(ω)·M₀(ω)⁻¹ − I folded into one matrix: rows scaled by the open-loop
/// diagonal so that the determinant is det M/det M₀ directly.
pub fn normalized_matrix(omega: f64, op: &OperatingPoint) -> Matrix4<C64> {
    let c = &op.system.cavity;
    let d = op.steady.delta;
    let a = op.steady.alpha_s;
    let ph = C64::from_polar(1.0, -op.steady.theta_delta);
    let fb = op.chi_fb(omega);
    let g = [op.system.modes[0].g0 * a, op.system.modes[1].g0 * a];
    let i = C64::i();
    let diag = [
        C64::new(c.kappa, d - omega),
        C64::new(c.kappa, -d - omega),
        crate::mechanics::mech_susceptibility_inv(omega, &op.system.modes[0]),
        crate::mechanics::mech_susceptibility_inv(omega, &op.system.modes[1]),
    ];
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    let rows = [
        [diag[0] - fb * ph, -fb * ph, -i * g[0], -i * g[1]],
        [-fb * ph.conj(), diag[1] - fb * ph.conj(), i * g[0], i * g[1]],
        [-C64::from(g[0]), -C64::from(g[0]), diag[2], z],
        [-C64::from(g[1]), -C64::from(g[1]), z, diag[3]],
    ];
    let mut m = Matrix4::from_element(z);
    for r in 0..4 {
        for k in 0..4 {
            m[(r, k)] = if r == k { o + (rows[r][k] - diag[r]) / diag[r] } else { rows[r][k] / diag[r] };
        }
    }
    m
}

/// f(ω) = det M(ω)/det M₀(ω).
pub fn characteristic_ratio(omega: f64, op: &OperatingPoint) -> C64 {
    normalized_matrix(omega, op).determinant()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub unstable_poles: usize,
    /// Accumulated arg f over [0, ∞) in units of π.
    pub winding: f64,
    pub evaluations: usize,
}

const MAX_STEP_PHASE: f64 = 0.5;
const MAX_DEPTH: u32 = 50;

struct Walker<'a> {
    op: &'a OperatingPoint,
    phase: f64,
    evals: usize,
    floor: f64,
}

impl Walker<'_> {
    fn eval(&mut self, w: f64) -> Result<C64, ClosedLoopError> {
        self.evals += 1;
        let f = characteristic_ratio(w, self.op);
        if !(f.norm() > self.floor) {
            return Err(ClosedLoopError::Marginal(w));
        }
        Ok(f)
    }

    fn step(&mut self, wa: f64, fa: C64, wb: f64, fb: C64, depth: u32) -> Result<(), ClosedLoopError> {
        let d = (fb / fa).arg();
        if d.abs() <= MAX_STEP_PHASE || depth >= MAX_DEPTH {
            self.phase += d;
            return Ok(());
        }
        let wm = 0.5 * (wa + wb);
        let fm = self.eval(wm)?;
        self.step(wa, fa, wm, fm, depth + 1)?;
        self.step(wm, fm, wb, fb, depth + 1)
    }
}

/// Frequencies that must be resolved: the open-loop features plus dense
/// patches around each mechanical resonance.
fn base_grid(op: &OperatingPoint) -> Vec<f64> {
    let c = &op.system.cavity;
    let tau = op.system.filter.tau_fb;
    let mut step = c.kappa / 4.0;
    if tau > 0.0 {
        step = step.min(0.3 / tau);
    }
    let wmax_mech = op.system.modes.iter().map(|m| m.omega_m).fold(0.0, f64::max);
    let end = 3.0 * op.steady.delta.abs().max(wmax_mech) + 20.0 * c.kappa;
    let n = (end / step).ceil() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();

    // Around each resonance: γ/8 spacing within ±50γ, then geometric out to
    // the self-energy scale (and the doublet spacing when the modes are close).
    let sep = (op.system.modes[0].omega_m - op.system.modes[1].omega_m).abs();
    for (j, m) in op.system.modes.iter().enumerate() {
        let sigma = crate::mechanics::self_energy(j, j, m.omega_m, op).map(|s| s.norm()).unwrap_or(0.0);
        let near = 50.0 * m.gamma_m;
        let mut half = near + 4.0 * sigma;
        if sep < 100.0 * (m.gamma_m + sigma) {
            half += 10.0 * sep;
        }
        let h = m.gamma_m / 8.0;
        let k = (near / h).ceil() as usize;
        for i in 0..=k {
            grid.push(m.omega_m + i as f64 * h);
            grid.push(m.omega_m - i as f64 * h);
        }
        let mut off = near;
        while off < half {
            off *= 1.02;
            grid.push(m.omega_m + off);
            grid.push(m.omega_m - off);
        }
    }
    grid.retain(|&w| w >= 0.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Counts closed-loop poles with Im ω > 0 by the argument principle.
pub fn stability_report(op: &OperatingPoint) -> Result<StabilityReport, ClosedLoopError> {
    let grid = base_grid(op);
    let mut walker = Walker { op, phase: 0.0, evals: 0, floor: 1e-300 };
    let mut wa = grid[0];
    let mut fa = walker.eval(wa)?;
    for &wb in &grid[1..] {
        let fb = walker.eval(wb)?;
        walker.step(wa, fa, wb, fb, 0)?;
        wa = wb;
        fa = fb;
    }
    // Continue outward until f has settled near 1.
    let mut step = grid[1] - grid[0];
    let tau = op.system.filter.tau_fb;
    let mut guard = 0;
    while (fa - 1.0).norm() >= 0.05 || guard < 10 {
        let wb = wa + step;
        let fb = walker.eval(wb)?;
        walker.step(wa, fa, wb, fb, 0)?;
        wa = wb;
        fa = fb;
        if tau == 0.0 {
            step *= 1.05;
        }
        guard += 1;
        if guard > 10_000_000 {
            return Err(ClosedLoopError::Unresolved(walker.phase / std::f64::consts::PI));
        }
    }
    // Remaining phase to the limit f(∞) = 1.
    walker.phase += (C64::new(1.0, 0.0) / fa).arg();
    let winding = walker.phase / std::f64::consts::PI;
    let n = winding.round();
    if (winding - n).abs() > 0.1 || n < 0.0 {
        return Err(ClosedLoopError::Unresolved(winding));
    }
    Ok(StabilityReport { unstable_poles: n as usize, winding, evaluations: walker.evals })
}

pub fn unstable_pole_count(op: &OperatingPoint) -> Result<usize, ClosedLoopError> {
    stability_report(op).map(|r| r.unstable_poles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    fn op(gain: f64, tau: f64, g0_hz: f64) -> OperatingPoint {
        let cav = CavityParams::symmetric(hz_to_rad(20.1e3), hz_to_rad(560e3));
        let m = [
            MechanicalMode::new(hz_to_rad(546.91e3), hz_to_rad(2.5), hz_to_rad(g0_hz), 1e3),
            MechanicalMode::new(hz_to_rad(547.26e3), hz_to_rad(3.0), hz_to_rad(g0_hz), 1e3),
        ];
        let mut f = FeedbackFilter::flat(1.0, tau, 0.9);
        f.dc_block = true;
        let s = validate_system(cav, &m, f, PumpParams::new(74e-6, 1064e-9)).unwrap();
        OperatingPoint::with_gain(s, gain).unwrap()
    }

    #[test]
    fn open_loop_is_unity() {
        let o = op(0.0, 0.0, 0.0);
        for w in [0.0, 1e5, 3.5e6, -2e6] {
            assert!((characteristic_ratio(w, &o) - 1.0).norm() < 1e-14);
        }
        assert_eq!(unstable_pole_count(&o).unwrap(), 0);
    }

    #[test]
    fn conjugate_symmetry() {
        let o = op(0.7, 750e-9, 0.67);
        for w in [1e4, 3.43e6, 7e6] {
            let (p, m) = (characteristic_ratio(w, &o), characteristic_ratio(-w, &o));
            assert!((p - m.conj()).norm() < 1e-12 * p.norm());
        }
    }

    /// Flat magnitude with a constant phase that makes 𝒯(Δ) real.
    fn compensated(gain: f64) -> OperatingPoint {
        let mut o = op(0.0, 0.0, 0.0);
        let mut sys = o.system.clone();
        sys.filter.shape.phase_rad[0] = o.steady.theta_delta;
        o = OperatingPoint::with_gain(sys, gain).unwrap();
        assert!(o.transfer(o.steady.delta).im.abs() < 1e-9);
        o
    }

    #[test]
    fn compensated_threshold_at_unit_gain() {
        assert_eq!(unstable_pole_count(&compensated(0.5)).unwrap(), 0);
        assert_eq!(unstable_pole_count(&compensated(0.95)).unwrap(), 0);
        assert!(unstable_pole_count(&compensated(1.05)).unwrap() >= 1);
    }

    #[test]
    fn real_flat_filter_unstable_at_dc_above_half() {
        // Without delay the loop factor at ω = 0 is 2𝒢, real and positive.
        let o = op(0.49, 0.0, 0.0);
        assert!((o.loop_factor(0.0).re - 0.98).abs() < 1e-9);
        assert_eq!(unstable_pole_count(&o).unwrap(), 0);
        assert_eq!(unstable_pole_count(&op(0.51, 0.0, 0.0)).unwrap(), 1);
    }
}
