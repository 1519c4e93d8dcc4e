//! Noise-to-displacement transfer, symmetrized spectra, occupancies and sweeps.
//!
//! Outputs are ordered (δa, δa†, δq₁, δq₂). Inputs are the optical operator
//! pairs (a_in, a_in†), (a′, a′†), (a″, a″†), (c, c†) and the thermal forces ξ₁, ξ₂.

use crate::closed_loop;
use crate::mechanics::{self, MechanicsError};
use crate::model::{System, C64};
use crate::operating::{GainError, OperatingPoint};
use crate::steady;
use log::warn;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseChannelId {
    AIn,
    AInPrime,
    AInDPrime,
    CVac,
    Xi1,
    Xi2,
}

impl NoiseChannelId {
    pub const OPTICAL: [NoiseChannelId; 4] = [Self::AIn, Self::AInPrime, Self::AInDPrime, Self::CVac];

    pub fn name(&self) -> &'static str {
        match self {
            Self::AIn => "a_in",
            Self::AInPrime => "a_in_prime",
            Self::AInDPrime => "a_in_dprime",
            Self::CVac => "c_vac",
            Self::Xi1 => "xi_1",
            Self::Xi2 => "xi_2",
        }
    }
}

/// A white input with its correlator densities (⟨xx†⟩, ⟨x†x⟩). Thermal forces
/// are Hermitian and carry the symmetric density γ(2n_th + 1) in both slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseChannel {
    pub id: NoiseChannelId,
    pub correlator: (f64, f64),
}

impl NoiseChannel {
    /// Symmetrized density applied to |path|².
    pub fn symmetric_density(&self) -> f64 {
        0.5 * (self.correlator.0 + self.correlator.1)
    }
}

pub fn noise_channels(system: &System) -> [NoiseChannel; 6] {
    let th = |j: usize| {
        let m = &system.modes[j];
        let d = m.gamma_m * (2.0 * m.n_th + 1.0);
        (d, d)
    };
    [
        NoiseChannel { id: NoiseChannelId::AIn, correlator: (1.0, 0.0) },
        NoiseChannel { id: NoiseChannelId::AInPrime, correlator: (1.0, 0.0) },
        NoiseChannel { id: NoiseChannelId::AInDPrime, correlator: (1.0, 0.0) },
        NoiseChannel { id: NoiseChannelId::CVac, correlator: (1.0, 0.0) },
        NoiseChannel { id: NoiseChannelId::Xi1, correlator: th(0) },
        NoiseChannel { id: NoiseChannelId::Xi2, correlator: th(1) },
    ]
}

/// Number of input columns: four optical pairs and two thermal forces.
pub const INPUTS: usize = 10;

/// Total path coefficients at one frequency. `coeff[out][col]` with outputs
/// (δa, δa†, δq₁, δq₂) and columns
/// (a_in, a_in†, a′, a′†, a″, a″†, c, c†, ξ₁, ξ₂).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePaths {
    pub omega: f64,
    pub coeff: [[C64; INPUTS]; 4],
}

impl NoisePaths {
    /// Coefficients of channel `id` into output `out`: (operator, conjugate).
    /// Thermal channels return their single coefficient in the first slot.
    pub fn channel(&self, out: usize, id: NoiseChannelId) -> (C64, C64) {
        let c = &self.coeff[out];
        match id {
            NoiseChannelId::AIn => (c[0], c[1]),
            NoiseChannelId::AInPrime => (c[2], c[3]),
            NoiseChannelId::AInDPrime => (c[4], c[5]),
            NoiseChannelId::CVac => (c[6], c[7]),
            NoiseChannelId::Xi1 => (c[8], C64::new(0.0, 0.0)),
            NoiseChannelId::Xi2 => (c[9], C64::new(0.0, 0.0)),
        }
    }
}

/// ñ and ñ† as coefficient rows over the input columns, including the
/// detection-noise part of the feedback.
pub fn cavity_noise_rows(omega: f64, op: &OperatingPoint) -> ([C64; INPUTS], [C64; INPUTS]) {
    let c = &op.system.cavity;
    let f = &op.system.filter;
    let a = op.steady.alpha_s;
    let ph = C64::from_polar(1.0, -op.steady.theta_delta);
    let g = f.response(omega);
    let s0 = (2.0 * c.kappa0).sqrt();
    let sp = (2.0 * c.kappa_prime).sqrt();
    let spp = (2.0 * c.kappa_double_prime).sqrt();
    // δΦ_n = u·(a′ + a′†) + v·(c + c†).
    let u = -g * (f.eta * sp * a);
    let v = g * ((f.eta * (1.0 - f.eta)).sqrt() * sp * a);

    let zero = C64::new(0.0, 0.0);
    let mut n = [zero; INPUTS];
    let mut nd = [zero; INPUTS];
    for (row, p, own) in [(&mut n, ph * s0, 0usize), (&mut nd, ph.conj() * s0, 1usize)] {
        row[own] = p;
        row[2] += p * u;
        row[3] += p * u;
        row[6] = p * v;
        row[7] = p * v;
    }
    n[2] += sp;
    nd[3] += sp;
    n[4] = C64::new(spp, 0.0);
    nd[5] = C64::new(spp, 0.0);
    (n, nd)
}

/// Path coefficients from every input to every output at `omega`, summing
/// direct and feedback routes before any modulus is taken.
pub fn assemble_noise_paths(omega: f64, op: &OperatingPoint) -> Result<NoisePaths, MechanicsError> {
    let (n, nd) = cavity_noise_rows(omega, op);
    let chi_c = op.chi_c(omega);
    let chi_cm = op.chi_c(-omega).conj();
    let chi_e = op.chi_eff(omega)?;
    let chi_em = op.chi_eff(-omega)?.conj();
    let chi_fb = op.chi_fb(omega);
    let ph = C64::from_polar(1.0, -op.steady.theta_delta);
    let a = op.steady.alpha_s;
    let g = [op.system.modes[0].g0, op.system.modes[1].g0];
    let mat = mechanics::coupled_matrix(omega, op)?;

    let zero = C64::new(0.0, 0.0);
    let mut coeff = [[zero; INPUTS]; 4];
    for col in 0..INPUTS {
        let xi = [(col == 8) as u8 as f64, (col == 9) as u8 as f64];
        // Amplitude quadrature driven by the optical inputs at fixed q.
        let s_open = chi_e * n[col] + chi_em * nd[col];
        let rhs = [C64::new(xi[0], 0.0) + s_open * (g[0] * a), C64::new(xi[1], 0.0) + s_open * (g[1] * a)];
        let q = mechanics::solve2(omega, &mat, &rhs)?;
        let gq = q[0] * g[0] + q[1] * g[1];
        let s = s_open + C64::i() * a * (chi_e - chi_em) * gq;
        let da = chi_c * (n[col] + C64::i() * a * gq + chi_fb * ph * s);
        let dad = chi_cm * (nd[col] - C64::i() * a * gq + chi_fb * ph.conj() * s);
        coeff[0][col] = da;
        coeff[1][col] = dad;
        coeff[2][col] = q[0];
        coeff[3][col] = q[1];
    }
    Ok(NoisePaths { omega, coeff })
}

/// Symmetrized density of output `out` given the path coefficients.
pub fn symmetrized_density(paths: &NoisePaths, out: usize, channels: &[NoiseChannel; 6]) -> f64 {
    let c = &paths.coeff[out];
    let vac: f64 = (0..4)
        .map(|k| channels[k].symmetric_density() * (c[2 * k].norm_sqr() + c[2 * k + 1].norm_sqr()))
        .sum();
    vac + channels[4].symmetric_density() * c[8].norm_sqr() + channels[5].symmetric_density() * c[9].norm_sqr()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumResult {
    pub omega_grid: Vec<f64>,
    pub s_q1: Vec<f64>,
    pub s_q2: Vec<f64>,
    /// Per-mode occupancy when the grid was built for integration.
    pub n_m: Option<[f64; 2]>,
    /// Display-only noise floor; never integrated.
    pub shot_floor: Option<f64>,
}

impl SpectrumResult {
    pub fn mode(&self, j: usize) -> &[f64] {
        if j == 0 {
            &self.s_q1
        } else {
            &self.s_q2
        }
    }
}

/// S̄_q1 and S̄_q2 over `grid`.
pub fn displacement_spectrum(op: &OperatingPoint, grid: &[f64]) -> Result<SpectrumResult, MechanicsError> {
    check_resolution(op, grid);
    let ch = noise_channels(&op.system);
    let vals: Result<Vec<(f64, f64)>, MechanicsError> = grid
        .par_iter()
        .map(|&w| {
            let p = assemble_noise_paths(w, op)?;
            Ok((symmetrized_density(&p, 2, &ch), symmetrized_density(&p, 3, &ch)))
        })
        .collect();
    let vals = vals?;
    Ok(SpectrumResult {
        omega_grid: grid.to_vec(),
        s_q1: vals.iter().map(|v| v.0).collect(),
        s_q2: vals.iter().map(|v| v.1).collect(),
        n_m: None,
        shot_floor: None,
    })
}

fn check_resolution(op: &OperatingPoint, grid: &[f64]) {
    for (j, m) in op.system.modes.iter().enumerate() {
        // Resolution is judged against the optically damped linewidth.
        let g = effective_damping(op, j);
        let coarse = grid
            .windows(2)
            .filter(|w| (w[0] - m.omega_m).abs() < 5.0 * g || (w[1] - m.omega_m).abs() < 5.0 * g)
            .any(|w| (w[1] - w[0]).abs() > g / 10.0);
        if coarse {
            warn!("spectrum grid is coarser than γ_eff/10 near ω_m = {:.6e} rad/s", m.omega_m);
        }
    }
}

/// Effective damping γ − Im Σ_jj(ω_j); falls back to γ when not positive.
pub fn effective_damping(op: &OperatingPoint, j: usize) -> f64 {
    let m = &op.system.modes[j];
    match mechanics::self_energy(j, j, m.omega_m, op) {
        Ok(s) if m.gamma_m - s.im > 0.0 => m.gamma_m - s.im,
        _ => m.gamma_m,
    }
}

/// Integration window (center, half-width) for mode j.
///
/// Each mode gets ±50γ_eff; when the two windows overlap both modes use the
/// joint window widened to at least 10|ω₁ − ω₂| beyond the outer peaks.
pub fn mode_window(op: &OperatingPoint, j: usize) -> (f64, f64) {
    let m = &op.system.modes;
    let w = [50.0 * effective_damping(op, 0), 50.0 * effective_damping(op, 1)];
    let sep = (m[0].omega_m - m[1].omega_m).abs();
    if sep < w[0] + w[1] {
        let pad = w[0].max(w[1]).max(10.0 * sep);
        let lo = m[0].omega_m.min(m[1].omega_m) - pad;
        let hi = m[0].omega_m.max(m[1].omega_m) + pad;
        (0.5 * (lo + hi), 0.5 * (hi - lo))
    } else {
        (m[j].omega_m, w[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyEstimate {
    pub n_m: f64,
    /// ⟨δq²⟩ over the window.
    pub variance: f64,
    /// Lorentzian extrapolation of the area outside the window, relative.
    pub tail_fraction: f64,
    pub window: (f64, f64),
}

/// Trapezoidal n_m + ½ = (1/2π)∫S̄ dω over the mode windows at ±ω_m, using
/// the grid points of `spectrum` inside `window` = (lo, hi). S̄ is even in ω,
/// so the negative-frequency window contributes the same area.
pub fn phonon_occupancy(spectrum: &SpectrumResult, mode: usize, window: (f64, f64)) -> OccupancyEstimate {
    let s = spectrum.mode(mode);
    let w = &spectrum.omega_grid;
    let idx: Vec<usize> = (0..w.len()).filter(|&i| w[i] >= window.0 && w[i] <= window.1).collect();
    let mut area = 0.0;
    for p in idx.windows(2) {
        area += 0.5 * (s[p[0]] + s[p[1]]) * (w[p[1]] - w[p[0]]);
    }
    let variance = area / std::f64::consts::PI;
    let tail_fraction = match (idx.first(), idx.last()) {
        (Some(&a), Some(&b)) if b > a => {
            let imax = (a..=b).max_by(|&x, &y| s[x].total_cmp(&s[y])).unwrap();
            let c = w[imax];
            let tail = s[a] * (c - w[a]).abs() + s[b] * (w[b] - c).abs();
            tail / area.max(f64::MIN_POSITIVE)
        }
        _ => f64::INFINITY,
    };
    if tail_fraction > 0.01 {
        warn!("occupancy window for mode {} misses an estimated {:.2}% of the spectrum", mode + 1, 100.0 * tail_fraction);
    }
    OccupancyEstimate { n_m: variance - 0.5, variance, tail_fraction, window }
}

/// Grid for the occupancy integrals: uniform over the union of both mode
/// windows with step min(γ_eff)/20.
pub fn occupancy_grid(op: &OperatingPoint) -> Vec<f64> {
    let step = (0..2).map(|j| effective_damping(op, j)).fold(f64::INFINITY, f64::min) / 20.0;
    let mut ranges: Vec<(f64, f64)> = (0..2)
        .map(|j| {
            let (c, h) = mode_window(op, j);
            (c - h, c + h)
        })
        .collect();
    ranges.sort_by(|a, b| a.0.total_cmp(&b.0));
    if ranges[1].0 <= ranges[0].1 {
        ranges = vec![(ranges[0].0, ranges[0].1.max(ranges[1].1))];
    }
    let mut grid = Vec::new();
    for (lo, hi) in ranges {
        let n = ((hi - lo) / step).ceil() as usize + 1;
        grid.extend((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64));
    }
    grid
}

/// Spectrum on the occupancy grid and both occupancies.
pub fn occupancies(op: &OperatingPoint) -> Result<(SpectrumResult, [OccupancyEstimate; 2]), MechanicsError> {
    let grid = occupancy_grid(op);
    let mut spec = displacement_spectrum(op, &grid)?;
    let est = [0, 1].map(|j| {
        let (c, h) = mode_window(op, j);
        phonon_occupancy(&spec, j, (c - h, c + h))
    });
    spec.n_m = Some([est[0].n_m, est[1].n_m]);
    Ok((spec, est))
}

/// 𝒞_j = 4 g₀,j² α_s²/(κ γ_m,j).
pub fn cooperativity(mode: &crate::model::MechanicalMode, steady: &crate::model::SteadyState, cavity: &crate::model::CavityParams) -> f64 {
    4.0 * mode.g0 * mode.g0 * steady.alpha_s * steady.alpha_s / (cavity.kappa * mode.gamma_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Light-shifted detuning Δ (rad/s).
    Detuning,
    /// Normalized gain 𝒢.
    Gain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub n_m: [f64; 2],
    pub kappa_eff: f64,
    pub delta_eff: f64,
    /// Paper margin max Re L(ω).
    pub margin: f64,
    /// Closed-loop poles in the upper half-plane.
    pub unstable_poles: usize,
    pub stable: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Gain 𝒢 held while sweeping detuning; `None` keeps gain_scale fixed.
    pub gain: Option<f64>,
    /// Detuning held while sweeping gain; `None` uses the system's own.
    pub detuning: Option<f64>,
}

fn sweep_point(base: &System, spec: &SweepSpec, value: f64) -> Result<SweepRow, String> {
    let mut sys = base.clone();
    let target_delta = match spec.axis {
        SweepAxis::Detuning => Some(value),
        SweepAxis::Gain => spec.detuning,
    };
    if let Some(d) = target_delta {
        let mut probe = sys.clone();
        if spec.gain.is_some() || spec.axis == SweepAxis::Gain {
            probe.filter.gain_scale = 0.0;
        }
        sys.cavity.delta0 = steady::bare_detuning_for(d, &probe.cavity, &probe.modes, &probe.filter, &probe.pump)
            .map_err(|e| e.to_string())?;
    }
    let gain = match spec.axis {
        SweepAxis::Gain => Some(value),
        SweepAxis::Detuning => spec.gain,
    };
    let op = match gain {
        Some(g) => OperatingPoint::with_gain(sys, g),
        None => OperatingPoint::new(sys).map_err(GainError::from),
    }
    .map_err(|e| e.to_string())?;
    let (kappa_eff, delta_eff) = op.effective_linewidth_detuning();
    let margin = op.stability_margin().max_margin;
    let poles = closed_loop::unstable_pole_count(&op).map_err(|e| e.to_string())?;
    let mut row = SweepRow {
        value,
        n_m: [f64::NAN; 2],
        kappa_eff,
        delta_eff,
        margin,
        unstable_poles: poles,
        stable: poles == 0,
        error: None,
    };
    if row.stable {
        let (_, est) = occupancies(&op).map_err(|e| e.to_string())?;
        row.n_m = [est[0].n_m, est[1].n_m];
    }
    Ok(row)
}

/// Evaluates occupancies along a detuning or gain axis. Unstable points are
/// flagged and skipped; per-point failures are recorded and the sweep goes on.
pub fn sweep(base: &System, spec: &SweepSpec, values: &[f64]) -> Vec<SweepRow> {
    values
        .par_iter()
        .map(|&v| {
            sweep_point(base, spec, v).unwrap_or_else(|e| SweepRow {
                value: v,
                n_m: [f64::NAN; 2],
                kappa_eff: f64::NAN,
                delta_eff: f64::NAN,
                margin: f64::NAN,
                unstable_poles: 0,
                stable: false,
                error: Some(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    fn op(g: [f64; 2], n_th: f64, gain: f64, eta: f64) -> OperatingPoint {
        let cav = CavityParams::symmetric(hz_to_rad(20.1e3), hz_to_rad(560e3));
        let modes = [
            MechanicalMode::new(hz_to_rad(546.91e3), hz_to_rad(2.5), hz_to_rad(g[0]), n_th),
            MechanicalMode::new(hz_to_rad(547.26e3), hz_to_rad(3.0), hz_to_rad(g[1]), n_th),
        ];
        let mut f = FeedbackFilter::flat(1.0, 0.0, eta);
        f.dc_block = true;
        let s = validate_system(cav, &modes, f, PumpParams::new(74e-6, 1064e-9)).unwrap();
        OperatingPoint::with_gain(s, gain).unwrap()
    }

    #[test]
    fn no_detection_no_feedback_noise() {
        let mut o = op([0.42, 0.67], 1e3, 0.0, 0.0);
        o.system.filter.gain_scale = 1e-5;
        let (n, nd) = cavity_noise_rows(3.4e6, &o);
        for col in [3, 6, 7] {
            assert_eq!(n[col], C64::new(0.0, 0.0));
        }
        assert_eq!(nd[2], C64::new(0.0, 0.0));
    }

    #[test]
    fn perfect_detection_removes_vacuum_port() {
        let o = op([0.42, 0.67], 1e3, 0.5, 1.0);
        let p = assemble_noise_paths(3.43e6, &o).unwrap();
        for out in 0..4 {
            let (x, y) = p.channel(out, NoiseChannelId::CVac);
            assert_eq!((x, y), (C64::new(0.0, 0.0), C64::new(0.0, 0.0)));
        }
    }

    #[test]
    fn decoupled_mode_is_thermal_lorentzian() {
        let o = op([0.0, 0.0], 1e3, 0.5, 0.9);
        let m = o.system.modes[0];
        let ch = noise_channels(&o.system);
        for dw in [-300.0, -10.0, 0.0, 3.0, 500.0] {
            let w = m.omega_m + dw;
            let p = assemble_noise_paths(w, &o).unwrap();
            let s = symmetrized_density(&p, 2, &ch);
            let expect = m.gamma_m * (2.0 * m.n_th + 1.0) * m.omega_m * m.omega_m
                / ((m.omega_m * m.omega_m - w * w).powi(2) + (w * m.gamma_m).powi(2));
            assert!((s / expect - 1.0).abs() < 1e-12, "{s} vs {expect}");
        }
    }

    #[test]
    fn decoupled_mode_occupancy_is_thermal() {
        let o = op([0.0, 0.0], 1e3, 0.0, 0.9);
        let (_, est) = occupancies(&o).unwrap();
        for e in est {
            // ±50γ misses 1 − (2/π)·atan(100) of a Lorentzian.
            let expect = (1e3 + 0.5) * (2.0 / std::f64::consts::PI) * 100f64.atan() - 0.5;
            assert!((e.n_m / expect - 1.0).abs() < 1e-4, "{} vs {expect}", e.n_m);
        }
    }

    #[test]
    fn cooperativity_scaling() {
        let o = op([0.42, 0.67], 1e3, 0.0, 0.9);
        let c = cooperativity(&o.system.modes[1], &o.steady, &o.system.cavity);
        let mut st = o.steady.clone();
        st.alpha_s *= 2.0;
        let c2 = cooperativity(&o.system.modes[1], &st, &o.system.cavity);
        assert!((c2 / c - 4.0).abs() < 1e-14);
        st.alpha_s = 0.0;
        assert_eq!(cooperativity(&o.system.modes[1], &st, &o.system.cavity), 0.0);
    }

    #[test]
    fn spectra_nonnegative() {
        let o = op([0.42, 0.67], 1e4, 0.9, 0.9);
        let grid: Vec<f64> = (0..400).map(|i| 3.40e6 + 200.0 * i as f64).collect();
        let s = displacement_spectrum(&o, &grid).unwrap();
        assert!(s.s_q1.iter().chain(s.s_q2.iter()).all(|&v| v >= 0.0));
    }
}
