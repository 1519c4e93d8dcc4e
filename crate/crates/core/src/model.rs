//! Domain types shared by every module.
//!
//! All rates and frequencies are angular (rad/s). Fourier convention:
//! `d/dt -> -iω`, so a pure delay `τ` multiplies a response by `exp(+iωτ)`.
//! Displacements are in zero-point units.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

pub type C64 = Complex64;

/// Reduced Planck constant (J·s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Ordinary frequency (Hz) to angular frequency (rad/s).
#[inline]
pub fn hz_to_rad(f: f64) -> f64 {
    2.0 * PI * f
}

/// Angular frequency (rad/s) to ordinary frequency (Hz).
#[inline]
pub fn rad_to_hz(w: f64) -> f64 {
    w / (2.0 * PI)
}

/// Optical mode parameters. `kappa` is stored redundantly and checked
/// against the partial rates in [`validate_system`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    /// Input-mirror decay rate.
    pub kappa0: f64,
    /// Output-mirror decay rate.
    pub kappa_prime: f64,
    /// Remaining losses.
    pub kappa_double_prime: f64,
    /// Total amplitude decay rate.
    pub kappa: f64,
    /// Bare detuning ω_c − ω_L.
    pub delta0: f64,
}

impl CavityParams {
    /// Builds the record with `kappa` set to the sum of the partial rates.
    pub fn from_partial_rates(kappa0: f64, kappa_prime: f64, kappa_double_prime: f64, delta0: f64) -> Self {
        Self {
            kappa0,
            kappa_prime,
            kappa_double_prime,
            kappa: kappa0 + kappa_prime + kappa_double_prime,
            delta0,
        }
    }

    /// Equal split of `kappa` over the three ports.
    pub fn symmetric(kappa: f64, delta0: f64) -> Self {
        let k = kappa / 3.0;
        Self { kappa0: k, kappa_prime: k, kappa_double_prime: kappa - 2.0 * k, kappa, delta0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanicalMode {
    pub omega_m: f64,
    pub gamma_m: f64,
    /// Single-photon coupling g₀.
    pub g0: f64,
    pub n_th: f64,
}

impl MechanicalMode {
    pub fn new(omega_m: f64, gamma_m: f64, g0: f64, n_th: f64) -> Self {
        Self { omega_m, gamma_m, g0, n_th }
    }
}

/// Electronic response shape: magnitude (dB) and phase (rad), each a quartic
/// in the normalized frequency `x = (|f| - center)/half_width`.
///
/// Outside the band `x` is clamped to ±1, so the edge values are held.
/// The phase is odd in ω, which keeps the time-domain kernel real.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseShape {
    pub mag_db: [f64; 5],
    pub phase_rad: [f64; 5],
    /// Band center (rad/s).
    pub center: f64,
    /// Band half-width (rad/s).
    pub half_width: f64,
}

impl ResponseShape {
    /// Unit magnitude, zero phase.
    pub fn flat(center: f64, half_width: f64) -> Self {
        Self { mag_db: [0.0; 5], phase_rad: [0.0; 5], center, half_width }
    }

    /// Normalized, clamped band coordinate of `omega`.
    pub fn band_coordinate(&self, omega: f64) -> f64 {
        ((omega.abs() - self.center) / self.half_width).clamp(-1.0, 1.0)
    }

    pub fn is_flat(&self) -> bool {
        self.mag_db[1..].iter().all(|&c| c == 0.0) && self.phase_rad.iter().all(|&c| c == 0.0)
    }

    pub fn magnitude_db(&self, omega: f64) -> f64 {
        horner(&self.mag_db, self.band_coordinate(omega))
    }

    /// Phase at `omega`, odd in ω.
    pub fn phase(&self, omega: f64) -> f64 {
        if omega == 0.0 {
            return 0.0;
        }
        omega.signum() * horner(&self.phase_rad, self.band_coordinate(omega))
    }

    pub fn eval(&self, omega: f64) -> C64 {
        C64::from_polar(10f64.powf(self.magnitude_db(omega) / 20.0), self.phase(omega))
    }
}

/// Evaluates `c[0] + c[1] x + ... + c[4] x^4`.
pub fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Electronic feedback loop: `g̃_fb(ω) = gain_scale · H(ω) · exp(iωτ_fb)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackFilter {
    pub shape: ResponseShape,
    /// Loop delay (s).
    pub tau_fb: f64,
    /// Detection efficiency.
    pub eta: f64,
    pub gain_scale: f64,
    /// Forces the DC response used for the mean feedback offset to zero
    /// (AC-coupled electronics).
    pub dc_block: bool,
}

impl FeedbackFilter {
    /// Frequency-independent real gain plus delay.
    pub fn flat(gain_scale: f64, tau_fb: f64, eta: f64) -> Self {
        Self { shape: ResponseShape::flat(0.0, 1.0), tau_fb, eta, gain_scale, dc_block: false }
    }

    /// Filter with the loop switched off.
    pub fn off() -> Self {
        Self::flat(0.0, 0.0, 0.0)
    }

    /// Response without the gain scale.
    pub fn unit_response(&self, omega: f64) -> C64 {
        self.shape.eval(omega) * C64::from_polar(1.0, omega * self.tau_fb)
    }

    /// Full response `g̃_fb(ω)`.
    pub fn response(&self, omega: f64) -> C64 {
        self.unit_response(omega) * self.gain_scale
    }

    /// DC value that sets the mean feedback offset.
    pub fn dc_response(&self) -> f64 {
        if self.dc_block {
            0.0
        } else {
            self.response(0.0).re
        }
    }

    pub fn with_gain_scale(mut self, gain_scale: f64) -> Self {
        self.gain_scale = gain_scale;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpParams {
    /// Pump power (W).
    pub power: f64,
    /// Laser wavelength (m).
    pub wavelength: f64,
    /// Pump amplitude sqrt(P/ħω_L) (sqrt(photons/s)).
    pub amplitude: f64,
}

impl PumpParams {
    pub fn new(power: f64, wavelength: f64) -> Self {
        Self { power, wavelength, amplitude: pump_amplitude(power, wavelength) }
    }

    /// A pump with zero power.
    pub fn dark(wavelength: f64) -> Self {
        Self::new(0.0, wavelength)
    }
}

pub fn pump_amplitude(power: f64, wavelength: f64) -> f64 {
    let omega_l = 2.0 * PI * SPEED_OF_LIGHT / wavelength;
    (power / (HBAR * omega_l)).sqrt()
}

/// Mean-field operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    /// Real, non-negative intracavity amplitude.
    pub alpha_s: f64,
    /// Light-shifted detuning Δ.
    pub delta: f64,
    /// Static displacements g₀α²/ω_m.
    pub q_s: [f64; 2],
    /// Mean feedback offset.
    pub phi_bar: f64,
    /// Reference phase arctan(−Δ/κ).
    pub theta_delta: f64,
    /// Other self-consistent detunings found by the multistability scan.
    pub other_branches: Vec<f64>,
}

impl SteadyState {
    /// Operating point with a given amplitude, no static displacement.
    pub fn with_amplitude(alpha_s: f64, delta: f64, kappa: f64) -> Self {
        Self {
            alpha_s,
            delta,
            q_s: [0.0; 2],
            phi_bar: 0.0,
            theta_delta: (-delta / kappa).atan(),
            other_branches: Vec::new(),
        }
    }
}

/// Validated, immutable description of the physical setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub cavity: CavityParams,
    pub modes: [MechanicalMode; 2],
    pub filter: FeedbackFilter,
    pub pump: PumpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ValidationErrors(pub Vec<Violation>);

impl ValidationErrors {
    pub fn fields(&self) -> Vec<&str> {
        self.0.iter().map(|v| v.field.as_str()).collect()
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "invalid system: {}", parts.join("; "))
    }
}

/// Relative tolerance for the stored total decay rate.
const KAPPA_SUM_RTOL: f64 = 1e-12;
/// Relative tolerance for the stored pump amplitude.
const PUMP_RTOL: f64 = 1e-12;

/// Checks every invariant and returns the system record, or all violations.
pub fn validate_system(
    cavity: CavityParams,
    modes: &[MechanicalMode],
    filter: FeedbackFilter,
    pump: PumpParams,
) -> Result<System, ValidationErrors> {
    let mut errs = Vec::new();
    let mut bad = |field: &str, message: String| {
        errs.push(Violation { field: field.to_string(), message })
    };

    for (name, v) in [
        ("cavity.kappa0", cavity.kappa0),
        ("cavity.kappa_prime", cavity.kappa_prime),
        ("cavity.kappa_double_prime", cavity.kappa_double_prime),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            bad(name, format!("must be finite and >= 0, got {v}"));
        }
    }
    if !(cavity.kappa > 0.0 && cavity.kappa.is_finite()) {
        bad("cavity.kappa", format!("must be finite and > 0, got {}", cavity.kappa));
    } else {
        let sum = cavity.kappa0 + cavity.kappa_prime + cavity.kappa_double_prime;
        if (sum - cavity.kappa).abs() > KAPPA_SUM_RTOL * cavity.kappa {
            bad(
                "cavity.kappa",
                format!("total {} differs from kappa0 + kappa_prime + kappa_double_prime = {sum}", cavity.kappa),
            );
        }
    }
    if !cavity.delta0.is_finite() {
        bad("cavity.delta0", "must be finite".into());
    }

    if modes.len() != 2 {
        bad("modes", format!("exactly two mechanical modes required, got {}", modes.len()));
    }
    for (j, m) in modes.iter().enumerate() {
        if !(m.omega_m > 0.0 && m.omega_m.is_finite()) {
            bad(&format!("modes[{j}].omega_m"), format!("must be > 0, got {}", m.omega_m));
        }
        if !(m.gamma_m > 0.0 && m.gamma_m.is_finite()) {
            bad(&format!("modes[{j}].gamma_m"), format!("must be > 0, got {}", m.gamma_m));
        }
        if !m.g0.is_finite() {
            bad(&format!("modes[{j}].g0"), "must be finite".into());
        }
        if !(m.n_th >= 0.0 && m.n_th.is_finite()) {
            bad(&format!("modes[{j}].n_th"), format!("must be >= 0, got {}", m.n_th));
        }
    }

    if !(0.0..=1.0).contains(&filter.eta) {
        bad("filter.eta", format!("must lie in [0, 1], got {}", filter.eta));
    }
    if !(filter.tau_fb >= 0.0 && filter.tau_fb.is_finite()) {
        bad("filter.tau_fb", format!("must be finite and >= 0, got {}", filter.tau_fb));
    }
    if !filter.gain_scale.is_finite() {
        bad("filter.gain_scale", "must be finite".into());
    }
    if !(filter.shape.half_width > 0.0 && filter.shape.half_width.is_finite()) {
        bad("filter.half_width", format!("must be > 0, got {}", filter.shape.half_width));
    }
    if filter.shape.mag_db.iter().chain(filter.shape.phase_rad.iter()).any(|c| !c.is_finite()) {
        bad("filter.coefficients", "polynomial coefficients must be finite".into());
    }

    if !(pump.power >= 0.0 && pump.power.is_finite()) {
        bad("pump.power", format!("must be finite and >= 0, got {}", pump.power));
    }
    if !(pump.wavelength > 0.0 && pump.wavelength.is_finite()) {
        bad("pump.wavelength", format!("must be > 0, got {}", pump.wavelength));
    } else if pump.power >= 0.0 {
        let expect = pump_amplitude(pump.power, pump.wavelength);
        if (expect - pump.amplitude).abs() > PUMP_RTOL * expect.max(f64::MIN_POSITIVE) {
            bad("pump.amplitude", format!("stored {} but power and wavelength give {expect}", pump.amplitude));
        }
    }

    if errs.is_empty() {
        Ok(System { cavity, modes: [modes[0], modes[1]], filter, pump })
    } else {
        Err(ValidationErrors(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mode() -> MechanicalMode {
        MechanicalMode::new(hz_to_rad(546.91e3), hz_to_rad(2.5), hz_to_rad(0.42), 1e3)
    }

    fn pump() -> PumpParams {
        PumpParams::new(74e-6, 1064e-9)
    }

    #[test]
    fn symmetric_partition_is_valid() {
        let k = hz_to_rad(20.1e3);
        let cav = CavityParams::symmetric(k, hz_to_rad(330e3));
        assert!(validate_system(cav, &[mode(), mode()], FeedbackFilter::off(), pump()).is_ok());
    }

    #[test]
    fn inconsistent_kappa_is_named() {
        let mut cav = CavityParams::symmetric(1e5, 1e6);
        cav.kappa *= 1.01;
        let err = validate_system(cav, &[mode(), mode()], FeedbackFilter::off(), pump()).unwrap_err();
        assert_eq!(err.fields(), vec!["cavity.kappa"]);
    }

    #[test]
    fn eta_out_of_range_is_named() {
        let cav = CavityParams::symmetric(1e5, 1e6);
        let filt = FeedbackFilter::flat(1.0, 0.0, 1.2);
        let err = validate_system(cav, &[mode(), mode()], filt, pump()).unwrap_err();
        assert_eq!(err.fields(), vec!["filter.eta"]);
    }

    #[test]
    fn every_violation_is_reported() {
        let mut cav = CavityParams::symmetric(1e5, 1e6);
        cav.kappa0 = -1.0;
        let mut m = mode();
        m.gamma_m = 0.0;
        let filt = FeedbackFilter::flat(1.0, -1e-9, 0.5);
        let err = validate_system(cav, &[m, mode()], filt, pump()).unwrap_err();
        let f = err.fields();
        assert!(f.contains(&"cavity.kappa0"));
        assert!(f.contains(&"cavity.kappa"));
        assert!(f.contains(&"modes[0].gamma_m"));
        assert!(f.contains(&"filter.tau_fb"));
    }

    #[test]
    fn wrong_mode_count_rejected() {
        let cav = CavityParams::symmetric(1e5, 1e6);
        let err = validate_system(cav, &[mode()], FeedbackFilter::off(), pump()).unwrap_err();
        assert_eq!(err.fields(), vec!["modes"]);
    }

    #[test]
    fn pump_amplitude_round_trip() {
        let p = pump();
        // 74 µW at 1064 nm is about 3.96e14 photons/s.
        assert!((p.amplitude * p.amplitude / 3.963e14 - 1.0).abs() < 1e-3);
        let mut tampered = p;
        tampered.amplitude *= 1.0 + 1e-9;
        let cav = CavityParams::symmetric(1e5, 1e6);
        let err = validate_system(cav, &[mode(), mode()], FeedbackFilter::off(), tampered).unwrap_err();
        assert_eq!(err.fields(), vec!["pump.amplitude"]);
    }

    #[test]
    fn filter_reality_condition() {
        let shape = ResponseShape {
            mag_db: [1.0, -2.0, 0.5, 0.1, -0.3],
            phase_rad: [0.4, 1.0, -0.2, 0.05, 0.3],
            center: hz_to_rad(330e3),
            half_width: hz_to_rad(150e3),
        };
        let f = FeedbackFilter { shape, tau_fb: 750e-9, eta: 0.9, gain_scale: -3.0, dc_block: false };
        for w in [1.0, 1e5, 2.0e6, 3.3e6] {
            let a = f.response(w);
            let b = f.response(-w).conj();
            assert!((a - b).norm() <= 1e-14 * a.norm());
        }
        assert_eq!(f.response(0.0).im, 0.0);
    }

    #[test]
    fn flat_filter_is_pure_delay() {
        let f = FeedbackFilter::flat(2.0, 750e-9, 1.0);
        let w = hz_to_rad(330e3);
        let r = f.response(w);
        assert!((r.norm() - 2.0).abs() < 1e-14);
        assert!((r.arg() - w * 750e-9).abs() < 1e-12);
    }

    #[test]
    fn dc_block_zeroes_offset_only() {
        let mut f = FeedbackFilter::flat(2.0, 0.0, 1.0);
        assert_eq!(f.dc_response(), 2.0);
        f.dc_block = true;
        assert_eq!(f.dc_response(), 0.0);
        assert_eq!(f.response(0.0).re, 2.0);
    }
}
