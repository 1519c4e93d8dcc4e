//! Mechanical susceptibilities, optomechanical self-energies and the
//! bright/dark description of the doublet.
//!
//! Eliminating the cavity from the linearized equations gives
//! `χ_m,j⁻¹ δq_j + Σ_jk Σ_jk δq_k = 𝒩_j` with
//! `Σ_jk = i g_j g_k α² [χ_eff*(−ω) − χ_eff(ω)]`.

use crate::cavity::PoleProximity;
use crate::model::{MechanicalMode, C64};
use crate::operating::OperatingPoint;

/// Separation/coupling ratio above which the bright and dark modes count
/// as hybridized.
pub const HYBRIDIZATION_FACTOR: f64 = 10.0;

/// Reciprocal condition number below which the 2×2 solve is rejected.
const SINGULAR_RCOND: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MechanicsError {
    #[error(transparent)]
    Pole(#[from] PoleProximity),
    #[error("coupled mode matrix is near-singular at ω = {omega:.6e} rad/s (condition ≈ {condition:.3e})")]
    NearSingular { omega: f64, condition: f64 },
    #[error("bright/dark basis undefined: both couplings are zero")]
    UndefinedBasis,
}

/// χ_m⁻¹(ω) = (ω_m² − ω² − iωγ_m)/ω_m.
#[inline]
pub fn mech_susceptibility_inv(omega: f64, mode: &MechanicalMode) -> C64 {
    C64::new(mode.omega_m * mode.omega_m - omega * omega, -omega * mode.gamma_m) / mode.omega_m
}

/// i α²[χ_eff*(−ω) − χ_eff(ω)], the self-energy per unit g_i g_j.
pub fn self_energy_kernel(omega: f64, op: &OperatingPoint) -> Result<C64, PoleProximity> {
    let a2 = op.steady.alpha_s * op.steady.alpha_s;
    let plus = op.chi_eff(omega)?;
    let minus = op.chi_eff(-omega)?.conj();
    Ok(C64::i() * a2 * (minus - plus))
}

/// Σ_ij(ω).
pub fn self_energy(i: usize, j: usize, omega: f64, op: &OperatingPoint) -> Result<C64, PoleProximity> {
    let m = &op.system.modes;
    // g_i g_j first, so that Σ_ij and Σ_ji are bitwise equal.
    Ok(self_energy_kernel(omega, op)? * (m[i].g0 * m[j].g0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfEnergyMatrix {
    pub omega: f64,
    pub sigma: [[C64; 2]; 2],
}

pub fn self_energy_matrix(omega: f64, op: &OperatingPoint) -> Result<SelfEnergyMatrix, PoleProximity> {
    let k = self_energy_kernel(omega, op)?;
    let g = [op.system.modes[0].g0, op.system.modes[1].g0];
    let off = k * (g[0] * g[1]);
    Ok(SelfEnergyMatrix { omega, sigma: [[k * (g[0] * g[0]), off], [off, k * (g[1] * g[1])]] })
}

/// The coupled 2×2 matrix [[χ₁⁻¹ + Σ₁₁, Σ₁₂], [Σ₂₁, χ₂⁻¹ + Σ₂₂]].
pub fn coupled_matrix(omega: f64, op: &OperatingPoint) -> Result<[[C64; 2]; 2], PoleProximity> {
    let s = self_energy_matrix(omega, op)?.sigma;
    let m = &op.system.modes;
    Ok([
        [mech_susceptibility_inv(omega, &m[0]) + s[0][0], s[0][1]],
        [s[1][0], mech_susceptibility_inv(omega, &m[1]) + s[1][1]],
    ])
}

/// Solves a 2×2 complex system, rejecting near-singular matrices.
pub fn solve2(omega: f64, a: &[[C64; 2]; 2], rhs: &[C64; 2]) -> Result<[C64; 2], MechanicsError> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    // Frobenius-norm condition estimate: ‖A‖²/|det A|.
    let fro2: f64 = a.iter().flatten().map(|z| z.norm_sqr()).sum();
    let rcond = det.norm() / fro2.max(f64::MIN_POSITIVE);
    if !(rcond > SINGULAR_RCOND) {
        return Err(MechanicsError::NearSingular { omega, condition: 1.0 / rcond });
    }
    Ok([(a[1][1] * rhs[0] - a[0][1] * rhs[1]) / det, (a[0][0] * rhs[1] - a[1][0] * rhs[0]) / det])
}

/// δq̃ for the given noise functionals 𝒩.
pub fn solve_displacement_response(omega: f64, op: &OperatingPoint, noise: &[C64; 2]) -> Result<[C64; 2], MechanicsError> {
    solve2(omega, &coupled_matrix(omega, op)?, noise)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrightDarkBasis {
    pub mu1: f64,
    pub mu2: f64,
    pub omega_b: f64,
    pub omega_d: f64,
    /// Re Σ_bb(ω_b).
    pub delta_omega_b: f64,
}

impl BrightDarkBasis {
    /// (q_b, q_d) from (q₁, q₂). The rotation is its own inverse.
    pub fn rotate<T>(&self, q: [T; 2]) -> [T; 2]
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + std::ops::Sub<Output = T>,
    {
        [q[0] * self.mu1 + q[1] * self.mu2, q[0] * self.mu2 - q[1] * self.mu1]
    }
}

fn mixing(op: &OperatingPoint) -> Result<(f64, f64), MechanicsError> {
    let g = [op.system.modes[0].g0, op.system.modes[1].g0];
    let norm = g[0].hypot(g[1]);
    if norm == 0.0 {
        return Err(MechanicsError::UndefinedBasis);
    }
    Ok((g[0] / norm, g[1] / norm))
}

pub fn bright_dark_basis(op: &OperatingPoint) -> Result<BrightDarkBasis, MechanicsError> {
    let (mu1, mu2) = mixing(op)?;
    let m = &op.system.modes;
    let omega_b = mu1 * mu1 * m[0].omega_m + mu2 * mu2 * m[1].omega_m;
    let omega_d = mu2 * mu2 * m[0].omega_m + mu1 * mu1 * m[1].omega_m;
    let s = self_energy_matrix(omega_b, op)?.sigma;
    Ok(BrightDarkBasis { mu1, mu2, omega_b, omega_d, delta_omega_b: (s[0][0] + s[1][1]).re })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrightDarkSelfEnergies {
    pub bb: C64,
    pub bd: C64,
    pub dd: C64,
}

/// Σ_bb = Σ₁₁ + Σ₂₂ and Σ_bd = μ₁μ₂(χ₁⁻¹ − χ₂⁻¹); Σ_dd is the rotated
/// element μ₂²Σ₁₁ − 2μ₁μ₂Σ₁₂ + μ₁²Σ₂₂ so that its vanishing is checked rather
/// than assumed. The rotated optomechanical part of Σ_bd is added so the
/// rotated system is exact.
pub fn bright_dark_self_energies(omega: f64, op: &OperatingPoint) -> Result<BrightDarkSelfEnergies, MechanicsError> {
    let (mu1, mu2) = mixing(op)?;
    let s = self_energy_matrix(omega, op)?.sigma;
    let m = &op.system.modes;
    let bare = (mech_susceptibility_inv(omega, &m[0]) - mech_susceptibility_inv(omega, &m[1])) * (mu1 * mu2);
    let rot_bd = (s[0][0] - s[1][1]) * (mu1 * mu2) + s[0][1] * (mu2 * mu2 - mu1 * mu1);
    Ok(BrightDarkSelfEnergies {
        bb: s[0][0] + s[1][1],
        bd: bare + rot_bd,
        dd: s[0][0] * (mu2 * mu2) - s[0][1] * (2.0 * mu1 * mu2) + s[1][1] * (mu1 * mu1),
    })
}

/// Solves the coupled system in the bright/dark basis and rotates back.
pub fn solve_bright_dark(omega: f64, op: &OperatingPoint, noise: &[C64; 2]) -> Result<[C64; 2], MechanicsError> {
    let basis_mix = mixing(op)?;
    let (mu1, mu2) = basis_mix;
    let m = &op.system.modes;
    let se = bright_dark_self_energies(omega, op)?;
    let (c1, c2) = (mech_susceptibility_inv(omega, &m[0]), mech_susceptibility_inv(omega, &m[1]));
    let chi_b = c1 * (mu1 * mu1) + c2 * (mu2 * mu2);
    let chi_d = c1 * (mu2 * mu2) + c2 * (mu1 * mu1);
    let a = [[chi_b + se.bb, se.bd], [se.bd, chi_d + se.dd]];
    let rot = |v: [C64; 2]| [v[0] * mu1 + v[1] * mu2, v[0] * mu2 - v[1] * mu1];
    Ok(rot(solve2(omega, &a, &rot(*noise))?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hybridization {
    /// |ω_b + δω_b − ω_d|.
    pub separation: f64,
    /// max |Σ_bd(ω)| over the scan window.
    pub max_coupling: f64,
    pub hybridized: bool,
}

impl Hybridization {
    pub fn ratio(&self) -> f64 {
        self.separation / self.max_coupling
    }
}

pub fn hybridization_check(op: &OperatingPoint) -> Result<Hybridization, MechanicsError> {
    let b = bright_dark_basis(op)?;
    let m = &op.system.modes;
    let gbar = 0.5 * (m[0].gamma_m + m[1].gamma_m);
    let (lo, hi) = {
        let a = b.omega_d - 100.0 * gbar;
        let z = b.omega_b + b.delta_omega_b + 100.0 * gbar;
        (a.min(z), a.max(z))
    };
    const POINTS: usize = 2001;
    let mut max_coupling: f64 = 0.0;
    for i in 0..POINTS {
        let w = lo + (hi - lo) * i as f64 / (POINTS - 1) as f64;
        max_coupling = max_coupling.max(bright_dark_self_energies(w, op)?.bd.norm());
    }
    let separation = (b.omega_b + b.delta_omega_b - b.omega_d).abs();
    Ok(Hybridization { separation, max_coupling, hybridized: separation > HYBRIDIZATION_FACTOR * max_coupling })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    fn op(g: [f64; 2], w: [f64; 2], gain: f64) -> OperatingPoint {
        let cav = CavityParams::symmetric(hz_to_rad(20.1e3), hz_to_rad(560e3));
        let modes = [
            MechanicalMode::new(hz_to_rad(w[0]), hz_to_rad(2.5), hz_to_rad(g[0]), 1e3),
            MechanicalMode::new(hz_to_rad(w[1]), hz_to_rad(3.0), hz_to_rad(g[1]), 1e3),
        ];
        let mut f = FeedbackFilter::flat(1.0, 0.0, 0.9);
        f.dc_block = true;
        let s = validate_system(cav, &modes, f, PumpParams::new(74e-6, 1064e-9)).unwrap();
        OperatingPoint::with_gain(s, gain).unwrap()
    }

    #[test]
    fn inverse_susceptibility_identities() {
        let m = MechanicalMode::new(3.4e6, 15.7, 0.0, 0.0);
        let on = mech_susceptibility_inv(m.omega_m, &m);
        assert!(on.re.abs() < 1e-9 * m.gamma_m);
        assert!((on.im + m.gamma_m).abs() < 1e-9 * m.gamma_m);
        assert_eq!(mech_susceptibility_inv(0.0, &m), C64::new(m.omega_m, 0.0));
    }

    #[test]
    fn zero_coupling_gives_zero_self_energy() {
        let o = op([0.0, 0.67], [546.91e3, 547.26e3], 0.5);
        assert_eq!(self_energy(0, 0, 3.4e6, &o).unwrap(), C64::new(0.0, 0.0));
        assert_eq!(self_energy(0, 1, 3.4e6, &o).unwrap(), C64::new(0.0, 0.0));
    }

    #[test]
    fn self_energy_symmetric() {
        let o = op([0.42, 0.67], [546.91e3, 547.26e3], 0.7);
        for w in [3.0e6, 3.43e6, 3.6e6] {
            let (a, b) = (self_energy(0, 1, w, &o).unwrap(), self_energy(1, 0, w, &o).unwrap());
            assert!((a - b).norm() <= 1e-15 * a.norm());
        }
    }

    #[test]
    fn red_detuning_damps() {
        let o = op([0.42, 0.67], [546.91e3, 547.26e3], 0.0);
        // Extra damping shows up as −Im Σ_jj(ω_m) > 0.
        let s = self_energy(1, 1, o.system.modes[1].omega_m, &o).unwrap();
        assert!(s.im < 0.0);
    }

    #[test]
    fn paper_mixing_amplitudes() {
        let o = op([0.42, 0.67], [546.91e3, 547.26e3], 0.0);
        let b = bright_dark_basis(&o).unwrap();
        assert!((b.mu1 * b.mu1 - 0.2821).abs() < 1e-4);
        assert!((b.mu2 * b.mu2 - 0.7179).abs() < 1e-4);
        assert!((rad_to_hz(b.omega_b) - 547.161e3).abs() < 1.0);
        assert!((rad_to_hz(b.omega_d) - 547.009e3).abs() < 1.0);
        assert!((b.mu1 * b.mu1 + b.mu2 * b.mu2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_coupled_mode_is_bright() {
        let o = op([0.42, 0.0], [546.91e3, 547.26e3], 0.0);
        let b = bright_dark_basis(&o).unwrap();
        assert_eq!((b.mu1, b.mu2), (1.0, 0.0));
        assert_eq!(b.omega_b, o.system.modes[0].omega_m);
    }

    #[test]
    fn equal_couplings_split_evenly() {
        let o = op([0.5, 0.5], [546.91e3, 547.26e3], 0.0);
        let b = bright_dark_basis(&o).unwrap();
        assert!((b.mu1 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((b.mu2 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn undefined_basis() {
        let o = op([0.0, 0.0], [546.91e3, 547.26e3], 0.0);
        assert_eq!(bright_dark_basis(&o).unwrap_err(), MechanicsError::UndefinedBasis);
    }

    #[test]
    fn degenerate_modes_decouple_dark() {
        let o = op([0.42, 0.67], [547e3, 547e3], 0.5);
        let mut o2 = o.clone();
        o2.system.modes[1].gamma_m = o2.system.modes[0].gamma_m;
        let se = bright_dark_self_energies(3.43e6, &o2).unwrap();
        assert!(se.bd.norm() <= 1e-12 * se.bb.norm());
        let h = hybridization_check(&o2).unwrap();
        assert!(h.max_coupling <= 1e-12 * h.separation.max(1.0));
        assert!(h.hybridized);
    }

    #[test]
    fn rotation_is_involution() {
        let o = op([0.42, 0.67], [546.91e3, 547.26e3], 0.0);
        let b = bright_dark_basis(&o).unwrap();
        let q = [C64::new(0.3, -1.2), C64::new(-2.0, 0.7)];
        let back = b.rotate(b.rotate(q));
        for k in 0..2 {
            assert!((back[k] - q[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn near_singular_reported() {
        let a = [[C64::new(1.0, 0.0), C64::new(2.0, 0.0)], [C64::new(2.0, 0.0), C64::new(4.0, 0.0)]];
        let e = solve2(1.0, &a, &[C64::new(1.0, 0.0); 2]).unwrap_err();
        assert!(matches!(e, MechanicsError::NearSingular { .. }));
    }
}
