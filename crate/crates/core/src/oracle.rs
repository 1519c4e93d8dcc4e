//! Stochastic time-domain integration of the linearized Langevin equations
//! with delayed feedback.
//!
//! State: (Re δa, Im δa, δq₁, p₁, δq₂, p₂). The homogeneous part is propagated
//! exactly with e^{A·dt}; the feedback input is held first-order over each
//! step and white noise is injected at the half step. A feedback delay shorter
//! than one step is solved implicitly.

use crate::model::C64;
use crate::operating::OperatingPoint;
use log::warn;
use nalgebra::SMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;

pub const STATE_DIM: usize = 6;
pub const CHANNEL_NAMES: [&str; STATE_DIM] = ["re_da", "im_da", "q1", "p1", "q2", "p2"];

/// Amplitude growth, relative to the initial scale, treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Thermal forces only.
    ClassicalThermal,
    /// Thermal forces plus vacuum on every optical input.
    SemiclassicalWithVacuum,
    /// Deterministic evolution from the initial state.
    Noiseless,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub duration: f64,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    /// Keep every n-th step.
    pub record_every: usize,
    /// Time integrated before recording starts (s).
    pub burn_in: f64,
    pub record: [bool; STATE_DIM],
    pub initial: [f64; STATE_DIM],
    /// Run even if the exact stability check finds unstable poles.
    pub allow_unstable: bool,
    /// FIR length for non-flat filter shapes (odd).
    pub fir_taps: usize,
    /// Set when the run feeds a spectral estimate; enforces the duration bound.
    pub spectral: bool,
}

impl TrajectoryConfig {
    pub fn new(dt: f64, duration: f64, seed: u64, noise_mode: NoiseMode) -> Self {
        Self {
            dt,
            duration,
            seed,
            noise_mode,
            record_every: 1,
            burn_in: 0.0,
            record: [true; STATE_DIM],
            initial: [0.0; STATE_DIM],
            allow_unstable: false,
            fir_taps: 1025,
            spectral: false,
        }
    }
}

/// Largest step allowed by the integrator: min(1/κ, 1/ω_m,j)/20.
pub fn max_step(op: &OperatingPoint) -> f64 {
    let mut t = 1.0 / op.system.cavity.kappa;
    for m in &op.system.modes {
        t = t.min(1.0 / m.omega_m);
    }
    t / 20.0
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("time step {dt:.3e} s exceeds the limit {max:.3e} s")]
    StepTooLarge { dt: f64, max: f64 },
    #[error("invalid trajectory configuration: {0}")]
    Config(String),
    #[error("configuration has {0} unstable closed-loop poles")]
    Unstable(usize),
    #[error("trajectory diverged at t = {time:.6e} s (|x| = {amplitude:.3e}, scale {scale:.3e})")]
    Diverged { time: f64, amplitude: f64, scale: f64 },
    #[error("FIR half-length {half:.3e} s exceeds the feedback delay {tau:.3e} s")]
    FilterLongerThanDelay { half: f64, tau: f64 },
    #[error(transparent)]
    Stability(#[from] crate::closed_loop::ClosedLoopError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Spacing of recorded samples (s).
    pub sample_dt: f64,
    /// Time of the first recorded sample (s).
    pub t0: f64,
    /// Recorded channels; empty where not requested.
    pub channels: [Vec<f64>; STATE_DIM],
    /// max |δa|/α_s over the recorded samples: linearization check.
    pub max_fluctuation_ratio: f64,
    pub steps: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.channels.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Mat = [[f64; STATE_DIM]; STATE_DIM];
type Vec6 = [f64; STATE_DIM];

fn matvec(m: &Mat, v: &Vec6) -> Vec6 {
    let mut out = [0.0; STATE_DIM];
    for (o, row) in out.iter_mut().zip(m) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

/// How the detected signal is turned into the modulation u(t).
#[derive(Debug, Clone, PartialEq)]
pub enum FilterRealization {
    /// u(t) = k·s(t − τ).
    Tap { gain: f64, tau: f64 },
    /// u(t) = Σ_m k_m s(t − τ − m·dt).
    Fir { taps: Vec<f64>, tau: f64 },
}

/// Discrete realization of the loop filter at step `dt`.
///
/// A flat shape is a single tap. Otherwise the response without delay is
/// sampled on a fine grid, transformed to a centered kernel of `n_taps`
/// samples under a Hann window, and the kernel half-length is taken out of
/// the delay line.
pub fn realize_filter(op: &OperatingPoint, dt: f64, n_taps: usize) -> Result<FilterRealization, OracleError> {
    let f = &op.system.filter;
    if f.gain_scale == 0.0 || f.shape.is_flat() {
        let gain = f.gain_scale * 10f64.powf(f.shape.mag_db[0] / 20.0);
        return Ok(FilterRealization::Tap { gain, tau: f.tau_fb });
    }
    if n_taps % 2 == 0 || n_taps < 3 {
        return Err(OracleError::Config(format!("fir_taps must be odd and ≥ 3, got {n_taps}")));
    }
    let c = (n_taps - 1) / 2;
    let half = c as f64 * dt;
    if half > f.tau_fb {
        return Err(OracleError::FilterLongerThanDelay { half, tau: f.tau_fb });
    }
    let n = (8 * n_taps).next_power_of_two();
    let mut buf: Vec<C64> = (0..n)
        .map(|j| {
            let k = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            let w = 2.0 * std::f64::consts::PI * k / (n as f64 * dt);
            f.shape.eval(w) * f.gain_scale * C64::from_polar(1.0, w * c as f64 * dt)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let taps = (0..n_taps)
        .map(|m| {
            let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * m as f64 / (n_taps - 1) as f64).cos();
            buf[m].re / n as f64 * hann
        })
        .collect();
    Ok(FilterRealization::Fir { taps, tau: f.tau_fb - half })
}

struct Propagators {
    phi: Mat,
    phi_half: Mat,
    gamma0: Vec6,
    gamma1: Vec6,
}

fn drift_matrix(op: &OperatingPoint) -> (SMatrix<f64, 6, 6>, Vec6, Vec6) {
    let c = &op.system.cavity;
    let d = op.steady.delta;
    let a = op.steady.alpha_s;
    let th = op.steady.theta_delta;
    let mut m = SMatrix::<f64, 6, 6>::zeros();
    m[(0, 0)] = -c.kappa;
    m[(0, 1)] = d;
    m[(1, 0)] = -d;
    m[(1, 1)] = -c.kappa;
    for (j, mode) in op.system.modes.iter().enumerate() {
        let (iq, ip) = (2 + 2 * j, 3 + 2 * j);
        m[(1, iq)] = a * mode.g0;
        m[(iq, ip)] = mode.omega_m;
        m[(ip, iq)] = -mode.omega_m;
        m[(ip, ip)] = -mode.gamma_m;
        m[(ip, 0)] = 2.0 * mode.g0 * a;
    }
    let s0 = (2.0 * c.kappa0).sqrt();
    let b = [s0 * th.cos(), -s0 * th.sin(), 0.0, 0.0, 0.0, 0.0];
    let f = &op.system.filter;
    let cvec = [f.eta * 2.0 * c.kappa_prime * a * 2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    (m, b, cvec)
}

fn to_array(m: &SMatrix<f64, 6, 6>) -> Mat {
    let mut out = [[0.0; 6]; 6];
    for (r, row) in out.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = m[(r, k)];
        }
    }
    out
}

fn propagators(a: &SMatrix<f64, 6, 6>, b: &Vec6, h: f64) -> Propagators {
    // exp of [[A, b, 0], [0, 0, 1/h], [0, 0, 0]]·h gives Φ, Γ0 and Γ1.
    let mut aug = SMatrix::<f64, 8, 8>::zeros();
    for r in 0..6 {
        for k in 0..6 {
            aug[(r, k)] = a[(r, k)] * h;
        }
        aug[(r, 6)] = b[r] * h;
    }
    aug[(6, 7)] = 1.0;
    let e = aug.exp();
    let mut phi = [[0.0; 6]; 6];
    let mut g0 = [0.0; 6];
    let mut g1 = [0.0; 6];
    for r in 0..6 {
        for k in 0..6 {
            phi[r][k] = e[(r, k)];
        }
        g0[r] = e[(r, 6)];
        g1[r] = e[(r, 7)];
    }
    let phi_half = to_array(&(a * (0.5 * h)).exp());
    Propagators { phi, phi_half, gamma0: g0, gamma1: g1 }
}

/// Noise loadings for one step.
struct NoiseModel {
    /// Per-step standard deviations of the thermal momentum kicks.
    thermal: [f64; 2],
    /// Vacuum on, with per-quadrature standard deviation √(dt/4).
    vacuum: bool,
    quad_sd: f64,
    s0: f64,
    sp: f64,
    spp: f64,
    theta: f64,
    /// Loadings of 2Re a′ and 2Re c onto the detected signal.
    det_prime: f64,
    det_vac: f64,
}

struct StepNoise {
    /// Increment applied to the state.
    w: Vec6,
    /// Detection-noise contribution to s (already divided by dt).
    nu: f64,
}

impl NoiseModel {
    fn new(op: &OperatingPoint, mode: NoiseMode, h: f64) -> Self {
        let c = &op.system.cavity;
        let f = &op.system.filter;
        let a = op.steady.alpha_s;
        let thermal = if mode == NoiseMode::Noiseless {
            [0.0; 2]
        } else {
            [0, 1].map(|j| {
                let m = &op.system.modes[j];
                (m.gamma_m * (2.0 * m.n_th + 1.0) * h).sqrt()
            })
        };
        let sp = (2.0 * c.kappa_prime).sqrt();
        Self {
            thermal,
            vacuum: mode == NoiseMode::SemiclassicalWithVacuum,
            quad_sd: (h / 4.0).sqrt(),
            s0: (2.0 * c.kappa0).sqrt(),
            sp,
            spp: (2.0 * c.kappa_double_prime).sqrt(),
            theta: op.steady.theta_delta,
            det_prime: -f.eta * sp * a * 2.0,
            det_vac: (f.eta * (1.0 - f.eta)).sqrt() * sp * a * 2.0,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, h: f64) -> StepNoise {
        let mut w = [0.0; STATE_DIM];
        let mut nu = 0.0;
        for j in 0..2 {
            if self.thermal[j] > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                w[3 + 2 * j] = self.thermal[j] * z;
            }
        }
        if self.vacuum {
            let mut g = || -> f64 {
                let z: f64 = StandardNormal.sample(rng);
                self.quad_sd * z
            };
            let a_in = C64::new(g(), g());
            let a_p = C64::new(g(), g());
            let a_pp = C64::new(g(), g());
            let c_v = C64::new(g(), g());
            let cav = C64::from_polar(self.s0, -self.theta) * a_in + a_p * self.sp + a_pp * self.spp;
            w[0] += cav.re;
            w[1] += cav.im;
            // Detection noise travels through the filter and re-enters via b.
            nu = (self.det_prime * a_p.re + self.det_vac * c_v.re) / h;
        }
        StepNoise { w, nu }
    }
}

/// Integrates one trajectory.
pub fn simulate(op: &OperatingPoint, cfg: &TrajectoryConfig) -> Result<Trajectory, OracleError> {
    let h = cfg.dt;
    let hmax = max_step(op);
    if !(h > 0.0) || h > hmax * (1.0 + 1e-12) {
        return Err(OracleError::StepTooLarge { dt: h, max: hmax });
    }
    if !(cfg.duration > 0.0) || cfg.record_every == 0 || !(cfg.burn_in >= 0.0) {
        return Err(OracleError::Config("duration must be positive, record_every ≥ 1, burn_in ≥ 0".into()));
    }
    // Stationary correlation time is set by the optically damped linewidth
    // of the recorded modes.
    let gmin = (0..2)
        .filter(|&j| cfg.record[2 + 2 * j] || cfg.record[3 + 2 * j])
        .map(|j| crate::spectra::effective_damping(op, j))
        .fold(f64::INFINITY, f64::min);
    if cfg.duration < 100.0 / gmin {
        if cfg.spectral {
            return Err(OracleError::Config(format!(
                "spectral estimate needs duration ≥ 100/γ_eff,min = {:.3e} s",
                100.0 / gmin
            )));
        }
        warn!("trajectory shorter than 100/γ_eff,min; not suitable for spectral estimates");
    }
    if !cfg.allow_unstable {
        let n = crate::closed_loop::unstable_pole_count(op)?;
        if n > 0 {
            return Err(OracleError::Unstable(n));
        }
    }

    let (a, b, cvec) = drift_matrix(op);
    let prop = propagators(&a, &b, h);
    let (taps, tau) = match realize_filter(op, h, cfg.fir_taps)? {
        FilterRealization::Tap { gain, tau } => (vec![gain], tau),
        FilterRealization::Fir { taps, tau } => (taps, tau),
    };
    let d = (tau / h).floor() as usize;
    let frac = tau / h - d as f64;
    let noise = NoiseModel::new(op, cfg.noise_mode, h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Ring buffer of detected signal samples s_k.
    let hist = d + taps.len() + 2;
    let mut ring = vec![0.0; hist];
    let idx = |k: isize| -> usize { k.rem_euclid(hist as isize) as usize };
    // u_{n} from the history, excluding the implicit s_{n} term when d = 0.
    let u_explicit = |ring: &[f64], n: isize, skip_current: bool| -> f64 {
        let mut u = 0.0;
        for (m, &k) in taps.iter().enumerate() {
            let j = n - d as isize - m as isize;
            let w0 = if skip_current && j == n { 0.0 } else { 1.0 - frac };
            let s_j = if j >= 0 { ring[idx(j)] } else { 0.0 };
            let s_jm = if j >= 1 { ring[idx(j - 1)] } else { 0.0 };
            u += k * (w0 * s_j + frac * s_jm);
        }
        u
    };
    let implicit = if d == 0 { (1.0 - frac) * taps[0] } else { 0.0 };
    // (I − implicit·Γ1·cᵀ)⁻¹ by Sherman–Morrison; cᵀ only reads Re δa.
    let ct_g1: f64 = cvec.iter().zip(&prop.gamma1).map(|(c, g)| c * g).sum();
    let sm_den = 1.0 - implicit * ct_g1;
    if implicit != 0.0 && sm_den.abs() < 1e-12 {
        return Err(OracleError::Config("implicit feedback step is singular; reduce dt".into()));
    }
    let solve_implicit = |r: Vec6| -> Vec6 {
        if implicit == 0.0 {
            return r;
        }
        let ctr: f64 = cvec.iter().zip(&r).map(|(c, v)| c * v).sum();
        let k = implicit * ctr / sm_den;
        let mut out = r;
        for i in 0..STATE_DIM {
            out[i] += prop.gamma1[i] * k;
        }
        out
    };
    let ct = |x: &Vec6| -> f64 { cvec.iter().zip(x).map(|(c, v)| c * v).sum() };

    let total_steps = ((cfg.burn_in + cfg.duration) / h).round() as usize;
    let burn_steps = (cfg.burn_in / h).round() as usize;
    let scale = {
        let init = cfg.initial.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nmax = op.system.modes.iter().map(|m| m.n_th).fold(0.0, f64::max);
        init.max((nmax + 1.0).sqrt())
    };
    let limit = DIVERGENCE_FACTOR * scale;

    let cap = (total_steps - burn_steps.min(total_steps)) / cfg.record_every + 1;
    let mut channels: [Vec<f64>; STATE_DIM] = Default::default();
    for (ch, &on) in channels.iter_mut().zip(&cfg.record) {
        if on {
            ch.reserve(cap);
        }
    }
    let mut max_ratio: f64 = 0.0;
    let alpha = op.steady.alpha_s;

    let mut x = cfg.initial;
    let mut cur = noise.draw(&mut rng, h);
    ring[idx(0)] = ct(&x) + cur.nu;
    let mut u_n = u_explicit(&ring, 0, false);
    for n in 0..total_steps {
        if n >= burn_steps && (n - burn_steps) % cfg.record_every == 0 {
            for (ch, v) in channels.iter_mut().zip(&x) {
                if ch.capacity() > 0 {
                    ch.push(*v);
                }
            }
            if alpha > 0.0 {
                max_ratio = max_ratio.max(x[0].hypot(x[1]) / alpha);
            }
        }
        let next = noise.draw(&mut rng, h);
        let ni = n as isize + 1;
        // Part of u_{n+1} known before x_{n+1}, plus the implicit detection noise.
        let u_known = u_explicit(&ring, ni, true) + implicit * next.nu;
        let px = matvec(&prop.phi, &x);
        let pw = matvec(&prop.phi_half, &cur.w);
        let mut r = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            r[i] = px[i] + prop.gamma0[i] * u_n + prop.gamma1[i] * (u_known - u_n) + pw[i];
        }
        x = solve_implicit(r);
        ring[idx(ni)] = ct(&x) + next.nu;
        u_n = u_known + implicit * ct(&x);
        cur = next;
        if n % 256 == 0 {
            let amp = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !(amp < limit) {
                return Err(OracleError::Diverged { time: (n + 1) as f64 * h, amplitude: amp, scale });
            }
        }
    }
    Ok(Trajectory {
        sample_dt: h * cfg.record_every as f64,
        t0: burn_steps as f64 * h,
        channels,
        max_fluctuation_ratio: max_ratio,
        steps: total_steps,
    })
}

/// Independent trajectories, one per seed, in parallel.
pub fn simulate_ensemble(op: &OperatingPoint, cfg: &TrajectoryConfig, seeds: &[u64]) -> Vec<Result<Trajectory, OracleError>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            simulate(op, &c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    fn op(g0_hz: f64, gain: f64, tau: f64) -> OperatingPoint {
        let cav = CavityParams::symmetric(hz_to_rad(20.1e3), hz_to_rad(330e3));
        let m = [
            MechanicalMode::new(hz_to_rad(546.91e3), hz_to_rad(2.5e3), hz_to_rad(g0_hz), 10.0),
            MechanicalMode::new(hz_to_rad(547.26e3), hz_to_rad(3.0e3), hz_to_rad(g0_hz), 10.0),
        ];
        let mut f = FeedbackFilter::flat(1.0, tau, 0.9);
        f.dc_block = true;
        let s = validate_system(cav, &m, f, PumpParams::new(74e-6, 1064e-9)).unwrap();
        OperatingPoint::with_gain(s, gain).unwrap()
    }

    #[test]
    fn step_limit_enforced() {
        let o = op(0.0, 0.0, 0.0);
        let cfg = TrajectoryConfig::new(max_step(&o) * 1.1, 1e-3, 1, NoiseMode::Noiseless);
        assert!(matches!(simulate(&o, &cfg), Err(OracleError::StepTooLarge { .. })));
    }

    #[test]
    fn free_cavity_decays_at_kappa() {
        let o = op(0.0, 0.0, 0.0);
        let h = max_step(&o);
        let mut cfg = TrajectoryConfig::new(h, 2e-5, 1, NoiseMode::Noiseless);
        cfg.initial[0] = 1.0;
        let t = simulate(&o, &cfg).unwrap();
        let k = t.len() - 1;
        let amp = t.channels[0][k].hypot(t.channels[1][k]);
        let expect = (-o.system.cavity.kappa * k as f64 * h).exp();
        assert!((amp / expect - 1.0).abs() < 1e-9, "{amp} vs {expect}");
    }

    #[test]
    fn same_seed_bit_identical() {
        let o = op(0.3, 0.5, 750e-9);
        let cfg = TrajectoryConfig::new(max_step(&o), 2e-4, 42, NoiseMode::SemiclassicalWithVacuum);
        let a = simulate(&o, &cfg).unwrap();
        let b = simulate(&o, &cfg).unwrap();
        assert_eq!(a, b);
        let mut c2 = cfg.clone();
        c2.seed = 43;
        assert_ne!(simulate(&o, &c2).unwrap().channels[2], a.channels[2]);
    }

    #[test]
    fn flat_filter_is_single_tap() {
        let o = op(0.0, 0.5, 750e-9);
        match realize_filter(&o, 1e-8, 101).unwrap() {
            FilterRealization::Tap { gain, tau } => {
                assert_eq!(gain, o.system.filter.gain_scale);
                assert_eq!(tau, 750e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fir_reproduces_response_in_band() {
        let mut o = op(0.0, 0.0, 2e-5);
        o.system.filter.gain_scale = 1.0;
        o.system.filter.shape = ResponseShape {
            mag_db: [0.0, 3.0, -1.0, 0.0, 0.5],
            phase_rad: [0.2, 0.4, -0.3, 0.0, 0.0],
            center: hz_to_rad(330e3),
            half_width: hz_to_rad(150e3),
        };
        let dt = 1e-8;
        let FilterRealization::Fir { taps, tau } = realize_filter(&o, dt, 2001).unwrap() else { panic!() };
        let c = 1000.0 * dt;
        assert!((tau - (2e-5 - c)).abs() < 1e-15);
        for f_hz in [220e3, 330e3, 440e3] {
            let w = hz_to_rad(f_hz);
            let k: C64 = taps.iter().enumerate().map(|(m, &v)| C64::from_polar(v, w * m as f64 * dt)).sum();
            let k = k * C64::from_polar(1.0, -w * c);
            let want = o.system.filter.shape.eval(w);
            assert!((k - want).norm() < 0.02 * want.norm(), "{f_hz}: {k} vs {want}");
        }
    }
}
