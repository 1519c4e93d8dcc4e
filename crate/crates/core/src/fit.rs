//! Electronic filter characterization from open-loop transfer data.
//!
//! Measured 𝒯(f) is divided by the dimensionless cavity factor κχ_c(ω)e^{−iθ},
//! leaving χ_fb(ω)/κ. Its phase slope gives the loop delay; the remaining
//! magnitude (dB) and phase (rad) are fitted with quartics in the band
//! coordinate x = (f − f_c)/f_w.

use crate::cavity::bare_susceptibility;
use crate::model::{hz_to_rad, CavityParams, FeedbackFilter, ResponseShape, SteadyState, C64};
use nalgebra::{DMatrix, DVector};
use std::io::{Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("frequency not strictly increasing at row {0}")]
    NotIncreasing(usize),
    #[error("non-finite value at row {0}")]
    NonFinite(usize),
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("malformed row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("need at least {need} points in the fit band, have {have}")]
    TooFewPoints { have: usize, need: usize },
    #[error("design matrix is rank deficient (rank {rank} of {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("cavity model vanishes at {0:.6e} Hz")]
    CavityVanishes(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Bode data: frequency (Hz), magnitude (dB), phase (degrees).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyResponseData {
    pub freq_hz: Vec<f64>,
    pub mag_db: Vec<f64>,
    pub phase_deg: Vec<f64>,
}

impl FrequencyResponseData {
    pub fn new(freq_hz: Vec<f64>, mag_db: Vec<f64>, phase_deg: Vec<f64>) -> Result<Self, FitError> {
        let n = freq_hz.len();
        if mag_db.len() != n || phase_deg.len() != n {
            return Err(FitError::Parse { row: n.min(mag_db.len()).min(phase_deg.len()), message: "column lengths differ".into() });
        }
        for i in 0..n {
            if !(freq_hz[i].is_finite() && mag_db[i].is_finite() && phase_deg[i].is_finite()) {
                return Err(FitError::NonFinite(i));
            }
            if i > 0 && freq_hz[i] <= freq_hz[i - 1] {
                return Err(FitError::NotIncreasing(i));
            }
        }
        Ok(Self { freq_hz, mag_db, phase_deg })
    }

    /// Bode form of complex samples; the phase is unwrapped.
    pub fn from_complex(freq_hz: Vec<f64>, values: &[C64]) -> Result<Self, FitError> {
        let mag = values.iter().map(|z| 20.0 * z.norm().log10()).collect();
        let mut ph: Vec<f64> = values.iter().map(|z| z.arg()).collect();
        unwrap_phase(&mut ph);
        Self::new(freq_hz, mag, ph.into_iter().map(f64::to_degrees).collect())
    }

    pub fn to_complex(&self) -> Vec<C64> {
        self.mag_db
            .iter()
            .zip(&self.phase_deg)
            .map(|(&m, &p)| C64::from_polar(10f64.powf(m / 20.0), p.to_radians()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.freq_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq_hz.is_empty()
    }

    /// Reads CSV with header `freq_hz,mag_db,phase_deg` (column order free,
    /// extra columns and `#` comment lines ignored).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, FitError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &'static str| headers.iter().position(|h| h == name).ok_or(FitError::MissingColumn(name));
        let (cf, cm, cp) = (col("freq_hz")?, col("mag_db")?, col("phase_deg")?);
        let (mut f, mut m, mut p) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |c: usize| -> Result<f64, FitError> {
                let s = rec.get(c).ok_or(FitError::Parse { row, message: "short row".into() })?;
                s.parse().map_err(|e| FitError::Parse { row, message: format!("`{s}`: {e}") })
            };
            f.push(get(cf)?);
            m.push(get(cm)?);
            p.push(get(cp)?);
        }
        Self::new(f, m, p)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FitError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["freq_hz", "mag_db", "phase_deg"])?;
        for i in 0..self.len() {
            w.write_record(&[self.freq_hz[i].to_string(), self.mag_db[i].to_string(), self.phase_deg[i].to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    fn phase_rad(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.phase_deg.iter().map(|d| d.to_radians()).collect();
        unwrap_phase(&mut p);
        p
    }
}

/// Removes 2π jumps in place.
pub fn unwrap_phase(phase: &mut [f64]) {
    use std::f64::consts::{PI, TAU};
    let mut offset = 0.0;
    for i in 1..phase.len() {
        let prev = phase[i - 1];
        let raw = phase[i] + offset;
        let d = raw - prev;
        let k = ((d + PI) / TAU).floor();
        offset -= k * TAU;
        phase[i] = raw - k * TAU;
    }
}

/// Dimensionless cavity factor κχ_c(ω)e^{−iθ} at frequency `f_hz`.
pub fn cavity_factor(f_hz: f64, cavity: &CavityParams, steady: &SteadyState) -> C64 {
    bare_susceptibility(hz_to_rad(f_hz), cavity, steady) * cavity.kappa * C64::from_polar(1.0, -steady.theta_delta)
}

/// Element-wise quotient of the measured open-loop response by the cavity
/// factor; the result is χ_fb/κ with unwrapped phase.
pub fn divide_out_cavity(
    data: &FrequencyResponseData,
    cavity: &CavityParams,
    steady: &SteadyState,
) -> Result<FrequencyResponseData, FitError> {
    let measured = data.to_complex();
    let mut out = Vec::with_capacity(measured.len());
    for (&f, z) in data.freq_hz.iter().zip(&measured) {
        let c = cavity_factor(f, cavity, steady);
        if c.norm() < 1e-15 {
            return Err(FitError::CavityVanishes(f));
        }
        out.push(z / c);
    }
    FrequencyResponseData::from_complex(data.freq_hz.clone(), &out)
}

/// Frequency band (Hz) used for fitting and delay regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitBand {
    pub center_hz: f64,
    pub half_width_hz: f64,
}

impl FitBand {
    /// Δ/2π ± 150 kHz.
    pub fn around_detuning(delta: f64) -> Self {
        Self { center_hz: crate::model::rad_to_hz(delta), half_width_hz: 150e3 }
    }

    pub fn contains(&self, f_hz: f64) -> bool {
        (f_hz - self.center_hz).abs() <= self.half_width_hz
    }

    pub fn coordinate(&self, f_hz: f64) -> f64 {
        (f_hz - self.center_hz) / self.half_width_hz
    }

    fn select(&self, data: &FrequencyResponseData) -> Vec<usize> {
        (0..data.len()).filter(|&i| self.contains(data.freq_hz[i])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayEstimate {
    pub tau_fb: f64,
    /// Standard error of the regression slope (s).
    pub stderr: f64,
    /// Residual phase RMS above 0.1 rad: the phase is not close to linear.
    pub low_confidence: bool,
}

/// Group delay τ = (1/2π)·dφ/df from a straight-line fit of the unwrapped
/// phase over `band`. With a curved phase this is the band-averaged group
/// delay and depends on the band chosen.
pub fn estimate_delay(data: &FrequencyResponseData, band: &FitBand) -> Result<DelayEstimate, FitError> {
    let idx = band.select(data);
    if idx.len() < 3 {
        return Err(FitError::TooFewPoints { have: idx.len(), need: 3 });
    }
    let ph = data.phase_rad();
    let w: Vec<f64> = idx.iter().map(|&i| hz_to_rad(data.freq_hz[i])).collect();
    let y: Vec<f64> = idx.iter().map(|&i| ph[i]).collect();
    let n = w.len() as f64;
    let wm = w.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = w.iter().map(|v| (v - wm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(FitError::RankDeficient { rank: 1, cols: 2 });
    }
    let sxy: f64 = w.iter().zip(&y).map(|(a, b)| (a - wm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let rss: f64 = w.iter().zip(&y).map(|(a, b)| (b - ym - slope * (a - wm)).powi(2)).sum();
    let sigma2 = rss / (n - 2.0);
    let stderr = (sigma2 / sxx).sqrt();
    Ok(DelayEstimate { tau_fb: slope, stderr, low_confidence: sigma2.sqrt() > 0.1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialFit {
    pub mag_db: [f64; 5],
    pub phase_rad: [f64; 5],
    pub band: FitBand,
    /// RMS residuals over the band.
    pub mag_residual_db: f64,
    pub phase_residual_rad: f64,
    pub points: usize,
}

impl PolynomialFit {
    pub fn shape(&self) -> ResponseShape {
        ResponseShape {
            mag_db: self.mag_db,
            phase_rad: self.phase_rad,
            center: hz_to_rad(self.band.center_hz),
            half_width: hz_to_rad(self.band.half_width_hz),
        }
    }
}

fn lstsq_quartic(x: &[f64], y: &[f64]) -> Result<([f64; 5], f64), FitError> {
    let n = x.len();
    let a = DMatrix::from_fn(n, 5, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * n as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < 5 {
        return Err(FitError::RankDeficient { rank, cols: 5 });
    }
    let sol = svd.solve(&b, tol).map_err(|_| FitError::RankDeficient { rank, cols: 5 })?;
    let res = (&a * &sol - &b).norm() / (n as f64).sqrt();
    Ok(([sol[0], sol[1], sol[2], sol[3], sol[4]], res))
}

/// Least-squares quartics for magnitude (dB) and phase (rad) over `band`,
/// after removing the linear phase `ωτ_fb`.
pub fn fit_polynomial_filter(data: &FrequencyResponseData, band: &FitBand, tau_fb: f64) -> Result<PolynomialFit, FitError> {
    let idx = band.select(data);
    if idx.len() < 15 {
        return Err(FitError::TooFewPoints { have: idx.len(), need: 15 });
    }
    let ph = data.phase_rad();
    let x: Vec<f64> = idx.iter().map(|&i| band.coordinate(data.freq_hz[i])).collect();
    let mag: Vec<f64> = idx.iter().map(|&i| data.mag_db[i]).collect();
    let phase: Vec<f64> = idx.iter().map(|&i| ph[i] - hz_to_rad(data.freq_hz[i]) * tau_fb).collect();
    let (mag_db, mag_residual_db) = lstsq_quartic(&x, &mag)?;
    let (phase_rad, phase_residual_rad) = lstsq_quartic(&x, &phase)?;
    Ok(PolynomialFit { mag_db, phase_rad, band: *band, mag_residual_db, phase_residual_rad, points: idx.len() })
}

/// Filter reproducing the fitted χ_fb/κ at the given operating point:
/// gain_scale = κ / (η√(2κ₀)·2κ′·α_s).
pub fn recovered_filter(fit: &PolynomialFit, tau_fb: f64, eta: f64, cavity: &CavityParams, steady: &SteadyState) -> FeedbackFilter {
    let mut f = FeedbackFilter { shape: fit.shape(), tau_fb, eta, gain_scale: 1.0, dc_block: false };
    let pre = crate::cavity::loop_prefactor(cavity, &f, steady);
    f.gain_scale = cavity.kappa / pre;
    f
}

/// Full characterization: divide, estimate delay, fit.
pub fn characterize(
    data: &FrequencyResponseData,
    cavity: &CavityParams,
    steady: &SteadyState,
    band: &FitBand,
) -> Result<(DelayEstimate, PolynomialFit), FitError> {
    let q = divide_out_cavity(data, cavity, steady)?;
    let d = estimate_delay(&q, band)?;
    let p = fit_polynomial_filter(&q, band, d.tau_fb)?;
    Ok((d, p))
}
