//! Averaged Hann-windowed periodogram (Welch estimate).

use crate::model::C64;
use rustfft::FftPlanner;

/// Minimum number of averaged segments.
pub const MIN_SEGMENTS: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PeriodogramError {
    #[error("series of {len} samples gives {segments} segments of {segment_len}; need at least {MIN_SEGMENTS}")]
    InsufficientData { len: usize, segment_len: usize, segments: usize },
    #[error("invalid periodogram parameters: {0}")]
    Invalid(String),
}

/// Two-sided angular-frequency density on ω ≥ 0, normalized so that
/// (1/2π)∫_{−∞}^{∞} S dω equals the series variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Periodogram {
    pub omega: Vec<f64>,
    pub density: Vec<f64>,
    pub segments: usize,
}

impl Periodogram {
    /// (1/π)∫ S dω over [lo, hi], i.e. the variance carried by ±[lo, hi].
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        let dw = self.omega.get(1).copied().unwrap_or(0.0);
        self.omega
            .iter()
            .zip(&self.density)
            .filter(|(w, _)| **w >= lo && **w <= hi)
            .map(|(_, s)| s * dw)
            .sum::<f64>()
            / std::f64::consts::PI
    }

    /// (1/2π) Σ over all bins, counting both signs of ω.
    pub fn total_power(&self) -> f64 {
        let dw = self.omega.get(1).copied().unwrap_or(0.0);
        let n = self.density.len();
        let mut sum = 0.0;
        for (k, s) in self.density.iter().enumerate() {
            // DC and the Nyquist bin (even segment length) appear once.
            let w = if k == 0 || k == n - 1 { 1.0 } else { 2.0 };
            sum += w * s;
        }
        sum * dw / (2.0 * std::f64::consts::PI)
    }
}

/// Welch estimate of `series` sampled at `dt`. `overlap` is the fraction of
/// a segment shared with the next one, in [0, 1). The series mean is removed.
pub fn periodogram(series: &[f64], dt: f64, segment_len: usize, overlap: f64) -> Result<Periodogram, PeriodogramError> {
    if segment_len < 4 || segment_len % 2 != 0 {
        return Err(PeriodogramError::Invalid(format!("segment length must be even and ≥ 4, got {segment_len}")));
    }
    if !(0.0..1.0).contains(&overlap) || !(dt > 0.0) {
        return Err(PeriodogramError::Invalid("overlap must be in [0, 1) and dt > 0".into()));
    }
    let hop = ((segment_len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let segments = if series.len() < segment_len { 0 } else { (series.len() - segment_len) / hop + 1 };
    if segments < MIN_SEGMENTS {
        return Err(PeriodogramError::InsufficientData { len: series.len(), segment_len, segments });
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    // Periodic Hann keeps the window power exactly N·3/8.
    let w: Vec<f64> = (0..segment_len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / segment_len as f64).cos())
        .collect();
    let wpow: f64 = w.iter().map(|v| v * v).sum();
    let fft = FftPlanner::new().plan_fft_forward(segment_len);
    let half = segment_len / 2 + 1;
    let mut acc = vec![0.0; half];
    let mut buf = vec![C64::new(0.0, 0.0); segment_len];
    for s in 0..segments {
        let start = s * hop;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = C64::new((series[start + n] - mean) * w[n], 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let scale = dt / (wpow * segments as f64);
    let dw = 2.0 * std::f64::consts::PI / (segment_len as f64 * dt);
    Ok(Periodogram {
        omega: (0..half).map(|k| k as f64 * dw).collect(),
        density: acc.into_iter().map(|a| a * scale).collect(),
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn white_noise_flat_at_known_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sd = 2.0;
        let dt = 1e-3;
        let x: Vec<f64> = (0..400_000).map(|_| Normal::new(0.0, sd).unwrap().sample(&mut rng)).collect();
        let p = periodogram(&x, dt, 1024, 0.5).unwrap();
        // Variance sd² spread over (−π/dt, π/dt]: density sd²·dt.
        let inner = &p.density[10..500];
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((mean / (sd * sd * dt) - 1.0).abs() < 0.05, "{mean}");
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((p.total_power() / var - 1.0).abs() < 0.02);
    }

    #[test]
    fn too_short_rejected() {
        let x = vec![0.0; 1000];
        assert!(matches!(periodogram(&x, 1.0, 128, 0.0), Err(PeriodogramError::InsufficientData { .. })));
    }

    #[test]
    fn sinusoid_power_in_band() {
        let dt = 1e-3;
        let w0 = 2.0 * std::f64::consts::PI * 50.0;
        let x: Vec<f64> = (0..200_000).map(|n| 3.0 * (w0 * n as f64 * dt).sin()).collect();
        let p = periodogram(&x, dt, 2048, 0.5).unwrap();
        let band = p.band_power(w0 - 30.0, w0 + 30.0);
        assert!((band / 4.5 - 1.0).abs() < 0.02, "{band}");
    }
}
