//! TOML run configuration. Frequencies are in Hz here and converted to rad/s
//! when the system is built.

use crate::model::*;
use crate::oracle::{NoiseMode, TrajectoryConfig};
use crate::operating::{GainError, OperatingPoint};
use crate::spectra::{SweepAxis, SweepSpec};
use crate::steady::{self, SteadyStateError};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("missing required field `{0}`")]
    Missing(String),
    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationErrors),
    #[error(transparent)]
    SteadyState(#[from] SteadyStateError),
    #[error(transparent)]
    Gain(#[from] GainError),
}

impl ConfigError {
    /// Errors caused by the input rather than by a numerical failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Self::SteadyState(_) | Self::Gain(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityConfig {
    pub kappa0_hz: f64,
    pub kappa_prime_hz: f64,
    pub kappa_double_prime_hz: f64,
    /// Checked against the sum of the partial rates when present.
    pub kappa_hz: Option<f64>,
    /// Bare detuning Δ₀/2π.
    pub detuning_hz: Option<f64>,
    /// Light-shifted detuning Δ/2π; the bare value is solved for.
    pub effective_detuning_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub frequency_hz: f64,
    pub damping_hz: f64,
    pub g0_hz: f64,
    pub n_th: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Normalized gain 𝒢 = Re 𝒯(Δ); exclusive with `gain_scale`.
    pub gain: Option<f64>,
    pub gain_scale: Option<f64>,
    pub tau_fb_s: f64,
    pub eta: f64,
    #[serde(default)]
    pub mag_db: [f64; 5],
    #[serde(default)]
    pub phase_rad: [f64; 5],
    /// Band center for the polynomial; defaults to Δ/2π.
    pub center_hz: Option<f64>,
    #[serde(default = "default_half_width")]
    pub half_width_hz: f64,
    #[serde(default)]
    pub dc_block: bool,
}

fn default_half_width() -> f64 {
    150e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpConfig {
    pub power_w: f64,
    pub wavelength_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub points: usize,
}

impl GridConfig {
    /// Uniform grid in rad/s.
    pub fn omega(&self) -> Vec<f64> {
        let n = self.points.max(2);
        (0..n)
            .map(|i| hz_to_rad(self.start_hz + (self.stop_hz - self.start_hz) * i as f64 / (n - 1) as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisName {
    Detuning,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: AxisName,
    /// Axis range: Hz of effective detuning, or 𝒢.
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl SweepConfig {
    pub fn values(&self) -> Vec<f64> {
        let n = self.points.max(1);
        if n == 1 {
            return vec![self.start];
        }
        (0..n).map(|i| self.start + (self.stop - self.start) * i as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Defaults to the largest allowed step.
    pub dt_s: Option<f64>,
    pub duration_s: f64,
    #[serde(default)]
    pub burn_in_s: f64,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default = "default_noise")]
    pub noise_mode: NoiseMode,
    #[serde(default = "default_segment")]
    pub segment_len: usize,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_taps")]
    pub fir_taps: usize,
    #[serde(default)]
    pub allow_unstable: bool,
    /// Only every n-th recorded sample goes to the trajectory file; the
    /// periodogram always uses all of them.
    #[serde(default = "one")]
    pub trajectory_stride: usize,
}

fn one() -> usize {
    1
}
fn default_noise() -> NoiseMode {
    NoiseMode::ClassicalThermal
}
fn default_segment() -> usize {
    1 << 14
}
fn default_overlap() -> f64 {
    0.5
}
fn default_taps() -> usize {
    1025
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// CSV with `freq_hz,mag_db,phase_deg`, relative to the configuration file.
    pub data: String,
    pub center_hz: Option<f64>,
    #[serde(default = "default_half_width")]
    pub half_width_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub cavity: CavityConfig,
    pub modes: Vec<ModeConfig>,
    pub filter: FilterConfig,
    pub pump: PumpConfig,
    pub grid: Option<GridConfig>,
    pub sweep: Option<SweepConfig>,
    pub oracle: Option<OracleConfig>,
    pub fit: Option<FitConfig>,
}

/// Splits `modes[1].g0_hz` or `modes.1.g0_hz` into path segments.
fn key_path(key: &str) -> Vec<String> {
    key.replace('[', ".").replace(']', "").split('.').filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides to a parsed document.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| ConfigError::Override { key: ov.clone(), message: "expected key=value".into() })?;
        let path = key_path(key.trim());
        if path.is_empty() {
            return Err(ConfigError::Override { key: key.into(), message: "empty key".into() });
        }
        let err = |m: &str| ConfigError::Override { key: key.into(), message: m.into() };
        let mut node: &mut toml::Value =
            doc.entry(path[0].clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        for seg in &path[1..] {
            node = match node {
                toml::Value::Table(t) => t.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new())),
                toml::Value::Array(a) => {
                    let i: usize = seg.parse().map_err(|_| err("array index expected"))?;
                    a.get_mut(i).ok_or_else(|| err("index out of range"))?
                }
                _ => return Err(err("cannot descend into a scalar")),
            };
        }
        *node = parse_value(raw.trim());
    }
    Ok(())
}

impl Config {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let cfg: Config = doc.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            match msg.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
                Some(f) => ConfigError::Missing(f.to_string()),
                None => ConfigError::Parse(msg),
            }
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let c = &self.cavity;
        if c.detuning_hz.is_some() == c.effective_detuning_hz.is_some() {
            return Err(ConfigError::Invalid {
                field: "cavity.detuning_hz".into(),
                message: "give exactly one of detuning_hz and effective_detuning_hz".into(),
            });
        }
        if let Some(k) = c.kappa_hz {
            let sum = c.kappa0_hz + c.kappa_prime_hz + c.kappa_double_prime_hz;
            if (k - sum).abs() > 1e-9 * k.abs().max(1.0) {
                return Err(ConfigError::Invalid {
                    field: "cavity.kappa_hz".into(),
                    message: format!("{k} differs from the sum of partial rates {sum}"),
                });
            }
        }
        if self.filter.gain.is_some() && self.filter.gain_scale.is_some() {
            return Err(ConfigError::Invalid {
                field: "filter.gain".into(),
                message: "give at most one of gain and gain_scale".into(),
            });
        }
        if !(self.filter.half_width_hz > 0.0) {
            return Err(ConfigError::Invalid { field: "filter.half_width_hz".into(), message: "must be > 0".into() });
        }
        Ok(())
    }

    /// Validated system with the configured gain_scale (zero when `gain` is
    /// used) and the bare detuning as configured or a first estimate.
    pub fn system(&self) -> Result<System, ConfigError> {
        let c = &self.cavity;
        let det = c.detuning_hz.or(c.effective_detuning_hz).unwrap_or(0.0);
        let cavity = CavityParams::from_partial_rates(
            hz_to_rad(c.kappa0_hz),
            hz_to_rad(c.kappa_prime_hz),
            hz_to_rad(c.kappa_double_prime_hz),
            hz_to_rad(det),
        );
        let modes: Vec<MechanicalMode> = self
            .modes
            .iter()
            .map(|m| MechanicalMode::new(hz_to_rad(m.frequency_hz), hz_to_rad(m.damping_hz), hz_to_rad(m.g0_hz), m.n_th))
            .collect();
        let f = &self.filter;
        let center = f.center_hz.unwrap_or(det);
        let filter = FeedbackFilter {
            shape: ResponseShape {
                mag_db: f.mag_db,
                phase_rad: f.phase_rad,
                center: hz_to_rad(center),
                half_width: hz_to_rad(f.half_width_hz),
            },
            tau_fb: f.tau_fb_s,
            eta: f.eta,
            gain_scale: f.gain_scale.unwrap_or(0.0),
            dc_block: f.dc_block,
        };
        let pump = PumpParams::new(self.pump.power_w, self.pump.wavelength_m);
        Ok(validate_system(cavity, &modes, filter, pump)?)
    }

    /// Solves the operating point: bare detuning for a requested effective
    /// detuning and gain normalization for a requested 𝒢, iterated jointly.
    pub fn operating_point(&self) -> Result<OperatingPoint, ConfigError> {
        let base = self.system()?;
        Ok(solve_operating_point(base, self.cavity.effective_detuning_hz.map(hz_to_rad), self.filter.gain)?)
    }

    pub fn sweep_spec(&self) -> Result<(SweepSpec, Vec<f64>), ConfigError> {
        let s = self.sweep.as_ref().ok_or_else(|| ConfigError::Missing("sweep".into()))?;
        let spec = SweepSpec {
            axis: match s.axis {
                AxisName::Detuning => SweepAxis::Detuning,
                AxisName::Gain => SweepAxis::Gain,
            },
            gain: self.filter.gain,
            detuning: self.cavity.effective_detuning_hz.map(hz_to_rad),
        };
        let values = match s.axis {
            AxisName::Detuning => s.values().into_iter().map(hz_to_rad).collect(),
            AxisName::Gain => s.values(),
        };
        Ok((spec, values))
    }

    pub fn trajectory_config(&self, op: &OperatingPoint, seed: u64) -> Result<(TrajectoryConfig, &OracleConfig), ConfigError> {
        let o = self.oracle.as_ref().ok_or_else(|| ConfigError::Missing("oracle".into()))?;
        let dt = o.dt_s.unwrap_or_else(|| crate::oracle::max_step(op));
        let mut t = TrajectoryConfig::new(dt, o.duration_s, seed, o.noise_mode);
        t.burn_in = o.burn_in_s;
        t.record_every = o.record_every;
        t.fir_taps = o.fir_taps;
        t.allow_unstable = o.allow_unstable;
        Ok((t, o))
    }
}

/// Operating point for an optional effective detuning target and optional
/// normalized gain. Both depend on α_s, so they are alternated to a fixed point.
pub fn solve_operating_point(mut sys: System, effective: Option<f64>, gain: Option<f64>) -> Result<OperatingPoint, ConfigError> {
    if gain.is_some() {
        sys.filter.gain_scale = 0.0;
    }
    let mut last = f64::NAN;
    for _ in 0..100 {
        if let Some(d) = effective {
            sys.cavity.delta0 = steady::bare_detuning_for(d, &sys.cavity, &sys.modes, &sys.filter, &sys.pump)?;
        }
        let op = match gain {
            Some(g) => OperatingPoint::with_gain(sys.clone(), g)?,
            None => OperatingPoint::new(sys.clone())?,
        };
        let done = effective.is_none() || (op.system.cavity.delta0 - last).abs() <= 1e-13 * op.system.cavity.delta0.abs();
        if done || op.system.filter.dc_response() == 0.0 {
            return Ok(op);
        }
        last = op.system.cavity.delta0;
        sys = op.system;
    }
    Err(ConfigError::SteadyState(SteadyStateError::NoConvergence { iterations: 100, residual: f64::NAN }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[cavity]
kappa0_hz = 6.7e3
kappa_prime_hz = 6.7e3
kappa_double_prime_hz = 6.7e3
kappa_hz = 20.1e3
effective_detuning_hz = 330e3

[[modes]]
frequency_hz = 546.91e3
damping_hz = 2.5
g0_hz = 0.0
n_th = 0.0

[[modes]]
frequency_hz = 547.26e3
damping_hz = 3.0
g0_hz = 0.0
n_th = 0.0

[filter]
gain = 0.5
tau_fb_s = 750e-9
eta = 0.9
dc_block = true

[pump]
power_w = 74e-6
wavelength_m = 1064e-9
"#;

    #[test]
    fn parses_and_normalizes() {
        let c = Config::from_toml(BASE, &[]).unwrap();
        let op = c.operating_point().unwrap();
        assert!((op.gain() - 0.5).abs() < 1e-12);
        assert!((rad_to_hz(op.steady.delta) - 330e3).abs() < 1e-6);
        assert!((rad_to_hz(op.system.filter.shape.center) - 330e3).abs() < 1e-9);
    }

    #[test]
    fn override_beats_file() {
        let c = Config::from_toml(BASE, &["filter.eta=0.5".into(), "modes[1].g0_hz=2.0".into(), "modes.0.n_th=7".into()]).unwrap();
        assert_eq!(c.filter.eta, 0.5);
        assert_eq!(c.modes[1].g0_hz, 2.0);
        assert_eq!(c.modes[0].n_th, 7.0);
        assert!(Config::from_toml(BASE, &["nosuch.x=1".into()]).is_err());
    }

    #[test]
    fn missing_field_named() {
        let text = BASE.replace("power_w = 74e-6\n", "");
        match Config::from_toml(&text, &[]) {
            Err(ConfigError::Missing(f)) => assert_eq!(f, "power_w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_kappa_rejected() {
        let e = Config::from_toml(BASE, &["cavity.kappa_hz=20.2e3".into()]).unwrap_err();
        assert!(e.to_string().contains("kappa_hz") && e.is_validation());
    }

    #[test]
    fn bad_eta_is_validation_error() {
        let c = Config::from_toml(BASE, &["filter.eta=1.2".into()]).unwrap();
        let e = c.system().unwrap_err();
        assert!(e.is_validation() && e.to_string().contains("filter.eta"), "{e}");
    }
}
