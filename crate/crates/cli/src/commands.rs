//! Subcommand bodies. Everything here converts to Hz at the file boundary.

use crate::output::{csv_field, fmt_f64, KeyValues, OutputDir, Table};
use crate::{Context, Failure};
use inloop::cavity;
use inloop::closed_loop::{self, ClosedLoopError};
use inloop::fit::{self, FitBand, FitError, FrequencyResponseData};
use inloop::mechanics::{self, MechanicsError};
use inloop::operating::OperatingPoint;
use inloop::oracle::{self, OracleError, CHANNEL_NAMES};
use inloop::periodogram::{self, PeriodogramError};
use inloop::spectra::{self, SweepAxis};
use inloop::{hz_to_rad, rad_to_hz, C64};
use log::warn;

/// Points of the default response grid.
const RESPONSE_POINTS: usize = 4001;

type Res = Result<(), Failure>;

fn numerical(e: impl std::fmt::Display) -> Failure {
    Failure::Numerical(e.to_string())
}

impl From<MechanicsError> for Failure {
    fn from(e: MechanicsError) -> Self {
        numerical(e)
    }
}

impl From<ClosedLoopError> for Failure {
    fn from(e: ClosedLoopError) -> Self {
        numerical(e)
    }
}

impl From<FitError> for Failure {
    fn from(e: FitError) -> Self {
        match e {
            FitError::RankDeficient { .. } | FitError::CavityVanishes(_) => numerical(e),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::StepTooLarge { .. } | OracleError::Config(_) | OracleError::FilterLongerThanDelay { .. } => {
                Failure::Validation(e.to_string())
            }
            _ => numerical(e),
        }
    }
}

impl From<PeriodogramError> for Failure {
    fn from(e: PeriodogramError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn operating_point(ctx: &Context) -> Result<OperatingPoint, Failure> {
    Ok(ctx.config.operating_point()?)
}

/// Rejects operating points with closed-loop poles in the upper half-plane.
fn require_stable(op: &OperatingPoint) -> Res {
    let r = closed_loop::stability_report(op)?;
    if r.unstable_poles > 0 {
        return Err(Failure::Numerical(format!(
            "closed loop has {} unstable poles; stationary spectra do not exist",
            r.unstable_poles
        )));
    }
    Ok(())
}

fn grid_or(ctx: &Context, default: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
    match &ctx.config.grid {
        Some(g) => g.omega(),
        None => default(),
    }
}

fn c_cols(name: &str) -> [String; 2] {
    [format!("{name}_re"), format!("{name}_im")]
}

pub fn response(ctx: &Context, out: &mut OutputDir) -> Res {
    let op = operating_point(ctx)?;
    let (c, f, s) = (&op.system.cavity, &op.system.filter, &op.steady);
    let grid = grid_or(ctx, || {
        let hi = s.delta.abs() + 10.0 * c.kappa;
        (0..RESPONSE_POINTS).map(|i| hi * i as f64 / (RESPONSE_POINTS - 1) as f64).collect()
    });
    let mut cols = vec!["omega_hz".to_string()];
    for n in ["chi_c", "chi_eff", "T", "t_coeff"] {
        cols.extend(c_cols(n));
    }
    cols.push("margin".into());
    let mut table = Table::new(&cols);
    let mut poles = 0;
    for &w in &grid {
        let mut row = vec![rad_to_hz(w)];
        match cavity::loop_response(w, c, f, s) {
            Ok(r) => {
                for z in [r.chi_c, r.chi_eff, r.transfer, r.t_coeff] {
                    row.extend([z.re, z.im]);
                }
                row.push(r.margin);
            }
            Err(_) => {
                poles += 1;
                let chi_c = cavity::bare_susceptibility(w, c, s);
                let t = cavity::open_loop_transfer(w, c, f, s);
                row.extend([chi_c.re, chi_c.im, f64::NAN, f64::NAN, t.re, t.im, f64::NAN, f64::NAN]);
                row.push(cavity::loop_factor(w, c, f, s).re);
            }
        }
        table.push_f64(&row);
    }
    if poles > 0 {
        warn!("{poles} grid points sit on a pole of the effective susceptibility; written as NaN");
    }
    out.csv("response.csv", &table)?;
    Ok(())
}

pub fn steady_state(ctx: &Context, out: &mut OutputDir) -> Res {
    let op = operating_point(ctx)?;
    let s = &op.steady;
    let res = inloop::steady::residuals(&op.system, s);
    let (k_eff, d_eff) = op.effective_linewidth_detuning();
    let branches: Vec<String> = s.other_branches.iter().map(|d| fmt_f64(rad_to_hz(*d))).collect();
    let mut kv = KeyValues::default();
    kv.add("alpha_s", s.alpha_s)
        .add("intracavity_photons", s.alpha_s * s.alpha_s)
        .add("delta_hz", rad_to_hz(s.delta))
        .add("delta0_hz", rad_to_hz(op.system.cavity.delta0))
        .add("q_s1", s.q_s[0])
        .add("q_s2", s.q_s[1])
        .add("phi_bar", s.phi_bar)
        .add("theta_delta_rad", s.theta_delta)
        .add("gain_scale", op.system.filter.gain_scale)
        .add("gain", op.gain())
        .add("kappa_hz", rad_to_hz(op.system.cavity.kappa))
        .add("kappa_eff_hz", rad_to_hz(k_eff))
        .add("delta_eff_hz", rad_to_hz(d_eff))
        .add("other_branches_hz", format!("[{}]", branches.join(", ")))
        .add("residual_amplitude", res[0])
        .add("residual_detuning", res[1])
        .add("residual_offset", res[2]);
    out.key_values("steady_state.txt", &kv)?;
    Ok(())
}

pub fn modes(ctx: &Context, out: &mut OutputDir) -> Res {
    let op = operating_point(ctx)?;
    let b = mechanics::bright_dark_basis(&op)?;
    let h = mechanics::hybridization_check(&op)?;
    let at_b = mechanics::bright_dark_self_energies(b.omega_b, &op)?;
    let c = &op.system.cavity;
    let mut kv = KeyValues::default();
    kv.add("mu1", b.mu1)
        .add("mu2", b.mu2)
        .add("omega_b_hz", rad_to_hz(b.omega_b))
        .add("omega_d_hz", rad_to_hz(b.omega_d))
        .add("delta_omega_b_hz", rad_to_hz(b.delta_omega_b))
        .add("sigma_bb_re_hz", rad_to_hz(at_b.bb.re))
        .add("sigma_bb_im_hz", rad_to_hz(at_b.bb.im))
        .add("sigma_bd_abs_hz", rad_to_hz(at_b.bd.norm()))
        .add("sigma_dd_abs_hz", rad_to_hz(at_b.dd.norm()))
        .add("separation_hz", rad_to_hz(h.separation))
        .add("max_coupling_hz", rad_to_hz(h.max_coupling))
        .add("separation_over_coupling", h.ratio())
        .add("hybridized", h.hybridized);
    for j in 0..2 {
        let m = &op.system.modes[j];
        kv.add(&format!("cooperativity_{}", j + 1), spectra::cooperativity(m, &op.steady, c))
            .add(&format!("gamma_eff_{}_hz", j + 1), rad_to_hz(spectra::effective_damping(&op, j)));
    }
    out.key_values("modes.txt", &kv)?;

    let grid = grid_or(ctx, || {
        let lo = b.omega_b.min(b.omega_d) - 100.0 * h.max_coupling.max(op.system.modes[0].gamma_m);
        let hi = b.omega_b.max(b.omega_d) + 100.0 * h.max_coupling.max(op.system.modes[0].gamma_m);
        (0..2001).map(|i| lo + (hi - lo) * i as f64 / 2000.0).collect()
    });
    let mut cols = vec!["omega_hz".to_string()];
    for n in ["sigma11", "sigma12", "sigma22", "sigma_bb", "sigma_bd", "sigma_dd"] {
        cols.extend(c_cols(&format!("{n}_hz")));
    }
    let mut table = Table::new(&cols);
    for &w in &grid {
        let s = mechanics::self_energy_matrix(w, &op).map_err(MechanicsError::from)?.sigma;
        let bd = mechanics::bright_dark_self_energies(w, &op)?;
        let mut row = vec![rad_to_hz(w)];
        for z in [s[0][0], s[0][1], s[1][1], bd.bb, bd.bd, bd.dd] {
            row.extend([rad_to_hz(z.re), rad_to_hz(z.im)]);
        }
        table.push_f64(&row);
    }
    out.csv("self_energy.csv", &table)?;
    Ok(())
}

pub fn spectrum(ctx: &Context, out: &mut OutputDir, shot_floor: Option<f64>) -> Res {
    let op = operating_point(ctx)?;
    require_stable(&op)?;
    let grid = grid_or(ctx, || spectra::occupancy_grid(&op));
    let mut spec = spectra::displacement_spectrum(&op, &grid)?;
    spec.shot_floor = shot_floor;
    let mut cols = vec!["omega_hz", "s_q1", "s_q2"];
    if shot_floor.is_some() {
        cols.extend(["s_q1_with_floor", "s_q2_with_floor"]);
    }
    let mut table = Table::new(&cols);
    for i in 0..grid.len() {
        let mut row = vec![rad_to_hz(grid[i]), spec.s_q1[i], spec.s_q2[i]];
        if let Some(fl) = shot_floor {
            row.extend([spec.s_q1[i] + fl, spec.s_q2[i] + fl]);
        }
        table.push_f64(&row);
    }
    out.csv("spectrum.csv", &table)?;
    Ok(())
}

pub fn occupancy(ctx: &Context, out: &mut OutputDir) -> Res {
    let op = operating_point(ctx)?;
    require_stable(&op)?;
    let (_, est) = spectra::occupancies(&op)?;
    let mut table = Table::new(&[
        "mode",
        "frequency_hz",
        "n_th",
        "n_m",
        "variance",
        "tail_fraction",
        "window_lo_hz",
        "window_hi_hz",
        "gamma_eff_hz",
        "cooperativity",
    ]);
    for (j, e) in est.iter().enumerate() {
        let m = &op.system.modes[j];
        table.push_f64(&[
            (j + 1) as f64,
            rad_to_hz(m.omega_m),
            m.n_th,
            e.n_m,
            e.variance,
            e.tail_fraction,
            rad_to_hz(e.window.0),
            rad_to_hz(e.window.1),
            rad_to_hz(spectra::effective_damping(&op, j)),
            spectra::cooperativity(m, &op.steady, &op.system.cavity),
        ]);
    }
    out.csv("occupancy.csv", &table)?;
    Ok(())
}

pub fn sweep(ctx: &Context, out: &mut OutputDir) -> Res {
    let (spec, values) = ctx.config.sweep_spec()?;
    let base = ctx.config.system()?;
    let rows = spectra::sweep(&base, &spec, &values);
    let axis = match spec.axis {
        SweepAxis::Detuning => "detuning_hz",
        SweepAxis::Gain => "gain",
    };
    let mut table = Table::new(&[
        axis,
        "n_m1",
        "n_m2",
        "kappa_eff_hz",
        "delta_eff_hz",
        "margin",
        "unstable_poles",
        "stable",
        "error",
    ]);
    for r in &rows {
        let v = match spec.axis {
            SweepAxis::Detuning => rad_to_hz(r.value),
            SweepAxis::Gain => r.value,
        };
        table.push(vec![
            fmt_f64(v),
            fmt_f64(r.n_m[0]),
            fmt_f64(r.n_m[1]),
            fmt_f64(rad_to_hz(r.kappa_eff)),
            fmt_f64(rad_to_hz(r.delta_eff)),
            fmt_f64(r.margin),
            r.unstable_poles.to_string(),
            r.stable.to_string(),
            csv_field(r.error.as_deref().unwrap_or("")),
        ]);
    }
    let flagged = rows.iter().filter(|r| !r.stable).count();
    if flagged > 0 {
        warn!("{flagged} of {} sweep points are unstable or failed", rows.len());
    }
    out.csv("sweep.csv", &table)?;
    Ok(())
}

pub fn stability(ctx: &Context, out: &mut OutputDir) -> Res {
    let op = operating_point(ctx)?;
    let m = op.stability_margin();
    let mut kv = KeyValues::default();
    kv.add("gain", op.gain())
        .add("margin", m.max_margin)
        .add("margin_at_hz", rad_to_hz(m.omega_at_max))
        .add("margin_stable", m.stable)
        .add("margin_resolved", m.resolved);
    match closed_loop::stability_report(&op) {
        Ok(r) => {
            kv.add("unstable_poles", r.unstable_poles)
                .add("winding", r.winding)
                .add("evaluations", r.evaluations)
                .add("stable", r.unstable_poles == 0);
        }
        Err(e) => return Err(e.into()),
    }
    out.key_values("stability.txt", &kv)?;
    Ok(())
}

pub fn fit_filter(ctx: &Context, out: &mut OutputDir) -> Res {
    let fc = ctx.config.fit.as_ref().ok_or_else(|| Failure::Validation("missing required field `fit`".into()))?;
    let path = ctx.config_dir.join(&fc.data);
    let file = std::fs::File::open(&path)
        .map_err(|e| Failure::Validation(format!("cannot read fit data {}: {e}", path.display())))?;
    let data = FrequencyResponseData::read_csv(file)?;
    let op = operating_point(ctx)?;
    let (c, s) = (&op.system.cavity, &op.steady);
    let band = FitBand {
        center_hz: fc.center_hz.unwrap_or_else(|| rad_to_hz(s.delta)),
        half_width_hz: fc.half_width_hz,
    };
    let quotient = fit::divide_out_cavity(&data, c, s)?;
    let delay = fit::estimate_delay(&quotient, &band)?;
    if delay.low_confidence {
        warn!("delay estimate is low confidence (phase is not linear in the band)");
    }
    let poly = fit::fit_polynomial_filter(&quotient, &band, delay.tau_fb)?;
    let filter = fit::recovered_filter(&poly, delay.tau_fb, op.system.filter.eta, c, s);

    let fmt_arr = |a: &[f64; 5]| format!("[{}]", a.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(", "));
    let body = format!(
        "# delay stderr {:e} s, low confidence {}\n\
         # residual rms {:e} dB, {:e} rad over {} points\n\
         [filter]\n\
         tau_fb_s = {:e}\n\
         gain_scale = {:e}\n\
         center_hz = {:e}\n\
         half_width_hz = {:e}\n\
         mag_db = {}\n\
         phase_rad = {}\n",
        delay.stderr,
        delay.low_confidence,
        poly.mag_residual_db,
        poly.phase_residual_rad,
        poly.points,
        delay.tau_fb,
        filter.gain_scale,
        band.center_hz,
        band.half_width_hz,
        fmt_arr(&poly.mag_db),
        fmt_arr(&poly.phase_rad),
    );
    out.raw("fit.toml", &body)?;

    let shape = poly.shape();
    let mut table = Table::new(&["freq_hz", "mag_db", "phase_deg", "model_mag_db", "model_phase_deg", "in_band"]);
    for i in 0..quotient.len() {
        let f = quotient.freq_hz[i];
        let w = hz_to_rad(f);
        let model = shape.eval(w) * C64::from_polar(1.0, w * delay.tau_fb);
        // Put the model phase on the same branch as the measured quotient.
        let mut mp = model.arg().to_degrees();
        mp += 360.0 * ((quotient.phase_deg[i] - mp) / 360.0).round();
        table.push_f64(&[
            f,
            quotient.mag_db[i],
            quotient.phase_deg[i],
            20.0 * model.norm().log10(),
            mp,
            if band.contains(f) { 1.0 } else { 0.0 },
        ]);
    }
    out.csv("fit_quotient.csv", &table)?;
    Ok(())
}

pub fn oracle(ctx: &Context, out: &mut OutputDir) -> Res {
    let op = operating_point(ctx)?;
    let seed = ctx.seed.unwrap_or(0);
    let (mut tc, oc) = ctx.config.trajectory_config(&op, seed)?;
    tc.spectral = true;
    let traj = oracle::simulate(&op, &tc)?;

    let recorded: Vec<usize> = (0..CHANNEL_NAMES.len()).filter(|&k| !traj.channels[k].is_empty()).collect();
    let mut cols = vec!["t_s"];
    cols.extend(recorded.iter().map(|&k| CHANNEL_NAMES[k]));
    let mut table = Table::new(&cols);
    for i in (0..traj.len()).step_by(oc.trajectory_stride.max(1)) {
        let mut row = vec![traj.t0 + i as f64 * traj.sample_dt];
        row.extend(recorded.iter().map(|&k| traj.channels[k][i]));
        table.push_f64(&row);
    }
    out.csv("trajectory.csv", &table)?;

    let p1 = periodogram::periodogram(&traj.channels[2], traj.sample_dt, oc.segment_len, oc.overlap)?;
    let p2 = periodogram::periodogram(&traj.channels[4], traj.sample_dt, oc.segment_len, oc.overlap)?;
    let mut table = Table::new(&["omega_hz", "s_q1", "s_q2"]);
    for i in 0..p1.omega.len() {
        table.push_f64(&[rad_to_hz(p1.omega[i]), p1.density[i], p2.density[i]]);
    }
    out.csv("periodogram.csv", &table)?;

    let var = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
    };
    let mut kv = KeyValues::default();
    kv.add("seed", seed)
        .add("dt_s", tc.dt)
        .add("steps", traj.steps)
        .add("samples", traj.len())
        .add("sample_dt_s", traj.sample_dt)
        .add("segments", p1.segments)
        .add("max_fluctuation_ratio", traj.max_fluctuation_ratio)
        .add("variance_q1", var(&traj.channels[2]))
        .add("variance_q2", var(&traj.channels[4]));
    out.key_values("oracle_summary.txt", &kv)?;
    Ok(())
}
