use inloop::config::Config;
use inloop::fit::FrequencyResponseData;
use inloop::{hz_to_rad, ResponseShape, C64};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn inloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inloop")).args(args).output().expect("binary runs")
}

fn run_in(out: &Path, config: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    all.extend_from_slice(args);
    inloop(&all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Rows of a CSV written by the CLI: (header, rows) with the comment line checked.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let first = lines.next().unwrap();
    assert!(first.starts_with("# inloop") && first.contains("manifest=") && first.contains("config_sha256="), "{first}");
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn response_csv_has_header_and_monotone_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &configs().join("cavity-only.toml"), &["response"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("response.csv"));
    assert_eq!(header[0], "omega_hz");
    for c in ["chi_c_re", "chi_eff_im", "T_re", "t_coeff_im", "margin"] {
        assert!(header.iter().any(|h| h == c), "missing {c}");
    }
    let f: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(f.len() > 100);
    assert!(f.windows(2).all(|w| w[1] > w[0]));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("response.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "response");
    assert_eq!(manifest["outputs"][0], "response.csv");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_field_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("cavity-only.toml")).unwrap();
    let broken: String = text.lines().filter(|l| !l.starts_with("eta")).map(|l| format!("{l}\n")).collect();
    let cfg = dir.path().join("broken.toml");
    fs::write(&cfg, broken).unwrap();
    let o = run_in(dir.path(), &cfg, &["steady-state"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));
}

#[test]
fn malformed_toml_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[cavity]\nkappa0_hz = = 3\n").unwrap();
    let o = run_in(dir.path(), &cfg, &["response"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let o = inloop(&["--config", "x.toml", "bode"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gain_sweep_flags_unstable_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        &configs().join("doublet.toml"),
        &["sweep", "--axis", "gain", "--start", "0", "--stop", "1.2", "--points", "4"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(header[0], "gain");
    let stable = header.iter().position(|h| h == "stable").unwrap();
    let poles = header.iter().position(|h| h == "unstable_poles").unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][stable], "true");
    assert_eq!(rows[3][stable], "false");
    assert!(rows[3][poles].parse::<usize>().unwrap() > 0);
    assert_eq!(rows[3][1], "NaN");
}

#[test]
fn identical_inputs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("doublet.toml");
    for d in [&a, &b] {
        let o = run_in(d.path(), &cfg, &["occupancy", "--set", "filter.gain=0.5"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let x = fs::read(a.path().join("occupancy.csv")).unwrap();
    let y = fs::read(b.path().join("occupancy.csv")).unwrap();
    assert_eq!(x, y);
}

#[test]
fn oracle_output_is_seed_deterministic() {
    // Coarse recording and short segments keep the files small.
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("doublet.toml");
    let sets = [
        "--set",
        "oracle.duration_s=0.6",
        "--set",
        "oracle.segment_len=256",
        "--set",
        "oracle.record_every=100",
        "--set",
        "oracle.trajectory_stride=1000",
    ];
    let mut outputs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let mut args = vec!["oracle", "--seed", "11"];
        args.extend_from_slice(&sets);
        let o = run_in(&out, &cfg, &args);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(fs::read(out.join("periodogram.csv")).unwrap());
        outputs.push(fs::read(out.join("trajectory.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[2]);
    assert_eq!(outputs[1], outputs[3]);
}

#[test]
fn override_beats_file_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &configs().join("cavity-only.toml"), &["steady-state", "--set", "filter.gain=0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("steady_state.txt")).unwrap();
    let gain: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("gain = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((gain - 0.5).abs() < 1e-12);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("steady-state.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["overrides"][0], "filter.gain=0.5");
}

#[test]
fn unstable_operating_point_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &configs().join("doublet.toml"), &["occupancy", "--set", "filter.gain=1.2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn fit_filter_recovers_synthetic_delay() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(configs().join("cavity-only.toml")).unwrap();
    let cfg_text = format!("{base}\n[fit]\ndata = \"open_loop.csv\"\nhalf_width_hz = 150e3\n");
    let cfg_path = dir.path().join("fit.toml");
    fs::write(&cfg_path, &cfg_text).unwrap();

    // Measured open-loop response of a known filter at the configured operating point.
    let op = Config::from_toml(&cfg_text, &[]).unwrap().operating_point().unwrap();
    let tau = 812e-9;
    let shape = ResponseShape {
        mag_db: [-1.0, 0.0, -2.0, 0.0, 0.5],
        phase_rad: [0.3, 0.0, -0.4, 0.0, 0.1],
        center: op.steady.delta,
        half_width: hz_to_rad(150e3),
    };
    let freq: Vec<f64> = (0..601).map(|i| 180e3 + 500.0 * i as f64).collect();
    let t: Vec<C64> = freq
        .iter()
        .map(|&f| {
            let w = hz_to_rad(f);
            let cav = inloop::fit::cavity_factor(f, &op.system.cavity, &op.steady);
            shape.eval(w) * C64::from_polar(1.0, w * tau) * cav
        })
        .collect();
    let data = FrequencyResponseData::from_complex(freq, &t).unwrap();
    data.write_csv(fs::File::create(dir.path().join("open_loop.csv")).unwrap()).unwrap();

    let o = run_in(dir.path(), &cfg_path, &["fit-filter"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("fit.toml")).unwrap();
    let doc: toml::Table = toml::from_str(&text).unwrap();
    let f = doc["filter"].as_table().unwrap();
    let got = f["tau_fb_s"].as_float().unwrap();
    assert!((got / tau - 1.0).abs() < 1e-3, "{got}");
    let mag: Vec<f64> = f["mag_db"].as_array().unwrap().iter().map(|v| v.as_float().unwrap()).collect();
    assert!((mag[0] + 1.0).abs() < 1e-3 && (mag[2] + 2.0).abs() < 1e-3, "{mag:?}");
}
