//! Output files and the run manifest.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub subcommand: String,
    pub config_path: String,
    /// SHA-256 of the effective configuration (file plus overrides).
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes files into the output directory and remembers their names.
pub struct OutputDir {
    dir: PathBuf,
    subcommand: String,
    hash: String,
    written: Vec<String>,
}

impl OutputDir {
    pub fn new(dir: &Path, subcommand: &str, hash: &str) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), subcommand: subcommand.into(), hash: hash.into(), written: Vec::new() })
    }

    pub fn manifest_name(&self) -> String {
        format!("{}.manifest.json", self.subcommand)
    }

    /// First line of every output file. Contains nothing run-dependent beyond
    /// the configuration hash, so repeated runs give identical files.
    fn header(&self) -> String {
        format!(
            "# inloop {} manifest={} config_sha256={}\n",
            env!("CARGO_PKG_VERSION"),
            self.manifest_name(),
            self.hash
        )
    }

    fn write(&mut self, name: &str, body: &str) -> std::io::Result<()> {
        let mut text = self.header();
        text.push_str(body);
        fs::write(self.dir.join(name), text)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> std::io::Result<()> {
        self.write(name, &table.render())
    }

    pub fn key_values(&mut self, name: &str, kv: &KeyValues) -> std::io::Result<()> {
        self.write(name, &kv.0)
    }

    pub fn raw(&mut self, name: &str, body: &str) -> std::io::Result<()> {
        self.write(name, body)
    }

    pub fn finish(self, mut manifest: RunManifest) -> std::io::Result<PathBuf> {
        manifest.outputs = self.written;
        let path = self.dir.join(format!("{}.manifest.json", self.subcommand));
        let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Column-oriented CSV builder. Floats use the shortest round-trip form.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        Self { header: columns.iter().map(|c| c.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn push_f64(&mut self, row: &[f64]) {
        self.push(row.iter().map(|v| fmt_f64(*v)).collect());
    }

    fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Default)]
pub struct KeyValues(String);

impl KeyValues {
    pub fn add(&mut self, key: &str, value: impl Render) -> &mut Self {
        let _ = writeln!(self.0, "{key} = {}", value.render());
        self
    }
}

pub trait Render {
    fn render(&self) -> String;
}

impl Render for f64 {
    fn render(&self) -> String {
        fmt_f64(*self)
    }
}

macro_rules! render_display {
    ($($t:ty),*) => {$(
        impl Render for $t {
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
render_display!(bool, usize, u64, String);

/// Shortest round-trip form, switching to exponent notation outside
/// [1e-3, 1e7) so that tiny and huge values stay readable.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-3..1e7).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
