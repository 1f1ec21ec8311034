//! CSV tables, tidy plot data and the run manifest.
//!
//! Every CSV row ends with the config hash. Reals are written with 17
//! significant digits so that reruns can be diffed byte for byte.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

pub const MANIFEST_VERSION: u32 = 1;

pub fn real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// One cell of a CSV row.
pub enum Cell {
    R(f64),
    I(i64),
    S(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::R(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::I(x as i64)
    }
}

impl From<u32> for Cell {
    fn from(x: u32) -> Self {
        Cell::I(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::S(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::S(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::S(x)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::R(x) => real(*x),
            Cell::I(i) => i.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($crate::output::Cell::from($x)),*] };
}

/// A CSV file with a fixed header; rows are flushed as they are written so
/// that an interrupted run leaves everything computed so far on disk.
pub struct Table {
    w: csv::Writer<File>,
    width: usize,
    hash: String,
    pub path: PathBuf,
}

impl Table {
    pub fn create(path: PathBuf, header: &[&str], hash: &str) -> Result<Self> {
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut h: Vec<&str> = header.to_vec();
        h.push("config_hash");
        w.write_record(&h)?;
        w.flush()?;
        Ok(Self { w, width: header.len(), hash: hash.to_string(), path })
    }

    pub fn write(&mut self, cells: Vec<Cell>) -> Result<()> {
        assert_eq!(cells.len(), self.width, "row width does not match the header of {}", self.path.display());
        let mut rec: Vec<String> = cells.iter().map(Cell::render).collect();
        rec.push(self.hash.clone());
        self.w.write_record(&rec)?;
        self.w.flush()?;
        Ok(())
    }
}

/// Output sink for one run: the manifest plus every table written.
pub struct Run {
    pub dir: PathBuf,
    pub command: String,
    pub hash: String,
    emit_plot_data: bool,
    plot: Option<Table>,
    files: Vec<String>,
    manifest: Value,
    started: Instant,
}

impl Run {
    pub fn start(dir: &Path, command: &str, cfg: &ExperimentConfig, threads: usize, emit_plot_data: bool) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let hash = cfg.hash();
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = json!({
            "manifest_version": MANIFEST_VERSION,
            "command": command,
            "partial": true,
            "config_hash": hash,
            "seed": cfg.seed,
            "threads": threads,
            "versions": { "sbm-lab": env!("CARGO_PKG_VERSION"), "sbm-core": sbm_core::VERSION },
            "started_unix": unix,
            "config": cfg,
        });
        let mut run = Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            hash,
            emit_plot_data,
            plot: None,
            files: Vec::new(),
            manifest,
            started: Instant::now(),
        };
        if emit_plot_data {
            let path = run.path("plot");
            run.plot = Some(Table::create(path, &["series", "x_name", "x", "y_name", "y", "se"], &run.hash)?);
            run.files.push(format!("{}_plot.csv", run.command));
        }
        run.write_manifest()?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{}_{name}.csv", self.command))
    }

    pub fn table(&mut self, name: &str, header: &[&str]) -> Result<Table> {
        let t = Table::create(self.path(name), header, &self.hash)?;
        self.files.push(format!("{}_{name}.csv", self.command));
        self.write_manifest()?;
        Ok(t)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let file = format!("{}_{name}.json", self.command);
        fs::write(self.dir.join(&file), serde_json::to_string_pretty(value)?)?;
        self.files.push(file);
        self.write_manifest()
    }

    /// Tidy long-format row; ignored unless plot data was requested.
    pub fn plot(&mut self, series: &str, x_name: &str, x: f64, y_name: &str, y: f64, se: f64) -> Result<()> {
        match self.plot.as_mut() {
            Some(t) if self.emit_plot_data => t.write(row![series, x_name, x, y_name, y, se]),
            _ => Ok(()),
        }
    }

    fn write_manifest(&mut self) -> Result<()> {
        self.manifest["outputs"] = json!(self.files);
        self.manifest["wall_time_s"] = json!(self.started.elapsed().as_secs_f64());
        let path = self.dir.join(format!("{}_manifest.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?).with_context(|| format!("writing {}", path.display()))
    }

    /// Rewrites the manifest without the partial flag.
    pub fn finish(mut self, status: &str, summary: Value) -> Result<()> {
        self.manifest["partial"] = json!(false);
        self.manifest["status"] = json!(status);
        self.manifest["summary"] = summary;
        self.write_manifest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = real(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(real(f64::NAN), "NaN");
    }
}
