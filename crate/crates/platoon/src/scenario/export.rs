//! Trace persistence: CSV files, JSON summary and SVG charts.

use std::fs;
use std::path::{Path, PathBuf};

use super::run::ScenarioTrace;
use super::svg::{line_chart, step_chart, Series};
use super::ScenarioError;

pub const TRACE_FILE: &str = "trace.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const SWITCHES_FILE: &str = "switches.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Fixed 17-significant-digit formatting, stable across runs.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// `t`, then `s_i, zeta_i, shat_i, zetahat_i, u_i` per vehicle (1-based),
/// then `topology_phase_id`.
pub fn trace_header(n: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for i in 1..=n {
        for name in ["s", "zeta", "shat", "zetahat", "u"] {
            cols.push(format!("{name}_{i}"));
        }
    }
    cols.push("topology_phase_id".into());
    cols
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ScenarioError + '_ {
    move |e| ScenarioError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the trace files into `dir`, creating it if needed. Every
/// `stride`-th step goes to `trace.csv`, plus the final step.
pub fn export(trace: &ScenarioTrace, dir: &Path, stride: usize) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stride = stride.max(1);
    let n = trace.summary.vehicles;
    let mut written = Vec::new();

    let path = dir.join(TRACE_FILE);
    let last = trace.records.len().saturating_sub(1);
    let rows = trace
        .records
        .iter()
        .enumerate()
        .filter(|(k, _)| k % stride == 0 || *k == last)
        .map(|(_, r)| {
            let mut row = Vec::with_capacity(5 * n + 2);
            row.push(num(r.t));
            for i in 0..n {
                row.push(num(r.states[i].position));
                row.push(num(r.states[i].velocity));
                row.push(num(r.errors[i].position));
                row.push(num(r.errors[i].velocity));
                row.push(num(r.inputs[i]));
            }
            row.push(trace.phase_of(r).to_string());
            row
        });
    write_rows(&path, &trace_header(n), rows)?;
    written.push(path);

    let path = dir.join(EVENTS_FILE);
    let header: Vec<String> = ["t", "vehicle", "event", "tau_hat"].iter().map(|s| s.to_string()).collect();
    let rows = trace.detections.iter().map(|d| {
        vec![num(d.t), (d.vehicle + 1).to_string(), d.event.name().to_string(), num(d.event.tau_hat())]
    });
    write_rows(&path, &header, rows)?;
    written.push(path);

    let path = dir.join(SWITCHES_FILE);
    let header: Vec<String> = ["t", "from_phase", "to_phase", "reason"].iter().map(|s| s.to_string()).collect();
    let rows = trace
        .switches
        .iter()
        .map(|s| vec![num(s.t), s.from.clone(), s.to.clone(), s.reason.name().to_string()]);
    write_rows(&path, &header, rows)?;
    written.push(path);

    let path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&trace.summary).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    written.push(path);

    // Charts use the exported rows so `plot` on trace.csv redraws them exactly.
    written.extend(write_charts(&PlotData::from_trace(trace).strided(stride), dir)?);
    Ok(written)
}

/// Columns needed for the charts.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub phases: Vec<String>,
}

impl PlotData {
    pub fn from_trace(trace: &ScenarioTrace) -> Self {
        let n = trace.summary.vehicles;
        Self {
            times: trace.records.iter().map(|r| r.t).collect(),
            positions: (0..n).map(|i| trace.records.iter().map(|r| r.states[i].position).collect()).collect(),
            velocities: (0..n).map(|i| trace.records.iter().map(|r| r.states[i].velocity).collect()).collect(),
            phases: trace.records.iter().map(|r| trace.phase_of(r).to_string()).collect(),
        }
    }

    /// Every `stride`-th sample plus the last, matching the rows of `trace.csv`.
    pub fn strided(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let last = self.times.len().saturating_sub(1);
        let keep = |k: &usize| k % stride == 0 || *k == last;
        let pick = |v: &[f64]| v.iter().enumerate().filter(|(k, _)| keep(k)).map(|(_, x)| *x).collect();
        Self {
            times: pick(&self.times),
            positions: self.positions.iter().map(|c| pick(c)).collect(),
            velocities: self.velocities.iter().map(|c| pick(c)).collect(),
            phases: self.phases.iter().enumerate().filter(|(k, _)| keep(k)).map(|(_, p)| p.clone()).collect(),
        }
    }

    /// Reads a `trace.csv` written by [`export`].
    pub fn read_csv(path: &Path) -> Result<Self, ScenarioError> {
        let bad = |msg: String| ScenarioError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, msg),
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let header = r.headers().map_err(csv_err(path))?.clone();
        let cols = header.len();
        if cols < 3 || (cols - 2) % 5 != 0 || &header[0] != "t" || &header[cols - 1] != "topology_phase_id" {
            return Err(bad(format!("unexpected trace header with {cols} columns")));
        }
        let n = (cols - 2) / 5;
        let expected = trace_header(n);
        if header.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(bad("trace header does not match the trace schema".into()));
        }
        let mut data = PlotData {
            times: Vec::new(),
            positions: vec![Vec::new(); n],
            velocities: vec![Vec::new(); n],
            phases: Vec::new(),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err(path))?;
            let get = |k: usize| -> Result<f64, ScenarioError> {
                rec[k].parse().map_err(|_| bad(format!("row {}: column {} is not a number", line + 2, expected[k])))
            };
            data.times.push(get(0)?);
            for i in 0..n {
                data.positions[i].push(get(1 + 5 * i)?);
                data.velocities[i].push(get(2 + 5 * i)?);
            }
            data.phases.push(rec[cols - 1].to_string());
        }
        Ok(data)
    }
}

/// Writes `positions.svg`, `velocities.svg` and `switching.svg`.
pub fn write_charts(data: &PlotData, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let label = |i: usize| format!("vehicle {}", i + 1);
    let series = |cols: &[Vec<f64>]| -> Vec<(String, Vec<f64>)> {
        cols.iter().enumerate().map(|(i, c)| (label(i), c.clone())).collect()
    };
    let charts = [
        ("positions.svg", "Positions", "position (m)", series(&data.positions)),
        ("velocities.svg", "Velocities", "velocity (m/s)", series(&data.velocities)),
    ];
    let mut out = Vec::new();
    for (file, title, y_label, cols) in charts {
        let s: Vec<Series<'_>> = cols.iter().map(|(l, v)| Series { label: l.clone(), values: v }).collect();
        let path = dir.join(file);
        fs::write(&path, line_chart(title, "time (s)", y_label, &data.times, &s)).map_err(io_err(&path))?;
        out.push(path);
    }
    let path = dir.join("switching.svg");
    fs::write(&path, step_chart("Switching signal", "time (s)", &data.times, &data.phases)).map_err(io_err(&path))?;
    out.push(path);
    Ok(out)
}
