//! CSV artifacts. Every file is UTF-8 with a header row; floats are written
//! in shortest round-trip form and missing values as empty cells.

use std::fs::File;
use std::path::{Path, PathBuf};

use clockens_core::analysis::{AdevCurve, BandPoint};
use clockens_core::simulate::Trajectory;
use nalgebra::DVector;

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        ryu::Buffer::new().format_finite(v).to_string()
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes `header` and `rows` to `path`.
pub fn write_table<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Columns of the per-step series file, in order.
pub fn series_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = ["k", "t", "TA_jst", "TA_ckf", "TA_theory"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=m).map(|i| format!("eps_jst_{i}")));
    h.extend((1..=m).map(|i| format!("eps_ckf_{i}")));
    h.push("trace_P".into());
    h
}

/// Per-step data of one run; absent algorithms leave their columns empty.
pub struct SeriesColumns<'a> {
    pub m: usize,
    pub times: &'a [f64],
    pub ta_jst: Option<&'a [f64]>,
    pub ta_ckf: Option<&'a [f64]>,
    pub ta_theory: Option<&'a [f64]>,
    pub eps_jst: Option<&'a [DVector<f64>]>,
    pub eps_ckf: Option<&'a [DVector<f64>]>,
    pub trace_p: Option<&'a [f64]>,
}

pub fn write_series(path: &Path, s: &SeriesColumns) -> Result<()> {
    let rows = (0..s.times.len()).map(|k| {
        let mut row = vec![k.to_string(), fmt_f64(s.times[k])];
        for col in [s.ta_jst, s.ta_ckf, s.ta_theory] {
            row.push(fmt_opt(col.map(|c| c[k])));
        }
        for eps in [s.eps_jst, s.eps_ckf] {
            for i in 0..s.m {
                row.push(fmt_opt(eps.map(|e| e[k][i])));
            }
        }
        row.push(fmt_opt(s.trace_p.map(|c| c[k])));
        row
    });
    write_table(path, &series_header(s.m), rows)
}

/// `section,name,value` rows.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<(String, String, String)>,
}

impl Summary {
    pub fn push(&mut self, section: &str, name: impl Into<String>, value: impl Into<String>) {
        self.rows.push((section.into(), name.into(), value.into()));
    }

    pub fn push_f64(&mut self, section: &str, name: impl Into<String>, value: f64) {
        self.push(section, name, fmt_f64(value));
    }

    pub fn get(&self, section: &str, name: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r.0 == section && r.1 == name)
            .map(|r| r.2.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = ["section", "name", "value"].map(String::from);
        write_table(
            path,
            &header,
            self.rows.iter().map(|(a, b, c)| vec![a.clone(), b.clone(), c.clone()]),
        )
    }
}

pub fn write_adev(path: &Path, curve: &AdevCurve) -> Result<()> {
    let header = ["tau", "adev"].map(String::from);
    write_table(
        path,
        &header,
        curve
            .taus
            .iter()
            .zip(&curve.adev)
            .map(|(t, a)| vec![fmt_f64(*t), fmt_f64(*a)]),
    )
}

pub fn write_band(path: &Path, band: &[BandPoint]) -> Result<()> {
    let header = ["k", "mean", "lo", "hi"].map(String::from);
    write_table(
        path,
        &header,
        band.iter()
            .enumerate()
            .map(|(k, b)| vec![k.to_string(), fmt_f64(b.mean), fmt_f64(b.lo), fmt_f64(b.hi)]),
    )
}

/// Header of a trajectory file: `k, t`, the state `x_0..`, the
/// measurements `y_1..y_{m-1}`, the process noise `v_0..` (empty on the last
/// row) and the measurement noise `w_1..`.
pub fn trajectory_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["k".to_string(), "t".to_string()];
    h.extend((0..n * m).map(|i| format!("x_{i}")));
    h.extend((1..m).map(|i| format!("y_{i}")));
    h.extend((0..n * m).map(|i| format!("v_{i}")));
    h.extend((1..m).map(|i| format!("w_{i}")));
    h
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, times: &[f64], n: usize, m: usize) -> Result<()> {
    let rows = (0..traj.states.len()).map(|k| {
        let mut row = vec![k.to_string(), fmt_f64(times[k])];
        row.extend(traj.states[k].iter().map(|v| fmt_f64(*v)));
        row.extend(traj.measurements[k].iter().map(|v| fmt_f64(*v)));
        match traj.process_noises.get(k) {
            Some(v) => row.extend(v.iter().map(|x| fmt_f64(*x))),
            None => row.extend((0..n * m).map(|_| String::new())),
        }
        row.extend(traj.measurement_noises[k].iter().map(|v| fmt_f64(*v)));
        row
    });
    write_table(path, &trajectory_header(n, m), rows)
}

pub fn read_trajectory(path: &Path, n: usize, m: usize) -> Result<Trajectory> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let expected = trajectory_header(n, m);
    let header = r.headers().map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(
            1,
            format!("header does not match a trajectory with n={n}, m={m}"),
        ));
    }
    let nm = n * m;
    let mut traj = Trajectory {
        states: Vec::new(),
        measurements: Vec::new(),
        process_noises: Vec::new(),
        measurement_noises: Vec::new(),
    };
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |j: usize| -> Result<Option<f64>> {
            let s = rec.get(j).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| parse_err(line, format!("column {}: {e}", expected[j])))
        };
        let block = |start: usize, len: usize| -> Result<Option<DVector<f64>>> {
            let vals = (start..start + len).map(field).collect::<Result<Vec<_>>>()?;
            if vals.iter().all(Option::is_none) && len > 0 {
                return Ok(None);
            }
            vals.into_iter()
                .collect::<Option<Vec<f64>>>()
                .map(|v| Some(DVector::from_vec(v)))
                .ok_or_else(|| parse_err(line, "partially empty block".into()))
        };
        let need = |v: Option<DVector<f64>>, what: &str| v.ok_or_else(|| parse_err(line, format!("missing {what}")));
        traj.states.push(need(block(2, nm)?, "state")?);
        traj.measurements
            .push(need(block(2 + nm, m - 1)?, "measurement")?.clone());
        if let Some(v) = block(1 + nm + m, nm)? {
            traj.process_noises.push(v);
        }
        traj.measurement_noises
            .push(need(block(1 + 2 * nm + m, m - 1)?, "measurement noise")?);
    }
    if traj.states.is_empty() || traj.process_noises.len() + 1 != traj.states.len() {
        return Err(parse_err(
            0,
            "process noise must be present on every row but the last".into(),
        ));
    }
    Ok(traj)
}
