use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dae_engine::{CurrentProfile, SimResult};
use crate::error::{Error, Result};
use crate::pack_model::PackState;

/// Whether a CSV holds plant states or observer estimates; only the column
/// prefixes differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Truth,
    Estimate,
}

impl SeriesKind {
    fn prefixes(self) -> [&'static str; 3] {
        match self {
            SeriesKind::Truth => ["z", "U", "I"],
            SeriesKind::Estimate => ["zhat", "Uhat", "Ihat"],
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => Error::Parse {
            source_name: path.display().to_string(),
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn sim_csv_header(result: &SimResult, kind: SeriesKind) -> Vec<String> {
    let [z, u, i] = kind.prefixes();
    let mut h = vec!["t".to_string()];
    h.extend(result.labels.iter().map(|l| format!("{z}[{l}]")));
    if result.include_rc {
        h.extend(result.labels.iter().map(|l| format!("{u}[{l}]")));
    }
    h.extend(result.labels.iter().map(|l| format!("{i}[{l}]")));
    h.push("V_pack".into());
    h.push("resid".into());
    h
}

pub fn write_sim_csv(path: &Path, result: &SimResult, kind: SeriesKind) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(sim_csv_header(result, kind))
        .map_err(|e| csv_err(path, e))?;
    for (n, state) in result.states.iter().enumerate() {
        let mut row = Vec::with_capacity(state.s.len() + state.u.len() + 3);
        row.push(result.times[n].to_string());
        row.extend(state.s.iter().map(f64::to_string));
        row.extend(state.u.iter().map(f64::to_string));
        row.push(result.v_pack[n].to_string());
        row.push(result.residuals[n].to_string());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn parse_label<'a>(column: &'a str, prefix: &str) -> Option<&'a str> {
    column
        .strip_prefix(prefix)?
        .strip_prefix('[')?
        .strip_suffix(']')
}

/// Reads a file written by [`write_sim_csv`], recovering the cell labels and
/// RC layout from the header.
pub fn read_sim_csv(path: &Path) -> Result<(SimResult, SeriesKind)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let bad_header = |message: String| Error::Parse {
        source_name: path.display().to_string(),
        line: 1,
        message,
    };
    let kind = match header.get(1) {
        Some(c) if c.starts_with("zhat[") => SeriesKind::Estimate,
        Some(c) if c.starts_with("z[") => SeriesKind::Truth,
        _ => return Err(bad_header("expected `t` followed by SOC columns".into())),
    };
    let [zp, up, ip] = kind.prefixes();
    let labels: Vec<String> = header[1..]
        .iter()
        .map_while(|c| parse_label(c, zp).map(str::to_string))
        .collect();
    let nc = labels.len();
    let include_rc = header
        .get(1 + nc)
        .is_some_and(|c| parse_label(c, up).is_some());
    let nd = if include_rc { 2 * nc } else { nc };
    let mut expected = vec!["t".to_string()];
    expected.extend(labels.iter().map(|l| format!("{zp}[{l}]")));
    if include_rc {
        expected.extend(labels.iter().map(|l| format!("{up}[{l}]")));
    }
    expected.extend(labels.iter().map(|l| format!("{ip}[{l}]")));
    expected.push("V_pack".into());
    expected.push("resid".into());
    if header != expected {
        return Err(bad_header(format!(
            "header does not match the series layout, expected {}",
            expected.join(",")
        )));
    }

    let mut out = SimResult {
        labels,
        include_rc,
        times: Vec::new(),
        states: Vec::new(),
        v_pack: Vec::new(),
        residuals: Vec::new(),
    };
    for record in r.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let values: Vec<f64> = record
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    source_name: path.display().to_string(),
                    line,
                    message: format!("column `{}`: {e} ({v:?})", expected[c]),
                })
            })
            .collect::<Result<_>>()?;
        out.times.push(values[0]);
        out.states.push(PackState {
            s: DVector::from_row_slice(&values[1..1 + nd]),
            u: DVector::from_row_slice(&values[1 + nd..1 + nd + nc]),
        });
        out.v_pack.push(values[1 + nd + nc]);
        out.residuals.push(values[2 + nd + nc]);
    }
    Ok((out, kind))
}

pub fn write_profile_csv(path: &Path, profile: &CurrentProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["t", "I"]).map_err(|e| csv_err(path, e))?;
    for (t, i) in profile.times().iter().zip(profile.currents()) {
        w.write_record([t.to_string(), i.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Two columns `t,I`; the current is held from each time to the next.
pub fn read_profile_csv(path: &Path) -> Result<CurrentProfile> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() != 2 {
        return Err(Error::Parse {
            source_name: path.display().to_string(),
            line: 1,
            message: "expected header `t,I`".into(),
        });
    }
    let (mut times, mut currents) = (Vec::new(), Vec::new());
    for record in r.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse = |v: &str| {
            v.trim().parse::<f64>().map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                line,
                message: format!("{e} ({v:?})"),
            })
        };
        times.push(parse(&record[0])?);
        currents.push(parse(&record[1])?);
    }
    CurrentProfile::new(times, currents).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dae_engine::{simulate, Integrator};
    use crate::ocv_cell::{CellParams, OcvModel};
    use crate::pack_model::{assemble_system, PackTopology};

    fn short_run(include_rc: bool) -> SimResult {
        let mut cell = CellParams::resistive(0.05, 1000.0, OcvModel::graphite_nmc());
        cell.r_rc = 0.02;
        cell.c_rc = 500.0;
        let sys = assemble_system(&PackTopology::homogeneous(2, 2, cell, include_rc)).unwrap();
        let mut s0 = DVector::from_element(sys.n_diff(), 0.0);
        for k in 0..4 {
            s0[k] = 0.3 + 0.1 * k as f64;
        }
        let profile = CurrentProfile::new(vec![0.0, 3.3], vec![1.0 / 3.0, -2.7]).unwrap();
        simulate(&sys, &s0, &profile, 0.7, 7.0, Integrator::Rk4).unwrap()
    }

    #[test]
    fn sim_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for rc in [false, true] {
            let run = short_run(rc);
            assert_eq!(run.times.len(), 11);
            for kind in [SeriesKind::Truth, SeriesKind::Estimate] {
                let path = dir.path().join("run.csv");
                write_sim_csv(&path, &run, kind).unwrap();
                let (back, k) = read_sim_csv(&path).unwrap();
                assert_eq!(k, kind);
                assert_eq!(back, run);
            }
        }
    }

    #[test]
    fn header_layout() {
        let run = short_run(false);
        assert_eq!(
            sim_csv_header(&run, SeriesKind::Truth).join(","),
            "t,z[1.1],z[2.1],z[1.2],z[2.2],I[1.1],I[2.1],I[1.2],I[2.2],V_pack,resid"
        );
        let est = sim_csv_header(&short_run(true), SeriesKind::Estimate);
        assert_eq!(est[5], "Uhat[1.1]");
        assert_eq!(est[9], "Ihat[1.1]");
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,I\n0,1.0\n1,oops\n").unwrap();
        match read_profile_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn profile_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = CurrentProfile::new(vec![0.0, 0.1, 2.5], vec![0.1, -1e-17, 3.0]).unwrap();
        write_profile_csv(&path, &p).unwrap();
        assert_eq!(read_profile_csv(&path).unwrap(), p);
    }
}
