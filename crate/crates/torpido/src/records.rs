//! Learning-curve CSV files and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use torpido_core::eval::{Bounds, CurveRecord, RunEntry, RunManifest};

pub const CURVE_HEADER: [&str; 9] = [
    "run_id",
    "algorithm",
    "instance_id",
    "env_steps",
    "mean_return",
    "stderr",
    "episodes",
    "wall_seconds",
    "alpha",
];

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}, line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// CSV text for `records`; floats use the shortest exact representation.
pub fn curves_to_csv(records: &[CurveRecord]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVE_HEADER)?;
    for r in records {
        w.write_record([
            r.run_id.clone(),
            r.algorithm.clone(),
            r.instance_id.clone(),
            r.env_steps.to_string(),
            r.mean_return.to_string(),
            r.stderr.to_string(),
            r.episodes.to_string(),
            r.wall_seconds.to_string(),
            r.alpha.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn curves_from_csv(text: &str, path: &str) -> Result<Vec<CurveRecord>, RecordError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let csv_err = |source| RecordError::Csv {
        path: path.to_string(),
        source,
    };
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CURVE_HEADER) {
        return Err(RecordError::Format {
            path: path.to_string(),
            line: 1,
            message: format!("unexpected header, expected `{}`", CURVE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let line = i + 2;
        let bad = |col: &str| RecordError::Format {
            path: path.to_string(),
            line,
            message: format!("invalid `{col}`"),
        };
        let field = |k: usize| row.get(k).unwrap_or("");
        out.push(CurveRecord {
            run_id: field(0).to_string(),
            algorithm: field(1).to_string(),
            instance_id: field(2).to_string(),
            env_steps: field(3).parse().map_err(|_| bad("env_steps"))?,
            mean_return: field(4).parse().map_err(|_| bad("mean_return"))?,
            stderr: field(5).parse().map_err(|_| bad("stderr"))?,
            episodes: field(6).parse().map_err(|_| bad("episodes"))?,
            wall_seconds: field(7).parse().map_err(|_| bad("wall_seconds"))?,
            alpha: match field(8) {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("alpha"))?),
            },
        });
    }
    Ok(out)
}

pub fn write_curves(records: &[CurveRecord], path: &Path) -> Result<(), RecordError> {
    let text = curves_to_csv(records).map_err(|source| RecordError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRecord>, RecordError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    curves_from_csv(&text, &path.display().to_string())
}

/// Manifest text: `run <id> config <hash> seed <seed>` and
/// `bounds <instance> <v_inf> <v_sup>` lines.
pub fn manifest_to_text(m: &RunManifest) -> String {
    let mut out = String::from("# torpido run manifest\n");
    for r in &m.runs {
        let _ = writeln!(out, "run {} config {:016x} seed {}", r.run_id, r.config_hash, r.seed);
    }
    for (id, b) in &m.bounds {
        let _ = writeln!(out, "bounds {id} {} {}", b.v_inf, b.v_sup);
    }
    out
}

pub fn manifest_from_text(text: &str, path: &str) -> Result<RunManifest, RecordError> {
    let mut m = RunManifest::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: &str| RecordError::Format {
            path: path.to_string(),
            line: i + 1,
            message: message.to_string(),
        };
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["run", id, "config", hash, "seed", seed] => m.add_run(RunEntry {
                run_id: id.to_string(),
                config_hash: u64::from_str_radix(hash, 16).map_err(|_| bad("invalid config hash"))?,
                seed: seed.parse().map_err(|_| bad("invalid seed"))?,
            }),
            ["bounds", id, inf, sup] => {
                let v_inf: f64 = inf.parse().map_err(|_| bad("invalid V_inf"))?;
                let v_sup: f64 = sup.parse().map_err(|_| bad("invalid V_sup"))?;
                if !(v_inf <= v_sup) {
                    return Err(bad("V_inf exceeds V_sup"));
                }
                m.bounds.insert(id.to_string(), Bounds { v_inf, v_sup });
            }
            _ => return Err(bad("expected a `run` or `bounds` line")),
        }
    }
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, RecordError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    manifest_from_text(&text, &path.display().to_string())
}

/// Loads the manifest at `path` (empty if absent), widens it with
/// `records` and the run entry, and writes it back. Returns the result.
pub fn update_manifest(records: &[CurveRecord], run: Option<RunEntry>, path: &Path) -> Result<RunManifest, RecordError> {
    let mut m = if path.exists() {
        read_manifest(path)?
    } else {
        RunManifest::default()
    };
    m.update(records);
    if let Some(run) = run {
        m.add_run(run);
    }
    fs::write(path, manifest_to_text(&m)).map_err(io_err(path))?;
    Ok(m)
}

/// Reads curves and recomputes every α from the manifest.
pub fn read_curves_with_manifest(curves: &Path, manifest: &Path) -> Result<Vec<CurveRecord>, RecordError> {
    let mut records = read_curves(curves)?;
    read_manifest(manifest)?.annotate(&mut records);
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(mean: f64) -> CurveRecord {
        CurveRecord {
            run_id: "r,1".into(),
            algorithm: "TORPIDO".into(),
            instance_id: "x".into(),
            env_steps: 10,
            mean_return: mean,
            stderr: 0.1,
            episodes: 100,
            wall_seconds: 0.0,
            alpha: Some(1.0 / 3.0),
        }
    }

    #[test]
    fn empty_is_header_only() {
        assert_eq!(curves_to_csv(&[]).unwrap(), format!("{}\n", CURVE_HEADER.join(",")));
    }

    #[test]
    fn manifest_update_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let recs = vec![rec(1.0), rec(5.0)];
        let entry = RunEntry {
            run_id: "r".into(),
            config_hash: 7,
            seed: 1,
        };
        update_manifest(&recs, Some(entry.clone()), &path).unwrap();
        let once = fs::read_to_string(&path).unwrap();
        update_manifest(&recs, Some(entry), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), once);
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.bounds["x"], Bounds { v_inf: 1.0, v_sup: 5.0 });
    }

    #[test]
    fn bad_header_rejected() {
        assert!(curves_from_csv("a,b\n1,2\n", "p").is_err());
    }
}
