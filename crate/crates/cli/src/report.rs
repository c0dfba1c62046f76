//! Result records and atomic CSV/JSON emission.

use anyhow::{Context, Result};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// One metric of one run. A check row carries a tolerance and a pass flag;
/// plain metric rows leave them empty.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub experiment_id: String,
    pub config_hash: String,
    pub check: String,
    pub value: f64,
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
    pub detail: String,
    pub wall_ms: u128,
}

impl RunRecord {
    pub fn metric(id: &str, hash: &str, name: &str, value: f64, detail: impl Into<String>) -> Self {
        Self {
            experiment_id: id.to_string(),
            config_hash: hash.to_string(),
            check: name.to_string(),
            value,
            tolerance: None,
            pass: None,
            detail: detail.into(),
            wall_ms: 0,
        }
    }

    pub fn check(
        id: &str,
        hash: &str,
        name: &str,
        value: f64,
        tolerance: f64,
        pass: bool,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            experiment_id: id.to_string(),
            config_hash: hash.to_string(),
            check: name.to_string(),
            value,
            tolerance: Some(tolerance),
            pass: Some(pass),
            detail: detail.into(),
            wall_ms: 0,
        }
    }
}

/// Stable column order of the CSV schema; `timestamp` always comes last and
/// is the only run-dependent column.
pub const CSV_HEADER: &str =
    "experiment_id,config_hash,check,value,tolerance,pass,detail,wall_ms,timestamp";

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn records_to_csv(records: &[RunRecord], timestamp: u64) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let tol = r.tolerance.map_or(String::new(), |t| format!("{t:e}"));
        let pass = r.pass.map_or(String::new(), |p| p.to_string());
        out.push_str(&format!(
            "{},{},{},{:.17e},{},{},{},{},{}\n",
            csv_escape(&r.experiment_id),
            r.config_hash,
            csv_escape(&r.check),
            r.value,
            tol,
            pass,
            csv_escape(&r.detail),
            r.wall_ms,
            timestamp,
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Write the whole record set atomically (temp file + rename): a failed run
/// leaves no partial output behind.
pub fn write_records(
    out_dir: &Path,
    name: &str,
    records: &[RunRecord],
    format: OutputFormat,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (ext, body) = match format {
        OutputFormat::Csv => ("csv", records_to_csv(records, timestamp)),
        OutputFormat::Json => (
            "json",
            serde_json::to_string_pretty(&serde_json::json!({
                "timestamp": timestamp,
                "records": records,
            }))? + "\n",
        ),
    };
    let final_path = out_dir.join(format!("{name}.{ext}"));
    let mut tmp = tempfile::NamedTempFile::new_in(out_dir)?;
    tmp.write_all(body.as_bytes())?;
    tmp.flush()?;
    tmp.persist(&final_path)
        .with_context(|| format!("cannot persist {}", final_path.display()))?;
    Ok(final_path)
}

/// Dump raw Monte Carlo trajectories to a flat binary file.
///
/// Layout (little endian): magic `BSPD`, u32 version = 1, u64 n_paths,
/// u64 n_steps, f64 dt, u64 seed; then per path `n_steps + 1` f64 positions
/// followed by exit_time (NaN when the path survived), int_lambda,
/// int_bbar_dw, int_bbar_sq.
pub fn dump_paths_binary(
    out_dir: &Path,
    name: &str,
    ensemble: &bspde_core::PathEnsemble,
) -> Result<PathBuf> {
    let trajs = ensemble
        .trajectories
        .as_ref()
        .context("the ensemble was simulated without trajectory recording")?;
    std::fs::create_dir_all(out_dir)?;
    let final_path = out_dir.join(format!("{name}.bin"));
    let mut tmp = tempfile::NamedTempFile::new_in(out_dir)?;
    {
        let w = tmp.as_file_mut();
        w.write_all(b"BSPD")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(trajs.len() as u64).to_le_bytes())?;
        w.write_all(&(ensemble.n_steps as u64).to_le_bytes())?;
        w.write_all(&ensemble.dt.to_le_bytes())?;
        w.write_all(&ensemble.seed.to_le_bytes())?;
        for (traj, s) in trajs.iter().zip(&ensemble.summaries) {
            let mut buf = Vec::with_capacity((traj.len() + 4) * 8);
            for v in traj {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&s.exit_time.unwrap_or(f64::NAN).to_le_bytes());
            buf.extend_from_slice(&s.int_lambda.to_le_bytes());
            buf.extend_from_slice(&s.int_bbar_dw.to_le_bytes());
            buf.extend_from_slice(&s.int_bbar_sq.to_le_bytes());
            w.write_all(&buf)?;
        }
        w.flush()?;
    }
    tmp.persist(&final_path)
        .with_context(|| format!("cannot persist {}", final_path.display()))?;
    Ok(final_path)
}

/// Drop the timestamp column from a CSV body, for determinism comparisons.
pub fn strip_timestamp_column(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(idx) => &line[..idx],
            None => line,
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_is_stable_modulo_timestamp() {
        let recs = vec![
            RunRecord::check("e", "abc", "c1", 1.5, 1e-9, true, "ok"),
            RunRecord::metric("e", "abc", "m1", 2.5, "with, comma"),
        ];
        let a = records_to_csv(&recs, 1);
        let b = records_to_csv(&recs, 2);
        assert_ne!(a, b);
        assert_eq!(strip_timestamp_column(&a), strip_timestamp_column(&b));
        assert!(a.starts_with(CSV_HEADER));
        assert!(a.contains("\"with, comma\""));
    }

    #[test]
    fn atomic_write_creates_file() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![RunRecord::metric("e", "h", "m", 0.5, "")];
        let p = write_records(dir.path(), "out", &recs, OutputFormat::Csv).unwrap();
        assert!(p.exists());
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        let pj = write_records(dir.path(), "out", &recs, OutputFormat::Json).unwrap();
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&pj).unwrap()).unwrap();
        assert_eq!(parsed["records"][0]["check"], "m");
    }
}
