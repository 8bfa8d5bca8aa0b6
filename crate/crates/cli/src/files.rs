//! Text I/O for every artifact the commands emit or consume. All files are
//! UTF-8 with `\n` newlines; CSVs open with a `#`-prefixed metadata line
//! recording the config hash and seed, so any output can be traced back to
//! the settings that produced it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sinkhorn_guidance::guidance::{GuidanceTrace, SweepRow};
use sinkhorn_guidance::Tensor;

use crate::error::{CliError, CliResult};

/// Provenance stamped into every output file.
#[derive(Debug, Clone, Copy)]
pub struct Stamp<'a> {
    pub config_hash: &'a str,
    pub seed: u64,
}

impl Stamp<'_> {
    fn comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

/// `chain_id,token_id,x,y` rows, one per sampled point.
pub fn write_samples_csv(path: &Path, samples: &[Tensor], stamp: Stamp) -> CliResult<()> {
    let mut out = stamp.comment();
    out.push_str("chain_id,token_id,x,y\n");
    for (chain, s) in samples.iter().enumerate() {
        for token in 0..s.rows() {
            let x = s.data[2 * token];
            let y = s.data[2 * token + 1];
            writeln!(out, "{chain},{token},{x},{y}").expect("string write");
        }
    }
    Ok(fs::write(path, out)?)
}

/// Parse a samples CSV back into a `[points, 2]` cloud. Errors carry the
/// offending line number.
pub fn read_samples_csv(path: &Path) -> CliResult<Tensor> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("samples {}: {e}", path.display())))?;
    let mut points = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != "chain_id,token_id,x,y" {
                return Err(CliError::Input(format!(
                    "{}:{}: expected header chain_id,token_id,x,y",
                    path.display(),
                    lineno + 1
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(CliError::Input(format!(
                "{}:{}: expected 4 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| {
                CliError::Input(format!(
                    "{}:{}: bad number {s:?}",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        points.push([parse(fields[2])?, parse(fields[3])?]);
    }
    if points.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no sample rows",
            path.display()
        )));
    }
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Ok(Tensor::new(vec![points.len(), 2], data)?)
}

/// `step,loss` curve.
pub fn write_loss_csv(path: &Path, curve: &[f64], stamp: Stamp) -> CliResult<()> {
    let mut out = stamp.comment();
    out.push_str("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("string write");
    }
    Ok(fs::write(path, out)?)
}

/// JSON lines: one metadata object, then one object per (chain, step) record.
pub fn write_trace_jsonl(path: &Path, trace: &GuidanceTrace, stamp: Stamp) -> CliResult<()> {
    let mut out = format!(
        "{}\n",
        serde_json::json!({
            "config_hash": stamp.config_hash,
            "seed": stamp.seed,
            "chains": trace.chains,
            "steps": trace.steps,
        })
    );
    for r in &trace.records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    Ok(fs::write(path, out)?)
}

/// A square matrix of comma-separated reals, `#` lines ignored. Used for the
/// plan command's Q/K inputs and its emitted plan.
pub fn read_matrix_csv(path: &Path) -> CliResult<Tensor> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("matrix {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    CliError::Input(format!(
                        "{}:{}: bad number {s:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<CliResult<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(CliError::Input(format!(
                    "{}:{}: ragged row ({} vs {} columns)",
                    path.display(),
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: empty matrix", path.display())));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(Tensor::new(vec![r, c], rows.into_iter().flatten().collect())?)
}

pub fn write_matrix_csv(path: &Path, m: &Tensor, stamp: Stamp) -> CliResult<()> {
    let mut out = stamp.comment();
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols())
            .map(|j| m.data[i * m.cols() + j].to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(fs::write(path, out)?)
}

/// `scale,energy_distance,mode_coverage,mean_plan_entropy` table.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], stamp: Stamp) -> CliResult<()> {
    let mut out = stamp.comment();
    out.push_str("scale,energy_distance,mode_coverage,mean_plan_entropy\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.scale, r.energy_distance, r.mode_coverage, r.mean_plan_entropy
        )
        .expect("string write");
    }
    Ok(fs::write(path, out)?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    Ok(fs::write(path, json + "\n")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAMP: Stamp = Stamp {
        config_hash: "abc123",
        seed: 9,
    };

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let samples = vec![
            Tensor::new(vec![2, 2], vec![0.5, -1.25, 3.0, 4.0]).unwrap(),
            Tensor::new(vec![2, 2], vec![9.0, 8.0, 7.0, 6.5]).unwrap(),
        ];
        write_samples_csv(&path, &samples, STAMP).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash=abc123 seed=9\nchain_id,token_id,x,y\n"));
        let cloud = read_samples_csv(&path).unwrap();
        assert_eq!(cloud.shape, vec![4, 2]);
        assert_eq!(cloud.data, vec![0.5, -1.25, 3.0, 4.0, 9.0, 8.0, 7.0, 6.5]);
    }

    #[test]
    fn malformed_samples_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "chain_id,token_id,x,y\n0,0,1.0,oops\n").unwrap();
        let err = read_samples_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert_eq!(err.exit_code(), 2);
        std::fs::write(&path, "chain_id,token_id,x,y\n").unwrap();
        assert!(read_samples_csv(&path).is_err());
    }

    #[test]
    fn matrix_round_trip_and_ragged_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = Tensor::new(vec![2, 3], vec![1.0, 2.5, -3.0, 0.0, 1e-9, 7.0]).unwrap();
        write_matrix_csv(&path, &m, STAMP).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(back.shape, m.shape);
        assert_eq!(back.data, m.data);

        std::fs::write(&path, "1,2\n3\n").unwrap();
        let err = read_matrix_csv(&path).unwrap_err();
        assert!(err.to_string().contains("ragged"), "{err}");
    }

    #[test]
    fn trace_lines_are_individually_parseable() {
        use sinkhorn_guidance::guidance::StepRecord;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let trace = GuidanceTrace {
            chains: 1,
            steps: 1,
            records: vec![StepRecord {
                chain: 0,
                step: 0,
                t: 10,
                delta_norm: 0.5,
                mean_row_entropy: Some(1.0),
                sinkhorn_iterations: Some(2.0),
                sinkhorn_residual: Some(1e-4),
                converged: true,
            }],
        };
        write_trace_jsonl(&path, &trace, STAMP).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let meta: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(meta["seed"], 9);
        let rec: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(rec["t"], 10);
    }
}
