//! Per-sample error files and the summary table built from them.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fan_core::metrics::{auc, ced_curve, failure_rate, mean_nme, yaw_bin, EvalResult, CED_STEP};
use fan_core::CoreError;

use crate::ReportArgs;

const HEADER: &str = "id,nme,yaw,landmarks_used";

pub fn write_per_sample(results: &[EvalResult]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in results {
        let yaw = r.yaw.map(|y| y.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.id, r.nme, yaw, r.landmarks_used));
    }
    s
}

pub fn parse_per_sample(text: &str) -> Result<Vec<EvalResult>, CoreError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => {
            return Err(CoreError::Parse {
                line: 1,
                msg: format!("expected header '{HEADER}'"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| CoreError::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let nme: f64 = f[1].parse().map_err(|_| bad("nme is not a number"))?;
        let yaw = match f[2] {
            "" => None,
            y => Some(y.parse().map_err(|_| bad("yaw is not a number"))?),
        };
        let landmarks_used = f[3].parse().map_err(|_| bad("landmark count is not an integer"))?;
        out.push(EvalResult {
            id: f[0].to_string(),
            nme,
            yaw,
            landmarks_used,
        });
    }
    if out.is_empty() {
        return Err(CoreError::Data("no samples listed".into()));
    }
    Ok(out)
}

fn bin_auc(results: &[EvalResult], bin: usize, threshold: f64) -> Result<String, CoreError> {
    let rs: Vec<EvalResult> = results
        .iter()
        .filter(|r| r.yaw.is_some_and(|y| yaw_bin(y) == bin))
        .cloned()
        .collect();
    if rs.is_empty() {
        return Ok(String::new());
    }
    Ok(format!("{:.6}", auc(&ced_curve(&rs, CED_STEP)?, threshold)))
}

/// One row per input file: count, mean NME, AUC, failure rate and AUC per
/// yaw bin (blank when a bin is empty).
pub fn summary_table(named: &[(String, Vec<EvalResult>)], threshold: f64) -> Result<String, CoreError> {
    let mut s = String::from("method,count,mean_nme,auc,failure_rate,auc_yaw_0_30,auc_yaw_30_60,auc_yaw_60_90\n");
    for (name, rs) in named {
        let curve = ced_curve(rs, CED_STEP)?;
        s.push_str(&format!(
            "{name},{},{:.6},{:.6},{:.6}",
            rs.len(),
            mean_nme(rs),
            auc(&curve, threshold),
            failure_rate(rs, threshold)?
        ));
        for b in 0..3 {
            s.push(',');
            s.push_str(&bin_auc(rs, b, threshold)?);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn run(a: &ReportArgs) -> Result<()> {
    let mut named = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rs = parse_per_sample(&text).with_context(|| format!("in {}", p.display()))?;
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        named.push((name, rs));
    }
    let table = summary_table(&named, a.auc_threshold)?;
    if let Some(out) = &a.out {
        let out: &Path = out;
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, nme: f64, yaw: Option<f64>) -> EvalResult {
        EvalResult {
            id: id.into(),
            nme,
            yaw,
            landmarks_used: 5,
        }
    }

    #[test]
    fn per_sample_round_trip() {
        let rs = vec![sample("a", 0.0125, Some(-42.5)), sample("b", 0.3, None)];
        assert_eq!(parse_per_sample(&write_per_sample(&rs)).unwrap(), rs);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(parse_per_sample("id,nme\n").is_err());
        assert!(parse_per_sample(&format!("{HEADER}\na,x,,5\n")).is_err());
        assert!(parse_per_sample(&format!("{HEADER}\n")).is_err());
    }

    #[test]
    fn empty_bins_are_blank() {
        let rs = vec![sample("a", 0.0, Some(10.0)), sample("b", 0.2, Some(70.0))];
        let t = summary_table(&[("m".into(), rs)], 0.07).unwrap();
        let row = t.lines().nth(1).unwrap();
        assert_eq!(row, "m,2,0.100000,0.500000,0.500000,1.000000,,0.000000");
    }
}
