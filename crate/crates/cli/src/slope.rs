use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tsde::evaluation::{loglog_slope, SlopeFit};

use crate::error::CliError;

/// A regret series read back from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: Option<String>,
    pub times: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFit {
    pub label: Option<String>,
    /// Fails when the window holds a non-positive value or too few points.
    pub fit: Result<SlopeFit, String>,
    pub loglog: PathBuf,
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers.iter().position(|h| names.contains(&h.trim()))
}

/// Reads `time` and `regret_mean` (or `regret`) columns, split by the
/// optional `mapping` column.
pub fn read_series(path: &Path) -> Result<Vec<Series>, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let t_col = column(&headers, &["time", "t"])
        .ok_or_else(|| CliError::Csv("missing a time column".into()))?;
    let v_col = column(&headers, &["regret_mean", "regret"])
        .ok_or_else(|| CliError::Csv("missing a regret_mean column".into()))?;
    let m_col = column(&headers, &["mapping"]);
    let mut by_label: BTreeMap<Option<String>, Series> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |what: &str| CliError::Csv(format!("line {line}: bad {what}"));
        let t: usize = rec
            .get(t_col)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("time"))?;
        let v: f64 = rec
            .get(v_col)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("regret"))?;
        let label = m_col.and_then(|c| rec.get(c)).map(str::to_string);
        let s = by_label.entry(label.clone()).or_insert_with(|| Series {
            label,
            times: Vec::new(),
            values: Vec::new(),
        });
        s.times.push(t);
        s.values.push(v);
    }
    Ok(by_label.into_values().collect())
}

fn loglog_path(path: &Path, label: Option<&str>) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match label {
        Some(l) => format!("{stem}_loglog_{l}.csv"),
        None => format!("{stem}_loglog.csv"),
    };
    path.with_file_name(name)
}

/// Fits every series over `[from, to]` and writes a two-column
/// `log_t,log_regret` file per series next to the input.
pub fn fit_file(
    path: &Path,
    from: Option<usize>,
    to: Option<usize>,
) -> Result<Vec<SeriesFit>, CliError> {
    let series = read_series(path)?;
    if series.is_empty() {
        return Err(CliError::Csv("no data rows".into()));
    }
    let mut out = Vec::new();
    for s in series {
        let t_max = s.times.iter().copied().max().unwrap_or(0);
        let hi = to.unwrap_or(t_max);
        let lo = from.unwrap_or(t_max / 4);
        let fit = loglog_slope(&s.times, &s.values, lo, hi).map_err(|e| e.to_string());
        let loglog = loglog_path(path, s.label.as_deref());
        let mut w = csv::Writer::from_path(&loglog)?;
        w.write_record(["log_t", "log_regret"])?;
        for (t, v) in s.times.iter().zip(&s.values) {
            if *t >= lo && *t <= hi && *t > 0 && *v > 0.0 {
                w.write_record([(*t as f64).ln().to_string(), v.ln().to_string()])?;
            }
        }
        w.flush()?;
        out.push(SeriesFit {
            label: s.label,
            fit,
            loglog,
        });
    }
    Ok(out)
}
