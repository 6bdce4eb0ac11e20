//! Aggregation arithmetic for benchmark score tables: LScore and the two
//! Overall variants, plus a CSV report pass.

use std::io::BufRead;
use std::path::Path;

use crate::{Error, Result};

/// One benchmark row: semantic-consistency and perceptual-quality scores,
/// global and local (edited-region) variants, each on [0, 10].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub model_name: String,
    pub sc: f64,
    pub pq: f64,
    pub lsc: f64,
    pub lpq: f64,
}

impl ScoreRecord {
    pub fn new(model_name: impl Into<String>, sc: f64, pq: f64, lsc: f64, lpq: f64) -> Result<Self> {
        let rec = ScoreRecord {
            model_name: model_name.into(),
            sc,
            pq,
            lsc,
            lpq,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn validate(&self) -> Result<()> {
        for (label, v) in [
            ("sc", self.sc),
            ("pq", self.pq),
            ("lsc", self.lsc),
            ("lpq", self.lpq),
        ] {
            if !(0.0..=10.0).contains(&v) {
                return Err(Error::contract(format!(
                    "score {label}={v} for model '{}' outside [0, 10]",
                    self.model_name
                )));
            }
        }
        Ok(())
    }
}

fn check_range(label: &str, v: f64) -> Result<()> {
    if !(0.0..=10.0).contains(&v) {
        return Err(Error::contract(format!("score {label}={v} outside [0, 10]")));
    }
    Ok(())
}

/// Geometric mean of the two local scores.
pub fn lscore(lsc: f64, lpq: f64) -> Result<f64> {
    check_range("lsc", lsc)?;
    check_range("lpq", lpq)?;
    Ok((lsc * lpq).sqrt())
}

/// Geometric mean of all four scores.
pub fn overall_geo4(r: &ScoreRecord) -> Result<f64> {
    r.validate()?;
    Ok((r.sc * r.pq * r.lsc * r.lpq).powf(0.25))
}

/// Geometric mean of the two consistency/quality arithmetic means. This is
/// the variant that matches the published Overall column and is the default
/// ranking key.
pub fn overall_mixed(r: &ScoreRecord) -> Result<f64> {
    r.validate()?;
    Ok((((r.sc + r.lsc) / 2.0) * ((r.pq + r.lpq) / 2.0)).sqrt())
}

/// Half-even rounding at 3 decimals, used everywhere a table value is printed.
pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round_ties_even() / 1000.0
}

/// One output row of [`aggregate_file`], values rounded to 3 decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model_name: String,
    pub lscore: f64,
    pub overall_geo4: f64,
    pub overall_mixed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Rows in input order.
    pub rows: Vec<ReportRow>,
    /// Model names sorted by descending overall_mixed; ties broken by name
    /// so the ranking is invariant under input row reordering.
    pub ranking: Vec<String>,
}

pub fn aggregate_records(records: &[ScoreRecord]) -> Result<Report> {
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        rows.push(ReportRow {
            model_name: r.model_name.clone(),
            lscore: round3(lscore(r.lsc, r.lpq)?),
            overall_geo4: round3(overall_geo4(r)?),
            overall_mixed: round3(overall_mixed(r)?),
        });
    }
    let mut ranking: Vec<&ReportRow> = rows.iter().collect();
    ranking.sort_by(|a, b| {
        b.overall_mixed
            .partial_cmp(&a.overall_mixed)
            .unwrap()
            .then_with(|| a.model_name.cmp(&b.model_name))
    });
    let ranking = ranking.iter().map(|r| r.model_name.clone()).collect();
    Ok(Report { rows, ranking })
}

/// Parse a `model,sc,pq,lsc,lpq` CSV file.
pub fn parse_score_file(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if lineno == 1 {
            if line.trim() != "model,sc,pq,lsc,lpq" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header 'model,sc,pq,lsc,lpq', got '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let mut vals = [0.0f64; 4];
        for (k, raw) in parts[1..].iter().enumerate() {
            vals[k] = raw.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad score value '{}'", raw.trim()),
            })?;
        }
        let rec = ScoreRecord::new(parts[0].trim(), vals[0], vals[1], vals[2], vals[3])
            .map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn aggregate_file(path: &Path) -> Result<Report> {
    aggregate_records(&parse_score_file(path)?)
}

/// Render the report both as an aligned text table (for the terminal) and a
/// machine CSV (`model,lscore,overall_geo4,overall_mixed`).
pub fn report_text(report: &Report) -> String {
    let mut width = "model".len();
    for row in &report.rows {
        width = width.max(row.model_name.len());
    }
    let mut out = format!(
        "{:<width$}  {:>8}  {:>12}  {:>13}\n",
        "model", "lscore", "overall_geo4", "overall_mixed"
    );
    for row in &report.rows {
        out.push_str(&format!(
            "{:<width$}  {:>8.3}  {:>12.3}  {:>13.3}\n",
            row.model_name, row.lscore, row.overall_geo4, row.overall_mixed
        ));
    }
    out.push_str(&format!("ranking: {}\n", report.ranking.join(" > ")));
    out
}

pub fn report_csv(report: &Report) -> String {
    let mut out = String::from("model,lscore,overall_geo4,overall_mixed\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3}\n",
            row.model_name, row.lscore, row.overall_geo4, row.overall_mixed
        ));
    }
    out
}
