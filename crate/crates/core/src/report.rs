//! Run-vs-run comparison tables.
//!
//! The relative gain is computed from F1 values rounded to four decimals,
//! the precision published tables carry, so that a table's ΔF1 column can be
//! recomputed from its own F1 columns.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slotmetrics::{MatchConfig, ScoreReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Regular,
    Reasoning,
    HybridRegular,
    HybridReasoning,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Regular => "regular",
            RunMode::Reasoning => "reasoning",
            RunMode::HybridRegular => "hybrid_regular",
            RunMode::HybridReasoning => "hybrid_reasoning",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(RunMode::Regular),
            "reasoning" => Ok(RunMode::Reasoning),
            "hybrid_regular" => Ok(RunMode::HybridRegular),
            "hybrid_reasoning" => Ok(RunMode::HybridReasoning),
            other => Err(format!("unknown run mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub foundation_label: String,
    pub mode: RunMode,
    pub report: ScoreReport,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("baseline F1 must be positive, got {0}")]
    ZeroBaseline(f64),
    #[error("runs {base} and {new} were scored with different match configs")]
    IncomparableConfigs { base: String, new: String },
    #[error("run id {0:?} appears twice in one comparison")]
    DuplicateRunId(String),
}

pub fn round_to(x: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    let r = (x * scale).round() / scale;
    // No negative zero in rendered tables.
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// `100·(f1_new/f1_base − 1)` in percent, to two decimals.
pub fn relative_gain(f1_new: f64, f1_base: f64) -> Result<f64, ReportError> {
    let base = round_to(f1_base, 4);
    if !(base > 0.0) || !base.is_finite() {
        return Err(ReportError::ZeroBaseline(f1_base));
    }
    let new = round_to(f1_new, 4);
    Ok(round_to(100.0 * (new / base - 1.0), 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&ScoreReport> for Prf {
    fn from(r: &ScoreReport) -> Self {
        Self {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub foundation: String,
    pub base_mode: RunMode,
    pub mode: RunMode,
    pub base_run: String,
    pub new_run: String,
    pub base: Prf,
    pub new: Prf,
    pub delta_f1: f64,
}

pub fn compare_runs(base: &RunRecord, new: &RunRecord) -> Result<ComparisonRow, ReportError> {
    if base.run_id == new.run_id {
        return Err(ReportError::DuplicateRunId(base.run_id.clone()));
    }
    if !same_config(&base.report.match_config, &new.report.match_config) {
        return Err(ReportError::IncomparableConfigs {
            base: base.run_id.clone(),
            new: new.run_id.clone(),
        });
    }
    Ok(ComparisonRow {
        foundation: new.foundation_label.clone(),
        base_mode: base.mode,
        mode: new.mode,
        base_run: base.run_id.clone(),
        new_run: new.run_id.clone(),
        base: Prf::from(&base.report),
        new: Prf::from(&new.report),
        delta_f1: relative_gain(new.report.f1, base.report.f1)?,
    })
}

fn same_config(a: &MatchConfig, b: &MatchConfig) -> bool {
    a == b
}

/// Compares each `(base, new)` pair, rejecting run ids reused across pairs
/// in the same role.
pub fn compare_pairs(pairs: &[(RunRecord, RunRecord)]) -> Result<Vec<ComparisonRow>, ReportError> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::with_capacity(pairs.len());
    for (base, new) in pairs {
        if !seen.insert(("new", new.run_id.as_str())) {
            return Err(ReportError::DuplicateRunId(new.run_id.clone()));
        }
        rows.push(compare_runs(base, new)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    #[default]
    Markdown,
    Csv,
    Json,
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(format!("unknown table format {other:?}")),
        }
    }
}

const CSV_HEADER: [&str; 9] = [
    "foundation",
    "mode",
    "base_precision",
    "base_recall",
    "base_f1",
    "new_precision",
    "new_recall",
    "new_f1",
    "delta_f1",
];

fn f4(x: f64) -> String {
    format!("{:.4}", round_to(x, 4))
}

/// P/R/F1 at four decimals, ΔF1 at two. Markdown shows the gain signed.
pub fn render_table(rows: &[ComparisonRow], format: TableFormat) -> String {
    match format {
        TableFormat::Markdown => {
            let mut out = String::from(
                "| Foundation | Mode | Base P | Base R | Base F1 | P | R | F1 | ΔF1 (%) |\n\
                 |---|---|---:|---:|---:|---:|---:|---:|---:|\n",
            );
            for r in rows {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {:+.2} |\n",
                    r.foundation.replace('|', "\\|"),
                    r.mode,
                    f4(r.base.precision),
                    f4(r.base.recall),
                    f4(r.base.f1),
                    f4(r.new.precision),
                    f4(r.new.recall),
                    f4(r.new.f1),
                    round_to(r.delta_f1, 2),
                ));
            }
            out
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory write");
            for r in rows {
                w.write_record([
                    r.foundation.clone(),
                    r.mode.to_string(),
                    f4(r.base.precision),
                    f4(r.base.recall),
                    f4(r.base.f1),
                    f4(r.new.precision),
                    f4(r.new.recall),
                    f4(r.new.f1),
                    format!("{:.2}", round_to(r.delta_f1, 2)),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
        }
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
            s.push('\n');
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(id: &str, mode: RunMode, p: f64, r: f64, f1: f64) -> RunRecord {
        RunRecord {
            run_id: id.into(),
            foundation_label: "Qwen3 4B".into(),
            mode,
            report: ScoreReport::from_prf(p, r, f1, MatchConfig::default()),
        }
    }

    #[test]
    fn gains() {
        assert_eq!(relative_gain(0.7610, 0.7312).unwrap(), 4.08);
        assert_eq!(relative_gain(0.6936, 0.5652).unwrap(), 22.72);
        assert_eq!(relative_gain(0.6338, 0.7550).unwrap(), -16.05);
        assert_eq!(relative_gain(0.5, 0.5).unwrap(), 0.0);
        assert!(matches!(relative_gain(0.5, 0.0), Err(ReportError::ZeroBaseline(_))));
        assert!(relative_gain(0.5, 0.00001).is_err());
    }

    #[test]
    fn hybrid_reasoning_row() {
        let base = run("r", RunMode::Reasoning, 0.4979, 0.8717, 0.6338);
        let new = run("h", RunMode::HybridReasoning, 0.6958, 0.9377, 0.7988);
        assert_eq!(compare_runs(&base, &new).unwrap().delta_f1, 26.03);
    }

    #[test]
    fn identical_runs_have_zero_gain() {
        let a = run("a", RunMode::Regular, 0.6, 0.7, 0.6462);
        let b = RunRecord {
            run_id: "b".into(),
            ..a.clone()
        };
        assert_eq!(compare_runs(&a, &b).unwrap().delta_f1, 0.0);
        assert!(matches!(compare_runs(&a, &a), Err(ReportError::DuplicateRunId(_))));
    }

    #[test]
    fn config_guard() {
        let a = run("a", RunMode::Regular, 0.6, 0.7, 0.6462);
        let mut b = run("b", RunMode::Reasoning, 0.6, 0.7, 0.6462);
        b.report.match_config = MatchConfig::exact();
        assert!(matches!(
            compare_runs(&a, &b),
            Err(ReportError::IncomparableConfigs { .. })
        ));
    }

    #[test]
    fn tables() {
        let row = compare_runs(
            &run("b", RunMode::Regular, 0.6292, 0.8726, 0.7312),
            &RunRecord {
                foundation_label: "Llama 3.1 8B Instruct".into(),
                ..run("n", RunMode::Reasoning, 0.6431, 0.9319, 0.7610)
            },
        )
        .unwrap();
        let csv = render_table(std::slice::from_ref(&row), TableFormat::Csv);
        assert!(csv.trim_end().ends_with(",0.7312,0.6431,0.9319,0.7610,4.08"), "{csv}");
        let md = render_table(std::slice::from_ref(&row), TableFormat::Markdown);
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains("| +4.08 |"));
        assert_eq!(render_table(&[], TableFormat::Markdown).lines().count(), 2);
        assert_eq!(render_table(&[], TableFormat::Csv).lines().count(), 1);
        let json: Vec<ComparisonRow> =
            serde_json::from_str(&render_table(&[row.clone()], TableFormat::Json)).unwrap();
        assert_eq!(json, vec![row]);
    }

    #[test]
    fn negative_gain_keeps_its_sign() {
        let row = compare_runs(
            &run("b", RunMode::Regular, 0.6308, 0.94, 0.7550),
            &run("n", RunMode::Reasoning, 0.4979, 0.8717, 0.6338),
        )
        .unwrap();
        assert!(render_table(&[row.clone()], TableFormat::Markdown).contains("| -16.05 |"));
        assert!(render_table(&[row], TableFormat::Csv).trim_end().ends_with(",-16.05"));
    }
}
