//! Rendering of the tabular report artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{Alignment, CategoryReport};
use crate::anchored::{EvalReport, ScoreMatrix};
use crate::error::{Error, Result};
use crate::thematic::FactorId;
use crate::trend::{rank_pairs, Category, CoefficientCell, YearBucket, BUCKET_LABELS};

/// Pairs listed per factor in the trend table.
pub const PAIRS_PER_FACTOR: usize = 3;

/// Act canonical id → short prose description, loaded from a JSON object.
pub type ActDescriptions = BTreeMap<String, String>;

pub fn load_descriptions(path: &Path) -> Result<ActDescriptions> {
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&json).map_err(|e| Error::parse(path.display(), e.line(), e))
}

fn escape_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Markdown grid of the top pairs per factor with one glyph column per
/// bucket. Acts in `excluded` are left out and listed below the table.
pub fn render_trend_table(cells: &[CoefficientCell], excluded: &[String]) -> String {
    let mut out = String::from("| Act | Thematic Factor | Max Coef | Max Coef Yr |");
    for label in BUCKET_LABELS {
        let _ = write!(out, " {label} |");
    }
    out.push_str("\n|---|---|---:|---|");
    out.push_str(&":---:|".repeat(BUCKET_LABELS.len()));
    out.push('\n');

    let excluded_set: BTreeSet<&str> = excluded.iter().map(String::as_str).collect();
    let kept: Vec<CoefficientCell> = cells
        .iter()
        .filter(|c| !excluded_set.contains(c.act.as_str()))
        .cloned()
        .collect();
    let mut grid: BTreeMap<(&str, FactorId, YearBucket), Category> = BTreeMap::new();
    for c in &kept {
        grid.insert((c.act.as_str(), c.factor, c.bucket), c.category);
    }
    let ranked = rank_pairs(&kept);
    for factor in FactorId::all() {
        for pair in ranked.iter().filter(|p| p.factor == factor).take(PAIRS_PER_FACTOR) {
            let _ = write!(
                out,
                "| {} | {} | {:.3} | {} |",
                escape_cell(&pair.act),
                factor.name(),
                pair.max_coef,
                pair.max_coef_bucket
            );
            for bucket in YearBucket::all() {
                let glyph = grid
                    .get(&(pair.act.as_str(), factor, bucket))
                    .map_or("", |c| c.glyph());
                let _ = write!(out, " {glyph} |");
            }
            out.push('\n');
        }
    }
    let shown: Vec<&str> = excluded_set
        .iter()
        .copied()
        .filter(|a| cells.iter().any(|c| c.act == *a))
        .collect();
    if !shown.is_empty() {
        let _ = write!(out, "\nExcluded Acts: {}\n", shown.join("; "));
    }
    out
}

fn format_pair(p: &crate::alignment::TopPair) -> String {
    format!("{} / {} ({:.3})", p.act, p.factor.abbrev(), p.coefficient)
}

/// Markdown table of category aggregates with descriptions of the Acts in
/// each category's top pairs.
pub fn render_category_table(reports: &[CategoryReport], descriptions: &ActDescriptions) -> String {
    let mut out = String::from(
        "| Category | Cases | Avg Score | % High | Top Contributive Pairs | Act Descriptions |\n|---|---:|---:|---:|---|---|\n",
    );
    for r in reports {
        let pairs: Vec<String> = r.top_pairs.iter().map(format_pair).collect();
        let mut seen = BTreeSet::new();
        let descs: Vec<String> = r
            .top_pairs
            .iter()
            .filter(|p| seen.insert(p.act.as_str()))
            .filter_map(|p| descriptions.get(&p.act).map(|d| format!("{}: {d}", p.act)))
            .collect();
        let _ = writeln!(
            out,
            "| {} | {} | {:.3} | {:.1}% | {} | {} |",
            escape_cell(&r.category),
            r.case_count,
            r.avg_score,
            r.pct_high * 100.0,
            escape_cell(&pairs.join("; ")),
            escape_cell(&descs.join(" ")),
        );
    }
    out
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// `case_id,category,bucket,score,excluded`; excluded cases carry the reason
/// and an empty score.
pub fn write_scores(path: &Path, alignment: &Alignment) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["case_id", "category", "bucket", "score", "excluded"])
        .map_err(|e| csv_error(path, e))?;
    for s in &alignment.scores {
        w.write_record([&s.case_id, &s.category, s.bucket.label(), &s.score.to_string(), ""])
            .map_err(|e| csv_error(path, e))?;
    }
    for (case_id, why) in &alignment.excluded {
        let why = serde_json::to_value(why).expect("enum serializes");
        w.write_record([case_id.as_str(), "", "", "", why.as_str().unwrap_or_default()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `category,case_count,avg_score,pct_high,top_pairs` with pairs joined by `; `.
pub fn write_categories(path: &Path, reports: &[CategoryReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["category", "case_count", "avg_score", "pct_high", "top_pairs"])
        .map_err(|e| csv_error(path, e))?;
    for r in reports {
        let pairs: Vec<String> = r.top_pairs.iter().map(format_pair).collect();
        w.write_record([
            r.category.clone(),
            r.case_count.to_string(),
            r.avg_score.to_string(),
            r.pct_high.to_string(),
            pairs.join("; "),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub report: EvalReport,
    pub table_row: String,
    pub scores: ScoreMatrix,
    pub entity_count: usize,
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}
