//! Per-case alignment scores against the fitted coefficient surface and
//! their aggregation by case category.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::thematic::{CaseProfile, FactorId, FACTOR_COUNT};
use crate::trend::{Category, CoefficientCell, YearBucket};

pub const UNCATEGORIZED: &str = "Uncategorized";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentOptions {
    /// Use standardized instead of raw coefficients.
    pub standardized: bool,
    /// Replace negative coefficients by zero.
    pub clamp_negative: bool,
    /// Score at or above which a case counts as highly aligned.
    pub high_score: f64,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        Self {
            standardized: false,
            clamp_negative: false,
            high_score: 1.0,
        }
    }
}

/// Coefficient lookup keyed by (act, bucket), holding all six factor slopes.
/// Only acts with a complete set of fitted cells are present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoefficientSurface {
    rows: HashMap<(String, YearBucket), [f64; FACTOR_COUNT]>,
}

impl CoefficientSurface {
    pub fn from_cells(cells: &[CoefficientCell], opts: &AlignmentOptions) -> Self {
        let mut partial: HashMap<(String, YearBucket), [Option<f64>; FACTOR_COUNT]> = HashMap::new();
        for c in cells.iter().filter(|c| c.category != Category::Absent) {
            let value = if opts.standardized { c.standardized } else { c.raw };
            if let Some(v) = value {
                let v = if opts.clamp_negative { v.max(0.0) } else { v };
                partial.entry((c.act.clone(), c.bucket)).or_default()[c.factor.index()] = Some(v);
            }
        }
        let rows = partial
            .into_iter()
            .filter_map(|(k, row)| {
                if row.iter().all(Option::is_some) {
                    Some((k, row.map(|v| v.expect("checked"))))
                } else {
                    log::warn!("incomplete coefficient row for {} in {}; skipped", k.0, k.1);
                    None
                }
            })
            .collect();
        Self { rows }
    }

    pub fn insert(&mut self, act: &str, bucket: YearBucket, coefs: [f64; FACTOR_COUNT]) {
        self.rows.insert((act.to_string(), bucket), coefs);
    }

    pub fn get(&self, act: &str, bucket: YearBucket) -> Option<&[f64; FACTOR_COUNT]> {
        self.rows.get(&(act.to_string(), bucket))
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub case_id: String,
    pub category: String,
    pub score: f64,
    pub bucket: YearBucket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exclusion {
    NoFittedActs,
    ZeroDenominator,
    DuplicateAct,
}

/// Ratio of the proportion-weighted coefficient sum to the sum expected
/// under evenly spread proportions, over the case's fitted Acts in its
/// filing bucket.
///
/// Evaluated as `1 + n·Σ_j (p_j − 1/n)·T_j / Σ_j T_j` with `T_j` the
/// per-factor coefficient total, which equals the plain ratio but is exactly
/// 1 for evenly spread proportions.
pub fn alignment_score(
    profile: &CaseProfile,
    surface: &CoefficientSurface,
) -> Result<AlignmentScore, Exclusion> {
    let unique: BTreeSet<&str> = profile.acts.iter().map(String::as_str).collect();
    if unique.len() != profile.acts.len() {
        return Err(Exclusion::DuplicateAct);
    }
    let bucket = YearBucket::for_year(profile.year);
    let mut totals = [0.0; FACTOR_COUNT];
    let mut fitted = 0;
    for act in &profile.acts {
        if let Some(row) = surface.get(act, bucket) {
            fitted += 1;
            for (t, c) in totals.iter_mut().zip(row) {
                *t += c;
            }
        }
    }
    if fitted == 0 {
        return Err(Exclusion::NoFittedActs);
    }
    let denominator: f64 = totals.iter().sum();
    if denominator == 0.0 || !denominator.is_finite() {
        return Err(Exclusion::ZeroDenominator);
    }
    let n = FACTOR_COUNT as f64;
    let uniform = 1.0 / n;
    let excess: f64 = profile.p.iter().zip(&totals).map(|(p, t)| (p - uniform) * t).sum();
    Ok(AlignmentScore {
        case_id: profile.case_id.clone(),
        category: profile.category.clone().unwrap_or_else(|| UNCATEGORIZED.to_string()),
        score: 1.0 + n * excess / denominator,
        bucket,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Alignment {
    pub scores: Vec<AlignmentScore>,
    pub excluded: Vec<(String, Exclusion)>,
}

pub fn align_cases(profiles: &[CaseProfile], surface: &CoefficientSurface) -> Alignment {
    let results: Vec<_> = profiles
        .par_iter()
        .map(|p| (p.case_id.clone(), alignment_score(p, surface)))
        .collect();
    let mut out = Alignment::default();
    for (case_id, r) in results {
        match r {
            Ok(s) => out.scores.push(s),
            Err(e) => {
                log::debug!("case {case_id} excluded from alignment: {e:?}");
                out.excluded.push((case_id, e));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPair {
    pub act: String,
    pub factor: FactorId,
    pub coefficient: f64,
    pub bucket: YearBucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub case_count: usize,
    pub avg_score: f64,
    pub pct_high: f64,
    pub top_pairs: Vec<TopPair>,
}

pub const TOP_PAIRS: usize = 3;

/// Aggregates scores per category. Top pairs are the (act, factor) pairs
/// with the largest coefficients among the cells for the category's scored
/// cases' (act, bucket) combinations. Categories are ordered by case count,
/// then name.
pub fn category_report(
    scores: &[AlignmentScore],
    profiles: &[CaseProfile],
    surface: &CoefficientSurface,
    opts: &AlignmentOptions,
) -> Vec<CategoryReport> {
    let acts_by_case: HashMap<&str, &[String]> =
        profiles.iter().map(|p| (p.case_id.as_str(), p.acts.as_slice())).collect();
    let mut groups: BTreeMap<&str, Vec<&AlignmentScore>> = BTreeMap::new();
    for s in scores {
        groups.entry(s.category.as_str()).or_default().push(s);
    }
    let mut reports: Vec<CategoryReport> = groups
        .into_iter()
        .map(|(category, members)| {
            let n = members.len() as f64;
            let avg_score = members.iter().map(|s| s.score).sum::<f64>() / n;
            let high = members.iter().filter(|s| s.score >= opts.high_score).count();

            let mut best: BTreeMap<(&str, FactorId), (f64, YearBucket)> = BTreeMap::new();
            for s in &members {
                for act in acts_by_case.get(s.case_id.as_str()).copied().unwrap_or_default() {
                    let Some(row) = surface.get(act, s.bucket) else {
                        continue;
                    };
                    for f in FactorId::all() {
                        let c = row[f.index()];
                        let slot = best.entry((act.as_str(), f)).or_insert((c, s.bucket));
                        if c > slot.0 || (c == slot.0 && s.bucket < slot.1) {
                            *slot = (c, s.bucket);
                        }
                    }
                }
            }
            let mut pairs: Vec<TopPair> = best
                .into_iter()
                .map(|((act, factor), (coefficient, bucket))| TopPair {
                    act: act.to_string(),
                    factor,
                    coefficient,
                    bucket,
                })
                .collect();
            pairs.sort_by(|a, b| {
                b.coefficient
                    .total_cmp(&a.coefficient)
                    .then_with(|| a.act.cmp(&b.act))
                    .then(a.factor.cmp(&b.factor))
            });
            pairs.truncate(TOP_PAIRS);
            CategoryReport {
                category: category.to_string(),
                case_count: members.len(),
                avg_score,
                pct_high: high as f64 / n,
                top_pairs: pairs,
            }
        })
        .collect();
    reports.sort_by(|a, b| b.case_count.cmp(&a.case_count).then_with(|| a.category.cmp(&b.category)));
    reports
}
