//! Per-(Act, year bucket) logistic regressions of Act presence on factor
//! proportions, per-bucket coefficient standardization, categorization and
//! pair ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thematic::{CaseProfile, FactorId, FACTOR_COUNT};

pub const BUCKET_COUNT: usize = 8;
pub const BUCKET_LABELS: [&str; BUCKET_COUNT] =
    ["2012-2016", "2017", "2018", "2019", "2020", "2021", "2022", "2023+"];

/// One of the eight reporting periods. Years before 2017 fall in the first
/// bucket and years after 2022 in the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct YearBucket(u8);

impl YearBucket {
    pub fn all() -> impl Iterator<Item = YearBucket> {
        (0..BUCKET_COUNT as u8).map(YearBucket)
    }

    pub fn for_year(year: i32) -> Self {
        Self((year.clamp(2016, 2023) - 2016) as u8)
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn label(self) -> &'static str {
        BUCKET_LABELS[self.index()]
    }

    pub fn contains(self, year: i32) -> bool {
        Self::for_year(year) == self
    }

    pub fn parse(label: &str) -> Option<Self> {
        BUCKET_LABELS
            .iter()
            .position(|l| *l == label.trim())
            .map(|i| Self(i as u8))
    }
}

impl fmt::Display for YearBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl TryFrom<String> for YearBucket {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        Self::parse(&s).ok_or_else(|| format!("unknown year bucket `{s}`"))
    }
}

impl From<YearBucket> for String {
    fn from(b: YearBucket) -> String {
        b.label().to_string()
    }
}

/// Response vector and covariate rows for one (Act, bucket) regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub case_ids: Vec<String>,
    pub x: Vec<[f64; FACTOR_COUNT]>,
    pub y: Vec<f64>,
}

impl Design {
    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.x.len(), FACTOR_COUNT, |r, c| self.x[r][c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    TooFewObservations(usize),
    ConstantResponse,
}

pub const MIN_OBSERVATIONS: usize = 3;

pub fn assemble_design(
    profiles: &[CaseProfile],
    act: &str,
    bucket: YearBucket,
) -> std::result::Result<Design, Degenerate> {
    let mut design = Design {
        case_ids: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
    };
    for p in profiles.iter().filter(|p| bucket.contains(p.year)) {
        design.case_ids.push(p.case_id.clone());
        design.x.push(p.p);
        design.y.push(if p.acts.iter().any(|a| a == act) { 1.0 } else { 0.0 });
    }
    let n = design.y.len();
    if n < MIN_OBSERVATIONS {
        return Err(Degenerate::TooFewObservations(n));
    }
    let ones = design.positives();
    if ones == 0 || ones == n {
        return Err(Degenerate::ConstantResponse);
    }
    Ok(design)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogitOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial ridge penalty, applied to the intercept and the slopes.
    pub ridge: f64,
    pub ridge_cap: f64,
    /// Coefficients beyond this magnitude are treated as divergence.
    pub max_abs_coef: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            ridge: 1e-6,
            ridge_cap: 1.0,
            max_abs_coef: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit {
    pub beta0: f64,
    pub betas: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: usize,
    pub ridge: f64,
    /// Largest gradient component of the penalized likelihood at the returned coefficients.
    pub grad_max: f64,
    /// Penalized log-likelihood at the start and after every accepted step.
    pub ll_trace: Vec<f64>,
}

fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Ridge-penalized Bernoulli log-likelihood with a logit link. `beta[0]` is
/// the intercept. Every coefficient is penalized: proportion rows sum to one,
/// so the intercept is collinear with the slopes and an unpenalized intercept
/// would force the slopes to sum to zero.
pub fn penalized_log_likelihood(x: &DMatrix<f64>, y: &[f64], beta: &[f64], ridge: f64) -> f64 {
    let mut ll = 0.0;
    for (r, &yr) in y.iter().enumerate() {
        let eta = beta[0] + (0..x.ncols()).map(|c| x[(r, c)] * beta[c + 1]).sum::<f64>();
        ll += yr * eta - softplus(eta);
    }
    ll - 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Gradient of [`penalized_log_likelihood`].
pub fn penalized_gradient(x: &DMatrix<f64>, y: &[f64], beta: &[f64], ridge: f64) -> Vec<f64> {
    let mut g = vec![0.0; beta.len()];
    for (r, &yr) in y.iter().enumerate() {
        let eta = beta[0] + (0..x.ncols()).map(|c| x[(r, c)] * beta[c + 1]).sum::<f64>();
        let resid = yr - sigmoid(eta);
        g[0] += resid;
        for c in 0..x.ncols() {
            g[c + 1] += x[(r, c)] * resid;
        }
    }
    for (gj, bj) in g.iter_mut().zip(beta) {
        *gj -= ridge * bj;
    }
    g
}

/// Rounding allowance when comparing penalized log-likelihoods near `ll`.
/// Steps are accepted when they lose no more than this, so a likelihood
/// trace is non-decreasing up to this slack.
pub fn ll_tolerance(ll: f64) -> f64 {
    8.0 * f64::EPSILON * ll.abs().max(1.0)
}

/// True when every step of `trace` is non-decreasing within [`ll_tolerance`].
pub fn is_monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - ll_tolerance(w[0]))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

enum Attempt {
    Done(LogitFit),
    Diverged(&'static str),
}

fn irls(x: &DMatrix<f64>, y: &[f64], opts: &LogitOptions, ridge: f64) -> Attempt {
    let (n, p) = (x.nrows(), x.ncols());
    let xa = DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] });
    let mut beta = vec![0.0; p + 1];
    let mut ll = penalized_log_likelihood(x, y, &beta, ridge);
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut grad = penalized_gradient(x, y, &beta, ridge);

    while max_abs(&grad) > opts.tol && iterations < opts.max_iter {
        let b = DVector::from_column_slice(&beta);
        let eta = &xa * &b;
        let w = DVector::from_iterator(n, eta.iter().map(|&e| {
            let m = sigmoid(e);
            m * (1.0 - m)
        }));
        let mut h = xa.transpose() * DMatrix::from_diagonal(&w) * &xa;
        for j in 0..=p {
            h[(j, j)] += ridge;
        }
        let g = DVector::from_column_slice(&grad);
        let step = match h.clone().cholesky() {
            Some(chol) => chol.solve(&g),
            None => match h.lu().solve(&g) {
                Some(s) => s,
                None => return Attempt::Diverged("singular information matrix"),
            },
        };
        if step.iter().any(|v| !v.is_finite()) {
            return Attempt::Diverged("non-finite Newton step");
        }

        let slack = ll_tolerance(ll);
        let mut t = 1.0;
        let accepted = loop {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cand_ll = penalized_log_likelihood(x, y, &cand, ridge);
            if cand_ll.is_finite() && cand_ll >= ll - slack {
                break Some((cand, cand_ll));
            }
            t *= 0.5;
            if t < 1e-12 {
                break None;
            }
        };
        let Some((cand, cand_ll)) = accepted else {
            break;
        };
        if max_abs(&cand) > opts.max_abs_coef {
            return Attempt::Diverged("coefficients exceed bound");
        }
        ll = cand_ll;
        beta = cand;
        trace.push(ll);
        iterations += 1;
        grad = penalized_gradient(x, y, &beta, ridge);
    }

    let grad_max = max_abs(&grad);
    Attempt::Done(LogitFit {
        beta0: beta[0],
        betas: beta[1..].to_vec(),
        converged: grad_max <= opts.tol,
        iterations,
        n_obs: n,
        ridge,
        grad_max,
        ll_trace: trace,
    })
}

/// Maximizes the ridge-penalized logistic likelihood by iteratively
/// reweighted least squares with step halving. `x` holds covariates only;
/// the intercept column is implicit. On divergence the ridge is multiplied
/// by ten and the fit restarts, up to `ridge_cap`.
pub fn fit_logit(x: &DMatrix<f64>, y: &[f64], opts: &LogitOptions) -> Result<LogitFit> {
    if x.nrows() != y.len() {
        return Err(Error::Data(format!("design has {} rows but {} responses", x.nrows(), y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in design matrix".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("response must be 0 or 1".into()));
    }
    if !(opts.ridge >= 0.0 && opts.ridge_cap >= opts.ridge && opts.tol > 0.0) {
        return Err(Error::Config("invalid logit options".into()));
    }
    let mut ridge = opts.ridge;
    loop {
        match irls(x, y, opts, ridge) {
            Attempt::Done(fit) => {
                if !fit.converged {
                    log::warn!(
                        "logit fit stopped after {} iterations with gradient {:.3e}",
                        fit.iterations,
                        fit.grad_max
                    );
                }
                return Ok(fit);
            }
            Attempt::Diverged(why) => {
                let next = if ridge == 0.0 { 1e-8 } else { ridge * 10.0 };
                if next > opts.ridge_cap {
                    log::warn!("logit fit diverged ({why}) at ridge cap {ridge}; returning capped fit");
                    let capped = LogitOptions {
                        max_abs_coef: f64::INFINITY,
                        ..*opts
                    };
                    return match irls(x, y, &capped, ridge) {
                        Attempt::Done(fit) => Ok(fit),
                        Attempt::Diverged(why) => Err(Error::Data(format!("logit fit failed: {why}"))),
                    };
                }
                log::debug!("logit fit diverged ({why}); ridge {ridge} -> {next}");
                ridge = next;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub act: String,
    pub bucket: YearBucket,
    pub beta0: f64,
    pub betas: [f64; FACTOR_COUNT],
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: usize,
    pub ridge: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    High,
    Moderate,
    Low,
    ExcludedNegative,
    Absent,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::High => "high",
            Category::Moderate => "moderate",
            Category::Low => "low",
            Category::ExcludedNegative => "excluded-negative",
            Category::Absent => "absent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::High, Self::Moderate, Self::Low, Self::ExcludedNegative, Self::Absent]
            .into_iter()
            .find(|c| c.as_str() == s)
    }

    /// Report glyph; negative and absent cells render blank.
    pub fn glyph(self) -> &'static str {
        match self {
            Category::High => "\u{2022}",
            Category::Moderate => "\u{25e6}",
            Category::Low => "\u{00b7}",
            Category::ExcludedNegative | Category::Absent => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub high: f64,
    pub moderate: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            high: 1.0,
            moderate: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.high >= self.moderate && self.moderate >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "thresholds must satisfy high >= moderate >= 0 (got {} / {})",
                self.high, self.moderate
            )))
        }
    }

    pub fn categorize(&self, standardized: f64) -> Category {
        if standardized >= self.high {
            Category::High
        } else if standardized > self.moderate {
            Category::Moderate
        } else if standardized >= 0.0 {
            Category::Low
        } else {
            Category::ExcludedNegative
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientCell {
    pub act: String,
    pub factor: FactorId,
    pub bucket: YearBucket,
    pub raw: Option<f64>,
    pub standardized: Option<f64>,
    pub category: Category,
}

impl CoefficientCell {
    pub fn absent(act: &str, factor: FactorId, bucket: YearBucket) -> Self {
        Self {
            act: act.to_string(),
            factor,
            bucket,
            raw: None,
            standardized: None,
            category: Category::Absent,
        }
    }
}

/// Z-scores every slope in one bucket against the pooled mean and population
/// standard deviation of all slopes in that bucket.
pub fn standardize_coefficients(fits: &[GlmFit], thresholds: &Thresholds) -> Vec<CoefficientCell> {
    let slopes: Vec<f64> = fits.iter().flat_map(|f| f.betas).collect();
    if slopes.is_empty() {
        return Vec::new();
    }
    let n = slopes.len() as f64;
    let mean = slopes.iter().sum::<f64>() / n;
    let std = (slopes.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / n).sqrt();
    // Identical slopes can leave a rounding-level spread behind.
    let scale = slopes.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    let std = if std <= 16.0 * f64::EPSILON * scale { 0.0 } else { std };
    if std == 0.0 {
        log::warn!("zero spread among {} slopes; all cells categorized low", slopes.len());
    }
    fits.iter()
        .flat_map(|fit| {
            FactorId::all().map(move |f| {
                let raw = fit.betas[f.index()];
                let (z, category) = if std > 0.0 {
                    let z = (raw - mean) / std;
                    (z, thresholds.categorize(z))
                } else {
                    (0.0, Category::Low)
                };
                CoefficientCell {
                    act: fit.act.clone(),
                    factor: f,
                    bucket: fit.bucket,
                    raw: Some(raw),
                    standardized: Some(z),
                    category,
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrendOptions {
    pub logit: LogitOptions,
    pub min_positives: usize,
    pub thresholds: Thresholds,
}

impl Default for TrendOptions {
    fn default() -> Self {
        Self {
            logit: LogitOptions::default(),
            min_positives: 2,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrendSurface {
    pub fits: Vec<GlmFit>,
    /// One cell per (act, factor, bucket), sorted in that order.
    pub cells: Vec<CoefficientCell>,
}

/// Fits every (Act, bucket) pair in parallel, then standardizes per bucket.
/// Pairs with a degenerate design or too few positive cases are absent.
pub fn fit_trends(profiles: &[CaseProfile], opts: &TrendOptions) -> Result<TrendSurface> {
    opts.thresholds.validate()?;
    let acts: BTreeSet<&str> = profiles.iter().flat_map(|p| p.acts.iter().map(String::as_str)).collect();
    let jobs: Vec<(&str, YearBucket)> = acts
        .iter()
        .flat_map(|&a| YearBucket::all().map(move |b| (a, b)))
        .collect();
    let fits: Vec<Option<GlmFit>> = jobs
        .par_iter()
        .map(|&(act, bucket)| {
            let design = match assemble_design(profiles, act, bucket) {
                Ok(d) => d,
                Err(_) => return Ok(None),
            };
            if design.positives() < opts.min_positives {
                return Ok(None);
            }
            let fit = fit_logit(&design.matrix(), &design.y, &opts.logit)?;
            Ok(Some(GlmFit {
                act: act.to_string(),
                bucket,
                beta0: fit.beta0,
                betas: std::array::from_fn(|j| fit.betas[j]),
                converged: fit.converged,
                iterations: fit.iterations,
                n_obs: fit.n_obs,
                ridge: fit.ridge,
            }))
        })
        .collect::<Result<_>>()?;
    let fits: Vec<GlmFit> = fits.into_iter().flatten().collect();

    let mut by_key: BTreeMap<(String, FactorId, YearBucket), CoefficientCell> = BTreeMap::new();
    for bucket in YearBucket::all() {
        let in_bucket: Vec<GlmFit> = fits.iter().filter(|f| f.bucket == bucket).cloned().collect();
        for cell in standardize_coefficients(&in_bucket, &opts.thresholds) {
            by_key.insert((cell.act.clone(), cell.factor, cell.bucket), cell);
        }
    }
    for &act in &acts {
        for f in FactorId::all() {
            for b in YearBucket::all() {
                by_key
                    .entry((act.to_string(), f, b))
                    .or_insert_with(|| CoefficientCell::absent(act, f, b));
            }
        }
    }
    Ok(TrendSurface {
        fits,
        cells: by_key.into_values().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRank {
    pub act: String,
    pub factor: FactorId,
    pub high_year_count: usize,
    pub max_coef: f64,
    pub max_coef_bucket: YearBucket,
}

/// Ranks (act, factor) pairs by the number of high buckets, then by their
/// largest standardized coefficient. Pairs with no fitted cell are omitted.
pub fn rank_pairs(cells: &[CoefficientCell]) -> Vec<PairRank> {
    let mut pairs: BTreeMap<(&str, FactorId), PairRank> = BTreeMap::new();
    for cell in cells {
        let Some(z) = cell.standardized.filter(|_| cell.category != Category::Absent) else {
            continue;
        };
        let entry = pairs.entry((cell.act.as_str(), cell.factor)).or_insert_with(|| PairRank {
            act: cell.act.clone(),
            factor: cell.factor,
            high_year_count: 0,
            max_coef: z,
            max_coef_bucket: cell.bucket,
        });
        if cell.category == Category::High {
            entry.high_year_count += 1;
        }
        if z > entry.max_coef || (z == entry.max_coef && cell.bucket < entry.max_coef_bucket) {
            entry.max_coef = z;
            entry.max_coef_bucket = cell.bucket;
        }
    }
    let mut ranked: Vec<PairRank> = pairs.into_values().collect();
    ranked.sort_by(|a, b| {
        b.high_year_count
            .cmp(&a.high_year_count)
            .then(b.max_coef.total_cmp(&a.max_coef))
            .then_with(|| a.act.cmp(&b.act))
            .then(a.factor.cmp(&b.factor))
    });
    ranked
}

#[derive(Debug, Serialize, Deserialize)]
struct CellRow {
    act: String,
    factor: String,
    bucket: String,
    raw: Option<f64>,
    standardized: Option<f64>,
    category: String,
}

pub fn write_cells(path: &Path, cells: &[CoefficientCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    // Header is written explicitly so an empty surface still yields a valid file.
    w.write_record(["act", "factor", "bucket", "raw", "standardized", "category"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for c in cells {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            c.act.as_str(),
            c.factor.abbrev(),
            c.bucket.label(),
            &num(c.raw),
            &num(c.standardized),
            c.category.as_str(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cells(path: &Path) -> Result<Vec<CoefficientCell>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut cells = Vec::new();
    for (i, row) in r.deserialize::<CellRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(path.display(), line, e))?;
        let bad = |what: &str| Error::parse(path.display(), line, format!("unknown {what}"));
        cells.push(CoefficientCell {
            act: row.act,
            factor: FactorId::parse(&row.factor).ok_or_else(|| bad("factor"))?,
            bucket: YearBucket::parse(&row.bucket).ok_or_else(|| bad("bucket"))?,
            raw: row.raw,
            standardized: row.standardized,
            category: Category::parse(&row.category).ok_or_else(|| bad("category"))?,
        });
    }
    Ok(cells)
}
