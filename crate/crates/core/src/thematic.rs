//! The six thematic factors, the seed-sentence bank, nearest-seed mapping of
//! complaint segments and per-case factor proportions.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Complaint;
use crate::embedding::{distance_with, DistanceKind, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::http::{JsonClient, RemoteSettings};
use crate::text;

pub const FACTOR_COUNT: usize = 6;

/// Index into [`FACTORS`]; always `< FACTOR_COUNT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct FactorId(u8);

impl FactorId {
    pub fn new(id: usize) -> Option<Self> {
        (id < FACTOR_COUNT).then_some(Self(id as u8))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = FactorId> {
        (0..FACTOR_COUNT as u8).map(FactorId)
    }

    pub fn info(self) -> &'static ThematicFactor {
        &FACTORS[self.index()]
    }

    pub fn abbrev(self) -> &'static str {
        self.info().abbrev
    }

    pub fn name(self) -> &'static str {
        self.info().name
    }

    /// Accepts a numeric id (`"3"`) or an abbreviation (`"SO"`, any case).
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<usize>() {
            return Self::new(n);
        }
        FACTORS
            .iter()
            .position(|f| f.abbrev.eq_ignore_ascii_case(s) || f.name.eq_ignore_ascii_case(s))
            .and_then(Self::new)
    }
}

impl TryFrom<u8> for FactorId {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        Self::new(usize::from(v)).ok_or_else(|| format!("factor id {v} out of range 0..{FACTOR_COUNT}"))
    }
}

impl From<FactorId> for u8 {
    fn from(f: FactorId) -> u8 {
        f.0
    }
}

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct ThematicFactor {
    pub id: usize,
    pub abbrev: &'static str,
    pub name: &'static str,
    pub prompt: &'static str,
}

pub static FACTORS: [ThematicFactor; FACTOR_COUNT] = [
    ThematicFactor {
        id: 0,
        abbrev: "FM",
        name: "Financial Misconduct & Investor Impact",
        prompt: "Focus on mentions of how the complaints describe the impact on investors, such as specific harms or financial losses. This includes improper accounting practices and bribery, highlighting the importance of compliance with internal controls and transparency in financial dealings.",
    },
    ThematicFactor {
        id: 1,
        abbrev: "RC",
        name: "Regulatory Compliance",
        prompt: "Focus on mentions of companies failing to comply with regulations, such as not properly registering securities or failing to disclose critical information, and how these shortcomings subject them to lawsuits, emphasizing the importance of adherence to established securities laws.",
    },
    ThematicFactor {
        id: 2,
        abbrev: "PM",
        name: "Promotion & Misrepresentation",
        prompt: "Focus on mentions of any misrepresentations, particularly on instances of asymmetric information and over-promotion. Detail how information was misleading, exaggerated, or deceptively presented, offering insights into subtle forms of fraud.",
    },
    ThematicFactor {
        id: 3,
        abbrev: "SO",
        name: "Scope and Scale of Operations",
        prompt: "Focus on mentions of how the scope and scale of the company\u{2019}s operations are described. Pay attention to numeric facts such as the amount of money involved, the number of investors, and the geographic reach of operations.",
    },
    ThematicFactor {
        id: 4,
        abbrev: "TR",
        name: "Technological Risks",
        prompt: "Focus on mentions of specific technological vulnerabilities or failures, such as inadequacies in the blockchain technology itself, security breaches, or technical misrepresentations.",
    },
    ThematicFactor {
        id: 5,
        abbrev: "KI",
        name: "Key Individuals",
        prompt: "Focus on mentions of key individuals within the company. Observe how their actions, statements, and roles might reveal individual culpability or highlight leadership issues that contribute to legal violations.",
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSentence {
    pub factor: FactorId,
    pub text: String,
    pub length_limit: usize,
    pub vector: Option<EmbeddingVector>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedRecord {
    factor_id: FactorId,
    text: String,
}

/// Seed sentences for every factor, optionally embedded with one model.
#[derive(Debug, Clone, Default)]
pub struct SeedBank {
    pub seeds: Vec<SeedSentence>,
    embedded_with: Option<(String, usize)>,
}

/// Banks with fewer seeds than this for some factor get a sparsity warning.
pub const SPARSE_SEED_COUNT: usize = 5;

impl SeedBank {
    /// Builds a bank, enforcing that every factor has at least one seed and
    /// truncating over-long seeds to `length_limit` words.
    pub fn new(seeds: Vec<(FactorId, String)>, length_limit: usize) -> Result<Self> {
        if length_limit == 0 {
            return Err(Error::Config("seed length limit must be positive".into()));
        }
        let seeds: Vec<SeedSentence> = seeds
            .into_iter()
            .map(|(factor, text)| {
                let text = if text::word_count(&text) > length_limit {
                    log::warn!("seed for {factor} exceeds {length_limit} words; truncating");
                    text::truncate_words(&text, length_limit)
                } else {
                    text.trim().to_string()
                };
                SeedSentence {
                    factor,
                    text,
                    length_limit,
                    vector: None,
                }
            })
            .collect();
        if let Some(seed) = seeds.iter().find(|s| s.text.is_empty()) {
            return Err(Error::InvalidBank(format!("empty seed text for {}", seed.factor)));
        }
        let bank = Self {
            seeds,
            embedded_with: None,
        };
        let counts = bank.counts();
        if let Some(missing) = FactorId::all().find(|f| counts[f.index()] == 0) {
            return Err(Error::InvalidBank(format!(
                "factor {} ({}) has no seed sentences",
                missing.index(),
                missing.abbrev()
            )));
        }
        if counts.iter().any(|&c| c < SPARSE_SEED_COUNT) {
            log::warn!("sparse seed bank: per-factor counts {counts:?}");
        }
        Ok(bank)
    }

    pub fn counts(&self) -> [usize; FACTOR_COUNT] {
        let mut counts = [0; FACTOR_COUNT];
        for seed in &self.seeds {
            counts[seed.factor.index()] += 1;
        }
        counts
    }

    pub fn is_sparse(&self) -> bool {
        self.counts().iter().any(|&c| c < SPARSE_SEED_COUNT)
    }

    pub fn embedded_with(&self) -> Option<(&str, usize)> {
        self.embedded_with.as_ref().map(|(m, d)| (m.as_str(), *d))
    }

    /// Embeds every seed with `embedder`, replacing earlier vectors.
    pub fn embed(&mut self, embedder: &Embedder) -> Result<()> {
        let texts: Vec<&str> = self.seeds.iter().map(|s| s.text.as_str()).collect();
        let vectors = embedder.embed_texts(&texts)?;
        for (seed, vector) in self.seeds.iter_mut().zip(vectors) {
            seed.vector = Some(vector);
        }
        self.embedded_with = Some((embedder.model_id().to_string(), embedder.dim()));
        Ok(())
    }

    /// Seed-bank file: a JSON array of `{"factor_id", "text"}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<SeedRecord> = self
            .seeds
            .iter()
            .map(|s| SeedRecord {
                factor_id: s.factor,
                text: s.text.clone(),
            })
            .collect();
        let mut json = serde_json::to_string_pretty(&records).expect("seed records serialize");
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

pub fn load_seed_bank(path: &Path, length_limit: usize) -> Result<SeedBank> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<SeedRecord> =
        serde_json::from_str(&content).map_err(|e| Error::parse(path.display(), e.line(), e))?;
    let bank = SeedBank::new(
        records.into_iter().map(|r| (r.factor_id, r.text)).collect(),
        length_limit,
    )?;
    log::info!("loaded {} seeds from {}: {:?}", bank.seeds.len(), path.display(), bank.counts());
    Ok(bank)
}

/// Text-generation backend used to author seed sentences.
pub trait SeedGenerator: Send + Sync {
    fn model_id(&self) -> &str;
    /// `ordinal` numbers the requested sentence within its factor and
    /// `attempt` counts re-requests after an over-long answer.
    fn generate(&self, prompt: &str, length_limit: usize, ordinal: usize, attempt: u32) -> Result<String>;
}

/// Offline generator that slides a word window over the prompt. Only useful
/// for producing reproducible banks in tests and demos.
#[derive(Debug, Clone, Default)]
pub struct TemplateGenerator;

impl SeedGenerator for TemplateGenerator {
    fn model_id(&self) -> &str {
        "template"
    }

    fn generate(&self, prompt: &str, length_limit: usize, ordinal: usize, _attempt: u32) -> Result<String> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Data("empty prompt".into()));
        }
        let span = length_limit.min(12).min(words.len());
        let start = (ordinal * 5) % words.len();
        Ok((0..span)
            .map(|k| words[(start + k) % words.len()])
            .collect::<Vec<_>>()
            .join(" "))
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_words: usize,
    seed: usize,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// HTTP adapter: POST `{"model", "prompt", "max_words", "seed"}`, expects `{"text"}`.
pub struct RemoteGenerator {
    model_id: String,
    client: JsonClient,
}

impl RemoteGenerator {
    pub fn new(model_id: impl Into<String>, settings: &RemoteSettings) -> Result<Self> {
        let model_id = model_id.into();
        let client = JsonClient::new(&format!("generate:{model_id}"), settings).map_err(Error::Config)?;
        Ok(Self { model_id, client })
    }
}

impl SeedGenerator for RemoteGenerator {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, prompt: &str, length_limit: usize, ordinal: usize, attempt: u32) -> Result<String> {
        let response: GenerateResponse = self.client.post(&GenerateRequest {
            model: &self.model_id,
            prompt,
            max_words: length_limit,
            seed: ordinal * 16 + attempt as usize,
        })?;
        Ok(response.text)
    }
}

const MAX_REREQUESTS: u32 = 3;

fn seed_prompt(factor: FactorId, length_limit: usize) -> String {
    format!(
        "{} Write one sentence of at most {length_limit} words, in the style of an enforcement complaint, that reflects this theme.",
        factor.info().prompt
    )
}

/// Requests `count` sentences per factor. Over-long answers are re-requested
/// up to three times and then truncated to `length_limit` words.
pub fn generate_seeds(generator: &dyn SeedGenerator, count: usize, length_limit: usize) -> Result<SeedBank> {
    if count == 0 {
        return Err(Error::Config("seed count must be positive".into()));
    }
    let mut seeds = Vec::with_capacity(count * FACTOR_COUNT);
    for factor in FactorId::all() {
        let prompt = seed_prompt(factor, length_limit);
        for ordinal in 0..count {
            let mut attempt = 0;
            let text = loop {
                let candidate = generator.generate(&prompt, length_limit, ordinal, attempt)?;
                let candidate = candidate.split_whitespace().collect::<Vec<_>>().join(" ");
                if text::word_count(&candidate) <= length_limit {
                    break candidate;
                }
                if attempt == MAX_REREQUESTS {
                    log::warn!("{factor} seed {ordinal} still over {length_limit} words; truncating");
                    break text::truncate_words(&candidate, length_limit);
                }
                attempt += 1;
            };
            seeds.push((factor, text));
        }
    }
    SeedBank::new(seeds, length_limit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorAssignment {
    pub case_id: String,
    pub segment_index: u32,
    pub factor: FactorId,
    pub distance: f64,
    pub runner_up_margin: f64,
}

/// Winner of a nearest-seed search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub factor: FactorId,
    pub ordinal: usize,
    pub distance: f64,
    pub runner_up_margin: f64,
}

/// Picks the minimum-distance candidate. `candidates` yields
/// `(factor, distance)` in seed order; ties go to the lowest factor id, then
/// the lowest seed ordinal.
pub fn nearest_seed(candidates: impl IntoIterator<Item = (FactorId, f64)>) -> Option<Nearest> {
    let mut best: Option<(f64, FactorId, usize)> = None;
    let mut second = f64::INFINITY;
    for (ordinal, (factor, d)) in candidates.into_iter().enumerate() {
        let key = (d, factor, ordinal);
        match best {
            None => best = Some(key),
            Some(b) => {
                let better = d < b.0 || (d == b.0 && (factor, ordinal) < (b.1, b.2));
                if better {
                    second = second.min(b.0);
                    best = Some(key);
                } else {
                    second = second.min(d);
                }
            }
        }
    }
    best.map(|(distance, factor, ordinal)| Nearest {
        factor,
        ordinal,
        distance,
        runner_up_margin: if second.is_finite() { second - distance } else { 0.0 },
    })
}

/// Assigns every segment the factor of its closest seed.
pub fn map_segments(
    corpus: &[Complaint],
    bank: &SeedBank,
    embedder: &Embedder,
    kind: DistanceKind,
) -> Result<Vec<FactorAssignment>> {
    match bank.embedded_with() {
        Some((model, dim)) if model == embedder.model_id() && dim == embedder.dim() => {}
        Some((model, dim)) => {
            return Err(Error::Config(format!(
                "seed bank embedded with `{model}` ({dim}-d) but segments use `{}` ({}-d)",
                embedder.model_id(),
                embedder.dim()
            )))
        }
        None => return Err(Error::Config("seed bank has not been embedded".into())),
    }
    let seeds: Vec<(FactorId, &EmbeddingVector)> = bank
        .seeds
        .iter()
        .map(|s| {
            s.vector
                .as_ref()
                .map(|v| (s.factor, v))
                .ok_or_else(|| Error::Config("seed bank is only partially embedded".into()))
        })
        .collect::<Result<_>>()?;

    let segments: Vec<(&str, u32, &str)> = corpus
        .iter()
        .flat_map(|c| c.segments.iter().map(move |s| (c.case_id.as_str(), s.index, s.text.as_str())))
        .collect();
    if segments.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<&str> = segments.iter().map(|s| s.2).collect();
    let vectors = embedder.embed_texts(&texts)?;

    segments
        .par_iter()
        .zip(vectors.par_iter())
        .map(|(&(case_id, segment_index, _), vector)| {
            let distances = seeds
                .iter()
                .map(|(f, seed)| distance_with(kind, vector, seed).map(|d| (*f, d)))
                .collect::<Result<Vec<_>>>()?;
            let nearest = nearest_seed(distances).expect("bank is non-empty");
            Ok(FactorAssignment {
                case_id: case_id.to_string(),
                segment_index,
                factor: nearest.factor,
                distance: nearest.distance,
                runner_up_margin: nearest.runner_up_margin,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorProportions {
    pub case_id: String,
    pub p: [f64; FACTOR_COUNT],
    pub year: i32,
}

/// Share of each case's segments assigned to each factor. Cases without
/// segments are skipped with a warning.
pub fn factor_proportions(assignments: &[FactorAssignment], corpus: &[Complaint]) -> Result<Vec<FactorProportions>> {
    let mut by_case: HashMap<&str, Vec<&FactorAssignment>> = HashMap::new();
    for a in assignments {
        by_case.entry(a.case_id.as_str()).or_default().push(a);
    }
    let mut out = Vec::with_capacity(corpus.len());
    for complaint in corpus {
        if complaint.segments.is_empty() {
            log::warn!("case {} has no segments; excluded from proportions", complaint.case_id);
            continue;
        }
        let assigned = by_case.get(complaint.case_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let mut counts = [0usize; FACTOR_COUNT];
        for segment in &complaint.segments {
            let a = assigned
                .iter()
                .find(|a| a.segment_index == segment.index)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "segment {} of case {} has no factor assignment",
                        segment.index, complaint.case_id
                    ))
                })?;
            counts[a.factor.index()] += 1;
        }
        let n = complaint.segments.len() as f64;
        out.push(FactorProportions {
            case_id: complaint.case_id.clone(),
            p: counts.map(|c| c as f64 / n),
            year: complaint.year(),
        });
    }
    Ok(out)
}

/// Everything the trend and alignment stages need to know about one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseProfile {
    pub case_id: String,
    pub year: i32,
    pub category: Option<String>,
    pub acts: Vec<String>,
    pub p: [f64; FACTOR_COUNT],
}

pub fn case_profiles(proportions: &[FactorProportions], corpus: &[Complaint]) -> Vec<CaseProfile> {
    let by_id: HashMap<&str, &Complaint> = corpus.iter().map(|c| (c.case_id.as_str(), c)).collect();
    proportions
        .iter()
        .filter_map(|fp| {
            let c = by_id.get(fp.case_id.as_str())?;
            Some(CaseProfile {
                case_id: fp.case_id.clone(),
                year: fp.year,
                category: c.category.clone(),
                acts: c.acts.iter().map(|a| a.canonical_id.clone()).collect(),
                p: fp.p,
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path.display(), n + 1, e))?);
    }
    Ok(out)
}
