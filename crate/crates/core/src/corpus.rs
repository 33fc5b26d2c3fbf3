//! Complaint ingestion: paragraph segmentation, Act citation extraction,
//! corpus statistics and the JSONL corpus file.
//!
//! A complaint is split on line-anchored paragraph markers (`12. `). A marker
//! whose number does not exceed the previous accepted marker is kept as body
//! text, which stops stray page numbers from opening new segments.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

/// One numbered paragraph of a complaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub index: u32,
    pub text: String,
    pub word_count: usize,
}

impl Segment {
    pub fn new(index: u32, text: impl Into<String>) -> Self {
        let text = text.into();
        let word_count = text::word_count(&text);
        Self {
            index,
            text,
            word_count,
        }
    }
}

/// A statutory section reference such as `Section 10(b) of the Exchange Act`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActCitation {
    pub act_name: String,
    pub section: String,
    pub canonical_id: String,
}

impl ActCitation {
    pub fn new(act_name: impl Into<String>, section: impl Into<String>) -> Self {
        let act_name = act_name.into();
        let section = section.into();
        let canonical_id = format!("Section {section} of the {act_name}");
        Self {
            act_name,
            section,
            canonical_id,
        }
    }

    /// Inverse of the canonical id format. Returns `None` for anything that is
    /// not `Section <section> of the <name>` with a well-formed section.
    pub fn from_canonical(id: &str) -> Option<Self> {
        let rest = id.strip_prefix("Section ")?;
        let (section, act_name) = rest.split_once(" of the ")?;
        if !SECTION_RE.is_match(section) || act_name.is_empty() {
            return None;
        }
        Some(Self::new(act_name, section))
    }
}

/// Filing metadata supplied alongside the raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    #[serde(default)]
    pub title: String,
    pub date_filed: NaiveDate,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Complaint {
    pub case_id: String,
    pub title: String,
    pub date_filed: NaiveDate,
    pub category: Option<String>,
    pub raw_text: String,
    pub segments: Vec<Segment>,
    pub acts: Vec<ActCitation>,
}

impl Complaint {
    pub fn year(&self) -> i32 {
        self.date_filed.year()
    }

    pub fn word_count(&self) -> usize {
        self.segments.iter().map(|s| s.word_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub case_count: usize,
    pub vocabulary_size: usize,
    pub avg_words_per_case: f64,
    pub avg_segments_per_case: f64,
    pub avg_segment_length: f64,
}

/// Result of splitting a document on paragraph markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    /// Text before the first accepted marker (trimmed).
    pub preamble: String,
    pub segments: Vec<Segment>,
}

static MARKER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[ \t]*([0-9]+)\.(?:[ \t]+|\r?\n|$)").unwrap());

/// Splits `raw` into numbered segments.
///
/// Segments are the text runs between accepted markers; the marker token itself
/// is removed and each segment is trimmed. Markers that would leave an empty
/// segment consume their index but emit nothing. A document without any marker
/// becomes a single segment numbered 1.
pub fn segment_text(raw: &str) -> Segmentation {
    let mut preamble = String::new();
    let mut segments = Vec::new();
    let mut current: Option<(u32, String)> = None;
    let mut last_index = 0u32;

    let flush = |current: &mut Option<(u32, String)>, out: &mut Vec<Segment>| {
        if let Some((index, body)) = current.take() {
            let body = body.trim();
            if !body.is_empty() {
                out.push(Segment::new(index, body));
            }
        }
    };

    for line in raw.split_inclusive('\n') {
        let marker = MARKER_RE.captures(line).and_then(|caps| {
            let whole = caps.get(0).unwrap();
            let index: u32 = caps[1].parse().ok()?;
            (index > last_index).then_some((index, whole.end()))
        });
        match marker {
            Some((index, body_start)) => {
                flush(&mut current, &mut segments);
                last_index = index;
                current = Some((index, line[body_start..].to_string()));
            }
            None => match current.as_mut() {
                Some((_, body)) => body.push_str(line),
                None => preamble.push_str(line),
            },
        }
    }
    let had_markers = current.is_some() || last_index > 0;
    flush(&mut current, &mut segments);

    if !had_markers {
        let body = preamble.trim();
        let segments = if body.is_empty() {
            Vec::new()
        } else {
            vec![Segment::new(1, body)]
        };
        return Segmentation {
            preamble: String::new(),
            segments,
        };
    }

    Segmentation {
        preamble: preamble.trim().to_string(),
        segments,
    }
}

/// Parses one complaint with the default Act catalog.
pub fn parse_complaint(raw: &str, meta: &CaseMeta) -> Result<Complaint> {
    parse_complaint_with(raw, meta, &ActCatalog::default())
}

pub fn parse_complaint_with(raw: &str, meta: &CaseMeta, catalog: &ActCatalog) -> Result<Complaint> {
    if raw.trim().is_empty() {
        return Err(Error::InvalidDocument(format!(
            "case {} has no text",
            meta.case_id
        )));
    }
    let Segmentation { segments, .. } = segment_text(raw);
    Ok(Complaint {
        case_id: meta.case_id.clone(),
        title: meta.title.clone(),
        date_filed: meta.date_filed,
        category: meta.category.clone(),
        raw_text: raw.to_string(),
        segments,
        acts: catalog.extract(raw),
    })
}

const SECTION: &str = r"[0-9]+[A-Za-z]?(?:\([A-Za-z0-9]+\))*";

static SECTION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(&format!("^{SECTION}$")).unwrap());

static SECTION_ITEM_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(SECTION).unwrap());

static CITATION_RE: LazyLock<Regex> = LazyLock::new(|| {
    let list = format!(r"{SECTION}(?:\s*,\s*(?:(?:and|or)\s+)?{SECTION}|\s+(?:and|or)\s+{SECTION})*");
    Regex::new(&format!(
        r"\b[Ss]ections?\s+(?P<list>{list})\s+of\s+the\s+(?P<name>(?:[A-Z][A-Za-z'&.\-]*\s+){{1,5}})Act\b(?:\s+of\s+(?P<year>[0-9]{{4}}))?"
    ))
    .unwrap()
});

/// Maps statute names as written in complaints onto the short names used in reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActCatalog {
    aliases: BTreeMap<String, String>,
}

impl Default for ActCatalog {
    fn default() -> Self {
        let pairs = [
            ("Securities Act of 1933", "Securities Act"),
            ("Securities Exchange Act", "Exchange Act"),
            ("Securities Exchange Act of 1934", "Exchange Act"),
            ("Exchange Act of 1934", "Exchange Act"),
            ("Investment Advisers Act", "Advisers Act"),
            ("Investment Advisers Act of 1940", "Advisers Act"),
            ("Advisers Act of 1940", "Advisers Act"),
            ("Investment Company Act of 1940", "Investment Company Act"),
            ("Trust Indenture Act of 1939", "Trust Indenture Act"),
            ("Sarbanes-Oxley Act of 2002", "Sarbanes-Oxley Act"),
        ];
        Self {
            aliases: pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl ActCatalog {
    pub fn empty() -> Self {
        Self {
            aliases: BTreeMap::new(),
        }
    }

    /// Adds or replaces entries; user entries win over the defaults.
    pub fn extend(&mut self, aliases: impl IntoIterator<Item = (String, String)>) {
        self.aliases.extend(aliases);
    }

    pub fn canonical_name(&self, name: &str, year: Option<&str>) -> String {
        if let Some(year) = year {
            if let Some(hit) = self.aliases.get(&format!("{name} of {year}")) {
                return hit.clone();
            }
        }
        self.aliases
            .get(name)
            .cloned()
            .unwrap_or_else(|| name.to_string())
    }

    /// Every `Section(s) <list> of the <Name> Act` mention in `text`, one
    /// citation per listed section, deduplicated in first-occurrence order.
    pub fn extract(&self, text: &str) -> Vec<ActCitation> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for caps in CITATION_RE.captures_iter(text) {
            let raw_name = caps["name"].split_whitespace().collect::<Vec<_>>().join(" ");
            let name = format!("{raw_name} Act");
            let act = self.canonical_name(&name, caps.name("year").map(|m| m.as_str()));
            for section in SECTION_ITEM_RE.find_iter(&caps["list"]) {
                let citation = ActCitation::new(act.clone(), section.as_str());
                if seen.insert(citation.canonical_id.clone()) {
                    out.push(citation);
                }
            }
        }
        out
    }
}

pub fn extract_act_citations(text: &str) -> Vec<ActCitation> {
    ActCatalog::default().extract(text)
}

pub fn corpus_stats(corpus: &[Complaint]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut vocabulary = HashSet::new();
    let mut total_words = 0usize;
    let mut total_segments = 0usize;
    for complaint in corpus {
        for segment in &complaint.segments {
            vocabulary.extend(text::tokens(&segment.text));
            total_words += segment.word_count;
        }
        total_segments += complaint.segments.len();
    }
    let cases = corpus.len() as f64;
    Ok(CorpusStats {
        case_count: corpus.len(),
        vocabulary_size: vocabulary.len(),
        avg_words_per_case: total_words as f64 / cases,
        avg_segments_per_case: total_segments as f64 / cases,
        avg_segment_length: if total_segments == 0 {
            0.0
        } else {
            total_words as f64 / total_segments as f64
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentRecord {
    index: u32,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComplaintRecord {
    case_id: String,
    title: String,
    date_filed: NaiveDate,
    category: Option<String>,
    raw_text: String,
    segments: Vec<SegmentRecord>,
    acts: Vec<String>,
}

impl From<&Complaint> for ComplaintRecord {
    fn from(c: &Complaint) -> Self {
        Self {
            case_id: c.case_id.clone(),
            title: c.title.clone(),
            date_filed: c.date_filed,
            category: c.category.clone(),
            raw_text: c.raw_text.clone(),
            segments: c
                .segments
                .iter()
                .map(|s| SegmentRecord {
                    index: s.index,
                    text: s.text.clone(),
                })
                .collect(),
            acts: c.acts.iter().map(|a| a.canonical_id.clone()).collect(),
        }
    }
}

impl ComplaintRecord {
    fn into_complaint(self) -> std::result::Result<Complaint, String> {
        let mut last = 0u32;
        let mut segments = Vec::with_capacity(self.segments.len());
        for s in self.segments {
            if s.index <= last {
                return Err(format!("segment index {} is not increasing", s.index));
            }
            if s.text.trim().is_empty() {
                return Err(format!("segment {} is empty", s.index));
            }
            last = s.index;
            segments.push(Segment::new(s.index, s.text));
        }
        let mut seen = HashSet::new();
        let mut acts = Vec::with_capacity(self.acts.len());
        for id in self.acts {
            let act = ActCitation::from_canonical(&id)
                .ok_or_else(|| format!("malformed act citation `{id}`"))?;
            if !seen.insert(id) {
                return Err(format!("duplicate act citation `{}`", act.canonical_id));
            }
            acts.push(act);
        }
        Ok(Complaint {
            case_id: self.case_id,
            title: self.title,
            date_filed: self.date_filed,
            category: self.category,
            raw_text: self.raw_text,
            segments,
            acts,
        })
    }
}

/// Writes one JSON object per line.
pub fn write_corpus(path: &Path, corpus: &[Complaint]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for complaint in corpus {
        let line = serde_json::to_string(&ComplaintRecord::from(complaint))
            .map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Complaint>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ComplaintRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path.display(), n + 1, e))?;
        let complaint = record
            .into_complaint()
            .map_err(|msg| Error::parse(path.display(), n + 1, msg))?;
        if !ids.insert(complaint.case_id.clone()) {
            return Err(Error::parse(
                path.display(),
                n + 1,
                format!("duplicate case_id `{}`", complaint.case_id),
            ));
        }
        corpus.push(complaint);
    }
    Ok(corpus)
}

#[derive(Debug, Deserialize)]
struct MetadataRecord {
    #[serde(flatten)]
    meta: CaseMeta,
    #[serde(default)]
    file: Option<String>,
}

/// Name of the metadata index expected in an ingest directory.
pub const METADATA_FILE: &str = "metadata.jsonl";

/// Parses every complaint listed in `<dir>/metadata.jsonl`.
///
/// Each metadata line names a case; its text is read from `file` or, when
/// absent, `<case_id>.txt`. Output order follows the metadata file.
pub fn ingest_dir(dir: &Path, catalog: &ActCatalog) -> Result<Vec<Complaint>> {
    let meta_path = dir.join(METADATA_FILE);
    let content = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetadataRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(meta_path.display(), n + 1, e))?;
        if !ids.insert(record.meta.case_id.clone()) {
            return Err(Error::parse(
                meta_path.display(),
                n + 1,
                format!("duplicate case_id `{}`", record.meta.case_id),
            ));
        }
        records.push(record);
    }
    records
        .par_iter()
        .map(|record| {
            let name = record
                .file
                .clone()
                .unwrap_or_else(|| format!("{}.txt", record.meta.case_id));
            let path = dir.join(name);
            let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parse_complaint_with(&raw, &record.meta, catalog)
        })
        .collect()
}
