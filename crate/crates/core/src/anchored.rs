//! Anchored-term evaluation of a factor mapping: extract factor-labelled
//! entities from assigned segments, fold them into a 6×6 score matrix and
//! reduce each row to a normalized dominance score.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Complaint;
use crate::error::{Error, Result};
use crate::http::{JsonClient, RemoteSettings};
use crate::thematic::{FactorAssignment, FactorId, FACTOR_COUNT};
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorEntry {
    #[serde(alias = "phrase")]
    pub label: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// Anchor labels (or lexicon phrases) for each factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    entries: [Vec<AnchorEntry>; FACTOR_COUNT],
}

impl AnchorSet {
    pub fn new(entries: [Vec<AnchorEntry>; FACTOR_COUNT]) -> Result<Self> {
        for (i, list) in entries.iter().enumerate() {
            let f = FactorId::new(i).expect("in range");
            if list.is_empty() {
                return Err(Error::Config(format!("anchor set has no labels for factor {f}")));
            }
            for e in list {
                if e.label.trim().is_empty() {
                    return Err(Error::Config(format!("empty anchor label for factor {f}")));
                }
                if !(0.0..=1.0).contains(&e.weight) {
                    return Err(Error::Config(format!(
                        "anchor `{}` weight {} outside [0, 1]",
                        e.label, e.weight
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self, factor: FactorId) -> &[AnchorEntry] {
        &self.entries[factor.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (FactorId, &AnchorEntry)> {
        FactorId::all().flat_map(move |f| self.entries(f).iter().map(move |e| (f, e)))
    }

    /// Factor and anchor weight for an extractor label, compared case-insensitively.
    pub fn lookup(&self, label: &str) -> Option<(FactorId, f64)> {
        let label = label.trim();
        self.iter()
            .find(|(_, e)| e.label.eq_ignore_ascii_case(label))
            .map(|(f, e)| (f, e.weight))
    }

    pub fn from_json(json: &str, origin: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<AnchorEntry>> =
            serde_json::from_str(json).map_err(|e| Error::parse(origin, e.line(), e))?;
        if raw.is_empty() {
            return Err(Error::Config(format!("{origin}: anchor config is empty")));
        }
        let mut entries: [Vec<AnchorEntry>; FACTOR_COUNT] = Default::default();
        for (key, list) in raw {
            let f = FactorId::parse(&key)
                .ok_or_else(|| Error::Config(format!("{origin}: unknown factor key `{key}`")))?;
            entries[f.index()].extend(list);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredEntity {
    pub surface: String,
    pub factor: FactorId,
    pub weight: f64,
    pub case_id: String,
    pub segment_index: u32,
}

/// A span found by an extractor, before it is tied to a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedSpan {
    pub surface: String,
    pub factor: FactorId,
    pub weight: f64,
}

pub trait EntityExtractor: Send + Sync {
    fn model_id(&self) -> &str;
    fn extract(&self, text: &str, anchors: &AnchorSet) -> Result<Vec<ExtractedSpan>>;
}

/// Deterministic weighted-lexicon matcher. Anchor entries are phrases; the
/// text is scanned token by token and the longest phrase starting at each
/// position wins, ties going to the lower factor id and then the earlier entry.
#[derive(Debug, Clone, Default)]
pub struct LexiconMatcher;

impl EntityExtractor for LexiconMatcher {
    fn model_id(&self) -> &str {
        "lexicon"
    }

    fn extract(&self, text: &str, anchors: &AnchorSet) -> Result<Vec<ExtractedSpan>> {
        let phrases: Vec<(Vec<String>, FactorId, f64)> = anchors
            .iter()
            .map(|(f, e)| (text::tokens(&e.label).collect::<Vec<_>>(), f, e.weight))
            .filter(|(toks, _, _)| !toks.is_empty())
            .collect();
        let words: Vec<&str> = text.split_whitespace().collect();
        let norms: Vec<String> = words
            .iter()
            .map(|w| text::normalize_token(w).unwrap_or_default())
            .collect();

        let mut out = Vec::new();
        let mut pos = 0;
        while pos < words.len() {
            let mut best: Option<&(Vec<String>, FactorId, f64)> = None;
            for phrase in &phrases {
                let len = phrase.0.len();
                if pos + len <= norms.len()
                    && norms[pos..pos + len] == phrase.0[..]
                    && best.is_none_or(|b| len > b.0.len())
                {
                    best = Some(phrase);
                }
            }
            match best {
                Some((toks, factor, weight)) => {
                    out.push(ExtractedSpan {
                        surface: words[pos..pos + toks.len()].join(" "),
                        factor: *factor,
                        weight: *weight,
                    });
                    pos += toks.len();
                }
                None => pos += 1,
            }
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct NerRequest<'a> {
    model: &'a str,
    text: &'a str,
    labels: Vec<&'a str>,
    threshold: f64,
}

#[derive(Deserialize)]
struct NerResponse {
    entities: Vec<NerEntity>,
}

#[derive(Deserialize)]
struct NerEntity {
    text: String,
    label: String,
    score: f64,
}

/// Zero-shot NER over HTTP: POST `{"model", "text", "labels", "threshold"}`,
/// expects `{"entities": [{"text", "label", "score"}]}`. The entity weight is
/// the model score times the anchor weight of its label.
pub struct RemoteNerExtractor {
    model_id: String,
    threshold: f64,
    client: JsonClient,
}

impl RemoteNerExtractor {
    pub fn new(model_id: impl Into<String>, threshold: f64, settings: &RemoteSettings) -> Result<Self> {
        let model_id = model_id.into();
        let client = JsonClient::new(&format!("ner:{model_id}"), settings).map_err(Error::Config)?;
        Ok(Self {
            model_id,
            threshold,
            client,
        })
    }
}

impl EntityExtractor for RemoteNerExtractor {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn extract(&self, text: &str, anchors: &AnchorSet) -> Result<Vec<ExtractedSpan>> {
        let response: NerResponse = self.client.post(&NerRequest {
            model: &self.model_id,
            text,
            labels: anchors.iter().map(|(_, e)| e.label.as_str()).collect(),
            threshold: self.threshold,
        })?;
        Ok(response
            .entities
            .into_iter()
            .filter_map(|e| {
                let (factor, anchor_weight) = anchors.lookup(&e.label)?;
                Some(ExtractedSpan {
                    surface: e.text,
                    factor,
                    weight: (e.score.clamp(0.0, 1.0)) * anchor_weight,
                })
            })
            .collect())
    }
}

/// Runs `extractor` over every assigned segment, in assignment order.
pub fn extract_anchored_entities(
    corpus: &[Complaint],
    assignments: &[FactorAssignment],
    extractor: &dyn EntityExtractor,
    anchors: &AnchorSet,
) -> Result<Vec<AnchoredEntity>> {
    let texts: HashMap<(&str, u32), &str> = corpus
        .iter()
        .flat_map(|c| c.segments.iter().map(move |s| ((c.case_id.as_str(), s.index), s.text.as_str())))
        .collect();
    let per_segment: Vec<Vec<AnchoredEntity>> = assignments
        .par_iter()
        .map(|a| {
            let text = texts.get(&(a.case_id.as_str(), a.segment_index)).ok_or_else(|| {
                Error::Data(format!("assignment for unknown segment {}#{}", a.case_id, a.segment_index))
            })?;
            Ok(extractor
                .extract(text, anchors)?
                .into_iter()
                .map(|span| AnchoredEntity {
                    surface: span.surface,
                    factor: span.factor,
                    weight: span.weight,
                    case_id: a.case_id.clone(),
                    segment_index: a.segment_index,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_segment.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub sc: [[f64; FACTOR_COUNT]; FACTOR_COUNT],
    pub segment_counts: [usize; FACTOR_COUNT],
}

/// `sc[i][j]` is the weighted count of factor-`j` entities found in segments
/// mapped to factor `i`, divided by `n`.
pub fn score_matrix(entities: &[AnchoredEntity], assignments: &[FactorAssignment], n: usize) -> Result<ScoreMatrix> {
    if n == 0 {
        return Err(Error::Config("score normalizer must be positive".into()));
    }
    let mut segment_counts = [0; FACTOR_COUNT];
    let mut assigned: HashMap<(&str, u32), FactorId> = HashMap::with_capacity(assignments.len());
    for a in assignments {
        segment_counts[a.factor.index()] += 1;
        assigned.insert((a.case_id.as_str(), a.segment_index), a.factor);
    }
    let mut sc = [[0.0; FACTOR_COUNT]; FACTOR_COUNT];
    for e in entities {
        let i = assigned.get(&(e.case_id.as_str(), e.segment_index)).ok_or_else(|| {
            Error::Data(format!(
                "entity `{}` in unassigned segment {}#{}",
                e.surface, e.case_id, e.segment_index
            ))
        })?;
        sc[i.index()][e.factor.index()] += e.weight;
    }
    let n = n as f64;
    for row in &mut sc {
        for v in row {
            *v /= n;
        }
    }
    Ok(ScoreMatrix { sc, segment_counts })
}

fn positive_diff(a: f64, b: f64) -> f64 {
    (a - b).max(0.0)
}

/// R_i for one score row: the row's positive lead of entry `i` over the
/// others, relative to all positive pairwise leads in the row. A row without
/// any positive difference scores 0.
pub fn normalized_score(row: &[f64; FACTOR_COUNT], i: usize) -> f64 {
    let lead = |k: usize| -> f64 {
        (0..FACTOR_COUNT)
            .filter(|&j| j != k)
            .map(|j| positive_diff(row[k], row[j]))
            .sum()
    };
    let leads: [f64; FACTOR_COUNT] = std::array::from_fn(lead);
    let denominator: f64 = leads.iter().sum();
    if denominator > 0.0 {
        leads[i] / denominator
    } else {
        0.0
    }
}

pub fn normalized_scores(m: &ScoreMatrix) -> [f64; FACTOR_COUNT] {
    std::array::from_fn(|i| normalized_score(&m.sc[i], i))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderIds {
    pub encoder: String,
    pub generator: String,
    pub extractor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "R")]
    pub r: [f64; FACTOR_COUNT],
    pub mean: f64,
    /// Sample standard deviation over the six scores.
    pub stdev: f64,
    pub provider_ids: ProviderIds,
}

impl EvalReport {
    pub fn new(r: [f64; FACTOR_COUNT], provider_ids: ProviderIds) -> Self {
        let n = FACTOR_COUNT as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            r,
            mean,
            stdev: var.sqrt(),
            provider_ids,
        }
    }

    /// Six scores then `mean ± stdev`, three decimals, pipe-separated.
    pub fn table_row(&self) -> String {
        let mut cells: Vec<String> = self.r.iter().map(|v| format_score(*v)).collect();
        cells.push(format!("{} ± {}", format_score(self.mean), format_score(self.stdev)));
        cells.join(" | ")
    }
}

/// Three decimals without the leading zero, e.g. `.515`.
pub fn format_score(v: f64) -> String {
    let s = format!("{v:.3}");
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => match s.strip_prefix("-0.") {
            Some(rest) => format!("-.{rest}"),
            None => s,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(i: usize) -> FactorId {
        FactorId::new(i).unwrap()
    }

    fn anchors() -> AnchorSet {
        AnchorSet::from_json(
            r#"{
                "FM": [{"phrase": "investor losses"}, {"phrase": "bribery", "weight": 0.5}],
                "RC": [{"phrase": "unregistered securities"}, {"phrase": "unregistered"}],
                "PM": [{"phrase": "misleading statements"}],
                "SO": [{"phrase": "million dollars"}],
                "TR": [{"phrase": "smart contract"}],
                "5": [{"label": "chief executive", "weight": 0.8}]
            }"#,
            "test",
        )
        .unwrap()
    }

    #[test]
    fn anchor_config_validation() {
        assert!(matches!(AnchorSet::from_json("{}", "x"), Err(Error::Config(_))));
        assert!(matches!(
            AnchorSet::from_json(r#"{"FM": [{"label": "a"}]}"#, "x"),
            Err(Error::Config(_))
        ));
        let bad_weight = r#"{"0":[{"label":"a","weight":1.5}],"1":[{"label":"b"}],"2":[{"label":"c"}],"3":[{"label":"d"}],"4":[{"label":"e"}],"5":[{"label":"f"}]}"#;
        assert!(matches!(AnchorSet::from_json(bad_weight, "x"), Err(Error::Config(_))));
        assert!(matches!(AnchorSet::from_json("[", "x"), Err(Error::Parse { .. })));
        assert_eq!(anchors().lookup("Chief Executive"), Some((f(5), 0.8)));
    }

    #[test]
    fn lexicon_hits() {
        let a = anchors();
        let spans = LexiconMatcher.extract("unregistered securities offering", &a).unwrap();
        assert_eq!(
            spans,
            vec![ExtractedSpan {
                surface: "unregistered securities".into(),
                factor: f(1),
                weight: 1.0
            }]
        );
        assert!(LexiconMatcher.extract("nothing relevant here", &a).unwrap().is_empty());
        let spans = LexiconMatcher
            .extract("The Chief Executive paid bribery, causing investor losses.", &a)
            .unwrap();
        let got: Vec<_> = spans.iter().map(|s| (s.factor.index(), s.weight)).collect();
        assert_eq!(got, vec![(5, 0.8), (0, 0.5), (0, 1.0)]);
    }

    #[test]
    fn planted_terms_are_recovered_as_a_multiset() {
        use crate::corpus::{parse_complaint, CaseMeta};
        let a = anchors();
        let vocab = [
            (0, "investor losses"),
            (1, "unregistered securities"),
            (2, "misleading statements"),
            (3, "million dollars"),
            (4, "smart contract"),
            (5, "chief executive"),
        ];
        let mut planted = Vec::new();
        let mut raw = String::new();
        for k in 0..10usize {
            let mut body = String::from("filler words");
            for m in 0..(k % 3 + 1) {
                let (fac, phrase) = vocab[(k + 2 * m) % 6];
                body.push_str(&format!(" then {phrase} again"));
                planted.push((k as u32 + 1, fac));
            }
            raw.push_str(&format!("{}. {body}\n", k + 1));
        }
        let meta = CaseMeta {
            case_id: "p".into(),
            title: String::new(),
            date_filed: chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            category: None,
        };
        let c = parse_complaint(&raw, &meta).unwrap();
        let assignments: Vec<_> = (1..=10)
            .map(|i| FactorAssignment {
                case_id: "p".into(),
                segment_index: i,
                factor: f(0),
                distance: 0.0,
                runner_up_margin: 0.0,
            })
            .collect();
        let ents = extract_anchored_entities(&[c], &assignments, &LexiconMatcher, &a).unwrap();
        let mut got: Vec<_> = ents.iter().map(|e| (e.segment_index, e.factor.index())).collect();
        got.sort();
        planted.sort();
        assert_eq!(got, planted);
    }

    #[test]
    fn remote_ner_maps_labels() {
        use crate::http::testing::{serve, Exchange};
        let body = r#"{"entities":[{"text":"unregistered","label":"unregistered securities","score":0.9},{"text":"x","label":"other","score":0.99}]}"#;
        let (url, seen) = serve(vec![Exchange {
            status: 200,
            body: body.into(),
        }]);
        let settings = RemoteSettings {
            endpoint: Some(url),
            ..Default::default()
        };
        let ner = RemoteNerExtractor::new("gliner", 0.5, &settings).unwrap();
        let spans = ner.extract("some text", &anchors()).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].factor, spans[0].weight), (f(1), 0.9));
        let req: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(req["labels"].as_array().unwrap().len(), 8);
    }

    fn entity(seg: u32, factor: usize, weight: f64) -> AnchoredEntity {
        AnchoredEntity {
            surface: "x".into(),
            factor: f(factor),
            weight,
            case_id: "c".into(),
            segment_index: seg,
        }
    }

    fn assigned(seg: u32, factor: usize) -> FactorAssignment {
        FactorAssignment {
            case_id: "c".into(),
            segment_index: seg,
            factor: f(factor),
            distance: 0.0,
            runner_up_margin: 0.0,
        }
    }

    #[test]
    fn score_matrix_examples() {
        let a = vec![assigned(1, 0), assigned(2, 3), assigned(3, 3)];
        let zero = score_matrix(&[], &a, 6).unwrap();
        assert_eq!(zero.sc, [[0.0; 6]; 6]);
        assert_eq!(zero.segment_counts, [1, 0, 0, 2, 0, 0]);

        let m = score_matrix(&[entity(1, 0, 0.9)], &a, 6).unwrap();
        assert!((m.sc[0][0] - 0.15).abs() < 1e-15);

        let ents = [entity(2, 3, 0.6), entity(3, 3, 0.9), entity(3, 1, 0.3), entity(1, 5, 0.45)];
        let m = score_matrix(&ents, &a, 6).unwrap();
        assert!((m.sc[3][3] - 1.5 / 6.0).abs() < 1e-15);
        assert!((m.sc[3][1] - 0.05).abs() < 1e-15);
        assert!((m.sc[0][5] - 0.075).abs() < 1e-15);

        assert!(matches!(score_matrix(&[entity(9, 0, 1.0)], &a, 6), Err(Error::Data(_))));
    }

    fn row_matrix(i: usize, row: [f64; 6]) -> ScoreMatrix {
        let mut sc = [[0.0; 6]; 6];
        sc[i] = row;
        ScoreMatrix {
            sc,
            segment_counts: [0; 6],
        }
    }

    #[test]
    fn normalized_score_examples() {
        assert_eq!(normalized_scores(&row_matrix(2, [0.1, 0.1, 0.7, 0.1, 0.1, 0.1]))[2], 1.0);
        assert_eq!(normalized_scores(&row_matrix(4, [0.3; 6]))[4], 0.0);
        let r = normalized_scores(&row_matrix(0, [0.4, 0.2, 0.1, 0.1, 0.1, 0.1]))[0];
        assert!((r - 1.4 / 1.8).abs() < 1e-12);
    }

    fn brute(row: &[f64; 6], i: usize) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..6 {
            for j in 0..6 {
                if k != j && row[k] > row[j] {
                    den += row[k] - row[j];
                    if k == i {
                        num += row[k] - row[j];
                    }
                }
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(row in prop::array::uniform6(0.0f64..2.0), i in 0usize..6) {
            let r = normalized_score(&row, i);
            prop_assert!((r - brute(&row, i)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn row_scaling_is_invisible(row in prop::array::uniform6(0.0f64..2.0), i in 0usize..6, k in 0.01f64..100.0) {
            let scaled = row.map(|v| v * k);
            prop_assert!((normalized_score(&row, i) - normalized_score(&scaled, i)).abs() <= 1e-9);
        }

        #[test]
        fn raising_the_diagonal_never_hurts(row in prop::array::uniform6(0.0f64..2.0), i in 0usize..6, bump in 0.0f64..1.0) {
            let mut up = row;
            up[i] += bump;
            prop_assert!(normalized_score(&up, i) >= normalized_score(&row, i) - 1e-12);
        }
    }

    #[test]
    fn report_uses_sample_stdev() {
        let ids = ProviderIds {
            encoder: "e".into(),
            generator: "g".into(),
            extractor: "x".into(),
        };
        for (row, mean, sd) in [
            ([0.383, 0.694, 0.437, 0.502, 0.649, 0.425], ".515", ".128"),
            ([0.361, 0.504, 0.478, 0.436, 0.577, 0.387], ".457", ".080"),
            ([0.338, 0.679, 0.376, 0.353, 0.561, 0.457], ".461", ".135"),
        ] {
            let r = EvalReport::new(row, ids.clone());
            assert_eq!(format_score(r.mean), mean);
            assert_eq!(format_score(r.stdev), sd);
        }
        let r = EvalReport::new([0.383, 0.694, 0.437, 0.502, 0.649, 0.425], ids);
        assert!(r.table_row().ends_with(".515 ± .128"));
    }
}
