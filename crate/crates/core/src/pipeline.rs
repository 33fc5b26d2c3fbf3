//! End-to-end orchestration: configuration, provider construction, stage
//! execution with content-hash markers, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{align_cases, category_report, AlignmentOptions, CoefficientSurface};
use crate::anchored::{
    extract_anchored_entities, normalized_scores, score_matrix, AnchorSet, EntityExtractor, EvalReport,
    LexiconMatcher, ProviderIds, RemoteNerExtractor,
};
use crate::corpus::{corpus_stats, ingest_dir, read_corpus, write_corpus, ActCatalog, Complaint};
use crate::embedding::{DistanceKind, Embedder, ProviderConfig};
use crate::error::{Error, Result};
use crate::http::RemoteSettings;
use crate::report::{
    load_descriptions, render_category_table, render_trend_table, write_categories, write_json_pretty,
    write_scores, ActDescriptions, EvalArtifact,
};
use crate::text;
use crate::thematic::{
    case_profiles, factor_proportions, load_seed_bank, map_segments, read_jsonl, write_jsonl, CaseProfile,
    FactorAssignment, RemoteGenerator, SeedBank, SeedGenerator, TemplateGenerator, FACTOR_COUNT,
};
use crate::trend::{fit_trends, read_cells, write_cells, TrendOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Template,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub model_id: String,
    #[serde(default, flatten)]
    pub remote: RemoteSettings,
}

impl GeneratorConfig {
    pub fn build(&self) -> Result<Box<dyn SeedGenerator>> {
        Ok(match self.kind {
            GeneratorKind::Template => Box::new(TemplateGenerator),
            GeneratorKind::Remote => Box::new(RemoteGenerator::new(&self.model_id, &self.remote)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    Lexicon,
    Remote,
}

impl std::str::FromStr for ExtractorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lexicon" => Ok(Self::Lexicon),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown extractor kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    #[serde(default = "default_extractor_model")]
    pub model_id: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default, flatten)]
    pub remote: RemoteSettings,
}

fn default_extractor_model() -> String {
    "lexicon".into()
}

fn default_threshold() -> f64 {
    0.5
}

impl ExtractorConfig {
    pub fn lexicon() -> Self {
        Self {
            kind: ExtractorKind::Lexicon,
            model_id: default_extractor_model(),
            threshold: default_threshold(),
            remote: RemoteSettings::default(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn EntityExtractor>> {
        Ok(match self.kind {
            ExtractorKind::Lexicon => Box::new(LexiconMatcher),
            ExtractorKind::Remote => Box::new(RemoteNerExtractor::new(&self.model_id, self.threshold, &self.remote)?),
        })
    }
}

fn default_seed_count() -> usize {
    100
}

fn default_seed_length() -> usize {
    106
}

fn default_normalizer() -> usize {
    FACTOR_COUNT
}

/// Pipeline configuration file. Relative paths are resolved against the
/// directory containing the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory with `metadata.jsonl` and plain-text complaints.
    #[serde(default)]
    pub input_dir: Option<PathBuf>,
    /// Already-ingested corpus file, used instead of `input_dir`.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub act_aliases: BTreeMap<String, String>,
    pub output_dir: PathBuf,
    pub encoder: ProviderConfig,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub extractor: Option<ExtractorConfig>,
    pub seed_bank: PathBuf,
    #[serde(default)]
    pub anchors: Option<PathBuf>,
    #[serde(default)]
    pub act_descriptions: Option<PathBuf>,
    #[serde(default)]
    pub distance: DistanceKind,
    #[serde(default = "default_seed_count")]
    pub seed_count: usize,
    #[serde(default = "default_seed_length")]
    pub seed_length: usize,
    #[serde(default = "default_normalizer")]
    pub score_normalizer: usize,
    #[serde(default)]
    pub trend: TrendOptions,
    #[serde(default)]
    pub alignment: AlignmentOptions,
    #[serde(default)]
    pub excluded_acts: Vec<String>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_json(json: &str, base: &Path, origin: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(json).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        for p in [&mut cfg.input_dir, &mut cfg.corpus, &mut cfg.anchors, &mut cfg.act_descriptions]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut cfg.output_dir);
        resolve(base, &mut cfg.seed_bank);
        for p in [&mut cfg.encoder.vectors_path, &mut cfg.encoder.cache_dir].into_iter().flatten() {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&json, base, &path.display().to_string())
    }

    /// Checks that referenced inputs exist and settings are coherent.
    pub fn validate(&self) -> Result<()> {
        match (&self.input_dir, &self.corpus) {
            (Some(_), Some(_)) => return Err(Error::Config("set only one of input_dir and corpus".into())),
            (None, None) => return Err(Error::Config("one of input_dir or corpus is required".into())),
            _ => {}
        }
        let must_exist = |what: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} not found: {}", p.display())))
            }
        };
        if let Some(dir) = &self.input_dir {
            must_exist("input directory", dir)?;
        }
        if let Some(c) = &self.corpus {
            must_exist("corpus file", c)?;
        }
        must_exist("seed bank", &self.seed_bank)?;
        if let Some(a) = &self.anchors {
            must_exist("anchor file", a)?;
        }
        if let Some(d) = &self.act_descriptions {
            must_exist("act descriptions", d)?;
        }
        if let Some(v) = &self.encoder.vectors_path {
            must_exist("vector file", v)?;
        }
        self.encoder.validate()?;
        self.trend.thresholds.validate()?;
        if self.seed_length == 0 || self.seed_count == 0 || self.score_normalizer == 0 {
            return Err(Error::Config("seed_count, seed_length and score_normalizer must be positive".into()));
        }
        if self.extractor.is_some() != self.anchors.is_some() {
            return Err(Error::Config("evaluation needs both `extractor` and `anchors`".into()));
        }
        Ok(())
    }

    pub fn catalog(&self) -> ActCatalog {
        let mut catalog = ActCatalog::default();
        catalog.extend(self.act_aliases.clone());
        catalog
    }

    /// Encoder settings with the cache placed under the output directory
    /// unless configured elsewhere.
    pub fn encoder_config(&self) -> ProviderConfig {
        let mut enc = self.encoder.clone();
        if enc.cache_dir.is_none() {
            enc.cache_dir = Some(self.output_dir.join("cache"));
        }
        enc
    }

    pub fn provider_ids(&self) -> ProviderIds {
        ProviderIds {
            encoder: self.encoder.model_id.clone(),
            generator: self
                .generator
                .as_ref()
                .map_or_else(|| "unspecified".to_string(), |g| g.model_id.clone()),
            extractor: self.extractor.as_ref().map_or_else(|| "none".to_string(), |x| x.model_id.clone()),
        }
    }
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const PROPORTIONS_FILE: &str = "props.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const CELLS_FILE: &str = "cells.csv";
pub const FITS_FILE: &str = "fits.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const CATEGORIES_FILE: &str = "categories.csv";
pub const TABLE3_FILE: &str = "table3.md";
pub const TABLE4_FILE: &str = "table4.md";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STAGE_DIR: &str = "stages";

/// Record written after a stage completes, used to skip it on reruns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: String,
    pub input_hash: String,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(text::sha256_hex(&bytes))
}

/// Hash of every regular file below `dir`, keyed by relative path.
fn tree_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut acc = String::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        acc.push_str(&format!("{rel}\0{}\n", file_hash(&f)?));
    }
    Ok(text::sha256_hex(acc.as_bytes()))
}

/// Runs stages under `out`, skipping any whose marker matches its inputs
/// and whose recorded outputs are intact.
pub struct StageRunner {
    out: PathBuf,
    force: bool,
}

impl StageRunner {
    pub fn new(out: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(out.join(STAGE_DIR)).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            force,
        })
    }

    fn marker_path(&self, stage: &str) -> PathBuf {
        self.out.join(STAGE_DIR).join(format!("{stage}.json"))
    }

    /// `inputs` are (name, hash) pairs describing everything the stage reads.
    pub fn run(
        &self,
        stage: &str,
        inputs: &[(&str, String)],
        outputs: &[&str],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<StageStatus> {
        let mut acc = format!("{stage}\n");
        for (name, hash) in inputs {
            acc.push_str(&format!("{name}\0{hash}\n"));
        }
        let input_hash = text::sha256_hex(acc.as_bytes());
        let marker_path = self.marker_path(stage);
        if !self.force {
            if let Ok(json) = fs::read_to_string(&marker_path) {
                if let Ok(marker) = serde_json::from_str::<StageMarker>(&json) {
                    let intact = marker.input_hash == input_hash
                        && outputs.len() == marker.outputs.len()
                        && outputs.iter().all(|o| {
                            marker.outputs.get(*o).is_some_and(|h| file_hash(&self.out.join(o)).ok().as_ref() == Some(h))
                        });
                    if intact {
                        log::info!("stage {stage}: up to date");
                        return Ok(StageStatus::Skipped);
                    }
                }
            }
        }
        let _ = fs::remove_file(&marker_path);
        log::info!("stage {stage}: running");
        body()?;
        let mut recorded = BTreeMap::new();
        for o in outputs {
            recorded.insert(o.to_string(), file_hash(&self.out.join(o))?);
        }
        write_json_pretty(
            &marker_path,
            &StageMarker {
                stage: stage.to_string(),
                input_hash,
                outputs: recorded,
            },
        )?;
        Ok(StageStatus::Ran)
    }
}

/// Everything needed to reproduce a run's reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub inputs: BTreeMap<String, String>,
    pub providers: ProviderIds,
    pub outputs: BTreeMap<String, String>,
}

pub fn load_corpus(cfg: &PipelineConfig) -> Result<Vec<Complaint>> {
    match (&cfg.input_dir, &cfg.corpus) {
        (Some(dir), _) => ingest_dir(dir, &cfg.catalog()),
        (None, Some(path)) => read_corpus(path),
        (None, None) => Err(Error::Config("no corpus source configured".into())),
    }
}

/// Loads the seed bank and embeds it with `embedder`.
pub fn embedded_seed_bank(path: &Path, length_limit: usize, embedder: &Embedder) -> Result<SeedBank> {
    let mut bank = load_seed_bank(path, length_limit)?;
    bank.embed(embedder)?;
    Ok(bank)
}

pub fn map_corpus(
    corpus: &[Complaint],
    bank: &SeedBank,
    embedder: &Embedder,
    distance: DistanceKind,
) -> Result<(Vec<FactorAssignment>, Vec<CaseProfile>)> {
    let assignments = map_segments(corpus, bank, embedder, distance)?;
    let proportions = factor_proportions(&assignments, corpus)?;
    Ok((assignments, case_profiles(&proportions, corpus)))
}

pub fn evaluate(
    corpus: &[Complaint],
    assignments: &[FactorAssignment],
    anchors: &AnchorSet,
    extractor: &dyn EntityExtractor,
    normalizer: usize,
    ids: ProviderIds,
) -> Result<EvalArtifact> {
    let entities = extract_anchored_entities(corpus, assignments, extractor, anchors)?;
    let scores = score_matrix(&entities, assignments, normalizer)?;
    let report = EvalReport::new(normalized_scores(&scores), ids);
    Ok(EvalArtifact {
        table_row: report.table_row(),
        report,
        scores,
        entity_count: entities.len(),
    })
}

fn config_inputs(cfg: &PipelineConfig, config_hash: &str) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), config_hash.to_string());
    if let Some(dir) = &cfg.input_dir {
        inputs.insert("input_dir".to_string(), tree_hash(dir)?);
    }
    if let Some(c) = &cfg.corpus {
        inputs.insert("corpus".to_string(), file_hash(c)?);
    }
    inputs.insert("seed_bank".to_string(), file_hash(&cfg.seed_bank)?);
    if let Some(a) = &cfg.anchors {
        inputs.insert("anchors".to_string(), file_hash(a)?);
    }
    if let Some(d) = &cfg.act_descriptions {
        inputs.insert("act_descriptions".to_string(), file_hash(d)?);
    }
    if let Some(v) = &cfg.encoder.vectors_path {
        inputs.insert("vectors".to_string(), file_hash(v)?);
    }
    Ok(inputs)
}

fn settings_hash<T: Serialize>(value: &T) -> String {
    text::sha256_hex(serde_json::to_string(value).expect("settings serialize").as_bytes())
}

/// Provider-relevant encoder settings, without paths that vary by machine.
fn encoder_fingerprint(cfg: &PipelineConfig) -> String {
    let e = &cfg.encoder;
    settings_hash(&(&e.kind, &e.model_id, e.dim, e.max_words, &e.remote.endpoint, cfg.seed_length, cfg.distance))
}

/// Executes ingest → embed → map → proportions → eval → fit → align →
/// report under `cfg.output_dir` and writes `manifest.json`.
///
/// `config_hash` identifies the configuration bytes; the CLI passes the hash
/// of the config file.
pub fn run_pipeline(cfg: &PipelineConfig, config_hash: &str, force: bool) -> Result<RunManifest> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let runner = StageRunner::new(&out, force)?;
    let inputs = config_inputs(cfg, config_hash)?;
    let at = |name: &str| out.join(name);
    let hash_of = |name: &str| file_hash(&out.join(name));

    let corpus_source = inputs
        .get("input_dir")
        .or_else(|| inputs.get("corpus"))
        .cloned()
        .unwrap_or_default();
    runner.run(
        "ingest",
        &[("source", corpus_source), ("aliases", settings_hash(&cfg.act_aliases))],
        &[CORPUS_FILE, STATS_FILE],
        || {
            let corpus = load_corpus(cfg)?;
            write_corpus(&at(CORPUS_FILE), &corpus)?;
            write_json_pretty(&at(STATS_FILE), &corpus_stats(&corpus)?)
        },
    )?;

    let enc_cfg = cfg.encoder_config();
    let embedder = Embedder::from_config(&enc_cfg)?;
    let seed_hash = inputs["seed_bank"].clone();
    let enc_hash = encoder_fingerprint(cfg);

    runner.run(
        "embed",
        &[("corpus", hash_of(CORPUS_FILE)?), ("seeds", seed_hash.clone()), ("encoder", enc_hash.clone())],
        &[],
        || {
            let corpus = read_corpus(&at(CORPUS_FILE))?;
            let mut texts: Vec<&str> = corpus.iter().flat_map(|c| c.segments.iter().map(|s| s.text.as_str())).collect();
            let bank = load_seed_bank(&cfg.seed_bank, cfg.seed_length)?;
            texts.extend(bank.seeds.iter().map(|s| s.text.as_str()));
            embedder.embed_texts(&texts)?;
            Ok(())
        },
    )?;

    runner.run(
        "map",
        &[("corpus", hash_of(CORPUS_FILE)?), ("seeds", seed_hash), ("encoder", enc_hash)],
        &[ASSIGNMENTS_FILE],
        || {
            let corpus = read_corpus(&at(CORPUS_FILE))?;
            let bank = embedded_seed_bank(&cfg.seed_bank, cfg.seed_length, &embedder)?;
            let assignments = map_segments(&corpus, &bank, &embedder, cfg.distance)?;
            write_jsonl(&at(ASSIGNMENTS_FILE), &assignments)
        },
    )?;

    runner.run(
        "proportions",
        &[("corpus", hash_of(CORPUS_FILE)?), ("assignments", hash_of(ASSIGNMENTS_FILE)?)],
        &[PROPORTIONS_FILE],
        || {
            let corpus = read_corpus(&at(CORPUS_FILE))?;
            let assignments: Vec<FactorAssignment> = read_jsonl(&at(ASSIGNMENTS_FILE))?;
            let proportions = factor_proportions(&assignments, &corpus)?;
            write_jsonl(&at(PROPORTIONS_FILE), &case_profiles(&proportions, &corpus))
        },
    )?;

    let providers = cfg.provider_ids();
    let mut outputs = vec![CORPUS_FILE, STATS_FILE, ASSIGNMENTS_FILE, PROPORTIONS_FILE];
    if let (Some(anchor_path), Some(extractor_cfg)) = (&cfg.anchors, &cfg.extractor) {
        runner.run(
            "eval",
            &[
                ("corpus", hash_of(CORPUS_FILE)?),
                ("assignments", hash_of(ASSIGNMENTS_FILE)?),
                ("anchors", inputs["anchors"].clone()),
                ("settings", settings_hash(&(extractor_cfg, cfg.score_normalizer, &providers))),
            ],
            &[EVAL_FILE],
            || {
                let corpus = read_corpus(&at(CORPUS_FILE))?;
                let assignments: Vec<FactorAssignment> = read_jsonl(&at(ASSIGNMENTS_FILE))?;
                let anchors = AnchorSet::load(anchor_path)?;
                let extractor = extractor_cfg.build()?;
                let artifact = evaluate(
                    &corpus,
                    &assignments,
                    &anchors,
                    extractor.as_ref(),
                    cfg.score_normalizer,
                    providers.clone(),
                )?;
                write_json_pretty(&at(EVAL_FILE), &artifact)
            },
        )?;
        outputs.push(EVAL_FILE);
    }

    runner.run(
        "fit",
        &[("proportions", hash_of(PROPORTIONS_FILE)?), ("trend", settings_hash(&cfg.trend))],
        &[CELLS_FILE, FITS_FILE],
        || {
            let profiles: Vec<CaseProfile> = read_jsonl(&at(PROPORTIONS_FILE))?;
            let surface = fit_trends(&profiles, &cfg.trend)?;
            write_cells(&at(CELLS_FILE), &surface.cells)?;
            write_jsonl(&at(FITS_FILE), &surface.fits)
        },
    )?;

    let align_inputs = [
        ("cells", hash_of(CELLS_FILE)?),
        ("proportions", hash_of(PROPORTIONS_FILE)?),
        ("alignment", settings_hash(&cfg.alignment)),
    ];
    runner.run("align", &align_inputs, &[SCORES_FILE, CATEGORIES_FILE], || {
        let (alignment, reports) = align_from_files(&at(CELLS_FILE), &at(PROPORTIONS_FILE), &cfg.alignment)?;
        if !alignment.excluded.is_empty() {
            log::warn!("{} cases excluded from alignment; see {SCORES_FILE}", alignment.excluded.len());
        }
        write_scores(&at(SCORES_FILE), &alignment)?;
        write_categories(&at(CATEGORIES_FILE), &reports)
    })?;

    let desc_hash = inputs.get("act_descriptions").cloned().unwrap_or_default();
    let mut report_inputs = align_inputs.to_vec();
    report_inputs.push(("descriptions", desc_hash));
    report_inputs.push(("excluded", settings_hash(&cfg.excluded_acts)));
    runner.run("report", &report_inputs, &[TABLE3_FILE, TABLE4_FILE], || {
        let cells = read_cells(&at(CELLS_FILE))?;
        fs::write(at(TABLE3_FILE), render_trend_table(&cells, &cfg.excluded_acts))
            .map_err(|e| Error::io(at(TABLE3_FILE), e))?;
        let (_, reports) = align_from_files(&at(CELLS_FILE), &at(PROPORTIONS_FILE), &cfg.alignment)?;
        let descriptions = match &cfg.act_descriptions {
            Some(p) => load_descriptions(p)?,
            None => ActDescriptions::new(),
        };
        fs::write(at(TABLE4_FILE), render_category_table(&reports, &descriptions))
            .map_err(|e| Error::io(at(TABLE4_FILE), e))
    })?;

    outputs.extend([CELLS_FILE, FITS_FILE, SCORES_FILE, CATEGORIES_FILE, TABLE3_FILE, TABLE4_FILE]);
    let mut output_hashes = BTreeMap::new();
    for o in outputs {
        output_hashes.insert(o.to_string(), hash_of(o)?);
    }
    let manifest = RunManifest {
        inputs,
        providers,
        outputs: output_hashes,
    };
    write_json_pretty(&at(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Scores every case in `props` against the surface in `cells` and
/// aggregates by category.
pub fn align_from_files(
    cells: &Path,
    props: &Path,
    opts: &AlignmentOptions,
) -> Result<(crate::alignment::Alignment, Vec<crate::alignment::CategoryReport>)> {
    let cells = read_cells(cells)?;
    let profiles: Vec<CaseProfile> = read_jsonl(props)?;
    let surface = CoefficientSurface::from_cells(&cells, opts);
    let alignment = align_cases(&profiles, &surface);
    let reports = category_report(&alignment.scores, &profiles, &surface, opts);
    Ok((alignment, reports))
}
