//! `lexmap` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use lexmap::alignment::AlignmentOptions;
use lexmap::anchored::AnchorSet;
use lexmap::corpus::{corpus_stats, ingest_dir, read_corpus, write_corpus, ActCatalog};
use lexmap::embedding::{DistanceKind, Embedder, ProviderConfig, ProviderKind};
use lexmap::pipeline::{
    align_from_files, embedded_seed_bank, evaluate, map_corpus, run_pipeline, ExtractorConfig, ExtractorKind,
    GeneratorConfig, GeneratorKind, PipelineConfig,
};
use lexmap::report::{load_descriptions, render_category_table, render_trend_table, write_categories, write_json_pretty, write_scores, ActDescriptions};
use lexmap::thematic::{generate_seeds, read_jsonl, write_jsonl, CaseProfile, FactorAssignment};
use lexmap::trend::{fit_trends, read_cells, write_cells, LogitOptions, Thresholds, TrendOptions};
use lexmap::{ErrorKind, RemoteSettings};

#[derive(Parser)]
#[command(name = "lexmap", version, about = "Map complaint segments to thematic factors and model enforcement trends")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a directory of complaints into a corpus file.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON object of extra Act-name aliases.
        #[arg(long)]
        aliases: Option<PathBuf>,
    },
    /// Print corpus statistics as JSON.
    Stats {
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a seed-sentence bank.
    Seeds {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 106)]
        length: usize,
        #[arg(long, value_enum, default_value = "template")]
        generator: GenKindArg,
        #[arg(long, default_value = "template")]
        model_id: String,
        #[command(flatten)]
        remote: RemoteArgs,
    },
    /// Embed corpus segments (and optionally seeds) into the vector cache.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Assign every segment to the factor of its nearest seed.
    Map {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-case factor proportions here.
        #[arg(long)]
        proportions: Option<PathBuf>,
        #[arg(long, default_value_t = 106)]
        seed_length: usize,
        #[arg(long, value_enum, default_value = "cosine")]
        distance: DistanceArg,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Score a mapping with anchored-term extraction.
    Eval {
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long, default_value = "lexicon")]
        extractor: ExtractorKind,
        #[arg(long, default_value = "lexicon")]
        extractor_model: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 6)]
        normalizer: usize,
        #[arg(long, default_value = "unspecified")]
        encoder_model: String,
        #[arg(long, default_value = "unspecified")]
        generator_model: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        remote: RemoteArgs,
    },
    /// Fit the per-Act, per-period trend models.
    Fit {
        #[arg(long)]
        proportions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_positives: usize,
        #[arg(long, default_value_t = 1e-6)]
        ridge: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value_t = 1.0)]
        high: f64,
        #[arg(long, default_value_t = 0.5)]
        moderate: f64,
        /// Write the Markdown trend table here.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Act left out of the trend table (repeatable).
        #[arg(long = "exclude")]
        excluded: Vec<String>,
    },
    /// Compute per-case alignment scores and category aggregates.
    Align {
        #[arg(long)]
        cells: PathBuf,
        #[arg(long)]
        proportions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        standardized: bool,
        #[arg(long)]
        clamp_negative: bool,
        /// Write the Markdown category table here.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        descriptions: Option<PathBuf>,
    },
    /// Re-render the Markdown reports in a run directory.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the configured output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Run the whole pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ignore stage markers and recompute everything.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GenKindArg {
    Template,
    Remote,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DistanceArg {
    Cosine,
    Euclidean,
}

impl From<DistanceArg> for DistanceKind {
    fn from(d: DistanceArg) -> Self {
        match d {
            DistanceArg::Cosine => DistanceKind::Cosine,
            DistanceArg::Euclidean => DistanceKind::Euclidean,
        }
    }
}

#[derive(Args)]
struct RemoteArgs {
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
}

impl RemoteArgs {
    fn settings(&self) -> RemoteSettings {
        RemoteSettings {
            endpoint: self.endpoint.clone(),
            api_key_env: self.api_key_env.clone(),
            ..RemoteSettings::default()
        }
    }
}

#[derive(Args)]
struct EncoderArgs {
    /// Take encoder settings from this pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "deterministic-test")]
    provider: ProviderKind,
    #[arg(long, default_value = "hashing")]
    model_id: String,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    remote: RemoteArgs,
}

impl EncoderArgs {
    fn provider_config(&self) -> Result<ProviderConfig> {
        if let Some(path) = &self.config {
            let cfg = PipelineConfig::load(path)?;
            let mut enc = cfg.encoder;
            if self.cache_dir.is_some() {
                enc.cache_dir = self.cache_dir.clone();
            }
            return Ok(enc);
        }
        let mut enc = ProviderConfig::deterministic(&self.model_id, self.dim);
        enc.kind = self.provider;
        enc.vectors_path = self.vectors.clone();
        enc.cache_dir = self.cache_dir.clone();
        enc.remote = self.remote.settings();
        Ok(enc)
    }

    fn embedder(&self) -> Result<Embedder> {
        Ok(Embedder::from_config(&self.provider_config()?)?)
    }
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, out, aliases } => {
            let mut catalog = ActCatalog::default();
            if let Some(path) = aliases {
                let json = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let extra: std::collections::BTreeMap<String, String> = serde_json::from_str(&json)
                    .map_err(|e| lexmap::Error::Config(format!("{}: {e}", path.display())))?;
                catalog.extend(extra);
            }
            let corpus = ingest_dir(&input, &catalog)?;
            write_corpus(&out, &corpus)?;
            log::info!("wrote {} complaints to {}", corpus.len(), out.display());
        }
        Command::Stats { corpus, out } => {
            let stats = corpus_stats(&read_corpus(&corpus)?)?;
            match out {
                Some(path) => write_json_pretty(&path, &stats)?,
                None => println!("{}", serde_json::to_string_pretty(&stats)?),
            }
        }
        Command::Seeds {
            out,
            count,
            length,
            generator,
            model_id,
            remote,
        } => {
            let cfg = GeneratorConfig {
                kind: match generator {
                    GenKindArg::Template => GeneratorKind::Template,
                    GenKindArg::Remote => GeneratorKind::Remote,
                },
                model_id,
                remote: remote.settings(),
            };
            let bank = generate_seeds(cfg.build()?.as_ref(), count, length)?;
            bank.save(&out)?;
            log::info!("wrote {} seeds to {}", bank.seeds.len(), out.display());
        }
        Command::Embed { corpus, seeds, encoder } => {
            let embedder = encoder.embedder()?;
            let corpus = read_corpus(&corpus)?;
            let mut texts: Vec<String> = corpus
                .iter()
                .flat_map(|c| c.segments.iter().map(|s| s.text.clone()))
                .collect();
            if let Some(path) = seeds {
                let bank = lexmap::thematic::load_seed_bank(&path, usize::MAX)?;
                texts.extend(bank.seeds.into_iter().map(|s| s.text));
            }
            embedder.embed_texts(&texts)?;
            println!("embedded {} texts with {}", texts.len(), embedder.model_id());
        }
        Command::Map {
            corpus,
            seeds,
            out,
            proportions,
            seed_length,
            distance,
            encoder,
        } => {
            let embedder = encoder.embedder()?;
            let corpus = read_corpus(&corpus)?;
            let bank = embedded_seed_bank(&seeds, seed_length, &embedder)?;
            let (assignments, profiles) = map_corpus(&corpus, &bank, &embedder, distance.into())?;
            write_jsonl(&out, &assignments)?;
            if let Some(path) = proportions {
                write_jsonl(&path, &profiles)?;
            }
        }
        Command::Eval {
            assignments,
            corpus,
            anchors,
            extractor,
            extractor_model,
            threshold,
            normalizer,
            encoder_model,
            generator_model,
            out,
            remote,
        } => {
            let cfg = ExtractorConfig {
                kind: extractor,
                model_id: extractor_model,
                threshold,
                remote: remote.settings(),
            };
            let ids = lexmap::anchored::ProviderIds {
                encoder: encoder_model,
                generator: generator_model,
                extractor: cfg.model_id.clone(),
            };
            let corpus = read_corpus(&corpus)?;
            let assignments: Vec<FactorAssignment> = read_jsonl(&assignments)?;
            let anchors = AnchorSet::load(&anchors)?;
            let artifact = evaluate(&corpus, &assignments, &anchors, cfg.build()?.as_ref(), normalizer, ids)?;
            match out {
                Some(path) => write_json_pretty(&path, &artifact)?,
                None => println!("{}", serde_json::to_string_pretty(&artifact.report)?),
            }
            println!("{}", artifact.table_row);
        }
        Command::Fit {
            proportions,
            out,
            min_positives,
            ridge,
            tol,
            max_iter,
            high,
            moderate,
            table,
            excluded,
        } => {
            let opts = TrendOptions {
                logit: LogitOptions {
                    tol,
                    max_iter,
                    ridge,
                    ..LogitOptions::default()
                },
                min_positives,
                thresholds: Thresholds { high, moderate },
            };
            let profiles: Vec<CaseProfile> = read_jsonl(&proportions)?;
            let surface = fit_trends(&profiles, &opts)?;
            write_cells(&out, &surface.cells)?;
            if let Some(path) = table {
                write_text(&path, &render_trend_table(&surface.cells, &excluded))?;
            }
            log::info!("fitted {} models", surface.fits.len());
        }
        Command::Align {
            cells,
            proportions,
            out,
            scores,
            standardized,
            clamp_negative,
            table,
            descriptions,
        } => {
            let opts = AlignmentOptions {
                standardized,
                clamp_negative,
                ..AlignmentOptions::default()
            };
            let (alignment, reports) = align_from_files(&cells, &proportions, &opts)?;
            if !alignment.excluded.is_empty() {
                log::warn!("{} cases excluded from alignment", alignment.excluded.len());
            }
            write_categories(&out, &reports)?;
            if let Some(path) = scores {
                write_scores(&path, &alignment)?;
            }
            if let Some(path) = table {
                let descriptions = match descriptions {
                    Some(p) => load_descriptions(&p)?,
                    None => ActDescriptions::new(),
                };
                write_text(&path, &render_category_table(&reports, &descriptions))?;
            }
        }
        Command::Report { config, dir } => {
            let cfg = PipelineConfig::load(&config)?;
            let dir = dir.unwrap_or(cfg.output_dir.clone());
            let cells = read_cells(&dir.join(lexmap::pipeline::CELLS_FILE))?;
            write_text(
                &dir.join(lexmap::pipeline::TABLE3_FILE),
                &render_trend_table(&cells, &cfg.excluded_acts),
            )?;
            let (_, reports) = align_from_files(
                &dir.join(lexmap::pipeline::CELLS_FILE),
                &dir.join(lexmap::pipeline::PROPORTIONS_FILE),
                &cfg.alignment,
            )?;
            let descriptions = match &cfg.act_descriptions {
                Some(p) => load_descriptions(p)?,
                None => ActDescriptions::new(),
            };
            write_text(
                &dir.join(lexmap::pipeline::TABLE4_FILE),
                &render_category_table(&reports, &descriptions),
            )?;
        }
        Command::Run { config, out, force } => {
            let bytes = fs::read(&config).map_err(|e| lexmap::Error::Config(format!("{}: {e}", config.display())))?;
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let manifest = run_pipeline(&cfg, &lexmap::text::sha256_hex(&bytes), force)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<lexmap::Error>().map(lexmap::Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Provider) => 3,
        Some(ErrorKind::Data) | None => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
