//! Thematic-factor mapping of enforcement complaints and per-Act trend
//! modelling.
//!
//! The stages are: [`corpus`] parsing, [`embedding`] of segments and seed
//! sentences, nearest-seed mapping in [`thematic`], anchored-term evaluation
//! in [`anchored`], logistic trend fits in [`trend`], per-case scores in
//! [`alignment`], and orchestration plus report writing in [`pipeline`] and
//! [`report`].

pub mod alignment;
pub mod anchored;
pub mod corpus;
pub mod embedding;
mod error;
mod http;
pub mod pipeline;
pub mod report;
pub mod text;
pub mod thematic;
pub mod trend;

pub use error::{Error, ErrorKind, ProviderError, Result};
pub use http::RemoteSettings;

pub use alignment::{AlignmentScore, CategoryReport, CoefficientSurface};
pub use anchored::{AnchorSet, AnchoredEntity, EvalReport, ScoreMatrix};
pub use corpus::{ActCatalog, ActCitation, CaseMeta, Complaint, CorpusStats, Segment};
pub use embedding::{DistanceKind, Embedder, EmbeddingVector, ProviderConfig, ProviderKind};
pub use thematic::{CaseProfile, FactorAssignment, FactorId, FactorProportions, SeedBank, FACTOR_COUNT};
pub use trend::{Category, CoefficientCell, GlmFit, PairRank, Thresholds, YearBucket};
