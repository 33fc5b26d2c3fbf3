//! Text embedding providers, the on-disk vector cache and distance functions.
//!
//! Every provider produces `f32` vectors of a fixed dimension. Vectors are
//! cached per model under the SHA-256 of the text that was actually sent to
//! the provider, so a warm run returns bit-identical vectors.
//!
//! Cache file layout (little-endian):
//!
//! ```text
//! b"LXVC" | version: u8 | header_len: u32 | header JSON {"model_id", "dim"}
//! repeated: sha256(text): [u8; 32] | dim x f32
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::{JsonClient, RemoteSettings};
use crate::text;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("embedding vector has no components".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding vector has non-finite components".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn scaled(&self, k: f32) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * k).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    RemoteApi,
    PrecomputedFile,
    DeterministicTest,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "remote-api" | "remote" => Ok(Self::RemoteApi),
            "precomputed-file" | "precomputed" => Ok(Self::PrecomputedFile),
            "deterministic-test" | "test" => Ok(Self::DeterministicTest),
            other => Err(format!("unknown provider kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub model_id: String,
    pub dim: usize,
    #[serde(default, flatten)]
    pub remote: RemoteSettings,
    /// JSONL of `{"text", "vector"}` records for the precomputed-file provider.
    #[serde(default)]
    pub vectors_path: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Head-truncate texts to this many words before embedding.
    #[serde(default)]
    pub max_words: Option<usize>,
}

fn default_batch_size() -> usize {
    64
}

impl ProviderConfig {
    pub fn deterministic(model_id: impl Into<String>, dim: usize) -> Self {
        Self {
            kind: ProviderKind::DeterministicTest,
            model_id: model_id.into(),
            dim,
            remote: RemoteSettings::default(),
            vectors_path: None,
            cache_dir: None,
            batch_size: default_batch_size(),
            max_words: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(Error::Config("embedding model_id is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        match self.kind {
            ProviderKind::RemoteApi if self.remote.endpoint.is_none() => Err(Error::Config(
                "remote-api provider requires an endpoint".into(),
            )),
            ProviderKind::PrecomputedFile if self.vectors_path.is_none() => Err(Error::Config(
                "precomputed-file provider requires vectors_path".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    #[default]
    Cosine,
    Euclidean,
}

/// Cosine distance `1 - a.b / (|a||b|)`.
pub fn distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    distance_with(DistanceKind::Cosine, a, b)
}

pub fn distance_with(kind: DistanceKind, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Config(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (mut dot, mut na, mut nb, mut sq) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
        sq += (x - y) * (x - y);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Data("distance undefined for a zero-norm vector".into()));
    }
    Ok(match kind {
        // sqrt(na * na) == na exactly, so identical vectors give exactly 0.
        DistanceKind::Cosine => (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0),
        DistanceKind::Euclidean => sq.sqrt(),
    })
}

/// Anything that turns a batch of texts into vectors of one fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    /// One vector per text, in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;
}

/// Feature-hashing bag of words, L2-normalized.
///
/// Needs no model; identical texts get identical vectors, and texts with
/// disjoint vocabularies are orthogonal unless their tokens collide.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    model_id: String,
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            model_id: model_id.into(),
            dim,
        }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0f64; self.dim];
        let bucket = |token: &[u8]| (text::fnv1a64(token) % self.dim as u64) as usize;
        let mut any = false;
        for token in text::tokens(text) {
            counts[bucket(token.as_bytes())] += 1.0;
            any = true;
        }
        if !any {
            counts[bucket(text.trim().as_bytes())] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        EmbeddingVector {
            values: counts.iter().map(|c| (c / norm) as f32).collect(),
        }
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Deserialize)]
struct PrecomputedRecord {
    text: String,
    vector: Vec<f32>,
}

/// Looks vectors up in a JSONL file keyed by exact text.
#[derive(Debug)]
pub struct PrecomputedEmbedder {
    model_id: String,
    dim: usize,
    vectors: HashMap<[u8; 32], EmbeddingVector>,
}

impl PrecomputedEmbedder {
    pub fn load(path: &Path, model_id: impl Into<String>, dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PrecomputedRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path.display(), n + 1, e))?;
            if record.vector.len() != dim {
                return Err(Error::Config(format!(
                    "{}:{}: vector has {} components, expected {dim}",
                    path.display(),
                    n + 1,
                    record.vector.len()
                )));
            }
            let vector = EmbeddingVector::new(record.vector)
                .map_err(|e| Error::parse(path.display(), n + 1, e))?;
            vectors.insert(text::sha256(record.text.as_bytes()), vector);
        }
        Ok(Self {
            model_id: model_id.into(),
            dim,
            vectors,
        })
    }
}

impl EmbeddingProvider for PrecomputedEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                let key = text::sha256(t.as_bytes());
                self.vectors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::MissingVector {
                        hash: hex::encode(key),
                    })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// HTTP adapter: POST `{"model", "texts"}`, expects `{"vectors": [[..], ..]}`.
pub struct RemoteEmbedder {
    model_id: String,
    dim: usize,
    client: JsonClient,
}

impl RemoteEmbedder {
    pub fn new(model_id: impl Into<String>, dim: usize, settings: &RemoteSettings) -> Result<Self> {
        let model_id = model_id.into();
        let client = JsonClient::new(&format!("embed:{model_id}"), settings).map_err(Error::Config)?;
        Ok(Self {
            model_id,
            dim,
            client,
        })
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let response: EmbedResponse = self.client.post(&EmbedRequest {
            model: &self.model_id,
            texts,
        })?;
        if response.vectors.len() != texts.len() {
            return Err(Error::Data(format!(
                "provider returned {} vectors for {} texts",
                response.vectors.len(),
                texts.len()
            )));
        }
        response.vectors.into_iter().map(EmbeddingVector::new).collect()
    }
}

const CACHE_MAGIC: &[u8; 4] = b"LXVC";
const CACHE_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    model_id: String,
    dim: usize,
}

/// Append-only vector cache for one model. Reads are concurrent; writes are
/// serialized through a single file handle.
pub struct EmbeddingCache {
    path: PathBuf,
    dim: usize,
    entries: RwLock<HashMap<[u8; 32], EmbeddingVector>>,
    writer: Mutex<File>,
}

impl EmbeddingCache {
    /// Opens (or creates) the cache file for `model_id` inside `dir`.
    pub fn open(dir: &Path, model_id: &str, dim: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(cache_file_name(model_id));
        let entries = if path.exists() {
            Self::load(&path, model_id, dim)?
        } else {
            let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let header = serde_json::to_vec(&CacheHeader {
                model_id: model_id.to_string(),
                dim,
            })
            .expect("header serializes");
            let mut buf = Vec::with_capacity(9 + header.len());
            buf.extend_from_slice(CACHE_MAGIC);
            buf.push(CACHE_VERSION);
            buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
            buf.extend_from_slice(&header);
            file.write_all(&buf).map_err(|e| Error::io(&path, e))?;
            HashMap::new()
        };
        let writer = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            dim,
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    fn load(path: &Path, model_id: &str, dim: usize) -> Result<HashMap<[u8; 32], EmbeddingVector>> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
        if bytes.len() < 9 || &bytes[..4] != CACHE_MAGIC {
            return Err(corrupt("not an embedding cache"));
        }
        if bytes[4] != CACHE_VERSION {
            return Err(corrupt("unsupported cache version"));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body_start = 9 + header_len;
        let header: CacheHeader = bytes
            .get(9..body_start)
            .and_then(|h| serde_json::from_slice(h).ok())
            .ok_or_else(|| corrupt("unreadable cache header"))?;
        if header.model_id != model_id {
            return Err(Error::Config(format!(
                "{}: cache belongs to model `{}`, not `{model_id}`",
                path.display(),
                header.model_id
            )));
        }
        if header.dim != dim {
            return Err(Error::Config(format!(
                "{}: cache holds {}-dimensional vectors but the provider is configured for {dim}",
                path.display(),
                header.dim
            )));
        }
        let record = 32 + 4 * dim;
        let body = &bytes[body_start..];
        let whole = body.len() / record * record;
        if whole != body.len() {
            log::warn!(
                "{}: dropping {} trailing bytes of a partial cache entry",
                path.display(),
                body.len() - whole
            );
            OpenOptions::new()
                .write(true)
                .open(path)
                .and_then(|f| f.set_len((body_start + whole) as u64))
                .map_err(|e| Error::io(path, e))?;
        }
        let mut entries = HashMap::with_capacity(whole / record);
        for chunk in body[..whole].chunks_exact(record) {
            let key: [u8; 32] = chunk[..32].try_into().unwrap();
            let values = chunk[32..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            entries.insert(key, EmbeddingVector::new(values).map_err(|e| corrupt(&e.to_string()))?);
        }
        Ok(entries)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<EmbeddingVector> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn insert_many(&self, items: &[([u8; 32], EmbeddingVector)]) -> Result<()> {
        let mut writer = self.writer.lock().unwrap();
        let mut entries = self.entries.write().unwrap();
        let mut buf = Vec::new();
        for (key, vector) in items {
            if vector.dim() != self.dim {
                return Err(Error::Config(format!(
                    "vector has {} components, cache expects {}",
                    vector.dim(),
                    self.dim
                )));
            }
            if entries.contains_key(key) {
                continue;
            }
            buf.extend_from_slice(key);
            for v in vector.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            entries.insert(*key, vector.clone());
        }
        writer.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn cache_file_name(model_id: &str) -> String {
    let safe: String = model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let tag = &text::sha256_hex(model_id.as_bytes())[..8];
    format!("{safe}-{tag}.vcache")
}

/// A provider plus optional cache, truncation and batching.
pub struct Embedder {
    provider: Box<dyn EmbeddingProvider>,
    cache: Option<EmbeddingCache>,
    batch_size: usize,
    max_words: Option<usize>,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("model_id", &self.provider.model_id())
            .field("dim", &self.provider.dim())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Embedder {
    pub fn new(provider: Box<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: None,
            batch_size: default_batch_size(),
            max_words: None,
        }
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let provider: Box<dyn EmbeddingProvider> = match cfg.kind {
            ProviderKind::DeterministicTest => Box::new(HashingEmbedder::new(&cfg.model_id, cfg.dim)),
            ProviderKind::PrecomputedFile => Box::new(PrecomputedEmbedder::load(
                cfg.vectors_path.as_deref().expect("validated"),
                &cfg.model_id,
                cfg.dim,
            )?),
            ProviderKind::RemoteApi => Box::new(RemoteEmbedder::new(&cfg.model_id, cfg.dim, &cfg.remote)?),
        };
        let cache = match &cfg.cache_dir {
            Some(dir) => Some(EmbeddingCache::open(dir, &cfg.model_id, cfg.dim)?),
            None => None,
        };
        Ok(Self {
            provider,
            cache,
            batch_size: cfg.batch_size,
            max_words: cfg.max_words,
        })
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    /// Embeds `texts` in order, serving repeats from the cache.
    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let prepared: Vec<String> = texts
            .iter()
            .map(|t| match self.max_words {
                Some(limit) => text::truncate_words(t.as_ref(), limit),
                None => t.as_ref().to_string(),
            })
            .collect();
        let keys: Vec<[u8; 32]> = prepared.iter().map(|t| text::sha256(t.as_bytes())).collect();

        let mut found: HashMap<[u8; 32], EmbeddingVector> = HashMap::new();
        let mut missing: Vec<usize> = Vec::new();
        let mut pending = HashSet::new();
        for (i, key) in keys.iter().enumerate() {
            if found.contains_key(key) || pending.contains(key) {
                continue;
            }
            match self.cache.as_ref().and_then(|c| c.get(key)) {
                Some(v) => {
                    found.insert(*key, v);
                }
                None => {
                    pending.insert(*key);
                    missing.push(i);
                }
            }
        }

        for chunk in missing.chunks(self.batch_size) {
            let batch: Vec<&str> = chunk.iter().map(|&i| prepared[i].as_str()).collect();
            let vectors = self.provider.embed_batch(&batch)?;
            if vectors.len() != batch.len() {
                return Err(Error::Data(format!(
                    "provider `{}` returned {} vectors for {} texts",
                    self.model_id(),
                    vectors.len(),
                    batch.len()
                )));
            }
            let mut fresh = Vec::with_capacity(chunk.len());
            for (&i, v) in chunk.iter().zip(vectors) {
                if v.dim() != self.dim() {
                    return Err(Error::Config(format!(
                        "provider `{}` returned a {}-dimensional vector, configured dim is {}",
                        self.model_id(),
                        v.dim(),
                        self.dim()
                    )));
                }
                fresh.push((keys[i], v));
            }
            if let Some(cache) = &self.cache {
                cache.insert_many(&fresh)?;
            }
            found.extend(fresh);
        }

        Ok(keys.iter().map(|k| found[k].clone()).collect())
    }
}

/// One-shot helper: build an embedder from `cfg` and embed `texts`.
pub fn embed_texts<S: AsRef<str>>(texts: &[S], cfg: &ProviderConfig) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Err(Error::Data("nothing to embed".into()));
    }
    Embedder::from_config(cfg)?.embed_texts(texts)
}
