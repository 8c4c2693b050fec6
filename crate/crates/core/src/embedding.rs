//! Text embeddings: a deterministic offline hash embedder, an embedder that
//! delegates to the chat backend, a persistent cache, and the cosine-space
//! helpers the rest of the engine is built on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{ChatBackend, ChatRequest};
use crate::error::{FlowError, Result};
use crate::network::AgentNode;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 384;

/// A fixed-dimension real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Cosine similarity. Zero vectors compare as 0.
pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(FlowError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Maximum cosine similarity between a query embedding and any member of a
/// node. This is the recall score used during network construction.
pub fn max_similarity(query: &Embedding, node: &AgentNode) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for member in node.member_embeddings() {
        let sim = cosine_sim(query, member)?;
        if sim > best {
            best = sim;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(FlowError::EmptyNode(node.id.to_string()));
    }
    Ok(best)
}

/// Anything that can turn text into a fixed-dimension vector, deterministically.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding>;

    /// Stable identifier recorded in artifacts and cache entries; loading an
    /// artifact with a different embedder id is a compatibility error.
    fn id(&self) -> String;

    fn dim(&self) -> usize;
}

// ---------------------------------------------------------------------------
// Offline seeded-hash embedder
// ---------------------------------------------------------------------------

/// Offline embedder: hashes token unigrams and bigrams into a signed
/// D-dimensional vector and normalizes. Fully deterministic for a given
/// (seed, dim); no I/O. The default for tests and scripted runs.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> HashEmbedder {
        HashEmbedder { dim, seed }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_DIM, 0)
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(FlowError::EmptyText);
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(FlowError::EmptyText);
        }
        let mut v = vec![0.0f64; self.dim];
        let mut bump = |feature: &str, weight: f64| {
            let h = splitmix64(fnv1a(self.seed, feature.as_bytes()));
            let idx = ((h >> 1) % self.dim as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign * weight;
        };
        for t in &tokens {
            bump(t, 1.0);
        }
        for pair in tokens.windows(2) {
            bump(&format!("{} {}", pair[0], pair[1]), 1.0);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Signed features cancelled exactly; fall back to a single
            // deterministic spike so the result stays a valid unit vector.
            let h = splitmix64(fnv1a(self.seed, text.as_bytes()));
            v[(h % self.dim as u64) as usize] = 1.0;
        } else {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        Ok(Embedding(v))
    }

    fn id(&self) -> String {
        format!("hash-v1-d{}-s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

// ---------------------------------------------------------------------------
// Backend-delegating embedder
// ---------------------------------------------------------------------------

/// Embedder that asks the chat backend for a vector: the request instructs the
/// model to reply with exactly `dim` comma-separated numbers. Useful when the
/// serving side hosts a dedicated embedding model behind the chat interface.
pub struct BackendEmbedder {
    backend: Arc<dyn ChatBackend>,
    model_id: String,
    dim: usize,
}

impl BackendEmbedder {
    pub fn new(backend: Arc<dyn ChatBackend>, model_id: impl Into<String>, dim: usize) -> Self {
        BackendEmbedder {
            backend,
            model_id: model_id.into(),
            dim,
        }
    }
}

impl Embedder for BackendEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(FlowError::EmptyText);
        }
        let req = ChatRequest {
            model: self.model_id.clone(),
            system: format!(
                "Convert the user text to an embedding. Reply with exactly {} \
                 comma-separated numbers and nothing else.",
                self.dim
            ),
            user: text.to_string(),
            temperature: 0.0,
            max_tokens: None,
            tag: "embed".into(),
        };
        let resp = self.backend.chat(&req)?;
        let values: Vec<f64> = resp
            .text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FlowError::MalformedEmbedding(e.to_string()))?;
        if values.len() != self.dim {
            return Err(FlowError::MalformedEmbedding(format!(
                "expected {} values, got {}",
                self.dim,
                values.len()
            )));
        }
        let emb = Embedding(values);
        if !emb.0.iter().all(|x| x.is_finite()) || emb.norm() == 0.0 {
            return Err(FlowError::MalformedEmbedding(
                "vector must be finite and non-zero".into(),
            ));
        }
        Ok(emb)
    }

    fn id(&self) -> String {
        format!("backend-{}-d{}", self.model_id, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

fn text_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    embedder_id: String,
    text_hash: String,
    values: Vec<f64>,
}

/// Memoizes embed calls keyed by (embedder id, text hash). Persists to a
/// plain-text JSONL file alongside the network artifact.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: BTreeMap<(String, String), Embedding>,
    hits: u64,
    misses: u64,
}

impl EmbeddingCache {
    pub fn new() -> EmbeddingCache {
        EmbeddingCache::default()
    }

    /// Embed through the cache. Identical (embedder, text) pairs hit the
    /// cached vector and never re-run the embedder.
    pub fn get_or_embed(&mut self, embedder: &dyn Embedder, text: &str) -> Result<Embedding> {
        let key = (embedder.id(), text_hash(text));
        if let Some(hit) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(hit.clone());
        }
        let emb = embedder.embed(text)?;
        self.misses += 1;
        self.entries.insert(key, emb.clone());
        Ok(emb)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    /// One JSON record per line: `{embedder_id, text_hash, values}`.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| FlowError::io(path.display(), e))?;
        let mut w = std::io::BufWriter::new(file);
        for ((embedder_id, text_hash), emb) in &self.entries {
            let record = CacheRecord {
                embedder_id: embedder_id.clone(),
                text_hash: text_hash.clone(),
                values: emb.0.clone(),
            };
            serde_json::to_writer(&mut w, &record)?;
            writeln!(w).map_err(|e| FlowError::io(path.display(), e))?;
        }
        w.flush().map_err(|e| FlowError::io(path.display(), e))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<EmbeddingCache> {
        let file = std::fs::File::open(path).map_err(|e| FlowError::io(path.display(), e))?;
        let mut cache = EmbeddingCache::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| FlowError::io(path.display(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CacheRecord = serde_json::from_str(&line)?;
            cache.entries.insert(
                (record.embedder_id, record.text_hash),
                Embedding(record.values),
            );
        }
        Ok(cache)
    }
}
