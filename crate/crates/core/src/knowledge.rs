//! Debunking knowledge store: chunk documents into 100-codepoint spans,
//! embed them, persist them, and answer exact cosine-similarity top-N
//! queries by linear scan.
//!
//! The corpus stays small, so the scan is the index. Concurrency follows the
//! borrow rules: many readers or one writer, and a search always sees a
//! consistent snapshot.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{FileReader, FileWriter};

pub const STORE_MAGIC: &[u8; 8] = b"VDXSTORE";
pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_CHUNK_SIZE: usize = 100;

/// A debunking-text fragment with its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeChunk {
    pub chunk_id: String,
    pub source_id: String,
    pub text: String,
    pub vector: Vec<f64>,
}

/// One search hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub chunk: KnowledgeChunk,
    pub score: f64,
}

/// A raw document for ingestion: `{"source_id": .., "text": ..}` per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceDocument {
    pub source_id: String,
    pub text: String,
}

/// Split into consecutive spans of exactly `chunk_size` Unicode code points
/// (the final span may be shorter). The spans concatenate back to the
/// document, code-point-exactly. An empty document yields no chunks.
pub fn chunk_text(doc_text: &str, chunk_size: usize) -> Result<Vec<String>> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let chars: Vec<char> = doc_text.chars().collect();
    Ok(chars
        .chunks(chunk_size)
        .map(|span| span.iter().collect())
        .collect())
}

/// The vector database: ordered chunks plus precomputed norms.
#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    chunks: Vec<KnowledgeChunk>,
    norms: Vec<f64>,
    dimension: Option<usize>,
    ids: HashSet<String>,
}

impl VectorStore {
    pub fn new() -> Self {
        VectorStore::default()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn chunks(&self) -> &[KnowledgeChunk] {
        &self.chunks
    }

    /// Insert a batch. Either the whole batch lands or none of it; the new
    /// chunks are immediately queryable.
    pub fn add_chunks(&mut self, chunks: Vec<KnowledgeChunk>) -> Result<()> {
        // validate first so a failure leaves the store untouched
        let mut batch_ids = HashSet::new();
        for chunk in &chunks {
            if chunk.text.is_empty() {
                return Err(Error::data(format!("chunk {} has empty text", chunk.chunk_id)));
            }
            let d = self.dimension.unwrap_or(chunk.vector.len());
            if chunk.vector.len() != d || chunk.vector.is_empty() {
                return Err(Error::data(format!(
                    "chunk {} has dimension {}, store expects {}",
                    chunk.chunk_id,
                    chunk.vector.len(),
                    d
                )));
            }
            if self.ids.contains(&chunk.chunk_id) || !batch_ids.insert(chunk.chunk_id.clone()) {
                return Err(Error::data(format!("duplicate chunk id {}", chunk.chunk_id)));
            }
        }
        for chunk in chunks {
            self.dimension.get_or_insert(chunk.vector.len());
            self.norms
                .push(chunk.vector.iter().map(|v| v * v).sum::<f64>().sqrt());
            self.ids.insert(chunk.chunk_id.clone());
            self.chunks.push(chunk);
        }
        Ok(())
    }

    /// Exact linear scan, cosine scores, descending; ties keep insertion
    /// order. Zero-norm chunks rank strictly last and never outrank any
    /// finite score.
    pub fn search(&self, query: &[f64], top_n: usize) -> Result<Vec<RetrievalResult>> {
        if self.is_empty() {
            return Err(Error::data("search over an empty store"));
        }
        let d = self.dimension.expect("non-empty store has a dimension");
        if query.len() != d {
            return Err(Error::shape("search", &[query.len()], &[d]));
        }
        let query_norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        if query_norm == 0.0 {
            return Err(Error::data("query vector has zero norm"));
        }

        let mut scored: Vec<(usize, f64)> = self
            .chunks
            .iter()
            .enumerate()
            .map(|(i, chunk)| {
                let norm = self.norms[i];
                let score = if norm == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let dot: f64 = chunk.vector.iter().zip(query).map(|(a, b)| a * b).sum();
                    (dot / (norm * query_norm)).clamp(-1.0, 1.0)
                };
                (i, score)
            })
            .collect();
        // stable sort keeps insertion order on exact ties
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are never NaN"));
        scored.truncate(top_n);

        Ok(scored
            .into_iter()
            .map(|(i, score)| RetrievalResult {
                chunk: self.chunks[i].clone(),
                score,
            })
            .collect())
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = FileWriter::new(STORE_MAGIC, STORE_VERSION);
        w.u64(self.dimension.unwrap_or(0) as u64);
        w.u64(self.chunks.len() as u64);
        for chunk in &self.chunks {
            w.str(&chunk.chunk_id);
            w.str(&chunk.source_id);
            w.str(&chunk.text);
            w.f64_slice(&chunk.vector);
        }
        w.finish(path.as_ref())
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = FileReader::open(path.as_ref(), STORE_MAGIC, STORE_VERSION)?;
        let dimension = r.u64()? as usize;
        let count = r.u64()? as usize;
        let mut store = VectorStore::new();
        let mut chunks = Vec::with_capacity(count);
        for _ in 0..count {
            let chunk_id = r.str()?;
            let source_id = r.str()?;
            let text = r.str()?;
            let vector = r.f64_slice()?;
            chunks.push(KnowledgeChunk {
                chunk_id,
                source_id,
                text,
                vector,
            });
        }
        r.done()?;
        store.add_chunks(chunks)?;
        if count > 0 && store.dimension != Some(dimension) {
            return Err(Error::Persist("store dimension header disagrees".into()));
        }
        if count == 0 && dimension > 0 {
            store.dimension = Some(dimension);
        }
        Ok(store)
    }
}

/// Read ingestion documents from JSONL.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<SourceDocument>> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::data(format!("cannot open documents {}: {e}", path.as_ref().display())))?;
    let reader = std::io::BufReader::new(file);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: SourceDocument = serde_json::from_str(&line)
            .map_err(|e| Error::data_at(idx + 1, format!("invalid document: {e}")))?;
        docs.push(doc);
    }
    Ok(docs)
}
