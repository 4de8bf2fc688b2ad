use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{
    frame_header, parse_header, push_f32s, read_f32s, read_file, write_file, EMBEDDING_MAGIC,
};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ToyHash,
    Ingested,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

impl TextEmbedding {
    pub fn zeros(dim: usize) -> Self {
        TextEmbedding {
            vector: vec![0.0; dim],
            provenance: Provenance::ToyHash,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Deterministic stand-in for a pretrained text encoder: every token id maps
/// to a fixed Gaussian vector (scaled to unit expected norm) drawn from a
/// stream seeded by `(seed, id)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextEmbedder {
    fn default() -> Self {
        TextEmbedder { dim: 64, seed: 7 }
    }
}

impl TextEmbedder {
    pub fn token_vector(&self, id: u32) -> Vec<f64> {
        let mix = self.seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        Mat::randn(1, self.dim, 1.0 / (self.dim as f64).sqrt(), &mut rng).into_vec()
    }

    /// Mean of the token vectors.
    pub fn embed(&self, tokens: &[u32]) -> Result<TextEmbedding> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot embed an empty token list"));
        }
        let mut acc = vec![0.0; self.dim];
        for &t in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(TextEmbedding {
            vector: acc,
            provenance: Provenance::ToyHash,
        })
    }
}

/// Precomputed embeddings keyed by id, stored as a `DLEM` container.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub ids: Vec<String>,
    pub vectors: Mat,
}

impl EmbeddingRecord {
    pub fn new(ids: Vec<String>, vectors: Mat) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::invalid(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.rows()
            )));
        }
        Ok(EmbeddingRecord { ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "dimension": self.vectors.cols(),
            "count": self.ids.len(),
            "ids": self.ids,
        });
        let mut out = frame_header(EMBEDDING_MAGIC, &header);
        push_f32s(&mut out, self.vectors.data());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, pos) = parse_header(bytes, EMBEDDING_MAGIC)?;
        let dim = header["dimension"]
            .as_u64()
            .ok_or_else(|| Error::format(16, "embedding header lacks `dimension`"))? as usize;
        let count = header["count"]
            .as_u64()
            .ok_or_else(|| Error::format(16, "embedding header lacks `count`"))? as usize;
        let ids: Vec<String> = serde_json::from_value(header["ids"].clone())
            .map_err(|e| Error::format(16, format!("bad id list: {e}")))?;
        if ids.len() != count {
            return Err(Error::format(16, format!("{} ids but count {count}", ids.len())));
        }
        let data = read_f32s(&bytes[pos..], pos as u64, count * dim)?;
        if bytes.len() != pos + count * dim * 4 {
            return Err(Error::format(
                (pos + count * dim * 4) as u64,
                "trailing bytes after embedding payload",
            ));
        }
        EmbeddingRecord::new(ids, Mat::from_vec(count, dim, data))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        EmbeddingRecord::from_bytes(&read_file(path)?)
    }

    pub fn lookup(&self, id: &str, dim: usize) -> Result<TextEmbedding> {
        if self.dim() != dim {
            return Err(Error::invalid(format!(
                "ingested embeddings have dimension {}, config expects {dim}",
                self.dim()
            )));
        }
        let row = self
            .ids
            .iter()
            .position(|i| i == id)
            .ok_or_else(|| Error::invalid(format!("no ingested embedding for id `{id}`")))?;
        let vector = self.vectors.row(row).to_vec();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("embedding `{id}` is not finite")));
        }
        Ok(TextEmbedding {
            vector,
            provenance: Provenance::Ingested,
        })
    }
}

/// Reads one precomputed vector from an embedding file.
pub fn ingest_embedding(path: &Path, id: &str, dim: usize) -> Result<TextEmbedding> {
    let record = EmbeddingRecord::read(path).map_err(|e| match e {
        Error::Io { path, source } => Error::invalid(format!(
            "cannot read embedding record {}: {source}",
            path.display()
        )),
        other => other,
    })?;
    record.lookup(id, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_cases() {
        let e = TextEmbedder::default();
        assert_eq!(e.embed(&[3, 9]).unwrap(), e.embed(&[3, 9]).unwrap());
        assert_eq!(e.embed(&[5]).unwrap().vector, e.token_vector(5));
        let pair = e.embed(&[1, 2]).unwrap();
        let (a, b) = (e.token_vector(1), e.token_vector(2));
        for i in 0..64 {
            assert!((pair.vector[i] - (a[i] + b[i]) / 2.0).abs() < 1e-15);
        }
        assert_ne!(a, b);
        assert!(e.embed(&[]).is_err());
    }

    #[test]
    fn ingestion_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.dlem");
        let vectors = Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.0, 1.5]);
        EmbeddingRecord::new(vec!["a".into(), "b".into()], vectors)
            .unwrap()
            .write(&path)
            .unwrap();
        let b = ingest_embedding(&path, "b", 3).unwrap();
        assert_eq!(b.vector, vec![0.25, 0.0, 1.5]);
        assert_eq!(b.provenance, Provenance::Ingested);
        assert!(matches!(ingest_embedding(&path, "c", 3), Err(Error::InvalidInput(_))));
        assert!(matches!(ingest_embedding(&path, "a", 4), Err(Error::InvalidInput(_))));
        let missing = dir.path().join("none.dlem");
        assert!(matches!(ingest_embedding(&missing, "a", 3), Err(Error::InvalidInput(_))));
    }
}
