//! Token embeddings consumed by the embedding-based metrics.
//!
//! Metrics never run an encoder. Vectors come from a sidecar file or from
//! [`HashEmbedder`], a seeded pseudo-embedder for end-to-end runs whose
//! vectors carry no meaning beyond token identity.

use std::collections::BTreeMap;

use emagate_core::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MetricError, Result};

/// Per token, per layer, one vector; `layers` is tokens × L × e.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedText {
    pub tokens: Vec<String>,
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl EmbeddedText {
    pub fn new(tokens: Vec<String>, layers: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let t = Self { tokens, layers };
        t.validate()?;
        Ok(t)
    }

    /// One layer per token.
    pub fn single_layer(tokens: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(tokens, vectors.into_iter().map(|v| vec![v]).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.layers.len() {
            return Err(MetricError::Embedding(format!(
                "{} tokens but {} embedding rows",
                self.tokens.len(),
                self.layers.len()
            )));
        }
        let Some(first) = self.layers.first() else {
            return Ok(());
        };
        let (l, e) = (first.len(), first.first().map_or(0, Vec::len));
        if l == 0 || e == 0 {
            return Err(MetricError::Embedding("embeddings need at least one layer of width ≥ 1".into()));
        }
        for (t, per_token) in self.layers.iter().enumerate() {
            if per_token.len() != l || per_token.iter().any(|v| v.len() != e) {
                return Err(MetricError::Embedding(format!(
                    "token {t} ({:?}) is not {l} layers of width {e}",
                    self.tokens[t]
                )));
            }
            if per_token.iter().flatten().any(|x| !x.is_finite()) {
                return Err(MetricError::Embedding(format!("token {t} has a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// L, or 0 for an empty text.
    pub fn num_layers(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// e, or 0 for an empty text.
    pub fn width(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, Vec::len)
    }

    /// Vectors of the 1-based layer `l`.
    pub fn layer(&self, l: usize) -> Result<Vec<&[f64]>> {
        if l == 0 || l > self.num_layers() {
            return Err(MetricError::Embedding(format!(
                "layer {l} out of range 1..={}",
                self.num_layers()
            )));
        }
        Ok(self.layers.iter().map(|t| t[l - 1].as_slice()).collect())
    }
}

/// One sidecar entry: the embedded sides of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub candidate: EmbeddedText,
    pub reference: EmbeddedText,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<EmbeddedText>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contexts: Vec<EmbeddedText>,
}

/// Item id → entry. Ordered so serialization is deterministic.
pub type Sidecar = BTreeMap<String, SidecarEntry>;

/// FNV-1a over bytes.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seeded pseudo-embedder: each (token, layer) pair maps to a fixed
/// standard-normal vector scaled to unit length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub seed: u64,
    pub layers: usize,
    pub width: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, layers: usize, width: usize) -> Result<Self> {
        if layers == 0 || width == 0 {
            return Err(MetricError::Embedding("hash embedder needs layers ≥ 1 and width ≥ 1".into()));
        }
        Ok(Self { seed, layers, width })
    }

    pub fn vector(&self, token: &str, layer: usize) -> Vec<f64> {
        let key = fnv1a(token.as_bytes()) ^ self.seed.rotate_left(17) ^ (layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = Rng::new(key);
        loop {
            let v: Vec<f64> = (0..self.width).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    pub fn embed<S: AsRef<str>>(&self, tokens: &[S]) -> EmbeddedText {
        EmbeddedText {
            tokens: tokens.iter().map(|t| t.as_ref().to_owned()).collect(),
            layers: tokens
                .iter()
                .map(|t| (0..self.layers).map(|l| self.vector(t.as_ref(), l)).collect())
                .collect(),
        }
    }
}
