//! Unit-norm embeddings, similarity measures and the provider contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// A unit-norm real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Fails on (near-)zero or non-finite input.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !norm.is_finite() {
            return Err(Error::argument("embedding has non-finite components"));
        }
        if norm < ZERO_NORM {
            return Err(Error::argument("cannot normalize a zero vector"));
        }
        Ok(EmbeddingVector(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values already known to be unit norm (checked to 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::argument(format!(
                "embedding norm {norm} is not 1 within 1e-6"
            )));
        }
        if values.len() < 2 {
            return Err(Error::argument("embedding dimension must be at least 2"));
        }
        Ok(EmbeddingVector(values))
    }

    /// The `k`-th standard basis vector of dimension `dim`.
    pub fn basis(dim: usize, k: usize) -> Self {
        assert!(k < dim, "basis index {k} out of range for dimension {dim}");
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        EmbeddingVector(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl std::ops::Neg for &EmbeddingVector {
    type Output = EmbeddingVector;

    fn neg(self) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|v| -v).collect())
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!(
            "embedding dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let denom = a.norm() * b.norm();
    if denom < ZERO_NORM {
        return Err(Error::argument("cosine of a zero vector"));
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// Cosine mapped affinely onto [0, 1]: `(1 + cos) / 2`.
pub fn similarity01(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok((1.0 + cosine(a, b)?) / 2.0)
}

/// How frame/prompt similarity enters the prompt-weighting scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMap {
    /// `(1 + cos) / 2`, sharing the [0, 1] range of the narrative prior.
    #[default]
    Affine01,
    /// Raw cosine in [-1, 1].
    Cosine,
}

impl SimilarityMap {
    pub fn apply(self, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
        match self {
            SimilarityMap::Affine01 => similarity01(a, b),
            SimilarityMap::Cosine => cosine(a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub name: String,
    pub dimension: usize,
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Source of text embeddings. Implementations must be callable concurrently.
pub trait EmbeddingProvider: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    /// Embeds `text` into a unit-norm vector of the declared dimension.
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Deterministic hashed bag-of-tokens provider.
///
/// Text is lowercased, trimmed and split on whitespace. Every token is hashed
/// (seeded FNV-1a) and the hash seeds a ChaCha8 stream from which a
/// standard-normal vector is drawn and normalized. The token vectors are
/// averaged and renormalized; if the average vanishes the first token's
/// vector is used instead.
#[derive(Clone, Debug)]
pub struct MockProvider {
    descriptor: ProviderDescriptor,
    seed: u64,
}

impl MockProvider {
    pub const NAME: &'static str = "mock-hash";

    pub fn new(dimension: usize, seed: u64) -> Result<Self> {
        if dimension < 2 {
            return Err(Error::argument("provider dimension must be at least 2"));
        }
        Ok(MockProvider {
            descriptor: ProviderDescriptor {
                name: Self::NAME.into(),
                dimension,
                deterministic: true,
                seed: Some(seed),
            },
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(token_hash(self.seed, token));
        let v: Vec<f64> = (0..self.descriptor.dimension)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = l2_norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }
}

/// Seeded FNV-1a over the seed's little-endian bytes followed by the token.
pub fn token_hash(seed: u64, token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(token.as_bytes())
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Canonical tokenization shared by the mock provider and prompt masks.
pub fn tokens(text: &str) -> Vec<String> {
    text.trim()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

impl EmbeddingProvider for MockProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let toks = tokens(text);
        if toks.is_empty() {
            return Err(Error::argument("cannot embed empty text"));
        }
        let vectors: Vec<Vec<f64>> = toks.iter().map(|t| self.token_vector(t)).collect();
        EmbeddingVector::normalized(mean_or_first(vectors))
    }
}

// Mean of the token vectors, or the first vector when the mean vanishes.
fn mean_or_first(vectors: Vec<Vec<f64>>) -> Vec<f64> {
    let dim = vectors[0].len();
    let mut mean = vec![0.0; dim];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let count = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    if l2_norm(&mean) < ZERO_NORM {
        mean = vectors.into_iter().next().expect("at least one token");
    }
    mean
}
