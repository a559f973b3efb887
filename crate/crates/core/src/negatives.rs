//! Negative query strategies: a generic photo prompt, random strings, the
//! zero vector, and Gaussian samples fitted to the query embeddings.
//!
//! Word-based strategies only produce strings here. Their embeddings come
//! back from the model adapter as OSVD dumps.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{normalize_in_place, EmbeddingMatrix};
use crate::error::{Error, Result};

pub const SIMPLE_WORD: &str = "This is a photo.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    #[default]
    None,
    SimpleWord,
    RandomWords,
    ZeroEmbedding,
    RandomEmbeddings,
}

impl NegativeKind {
    /// Word-based kinds need an encoded dump from the adapter.
    pub fn needs_encoded_words(self) -> bool {
        matches!(self, NegativeKind::SimpleWord | NegativeKind::RandomWords)
    }
}

/// Which negatives a run uses. The Gaussian fit is filled in once the
/// negatives have been materialised against a query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSpec {
    pub kind: NegativeKind,
    pub count: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_std: Option<Vec<f64>>,
}

impl Default for NegativeSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl NegativeSpec {
    pub fn none() -> Self {
        Self {
            kind: NegativeKind::None,
            count: 0,
            seed: 0,
            fitted_mean: None,
            fitted_std: None,
        }
    }

    pub fn new(kind: NegativeKind, count: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            count,
            seed,
            fitted_mean: None,
            fitted_std: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        use NegativeKind::*;
        let ok = match self.kind {
            None => self.count == 0,
            SimpleWord | ZeroEmbedding => self.count == 1,
            RandomWords | RandomEmbeddings => self.count >= 1,
        };
        if !ok {
            return Err(Error::Parameter(format!(
                "negative kind {:?} cannot have count {}",
                self.kind, self.count
            )));
        }
        let fitted = self.fitted_mean.is_some() || self.fitted_std.is_some();
        if fitted && self.kind != RandomEmbeddings {
            return Err(Error::Parameter(
                "Gaussian fit is only meaningful for random embeddings".into(),
            ));
        }
        if self.fitted_mean.is_some() != self.fitted_std.is_some() {
            return Err(Error::Parameter("fitted mean and std come together".into()));
        }
        Ok(())
    }
}

pub fn simple_word() -> &'static str {
    SIMPLE_WORD
}

pub fn zero_embedding(dim: usize) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(dim, 1, vec![0.0; dim], true)
}

/// `m` lowercase strings with lengths uniform over 2..=8.
pub fn random_words(m: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let len = rng.random_range(2..=8);
            (0..len)
                .map(|_| char::from(b'a' + rng.random_range(0..26u8)))
                .collect()
        })
        .collect()
}

/// Writes a word list as a JSON array, the input format of the text encoder.
pub fn write_word_list<W: Write>(words: &[String], sink: W) -> Result<()> {
    serde_json::to_writer_pretty(sink, words)?;
    Ok(())
}

/// Per-dimension mean and sample standard deviation of a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianFit {
    pub fn fit(queries: &EmbeddingMatrix) -> Result<Self> {
        let n = queries.count();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 query embeddings to fit a Gaussian, got {n}"
            )));
        }
        let dim = queries.dim();
        let mut mean = vec![0.0; dim];
        for r in queries.rows() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in queries.rows() {
            for ((s, &v), m) in var.iter_mut().zip(r).zip(&mean) {
                let d = f64::from(v) - m;
                *s += d * d;
            }
        }
        let std = var.into_iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Draws `m` unnormalised vectors. Rows are drawn in order from one
    /// stream, so the first `k` rows of a larger draw equal a draw of `k`.
    pub fn sample_raw(&self, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dists: Vec<Normal<f64>> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(&mu, &sd)| Normal::new(mu, sd).expect("std is finite and >= 0"))
            .collect();
        (0..m)
            .map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect())
            .collect()
    }
}

/// Gaussian negatives fitted to `queries`, L2-normalised after drawing.
pub fn random_embeddings(queries: &EmbeddingMatrix, m: usize, seed: u64) -> Result<EmbeddingMatrix> {
    Ok(random_embeddings_with_fit(queries, m, seed)?.0)
}

pub fn random_embeddings_with_fit(
    queries: &EmbeddingMatrix,
    m: usize,
    seed: u64,
) -> Result<(EmbeddingMatrix, GaussianFit)> {
    if m == 0 {
        return Err(Error::Parameter("random embeddings need m >= 1".into()));
    }
    let fit = GaussianFit::fit(queries)?;
    let dim = queries.dim();
    let mut data = Vec::with_capacity(m * dim);
    for raw in fit.sample_raw(m, seed) {
        let mut row: Vec<f32> = raw.into_iter().map(|v| v as f32).collect();
        normalize_in_place(&mut row);
        data.extend(row);
    }
    Ok((EmbeddingMatrix::new(dim, m, data, true)?, fit))
}
