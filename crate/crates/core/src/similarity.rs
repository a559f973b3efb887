//! Classification head in embedding space: cosine scores, activations,
//! uncertainty measures and argmax with optional negative slots.

use serde::{Deserialize, Serialize};

use crate::embedding_store::{l2_norm, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Default logit scale applied before softmax in embedding mode.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

/// Scores for one input against the augmented query list: query labels
/// first, negative slots after.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    scores: Vec<f32>,
    query_count: usize,
}

impl SimilarityRow {
    pub fn new(scores: Vec<f32>, query_count: usize) -> Result<Self> {
        if query_count > scores.len() {
            return Err(Error::Shape(format!(
                "{query_count} query slots in a row of {}",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score at slot {i}")));
        }
        Ok(Self {
            scores,
            query_count,
        })
    }

    /// Appends `negatives` as negative slots.
    pub fn with_negatives(mut self, negatives: &[f32]) -> Result<Self> {
        if let Some(i) = negatives.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite negative score at {i}")));
        }
        self.scores.extend_from_slice(negatives);
        Ok(self)
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn negative_count(&self) -> usize {
        self.scores.len() - self.query_count
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Cosine similarity of one image embedding against every query row.
///
/// `queries` must be normalized; an all-zero query row scores exactly 0.
pub fn cosine_scores(image: &[f32], queries: &EmbeddingMatrix) -> Result<SimilarityRow> {
    if !queries.is_normalized() {
        return Err(Error::Shape("query embeddings must be L2-normalized".into()));
    }
    let dots = raw_cosines(image, queries)?;
    SimilarityRow::new(dots, queries.count())
}

pub(crate) fn raw_cosines(image: &[f32], queries: &EmbeddingMatrix) -> Result<Vec<f32>> {
    if image.len() != queries.dim() {
        return Err(Error::Shape(format!(
            "image dim {} != query dim {}",
            image.len(),
            queries.dim()
        )));
    }
    let norm = l2_norm(image);
    let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    Ok(queries
        .rows()
        .map(|q| {
            if q.iter().all(|&v| v == 0.0) {
                return 0.0;
            }
            let dot: f64 = image
                .iter()
                .zip(q)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            (dot * inv) as f32
        })
        .collect())
}

/// Temperature-scaled softmax, stabilised by max subtraction.
pub fn softmax(row: &SimilarityRow, temperature: f64) -> Result<Vec<f64>> {
    softmax_slice(row.scores(), temperature)
}

fn softmax_slice(scores: &[f32], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Shape("softmax of an empty row".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in softmax".into()));
    }
    let max = scores
        .iter()
        .map(|&s| temperature * f64::from(s))
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|&s| (temperature * f64::from(s) - max).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Elementwise logistic function.
pub fn sigmoid(row: &SimilarityRow) -> Vec<f64> {
    row.scores().iter().map(|&s| logistic(f64::from(s))).collect()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Negated Shannon entropy (natural log) of a probability vector.
pub fn entropy_uncertainty(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Numeric("entropy of an empty distribution".into()));
    }
    if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::Numeric("probabilities must be finite and >= 0".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::Numeric(format!("probabilities sum to {total}")));
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(-h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Softmax,
    Sigmoid,
}

/// The three uncertainty measures. Higher means more certain for all of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTriple {
    /// Max raw score over query slots.
    pub cosine: f64,
    /// Max softmax (or sigmoid, for the sigmoid head) probability over query slots.
    pub softmax: f64,
    /// Negated entropy of the softmax over all slots.
    pub entropy_neg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Index into the query slots.
    Class(usize),
    /// Index of the winning negative slot.
    RejectedAsNegative(usize),
}

impl Verdict {
    pub fn is_rejected(&self) -> bool {
        matches!(self, Verdict::RejectedAsNegative(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionDecision {
    pub verdict: Verdict,
    pub uncertainty: UncertaintyTriple,
}

/// Argmax classification over query and negative slots.
///
/// Among equal scores the lowest index wins, except that a negative slot
/// tying the best query slot wins (conservative rejection). Negatives are
/// part of the softmax normalisation but not of the max that forms ψ.
pub fn classify(row: &SimilarityRow, temperature: f64, head: Head) -> Result<PredictionDecision> {
    if row.query_count() == 0 {
        return Err(Error::Shape("classification needs at least one query slot".into()));
    }
    let scores = row.scores();
    let best = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let q = row.query_count();
    let verdict = match scores[q..].iter().position(|&s| s == best) {
        Some(n) => Verdict::RejectedAsNegative(n),
        None => Verdict::Class(scores[..q].iter().position(|&s| s == best).unwrap()),
    };

    let probs = softmax_slice(scores, temperature)?;
    let cosine = scores[..q].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let softmax = match head {
        Head::Softmax => probs[..q].iter().copied().fold(0.0, f64::max),
        Head::Sigmoid => logistic(f64::from(cosine)),
    };
    let entropy_neg = entropy_uncertainty(&probs)?;
    Ok(PredictionDecision {
        verdict,
        uncertainty: UncertaintyTriple {
            cosine: f64::from(cosine),
            softmax,
            entropy_neg,
        },
    })
}
