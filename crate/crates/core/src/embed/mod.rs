//! Subword skip-gram word embeddings.
//!
//! Each vocabulary word owns a word vector, and each character n-gram seen in
//! the vocabulary owns a subword vector. A word is represented by the mean of
//! its own vector (when known) and the vectors of its known subwords, so words
//! never seen during training still get an embedding from their pieces.

mod corpus;
mod io;
mod subword;
mod train;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{toy_corpus, topical_corpus};
pub use io::{load_embeddings, save_embeddings, EMBEDDING_MAGIC};
pub use subword::extract_subwords;
pub use train::{train_embeddings, EmbeddingTrainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub l_min: usize,
    pub l_max: usize,
    /// Half-width of the skip-gram context window.
    pub context_window: usize,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 32,
            l_min: 2,
            l_max: 4,
            context_window: 2,
            negatives_per_positive: 5,
            epochs: 5,
            learning_rate: 0.05,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid(format!("embedding dim must be >= 2, got {}", self.dim)));
        }
        if self.l_min < 1 || self.l_max < self.l_min {
            return Err(Error::invalid(format!(
                "subword bounds must satisfy 1 <= l_min <= l_max, got ({}, {})",
                self.l_min, self.l_max
            )));
        }
        if self.context_window < 1 {
            return Err(Error::invalid("context window must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Trained word and subword vectors.
///
/// `input_vectors` holds one row per word followed by one row per subword;
/// `output_vectors` holds the skip-gram output side, one row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub config: EmbeddingConfig,
    words: Vec<String>,
    word_index: HashMap<String, usize>,
    subwords: Vec<String>,
    subword_index: HashMap<String, usize>,
    pub(crate) input_vectors: Vec<f64>,
    pub(crate) output_vectors: Vec<f64>,
}

impl EmbeddingModel {
    pub(crate) fn from_parts(
        config: EmbeddingConfig,
        words: Vec<String>,
        subwords: Vec<String>,
        input_vectors: Vec<f64>,
        output_vectors: Vec<f64>,
    ) -> Self {
        let word_index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let subword_index = subwords.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        EmbeddingModel {
            config,
            words,
            word_index,
            subwords,
            subword_index,
            input_vectors,
            output_vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn subwords(&self) -> &[String] {
        &self.subwords
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_index.contains_key(&normalize(word))
    }

    pub fn input_vectors(&self) -> &[f64] {
        &self.input_vectors
    }

    pub fn output_vectors(&self) -> &[f64] {
        &self.output_vectors
    }

    pub fn output_vector(&self, word: &str) -> Option<&[f64]> {
        let d = self.dim();
        self.word_index
            .get(&normalize(word))
            .map(|&i| &self.output_vectors[i * d..(i + 1) * d])
    }

    /// Input-matrix rows that make up `word` (already normalized).
    pub(crate) fn component_rows(&self, word: &str) -> Vec<usize> {
        let mut rows: Vec<usize> = self.word_index.get(word).copied().into_iter().collect();
        rows.extend(
            extract_subwords(word, self.config.l_min, self.config.l_max)
                .iter()
                .filter_map(|s| self.subword_index.get(s))
                .map(|&j| self.words.len() + j),
        );
        rows
    }

    /// Mean of the word vector (if in vocabulary) and all known subword
    /// vectors; the zero vector when nothing is known.
    pub fn compose_embedding(&self, word: &str) -> Vec<f64> {
        let rows = self.component_rows(&normalize(word));
        mean_rows(&self.input_vectors, self.dim(), &rows)
    }

    /// Top-`k` vocabulary words by cosine between `query` and their composed
    /// embeddings, descending, ties broken lexicographically. A `k` beyond the
    /// vocabulary size returns the full ranking.
    pub fn nearest_words(&self, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if query.len() != self.dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, model has {}",
                query.len(),
                self.dim()
            )));
        }
        let mut ranked: Vec<(String, f64)> = self
            .words
            .iter()
            .map(|w| (w.clone(), cosine(query, &self.compose_embedding(w))))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }
}

pub(crate) fn mean_rows(matrix: &[f64], dim: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    if rows.is_empty() {
        return out;
    }
    for &r in rows {
        for (o, v) in out.iter_mut().zip(&matrix[r * dim..(r + 1) * dim]) {
            *o += v;
        }
    }
    let scale = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Embedding lookups are case-insensitive.
pub fn normalize(word: &str) -> String {
    word.to_lowercase()
}

/// Cosine similarity, 0 when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < crate::tensor::COSINE_EPS || nb < crate::tensor::COSINE_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn handmade(dim: usize, words: &[&str], fill: impl Fn(usize) -> Vec<f64>) -> EmbeddingModel {
        let config = EmbeddingConfig { dim, ..EmbeddingConfig::default() };
        let words: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        let mut subwords: Vec<String> = Vec::new();
        for w in &words {
            for s in extract_subwords(w, config.l_min, config.l_max) {
                if !subwords.contains(&s) {
                    subwords.push(s);
                }
            }
        }
        let rows = words.len() + subwords.len();
        let input: Vec<f64> = (0..rows).flat_map(&fill).collect();
        let output = vec![0.0; words.len() * dim];
        EmbeddingModel::from_parts(config, words, subwords, input, output)
    }

    #[test]
    fn identical_components_compose_to_themselves() {
        let v = vec![0.25, -1.0, 3.0];
        let m = handmade(3, &["where", "here"], |_| v.clone());
        assert_eq!(m.compose_embedding("where"), v);
    }

    #[test]
    fn oov_uses_known_subwords_only() {
        let m = handmade(2, &["where"], |r| vec![r as f64, 1.0]);
        // "wherey" is out of vocabulary and shares exactly nine subwords with "where".
        let rows = m.component_rows("wherey");
        let known: Vec<usize> = extract_subwords("wherey", 2, 4)
            .iter()
            .filter_map(|s| m.subwords().iter().position(|x| x == s))
            .map(|j| 1 + j)
            .collect();
        assert_eq!(rows, known);
        assert_eq!(rows.len(), 9);
        let expected = rows.iter().map(|&r| r as f64).sum::<f64>() / 9.0;
        let got = m.compose_embedding("wherey");
        assert!((got[0] - expected).abs() < 1e-12);
        assert!(!m.contains("wherey"));
    }

    #[test]
    fn unknown_everything_is_zero() {
        let m = handmade(4, &["where"], |_| vec![1.0; 4]);
        assert_eq!(m.compose_embedding("zq"), vec![0.0; 4]);
    }

    #[test]
    fn lookup_is_case_insensitive() {
        let m = handmade(2, &["here"], |r| vec![r as f64, 2.0]);
        assert_eq!(m.compose_embedding("HeRe"), m.compose_embedding("here"));
    }

    #[test]
    fn nearest_self_first_and_zero_query_is_lexicographic() {
        let m = handmade(3, &["cat", "dog", "bird"], |r| vec![(r as f64).sin(), (r as f64).cos(), r as f64 * 0.1]);
        let q = m.compose_embedding("dog");
        let top = m.nearest_words(&q, 1).unwrap();
        assert_eq!(top[0].0, "dog");
        assert!((top[0].1 - 1.0).abs() < 1e-9);

        let zero = m.nearest_words(&[0.0; 3], 10).unwrap();
        let names: Vec<&str> = zero.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(names, ["bird", "cat", "dog"]);
        assert!(zero.iter().all(|(_, c)| *c == 0.0));
        assert!(m.nearest_words(&q, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EmbeddingConfig::default().validate().is_ok());
        assert!(EmbeddingConfig { dim: 1, ..Default::default() }.validate().is_err());
        assert!(EmbeddingConfig { l_min: 0, ..Default::default() }.validate().is_err());
        assert!(EmbeddingConfig { l_min: 5, l_max: 4, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn mean_is_order_invariant(rows in proptest::collection::vec(0usize..6, 1..8), seed in 0u64..1000) {
            let dim = 3;
            let matrix: Vec<f64> = (0..6 * dim).map(|i| ((i as u64 * 7919 + seed) % 101) as f64 / 10.0 - 5.0).collect();
            let forward = mean_rows(&matrix, dim, &rows);
            let mut reversed = rows.clone();
            reversed.reverse();
            let backward = mean_rows(&matrix, dim, &reversed);
            for (a, b) in forward.iter().zip(&backward) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
