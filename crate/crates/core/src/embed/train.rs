use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{extract_subwords, mean_rows, normalize, EmbeddingConfig, EmbeddingModel};
use crate::error::{Error, Result};

/// Exponent applied to unigram counts for the negative-sampling noise distribution.
const NOISE_POWER: f64 = 0.75;

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One logistic step on (hidden, output[target]); returns the pair loss.
fn logistic_step(output: &mut [f64], h: &[f64], target: usize, label: f64, lr: f64, grad_h: &mut [f64]) -> f64 {
    let dim = h.len();
    let out = &mut output[target * dim..(target + 1) * dim];
    let score: f64 = h.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
    let g = lr * (label - sigmoid(score));
    for ((gh, o), hv) in grad_h.iter_mut().zip(out.iter_mut()).zip(h) {
        *gh += g * *o;
        *o += g * hv;
    }
    if label > 0.5 {
        -log_sigmoid(score)
    } else {
        -log_sigmoid(-score)
    }
}

/// Epoch-at-a-time skip-gram trainer with negative sampling. Learning rate
/// decays linearly over the configured number of epochs.
pub struct EmbeddingTrainer {
    model: EmbeddingModel,
    tokens: Vec<usize>,
    components: Vec<Vec<usize>>,
    noise: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    epochs_done: usize,
    epoch_losses: Vec<f64>,
}

impl EmbeddingTrainer {
    pub fn new<S: AsRef<str>>(corpus: &[S], config: EmbeddingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normalized: Vec<String> = corpus.iter().map(|t| normalize(t.as_ref())).collect();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &normalized {
            if t.is_empty() {
                return Err(Error::invalid("corpus contains an empty token"));
            }
            *counts.entry(t.as_str()).or_default() += 1;
        }
        if counts.len() < 2 {
            return Err(Error::invalid(format!(
                "corpus needs at least 2 distinct tokens to form context pairs, found {}",
                counts.len()
            )));
        }
        if config.context_window >= normalized.len() {
            return Err(Error::invalid(format!(
                "context window {} is not smaller than the corpus length {}",
                config.context_window,
                normalized.len()
            )));
        }

        // Vocabulary in first-occurrence order keeps indices stable and seed-independent.
        let mut words: Vec<String> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let tokens: Vec<usize> = normalized
            .iter()
            .map(|t| {
                *index.entry(t.clone()).or_insert_with(|| {
                    words.push(t.clone());
                    words.len() - 1
                })
            })
            .collect();
        let mut subwords: Vec<String> = Vec::new();
        let mut sub_index = std::collections::HashMap::new();
        let mut components = Vec::with_capacity(words.len());
        for (wi, w) in words.iter().enumerate() {
            let mut rows = vec![wi];
            for s in extract_subwords(w, config.l_min, config.l_max) {
                let j = *sub_index.entry(s.clone()).or_insert_with(|| {
                    subwords.push(s);
                    subwords.len() - 1
                });
                rows.push(j);
            }
            components.push(rows);
        }
        let n_words = words.len();
        for rows in &mut components {
            for r in rows.iter_mut().skip(1) {
                *r += n_words;
            }
        }

        let weights: Vec<f64> = words.iter().map(|w| (counts[w.as_str()] as f64).powf(NOISE_POWER)).collect();
        let noise = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = config.dim;
        let bound = 0.5 / dim as f64;
        let input: Vec<f64> = (0..(n_words + subwords.len()) * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let output = vec![0.0; n_words * dim];
        let model = EmbeddingModel::from_parts(config, words, subwords, input, output);
        Ok(EmbeddingTrainer {
            model,
            tokens,
            components,
            noise,
            rng,
            epochs_done: 0,
            epoch_losses: Vec::new(),
        })
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Average logistic loss per positive pair, one entry per finished epoch.
    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.model.config.epochs
    }

    /// Runs one pass over the corpus and returns its average loss per positive pair.
    pub fn run_epoch(&mut self) -> f64 {
        let config = self.model.config.clone();
        let dim = config.dim;
        let n = self.tokens.len();
        let total_steps = (config.epochs.max(1) * n) as f64;
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        let mut grad_h = vec![0.0; dim];
        let components = &self.components;
        let model = &mut self.model;
        let (noise, rng) = (&self.noise, &mut self.rng);
        for i in 0..n {
            let step = (self.epochs_done * n + i) as f64;
            let lr = config.learning_rate * (1.0 - step / total_steps).max(1e-4);
            let center = self.tokens[i];
            let lo = i.saturating_sub(config.context_window);
            let hi = (i + config.context_window).min(n - 1);
            for j in lo..=hi {
                if j == i {
                    continue;
                }
                let target = self.tokens[j];
                let rows = &components[center];
                let h = mean_rows(&model.input_vectors, dim, rows);
                grad_h.fill(0.0);
                loss_sum += logistic_step(&mut model.output_vectors, &h, target, 1.0, lr, &mut grad_h);
                for _ in 0..config.negatives_per_positive {
                    let neg = loop {
                        let k = noise.sample(rng);
                        if k != target {
                            break k;
                        }
                    };
                    loss_sum += logistic_step(&mut model.output_vectors, &h, neg, 0.0, lr, &mut grad_h);
                }
                let share = 1.0 / rows.len() as f64;
                for &r in rows {
                    for (v, g) in model.input_vectors[r * dim..(r + 1) * dim].iter_mut().zip(&grad_h) {
                        *v += g * share;
                    }
                }
                pairs += 1;
            }
        }
        self.epochs_done += 1;
        let avg = loss_sum / pairs.max(1) as f64;
        self.epoch_losses.push(avg);
        avg
    }

    pub fn finish(mut self) -> EmbeddingModel {
        while !self.is_finished() {
            self.run_epoch();
        }
        self.model
    }

    pub fn into_model(self) -> EmbeddingModel {
        self.model
    }
}

/// Trains for `config.epochs` epochs. Deterministic in `(corpus, config, seed)`.
pub fn train_embeddings<S: AsRef<str>>(corpus: &[S], config: EmbeddingConfig, seed: u64) -> Result<EmbeddingModel> {
    Ok(EmbeddingTrainer::new(corpus, config, seed)?.finish())
}
