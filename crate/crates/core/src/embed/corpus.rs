//! Small synthetic corpora with topical co-occurrence structure.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FILLERS: &[&str] = &["the", "a", "and", "with", "near", "of", "then", "very"];

const TOY_TOPICS: &[&[&str]] = &[
    &["cat", "cats", "kitten", "meow", "purr", "whiskers", "milk", "yarn"],
    &["dog", "dogs", "puppy", "bark", "fetch", "bone", "leash", "walk"],
    &["bird", "birds", "wing", "nest", "sing", "feather", "sky", "seed"],
    &["car", "cars", "road", "drive", "wheel", "engine", "fuel", "fast"],
];

fn sentences(topics: &[Vec<&str>], seed: u64, n_sentences: usize, len: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_sentences * len);
    for _ in 0..n_sentences {
        let topic = &topics[rng.random_range(0..topics.len())];
        for _ in 0..len {
            let word = if rng.random_bool(0.7) {
                topic.choose(&mut rng)
            } else {
                FILLERS.choose(&mut rng)
            };
            out.push(word.expect("non-empty word list").to_string());
        }
    }
    out
}

/// Four topics (felines, canines, birds, cars) where each word co-occurs
/// mostly with its own topic. Includes the pairs cat/cats and dog/dogs.
pub fn toy_corpus(seed: u64, n_sentences: usize) -> Vec<String> {
    let topics: Vec<Vec<&str>> = TOY_TOPICS.iter().map(|t| t.to_vec()).collect();
    sentences(&topics, seed, n_sentences, 8)
}

/// Partitions `lexicon` (in order) into topics of `topic_size` words and
/// samples sentences that draw mostly from a single topic.
pub fn topical_corpus<S: AsRef<str>>(lexicon: &[S], topic_size: usize, seed: u64, n_sentences: usize) -> Vec<String> {
    let words: Vec<&str> = lexicon.iter().map(AsRef::as_ref).collect();
    let topics: Vec<Vec<&str>> = words.chunks(topic_size.max(1)).map(|c| c.to_vec()).collect();
    if topics.is_empty() {
        return Vec::new();
    }
    sentences(&topics, seed, n_sentences, 8)
}
