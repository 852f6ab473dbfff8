//! The end-to-end experiment: corpus, embeddings, the four ablation variants,
//! and the ablation, gap and probe tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{build_corpus, degrade, CorpusConfig, DegradationKind, Sample, Split};
use crate::embed::{save_embeddings, topical_corpus, train_embeddings, EmbeddingConfig, EmbeddingModel};
use crate::error::{Error, Result};
use crate::eval::{run_ablation, run_shrink_experiment, semantic_probe, variant_name, AblationTable, GapReport, ProbeResult, Protocol};
use crate::model::{save_checkpoint, ModelConfig};
use crate::train::{train_model, write_metrics, TrainConfig, TrainOutcome};
use crate::util::{derive_seed, parallel_map};

/// Words rendered into images.
pub const LEXICON: [&str; 20] = [
    "apple", "river", "stone", "light", "house", "green", "music", "paper", "table", "water", "dream", "night",
    "cloud", "storm", "plant", "bread", "smile", "chair", "train", "money",
];

/// Words that only occur in the embedding corpus and the probe lexicon.
pub const DISTRACTORS: [&str; 30] = [
    "tiger", "glass", "ocean", "candle", "forest", "winter", "garden", "silver", "window", "horse", "letter",
    "summer", "bottle", "castle", "rocket", "pencil", "island", "basket", "violin", "harbor", "ladder", "meadow",
    "orange", "planet", "rabbit", "shadow", "tunnel", "valley", "wizard", "yellow",
];

/// Flag pairs in ablation-table order.
pub const VARIANTS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

pub fn probe_lexicon() -> Vec<String> {
    LEXICON.iter().chain(DISTRACTORS.iter()).map(|w| w.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// Lexicon for the embedding corpus and the semantic probe.
    pub probe_lexicon: Vec<String>,
    pub topic_size: usize,
    pub embedding_sentences: usize,
    pub embedding: EmbeddingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: usize,
    pub protocol: Protocol,
    pub s_max: f64,
}

impl Default for ExperimentConfig {
    /// 20 words, 125 clean renders each (2,000 training images), the compact
    /// network, 10 epochs of batch 16.
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus: CorpusConfig {
                lexicon: LEXICON.iter().map(|w| w.to_string()).collect(),
                renders_per_word: 125,
                ..Default::default()
            },
            probe_lexicon: probe_lexicon(),
            topic_size: 5,
            embedding_sentences: 2000,
            embedding: EmbeddingConfig::default(),
            model: ModelConfig::compact(),
            train: TrainConfig {
                batch_size: 16,
                ..Default::default()
            },
            beam: 5,
            protocol: Protocol::Alphanumeric,
            s_max: crate::datagen::DEFAULT_S_MAX,
        }
    }
}

impl ExperimentConfig {
    /// A short run over a corpus with every degradation kind.
    pub fn demo() -> Self {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            corpus: CorpusConfig {
                renders_per_word: 60,
                mix: vec![
                    (DegradationKind::Clean, 1.0),
                    (DegradationKind::Blur, 1.0),
                    (DegradationKind::Occlude, 1.0),
                    (DegradationKind::Noise, 1.0),
                ],
                ..base.corpus.clone()
            },
            train: TrainConfig {
                epochs: 6,
                ..base.train.clone()
            },
            ..base
        }
    }

    /// Sets the master seed and the per-stage seeds derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = derive_seed(seed, 1);
        self.train.seed = derive_seed(seed, 2);
        self
    }

    pub fn embedding_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }

    pub fn shrink_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.embedding.validate()?;
        if self.embedding.dim != self.model.semantic_dim {
            return Err(Error::ConfigMismatch(format!(
                "embedding dim {} vs semantic dim {}",
                self.embedding.dim, self.model.semantic_dim
            )));
        }
        if self.probe_lexicon.is_empty() || self.topic_size == 0 || self.embedding_sentences == 0 {
            return Err(Error::invalid("probe lexicon, topic size and embedding sentences must be non-empty"));
        }
        if self.beam == 0 {
            return Err(Error::invalid("beam width must be >= 1"));
        }
        Ok(())
    }

    pub fn train_embeddings(&self) -> Result<EmbeddingModel> {
        let corpus = topical_corpus(&self.probe_lexicon, self.topic_size, self.embedding_seed(), self.embedding_sentences);
        train_embeddings(&corpus, self.embedding.clone(), self.embedding_seed())
    }

    pub fn train_variant(
        &self,
        use_wes: bool,
        use_init: bool,
        train: &[Sample],
        val: &[Sample],
        embeddings: &EmbeddingModel,
    ) -> Result<TrainOutcome> {
        let model = self.model.clone().with_flags(use_wes, use_init);
        train_model(&model, &self.train, train, val, Some(embeddings))
    }
}

/// Applies one degradation to every sample, with strengths drawn per sample from `strength`.
pub fn degrade_all(samples: &[Sample], kind: DegradationKind, strength: (f64, f64), seed: u64) -> Result<Vec<Sample>> {
    use rand::Rng;
    let (lo, hi) = strength;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!("strength range {strength:?} must lie within [0, 1]")));
    }
    parallel_map(samples, |i, s| {
        let mut rng = crate::util::rng_for(seed, i as u64);
        let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        degrade(s, kind, v, rng.random())
    })
    .into_iter()
    .collect()
}

/// Test samples grouped by degradation kind, in kind order, skipping empty groups.
pub fn group_by_kind(samples: &[Sample]) -> Vec<(String, Vec<Sample>)> {
    let kinds = [
        DegradationKind::Clean,
        DegradationKind::Blur,
        DegradationKind::Occlude,
        DegradationKind::Noise,
    ];
    kinds
        .iter()
        .map(|&k| (k.to_string(), samples.iter().filter(|s| s.meta.kind == k).cloned().collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub variant: String,
    pub wes: bool,
    pub init: bool,
    pub report: GapReport,
}

pub fn gap_csv(rows: &[GapRow]) -> String {
    let mut out = String::from("variant,wes,init,full,shrink,gap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4}",
            r.variant,
            if r.wes { "yes" } else { "no" },
            if r.init { "yes" } else { "no" },
            r.report.accuracy_full,
            r.report.accuracy_shrink,
            r.report.gap
        );
    }
    out
}

pub struct DemoOutput {
    pub dir: PathBuf,
    pub ablation: AblationTable,
    pub gaps: Vec<GapRow>,
    pub probe: ProbeResult,
}

pub const CONFIG_FILE: &str = "config.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GAP_FILE: &str = "gap.csv";
pub const PROBE_FILE: &str = "probe.csv";

pub fn checkpoint_file(use_wes: bool, use_init: bool) -> String {
    format!("{}.ckpt", variant_name(use_wes, use_init))
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Generates the corpus, trains embeddings and the four variants, and writes
/// every artifact under `out`:
///
/// - `config.json`, `embeddings.bin`
/// - `corpus/manifest.jsonl` and its images
/// - `models/<variant>.ckpt` and `models/<variant>.metrics.jsonl`
/// - `ablation.csv` (test split by degradation kind), `gap.csv`, `probe.csv`
pub fn pipeline_demo(config: &ExperimentConfig, out: impl AsRef<Path>) -> Result<DemoOutput> {
    config.validate()?;
    let out = out.as_ref();
    let models_dir = out.join("models");
    fs::create_dir_all(&models_dir)?;
    write_json(config, out.join(CONFIG_FILE))?;

    let manifest = build_corpus(&config.corpus, out.join("corpus"))?;
    let train = manifest.split(Split::Train).load_samples()?;
    let val = manifest.split(Split::Val).load_samples()?;
    let test = manifest.split(Split::Test).load_samples()?;
    if test.is_empty() {
        return Err(Error::invalid("the corpus test split is empty"));
    }
    log::info!("corpus: {} train, {} val, {} test", train.len(), val.len(), test.len());

    let embeddings = config.train_embeddings()?;
    save_embeddings(&embeddings, out.join("embeddings.bin"))?;

    let mut models = Vec::with_capacity(VARIANTS.len());
    for (wes, init) in VARIANTS {
        log::info!("training {}", variant_name(wes, init));
        let outcome = config.train_variant(wes, init, &train, &val, &embeddings)?;
        save_checkpoint(&outcome.model, models_dir.join(checkpoint_file(wes, init)))?;
        write_metrics(
            &outcome.metrics,
            models_dir.join(format!("{}.metrics.jsonl", variant_name(wes, init))),
        )?;
        models.push(outcome.model.inference());
    }

    let ablation = run_ablation(&models, &group_by_kind(&test), config.beam, config.protocol)?;
    fs::write(out.join(ABLATION_FILE), ablation.to_csv())?;

    let mut gaps = Vec::with_capacity(models.len());
    for m in &models {
        let outcome = run_shrink_experiment(m, &test, config.s_max, config.shrink_seed(), config.beam, config.protocol)?;
        let (wes, init) = (m.config().use_wes, m.config().use_init);
        gaps.push(GapRow {
            variant: variant_name(wes, init).into(),
            wes,
            init,
            report: outcome.gap,
        });
    }
    fs::write(out.join(GAP_FILE), gap_csv(&gaps))?;

    let clean: Vec<Sample> = test.iter().filter(|s| s.meta.kind == DegradationKind::Clean).cloned().collect();
    let probe_set = if clean.is_empty() { &test } else { &clean };
    let probe = semantic_probe(&models[3], &embeddings, probe_set, &config.probe_lexicon)?;
    fs::write(out.join(PROBE_FILE), probe.to_csv())?;

    Ok(DemoOutput {
        dir: out.to_path_buf(),
        ablation,
        gaps,
        probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render_word;

    #[test]
    fn lexicons_are_disjoint_and_renderable() {
        let all = probe_lexicon();
        assert_eq!(all.len(), 50);
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 50);
        for w in &all {
            crate::datagen::check_renderable(w).unwrap();
        }
    }

    #[test]
    fn default_config_is_consistent() {
        let c = ExperimentConfig::default().with_seed(3);
        c.validate().unwrap();
        assert_eq!(c.corpus.lexicon.len() * c.corpus.renders_per_word, 2500);
        assert_ne!(c.corpus.seed, c.train.seed);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
        ExperimentConfig::demo().validate().unwrap();
    }

    #[test]
    fn degrade_all_keeps_labels_and_is_seeded() {
        let clean: Vec<Sample> = ["ab", "cd", "ef"].iter().enumerate().map(|(i, w)| render_word(w, 32, i as u64).unwrap()).collect();
        let a = degrade_all(&clean, DegradationKind::Occlude, (0.3, 1.0), 9).unwrap();
        let b = degrade_all(&clean, DegradationKind::Occlude, (0.3, 1.0), 9).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&clean) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.meta.kind, DegradationKind::Occlude);
        }
        assert!(degrade_all(&clean, DegradationKind::Blur, (0.5, 0.2), 0).is_err());
        let groups = group_by_kind(&[a, clean].concat());
        assert_eq!(groups.iter().map(|(n, v)| (n.as_str(), v.len())).collect::<Vec<_>>(), vec![("clean", 3), ("occlude", 3)]);
    }
}
