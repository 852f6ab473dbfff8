//! Corpus generation and the JSONL manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_renderable, degrade, render_word, shrink_crop, Degradation, DegradationKind, GrayImage, Sample, ShrinkSpec};
use crate::error::{Error, Result};
use crate::util::{derive_seed, parallel_map, rng_for};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub label: String,
    pub kind: DegradationKind,
    pub strength: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    /// For shrink rows, the image the crop was taken from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            dir: self.dir.clone(),
            rows: self.rows.iter().filter(|r| r.split == Some(split)).cloned().collect(),
        }
    }

    pub fn image_path(&self, row: &ManifestRow) -> PathBuf {
        self.dir.join(&row.path)
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        let loaded = parallel_map(&self.rows, |_, row| -> Result<Sample> {
            let path = self.image_path(row);
            let image = GrayImage::load_pgm(&path).map_err(|e| match e {
                Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
                other => other,
            })?;
            Ok(Sample {
                image,
                label: row.label.clone(),
                meta: Degradation {
                    kind: row.kind,
                    strength: row.strength,
                    seed: row.seed,
                },
                source_box: None,
                crop_box: None,
            })
        });
        loaded.into_iter().collect()
    }
}

pub fn write_manifest(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(Manifest {
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub lexicon: Vec<String>,
    pub renders_per_word: usize,
    /// Relative weights of each degradation kind.
    pub mix: Vec<(DegradationKind, f64)>,
    /// Strength range for non-clean samples.
    pub strength: (f64, f64),
    pub height: usize,
    /// Train / val / test fractions.
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            lexicon: Vec::new(),
            renders_per_word: 50,
            mix: vec![(DegradationKind::Clean, 1.0)],
            strength: (0.3, 1.0),
            height: 32,
            split: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.lexicon.is_empty() {
            return Err(Error::invalid("lexicon is empty"));
        }
        for w in &self.lexicon {
            check_renderable(w)?;
        }
        if self.renders_per_word == 0 {
            return Err(Error::invalid("renders_per_word must be >= 1"));
        }
        let (lo, hi) = self.strength;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("strength range {:?} must lie within [0, 1]", self.strength)));
        }
        let (a, b, c) = self.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions {:?} must be non-negative and sum to 1", self.split)));
        }
        Ok(())
    }
}

/// Builds a single sample from its derived seed.
pub(crate) fn generate_sample(config: &CorpusConfig, kinds: &WeightedIndex<f64>, index: usize) -> Result<(Sample, u64)> {
    let word = &config.lexicon[index / config.renders_per_word];
    let sample_seed = derive_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let kind = config.mix[kinds.sample(&mut rng)].0;
    let (lo, hi) = config.strength;
    let strength = if kind == DegradationKind::Clean {
        0.0
    } else if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let render_seed = rng.next_u64();
    let degrade_seed = rng.next_u64();
    let clean = render_word(word, config.height, render_seed)?;
    let mut sample = degrade(&clean, kind, strength, degrade_seed)?;
    sample.meta.seed = sample_seed;
    Ok((sample, sample_seed))
}

fn assign_splits(n: usize, split: (f64, f64, f64), seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    let n_train = (n as f64 * split.0).round() as usize;
    let n_val = ((n as f64 * split.1).round() as usize).min(n - n_train);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Renders `renders_per_word` samples per lexicon word into
/// `out_dir/images/` and writes `out_dir/manifest.jsonl`. Every sample depends
/// only on `(seed, index)`.
pub fn build_corpus(config: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("images"))?;
    let weights: Vec<f64> = config.mix.iter().map(|(_, w)| *w).collect();
    let kinds = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("degradation mix: {e}")))?;
    let n = config.lexicon.len() * config.renders_per_word;
    let splits = assign_splits(n, config.split, config.seed);
    let indices: Vec<usize> = (0..n).collect();
    let rows = parallel_map(&indices, |_, &i| -> Result<ManifestRow> {
        let (sample, sample_seed) = generate_sample(config, &kinds, i)?;
        let rel = format!("images/{i:06}.pgm");
        sample.image.save_pgm(out_dir.join(&rel))?;
        Ok(ManifestRow {
            path: rel,
            label: sample.label,
            kind: sample.meta.kind,
            strength: sample.meta.strength,
            seed: sample_seed,
            split: Some(splits[i]),
            iou: None,
            source: None,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_manifest(&rows, out_dir.join(MANIFEST_FILE))?;
    Ok(Manifest {
        dir: out_dir.to_path_buf(),
        rows,
    })
}

/// Seeded shrink crop of every sample; sample `i` uses stream `(seed, i)`.
pub fn shrink_samples(samples: &[Sample], s_max: f64, seed: u64) -> Result<Vec<Sample>> {
    parallel_map(samples, |i, s| {
        let spec = ShrinkSpec::random(&mut rng_for(seed, i as u64), s_max)?;
        shrink_crop(s, &spec)
    })
    .into_iter()
    .collect()
}

/// Writes a shrink copy of `manifest` into `out_dir` with each row's IoU recorded.
pub fn build_shrink_variant(manifest: &Manifest, s_max: f64, seed: u64, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("images"))?;
    let samples = manifest.load_samples()?;
    let shrunk = shrink_samples(&samples, s_max, seed)?;
    let mut rows = Vec::with_capacity(shrunk.len());
    for (i, (row, s)) in manifest.rows.iter().zip(&shrunk).enumerate() {
        let rel = format!("images/{i:06}.pgm");
        s.image.save_pgm(out_dir.join(&rel))?;
        rows.push(ManifestRow {
            path: rel,
            iou: s.shrink_iou(),
            source: Some(manifest.image_path(row).display().to_string()),
            ..row.clone()
        });
    }
    write_manifest(&rows, out_dir.join(MANIFEST_FILE))?;
    Ok(Manifest {
        dir: out_dir.to_path_buf(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon(n: usize) -> Vec<String> {
        ["here", "room", "first", "spoon", "merry", "finest", "cookery", "kechers", "look", "its"]
            .iter()
            .cycle()
            .take(n)
            .enumerate()
            .map(|(i, w)| if i < 10 { w.to_string() } else { format!("{w}{i}") })
            .collect()
    }

    #[test]
    fn counts_and_determinism() {
        let config = CorpusConfig {
            lexicon: lexicon(20),
            renders_per_word: 50,
            mix: vec![(DegradationKind::Clean, 2.0), (DegradationKind::Occlude, 1.0), (DegradationKind::Blur, 1.0)],
            seed: 3,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_corpus(&config, a.path()).unwrap();
        build_corpus(&config, b.path()).unwrap();
        assert_eq!(ma.rows.len(), 1000);
        let bytes_a = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let bytes_b = fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(
            fs::read(a.path().join("images/000123.pgm")).unwrap(),
            fs::read(b.path().join("images/000123.pgm")).unwrap()
        );
        assert_eq!(ma.split(Split::Train).rows.len(), 800);
        assert_eq!(ma.split(Split::Val).rows.len(), 100);
        assert_eq!(ma.split(Split::Test).rows.len(), 100);

        let reloaded = load_manifest(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded.rows, ma.rows);
    }

    #[test]
    fn shrink_variant_respects_iou_bound() {
        let config = CorpusConfig {
            lexicon: lexicon(4),
            renders_per_word: 10,
            seed: 5,
            split: (0.0, 0.0, 1.0),
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = build_corpus(&config, dir.path().join("base")).unwrap();
        let shrink = build_shrink_variant(&m, 0.15, 9, dir.path().join("shrink")).unwrap();
        assert_eq!(shrink.rows.len(), 40);
        for row in &shrink.rows {
            assert!(row.iou.unwrap() >= 0.49, "{row:?}");
            assert_eq!(row.label, m.rows.iter().find(|r| r.seed == row.seed).unwrap().label);
        }
        let loaded = shrink.load_samples().unwrap();
        assert!(loaded.iter().all(|s| s.image.in_unit_range()));
    }

    #[test]
    fn rejects_empty_lexicon_and_bad_words() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_corpus(&CorpusConfig::default(), dir.path()).is_err());
        let config = CorpusConfig {
            lexicon: vec!["two words".into()],
            ..Default::default()
        };
        assert!(build_corpus(&config, dir.path()).is_err());
    }
}
