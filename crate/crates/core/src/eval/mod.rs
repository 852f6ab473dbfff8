//! Word accuracy, the ablation table, the shrink experiment and the semantic probe.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{shrink_samples, Sample};
use crate::embed::{cosine, normalize, EmbeddingModel};
use crate::error::{Error, Result};
use crate::model::SeedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Case-insensitive over alphanumeric characters; everything else is dropped.
    #[default]
    Alphanumeric,
    /// Exact string equality.
    Strict,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alphanumeric" | "default" => Ok(Protocol::Alphanumeric),
            "strict" => Ok(Protocol::Strict),
            other => Err(Error::invalid(format!("unknown protocol {other:?} (expected alphanumeric or strict)"))),
        }
    }
}

impl Protocol {
    pub fn canonical(self, text: &str) -> String {
        match self {
            Protocol::Alphanumeric => text
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect(),
            Protocol::Strict => text.to_string(),
        }
    }

    pub fn matches(self, prediction: &str, label: &str) -> bool {
        self.canonical(prediction) == self.canonical(label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub label: String,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,prediction,correct\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", csv_field(&r.label), csv_field(&r.prediction), r.correct as u8);
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn word_accuracy<P: AsRef<str>, L: AsRef<str>>(
    predictions: &[P],
    labels: &[L],
    protocol: Protocol,
    dataset: &str,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid(format!("dataset {dataset:?} is empty")));
    }
    let records: Vec<SampleRecord> = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| SampleRecord {
            label: l.as_ref().to_string(),
            prediction: p.as_ref().to_string(),
            correct: protocol.matches(p.as_ref(), l.as_ref()),
        })
        .collect();
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        n: records.len(),
        correct,
        accuracy: correct as f64 / records.len() as f64,
        records,
    })
}

/// Recognises every sample and scores it against its label.
pub fn evaluate(model: &SeedModel, samples: &[Sample], beam: usize, protocol: Protocol, dataset: &str) -> Result<EvalReport> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds: Vec<String> = model.recognize(&images, beam)?.into_iter().map(|r| r.text).collect();
    let labels: Vec<&str> = samples.iter().map(|s| s.label.as_str()).collect();
    word_accuracy(&preds, &labels, protocol, dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub accuracy_full: f64,
    pub accuracy_shrink: f64,
    /// `accuracy_shrink - accuracy_full`; negative is a decline.
    pub gap: f64,
}

impl GapReport {
    pub fn new(accuracy_full: f64, accuracy_shrink: f64) -> Self {
        GapReport {
            accuracy_full,
            accuracy_shrink,
            gap: accuracy_shrink - accuracy_full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShrinkOutcome {
    pub gap: GapReport,
    pub full: EvalReport,
    pub shrink: EvalReport,
}

/// Evaluates `samples` and a seeded shrink crop of them.
pub fn run_shrink_experiment(
    model: &SeedModel,
    samples: &[Sample],
    s_max: f64,
    seed: u64,
    beam: usize,
    protocol: Protocol,
) -> Result<ShrinkOutcome> {
    let shrunk = shrink_samples(samples, s_max, seed)?;
    let full = evaluate(model, samples, beam, protocol, "full")?;
    let shrink = evaluate(model, &shrunk, beam, protocol, "shrink")?;
    Ok(ShrinkOutcome {
        gap: GapReport::new(full.accuracy, shrink.accuracy),
        full,
        shrink,
    })
}

pub fn variant_name(use_wes: bool, use_init: bool) -> &'static str {
    match (use_wes, use_init) {
        (false, false) => "baseline",
        (true, false) => "wes",
        (false, true) => "init",
        (true, true) => "wes+init",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub wes: bool,
    pub init: bool,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub datasets: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,wes,init");
        for d in &self.datasets {
            out.push(',');
            out.push_str(&csv_field(d));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.variant, mark(r.wes), mark(r.init));
            for a in &r.accuracies {
                let _ = write!(out, ",{:.4}", a);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["variant".to_string(), "WES".into(), "INIT".into()];
        header.extend(self.datasets.iter().cloned());
        let mut rows = vec![header];
        for r in &self.rows {
            let mut row = vec![r.variant.clone(), mark(r.wes).into(), mark(r.init).into()];
            row.extend(r.accuracies.iter().map(|a| format!("{:.1}", 100.0 * a)));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in rows {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Accuracy of every model on every dataset. Rows take their WES/INIT flags
/// from the models' own configs, which must otherwise agree.
pub fn run_ablation(
    models: &[SeedModel],
    datasets: &[(String, Vec<Sample>)],
    beam: usize,
    protocol: Protocol,
) -> Result<AblationTable> {
    let first = models.first().ok_or_else(|| Error::invalid("ablation needs at least one checkpoint"))?;
    for m in &models[1..] {
        first.config().check_compatible(m.config())?;
    }
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        let (wes, init) = (m.config().use_wes, m.config().use_init);
        let accuracies = datasets
            .iter()
            .map(|(name, samples)| evaluate(m, samples, beam, protocol, name).map(|r| r.accuracy))
            .collect::<Result<_>>()?;
        rows.push(AblationRow {
            variant: variant_name(wes, init).into(),
            wes,
            init,
            accuracies,
        });
    }
    Ok(AblationTable {
        datasets: datasets.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub label: String,
    /// Cosine to each lexicon word, in lexicon order.
    pub similarities: Vec<f64>,
    /// Lexicon indices from most to least similar.
    pub ranking: Vec<usize>,
    /// 1-based rank of the label, if it is in the lexicon.
    pub gt_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub lexicon: Vec<String>,
    pub rows: Vec<ProbeRow>,
}

impl ProbeResult {
    /// Fraction of rows whose label ranks within the top `fraction` of the lexicon.
    pub fn fraction_in_top(&self, fraction: f64) -> f64 {
        let cutoff = (fraction * self.lexicon.len() as f64).floor().max(1.0) as usize;
        let hits = self.rows.iter().filter(|r| r.gt_rank.is_some_and(|k| k <= cutoff)).count();
        hits as f64 / self.rows.len().max(1) as f64
    }

    /// Median ground-truth rank over rows with a rank.
    pub fn median_rank(&self) -> Option<f64> {
        let mut ranks: Vec<usize> = self.rows.iter().filter_map(|r| r.gt_rank).collect();
        if ranks.is_empty() {
            return None;
        }
        ranks.sort_unstable();
        let n = ranks.len();
        Some(if n % 2 == 1 {
            ranks[n / 2] as f64
        } else {
            (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,label,gt_rank,ranked");
        for w in &self.lexicon {
            out.push(',');
            out.push_str(&csv_field(w));
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let ranked: Vec<&str> = r.ranking.iter().map(|&j| self.lexicon[j].as_str()).collect();
            let rank = r.gt_rank.map(|k| k.to_string()).unwrap_or_default();
            let _ = write!(out, "{i},{},{rank},{}", csv_field(&r.label), csv_field(&ranked.join(" ")));
            for s in &r.similarities {
                let _ = write!(out, ",{s:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Cosine between each image's predicted semantics and the composed embedding
/// of every lexicon word. Ties rank in lexicon order.
pub fn semantic_probe<S: AsRef<str>>(
    model: &SeedModel,
    embeddings: &EmbeddingModel,
    samples: &[Sample],
    lexicon: &[S],
) -> Result<ProbeResult> {
    if lexicon.is_empty() {
        return Err(Error::invalid("probe lexicon is empty"));
    }
    if embeddings.dim() != model.config().semantic_dim {
        return Err(Error::ConfigMismatch(format!(
            "embedding dim {} vs semantic dim {}",
            embeddings.dim(),
            model.config().semantic_dim
        )));
    }
    let lexicon: Vec<String> = lexicon.iter().map(|w| w.as_ref().to_string()).collect();
    let targets: Vec<Vec<f64>> = lexicon.iter().map(|w| embeddings.compose_embedding(w)).collect();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let recognized = model.recognize(&images, 1)?;
    let rows = samples
        .iter()
        .zip(recognized)
        .map(|(sample, rec)| {
            let similarities: Vec<f64> = targets.iter().map(|t| cosine(&rec.semantics, t)).collect();
            let mut ranking: Vec<usize> = (0..lexicon.len()).collect();
            ranking.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
            let label = normalize(&sample.label);
            let gt_rank = ranking
                .iter()
                .position(|&j| normalize(&lexicon[j]) == label)
                .map(|p| p + 1);
            ProbeRow {
                label: sample.label.clone(),
                similarities,
                ranking,
                gt_rank,
            }
        })
        .collect();
    Ok(ProbeResult { lexicon, rows })
}
