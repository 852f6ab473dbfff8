use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use seedtext::datagen::{
    build_corpus, build_shrink_variant, load_manifest, CorpusConfig, DegradationKind, Manifest, Sample, Split,
    MANIFEST_FILE,
};
use seedtext::embed::{load_embeddings, save_embeddings, topical_corpus, toy_corpus, train_embeddings, EmbeddingConfig};
use seedtext::eval::{evaluate, run_ablation, semantic_probe, variant_name, GapReport, Protocol};
use seedtext::gradsuite::{run_gradient_suite, DEFAULT_SEEDS, MODEL_TOLERANCE, OP_TOLERANCE};
use seedtext::model::{load_checkpoint, save_checkpoint, CharVocab, ModelConfig, SeedModel, Strategy};
use seedtext::pipeline::{self, gap_csv, group_by_kind, pipeline_demo, write_json, ExperimentConfig, GapRow};
use seedtext::train::{train_model, write_metrics, TrainConfig};

#[derive(Parser)]
#[command(
    name = "seedtext",
    version,
    about = "Semantics-enhanced attention recognizer for word images",
    arg_required_else_help = true
)]
struct Cli {
    /// JSON file whose keys mirror the subcommand's flag names; flags given on
    /// the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a word-image corpus with a JSONL manifest
    Gen(GenArgs),
    /// Train subword skip-gram embeddings
    Embed(EmbedArgs),
    /// Train one recognizer variant
    Train(TrainArgs),
    /// Word accuracy of a checkpoint on a manifest split
    Eval(EvalArgs),
    /// Accuracy of four variants on every degradation kind of a split
    Ablate(AblateArgs),
    /// Accuracy before and after shrink-cropping a split
    ShrinkEval(ShrinkArgs),
    /// Rank lexicon words by cosine to the predicted semantics
    Probe(ProbeArgs),
    /// Finite-difference check of every op and the full model loss
    Gradcheck(GradArgs),
    /// Run the whole pipeline at small scale
    Demo(DemoArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct GenArgs {
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated words to render
    #[arg(long, value_delimiter = ',')]
    words: Option<Vec<String>>,
    /// File with one word per line (instead of --words)
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    renders_per_word: Option<usize>,
    /// Degradation weights, e.g. clean=1,occlude=0.5
    #[arg(long)]
    mix: Option<String>,
    /// Strength range for degraded samples, e.g. 0.3,1.0
    #[arg(long, value_delimiter = ',')]
    strength: Option<Vec<f64>>,
    #[arg(long)]
    height: Option<usize>,
    /// Train, val and test fractions, e.g. 0.8,0.1,0.1
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct EmbedArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Whitespace-tokenized training text
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Use the built-in four-topic toy corpus
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    toy: Option<bool>,
    /// Words for a generated topical corpus (default: the demo probe lexicon)
    #[arg(long, value_delimiter = ',')]
    words: Option<Vec<String>>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    topic_size: Option<usize>,
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    l_min: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Manifest file or the directory holding it
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, alias = "emb")]
    embeddings: Option<PathBuf>,
    /// Supervise the semantics with word embeddings
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    wes: Option<bool>,
    /// Initialize the decoder state from the semantics
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    init: Option<bool>,
    /// predicted or gt-embedding
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Network size: default, compact or tiny
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    val_beam: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, val, test or all
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    /// alphanumeric or strict
    #[arg(long)]
    protocol: Option<Protocol>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct AblateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated checkpoints, one per variant
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<PathBuf>>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    protocol: Option<Protocol>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ShrinkArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated checkpoints
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<PathBuf>>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Largest crop fraction per side
    #[arg(long)]
    s_max: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ProbeArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated probe lexicon (default: the 50-word demo lexicon)
    #[arg(long, value_delimiter = ',')]
    words: Option<Vec<String>>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct GradArgs {
    /// Optional directory for the JSON report
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random draws per check
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct DemoArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    renders_per_word: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    preset: Option<String>,
}

/// Overlays the non-null flag values on the config file's object.
fn resolve<T: Serialize + DeserializeOwned>(flags: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(flags);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut merged: Map<String, Value> =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Value::Object(given) = serde_json::to_value(&flags)? {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).with_context(|| format!("config {}", path.display()))
}

fn require<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| anyhow!("missing required --{flag}"))
}

fn create_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = require(out, "out")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn open_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    load_manifest(&file).with_context(|| format!("loading manifest {}", file.display()))
}

fn select_split(manifest: &Manifest, split: &str) -> Result<Manifest> {
    Ok(match split {
        "all" => manifest.clone(),
        "train" => manifest.split(Split::Train),
        "val" => manifest.split(Split::Val),
        "test" => manifest.split(Split::Test),
        other => bail!("unknown split {other:?} (expected train, val, test or all)"),
    })
}

fn load_split(data: &Option<PathBuf>, split: &str) -> Result<Vec<Sample>> {
    let manifest = open_manifest(&require(data, "data")?)?;
    let samples = select_split(&manifest, split)?.load_samples()?;
    if samples.is_empty() {
        bail!("split {split:?} of {} is empty", manifest.dir.display());
    }
    Ok(samples)
}

fn read_words(words: &Option<Vec<String>>, lexicon: &Option<PathBuf>) -> Result<Option<Vec<String>>> {
    match (words, lexicon) {
        (Some(_), Some(_)) => bail!("give either --words or --lexicon, not both"),
        (Some(w), None) => Ok(Some(w.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading lexicon {}", path.display()))?;
            Ok(Some(text.split_whitespace().map(String::from).collect()))
        }
        (None, None) => Ok(None),
    }
}

fn parse_mix(text: &str) -> Result<Vec<(DegradationKind, f64)>> {
    text.split(',')
        .map(|part| {
            let (kind, weight) = part.split_once('=').ok_or_else(|| anyhow!("mix entry {part:?} is not kind=weight"))?;
            Ok((kind.trim().parse()?, weight.trim().parse().with_context(|| format!("mix weight {weight:?}"))?))
        })
        .collect()
}

fn pair(v: &[f64], name: &str) -> Result<(f64, f64)> {
    match v {
        [a, b] => Ok((*a, *b)),
        _ => bail!("--{name} takes two comma-separated values"),
    }
}

fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "default" => ModelConfig::default(),
        "compact" => ModelConfig::compact(),
        "tiny" => ModelConfig::tiny(CharVocab::printable()),
        other => bail!("unknown preset {other:?} (expected default, compact or tiny)"),
    })
}

fn load_model(path: &Path) -> Result<SeedModel> {
    Ok(load_checkpoint(path, None)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .inference())
}

fn gen(a: GenArgs) -> Result<String> {
    let out = create_out(&a.out)?;
    let d = CorpusConfig::default();
    let mut config = CorpusConfig {
        lexicon: read_words(&a.words, &a.lexicon)?
            .unwrap_or_else(|| pipeline::LEXICON.iter().map(|w| w.to_string()).collect()),
        renders_per_word: a.renders_per_word.unwrap_or(d.renders_per_word),
        mix: a.mix.as_deref().map(parse_mix).transpose()?.unwrap_or(d.mix),
        strength: a.strength.as_deref().map(|v| pair(v, "strength")).transpose()?.unwrap_or(d.strength),
        height: a.height.unwrap_or(d.height),
        split: d.split,
        seed: a.seed.unwrap_or(0),
    };
    if let Some(s) = &a.split {
        match s.as_slice() {
            [x, y, z] => config.split = (*x, *y, *z),
            _ => bail!("--split takes three comma-separated fractions"),
        }
    }
    write_json(&json!({ "command": "gen", "out": out, "corpus": config }), out.join(pipeline::CONFIG_FILE))?;
    let manifest = build_corpus(&config, &out)?;
    let count = |s| manifest.rows.iter().filter(|r| r.split == Some(s)).count();
    Ok(format!(
        "gen: {} samples ({} train, {} val, {} test) -> {}",
        manifest.rows.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.join(MANIFEST_FILE).display()
    ))
}

fn embed(a: EmbedArgs) -> Result<String> {
    let out = create_out(&a.out)?;
    let d = EmbeddingConfig::default();
    let config = EmbeddingConfig {
        dim: a.dim.unwrap_or(d.dim),
        l_min: a.l_min.unwrap_or(d.l_min),
        l_max: a.l_max.unwrap_or(d.l_max),
        context_window: a.window.unwrap_or(d.context_window),
        negatives_per_positive: a.negatives.unwrap_or(d.negatives_per_positive),
        epochs: a.epochs.unwrap_or(d.epochs),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
    };
    let seed = a.seed.unwrap_or(0);
    let sentences = a.sentences.unwrap_or(2000);
    let topic_size = a.topic_size.unwrap_or(5);
    let words = read_words(&a.words, &a.lexicon)?;
    let toy = a.toy.unwrap_or(false);
    let (source, corpus) = match (&a.corpus, toy, &words) {
        (Some(path), false, None) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
            (json!({ "file": path }), text.split_whitespace().map(String::from).collect::<Vec<_>>())
        }
        (None, true, None) => (json!({ "toy": true, "sentences": sentences }), toy_corpus(seed, sentences)),
        (None, false, _) => {
            let words = words.unwrap_or_else(pipeline::probe_lexicon);
            let corpus = topical_corpus(&words, topic_size, seed, sentences);
            (json!({ "topical": words, "topic-size": topic_size, "sentences": sentences }), corpus)
        }
        _ => bail!("give at most one of --corpus, --toy and --words/--lexicon"),
    };
    write_json(
        &json!({ "command": "embed", "out": out, "seed": seed, "source": source, "embedding": config }),
        out.join(pipeline::CONFIG_FILE),
    )?;
    let model = train_embeddings(&corpus, config, seed)?;
    let path = out.join("embeddings.bin");
    save_embeddings(&model, &path)?;
    Ok(format!(
        "embed: {} words, {} subwords, dim {} -> {}",
        model.words().len(),
        model.subwords().len(),
        model.dim(),
        path.display()
    ))
}

fn train(a: TrainArgs) -> Result<String> {
    let data = require(&a.data, "data")?;
    let out = create_out(&a.out)?;
    let embeddings = a
        .embeddings
        .as_ref()
        .map(|p| load_embeddings(p).with_context(|| format!("loading embeddings {}", p.display())))
        .transpose()?;
    let mut model = preset(a.preset.as_deref().unwrap_or("compact"))?
        .with_flags(a.wes.unwrap_or(false), a.init.unwrap_or(false));
    if let Some(e) = &embeddings {
        model.semantic_dim = e.dim();
    }
    let d = TrainConfig::default();
    let config = TrainConfig {
        lambda: a.lambda.unwrap_or(d.lambda),
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        seed: a.seed.unwrap_or(d.seed),
        strategy: a.strategy.unwrap_or(d.strategy),
        val_beam: a.val_beam.unwrap_or(d.val_beam),
        ..d
    };
    write_json(
        &json!({
            "command": "train",
            "out": out,
            "data": data,
            "embeddings": a.embeddings,
            "model": model,
            "train": config,
        }),
        out.join(pipeline::CONFIG_FILE),
    )?;
    let manifest = open_manifest(&data)?;
    let train = manifest.split(Split::Train).load_samples()?;
    let val = manifest.split(Split::Val).load_samples()?;
    let outcome = train_model(&model, &config, &train, &val, embeddings.as_ref())?;
    let path = out.join("model.ckpt");
    save_checkpoint(&outcome.model, &path)?;
    write_metrics(&outcome.metrics, out.join("metrics.jsonl"))?;
    let last = outcome.metrics.last().ok_or_else(|| anyhow!("no epochs ran"))?;
    Ok(format!(
        "train: {} for {} epochs on {} samples, final l_rec {:.4} l_sem {:.4} val_acc {} -> {}",
        variant_name(model.use_wes, model.use_init),
        config.epochs,
        train.len(),
        last.l_rec,
        last.l_sem,
        last.val_acc.map_or("n/a".into(), |v| format!("{v:.4}")),
        path.display()
    ))
}

fn eval(a: EvalArgs) -> Result<String> {
    let model_path = require(&a.model, "model")?;
    require(&a.data, "data")?;
    let out = create_out(&a.out)?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let beam = a.beam.unwrap_or(5);
    let protocol = a.protocol.unwrap_or_default();
    write_json(
        &json!({ "command": "eval", "out": out, "model": model_path, "data": a.data, "split": split, "beam": beam, "protocol": protocol }),
        out.join(pipeline::CONFIG_FILE),
    )?;
    let model = load_model(&model_path)?;
    let samples = load_split(&a.data, &split)?;
    let report = evaluate(&model, &samples, beam, protocol, &split)?;
    fs::write(out.join("eval.csv"), report.to_csv())?;
    Ok(format!(
        "eval: accuracy {:.4} ({}/{}) on {split}",
        report.accuracy, report.correct, report.n
    ))
}

fn ablate(a: AblateArgs) -> Result<String> {
    let paths = require(&a.models, "models")?;
    require(&a.data, "data")?;
    let out = create_out(&a.out)?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let beam = a.beam.unwrap_or(5);
    let protocol = a.protocol.unwrap_or_default();
    write_json(
        &json!({ "command": "ablate", "out": out, "models": paths, "data": a.data, "split": split, "beam": beam, "protocol": protocol }),
        out.join(pipeline::CONFIG_FILE),
    )?;
    let models = paths.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let samples = load_split(&a.data, &split)?;
    let table = run_ablation(&models, &group_by_kind(&samples), beam, protocol)?;
    fs::write(out.join(pipeline::ABLATION_FILE), table.to_csv())?;
    fs::write(out.join("ablation.txt"), table.to_text())?;
    Ok(format!(
        "ablate: {} variants x {} datasets -> {}",
        table.rows.len(),
        table.datasets.len(),
        out.join(pipeline::ABLATION_FILE).display()
    ))
}

fn shrink_eval(a: ShrinkArgs) -> Result<String> {
    let paths = require(&a.models, "models")?;
    let data = require(&a.data, "data")?;
    let out = create_out(&a.out)?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let beam = a.beam.unwrap_or(5);
    let protocol = a.protocol.unwrap_or_default();
    let s_max = a.s_max.unwrap_or(seedtext::datagen::DEFAULT_S_MAX);
    let seed = a.seed.unwrap_or(0);
    write_json(
        &json!({
            "command": "shrink-eval", "out": out, "models": paths, "data": data, "split": split,
            "s-max": s_max, "beam": beam, "protocol": protocol, "seed": seed,
        }),
        out.join(pipeline::CONFIG_FILE),
    )?;
    let full = select_split(&open_manifest(&data)?, &split)?;
    if full.rows.is_empty() {
        bail!("split {split:?} of {} is empty", data.display());
    }
    let shrunk = build_shrink_variant(&full, s_max, seed, out.join("shrink"))?;
    let (full, shrunk) = (full.load_samples()?, shrunk.load_samples()?);
    let mut rows = Vec::with_capacity(paths.len());
    for p in &paths {
        let m = load_model(p)?;
        let a_full = evaluate(&m, &full, beam, protocol, "full")?.accuracy;
        let a_shrink = evaluate(&m, &shrunk, beam, protocol, "shrink")?.accuracy;
        let (wes, init) = (m.config().use_wes, m.config().use_init);
        rows.push(GapRow {
            variant: variant_name(wes, init).into(),
            wes,
            init,
            report: GapReport::new(a_full, a_shrink),
        });
    }
    fs::write(out.join(pipeline::GAP_FILE), gap_csv(&rows))?;
    let parts: Vec<String> = rows.iter().map(|r| format!("{} {:+.4}", r.variant, r.report.gap)).collect();
    Ok(format!("shrink-eval: gap {} -> {}", parts.join(", "), out.join(pipeline::GAP_FILE).display()))
}

fn probe(a: ProbeArgs) -> Result<String> {
    let (model_path, emb_path) = (require(&a.model, "model")?, require(&a.embeddings, "embeddings")?);
    require(&a.data, "data")?;
    let out = create_out(&a.out)?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let lexicon = read_words(&a.words, &a.lexicon)?.unwrap_or_else(pipeline::probe_lexicon);
    write_json(
        &json!({
            "command": "probe", "out": out, "model": model_path, "embeddings": emb_path,
            "data": a.data, "split": split, "lexicon": lexicon,
        }),
        out.join(pipeline::CONFIG_FILE),
    )?;
    let model = load_model(&model_path)?;
    let embeddings = load_embeddings(&emb_path).with_context(|| format!("loading embeddings {}", emb_path.display()))?;
    let samples = load_split(&a.data, &split)?;
    let result = semantic_probe(&model, &embeddings, &samples, &lexicon)?;
    fs::write(out.join(pipeline::PROBE_FILE), result.to_csv())?;
    Ok(format!(
        "probe: {:.4} of {} images rank their word in the top 20% of {} words, median rank {}",
        result.fraction_in_top(0.2),
        result.rows.len(),
        lexicon.len(),
        result.median_rank().map_or("n/a".into(), |r| r.to_string())
    ))
}

fn gradcheck(a: GradArgs) -> Result<String> {
    let seed = a.seed.unwrap_or(0);
    let seeds = a.seeds.unwrap_or(DEFAULT_SEEDS);
    let report = run_gradient_suite(seed, seeds)?;
    if a.out.is_some() {
        let out = create_out(&a.out)?;
        write_json(&json!({ "command": "gradcheck", "seed": seed, "seeds": seeds }), out.join(pipeline::CONFIG_FILE))?;
        write_json(&report, out.join("gradcheck.json"))?;
    }
    for e in report.entries.iter().filter(|e| !e.passed()) {
        eprintln!("{}: max relative error {:.3e} exceeds {:.0e}", e.name, e.max_error, e.tolerance);
    }
    let line = format!(
        "gradcheck: {} checks x {seeds} seeds, max relative error {:.3e} (tolerance {OP_TOLERANCE:.0e} ops, {MODEL_TOLERANCE:.0e} model)",
        report.entries.len(),
        report.max_error()
    );
    if !report.passed() {
        bail!("{line}: FAILED");
    }
    Ok(line)
}

fn demo(a: DemoArgs) -> Result<String> {
    let out = require(&a.out, "out")?;
    let mut config = ExperimentConfig::demo().with_seed(a.seed.unwrap_or(0));
    if let Some(n) = a.renders_per_word {
        config.corpus.renders_per_word = n;
    }
    if let Some(n) = a.epochs {
        config.train.epochs = n;
    }
    if let Some(n) = a.batch_size {
        config.train.batch_size = n;
    }
    if let Some(p) = &a.preset {
        let semantic_dim = config.model.semantic_dim;
        config.model = ModelConfig {
            semantic_dim,
            ..preset(p)?
        };
    }
    let result = pipeline_demo(&config, &out)?;
    let clean = result.ablation.datasets.iter().position(|d| d == "clean").unwrap_or(0);
    let accs: Vec<String> = result
        .ablation
        .rows
        .iter()
        .map(|r| format!("{} {:.4}", r.variant, r.accuracies.get(clean).copied().unwrap_or(f64::NAN)))
        .collect();
    Ok(format!(
        "demo: {} accuracy {}; probe top-20% {:.4} -> {}",
        result.ablation.datasets.get(clean).map_or("", String::as_str),
        accs.join(", "),
        result.probe.fraction_in_top(0.2),
        out.display()
    ))
}

fn run(cli: Cli) -> Result<String> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Gen(a) => gen(resolve(a, file)?),
        Command::Embed(a) => embed(resolve(a, file)?),
        Command::Train(a) => train(resolve(a, file)?),
        Command::Eval(a) => eval(resolve(a, file)?),
        Command::Ablate(a) => ablate(resolve(a, file)?),
        Command::ShrinkEval(a) => shrink_eval(resolve(a, file)?),
        Command::Probe(a) => probe(resolve(a, file)?),
        Command::Gradcheck(a) => gradcheck(resolve(a, file)?),
        Command::Demo(a) => demo(resolve(a, file)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
