//! The joint objective, ADADELTA, the step learning-rate schedule and the training loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::embed::{cosine, EmbeddingModel};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Protocol};
use crate::model::{ModelConfig, ParamStore, SeedModel, Strategy};
use crate::tensor::Tensor;
use crate::util::{derive_seed, rng_for};

/// Mean over non-PAD steps of `-log softmax(logits)[target]`. `logits[t]` is
/// `[B, V]` and `targets[b][t]` the symbol expected at step `t`.
pub fn recognition_loss(logits: &[Tensor], targets: &[Vec<usize>], pad: usize) -> Result<Tensor> {
    let steps = logits.len();
    let batch = targets.len();
    if steps == 0 || targets.iter().any(|t| t.len() != steps) || logits.iter().any(|l| l.shape()[0] != batch) {
        return Err(Error::invalid(format!(
            "recognition_loss: {steps} logit steps do not match {batch} target rows"
        )));
    }
    let v = logits[0].shape()[1];
    let mut mask = vec![0.0; steps * batch * v];
    let mut count = 0usize;
    for t in 0..steps {
        for (b, row) in targets.iter().enumerate() {
            let s = row[t];
            if s == pad {
                continue;
            }
            if s >= v {
                return Err(Error::invalid(format!("target symbol {s} outside {v} classes")));
            }
            mask[(t * batch + b) * v + s] = 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("recognition_loss: every target is PAD"));
    }
    let all = Tensor::concat(logits, 0)?;
    let mask = Tensor::new(&[steps * batch, v], mask)?;
    Ok(all.log_softmax().mul(&mask)?.sum().scale(-1.0 / count as f64))
}

/// Mean of `1 - cos(S, em)` over the batch; a degenerate row counts as 1.
pub fn semantic_loss(semantics: &Tensor, em: &Tensor) -> Result<Tensor> {
    Ok(semantics.cosine(em)?.one_minus().mean())
}

/// `1 - cos(s, em)`, defined as 1 when either vector is degenerate.
pub fn semantic_loss_value(s: &[f64], em: &[f64]) -> f64 {
    1.0 - cosine(s, em)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_sem: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `total = l_rec + lambda * l_sem`, rejecting non-finite components.
pub fn total_loss(l_rec: f64, l_sem: f64, lambda: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_rec", l_rec), ("l_sem", l_sem), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_rec,
        l_sem,
        total: l_rec + lambda * l_sem,
        lambda,
    })
}

/// One ADADELTA update of a flat parameter, in place.
pub fn adadelta_step(
    param: &mut [f64],
    grad: &[f64],
    acc_grad: &mut [f64],
    acc_update: &mut [f64],
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || acc_grad.len() != n || acc_update.len() != n {
        return Err(Error::shape(
            "adadelta_step",
            &[&[n], &[grad.len()], &[acc_grad.len()], &[acc_update.len()]],
        ));
    }
    for i in 0..n {
        let g = grad[i];
        acc_grad[i] = rho * acc_grad[i] + (1.0 - rho) * g * g;
        let update = ((acc_update[i] + eps).sqrt() / (acc_grad[i] + eps).sqrt()) * g;
        acc_update[i] = rho * acc_update[i] + (1.0 - rho) * update * update;
        param[i] -= lr * update;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    acc_grad: Vec<Vec<f64>>,
    acc_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(params: &ParamStore, rho: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adadelta {
            rho,
            eps,
            acc_grad: zeros.clone(),
            acc_update: zeros,
        }
    }

    /// Applies `grads` (one per parameter) and swaps in fresh leaves.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adadelta", &[&[params.len()], &[grads.len()]]));
        }
        for (i, g) in grads.iter().enumerate() {
            let mut data = params.tensors()[i].to_vec();
            adadelta_step(&mut data, g, &mut self.acc_grad[i], &mut self.acc_update[i], lr, self.rho, self.eps)?;
            params.replace(i, data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multipliers applied at the first and second milestone.
    pub decay: [f64; 2],
    /// Epoch indices (0-based) where decay starts; derived from `epochs` when unset.
    pub milestones: Option<[usize; 2]>,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    pub strategy: Strategy,
    /// Beam width for the per-epoch validation accuracy.
    pub val_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            epochs: 10,
            batch_size: 32,
            lr: 1.0,
            decay: [0.1, 0.01],
            milestones: None,
            rho: 0.9,
            eps: 1e-6,
            seed: 0,
            strategy: Strategy::Predicted,
            val_beam: 1,
        }
    }
}

impl TrainConfig {
    /// Decay epochs at 4/6 and 5/6 of the run, nudged apart so they increase strictly.
    pub fn milestones(&self) -> [usize; 2] {
        self.milestones.unwrap_or_else(|| {
            let m1 = (4 * self.epochs / 6).max(1);
            let m2 = (5 * self.epochs / 6).max(m1 + 1);
            [m1, m2]
        })
    }

    /// Learning rate during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let [m1, m2] = self.milestones();
        if epoch < m1 {
            self.lr
        } else if epoch < m2 {
            self.lr * self.decay[0]
        } else {
            self.lr * self.decay[1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 || self.lr < 0.0 {
            return Err(Error::invalid("need 0 <= rho < 1, eps > 0 and lr >= 0"));
        }
        if let Some([m1, m2]) = self.milestones {
            if !(m1 < m2 && m2 <= self.epochs) {
                return Err(Error::invalid(format!(
                    "milestones [{m1}, {m2}] must increase strictly and not exceed {} epochs",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub l_rec: f64,
    pub l_sem: f64,
    pub val_acc: Option<f64>,
}

/// Training samples with their model inputs precomputed.
pub struct PreparedSet {
    images: Vec<Vec<f64>>,
    targets: Vec<Vec<usize>>,
    em: Option<Vec<Vec<f64>>>,
}

impl PreparedSet {
    pub fn new(model: &SeedModel, samples: &[Sample], embeddings: Option<&EmbeddingModel>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let config = model.config();
        if let Some(e) = embeddings {
            if e.dim() != config.semantic_dim {
                return Err(Error::ConfigMismatch(format!(
                    "embedding dim {} vs semantic dim {}",
                    e.dim(),
                    config.semantic_dim
                )));
            }
        }
        let images = crate::util::parallel_map(samples, |_, s| model.preprocess(&s.image));
        Ok(PreparedSet {
            images,
            targets: samples.iter().map(|s| config.vocab.encode(&s.label)).collect(),
            em: embeddings.map(|e| samples.iter().map(|s| e.compose_embedding(&s.label)).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images, PAD-padded targets and embeddings for the given rows.
    pub fn batch(&self, config: &ModelConfig, rows: &[usize]) -> Result<(Tensor, Vec<Vec<usize>>, Option<Tensor>)> {
        let data = rows.iter().flat_map(|&r| self.images[r].iter().copied()).collect();
        let x = SeedModel::stack_preprocessed(config, rows.len(), data)?;
        let steps = rows.iter().map(|&r| self.targets[r].len()).max().unwrap_or(0);
        let targets = rows
            .iter()
            .map(|&r| {
                let mut t = self.targets[r].clone();
                t.resize(steps, config.vocab.pad());
                t
            })
            .collect();
        let em = match &self.em {
            Some(em) => Some(Tensor::new(
                &[rows.len(), config.semantic_dim],
                rows.iter().flat_map(|&r| em[r].iter().copied()).collect(),
            )?),
            None => None,
        };
        Ok((x, targets, em))
    }
}

/// Builds the training objective for one batch; the returned tensor is the
/// graph to differentiate. Without WES the semantic term is left out of the
/// graph and reported as 0.
pub fn objective(
    model: &SeedModel,
    x: &Tensor,
    targets: &[Vec<usize>],
    em: Option<&Tensor>,
    strategy: Strategy,
    lambda: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let out = model.forward_training(x, targets, strategy, em)?;
    let l_rec = recognition_loss(&out.logits, targets, model.config().vocab.pad())?;
    if !model.config().use_wes {
        let b = total_loss(l_rec.item(), 0.0, lambda)?;
        return Ok((l_rec, b));
    }
    let em = em.ok_or_else(|| Error::invalid("word embedding supervision needs embeddings"))?;
    let l_sem = semantic_loss(&out.semantics, em)?;
    let b = total_loss(l_rec.item(), l_sem.item(), lambda)?;
    let total = l_rec.add(&l_sem.scale(lambda))?;
    Ok((total, b))
}

pub struct TrainOutcome {
    pub model: SeedModel,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a fresh model. Batch order, initial weights and everything else
/// derive from `config.seed`, so equal inputs give bitwise-equal results.
pub fn train_model(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    embeddings: Option<&EmbeddingModel>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let needs_em = model_config.use_wes || config.strategy == Strategy::GtEmbedding;
    if needs_em && embeddings.is_none() {
        return Err(Error::invalid(
            "word embeddings are required for WES or the gt-embedding strategy",
        ));
    }
    let mut model = SeedModel::new(model_config.clone(), derive_seed(config.seed, 0))?;
    let data = PreparedSet::new(&model, train, if needs_em { embeddings } else { None })?;
    let mut optimizer = Adadelta::new(model.params(), config.rho, config.eps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng_for(config.seed, 1 + epoch as u64));
        let (mut rec_sum, mut sem_sum, mut batches) = (0.0, 0.0, 0usize);
        for rows in order.chunks(config.batch_size) {
            let (x, targets, em) = data.batch(model.config(), rows)?;
            model.params().zero_grad();
            let (total, b) = objective(&model, &x, &targets, em.as_ref(), config.strategy, config.lambda)?;
            total.backward()?;
            let grads = model.params().grads();
            optimizer.step(model.params_mut(), &grads, lr)?;
            rec_sum += b.l_rec;
            sem_sum += b.l_sem;
            batches += 1;
        }
        let val_acc = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, val, config.val_beam, Protocol::Alphanumeric, "val")?.accuracy)
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            l_rec: rec_sum / batches as f64,
            l_sem: sem_sum / batches as f64,
            val_acc,
        };
        log::info!(
            "epoch {} lr {} l_rec {:.4} l_sem {:.4} val_acc {}",
            m.epoch,
            m.lr,
            m.l_rec,
            m.l_sem,
            m.val_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        metrics.push(m);
    }
    Ok(TrainOutcome { model, metrics })
}

pub fn write_metrics(metrics: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}
