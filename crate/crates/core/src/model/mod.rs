//! The recognition network: a conv + BiLSTM encoder, the semantic module, and
//! an attention GRU decoder whose initial state can come from the semantics.

mod beam;
mod checkpoint;
mod config;
mod params;
mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use beam::{brute_force_best, hypothesis_order, BeamHypothesis};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, SemanticSource, Strategy};
pub use params::ParamStore;
pub use vocab::CharVocab;

use crate::datagen::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encoder output for a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Feature sequence `[B, L, C]`.
    pub h: Tensor,
    /// Attention keys `W_h h + b`, `[B, L, A]`.
    pub keys: Tensor,
}

impl Encoded {
    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }

    /// Constant copy holding the given batch rows, in order and with repeats.
    pub fn rows(&self, rows: &[usize]) -> Result<Encoded> {
        Ok(Encoded {
            h: gather_rows(&self.h, rows)?,
            keys: gather_rows(&self.keys, rows)?,
        })
    }
}

/// Copies leading-axis rows of `t` into a new constant tensor.
pub fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let width = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        if r >= t.shape()[0] {
            return Err(Error::invalid(format!("row {r} out of range for shape {:?}", t.shape())));
        }
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(&shape, data)
}

/// Constant `[B, n]` one-hot rows.
pub fn one_hot(symbols: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; symbols.len() * n];
    for (i, &s) in symbols.iter().enumerate() {
        if s >= n {
            return Err(Error::invalid(format!("symbol {s} out of range for {n} classes")));
        }
        data[i * n + s] = 1.0;
    }
    Tensor::new(&[symbols.len(), n], data)
}

/// Attention weights `softmax(scores)` over `[B, L]` and the context
/// `sum_i alpha_i h_i` for `h: [B, L, C]`.
pub fn attend(h: &Tensor, scores: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, l) = (h.shape()[0], h.shape()[1]);
    if scores.shape() != [b, l] {
        return Err(Error::shape("attend", &[h.shape(), scores.shape()]));
    }
    let alpha = scores.softmax();
    let context = h.mul(&alpha.reshape(&[b, l, 1])?)?.sum_axis(1)?;
    Ok((context, alpha))
}

/// One decoder step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `[B, V]`
    pub logits: Tensor,
    /// `[B, G]`
    pub state: Tensor,
    /// `[B, L]`
    pub alpha: Tensor,
}

/// Teacher-forced outputs for a batch.
#[derive(Debug, Clone)]
pub struct TrainingOutput {
    /// Logits `[B, V]` for each decoding step.
    pub logits: Vec<Tensor>,
    /// Predicted semantics `[B, D]`.
    pub semantics: Tensor,
}

/// A decoded symbol sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Emitted symbols, ending with EOS when `finished`.
    pub symbols: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub finished: bool,
}

impl Decoded {
    pub fn score(&self) -> f64 {
        self.log_probs.iter().fold(0.0, |acc, lp| acc + lp)
    }
}

/// Text recognised from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Recognition {
    pub text: String,
    pub score: f64,
    pub semantics: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SeedModel {
    config: ModelConfig,
    params: ParamStore,
}

fn uniform_init(rng: &mut ChaCha8Rng, limit: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
}

impl SeedModel {
    /// Parameter names and shapes in declaration order.
    pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in config.conv_channels.iter().enumerate() {
            out.push((format!("conv{i}.w"), vec![c, in_ch, 3, 3]));
            out.push((format!("conv{i}.b"), vec![c]));
            in_ch = c;
        }
        let hdim = config.lstm_hidden;
        let mut input = in_ch;
        for layer in 0..config.lstm_layers {
            for dir in ["fwd", "bwd"] {
                out.push((format!("lstm{layer}.{dir}.wx"), vec![input, 4 * hdim]));
                out.push((format!("lstm{layer}.{dir}.wh"), vec![hdim, 4 * hdim]));
                out.push((format!("lstm{layer}.{dir}.b"), vec![4 * hdim]));
            }
            input = 2 * hdim;
        }
        let (k, kh, d) = (config.semantic_input(), config.semantic_hidden, config.semantic_dim);
        out.push(("sem.w1".into(), vec![k, kh]));
        out.push(("sem.b1".into(), vec![kh]));
        out.push(("sem.w2".into(), vec![kh, d]));
        out.push(("sem.b2".into(), vec![d]));
        let (g, a, c, e, v) = (
            config.gru_hidden,
            config.attention_units,
            config.channels(),
            config.symbol_embed_dim(),
            config.vocab.len(),
        );
        out.push(("init.w".into(), vec![d, g]));
        out.push(("init.b".into(), vec![g]));
        out.push(("dec.embed".into(), vec![v + 1, e]));
        out.push(("att.ws".into(), vec![g, a]));
        out.push(("att.wh".into(), vec![c, a]));
        out.push(("att.b".into(), vec![a]));
        out.push(("att.v".into(), vec![a, 1]));
        out.push(("gru.wx".into(), vec![e + c, 3 * g]));
        out.push(("gru.wh".into(), vec![g, 3 * g]));
        out.push(("gru.bx".into(), vec![3 * g]));
        out.push(("gru.bh".into(), vec![3 * g]));
        out.push(("out.w".into(), vec![g + c, v]));
        out.push(("out.b".into(), vec![v]));
        out
    }

    /// He-uniform conv kernels, Xavier-uniform matrices, zero biases, LSTM forget-gate bias 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in Self::param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                let mut b = vec![0.0; n];
                if name.starts_with("lstm") {
                    let h = config.lstm_hidden;
                    b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
                }
                b
            } else if shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                uniform_init(&mut rng, (6.0 / fan_in as f64).sqrt(), n)
            } else {
                uniform_init(&mut rng, (6.0 / (shape[0] + shape[1]) as f64).sqrt(), n)
            };
            params.insert(name, Tensor::param(&shape, data)?)?;
        }
        Ok(SeedModel { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "config declares {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(SeedModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// A copy over constant parameters, for graph-free inference.
    pub fn inference(&self) -> SeedModel {
        SeedModel {
            config: self.config.clone(),
            params: self.params.detached(),
        }
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    /// Resizes to the input size and standardizes to zero mean, unit variance.
    /// A flat image maps to all zeros.
    pub fn preprocess(&self, image: &GrayImage) -> Vec<f64> {
        let pixels = image.resize(self.config.input_w, self.config.input_h).pixels;
        let n = pixels.len() as f64;
        let mean = pixels.iter().sum::<f64>() / n;
        let sd = (pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let scale = if sd > 1e-6 { 1.0 / sd } else { 0.0 };
        pixels.iter().map(|v| (v - mean) * scale).collect()
    }

    /// Stacks preprocessed images into `[B, 1, H, W]`.
    pub fn batch_images<I: AsRef<GrayImage>>(&self, images: &[I]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.config.input_h * self.config.input_w);
        for img in images {
            data.extend(self.preprocess(img.as_ref()));
        }
        Self::stack_preprocessed(&self.config, images.len(), data)
    }

    pub fn stack_preprocessed(config: &ModelConfig, batch: usize, data: Vec<f64>) -> Result<Tensor> {
        if batch == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Tensor::new(&[batch, 1, config.input_h, config.input_w], data)
    }

    /// Conv stack output `[B, C_conv, L]`, before the BiLSTM.
    pub fn conv_features(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if x.shape().len() != 4 || x.shape()[1..] != [1, c.input_h, c.input_w] {
            return Err(Error::shape(
                format!("encode (expects [B, 1, {}, {}])", c.input_h, c.input_w),
                &[x.shape()],
            ));
        }
        let mut y = x.clone();
        for (i, pool) in c.pools.iter().enumerate() {
            y = y
                .conv2d(self.p(&format!("conv{i}.w"))?, Some(self.p(&format!("conv{i}.b"))?), (1, 1), (1, 1))?
                .relu();
            let k = (pool[0], pool[1]);
            if k != (1, 1) {
                y = y.max_pool2d(k, k)?;
            }
        }
        let s = y.shape().to_vec();
        y.reshape(&[s[0], s[1], s[3]])
    }

    fn lstm_direction(&self, prefix: &str, xs: &[Tensor], reverse: bool) -> Result<Vec<Tensor>> {
        let (wx, wh, b) = (
            self.p(&format!("{prefix}.wx"))?,
            self.p(&format!("{prefix}.wh"))?,
            self.p(&format!("{prefix}.b"))?,
        );
        let hd = self.config.lstm_hidden;
        let batch = xs[0].shape()[0];
        let mut h = Tensor::zeros(&[batch, hd]);
        let mut c = Tensor::zeros(&[batch, hd]);
        let mut out = vec![None; xs.len()];
        let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
        for t in order {
            let gates = xs[t].matmul(wx)?.add(&h.matmul(wh)?)?.add(b)?;
            let i = gates.slice(1, 0, hd)?.sigmoid();
            let f = gates.slice(1, hd, 2 * hd)?.sigmoid();
            let g = gates.slice(1, 2 * hd, 3 * hd)?.tanh();
            let o = gates.slice(1, 3 * hd, 4 * hd)?.sigmoid();
            c = f.mul(&c)?.add(&i.mul(&g)?)?;
            h = o.mul(&c.tanh())?;
            out[t] = Some(h.clone());
        }
        Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
    }

    /// Encodes `[B, 1, H, W]` images into the feature sequence and attention keys.
    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        let feats = self.conv_features(x)?;
        let (b, cc, l) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
        let mut seq: Vec<Tensor> =
            (0..l).map(|t| feats.slice(2, t, t + 1)?.reshape(&[b, cc])).collect::<Result<_>>()?;
        for layer in 0..self.config.lstm_layers {
            let fwd = self.lstm_direction(&format!("lstm{layer}.fwd"), &seq, false)?;
            let bwd = self.lstm_direction(&format!("lstm{layer}.bwd"), &seq, true)?;
            seq = fwd
                .iter()
                .zip(&bwd)
                .map(|(f, r)| Tensor::concat(&[f.clone(), r.clone()], 1))
                .collect::<Result<_>>()?;
        }
        let c = self.config.channels();
        let rows: Vec<Tensor> = seq.iter().map(|h| h.reshape(&[b, 1, c])).collect::<Result<_>>()?;
        let h = Tensor::concat(&rows, 1)?;
        let a = self.config.attention_units;
        let keys = h
            .reshape(&[b * l, c])?
            .matmul(self.p("att.wh")?)?
            .add(self.p("att.b")?)?
            .reshape(&[b, l, a])?;
        Ok(Encoded { h, keys })
    }

    /// `S = W2 relu(W1 I + b1) + b2`, `[B, D]`.
    pub fn predict_semantics(&self, enc: &Encoded) -> Result<Tensor> {
        let (b, l, c) = (enc.h.shape()[0], enc.h.shape()[1], enc.h.shape()[2]);
        let input = match self.config.semantic_source {
            SemanticSource::Flattened => enc.h.reshape(&[b, l * c])?,
            SemanticSource::LastState => enc.h.slice(1, l - 1, l)?.reshape(&[b, c])?,
        };
        self.semantic_module(&input)
    }

    /// The semantic module applied to an already flattened input `[B, K]`.
    pub fn semantic_module(&self, input: &Tensor) -> Result<Tensor> {
        input
            .matmul(self.p("sem.w1")?)?
            .add(self.p("sem.b1")?)?
            .relu()
            .matmul(self.p("sem.w2")?)?
            .add(self.p("sem.b2")?)
    }

    /// `W_init S + b_init` with INIT, otherwise the zero state.
    pub fn init_decoder_state(&self, semantics: &Tensor) -> Result<Tensor> {
        let b = semantics.shape()[0];
        if !self.config.use_init {
            return Ok(Tensor::zeros(&[b, self.config.gru_hidden]));
        }
        if semantics.shape() != [b, self.config.semantic_dim] {
            return Err(Error::shape("init_decoder_state", &[semantics.shape()]));
        }
        semantics.matmul(self.p("init.w")?)?.add(self.p("init.b")?)
    }

    /// Additive attention scores `v^T tanh(W_s s + W_h h_i + b)`, `[B, L]`.
    pub fn attention_scores(&self, enc: &Encoded, state: &Tensor) -> Result<Tensor> {
        let (b, l, a) = (enc.keys.shape()[0], enc.keys.shape()[1], enc.keys.shape()[2]);
        let query = state.matmul(self.p("att.ws")?)?.reshape(&[b, 1, a])?;
        enc.keys
            .add(&query)?
            .tanh()
            .reshape(&[b * l, a])?
            .matmul(self.p("att.v")?)?
            .reshape(&[b, l])
    }

    /// Attends with the previous state, runs one GRU step on
    /// `[embed(prev); context]`, and projects `[new state; context]` to logits.
    pub fn attention_step(&self, enc: &Encoded, state: &Tensor, prev: &[usize]) -> Result<StepOutput> {
        let g = self.config.gru_hidden;
        let b = enc.batch();
        if state.shape() != [b, g] || prev.len() != b {
            return Err(Error::shape("attention_step", &[state.shape(), &[prev.len()], enc.h.shape()]));
        }
        let scores = self.attention_scores(enc, state)?;
        let (context, alpha) = attend(&enc.h, &scores)?;
        let embedded = one_hot(prev, self.config.vocab.len() + 1)?.matmul(self.p("dec.embed")?)?;
        let x = Tensor::concat(&[embedded, context.clone()], 1)?;
        let gx = x.matmul(self.p("gru.wx")?)?.add(self.p("gru.bx")?)?;
        let gh = state.matmul(self.p("gru.wh")?)?.add(self.p("gru.bh")?)?;
        let z = gx.slice(1, 0, g)?.add(&gh.slice(1, 0, g)?)?.sigmoid();
        let r = gx.slice(1, g, 2 * g)?.add(&gh.slice(1, g, 2 * g)?)?.sigmoid();
        let n = gx.slice(1, 2 * g, 3 * g)?.add(&r.mul(&gh.slice(1, 2 * g, 3 * g)?)?)?.tanh();
        let new_state = z.one_minus().mul(&n)?.add(&z.mul(state)?)?;
        let logits = Tensor::concat(&[new_state.clone(), context], 1)?
            .matmul(self.p("out.w")?)?
            .add(self.p("out.b")?)?;
        Ok(StepOutput {
            logits,
            state: new_state,
            alpha,
        })
    }

    /// Teacher-forced pass. `targets` are equal-length symbol rows (EOS then
    /// PAD). With [`Strategy::GtEmbedding`] the decoder starts from `em`.
    pub fn forward_training(
        &self,
        x: &Tensor,
        targets: &[Vec<usize>],
        strategy: Strategy,
        em: Option<&Tensor>,
    ) -> Result<TrainingOutput> {
        let enc = self.encode(x)?;
        let semantics = self.predict_semantics(&enc)?;
        let b = enc.batch();
        if targets.len() != b || targets.iter().any(|t| t.len() != targets[0].len()) || targets[0].is_empty() {
            return Err(Error::invalid(format!(
                "forward_training needs {b} target rows of one non-zero length"
            )));
        }
        let init_from = match strategy {
            Strategy::Predicted => semantics.clone(),
            Strategy::GtEmbedding => em
                .ok_or_else(|| Error::invalid("the gt-embedding strategy needs word embeddings"))?
                .clone(),
        };
        let mut state = self.init_decoder_state(&init_from)?;
        let mut prev = vec![self.config.go_symbol(); b];
        let mut logits = Vec::with_capacity(targets[0].len());
        for t in 0..targets[0].len() {
            let step = self.attention_step(&enc, &state, &prev)?;
            logits.push(step.logits);
            state = step.state;
            prev = targets.iter().map(|row| row[t]).collect();
        }
        Ok(TrainingOutput { logits, semantics })
    }

    /// Symbols the decoder may emit: everything except PAD.
    pub(crate) fn emittable(&self, s: usize) -> bool {
        s != self.config.vocab.pad()
    }

    /// Batched argmax decoding; ties go to the lower symbol index.
    pub fn decode_greedy(&self, enc: &Encoded, semantics: &Tensor, max_len: usize) -> Result<Vec<Decoded>> {
        let b = enc.batch();
        let v = self.config.vocab.len();
        let eos = self.config.vocab.eos();
        let mut state = self.init_decoder_state(semantics)?;
        let mut prev = vec![self.config.go_symbol(); b];
        let mut out = vec![
            Decoded {
                symbols: Vec::new(),
                log_probs: Vec::new(),
                finished: false,
            };
            b
        ];
        for _ in 0..max_len {
            if out.iter().all(|d| d.finished) {
                break;
            }
            let step = self.attention_step(enc, &state, &prev)?;
            let lp = step.logits.log_softmax();
            for (i, d) in out.iter_mut().enumerate() {
                if d.finished {
                    continue;
                }
                let row = &lp.data()[i * v..(i + 1) * v];
                let mut best = None::<usize>;
                for s in (0..v).filter(|&s| self.emittable(s)) {
                    if best.is_none_or(|bs| row[s] > row[bs]) {
                        best = Some(s);
                    }
                }
                let s = best.expect("vocabulary has emittable symbols");
                d.symbols.push(s);
                d.log_probs.push(row[s]);
                d.finished = s == eos;
                prev[i] = s;
            }
            state = step.state;
        }
        Ok(out)
    }

    /// Recognises images with greedy decoding (`beam <= 1`) or beam search,
    /// returning text and predicted semantics per image.
    pub fn recognize<I: AsRef<GrayImage>>(&self, images: &[I], beam: usize) -> Result<Vec<Recognition>> {
        const CHUNK: usize = 64;
        let model = self.inference();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let x = model.batch_images(chunk)?;
            let enc = model.encode(&x)?;
            let semantics = model.predict_semantics(&enc)?;
            let d = self.config.semantic_dim;
            let decoded: Vec<(Vec<usize>, f64)> = if beam <= 1 {
                model
                    .decode_greedy(&enc, &semantics, self.config.max_decode_len)?
                    .into_iter()
                    .map(|h| {
                        let score = h.score();
                        (h.symbols, score)
                    })
                    .collect()
            } else {
                model
                    .beam_search(&enc, &semantics, beam, self.config.max_decode_len)?
                    .into_iter()
                    .map(|h| (h.symbols, h.score))
                    .collect()
            };
            for (i, (symbols, score)) in decoded.into_iter().enumerate() {
                out.push(Recognition {
                    text: self.config.vocab.decode(&symbols),
                    score,
                    semantics: semantics.data()[i * d..(i + 1) * d].to_vec(),
                });
            }
        }
        Ok(out)
    }
}

impl AsRef<GrayImage> for GrayImage {
    fn as_ref(&self) -> &GrayImage {
        self
    }
}

#[cfg(test)]
mod tests;
