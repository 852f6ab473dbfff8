use std::cmp::Ordering;

use super::{Encoded, SeedModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Emitted symbols; a finished hypothesis ends with EOS.
    pub symbols: Vec<usize>,
    /// Accumulated log-probability.
    pub score: f64,
    /// Decoder state after the last symbol.
    pub state: Vec<f64>,
    pub finished: bool,
}

/// Higher score first, then the shorter sequence, then lexicographic symbols.
pub fn hypothesis_order(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then(a.len().cmp(&b.len()))
        .then_with(|| a.cmp(b))
}

fn best_of(hyps: Vec<BeamHypothesis>) -> Option<BeamHypothesis> {
    hyps.into_iter()
        .min_by(|a, b| hypothesis_order(a.score, &a.symbols, b.score, &b.symbols))
}

impl SeedModel {
    /// Beam search per batch row. Keeps the `k` best expansions each step,
    /// retires EOS expansions into a pool, and returns the best finished
    /// hypothesis, or the best unfinished one if none finished in `max_len` steps.
    pub fn beam_search(&self, enc: &Encoded, semantics: &Tensor, k: usize, max_len: usize) -> Result<Vec<BeamHypothesis>> {
        if k == 0 {
            return Err(Error::invalid("beam width must be >= 1"));
        }
        let init = self.init_decoder_state(semantics)?;
        let g = self.config.gru_hidden;
        (0..enc.batch())
            .map(|row| self.beam_one(enc, init.data()[row * g..(row + 1) * g].to_vec(), row, k, max_len))
            .collect()
    }

    fn beam_one(&self, enc: &Encoded, init: Vec<f64>, row: usize, k: usize, max_len: usize) -> Result<BeamHypothesis> {
        let v = self.config.vocab.len();
        let g = self.config.gru_hidden;
        let eos = self.config.vocab.eos();
        let mut active = vec![BeamHypothesis {
            symbols: Vec::new(),
            score: 0.0,
            state: init,
            finished: false,
        }];
        let mut pool: Vec<BeamHypothesis> = Vec::new();
        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            let best_active = active.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if pool.iter().any(|h| h.score >= best_active) {
                break;
            }
            let n = active.len();
            let enc_n = enc.rows(&vec![row; n])?;
            let state = Tensor::new(&[n, g], active.iter().flat_map(|h| h.state.iter().copied()).collect())?;
            let prev: Vec<usize> = active
                .iter()
                .map(|h| h.symbols.last().copied().unwrap_or(self.config.go_symbol()))
                .collect();
            let step = self.attention_step(&enc_n, &state, &prev)?;
            let lp = step.logits.log_softmax();
            let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(n * v);
            for (i, h) in active.iter().enumerate() {
                for s in (0..v).filter(|&s| self.emittable(s)) {
                    candidates.push((h.score + lp.data()[i * v + s], i, s));
                }
            }
            candidates.sort_by(|a, b| {
                let sa = [active[a.1].symbols.as_slice(), &[a.2]].concat();
                let sb = [active[b.1].symbols.as_slice(), &[b.2]].concat();
                hypothesis_order(a.0, &sa, b.0, &sb)
            });
            let mut next = Vec::with_capacity(k);
            for &(score, i, s) in candidates.iter().take(k) {
                let mut symbols = active[i].symbols.clone();
                symbols.push(s);
                let hyp = BeamHypothesis {
                    symbols,
                    score,
                    state: step.state.data()[i * g..(i + 1) * g].to_vec(),
                    finished: s == eos,
                };
                if hyp.finished {
                    pool.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            active = next;
        }
        best_of(pool)
            .or_else(|| best_of(active))
            .ok_or_else(|| Error::invalid("beam search produced no hypothesis (max_len 0?)"))
    }
}

/// Exhaustive search over every sequence of at most `max_len` emittable
/// symbols, scored by teacher-forced decoding of a single batch row. Returns
/// the same selection as [`SeedModel::beam_search`] with unbounded width.
pub fn brute_force_best(model: &SeedModel, enc: &Encoded, semantics: &Tensor, max_len: usize) -> Result<(Vec<usize>, f64)> {
    let vocab = &model.config().vocab;
    let emittable: Vec<usize> = (0..vocab.len()).filter(|&s| model.emittable(s)).collect();
    let eos = vocab.eos();
    let non_eos: Vec<usize> = emittable.iter().copied().filter(|&s| s != eos).collect();
    let init = model.init_decoder_state(semantics)?;
    let score_of = |seq: &[usize]| -> Result<f64> {
        let v = vocab.len();
        let mut state = init.clone();
        let mut prev = model.config().go_symbol();
        let mut total = 0.0;
        for &s in seq {
            let step = model.attention_step(enc, &state, &[prev])?;
            total += step.logits.log_softmax().data()[s];
            debug_assert_eq!(step.logits.numel(), v);
            state = step.state;
            prev = s;
        }
        Ok(total)
    };
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut unfinished: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut prefixes: Vec<Vec<usize>> = vec![Vec::new()];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut done = p.clone();
            done.push(eos);
            let score = score_of(&done)?;
            finished.push((done, score));
            for &s in &non_eos {
                let mut q = p.clone();
                q.push(s);
                if len == max_len {
                    let score = score_of(&q)?;
                    unfinished.push((q, score));
                } else {
                    next.push(q);
                }
            }
        }
        prefixes = next;
    }
    let pick = |mut v: Vec<(Vec<usize>, f64)>| {
        v.sort_by(|a, b| hypothesis_order(a.1, &a.0, b.1, &b.0));
        v.into_iter().next()
    };
    pick(finished)
        .or_else(|| pick(unfinished))
        .ok_or_else(|| Error::invalid("max_len must be >= 1"))
}
