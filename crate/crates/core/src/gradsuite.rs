//! Finite-difference checks of every differentiable op and of the full model loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::render_word;
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_indices};
use crate::model::{CharVocab, ModelConfig, SeedModel, Strategy};
use crate::tensor::Tensor;
use crate::train::objective;
use crate::util::derive_seed;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_SEEDS: usize = 20;
/// Parameter elements sampled per tensor in the full-model check.
pub const ELEMENTS_PER_PARAM: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub seeds: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_error).fold(0.0, f64::max)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero, so ReLU kinks sit outside the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// `sum(out * w)` with fixed random weights, so every output element matters.
fn weighted(out: Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, out.shape(), -1.0, 1.0);
    Ok(out.mul(&w)?.sum())
}

type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

struct OpCase {
    name: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    f: OpFn,
}

fn op_cases() -> Vec<OpCase> {
    fn case(
        name: &'static str,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static,
    ) -> OpCase {
        OpCase {
            name,
            inputs: Box::new(inputs),
            f: Box::new(f),
        }
    }
    let u = |shape: &'static [usize]| move |r: &mut ChaCha8Rng| vec![uniform(r, shape, -1.0, 1.0)];
    vec![
        case(
            "matmul",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            |x| x[0].matmul(&x[1]),
        ),
        case(
            "add_broadcast",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[3, 1], -1.0, 1.0)],
            |x| x[0].add(&x[1]),
        ),
        case(
            "sub_broadcast",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |x| x[0].sub(&x[1]),
        ),
        case(
            "mul_broadcast",
            |r| vec![uniform(r, &[2, 3, 2], -1.0, 1.0), uniform(r, &[2, 1, 2], -1.0, 1.0)],
            |x| x[0].mul(&x[1]),
        ),
        case("affine", u(&[5]), |x| Ok(x[0].affine(-1.5, 0.25))),
        case("relu", |r| vec![away_from_zero(r, &[3, 4])], |x| Ok(x[0].relu())),
        case("sigmoid", u(&[3, 4]), |x| Ok(x[0].sigmoid())),
        case("tanh", u(&[3, 4]), |x| Ok(x[0].tanh())),
        case("softmax", u(&[2, 5]), |x| Ok(x[0].softmax())),
        case(
            "softmax_pick_first",
            |r| vec![uniform(r, &[4], -2.0, 2.0)],
            |x| x[0].softmax().slice(0, 0, 1),
        ),
        case("log_softmax", u(&[3, 4]), |x| Ok(x[0].log_softmax())),
        case("log", |r| vec![uniform(r, &[6], 0.2, 3.0)], |x| Ok(x[0].log())),
        case(
            "concat",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)],
            |x| Tensor::concat(&[x[0].clone(), x[1].clone()], 1),
        ),
        case("slice", u(&[4, 5]), |x| x[0].slice(1, 1, 4)),
        case("reshape", u(&[2, 6]), |x| x[0].reshape(&[3, 4])),
        case(
            "conv2d",
            |r| {
                vec![
                    uniform(r, &[2, 2, 5, 6], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 2], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            },
            |x| x[0].conv2d(&x[1], Some(&x[2]), (2, 1), (1, 1)),
        ),
        case("max_pool2d", u(&[2, 2, 4, 6]), |x| x[0].max_pool2d((2, 3), (2, 3))),
        case("mean", u(&[3, 4]), |x| Ok(x[0].mean())),
        case("sum", u(&[3, 4]), |x| Ok(x[0].sum())),
        case("sum_axis", u(&[2, 3, 4]), |x| x[0].sum_axis(1)),
        case(
            "cosine",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            |x| x[0].cosine(&x[1]),
        ),
    ]
}

/// Checks each op against central differences over `seeds` random draws.
pub fn check_ops(seed: u64, seeds: usize) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for (ci, case) in op_cases().into_iter().enumerate() {
        let mut max_error: f64 = 0.0;
        for s in 0..seeds {
            let run_seed = derive_seed(seed, (ci * 10_000 + s) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let inputs = (case.inputs)(&mut rng);
            for k in 0..inputs.len() {
                let f = |x: &Tensor| {
                    let mut args = inputs.clone();
                    args[k] = x.clone();
                    weighted((case.f)(&args)?, run_seed ^ 0xA5A5)
                };
                let report = grad_check(f, &inputs[k], FD_STEP, OP_TOLERANCE)?;
                max_error = max_error.max(report.max_error);
            }
        }
        entries.push(SuiteEntry {
            name: case.name.to_string(),
            seeds,
            max_error,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(entries)
}

/// Tiny network over the 97-symbol vocabulary.
pub fn grad_model_config(use_wes: bool, use_init: bool) -> ModelConfig {
    let mut c = ModelConfig::tiny(CharVocab::printable()).with_flags(use_wes, use_init);
    c.input_h = 16;
    c.input_w = 16;
    c.pools = vec![[2, 2], [8, 2]];
    c
}

/// Zero biases put exact zeros in front of ReLUs and can zero the semantic
/// vector; random biases keep the check away from those kinks.
fn randomize_biases(model: &mut SeedModel, rng: &mut ChaCha8Rng) -> Result<()> {
    let biases: Vec<(String, usize)> = model
        .params()
        .iter()
        .filter(|(_, t)| t.shape().len() == 1)
        .map(|(n, t)| (n.to_string(), t.numel()))
        .collect();
    for (name, n) in biases {
        model.params_mut().set(&name, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())?;
    }
    Ok(())
}

/// Full objective on a one-sample batch, for all four WES/INIT combinations,
/// checked on a random subset of every parameter tensor.
pub fn check_full_model(seed: u64, seeds: usize) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for (use_wes, use_init) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut max_error: f64 = 0.0;
        for s in 0..seeds {
            let run_seed = derive_seed(seed, 1_000_000 + s as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let mut model = SeedModel::new(grad_model_config(use_wes, use_init), run_seed)?;
            randomize_biases(&mut model, &mut rng)?;
            let image = render_word("ab", 16, run_seed)?.image;
            let x = model.batch_images(&[image])?;
            let targets = vec![model.config().vocab.encode("ab")];
            let em = uniform(&mut rng, &[1, model.config().semantic_dim], -1.0, 1.0);
            for (name, p) in model.params().iter() {
                let n = p.numel();
                let picks = sample(&mut rng, n, ELEMENTS_PER_PARAM.min(n)).into_vec();
                let f = |t: &Tensor| {
                    let mut m = model.clone();
                    m.params_mut().substitute(name, t.clone())?;
                    Ok(objective(&m, &x, &targets, Some(&em), Strategy::Predicted, 1.0)?.0)
                };
                let report = grad_check_indices(f, p, &picks, FD_STEP, MODEL_TOLERANCE)?;
                max_error = max_error.max(report.max_error);
            }
        }
        entries.push(SuiteEntry {
            name: format!("model[wes={use_wes},init={use_init}]"),
            seeds,
            max_error,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(entries)
}

pub fn run_gradient_suite(seed: u64, seeds: usize) -> Result<SuiteReport> {
    let mut entries = check_ops(seed, seeds)?;
    entries.extend(check_full_model(seed, seeds)?);
    Ok(SuiteReport { entries })
}
