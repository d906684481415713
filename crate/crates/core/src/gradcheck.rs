//! Central finite-difference checks of tape gradients.
//!
//! The scalar being differentiated is `sum(f(inputs) * R)` for a fixed random
//! projection `R`, so every output element contributes. The reported error
//! is the maximum over all input elements of
//! `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`; gradients
//! below `FLOOR` are at the rounding noise of the central difference and are
//! effectively compared absolutely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{BsaBlock, MhsaBlock};
use crate::autodiff::{BatchNormConfig, Conv1dOptions, Mode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::mdsc::{MdscBlock, MdscConfig};
use crate::model::{AttnKind, ConvKind, ModelConfig, Network, StandardMultiScaleBlock};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;
/// Pass threshold used by the suite.
pub const TOLERANCE: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

fn projected_loss<F>(tape: &mut Tape, vars: &[Var], projection: &Tensor, f: &mut F) -> Result<Var>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let out = f(tape, vars)?;
    if tape.value(out).shape() != projection.shape() {
        return Err(Error::Contract(format!(
            "gradcheck target changed shape between evaluations: {:?} vs {:?}",
            tape.value(out).shape(),
            projection.shape()
        )));
    }
    let r = tape.constant(projection.clone());
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

fn eval_loss<F>(inputs: &[Tensor], projection: &Tensor, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = projected_loss(&mut tape, &vars, projection, f)?;
    Ok(tape.value(loss).data()[0])
}

/// Maximum relative error between tape gradients and central differences
/// for `f` with respect to every element of every tensor in `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], seed: u64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let projection = random_tensor(&mut rng, tape.value(out).shape(), 1.0);
    tape.clear();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = projected_loss(&mut tape, &vars, &projection, &mut f)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval_loss(&work, &projection, &mut f)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = eval_loss(&work, &projection, &mut f)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Operations covered by the gradient suite.
pub const SUITE: &[&str] = &[
    "add",
    "mul",
    "linear",
    "matmul",
    "concat",
    "mean",
    "softmax",
    "gelu",
    "layer_norm",
    "batchnorm1d",
    "max_pool1d",
    "conv1d",
    "conv1d_depthwise",
    "cross_entropy",
    "mdsc",
    "standard_block",
    "bsa",
    "mhsa",
    "network",
];

/// Runs the named check with inputs drawn from `seed`.
pub fn gradcheck(op: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    match op {
        "add" => check_gradients(&[r(&[2, 3, 4]), r(&[1, 3, 1])], seed, |t, v| t.add(v[0], v[1])),
        "mul" => check_gradients(&[r(&[2, 3, 4]), r(&[2, 1, 4])], seed, |t, v| t.mul(v[0], v[1])),
        "linear" => check_gradients(&[r(&[5, 4]), r(&[3, 4]), r(&[3])], seed, |t, v| t.linear(v[0], v[1], Some(v[2]))),
        "matmul" => check_gradients(&[r(&[3, 4]), r(&[4, 5])], seed, |t, v| t.matmul(v[0], v[1])),
        "concat" => check_gradients(&[r(&[2, 2, 3]), r(&[2, 4, 3])], seed, |t, v| t.concat(&[v[0], v[1]], 1)),
        "mean" => check_gradients(&[r(&[2, 5, 3])], seed, |t, v| t.mean_axis(v[0], 1)),
        "softmax" => check_gradients(&[r(&[3, 7])], seed, |t, v| t.softmax(v[0], 1)),
        "gelu" => check_gradients(&[random_tensor(&mut rng, &[17], 3.0)], seed, |t, v| t.gelu(v[0])),
        "layer_norm" => {
            check_gradients(&[r(&[4, 6]), r(&[6]), r(&[6])], seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "batchnorm1d" => {
            let mut stats = RunningStats::new(3);
            check_gradients(&[r(&[2, 3, 5]), r(&[3]), r(&[3])], seed, move |t, v| {
                t.batch_norm(v[0], v[1], v[2], &mut stats, BatchNormConfig::default())
            })
        }
        "max_pool1d" => check_gradients(&[r(&[2, 2, 9])], seed, |t, v| t.max_pool1d(v[0], 3, 2)),
        "conv1d" => check_gradients(&[r(&[2, 3, 11]), r(&[4, 3, 5]), r(&[4])], seed, |t, v| {
            t.conv1d(v[0], v[1], Some(v[2]), Conv1dOptions { stride: 2, padding: 2, groups: 1 })
        }),
        "conv1d_depthwise" => check_gradients(&[r(&[2, 3, 12]), r(&[3, 1, 5])], seed, |t, v| {
            t.conv1d(v[0], v[1], None, Conv1dOptions { stride: 1, padding: 2, groups: 3 })
        }),
        "cross_entropy" => check_gradients(&[r(&[4, 10])], seed, |t, v| t.cross_entropy(v[0], &[0, 9, 3, 3])),
        "mdsc" => {
            let cfg = MdscConfig::new(3, 4, vec![3, 5, 7])?;
            let mut store = ParamStore::new(seed);
            let mut block = MdscBlock::new(&mut store, "mdsc", &cfg)?;
            randomize_stats(&mut block.bn_stats, &mut rng);
            let x = random_tensor(&mut rng, &[2, 3, 16], 1.0);
            check_block(&store, x, seed, |t, p, x| block.forward(t, p, x, Mode::Eval))
        }
        "standard_block" => {
            let cfg = MdscConfig::new(3, 4, vec![3, 5])?;
            let mut store = ParamStore::new(seed);
            let mut block = StandardMultiScaleBlock::new(&mut store, "std", &cfg)?;
            randomize_stats(&mut block.bn_stats, &mut rng);
            let x = random_tensor(&mut rng, &[2, 3, 12], 1.0);
            check_block(&store, x, seed, |t, p, x| block.forward(t, p, x, Mode::Eval))
        }
        "bsa" => {
            let mut store = ParamStore::new(seed);
            let block = BsaBlock::new(&mut store, "bsa", 6)?;
            let x = random_tensor(&mut rng, &[2, 5, 6], 1.0);
            check_block(&store, x, seed, |t, p, x| block.forward(t, p, x))
        }
        "mhsa" => {
            let mut store = ParamStore::new(seed);
            let block = MhsaBlock::new(&mut store, "mhsa", 6, 2)?;
            let x = random_tensor(&mut rng, &[2, 5, 6], 1.0);
            check_block(&store, x, seed, |t, p, x| block.forward(t, p, x))
        }
        "network" => {
            let cfg = ModelConfig::gradcheck_config(ConvKind::Mdsc, AttnKind::Bsa);
            let mut net = Network::build(&cfg, seed)?;
            for stats in net.bn_stats_mut() {
                randomize_stats(stats, &mut rng);
            }
            let x = random_tensor(&mut rng, &[2, 1, cfg.input_length], 1.0);
            let store = net.store.clone();
            check_block(&store, x, seed, |t, p, x| net.forward_bound(t, p, x, Mode::Eval))
        }
        other => Err(Error::Input(format!("unknown gradcheck op `{other}` (known: {})", SUITE.join(", ")))),
    }
}

fn randomize_stats(stats: &mut RunningStats, rng: &mut ChaCha8Rng) {
    for m in stats.mean.iter_mut() {
        *m = rng.random_range(-0.5..0.5);
    }
    for v in stats.var.iter_mut() {
        *v = rng.random_range(0.5..2.0);
    }
}

/// Checks a block with respect to its input and every parameter in `store`.
fn check_block<F>(store: &ParamStore, x: Tensor, seed: u64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &Bound, Var) -> Result<Var>,
{
    let inputs: Vec<Tensor> = std::iter::once(x).chain(store.iter().map(|(_, p)| p.value.clone())).collect();
    check_gradients(&inputs, seed, |t, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        f(t, &bound, v[0])
    })
}
