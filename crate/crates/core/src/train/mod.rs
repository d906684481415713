//! Training loop, evaluation metrics, and the four-way ablation.

pub mod metrics;
pub mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::complexity;
use crate::dataset::{SampleSet, Split};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network, Variant};
use crate::par;
use crate::tensor::Tensor;

pub use crate::config::{AdamWConfig, TrainConfig};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use optim::AdamW;

const EVAL_BATCH: usize = 32;
pub const TIMING_PASSES: usize = 5;

/// Mean cross-entropy for 1-based `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.try_value(logits)?.shape().last().copied().unwrap_or(0);
    let zero_based = labels
        .iter()
        .map(|&l| {
            if (1..=classes).contains(&l) {
                Ok(l - 1)
            } else {
                Err(Error::Input(format!("label {l} outside 1..={classes}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    tape.cross_entropy(logits, &zero_based)
}

/// 1-based argmax of each row of `[B, C]` logits; ties go to the lower class.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best + 1
        })
        .collect()
}

/// One optimizer step on a batch. Returns the batch loss.
pub fn train_step(
    net: &mut Network,
    opt: &mut AdamW,
    tape: &mut Tape,
    batch: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    tape.clear();
    let x = tape.constant(batch.clone());
    let (logits, p) = net.forward(tape, x, Mode::Train)?;
    let loss = cross_entropy(tape, logits, labels)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let g = p.collect_grads(&net.store, &mut grads);
    opt.step(&mut net.store, &g)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainOutcome {
    /// Header `epoch,train_loss,val_acc`.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,train_loss,val_acc")?;
        for e in &self.trace {
            writeln!(f, "{},{},{}", e.epoch, e.train_loss, e.val_acc)?;
        }
        Ok(())
    }
}

/// The per-epoch permutation of `indices`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    order
}

fn diverged(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Diverged { epoch, step },
        other => other,
    }
}

pub fn train(net: &mut Network, set: &SampleSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(net, set, cfg, |_| {})
}

/// Trains on the train split and leaves `net` at the epoch with the best
/// validation accuracy (earliest on ties). `on_epoch` sees each epoch's stats.
pub fn train_with<F: FnMut(&EpochStats)>(
    net: &mut Network,
    set: &SampleSet,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = set.indices(Split::Train);
    let val_idx = set.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Input("training needs non-empty train and validation splits".into()));
    }
    let mut opt = AdamW::new(&net.store, cfg.learning_rate, cfg.optimizer);
    let mut tape = Tape::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Network)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(&train_idx, cfg.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let x = set.batch(chunk)?;
            let labels = set.labels(chunk);
            let loss = train_step(net, &mut opt, &mut tape, &x, &labels).map_err(|e| diverged(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            total += loss * chunk.len() as f64;
        }
        let val_acc = predict(net, set, &val_idx)?.iter().zip(set.labels(&val_idx)).filter(|(p, t)| **p == *t).count()
            as f64
            / val_idx.len() as f64;
        let stats = EpochStats { epoch, train_loss: total / train_idx.len() as f64, val_acc };
        on_epoch(&stats);
        trace.push(stats);
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, net.clone()));
        }
    }
    let (best_epoch, best_val_acc, best_net) = best.expect("at least one epoch");
    *net = best_net;
    Ok(TrainOutcome { trace, best_epoch, best_val_acc })
}

/// 1-based predictions for the given samples, eval mode.
pub fn predict(net: &mut Network, set: &SampleSet, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        out.extend(argmax_rows(&net.predict(&set.batch(chunk)?)?));
    }
    Ok(out)
}

/// Median over `passes` of the mean per-sample latency at batch size 1, on one thread.
pub fn time_inference(net: &mut Network, set: &SampleSet, indices: &[usize], passes: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Input("no samples to time".into()));
    }
    let batches = indices.iter().map(|&i| set.batch(&[i])).collect::<Result<Vec<_>>>()?;
    let mut times = par::with_threads(1, || -> Result<Vec<f64>> {
        let mut times = Vec::with_capacity(passes);
        for _ in 0..passes.max(1) {
            let start = Instant::now();
            for b in &batches {
                std::hint::black_box(net.predict(b)?);
            }
            times.push(start.elapsed().as_secs_f64() / batches.len() as f64);
        }
        Ok(times)
    })?;
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Metrics on `split`, with latency from `timing_passes` timed passes (0 skips timing).
pub fn evaluate(net: &mut Network, set: &SampleSet, split: Split, timing_passes: usize) -> Result<MetricsReport> {
    let idx = set.indices(split);
    if idx.is_empty() {
        return Err(Error::Input(format!("{split} split is empty")));
    }
    let pred = predict(net, set, &idx)?;
    let mut report = MetricsReport::from_predictions(&pred, &set.labels(&idx), net.config.num_classes)?;
    if timing_passes > 0 {
        report.inference_s = time_inference(net, set, &idx, timing_passes)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricsReport,
    pub complexity: complexity::ComplexityReport,
    pub outcome: TrainOutcome,
}

/// Trains and evaluates all four variants with shared widths and seed.
pub fn ablate<F: FnMut(Variant, &EpochStats)>(
    set: &SampleSet,
    model: &ModelConfig,
    cfg: &TrainConfig,
    timing_passes: usize,
    mut on_epoch: F,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .into_iter()
        .map(|variant| {
            let mc = model.clone().with_variant(variant);
            let mut net = Network::build(&mc, cfg.seed)?;
            let complexity = complexity::count(&net, mc.input_length)?;
            let outcome = train_with(&mut net, set, cfg, |e| on_epoch(variant, e))?;
            let metrics = evaluate(&mut net, set, Split::Test, timing_passes)?;
            Ok(AblationRow { variant, metrics, complexity, outcome })
        })
        .collect()
}

/// Header `method,conv,attn,accuracy,params,flops,inference_s`.
pub fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "method,conv,attn,accuracy,params,flops,inference_s")?;
    for r in rows {
        let (conv, attn) = r.variant.kinds();
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.variant,
            conv,
            attn,
            r.metrics.accuracy,
            r.complexity.total_params,
            r.complexity.total_flops,
            r.metrics.inference_s
        )?;
    }
    Ok(())
}
