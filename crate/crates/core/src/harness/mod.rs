//! Training and evaluation driver.
//!
//! A run reads its datasets, trains with Adam on cross-entropy, selects the
//! epoch with the best dev accuracy (ties go to the lower dev loss), stops
//! after `patience` epochs without improvement, and finally scores every test
//! split with the selected parameters.
//!
//! Outputs written to `out_dir`:
//! * `metrics.jsonl`: one record per epoch plus a final summary. It holds no
//!   wall-clock values, so identical runs produce identical files.
//! * `timing.jsonl`: seconds per epoch.
//! * `best.ckpt` and `best.ckpt.config`: the selected parameters and the run
//!   config needed to rebuild the model.

mod config;

pub use config::{Precision, RunConfig, KEYS};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::listops::{read_dataset, tokenize, Example};
use crate::model::{cross_entropy, Model};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Real;

/// Stream indices reserved for non-example randomness.
const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_STREAM: u64 = u64::MAX - 1;
const EVAL_EPOCH: u64 = u64::MAX;

/// Batches are length-sorted within pools of this many batches.
const BUCKET_POOL: usize = 50;

/// A tokenized example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl Sample {
    pub fn from_example(ex: &Example) -> Result<Self> {
        Ok(Sample {
            tokens: tokenize(&ex.source)?,
            label: ex.label as usize,
        })
    }
}

pub fn load_samples(path: &Path, cfg: &RunConfig, limit: usize) -> Result<Vec<Sample>> {
    let mut examples = read_dataset(path, cfg.median_rule)?;
    if limit > 0 {
        examples.truncate(limit);
    }
    let samples = examples.iter().map(Sample::from_example).collect::<Result<Vec<_>>>()?;
    if let Some(s) = samples.iter().find(|s| s.label >= cfg.model.classes) {
        return Err(Error::config(format!(
            "{}: label {} but the model has {} classes",
            path.display(),
            s.label,
            cfg.model.classes
        )));
    }
    if let Some(t) = samples.iter().flat_map(|s| &s.tokens).find(|&&t| t >= cfg.model.vocab) {
        return Err(Error::config(format!(
            "{}: token id {t} outside vocabulary of {}",
            path.display(),
            cfg.model.vocab
        )));
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    pub dev_accuracy: f64,
    pub dev_loss: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub step: u64,
    pub dev_accuracy: f64,
    /// Test accuracy per split, keyed by file stem.
    pub test_accuracy: BTreeMap<String, f64>,
    pub stop_reason: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TimeBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricsRecord {
    Epoch(EpochMetrics),
    Final(FinalMetrics),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub summary: FinalMetrics,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Deterministic per-epoch batch order. With `length_buckets`, examples are
/// shuffled, sorted by length inside pools of `BUCKET_POOL` batches, cut into
/// batches, and the batches shuffled again.
pub fn batch_order(
    lengths: &[usize],
    batch_size: usize,
    length_buckets: bool,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut r = rng::stream2(seed, epoch, SHUFFLE_STREAM);
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(&mut r);
    if !length_buckets {
        return idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut batches = Vec::with_capacity(lengths.len().div_ceil(batch_size));
    for pool in idx.chunks(batch_size * BUCKET_POOL) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut r);
    batches
}

/// Eval-mode accuracy and mean loss. Encoders with randomness in evaluation
/// (random trees) draw from per-example streams, so the result is repeatable.
pub fn evaluate_samples<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[Sample],
    seed: u64,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let tape = Tape::new();
        let mut r = rng::stream2(seed, EVAL_EPOCH, i as u64);
        let out = model.forward(store, &tape, &s.tokens, false, &mut r)?;
        loss += cross_entropy(out.logits, s.label)?.item().to_f64();
        correct += usize::from(out.prediction() == s.label);
    }
    Ok(EvalResult {
        accuracy: correct as f64 / samples.len() as f64,
        loss: loss / samples.len() as f64,
        count: samples.len(),
    })
}

/// One optimizer step over `batch`: mean loss gradient, clipping, Adam.
/// Returns the summed loss.
fn train_batch<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    samples: &[Sample],
    batch: &[usize],
    cfg: &RunConfig,
    epoch: u64,
) -> Result<f64> {
    store.zero_grad();
    let mut total = 0.0;
    for &i in batch {
        let s = &samples[i];
        let tape = Tape::new();
        let mut r = rng::stream2(cfg.seed, epoch, i as u64);
        let out = model
            .forward(store, &tape, &s.tokens, true, &mut r)
            .map_err(|e| Error::config(format!("epoch {epoch}, training example {i}: {e}")))?;
        let loss = cross_entropy(out.logits, s.label)?;
        let value = loss.item().to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        total += value;
        let grads = tape.backward(loss)?;
        store.accumulate(&grads);
    }
    store.scale_grads(T::from_f64(1.0 / batch.len() as f64));
    if cfg.clip > 0.0 {
        let norm = store.clip_grad_norm(cfg.clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
    }
    adam.step(store)?;
    Ok(total)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Initial parameters for a run; the same seed always gives the same values.
pub fn init_model<T: Real>(cfg: &RunConfig) -> Result<(Model, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let model = Model::init(&mut store, &cfg.model, &mut rng::stream(cfg.seed, INIT_STREAM))?;
    Ok((model, store))
}

/// Runs a full training job as described in the module docs. `on_epoch` is
/// called after every epoch (for progress output).
pub fn train(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_paths(true)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, on_epoch),
        Precision::F64 => train_with::<f64>(cfg, on_epoch),
    }
}

fn train_with<T: Real>(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    let train_set = load_samples(cfg.train.as_ref().expect("checked"), cfg, cfg.max_train)?;
    let dev_set = load_samples(cfg.dev.as_ref().expect("checked"), cfg, cfg.max_eval)?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let tests = cfg
        .tests
        .iter()
        .map(|p| Ok((stem(p), load_samples(p, cfg, cfg.max_eval)?)))
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path)?;
    let mut timing = fs::File::create(cfg.out_dir.join("timing.jsonl"))?;
    let ckpt_path = cfg.out_dir.join("best.ckpt");

    let (model, mut store) = init_model::<T>(cfg)?;
    let mut adam = AdamState::new(cfg.adam, &store);
    let lengths: Vec<usize> = train_set.iter().map(|s| s.tokens.len()).collect();

    let mut best: Option<(f64, f64, usize, ParamStore<T>)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let started = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        for batch in batch_order(&lengths, cfg.batch_size, cfg.length_buckets, cfg.seed, epoch as u64) {
            loss_sum += train_batch(&model, &mut store, &mut adam, &train_set, &batch, cfg, epoch as u64)?;
        }
        let dev = evaluate_samples(&model, &store, &dev_set, cfg.seed)?;
        let train_accuracy = if cfg.train_accuracy {
            Some(evaluate_samples(&model, &store, &train_set, cfg.seed)?.accuracy)
        } else {
            None
        };
        let improved = match &best {
            None => true,
            Some((acc, loss, _, _)) => dev.accuracy > *acc || (dev.accuracy == *acc && dev.loss < *loss),
        };
        if improved {
            checkpoint::save(&ckpt_path, &store)?;
            fs::write(sidecar(&ckpt_path), cfg.to_text())?;
            best = Some((dev.accuracy, dev.loss, epoch, store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochMetrics {
            epoch,
            step: adam.step_count(),
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy,
            dev_accuracy: dev.accuracy,
            dev_loss: dev.loss,
            best: improved,
        };
        writeln!(
            metrics,
            "{}",
            serde_json::to_string(&MetricsRecord::Epoch(record.clone()))?
        )?;
        writeln!(
            timing,
            "{}",
            serde_json::json!({ "epoch": epoch, "seconds": t0.elapsed().as_secs_f64() })
        )?;
        on_epoch(&record);
        history.push(record);
        if stale >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
        if cfg.max_seconds > 0.0 && started.elapsed().as_secs_f64() > cfg.max_seconds && epoch < cfg.max_epochs {
            stop_reason = StopReason::TimeBudget;
            break;
        }
    }

    let (dev_accuracy, _, best_epoch, best_store) = best.ok_or_else(|| Error::config("max_epochs must be >= 1"))?;
    let mut test_accuracy = BTreeMap::new();
    for (name, set) in &tests {
        test_accuracy.insert(
            name.clone(),
            evaluate_samples(&model, &best_store, set, cfg.seed)?.accuracy,
        );
    }
    let summary = FinalMetrics {
        best_epoch,
        epochs_run: history.len(),
        step: adam.step_count(),
        dev_accuracy,
        test_accuracy,
        stop_reason,
    };
    writeln!(
        metrics,
        "{}",
        serde_json::to_string(&MetricsRecord::Final(summary.clone()))?
    )?;
    Ok(TrainOutcome {
        epochs: history,
        summary,
        checkpoint: ckpt_path,
        metrics_path,
    })
}

/// Path of the config written next to a checkpoint.
pub fn sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

/// Rebuilds a model from a checkpoint and its config sidecar. Parameters are
/// stored in single precision and loaded as such.
pub fn load_checkpoint(checkpoint: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let side = sidecar(checkpoint);
    let cfg = RunConfig::load(&side).map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
    let (model, mut store) = init_model::<f32>(&cfg)?;
    checkpoint::load_into(checkpoint, &mut store)?;
    Ok((cfg, model, store))
}

/// Eval-mode accuracy of a saved model on one dataset file.
pub fn evaluate(checkpoint: &Path, split: &Path) -> Result<EvalResult> {
    let (cfg, model, store) = load_checkpoint(checkpoint)?;
    let samples = load_samples(split, &cfg, 0)?;
    evaluate_samples(&model, &store, &samples, cfg.seed)
}
