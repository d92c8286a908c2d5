//! Minibatch training with early stopping, evaluation metrics and the
//! historical-average baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NormStats;
use crate::model::{destandardize_gaussian, Batch, GaussianForecast, ModelError, MultiTs};
use crate::optim::{lr_schedule, AdamConfig, OptimState};
use crate::tensor::{Array, Binder, Gradients, Tape, TensorError};
use crate::text::TextBank;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no target has magnitude >= {0}; MAPE undefined")]
    NoMapeTargets(f64),
    #[error("empty {0} split")]
    Empty(&'static str),
    #[error("training diverged (non-finite loss at epoch {0})")]
    Diverged(usize),
}

/// One standardized sample: `x`/`mask` are `N × W`, `y` is `N × nu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub mask: Vec<f64>,
    pub y: Vec<f64>,
    pub anchor_t: usize,
    /// Text-bank id per sensor (empty when no text is used).
    pub text_ids: Vec<usize>,
}

pub fn make_batch(samples: &[&Sample], n: usize, w: usize, nu: usize) -> Batch {
    let bsz = samples.len();
    let cat = |f: fn(&Sample) -> &Vec<f64>| samples.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<f64>>();
    Batch {
        x: Array::new(vec![bsz, n, w], cat(|s| &s.x)).expect("x shape"),
        mask: Array::new(vec![bsz, n, w], cat(|s| &s.mask)).expect("mask shape"),
        y: Array::new(vec![bsz, n, nu], cat(|s| &s.y)).expect("y shape"),
        text_ids: samples.iter().flat_map(|s| s.text_ids.iter().copied()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub lr_floor: f64,
    /// Fixed gradient-shard count per minibatch. Results do not depend on
    /// the number of worker threads.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 48,
            epochs: 30,
            patience: 5,
            plateau_patience: 3,
            plateau_min_delta: 1e-4,
            lr_floor: 1e-5,
            shards: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub lr: Vec<f64>,
    pub seconds: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_mae(&self) -> f64 {
        self.val_mae[self.best_epoch]
    }
}

fn accumulate(into: &mut Gradients, from: Gradients, weight: f64) {
    if into.len() < from.len() {
        into.resize(from.len(), None);
    }
    for (slot, g) in into.iter_mut().zip(from) {
        let Some(g) = g else { continue };
        match slot {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += weight * b),
            None => *slot = Some(g.map(|v| weight * v)),
        }
    }
}

/// Loss and gradients of one minibatch, computed over fixed shards.
pub fn batch_gradients(model: &MultiTs, samples: &[&Sample], bank: Option<&TextBank>, shards: usize, seed: u64) -> Result<(f64, Gradients), TrainError> {
    let c = &model.config;
    let per = samples.len().div_ceil(shards.max(1));
    let results: Vec<Result<(f64, Gradients, usize), TrainError>> = samples
        .chunks(per)
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(k, chunk)| {
            let batch = make_batch(chunk, model.n, c.w, c.nu);
            let tape = Tape::new();
            let b = Binder::new(&tape, &model.store, true).with_dropout_seed(seed.wrapping_add(k as u64));
            let loss = model.loss(&b, &batch, bank)?;
            loss.backward()?;
            Ok((loss.item(), b.gradients(), chunk.len()))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::new();
    for r in results {
        let (loss, g, len) = r?;
        let wgt = len as f64 / samples.len() as f64;
        total += wgt * loss;
        accumulate(&mut grads, g, wgt);
    }
    Ok((total, grads))
}

/// Standardized predictions for `samples`, in order: means `[S, N, nu]` and
/// optional variances.
pub fn predict_standardized(model: &MultiTs, samples: &[Sample], bank: Option<&TextBank>) -> Result<(Array, Option<Array>), TrainError> {
    let c = &model.config;
    if samples.is_empty() {
        return Err(TrainError::Empty("prediction"));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let parts: Vec<Result<(Array, Option<Array>), TrainError>> = refs
        .chunks(64)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|chunk| {
            let batch = make_batch(chunk, model.n, c.w, c.nu);
            let tape = Tape::new();
            let b = Binder::new(&tape, &model.store, false);
            let f = model.forward(&b, &batch, bank)?;
            Ok((f.mu.value(), f.sigma2.map(|s| s.value())))
        })
        .collect();
    let mut mu = Vec::new();
    let mut s2 = Vec::new();
    for p in parts {
        let (m, s) = p?;
        mu.extend_from_slice(m.data());
        if let Some(s) = s {
            s2.extend_from_slice(s.data());
        }
    }
    let shape = vec![samples.len(), model.n, c.nu];
    let sigma2 = (!s2.is_empty()).then(|| Array::new(shape.clone(), s2).unwrap());
    Ok((Array::new(shape, mu)?, sigma2))
}

/// Point forecasts on the original scale, `[S, N, nu]`.
pub fn predict(model: &MultiTs, samples: &[Sample], bank: Option<&TextBank>, norm: &NormStats) -> Result<Array, TrainError> {
    let (mu, _) = predict_standardized(model, samples, bank)?;
    Ok(mu.map(|v| v * norm.std[0] + norm.mean[0]))
}

/// Gaussian forecasts and 90% intervals on the original scale.
pub fn predict_with_uncertainty(model: &MultiTs, samples: &[Sample], bank: Option<&TextBank>, norm: &NormStats) -> Result<GaussianForecast, TrainError> {
    let (mu, s2) = predict_standardized(model, samples, bank)?;
    let s2 = s2.ok_or_else(|| ModelError::Config("model has no variance head".into()))?;
    Ok(destandardize_gaussian(&mu, &s2, norm, 0))
}

/// Share of finite targets inside the 90% interval.
pub fn interval_coverage(forecast: &GaussianForecast, target: &Array) -> f64 {
    let (mut inside, mut total) = (0usize, 0usize);
    for ((&y, &lo), &hi) in target.data().iter().zip(forecast.lo90.data()).zip(forecast.hi90.data()) {
        if y.is_finite() {
            total += 1;
            if lo <= y && y <= hi {
                inside += 1;
            }
        }
    }
    inside as f64 / total.max(1) as f64
}

/// Targets on the original scale, `[S, N, nu]`.
pub fn targets(samples: &[Sample], n: usize, nu: usize, norm: &NormStats) -> Array {
    let data = samples.iter().flat_map(|s| s.y.iter().map(|v| v * norm.std[0] + norm.mean[0])).collect();
    Array::new(vec![samples.len(), n, nu], data).expect("target shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    #[serde(rename = "MAPE")]
    pub mape: f64,
}

/// MAE, RMSE and MAPE (percent, over targets with `|y| >= mask_eps`).
pub fn metrics(pred: &[f64], target: &[f64], mask_eps: f64) -> Result<Metrics, TrainError> {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return Err(TrainError::Empty("metric"));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0usize);
    for (&p, &y) in pred.iter().zip(target) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() >= mask_eps {
            pct += e.abs() / y.abs();
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(TrainError::NoMapeTargets(mask_eps));
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: 100.0 * pct / kept as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizons: Vec<HorizonMetrics>,
    pub aggregate: Metrics,
}

pub const DEFAULT_HORIZONS: [usize; 3] = [3, 6, 12];
pub const MAPE_EPS: f64 = 1.0;

/// Metrics per 1-based horizon step (only those `<= nu`) and over all steps.
pub fn evaluate_arrays(pred: &Array, target: &Array, horizons: &[usize]) -> Result<EvalReport, TrainError> {
    let nu = *pred.shape().last().unwrap();
    let mut rows = Vec::new();
    for &h in horizons.iter().filter(|&&h| h >= 1 && h <= nu) {
        let pick = |a: &Array| a.data().iter().skip(h - 1).step_by(nu).copied().collect::<Vec<_>>();
        rows.push(HorizonMetrics {
            horizon: h,
            metrics: metrics(&pick(pred), &pick(target), MAPE_EPS)?,
        });
    }
    Ok(EvalReport {
        horizons: rows,
        aggregate: metrics(pred.data(), target.data(), MAPE_EPS)?,
    })
}

pub fn evaluate(model: &MultiTs, samples: &[Sample], bank: Option<&TextBank>, norm: &NormStats, horizons: &[usize]) -> Result<EvalReport, TrainError> {
    let pred = predict(model, samples, bank, norm)?;
    evaluate_arrays(&pred, &targets(samples, model.n, model.config.nu, norm), horizons)
}

/// Historical average: every horizon step gets the mean of the observed
/// input values of that sensor (the training mean when none is observed).
pub fn ha_baseline(samples: &[Sample], n: usize, w: usize, nu: usize, norm: &NormStats) -> Array {
    let mut out = Vec::with_capacity(samples.len() * n * nu);
    for s in samples {
        for node in 0..n {
            let (mut sum, mut cnt) = (0.0, 0.0);
            for t in 0..w {
                if s.mask[node * w + t] > 0.5 {
                    sum += s.x[node * w + t];
                    cnt += 1.0;
                }
            }
            let z = if cnt > 0.0 { sum / cnt } else { 0.0 };
            out.extend(std::iter::repeat(z * norm.std[0] + norm.mean[0]).take(nu));
        }
    }
    Array::new(vec![samples.len(), n, nu], out).expect("ha shape")
}

/// Trains with Adam, reduce-on-plateau and early stopping on validation MAE,
/// then restores the best epoch's parameters.
pub fn train(
    model: &mut MultiTs,
    train_set: &[Sample],
    val_set: &[Sample],
    bank: Option<&TextBank>,
    norm: &NormStats,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Empty("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let mut opt = OptimState::new(AdamConfig::adam(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best_store = model.store.clone();
    let mut best = f64::INFINITY;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(model, &samples, bank, cfg.shards, seed ^ (step << 20))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged(epoch));
            }
            opt.step(&mut model.store, &grads)?;
            total += loss * samples.len() as f64;
            count += samples.len();
            step += 1;
        }
        let val = evaluate(model, val_set, bank, norm, &[])?.aggregate.mae;
        history.train_loss.push(total / count as f64);
        history.val_mae.push(val);
        history.lr.push(opt.lr);
        history.seconds.push(start.elapsed().as_secs_f64());
        if val < best {
            best = val;
            history.best_epoch = epoch;
            best_store = model.store.clone();
        } else if epoch - history.best_epoch >= cfg.patience {
            break;
        }
        opt.lr = lr_schedule(cfg.lr, &history.val_mae, cfg.plateau_patience, cfg.plateau_min_delta, cfg.lr_floor);
    }
    model.store = best_store;
    Ok(history)
}
