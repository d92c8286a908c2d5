//! End-to-end experiment plumbing: dataset preparation, the trend-LM stage,
//! single runs, ablations and the missing-data grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, TensorEntry};
use crate::data::{AdjacencySource, apply_mask, fit_norm, gen_block, gen_mcar, make_windows, split_chrono, Adjacency, DataError, MissingMask, MissingScheme, NormStats, RawSeries};
use crate::model::{ModelError, MultiTs, MultiTsConfig};
use crate::tensor::Array;
use crate::text::{encode_all, instruction_tune, InstructionPair, LmConfig, LmHistory, TextBank, TextError, TinyLm, TrendDescriber, TrendVocabulary};
use crate::train::{evaluate, evaluate_arrays, ha_baseline, predict, predict_with_uncertainty, targets, train, EvalReport, Sample, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),
    #[error("{0}")]
    Invalid(String),
}

/// Standardized, masked, windowed splits plus per-sensor descriptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub n: usize,
    pub w: usize,
    pub nu: usize,
    pub norm: NormStats,
    pub describer: TrendDescriber,
    /// Distinct descriptions; `Sample::text_ids` index into this list.
    pub texts: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub realized_missing: f64,
}

/// Windows the first feature of `series`, fits normalization on the training
/// inputs, masks inputs with `mask` and describes every sensor window.
pub fn prepare(series: &RawSeries, mask: &MissingMask, w: usize, nu: usize, ratios: (f64, f64, f64)) -> Result<Prepared, PipelineError> {
    if mask.n != series.n() || mask.t != series.t() {
        return Err(PipelineError::Invalid(format!(
            "mask is {}x{} but the series is {}x{}",
            mask.n,
            mask.t,
            series.n(),
            series.t()
        )));
    }
    let windows = make_windows(series, w, nu)?;
    let (train_w, val_w, test_w) = split_chrono(windows, ratios)?;
    let norm = fit_norm(&train_w)?;
    let n = series.n();
    let f = series.f();
    let (m, s) = (norm.mean[0], norm.std[0]);
    let convert = |ws: Vec<crate::data::WindowedSample>| -> Result<Vec<Sample>, PipelineError> {
        ws.into_iter()
            .map(|ws| {
                let x: Vec<f64> = ws.input.data().iter().step_by(f).map(|v| (v - m) / s).collect();
                let y: Vec<f64> = ws.target.data().iter().step_by(f).map(|v| (v - m) / s).collect();
                let window = Array::new(vec![n, w, 1], x)?;
                let (masked, channel) = apply_mask(&window, &mask.window(ws.anchor_t - w, w))?;
                Ok(Sample {
                    x: masked.into_data(),
                    mask: channel.into_data(),
                    y,
                    anchor_t: ws.anchor_t,
                    text_ids: Vec::new(),
                })
            })
            .collect()
    };
    let mut train = convert(train_w)?;
    let mut val = convert(val_w)?;
    let mut test = convert(test_w)?;

    let describer = TrendDescriber::fit(train.iter().flat_map(|s| s.x.chunks(w)));
    let mut texts = Vec::new();
    let mut index = std::collections::HashMap::new();
    for split in [&mut train, &mut val, &mut test] {
        for sample in split.iter_mut() {
            sample.text_ids = sample
                .x
                .chunks(w)
                .map(|row| {
                    let t = describer.describe(row);
                    *index.entry(t.clone()).or_insert_with(|| {
                        texts.push(t);
                        texts.len() - 1
                    })
                })
                .collect();
        }
    }
    Ok(Prepared {
        n,
        w,
        nu,
        norm,
        describer,
        texts,
        train,
        val,
        test,
        realized_missing: mask.realized_rate(),
    })
}

/// Instruction pairs from evenly spaced training sensor windows.
pub fn instruction_pairs(prep: &Prepared, count: usize) -> Vec<InstructionPair> {
    let rows: Vec<&[f64]> = prep.train.iter().flat_map(|s| s.x.chunks(prep.w)).collect();
    if rows.is_empty() || count == 0 {
        return Vec::new();
    }
    (0..count)
        .map(|i| {
            let row = rows[(i * rows.len()) / count];
            InstructionPair {
                window: row.to_vec(),
                text: prep.describer.describe(row),
            }
        })
        .collect()
}

/// Builds the frozen base LM and tunes its adapters on `pairs`.
pub fn train_trend_lm(pairs: &[InstructionPair], cfg: &LmConfig, seed: u64) -> Result<(TinyLm, LmHistory), PipelineError> {
    let vocab = TrendVocabulary::default();
    let texts: Vec<String> = pairs.iter().map(|p| p.text.clone()).collect();
    let seqs = encode_all(&vocab, &texts)?;
    let mut lm = TinyLm::new(cfg, vocab.size())?;
    let history = instruction_tune(&mut lm, &seqs, seed)?;
    Ok((lm, history))
}

pub fn text_bank(lm: &TinyLm, prep: &Prepared) -> Result<TextBank, PipelineError> {
    Ok(TextBank::build(lm, &TrendVocabulary::default(), prep.texts.iter().cloned())?)
}

/// Everything a single run needs besides the data split.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub series: &'a RawSeries,
    pub graph: &'a Adjacency,
    pub model: MultiTsConfig,
    pub train: TrainConfig,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    /// Tuned LM; required when the model uses text.
    pub lm: Option<&'a TinyLm>,
    /// 1-based steps reported on the test split.
    pub horizons: Vec<usize>,
}

pub struct RunOutcome {
    pub model: MultiTs,
    pub history: TrainHistory,
    pub test: EvalReport,
    pub ha: EvalReport,
    pub prepared: Prepared,
    pub bank: Option<TextBank>,
}

impl<'a> Experiment<'a> {
    pub fn all_observed(&self) -> MissingMask {
        MissingMask::all_observed(self.series.n(), self.series.t())
    }

    pub fn prepare(&self, mask: &MissingMask) -> Result<Prepared, PipelineError> {
        prepare(self.series, mask, self.model.w, self.model.nu, self.ratios)
    }

    /// Trains `config` on prepared data and evaluates it on the test split.
    pub fn run_prepared(&self, config: &MultiTsConfig, prep: Prepared) -> Result<RunOutcome, PipelineError> {
        let bank = match (config.use_text, self.lm) {
            (true, Some(lm)) => Some(text_bank(lm, &prep)?),
            (true, None) => return Err(PipelineError::Invalid("text stage enabled but no language model given".into())),
            (false, _) => None,
        };
        let d_lm = self.lm.map_or(1, |lm| lm.config.d_lm);
        let mut model = MultiTs::new(config, prep.n, Some(self.graph), d_lm, self.seed)?;
        let history = train(&mut model, &prep.train, &prep.val, bank.as_ref(), &prep.norm, &self.train, self.seed)?;
        let test = evaluate(&model, &prep.test, bank.as_ref(), &prep.norm, &self.horizons)?;
        let ha_pred = ha_baseline(&prep.test, prep.n, prep.w, prep.nu, &prep.norm);
        let ha = evaluate_arrays(&ha_pred, &targets(&prep.test, prep.n, prep.nu, &prep.norm), &self.horizons)?;
        Ok(RunOutcome {
            model,
            history,
            test,
            ha,
            prepared: prep,
            bank,
        })
    }

    pub fn run(&self, mask: &MissingMask) -> Result<RunOutcome, PipelineError> {
        let prep = self.prepare(mask)?;
        self.run_prepared(&self.model, prep)
    }
}

/// The five single-component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    NoText,
    NoPrompt,
    NoIntra,
    NoInter,
    NoCma,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::NoText, Self::NoPrompt, Self::NoIntra, Self::NoInter, Self::NoCma];

    pub fn label(self) -> &'static str {
        match self {
            Self::NoText => "w/o LLMs",
            Self::NoPrompt => "w/o DP",
            Self::NoIntra => "w/o IntraS",
            Self::NoInter => "w/o InterS",
            Self::NoCma => "w/o CMA",
        }
    }

    pub fn apply(self, cfg: &MultiTsConfig) -> MultiTsConfig {
        let mut c = cfg.clone();
        match self {
            Self::NoText => c.use_text = false,
            Self::NoPrompt => c.use_prompt = false,
            Self::NoIntra => c.use_intra = false,
            Self::NoInter => c.use_inter = false,
            Self::NoCma => c.use_cma = false,
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['/', '_', ' '], "-");
        Ok(match key.as_str() {
            "no-text" | "no-llms" | "w-o-llms" => Self::NoText,
            "no-prompt" | "no-dp" | "w-o-dp" => Self::NoPrompt,
            "no-intra" | "no-intras" | "w-o-intras" => Self::NoIntra,
            "no-inter" | "no-inters" | "w-o-inters" => Self::NoInter,
            "no-cma" | "no-mma" | "w-o-cma" | "w-o-mma" => Self::NoCma,
            _ => return Err(PipelineError::UnknownVariant(s.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
    pub best_epoch: usize,
}

/// Full model first, then each variant, all on the same data and seed.
/// `full` may carry an already computed run of `exp` on fully observed data.
pub fn ablate(exp: &Experiment, variants: &[Variant], full: Option<(EvalReport, usize)>) -> Result<Vec<AblationRow>, PipelineError> {
    let prep = exp.prepare(&exp.all_observed())?;
    let mut rows = Vec::with_capacity(variants.len() + 1);
    let mut configs = Vec::new();
    match full {
        Some((report, best_epoch)) => rows.push(AblationRow {
            variant: "full".into(),
            report,
            best_epoch,
        }),
        None => configs.push(("full".to_string(), exp.model.clone())),
    }
    configs.extend(variants.iter().map(|v| (v.label().to_string(), v.apply(&exp.model))));
    for (name, cfg) in configs {
        let out = exp.run_prepared(&cfg, prep.clone())?;
        rows.push(AblationRow {
            variant: name,
            report: out.test,
            best_epoch: out.history.best_epoch,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingRow {
    pub scheme: MissingScheme,
    pub rate: f64,
    pub realized_rate: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingGridConfig {
    pub schemes: Vec<MissingScheme>,
    pub rates: Vec<f64>,
    pub block_len: (usize, usize),
    pub mask_seed: u64,
}

impl Default for MissingGridConfig {
    fn default() -> Self {
        Self {
            schemes: vec![MissingScheme::Mcar, MissingScheme::Block],
            rates: vec![0.1, 0.3, 0.5],
            block_len: (12, 36),
            mask_seed: 11,
        }
    }
}

pub fn make_mask(n: usize, t: usize, scheme: MissingScheme, rate: f64, block_len: (usize, usize), seed: u64) -> Result<MissingMask, PipelineError> {
    Ok(match scheme {
        MissingScheme::Mcar => gen_mcar(n, t, rate, seed)?,
        MissingScheme::Block => gen_block(n, t, rate, block_len, seed)?,
    })
}

/// A fully observed reference run followed by every (scheme, rate) cell.
/// `reference` may carry an already computed fully observed run of `exp`.
pub fn simulate_missing(exp: &Experiment, grid: &MissingGridConfig, reference: Option<EvalReport>) -> Result<Vec<MissingRow>, PipelineError> {
    let (n, t) = (exp.series.n(), exp.series.t());
    let reference = match reference {
        Some(r) => r,
        None => exp.run(&exp.all_observed())?.test,
    };
    let mut rows = vec![MissingRow {
        scheme: MissingScheme::Mcar,
        rate: 0.0,
        realized_rate: 0.0,
        report: reference,
    }];
    for &scheme in &grid.schemes {
        for &rate in &grid.rates {
            let mask = make_mask(n, t, scheme, rate, grid.block_len, grid.mask_seed)?;
            let out = exp.run(&mask)?;
            rows.push(MissingRow {
                scheme,
                rate,
                realized_rate: mask.realized_rate(),
                report: out.test,
            });
        }
    }
    Ok(rows)
}

const ADJ_TENSOR: &str = "graph.adjacency";
const LM_PREFIX: &str = "lm.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    model: MultiTsConfig,
    n: usize,
    d_lm: usize,
    seed: u64,
    norm: NormStats,
    describer: TrendDescriber,
    texts: Vec<String>,
    adjacency_source: AdjacencySource,
    /// LM header, present when the model reads text.
    lm: Option<serde_json::Value>,
    best_epoch: usize,
    best_val_mae: f64,
}

/// A self-contained trained forecaster: weights, graph, normalization,
/// describer and (when text is used) the tuned LM adapters.
pub struct ForecastBundle {
    pub model: MultiTs,
    pub graph: Adjacency,
    pub norm: NormStats,
    pub describer: TrendDescriber,
    pub texts: Vec<String>,
    pub lm: Option<TinyLm>,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

impl ForecastBundle {
    pub fn from_run(out: &RunOutcome, graph: &Adjacency, lm: Option<&TinyLm>, seed: u64) -> Self {
        Self {
            model: out.model.clone(),
            graph: graph.clone(),
            norm: out.prepared.norm.clone(),
            describer: out.prepared.describer.clone(),
            texts: out.prepared.texts.clone(),
            lm: if out.model.config.use_text { lm.cloned() } else { None },
            seed,
            best_epoch: out.history.best_epoch,
            best_val_mae: out.history.best_val_mae(),
        }
    }

    /// Text bank for `prep`, which must come from the same data as training.
    pub fn bank_for(&self, prep: &Prepared) -> Result<Option<TextBank>, PipelineError> {
        if prep.norm != self.norm || prep.describer != self.describer {
            return Err(PipelineError::Invalid("data does not match the checkpoint's normalization statistics".into()));
        }
        match &self.lm {
            Some(lm) => Ok(Some(text_bank(lm, prep)?)),
            None => Ok(None),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let lm_ck = self.lm.as_ref().map(TinyLm::adapter_checkpoint);
        let header = BundleHeader {
            model: self.model.config.clone(),
            n: self.model.n,
            d_lm: self.model.d_lm,
            seed: self.seed,
            norm: self.norm.clone(),
            describer: self.describer.clone(),
            texts: self.texts.clone(),
            adjacency_source: self.graph.source,
            lm: lm_ck.as_ref().map(|c| c.config.clone()),
            best_epoch: self.best_epoch,
            best_val_mae: self.best_val_mae,
        };
        let mut ck = Checkpoint::from_store(serde_json::to_value(&header).expect("header serializes"), &self.model.store, |_| true);
        let extra = std::iter::once((ADJ_TENSOR.to_string(), self.graph.weights.clone(), true))
            .chain(lm_ck.into_iter().flat_map(|c| c.tensors).map(|(e, a)| (e.name, a, e.frozen)));
        let mut offset: u64 = ck.tensors.iter().map(|(_, a)| 8 * a.len() as u64).sum();
        for (name, value, frozen) in extra {
            let entry = TensorEntry {
                name,
                shape: value.shape().to_vec(),
                offset,
                frozen,
            };
            offset += 8 * value.len() as u64;
            ck.tensors.push((entry, value));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PipelineError> {
        let h: BundleHeader = serde_json::from_value(ck.config.clone()).map_err(|e| PipelineError::Invalid(format!("checkpoint header: {e}")))?;
        let adj = ck
            .get(ADJ_TENSOR)
            .ok_or_else(|| PipelineError::Invalid(format!("checkpoint has no {ADJ_TENSOR}")))?;
        let graph = Adjacency::from_matrix(adj.clone(), h.adjacency_source)?;
        let mut model = MultiTs::new(&h.model, h.n, Some(&graph), h.d_lm, h.seed)?;
        let (lm_part, model_part): (Vec<_>, Vec<_>) = ck
            .tensors
            .iter()
            .filter(|(e, _)| e.name != ADJ_TENSOR)
            .cloned()
            .partition(|(e, _)| e.name.starts_with(LM_PREFIX));
        let model_ck = Checkpoint {
            config: serde_json::Value::Null,
            tensors: model_part,
        };
        if model_ck.tensors.len() != model.store.len() {
            return Err(PipelineError::Invalid(format!(
                "checkpoint holds {} forecaster tensors, model has {}",
                model_ck.tensors.len(),
                model.store.len()
            )));
        }
        model_ck.load_into(&mut model.store)?;
        let lm = match h.lm {
            Some(cfg) => Some(TinyLm::from_checkpoint(&Checkpoint {
                config: cfg,
                tensors: lm_part,
            })?),
            None => None,
        };
        Ok(Self {
            model,
            graph,
            norm: h.norm,
            describer: h.describer,
            texts: h.texts,
            lm,
            seed: h.seed,
            best_epoch: h.best_epoch,
            best_val_mae: h.best_val_mae,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PipelineError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PipelineError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One line of a predictions table; `horizon_step` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub sensor_id: usize,
    pub anchor_t: usize,
    pub horizon_step: usize,
    pub y_true: Option<f64>,
    pub y_pred: f64,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub lo90: Option<f64>,
    pub hi90: Option<f64>,
}

/// Prediction rows for `samples` on the original scale. Targets stored as
/// NaN are reported as unknown.
pub fn forecast_rows(model: &MultiTs, samples: &[Sample], bank: Option<&TextBank>, norm: &NormStats) -> Result<Vec<ForecastRow>, PipelineError> {
    let (n, nu) = (model.n, model.config.nu);
    let (point, gaussian) = if model.config.uncertainty {
        let g = predict_with_uncertainty(model, samples, bank, norm)?;
        (g.mu.clone(), Some(g))
    } else {
        (predict(model, samples, bank, norm)?, None)
    };
    let truth = targets(samples, n, nu, norm);
    let mut rows = Vec::with_capacity(point.len());
    for (si, s) in samples.iter().enumerate() {
        for node in 0..n {
            for h in 0..nu {
                let i = (si * n + node) * nu + h;
                let y = truth.data()[i];
                let at = |a: &Array| a.data()[i];
                rows.push(ForecastRow {
                    sensor_id: node,
                    anchor_t: s.anchor_t,
                    horizon_step: h + 1,
                    y_true: y.is_finite().then_some(y),
                    y_pred: point.data()[i],
                    mu: gaussian.as_ref().map(|g| at(&g.mu)),
                    sigma: gaussian.as_ref().map(|g| at(&g.sigma2).sqrt()),
                    lo90: gaussian.as_ref().map(|g| at(&g.lo90)),
                    hi90: gaussian.as_ref().map(|g| at(&g.hi90)),
                });
            }
        }
    }
    Ok(rows)
}

impl ForecastBundle {
    /// Standardized, masked inputs for every anchor `W..=T` of feature 0 of
    /// `series`. Non-finite values count as missing; targets past the end or
    /// missing are NaN.
    pub fn samples_from_series(&self, series: &RawSeries) -> Result<(Vec<Sample>, Vec<String>), PipelineError> {
        let (n, w, nu) = (self.model.n, self.model.config.w, self.model.config.nu);
        if series.n() != n {
            return Err(PipelineError::Invalid(format!("input has {} sensors, the model expects {n}", series.n())));
        }
        if series.t() < w {
            return Err(PipelineError::Invalid(format!("input has {} steps, the model needs at least {w}", series.t())));
        }
        let z = |node: usize, t: usize| {
            let v = series.get(node, t, 0);
            if v.is_finite() {
                self.norm.standardize(v, 0)
            } else {
                f64::NAN
            }
        };
        let mut texts: Vec<String> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut samples = Vec::new();
        for anchor in w..=series.t() {
            let mut x = Vec::with_capacity(n * w);
            let mut mask = Vec::with_capacity(n * w);
            let mut y = Vec::with_capacity(n * nu);
            for node in 0..n {
                for t in anchor - w..anchor {
                    let v = z(node, t);
                    mask.push(if v.is_finite() { 1.0 } else { 0.0 });
                    x.push(if v.is_finite() { v } else { 0.0 });
                }
                y.extend((anchor..anchor + nu).map(|t| if t < series.t() { z(node, t) } else { f64::NAN }));
            }
            let text_ids = x
                .chunks(w)
                .map(|row| {
                    let t = self.describer.describe(row);
                    *index.entry(t.clone()).or_insert_with(|| {
                        texts.push(t);
                        texts.len() - 1
                    })
                })
                .collect();
            samples.push(Sample {
                x,
                mask,
                y,
                anchor_t: anchor,
                text_ids,
            });
        }
        Ok((samples, texts))
    }

    /// Forecasts the `nu` steps after every anchor of `series`.
    pub fn forecast(&self, series: &RawSeries) -> Result<Vec<ForecastRow>, PipelineError> {
        let (samples, texts) = self.samples_from_series(series)?;
        let bank = match &self.lm {
            Some(lm) => Some(TextBank::build(lm, &TrendVocabulary::default(), texts)?),
            None => None,
        };
        forecast_rows(&self.model, &samples, bank.as_ref(), &self.norm)
    }
}
