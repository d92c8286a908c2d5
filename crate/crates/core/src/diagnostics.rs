use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Adjacency;
use crate::model::{Batch, MultiTs, MultiTsConfig};
use crate::pipeline::PipelineError;
use crate::tensor::{param_gradcheck, seeded_normal, Array, ParamStore};
use crate::text::{describe_series, LmConfig, TextBank, TinyLm, TrendVocabulary};

/// Central-difference step used by [`run_gradcheck`].
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Pass threshold on the max relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    /// Which network was checked: `model`, `model-gaussian` or `lm`.
    pub network: String,
    pub tensor: String,
    pub max_rel_err: f64,
}

impl GradcheckEntry {
    /// `network/first-name-segment`, e.g. `model/pool` or `lm/lm.block0`.
    pub fn module(&self) -> String {
        let mut parts = self.tensor.split('.');
        let head = parts.next().unwrap_or_default();
        let seg = match (head, parts.next()) {
            ("lm", Some(second)) => format!("lm.{second}"),
            _ => head.to_string(),
        };
        format!("{}/{seg}", self.network)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    /// Worst error per module.
    pub fn per_module(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let v = out.entry(e.module()).or_insert(0.0f64);
            *v = v.max(e.max_rel_err);
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < GRADCHECK_TOL)
    }
}

/// Micro forecaster: N = 2, W = 3, ν = 2, d = 4.
pub fn micro_config(uncertainty: bool) -> MultiTsConfig {
    MultiTsConfig {
        w: 3,
        nu: 2,
        d: 4,
        m: 3,
        kappa: 2,
        groups: 1,
        heads: 2,
        k_cheb: 2,
        uncertainty,
        ..Default::default()
    }
}

/// Small adapter-wrapped LM used for checking.
pub fn micro_lm_config() -> LmConfig {
    LmConfig {
        d_lm: 8,
        layers: 1,
        max_len: 32,
        groups: 1,
        heads: 2,
        ffn: 8,
        rank: 4,
        alpha: 0.5,
        experts: 3,
        k_top: 2,
        dropout: 0.0,
        ..Default::default()
    }
}

/// Fills every trainable tensor with seeded noise so no gradient is
/// trivially zero.
fn randomize(store: &mut ParamStore, seed: u64, spread: f64) -> Result<(), PipelineError> {
    for (k, id) in store.trainable_ids().into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, seeded_normal(&shape, seed + k as u64, spread)?)?;
    }
    Ok(())
}

fn micro_batch(cfg: &MultiTsConfig, n: usize, seed: u64) -> Result<(Batch, Vec<String>), PipelineError> {
    let bsz = 2;
    let x = seeded_normal(&[bsz, n, cfg.w], seed, 1.0)?;
    let mut mask = Array::full(&[bsz, n, cfg.w], 1.0);
    mask.set(&[0, 1, 1], 0.0);
    mask.set(&[1, 0, 2], 0.0);
    let y = seeded_normal(&[bsz, n, cfg.nu], seed + 1, 1.0)?;
    let texts: Vec<String> = x.data().chunks(cfg.w).map(describe_series).collect();
    let mut distinct = texts.clone();
    distinct.sort();
    distinct.dedup();
    let text_ids = texts.iter().map(|t| distinct.binary_search(t).unwrap()).collect();
    Ok((Batch { x, mask, y, text_ids }, distinct))
}

fn collect(network: &str, raw: Vec<(String, f64)>, out: &mut Vec<GradcheckEntry>) {
    out.extend(raw.into_iter().map(|(tensor, max_rel_err)| GradcheckEntry {
        network: network.to_string(),
        tensor,
        max_rel_err,
    }));
}

/// Checks every trainable tensor of the micro forecaster (point and
/// Gaussian heads, text stage included) and of the adapter-wrapped LM.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport, PipelineError> {
    let start = Instant::now();
    let vocab = TrendVocabulary::default();
    let mut lm = TinyLm::new(&micro_lm_config(), vocab.size())?;
    randomize(&mut lm.store, seed + 100, 0.5)?;

    let n = 2;
    let graph = Adjacency::ring(n);
    let mut entries = Vec::new();
    for (network, uncertainty) in [("model", false), ("model-gaussian", true)] {
        let cfg = micro_config(uncertainty);
        let mut model = MultiTs::new(&cfg, n, Some(&graph), lm.config.d_lm, seed)?;
        randomize(&mut model.store, seed + 1000, 0.5)?;
        let (batch, texts) = micro_batch(&cfg, n, seed + 7)?;
        let bank = TextBank::build(&lm, &vocab, texts)?;
        let ids = model.store.trainable_ids();
        let raw = param_gradcheck(&model.store, &ids, GRADCHECK_EPS, |b| {
            model.loss(b, &batch, Some(&bank)).map_err(|e| crate::tensor::TensorError::InvalidArgument(e.to_string()))
        })?;
        collect(network, raw, &mut entries);
    }

    let seqs: Vec<Vec<usize>> = (0..2u64)
        .map(|k| {
            let w = seeded_normal(&[12], seed + 50 + k, 1.0)?;
            Ok(vocab.tokenize(&describe_series(w.data()))?)
        })
        .collect::<Result<_, PipelineError>>()?;
    let ids = lm.store.trainable_ids();
    let raw = param_gradcheck(&lm.store, &ids, GRADCHECK_EPS, |b| {
        lm.loss(b, &seqs).map_err(|e| crate::tensor::TensorError::InvalidArgument(e.to_string()))
    })?;
    collect("lm", raw, &mut entries);

    Ok(GradcheckReport {
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names() {
        let e = |network: &str, tensor: &str| GradcheckEntry {
            network: network.into(),
            tensor: tensor.into(),
            max_rel_err: 0.0,
        };
        assert_eq!(e("model", "pool.keys").module(), "model/pool");
        assert_eq!(e("lm", "lm.block0.q.expert1").module(), "lm/lm.block0");
        assert_eq!(e("model", "head.w").module(), "model/head");
    }
}
