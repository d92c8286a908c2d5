//! Mixture-of-projection-experts low-rank adapters.
//!
//! A layer computes `y = x·W0 + α·((drop(x)·B)·D)·C̄(x)` where `W0`, `B` and
//! `D` are frozen and `C̄(x)` is the router-weighted mixture of the selected
//! trainable experts `C_k`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::Projection;
use crate::select::top_k;
use crate::tensor::{normal_array, Array, Binder, ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("rank r = {r} must be even, positive and at most min(d_in, d_out)/2 = {limit}")]
    BadRank { r: usize, limit: usize },
    #[error("k_top = {k_top} must lie in 1..={experts}")]
    BadTopK { k_top: usize, experts: usize },
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub experts: usize,
    pub k_top: usize,
    pub dropout: f64,
    pub quantize: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 1.0 / 16.0,
            experts: 4,
            k_top: 2,
            dropout: 0.05,
            quantize: false,
        }
    }
}

/// Per-column affine 8-bit code: `x̂ = offset + q·scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub q: Vec<u8>,
    pub scale: Vec<f64>,
    /// Channel minimum; kept as a float so constant channels decode exactly.
    pub offset: Vec<f64>,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn nbytes(&self) -> usize {
        self.q.len() + 16 * self.scale.len()
    }
}

/// Quantizes a `rows × cols` matrix with one scale per column.
pub fn quantize8(w: &Array) -> Result<QuantizedTensor, AdapterError> {
    let (rows, cols) = (w.shape()[0], w.len() / w.shape()[0].max(1));
    if let Some(&bad) = w.data().iter().find(|v| !v.is_finite()) {
        return Err(AdapterError::NonFinite(bad));
    }
    let mut scale = vec![0.0; cols];
    let mut offset = vec![0.0; cols];
    for c in 0..cols {
        let col = (0..rows).map(|r| w.data()[r * cols + c]);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        offset[c] = lo;
        scale[c] = ((hi - lo) / 255.0).max(1e-12);
    }
    let q = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % cols;
            ((v - offset[c]) / scale[c]).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(QuantizedTensor {
        q,
        scale,
        offset,
        shape: w.shape().to_vec(),
    })
}

pub fn dequantize8(qt: &QuantizedTensor) -> Array {
    let cols = qt.scale.len();
    let data = qt
        .q
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let c = i % cols;
            qt.offset[c] + q as f64 * qt.scale[c]
        })
        .collect();
    Array::new(qt.shape.clone(), data).expect("quantized shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub renorm_probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MopeLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
    pub k_top: usize,
    pub dropout: f64,
    pub w0: ParamId,
    pub b: ParamId,
    pub d: ParamId,
    pub experts: Vec<ParamId>,
    pub router: Option<ParamId>,
    pub quantized: Option<QuantizedTensor>,
}

impl MopeLayer {
    /// Builds a layer over the frozen base `w0` (d_in × d_out). `B` and `D`
    /// are drawn from `rng` and frozen; experts start at zero.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, w0: Array, cfg: &AdapterConfig, rng: &mut R) -> Result<Self, AdapterError> {
        let (d_in, d_out) = (w0.shape()[0], w0.shape()[1]);
        let limit = d_in.min(d_out) / 2;
        if cfg.rank == 0 || cfg.rank % 2 != 0 || cfg.rank > limit {
            return Err(AdapterError::BadRank { r: cfg.rank, limit });
        }
        if cfg.experts == 0 || cfg.k_top == 0 || cfg.k_top > cfg.experts {
            return Err(AdapterError::BadTopK {
                k_top: cfg.k_top,
                experts: cfg.experts,
            });
        }
        let half = cfg.rank / 2;
        let (w0_value, quantized) = if cfg.quantize {
            let qt = quantize8(&w0)?;
            (dequantize8(&qt), Some(qt))
        } else {
            (w0, None)
        };
        let name = |s: &str| format!("{prefix}.{s}");
        let w0 = store.add(name("w0"), w0_value, false);
        let b = store.add(name("lora_b"), normal_array(rng, &[d_in, cfg.rank], 1.0), false);
        let d = store.add(name("lora_d"), normal_array(rng, &[cfg.rank, half], (1.0 / cfg.rank as f64).sqrt()), false);
        let experts = (0..cfg.experts)
            .map(|k| store.add(name(&format!("expert{k}")), Array::zeros(&[half, d_out]), true))
            .collect();
        let router = (cfg.experts > 1)
            .then(|| store.add(name("router"), normal_array(rng, &[d_in, cfg.experts], (1.0 / d_in as f64).sqrt()), true));
        Ok(Self {
            d_in,
            d_out,
            rank: cfg.rank,
            alpha: cfg.alpha,
            k_top: cfg.k_top,
            dropout: cfg.dropout,
            w0,
            b,
            d,
            experts,
            router,
            quantized,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Router decisions for every row of `x` (rows × d_in), outside any tape.
    pub fn route(&self, store: &ParamStore, x: &Array) -> Vec<RouterOutput> {
        let rows = x.len() / self.d_in;
        let Some(router) = self.router else {
            return vec![
                RouterOutput {
                    probs: vec![1.0],
                    selected: vec![0],
                    renorm_probs: vec![1.0],
                };
                rows
            ];
        };
        let logits = x.clone().reshape(&[rows, self.d_in]).expect("router input").matmul2(store.value(router));
        let ke = self.num_experts();
        (0..rows)
            .map(|i| {
                let row = &logits.data()[i * ke..(i + 1) * ke];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
                let selected = top_k(&probs, self.k_top);
                let renorm_probs = if self.k_top == ke {
                    selected.iter().map(|&k| probs[k]).collect()
                } else {
                    let s: f64 = selected.iter().map(|&k| probs[k]).sum();
                    selected.iter().map(|&k| probs[k] / s).collect()
                };
                RouterOutput {
                    probs,
                    selected,
                    renorm_probs,
                }
            })
            .collect()
    }

    /// Per-row expert weights (rows × K_E), zero outside the selected set.
    fn mixture_weights<'t>(&self, b: &Binder<'t>, x: Tensor<'t>, router: ParamId) -> Result<Tensor<'t>, TensorError> {
        let ke = self.num_experts();
        let probs = x.matmul(b.param(router))?.softmax(1)?;
        if self.k_top == ke {
            return Ok(probs);
        }
        let mask: Vec<bool> = probs.with_value(|p| {
            p.data()
                .chunks(ke)
                .flat_map(|row| {
                    let keep = top_k(row, self.k_top);
                    (0..ke).map(move |k| !keep.contains(&k))
                })
                .collect()
        });
        let kept = probs.masked_fill(&mask, &probs.shape(), 0.0)?;
        kept.div(kept.sum_keepdim(1)?)
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward<'t>(&self, b: &Binder<'t>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let shape = x.shape();
        if shape.last() != Some(&self.d_in) {
            return Err(TensorError::ShapeMismatch {
                op: "mope_forward",
                shapes: vec![shape, vec![self.d_in, self.d_out]],
            });
        }
        let rows = x.len() / self.d_in;
        let flat = x.reshape(&[rows, self.d_in])?;
        let base = flat.matmul(b.param(self.w0))?;
        let h = b
            .dropout(flat, self.dropout)?
            .matmul(b.param(self.b))?
            .matmul(b.param(self.d))?;
        let delta = match self.router {
            None => h.matmul(b.param(self.experts[0]))?,
            Some(router) => {
                let ke = self.num_experts();
                let half = self.rank / 2;
                let c_all = Tensor::concat(&self.experts.iter().map(|&c| b.param(c)).collect::<Vec<_>>(), 1)?;
                let per_expert = h.matmul(c_all)?.reshape(&[rows, ke, self.d_out])?;
                let weights = self.mixture_weights(b, flat, router)?.reshape(&[rows, 1, ke])?;
                debug_assert_eq!(h.shape(), vec![rows, half]);
                weights.matmul(per_expert)?.reshape(&[rows, self.d_out])?
            }
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        base.add(delta.scale(self.alpha))?.reshape(&out_shape)
    }
}

impl Projection for MopeLayer {
    fn project<'t>(&self, b: &Binder<'t>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.forward(b, x)
    }
}

/// Trainable parameters: experts plus router.
pub fn count_trainable(layer: &MopeLayer) -> usize {
    let experts = layer.num_experts() * (layer.rank / 2) * layer.d_out;
    experts + layer.router.map_or(0, |_| layer.d_in * layer.num_experts())
}

/// Trainable parameter counts of this layer and of the two usual
/// alternatives at the same rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub adapter: usize,
    /// Trainable `A` (d_in × r) and `B` (r × d_out).
    pub vanilla_lora: usize,
    pub full_finetune: usize,
}

pub fn param_counts(layer: &MopeLayer) -> ParamCounts {
    ParamCounts {
        adapter: count_trainable(layer),
        vanilla_lora: layer.rank * (layer.d_in + layer.d_out),
        full_finetune: layer.d_in * layer.d_out,
    }
}

/// Stored-activation floats needed for the trainable parameters' gradients
/// at batch size `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivationCost {
    /// `(x·B)·D`, all the experts need.
    pub adapter: usize,
    /// Adds the router input kept for the router gradient.
    pub adapter_with_router: usize,
    pub vanilla_lora: usize,
    pub full_finetune: usize,
}

pub fn activation_cost(layer: &MopeLayer, b: usize) -> ActivationCost {
    let adapter = b * layer.rank / 2;
    ActivationCost {
        adapter,
        adapter_with_router: adapter + layer.router.map_or(0, |_| b * layer.d_in),
        vanilla_lora: b * layer.d_in,
        full_finetune: b * layer.d_in,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(d_in: usize, d_out: usize, experts: usize, k_top: usize, seed: u64) -> (ParamStore, MopeLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AdapterConfig {
            experts,
            k_top,
            dropout: 0.0,
            ..Default::default()
        };
        let w0 = normal_array(&mut rng, &[d_in, d_out], 0.1);
        let l = MopeLayer::new(&mut store, "l", w0, &cfg, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn zero_experts_are_transparent() {
        let (store, l) = layer(64, 48, 4, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal_array(&mut rng, &[5, 64], 1.0);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, true);
        let y = l.forward(&b, b.constant(x.clone())).unwrap().value();
        assert_eq!(y, x.matmul2(store.value(l.w0)));
    }

    #[test]
    fn paper_rank_and_alpha_are_default() {
        let cfg = AdapterConfig::default();
        assert_eq!(cfg.rank, 16);
        assert_eq!(cfg.alpha, 1.0 / 16.0);
        assert_eq!(cfg.dropout, 0.05);
    }

    #[test]
    fn accounting_examples() {
        let (_, single) = layer(64, 64, 1, 1, 2);
        assert!(single.router.is_none());
        assert_eq!(count_trainable(&single), 512);
        assert_eq!(
            param_counts(&single),
            ParamCounts {
                adapter: 512,
                vanilla_lora: 2048,
                full_finetune: 4096
            }
        );
        let (_, multi) = layer(64, 64, 4, 2, 3);
        assert_eq!(count_trainable(&multi), 2304);
        let cost = activation_cost(&single, 10);
        assert_eq!(cost.adapter as f64 / cost.vanilla_lora as f64, 0.125);
        assert_eq!(cost.full_finetune, 640);
        assert_eq!(activation_cost(&multi, 10).adapter_with_router, 80 + 640);
    }

    #[test]
    fn rank_and_topk_validated() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bad_rank = AdapterConfig {
            rank: 15,
            ..Default::default()
        };
        assert!(matches!(
            MopeLayer::new(&mut store, "a", Array::zeros(&[64, 64]), &bad_rank, &mut rng),
            Err(AdapterError::BadRank { .. })
        ));
        let too_big = AdapterConfig {
            rank: 16,
            ..Default::default()
        };
        assert!(MopeLayer::new(&mut store, "b", Array::zeros(&[16, 64]), &too_big, &mut rng).is_err());
        let bad_k = AdapterConfig {
            k_top: 5,
            ..Default::default()
        };
        assert!(matches!(
            MopeLayer::new(&mut store, "c", Array::zeros(&[64, 64]), &bad_k, &mut rng),
            Err(AdapterError::BadTopK { .. })
        ));
    }

    #[test]
    fn single_expert_router_is_trivial() {
        let (store, l) = layer(32, 32, 1, 1, 5);
        let r = l.route(&store, &Array::zeros(&[3, 32]));
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].probs, vec![1.0]);
        assert_eq!(r[0].selected, vec![0]);
    }

    #[test]
    fn constant_matrix_round_trips() {
        let w = Array::full(&[4, 3], -2.5);
        assert_eq!(dequantize8(&quantize8(&w).unwrap()), w);
    }

    #[test]
    fn unit_span_grid_error() {
        let col: Vec<f64> = (0..256).map(|i| -1.0 + 2.0 * i as f64 / 255.0).collect();
        let w = Array::new(vec![256, 1], col).unwrap();
        let back = dequantize8(&quantize8(&w).unwrap());
        assert!(back.max_abs_diff(&w) <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn frozen_tensors_get_no_gradient() {
        let (mut store, l) = layer(32, 32, 3, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &c in &l.experts {
            store.set_value(c, normal_array(&mut rng, &[8, 32], 0.5)).unwrap();
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, true);
        let x = b.constant(normal_array(&mut rng, &[4, 32], 1.0));
        l.forward(&b, x).unwrap().square().sum().backward().unwrap();
        let g = b.gradients();
        for id in [l.w0, l.b, l.d] {
            assert!(g[id.0].is_none());
        }
        assert!(l.experts.iter().all(|&c| g[c.0].is_some()));
        assert!(g[l.router.unwrap().0].is_some());
    }
}
