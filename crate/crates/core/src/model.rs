//! The full forecaster: prompt contextualization, intra-series attention,
//! gated inter-series attention / Chebyshev fusion, cross-modal alignment
//! with text embeddings and a flatten-linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{inter_series, intra_series, GqAttention};
use crate::data::{Adjacency, NormStats};
use crate::graph::{ChebConv, Gate, GraphError};
use crate::prompt::{PromptPool, RetrievalResult};
use crate::tensor::{normal_array, Array, Binder, ParamId, ParamStore, Tensor, TensorError};
use crate::text::{TextBank, TextPooler};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiTsConfig {
    pub w: usize,
    pub nu: usize,
    pub d: usize,
    /// Prompt pool size.
    pub m: usize,
    /// Prompts retrieved per window.
    pub kappa: usize,
    pub groups: usize,
    pub heads: usize,
    pub k_cheb: usize,
    pub uncertainty: bool,
    pub use_text: bool,
    pub use_prompt: bool,
    pub use_intra: bool,
    pub use_inter: bool,
    pub use_cma: bool,
    pub use_graph: bool,
    pub positional: bool,
    pub residual: bool,
}

impl Default for MultiTsConfig {
    fn default() -> Self {
        Self {
            w: 12,
            nu: 12,
            d: 64,
            m: 15,
            kappa: 4,
            groups: 3,
            heads: 4,
            k_cheb: 3,
            uncertainty: false,
            use_text: true,
            use_prompt: true,
            use_intra: true,
            use_inter: true,
            use_cma: true,
            use_graph: true,
            positional: true,
            residual: true,
        }
    }
}

impl MultiTsConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("w", self.w),
            ("nu", self.nu),
            ("d", self.d),
            ("m", self.m),
            ("kappa", self.kappa),
            ("groups", self.groups),
            ("heads", self.heads),
            ("k_cheb", self.k_cheb),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(ModelError::Config(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if self.kappa > self.m {
            return Err(ModelError::Config(format!("kappa = {} exceeds pool size m = {}", self.kappa, self.m)));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        if self.uncertainty {
            2 * self.nu
        } else {
            self.nu
        }
    }
}

/// A minibatch of standardized model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, N, W]`, missing entries zeroed.
    pub x: Array,
    /// `[B, N, W]` observation channel.
    pub mask: Array,
    /// `[B, N, nu]`.
    pub y: Array,
    /// Text-bank id per (sample, sensor), length `B·N`.
    pub text_ids: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

pub struct Forward<'t> {
    /// `[B, N, nu]` means (or point forecasts).
    pub mu: Tensor<'t>,
    /// `[B, N, nu]` variances for the Gaussian head.
    pub sigma2: Option<Tensor<'t>>,
    pub retrieval: Vec<RetrievalResult>,
}

#[derive(Clone, Debug)]
struct TextStage {
    pooler: TextPooler,
    cma: Option<GqAttention>,
}

#[derive(Clone, Debug)]
pub struct MultiTs {
    pub config: MultiTsConfig,
    pub n: usize,
    pub d_lm: usize,
    pub store: ParamStore,
    pub pool: PromptPool,
    pos_emb: Option<ParamId>,
    intra: Option<GqAttention>,
    inter: Option<GqAttention>,
    cheb: Option<ChebConv>,
    gate: Option<Gate>,
    text: Option<TextStage>,
    head_w: ParamId,
    head_b: ParamId,
}

impl MultiTs {
    /// Builds a model for `n` sensors. `graph` feeds the Chebyshev branch
    /// when `use_graph` is set; `d_lm` is the width of the text token states.
    pub fn new(config: &MultiTsConfig, n: usize, graph: Option<&Adjacency>, d_lm: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pool = PromptPool::new(&mut store, "pool", c.m, c.w, c.d, c.kappa, &mut rng);
        let pos_emb = c
            .positional
            .then(|| store.add("pos_emb", normal_array(&mut rng, &[c.w, c.d], 0.1), true));
        let intra = c
            .use_intra
            .then(|| GqAttention::new(&mut store, "intra", c.groups, c.heads, c.d, &mut rng));
        let inter = c
            .use_inter
            .then(|| GqAttention::new(&mut store, "inter", c.groups, c.heads, c.d, &mut rng));
        let cheb = match (c.use_inter && c.use_graph, graph) {
            (true, Some(g)) => {
                if g.n() != n {
                    return Err(ModelError::Input(format!("graph has {} nodes, data has {n}", g.n())));
                }
                Some(ChebConv::new(&mut store, "cheb", g, c.k_cheb, c.d, &mut rng)?)
            }
            (true, None) => return Err(ModelError::Config("use_graph is set but no graph was given".into())),
            _ => None,
        };
        let gate = (inter.is_some() && cheb.is_some()).then(|| Gate::new(&mut store, "gate", c.d, &mut rng));
        let text = c.use_text.then(|| TextStage {
            pooler: TextPooler::new(&mut store, "text", c.w, d_lm, c.d, &mut rng),
            cma: c
                .use_cma
                .then(|| GqAttention::new(&mut store, "cma", c.groups, c.heads, c.d, &mut rng)),
        });
        let fan_in = c.w * c.d;
        let head_w = store.add("head.w", normal_array(&mut rng, &[fan_in, c.outputs()], (1.0 / fan_in as f64).sqrt()), true);
        let head_b = store.add("head.b", Array::zeros(&[c.outputs()]), true);
        Ok(Self {
            config: c.clone(),
            n,
            d_lm,
            store,
            pool,
            pos_emb,
            intra,
            inter,
            cheb,
            gate,
            text,
            head_w,
            head_b,
        })
    }

    pub fn head_bias(&self) -> ParamId {
        self.head_b
    }

    fn residual<'t>(&self, x: Tensor<'t>, f: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        if self.config.residual {
            x.add(f)
        } else {
            Ok(f)
        }
    }

    /// Text embeddings `[B·N, W, d]` for the batch's text ids.
    fn text_embeddings<'t>(&self, b: &Binder<'t>, pooler: &TextPooler, bank: &TextBank, ids: &[usize]) -> Result<Tensor<'t>, ModelError> {
        let mut unique: Vec<usize> = ids.to_vec();
        unique.sort_unstable();
        unique.dedup();
        if let Some(&bad) = unique.last().filter(|&&i| i >= bank.len()) {
            return Err(ModelError::Input(format!("text id {bad} outside a bank of {}", bank.len())));
        }
        let states: Vec<&Array> = unique.iter().map(|&i| &bank.states[i]).collect();
        let (pooled, _) = pooler.pool(b, &states)?;
        let (w, d) = (self.config.w, self.config.d);
        let rows: Vec<usize> = ids.iter().map(|i| unique.binary_search(i).unwrap()).collect();
        Ok(pooled.reshape(&[unique.len(), w * d])?.gather_rows(&rows)?.reshape(&[ids.len(), w, d])?)
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, batch: &Batch, bank: Option<&TextBank>) -> Result<Forward<'t>, ModelError> {
        let c = &self.config;
        let xs = batch.x.shape();
        if xs.len() != 3 || xs[1] != self.n || xs[2] != c.w || batch.mask.shape() != xs {
            return Err(ModelError::Input(format!("expected [B, {}, {}] inputs, got {:?}", self.n, c.w, xs)));
        }
        let (bsz, n, w, d) = (xs[0], self.n, c.w, c.d);

        let x = b.constant(batch.x.clone());
        let mask = b.constant(batch.mask.clone());
        let mut s = self.pool.project_input(b, x, Some(mask))?.reshape(&[bsz * n, w, d])?;
        let mut retrieval = Vec::new();
        if c.use_prompt {
            let (ctx, r) = self.pool.forward(b, s)?;
            s = ctx;
            retrieval = r;
        }
        if let Some(p) = self.pos_emb {
            s = s.add(b.param(p))?;
        }
        let mut s = s.reshape(&[bsz, n, w, d])?;

        if let Some(attn) = &self.intra {
            s = self.residual(s, intra_series(b, s, attn)?)?;
        }

        let attn_view = self.inter.as_ref().map(|a| inter_series(b, s, a)).transpose()?;
        let graph_view = match &self.cheb {
            Some(cheb) => {
                let by_step = s.permute(&[0, 2, 1, 3])?;
                Some(cheb.forward(b, by_step)?.permute(&[0, 2, 1, 3])?)
            }
            None => None,
        };
        let spatial = match (attn_view, graph_view, &self.gate) {
            (Some(a), Some(g), Some(gate)) => Some(gate.fuse(b, a, g)?),
            (Some(a), None, _) => Some(a),
            (None, Some(g), _) => Some(g),
            _ => None,
        };
        if let Some(sp) = spatial {
            s = self.residual(s, sp)?;
        }

        if let Some(stage) = &self.text {
            let bank = bank.ok_or_else(|| ModelError::Input("text stage enabled but no text bank given".into()))?;
            if batch.text_ids.len() != bsz * n {
                return Err(ModelError::Input(format!("{} text ids for {} series", batch.text_ids.len(), bsz * n)));
            }
            let h_text = self.text_embeddings(b, &stage.pooler, bank, &batch.text_ids)?;
            let flat = s.reshape(&[bsz * n, w, d])?;
            let merged = match &stage.cma {
                Some(cma) => self.residual(flat, cma.attend(b, flat, h_text, false)?.0)?,
                None => flat.add(h_text.mean_keepdim(1)?)?,
            };
            s = merged.reshape(&[bsz, n, w, d])?;
        }

        let out = s
            .reshape(&[bsz, n, w * d])?
            .matmul(b.param(self.head_w))?
            .add(b.param(self.head_b))?;
        if c.uncertainty {
            let parts = out.split(2, &[c.nu, c.nu])?;
            Ok(Forward {
                mu: parts[0],
                sigma2: Some(parts[1].softplus().add_scalar(1e-6)),
                retrieval,
            })
        } else {
            Ok(Forward {
                mu: out,
                sigma2: None,
                retrieval,
            })
        }
    }

    /// Training objective: MAE for point forecasts, Gaussian NLL otherwise.
    pub fn loss<'t>(&self, b: &Binder<'t>, batch: &Batch, bank: Option<&TextBank>) -> Result<Tensor<'t>, ModelError> {
        let f = self.forward(b, batch, bank)?;
        let y = b.constant(batch.y.clone());
        Ok(match f.sigma2 {
            Some(s2) => gaussian_nll_loss(f.mu, s2, y)?,
            None => mae_loss(f.mu, y)?,
        })
    }
}

/// Mean absolute error over every entry.
pub fn mae_loss<'t>(pred: Tensor<'t>, target: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mae_loss",
            shapes: vec![pred.shape(), target.shape()],
        });
    }
    Ok(pred.sub(target)?.abs().mean())
}

/// `Σ log(σ²)/2 + (y − μ)²/(2σ²)` over the per-sample entries, averaged over
/// the leading batch axis.
pub fn gaussian_nll_loss<'t>(mu: Tensor<'t>, sigma2: Tensor<'t>, target: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
    if mu.shape() != target.shape() || sigma2.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gaussian_nll_loss",
            shapes: vec![mu.shape(), sigma2.shape(), target.shape()],
        });
    }
    if sigma2.with_value(|a| a.data().iter().any(|&v| !(v > 0.0))) {
        return Err(TensorError::InvalidArgument("variance must be positive".into()));
    }
    let batch = if mu.shape().len() > 1 { mu.shape()[0] } else { 1 };
    let fit = mu.sub(target)?.square().div(sigma2.scale(2.0))?;
    Ok(sigma2.log().scale(0.5).add(fit)?.sum().scale(1.0 / batch as f64))
}

/// Gaussian forecast on the original scale with its central 90% interval.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianForecast {
    pub mu: Array,
    pub sigma2: Array,
    pub lo90: Array,
    pub hi90: Array,
}

pub const Z90: f64 = 1.6448536269514722;

/// Maps a standardized mean/variance pair back to the data scale of
/// feature `feat`.
pub fn destandardize_gaussian(mu: &Array, sigma2: &Array, norm: &NormStats, feat: usize) -> GaussianForecast {
    let (m, s) = (norm.mean[feat], norm.std[feat]);
    let mu = mu.map(|v| v * s + m);
    let sigma2 = sigma2.map(|v| v * s * s);
    let sd: Vec<f64> = sigma2.data().iter().map(|v| v.sqrt()).collect();
    let lo = Array::new(mu.shape().to_vec(), mu.data().iter().zip(&sd).map(|(m, s)| m - Z90 * s).collect()).unwrap();
    let hi = Array::new(mu.shape().to_vec(), mu.data().iter().zip(&sd).map(|(m, s)| m + Z90 * s).collect()).unwrap();
    GaussianForecast {
        mu,
        sigma2,
        lo90: lo,
        hi90: hi,
    }
}
