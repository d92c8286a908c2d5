//! Shared prompt pool: M learned key/value prompts retrieved per sensor by an
//! additive score-matching function and concatenated with the window
//! embedding.

use rand::Rng;

use crate::select::top_k;
use crate::tensor::{normal_array, Array, Binder, ParamId, ParamStore, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// κ distinct prompt indices, best first.
    pub indices: Vec<usize>,
    /// Scores of `indices`, non-increasing.
    pub scores: Vec<f64>,
}

/// Parameter handles of a prompt pool. Shapes:
/// keys M×d, values M×W×d, W_q W×d, W_k d×d, W_v d, W_o (κ+1)d×d, and a
/// shared 1→d input projection (weight, bias, observation-mask weight).
#[derive(Clone, Debug)]
pub struct PromptPool {
    pub m: usize,
    pub w: usize,
    pub d: usize,
    pub kappa: usize,
    pub keys: ParamId,
    pub values: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub in_weight: ParamId,
    pub in_bias: ParamId,
    pub mask_weight: ParamId,
}

impl PromptPool {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, m: usize, w: usize, d: usize, kappa: usize, rng: &mut R) -> Self {
        assert!(kappa >= 1 && kappa <= m, "kappa must lie in 1..=M");
        let name = |s: &str| format!("{prefix}.{s}");
        let glorot = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let keys = store.add(name("keys"), normal_array(rng, &[m, d], 0.02), true);
        let values = store.add(name("values"), normal_array(rng, &[m, w, d], 0.02), true);
        let w_q = store.add(name("w_q"), normal_array(rng, &[w, d], 1.0), true);
        let w_k = store.add(name("w_k"), normal_array(rng, &[d, d], glorot(d, d)), true);
        let w_v = store.add(name("w_v"), normal_array(rng, &[d], (1.0 / d as f64).sqrt()), true);
        let w_o = store.add(name("w_o"), normal_array(rng, &[(kappa + 1) * d, d], glorot((kappa + 1) * d, d)), true);
        let in_weight = store.add(name("in_weight"), normal_array(rng, &[d], 1.0), true);
        let in_bias = store.add(name("in_bias"), Array::zeros(&[d]), true);
        let mask_weight = store.add(name("mask_weight"), Array::zeros(&[d]), true);
        Self {
            m,
            w,
            d,
            kappa,
            keys,
            values,
            w_q,
            w_k,
            w_v,
            w_o,
            in_weight,
            in_bias,
            mask_weight,
        }
    }

    /// Shared affine lift of every scalar observation to a d-vector:
    /// `x[..., W] -> S[..., W, d]`. The optional 0/1 observation channel
    /// enters through its own weight vector.
    pub fn project_input<'t>(&self, b: &Binder<'t>, window: Tensor<'t>, mask: Option<Tensor<'t>>) -> Result<Tensor<'t>> {
        let shape = window.shape();
        if *shape.last().unwrap() != self.w {
            return Err(TensorError::ShapeMismatch {
                op: "project_input",
                shapes: vec![shape, vec![self.w]],
            });
        }
        let mut col = shape.clone();
        col.push(1);
        let mut s = window
            .reshape(&col)?
            .mul(b.param(self.in_weight))?
            .add(b.param(self.in_bias))?;
        if let Some(m) = mask {
            s = s.add(m.reshape(&col)?.mul(b.param(self.mask_weight))?)?;
        }
        Ok(s)
    }

    /// Scores of every prompt against one W×d window embedding.
    pub fn scores(&self, store: &ParamStore, s: &[f64]) -> Vec<f64> {
        let (w, d) = (self.w, self.d);
        let wq = store.value(self.w_q).data();
        let wk = store.value(self.w_k).data();
        let wv = store.value(self.w_v).data();
        let keys = store.value(self.keys).data();
        let mut u = vec![0.0; d];
        for t in 0..w {
            for j in 0..d {
                u[j] += s[t * d + j] * wq[t * d + j];
            }
        }
        u.iter_mut().for_each(|x| *x /= w as f64);
        (0..self.m)
            .map(|m| {
                let key = &keys[m * d..(m + 1) * d];
                (0..d)
                    .map(|i| {
                        let wk_key: f64 = (0..d).map(|j| wk[i * d + j] * key[j]).sum();
                        wv[i] * (u[i] + wk_key).tanh()
                    })
                    .sum()
            })
            .collect()
    }

    pub fn retrieve(&self, store: &ParamStore, s: &[f64]) -> RetrievalResult {
        let scores = self.scores(store, s);
        let indices = top_k(&scores, self.kappa);
        RetrievalResult {
            scores: indices.iter().map(|&i| scores[i]).collect(),
            indices,
        }
    }

    /// `[V_1; …; V_κ; S] · W_o` per row, with the κ prompt values supplied as
    /// an R×κ×W×d tensor.
    pub fn contextualize_values<'t>(&self, b: &Binder<'t>, s: Tensor<'t>, values: Tensor<'t>) -> Result<Tensor<'t>> {
        let ss = s.shape();
        let vs = values.shape();
        if vs.len() != 4 || vs[1] != self.kappa || vs[0] != ss[0] || vs[2..] != ss[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "contextualize",
                shapes: vec![ss, vs],
            });
        }
        let (r, w, d) = (ss[0], ss[1], ss[2]);
        let v = values.permute(&[0, 2, 1, 3])?.reshape(&[r, w, self.kappa * d])?;
        Tensor::concat(&[v, s], 2)?.matmul(b.param(self.w_o))
    }

    /// Gathers the selected prompt values (R·κ indices, row-major), weights
    /// each by κ times the softmax of the selected scores and contextualizes
    /// `s` (R×W×d).
    pub fn contextualize<'t>(&self, b: &Binder<'t>, s: Tensor<'t>, indices: &[usize]) -> Result<Tensor<'t>> {
        let r = s.shape()[0];
        if indices.len() != r * self.kappa {
            return Err(TensorError::InvalidArgument(format!(
                "expected {} prompt indices, got {}",
                r * self.kappa,
                indices.len()
            )));
        }
        let weights = self
            .selected_scores(b, s, indices)?
            .softmax(1)?
            .scale(self.kappa as f64)
            .reshape(&[r, self.kappa, 1, 1])?;
        let v = b
            .param(self.values)
            .gather_rows(indices)?
            .reshape(&[r, self.kappa, self.w, self.d])?
            .mul(weights)?;
        self.contextualize_values(b, s, v)
    }

    /// Differentiable scores `[R, κ]` of the selected prompts.
    pub fn selected_scores<'t>(&self, b: &Binder<'t>, s: Tensor<'t>, indices: &[usize]) -> Result<Tensor<'t>> {
        let r = s.shape()[0];
        let u = s.mul(b.param(self.w_q))?.mean_axis(1)?.reshape(&[r, 1, self.d])?;
        let keys = b
            .param(self.keys)
            .gather_rows(indices)?
            .matmul(b.param(self.w_k).transpose()?)?
            .reshape(&[r, self.kappa, self.d])?;
        u.add(keys)?.tanh().mul(b.param(self.w_v))?.sum_axis(2)
    }

    /// Retrieval plus contextualization for R×W×d embeddings.
    pub fn forward<'t>(&self, b: &Binder<'t>, s: Tensor<'t>) -> Result<(Tensor<'t>, Vec<RetrievalResult>)> {
        let r = s.shape()[0];
        let per = self.w * self.d;
        let retrieved: Vec<RetrievalResult> =
            s.with_value(|a| (0..r).map(|i| self.retrieve(b.store(), &a.data()[i * per..(i + 1) * per])).collect());
        let indices: Vec<usize> = retrieved.iter().flat_map(|x| x.indices.iter().copied()).collect();
        Ok((self.contextualize(b, s, &indices)?, retrieved))
    }
}
