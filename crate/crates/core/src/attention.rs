//! Grouped-query multi-head attention (GQ-MHA).
//!
//! Each of G groups owns one key and one value projection (d×d) and H query
//! projections (d×d each). Every head attends with scale `1/sqrt(d/H)`; the H
//! head outputs of a group are concatenated and mapped by the shared
//! `(H·d)×d` output matrix, and the G group results are averaged.

use rand::Rng;

use crate::tensor::{normal_array, Binder, ParamId, ParamStore, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// A learned linear map applied to the last axis.
pub trait Projection {
    fn project<'t>(&self, b: &Binder<'t>, x: Tensor<'t>) -> Result<Tensor<'t>>;
}

/// Plain `x · W` with a stored weight matrix.
#[derive(Clone, Debug)]
pub struct Dense(pub ParamId);

impl Projection for Dense {
    fn project<'t>(&self, b: &Binder<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        x.matmul(b.param(self.0))
    }
}

/// GQ-MHA weights. Query projections of all (g, h) pairs are stored side by
/// side (`d × G·H·d`, block `g·H + h`), and likewise keys and values
/// (`d × G·d`, block `g`).
#[derive(Clone, Debug)]
pub struct GqAttention<P = Dense> {
    pub groups: usize,
    pub heads: usize,
    pub d: usize,
    pub query: P,
    pub key: P,
    pub value: P,
    pub output: P,
}

impl GqAttention<Dense> {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, groups: usize, heads: usize, d: usize, rng: &mut R) -> Self {
        assert!(groups >= 1 && heads >= 1);
        assert!(d % heads == 0, "d = {d} not divisible by H = {heads}");
        let std_in = (1.0 / d as f64).sqrt();
        let mut add = |name: &str, rows: usize, cols: usize, std: f64| {
            Dense(store.add(format!("{prefix}.{name}"), normal_array(rng, &[rows, cols], std), true))
        };
        let query = add("w_q", d, groups * heads * d, std_in);
        let key = add("w_k", d, groups * d, std_in);
        let value = add("w_v", d, groups * d, std_in);
        let output = add("w_o", heads * d, d, (1.0 / (heads * d) as f64).sqrt());
        Self {
            groups,
            heads,
            d,
            query,
            key,
            value,
            output,
        }
    }
}

/// Attention weights of every (group, head) as a `[B, G, H, Lq, Lk]` array.
pub type AttentionWeights = crate::tensor::Array;

impl<P: Projection> GqAttention<P> {
    pub fn d_k(&self) -> usize {
        self.d / self.heads
    }

    /// Self-attention over `x: [B, L, d]`.
    pub fn forward<'t>(&self, b: &Binder<'t>, x: Tensor<'t>, causal: bool) -> Result<Tensor<'t>> {
        Ok(self.attend(b, x, x, causal)?.0)
    }

    /// Attention with queries from `xq: [B, Lq, d]` and keys/values from
    /// `xkv: [B, Lk, d]`. Returns the output and the attention weights.
    pub fn attend<'t>(&self, b: &Binder<'t>, xq: Tensor<'t>, xkv: Tensor<'t>, causal: bool) -> Result<(Tensor<'t>, AttentionWeights)> {
        let qs = xq.shape();
        let ks = xkv.shape();
        if qs.len() != 3 || ks.len() != 3 || qs[2] != self.d || ks[2] != self.d || qs[0] != ks[0] {
            return Err(TensorError::ShapeMismatch {
                op: "gq_attention",
                shapes: vec![qs, ks],
            });
        }
        let (bsz, lq, lk, d) = (qs[0], qs[1], ks[1], self.d);
        let (g, h) = (self.groups, self.heads);

        let q = self
            .query
            .project(b, xq)?
            .reshape(&[bsz, lq, g, h, d])?
            .permute(&[0, 2, 3, 1, 4])?
            .reshape(&[bsz * g, h * lq, d])?;
        let split_kv = |t: Tensor<'t>| -> Result<Tensor<'t>> {
            t.reshape(&[bsz, lk, g, d])?.permute(&[0, 2, 1, 3])?.reshape(&[bsz * g, lk, d])
        };
        let k = split_kv(self.key.project(b, xkv)?)?;
        let v = split_kv(self.value.project(b, xkv)?)?;

        let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / (self.d_k() as f64).sqrt());
        if causal {
            // row r of a group block is query position r % lq
            let mask: Vec<bool> = (0..h * lq)
                .flat_map(|r| (0..lk).map(move |c| c > r % lq))
                .collect();
            scores = scores.masked_fill(&mask, &[h * lq, lk], f64::NEG_INFINITY)?;
        }
        let attn = scores.softmax(2)?;
        let weights = attn.value().reshape(&[bsz, g, h, lq, lk])?;

        let heads_out = attn
            .matmul(v)?
            .reshape(&[bsz, g, h, lq, d])?
            .permute(&[0, 3, 1, 2, 4])?
            .mean_axis(2)?
            .reshape(&[bsz, lq, h * d])?;
        Ok((self.output.project(b, heads_out)?, weights))
    }
}

/// Attention along the time axis of every sensor independently:
/// `[B, N, W, d] -> [B, N, W, d]`.
pub fn intra_series<'t, P: Projection>(b: &Binder<'t>, x: Tensor<'t>, attn: &GqAttention<P>) -> Result<Tensor<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "intra_series",
            shapes: vec![s],
        });
    }
    let flat = x.reshape(&[s[0] * s[1], s[2], s[3]])?;
    attn.forward(b, flat, false)?.reshape(&s)
}

/// Attention across sensors at every window step independently:
/// `[B, N, W, d] -> [B, N, W, d]`.
pub fn inter_series<'t, P: Projection>(b: &Binder<'t>, x: Tensor<'t>, attn: &GqAttention<P>) -> Result<Tensor<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "inter_series",
            shapes: vec![s],
        });
    }
    let (bsz, n, w, d) = (s[0], s[1], s[2], s[3]);
    let by_step = x.permute(&[0, 2, 1, 3])?.reshape(&[bsz * w, n, d])?;
    attn.forward(b, by_step, false)?
        .reshape(&[bsz, w, n, d])?
        .permute(&[0, 2, 1, 3])
}
