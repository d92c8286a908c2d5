use rand::Rng;

use crate::tensor::{normal_array, Array, Binder, ParamId, ParamStore, Tensor, TensorError};

/// Softmax attention pooling of token states into W text embeddings of
/// width d: one learned query per window position, then a d_lm → d map.
#[derive(Clone, Debug)]
pub struct TextPooler {
    pub w: usize,
    pub d_lm: usize,
    pub d: usize,
    pub queries: ParamId,
    pub map: ParamId,
}

impl TextPooler {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, w: usize, d_lm: usize, d: usize, rng: &mut R) -> Self {
        Self {
            w,
            d_lm,
            d,
            queries: store.add(format!("{prefix}.queries"), normal_array(rng, &[w, d_lm], (1.0 / d_lm as f64).sqrt()), true),
            map: store.add(format!("{prefix}.map"), normal_array(rng, &[d_lm, d], (1.0 / d_lm as f64).sqrt()), true),
        }
    }

    /// Pools `U` token-state matrices (`L_i × d_lm`) into `[U, W, d]`.
    /// Also returns the pooling weights `[U, W, L_max]`.
    pub fn pool<'t>(&self, b: &Binder<'t>, states: &[&Array]) -> Result<(Tensor<'t>, Array), TensorError> {
        let u = states.len();
        let l_max = states.iter().map(|s| s.shape()[0]).max().unwrap_or(0);
        if u == 0 || l_max == 0 {
            return Err(TensorError::InvalidArgument("nothing to pool".into()));
        }
        let mut padded = Array::zeros(&[u, l_max, self.d_lm]);
        let mut mask = vec![false; u * l_max];
        for (i, s) in states.iter().enumerate() {
            if s.ndim() != 2 || s.shape()[1] != self.d_lm {
                return Err(TensorError::ShapeMismatch {
                    op: "pool_text",
                    shapes: vec![s.shape().to_vec(), vec![self.d_lm]],
                });
            }
            let len = s.shape()[0];
            let off = i * l_max * self.d_lm;
            padded.data_mut()[off..off + len * self.d_lm].copy_from_slice(s.data());
            mask[i * l_max + len..(i + 1) * l_max].iter_mut().for_each(|m| *m = true);
        }
        let h = b.constant(padded);
        let scores = b
            .param(self.queries)
            .matmul(h.transpose()?)?
            .scale(1.0 / (self.d_lm as f64).sqrt())
            .masked_fill(&mask, &[u, 1, l_max], f64::NEG_INFINITY)?;
        let attn = scores.softmax(2)?;
        let weights = attn.value();
        Ok((attn.matmul(h)?.matmul(b.param(self.map))?, weights))
    }
}
