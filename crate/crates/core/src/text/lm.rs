//! A small decoder-only language model whose linear maps carry MoPE
//! adapters over a frozen, seeded base.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TrendVocabulary, PAD};
use super::TextError;
use crate::adapters::{AdapterConfig, MopeLayer};
use crate::attention::{Dense, GqAttention, Projection};
use crate::checkpoint::Checkpoint;
use crate::optim::{AdamConfig, OptimState};
use crate::tensor::{normal_array, Array, Binder, ParamId, ParamStore, Tape, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_lm: usize,
    pub layers: usize,
    pub max_len: usize,
    pub groups: usize,
    pub heads: usize,
    pub ffn: usize,
    pub rank: usize,
    pub alpha: f64,
    pub experts: usize,
    pub k_top: usize,
    pub dropout: f64,
    pub quantize: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Seeds the frozen base weights.
    pub base_seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_lm: 64,
            layers: 2,
            max_len: 32,
            groups: 2,
            heads: 2,
            ffn: 128,
            rank: 16,
            alpha: 1.0 / 16.0,
            experts: 4,
            k_top: 2,
            dropout: 0.05,
            quantize: false,
            lr: 2e-4,
            weight_decay: 0.001,
            epochs: 15,
            batch: 4,
            base_seed: 7,
        }
    }
}

impl LmConfig {
    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            alpha: self.alpha,
            experts: self.experts,
            k_top: self.k_top,
            dropout: self.dropout,
            quantize: self.quantize,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: GqAttention<MopeLayer>,
    ff1: MopeLayer,
    ff2: MopeLayer,
}

#[derive(Clone, Debug)]
pub struct TinyLm {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    head: ParamId,
    blocks: Vec<Block>,
}

fn rms_norm<'t>(x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
    let axis = x.shape().len() - 1;
    let denom = x.square().mean_keepdim(axis)?.add_scalar(1e-6).sqrt();
    x.div(denom)
}

/// Numerically stable `log softmax` over the last axis.
pub fn log_softmax<'t>(x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
    let shape = x.shape();
    let axis = shape.len() - 1;
    let c = shape[axis];
    let maxes: Vec<f64> = x.with_value(|a| a.data().chunks(c).map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect());
    let mut mshape = shape.clone();
    mshape[axis] = 1;
    let shifted = x.sub(x.tape().constant(Array::new(mshape, maxes)?))?;
    shifted.sub(shifted.exp().sum_keepdim(axis)?.log())
}

/// Mean next-token negative log-likelihood over positions whose target is
/// not `ignore`.
pub fn cross_entropy<'t>(logits: Tensor<'t>, targets: &[usize], ignore: Option<usize>) -> Result<Tensor<'t>, TensorError> {
    let v = *logits.shape().last().unwrap();
    let rows = logits.len() / v;
    let flat = logits.reshape(&[rows, v])?;
    let picked = log_softmax(flat)?.pick(targets)?;
    let weights: Vec<f64> = targets.iter().map(|&t| if Some(t) == ignore { 0.0 } else { 1.0 }).collect();
    let count: f64 = weights.iter().sum();
    if count == 0.0 {
        return Err(TensorError::InvalidArgument("no scored positions".into()));
    }
    Ok(picked.mul(logits.tape().constant(Array::new(vec![rows], weights)?))?.sum().scale(-1.0 / count))
}

impl TinyLm {
    /// Seeded frozen base with zero-initialized adapters.
    pub fn new(config: &LmConfig, vocab_size: usize) -> Result<Self, TextError> {
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.base_seed);
        let mut store = ParamStore::new();
        let d = c.d_lm;
        let tok_emb = store.add("lm.tok_emb", normal_array(&mut rng, &[vocab_size, d], 1.0), false);
        let pos_emb = store.add("lm.pos_emb", normal_array(&mut rng, &[c.max_len, d], 1.0), false);
        let adapter = c.adapter();
        let mope = |store: &mut ParamStore, name: String, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng| {
            let w0 = normal_array(rng, &[d_in, d_out], (1.0 / d_in as f64).sqrt());
            MopeLayer::new(store, &name, w0, &adapter, rng)
        };
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("lm.block{l}");
            let attn = GqAttention {
                groups: c.groups,
                heads: c.heads,
                d,
                query: mope(&mut store, format!("{p}.q"), d, c.groups * c.heads * d, &mut rng)?,
                key: mope(&mut store, format!("{p}.k"), d, c.groups * d, &mut rng)?,
                value: mope(&mut store, format!("{p}.v"), d, c.groups * d, &mut rng)?,
                output: mope(&mut store, format!("{p}.o"), c.heads * d, d, &mut rng)?,
            };
            let ff1 = mope(&mut store, format!("{p}.ff1"), d, c.ffn, &mut rng)?;
            let ff2 = mope(&mut store, format!("{p}.ff2"), c.ffn, d, &mut rng)?;
            blocks.push(Block { attn, ff1, ff2 });
        }
        let head = store.add("lm.head", normal_array(&mut rng, &[d, vocab_size], (1.0 / d as f64).sqrt()), false);
        Ok(Self {
            config: c.clone(),
            vocab_size,
            store,
            tok_emb,
            pos_emb,
            head,
            blocks,
        })
    }

    /// Pads sequences with PAD to a common length.
    pub fn pad(batch: &[Vec<usize>]) -> (Vec<usize>, usize) {
        let len = batch.iter().map(Vec::len).max().unwrap_or(0);
        let flat = batch
            .iter()
            .flat_map(|s| s.iter().copied().chain(std::iter::repeat(PAD).take(len - s.len())))
            .collect();
        (flat, len)
    }

    fn embed<'t>(&self, b: &Binder<'t>, batch: &[Vec<usize>]) -> Result<Tensor<'t>, TextError> {
        let (flat, len) = Self::pad(batch);
        if len > self.config.max_len {
            return Err(TextError::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = flat.iter().find(|&&t| t >= self.vocab_size) {
            return Err(TextError::UnknownId(bad));
        }
        let tok = b.param(self.tok_emb).gather_rows(&flat)?.reshape(&[batch.len(), len, self.config.d_lm])?;
        Ok(tok.add(b.param(self.pos_emb).slice(0, 0, len)?)?)
    }

    fn run_blocks<'t, P: Projection>(
        b: &Binder<'t>,
        mut x: Tensor<'t>,
        layers: &[(&GqAttention<P>, &P, &P)],
    ) -> Result<Tensor<'t>, TensorError> {
        for (attn, ff1, ff2) in layers {
            x = x.add(attn.forward(b, rms_norm(x)?, true)?)?;
            let f = ff2.project(b, ff1.project(b, rms_norm(x)?)?.relu())?;
            x = x.add(f)?;
        }
        rms_norm(x)
    }

    /// Final normalized hidden states, `[batch, len, d_lm]`.
    pub fn hidden<'t>(&self, b: &Binder<'t>, batch: &[Vec<usize>]) -> Result<Tensor<'t>, TextError> {
        let x = self.embed(b, batch)?;
        let layers: Vec<_> = self.blocks.iter().map(|bl| (&bl.attn, &bl.ff1, &bl.ff2)).collect();
        Ok(Self::run_blocks(b, x, &layers)?)
    }

    /// Next-token logits, `[batch, len, |V|]`.
    pub fn logits<'t>(&self, b: &Binder<'t>, batch: &[Vec<usize>]) -> Result<Tensor<'t>, TextError> {
        Ok(self.hidden(b, batch)?.matmul(b.param(self.head))?)
    }

    /// Logits of the frozen base alone, bypassing every adapter.
    pub fn base_logits<'t>(&self, b: &Binder<'t>, batch: &[Vec<usize>]) -> Result<Tensor<'t>, TextError> {
        let x = self.embed(b, batch)?;
        let base: Vec<(GqAttention<Dense>, Dense, Dense)> = self
            .blocks
            .iter()
            .map(|bl| {
                let a = &bl.attn;
                let attn = GqAttention {
                    groups: a.groups,
                    heads: a.heads,
                    d: a.d,
                    query: Dense(a.query.w0),
                    key: Dense(a.key.w0),
                    value: Dense(a.value.w0),
                    output: Dense(a.output.w0),
                };
                (attn, Dense(bl.ff1.w0), Dense(bl.ff2.w0))
            })
            .collect();
        let layers: Vec<_> = base.iter().map(|(a, f1, f2)| (a, f1, f2)).collect();
        Ok(Self::run_blocks(b, x, &layers)?.matmul(b.param(self.head))?)
    }

    /// Every adapter layer of the model, for inspection.
    pub fn adapter_layers(&self) -> Vec<&MopeLayer> {
        self.blocks
            .iter()
            .flat_map(|bl| [&bl.attn.query, &bl.attn.key, &bl.attn.value, &bl.attn.output, &bl.ff1, &bl.ff2])
            .collect()
    }

    /// Teacher-forced loss on a batch of token sequences.
    pub fn loss<'t>(&self, b: &Binder<'t>, batch: &[Vec<usize>]) -> Result<Tensor<'t>, TextError> {
        let inputs: Vec<Vec<usize>> = batch.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
        let targets: Vec<Vec<usize>> = batch.iter().map(|s| s[1..].to_vec()).collect();
        let (flat_targets, _) = Self::pad(&targets);
        Ok(cross_entropy(self.logits(b, &inputs)?, &flat_targets, Some(PAD))?)
    }

    /// Checkpoint holding only the trainable adapter tensors.
    pub fn adapter_checkpoint(&self) -> Checkpoint {
        let header = serde_json::json!({ "lm": self.config, "vocab_size": self.vocab_size });
        Checkpoint::from_store(header, &self.store, |p| p.trainable)
    }

    /// Rebuilds the base from its seed and applies the stored adapters.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TextError> {
        let config: LmConfig = serde_json::from_value(ck.config["lm"].clone()).map_err(|e| TextError::Checkpoint(e.to_string()))?;
        let vocab_size = ck.config["vocab_size"]
            .as_u64()
            .ok_or_else(|| TextError::Checkpoint("missing vocab_size".into()))? as usize;
        let mut lm = Self::new(&config, vocab_size)?;
        ck.load_into(&mut lm.store).map_err(|e| TextError::Checkpoint(e.to_string()))?;
        Ok(lm)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmHistory {
    pub epoch_loss: Vec<f64>,
}

/// Adapter-only fine-tuning by teacher-forced cross-entropy with AdamW.
pub fn instruction_tune(lm: &mut TinyLm, sequences: &[Vec<usize>], seed: u64) -> Result<LmHistory, TextError> {
    let c = lm.config.clone();
    let mut opt = OptimState::new(AdamConfig::adamw(c.lr, c.weight_decay));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut history = LmHistory::default();
    let mut step = 0u64;
    for _ in 0..c.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(c.batch.max(1)) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let tape = Tape::new();
            let b = Binder::new(&tape, &lm.store, true).with_dropout_seed(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let loss = lm.loss(&b, &batch)?;
            loss.backward()?;
            total += loss.item();
            batches += 1;
            let grads = b.gradients();
            drop(b);
            opt.step(&mut lm.store, &grads)?;
            step += 1;
        }
        history.epoch_loss.push(total / batches as f64);
    }
    Ok(history)
}

/// Mean loss over `sequences` without dropout.
pub fn evaluate_loss(lm: &TinyLm, sequences: &[Vec<usize>]) -> Result<f64, TextError> {
    let tape = Tape::new();
    let b = Binder::new(&tape, &lm.store, false);
    Ok(lm.loss(&b, sequences)?.item())
}

/// Tokenizes `texts` for training.
pub fn encode_all(vocab: &TrendVocabulary, texts: &[String]) -> Result<Vec<Vec<usize>>, TextError> {
    texts.iter().map(|t| vocab.tokenize(t)).collect()
}
