use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingScheme {
    Mcar,
    Block,
}

impl std::str::FromStr for MissingScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcar" => Ok(Self::Mcar),
            "block" => Ok(Self::Block),
            other => Err(format!("unknown missingness scheme {other:?}")),
        }
    }
}

/// N × T observation mask, `true` = observed.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingMask {
    pub n: usize,
    pub t: usize,
    pub mask: Vec<bool>,
    pub scheme: MissingScheme,
    pub requested_rate: f64,
}

impl MissingMask {
    pub fn all_observed(n: usize, t: usize) -> Self {
        Self {
            n,
            t,
            mask: vec![true; n * t],
            scheme: MissingScheme::Mcar,
            requested_rate: 0.0,
        }
    }

    #[inline]
    pub fn observed(&self, node: usize, time: usize) -> bool {
        self.mask[node * self.t + time]
    }

    /// 1 − mean(mask).
    pub fn realized_rate(&self) -> f64 {
        self.mask.iter().filter(|&&m| !m).count() as f64 / self.mask.len() as f64
    }

    /// N × len slice starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n * len);
        for node in 0..self.n {
            out.extend_from_slice(&self.mask[node * self.t + start..node * self.t + start + len]);
        }
        out
    }
}

/// Independent Bernoulli(rate) missingness per entry.
pub fn gen_mcar(n: usize, t: usize, rate: f64, seed: u64) -> Result<MissingMask, DataError> {
    if !(0.0..=0.95).contains(&rate) {
        return Err(DataError::RateOutOfRange(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = (0..n * t).map(|_| rng.random::<f64>() >= rate).collect();
    Ok(MissingMask {
        n,
        t,
        mask,
        scheme: MissingScheme::Mcar,
        requested_rate: rate,
    })
}

/// Per-sensor contiguous missing blocks.
///
/// For each sensor, blocks with lengths uniform in `[lo, hi]` start at
/// uniform positions in `[0, T - lo]` (running past the end truncates them)
/// until the sensor's missing fraction first reaches `rate`. A candidate
/// that would overlap or touch an existing missing run is redrawn, so every
/// run is a single block.
pub fn gen_block(n: usize, t: usize, rate: f64, block_len_range: (usize, usize), seed: u64) -> Result<MissingMask, DataError> {
    let (lo, hi) = block_len_range;
    if !(0.0..=1.0).contains(&rate) {
        return Err(DataError::RateOutOfRange(rate));
    }
    if lo == 0 || lo > hi || hi > t {
        return Err(DataError::Invalid(format!("block length range ({lo}, {hi}) invalid for T = {t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![true; n * t];
    let target = (rate * t as f64 - 1e-9).ceil().max(0.0) as usize;
    let max_attempts = 200 * t + 1000;
    for node in 0..n {
        let row = &mut mask[node * t..(node + 1) * t];
        let mut missing = 0usize;
        let mut attempts = 0usize;
        while missing < target {
            if attempts == max_attempts {
                return Err(DataError::InfeasibleRate {
                    rate,
                    reached: missing as f64 / t as f64,
                });
            }
            attempts += 1;
            let len = rng.random_range(lo..=hi);
            let start = rng.random_range(0..=t - lo);
            let end = (start + len).min(t);
            // reject overlap or adjacency with an existing run
            let lo_check = start.saturating_sub(1);
            let hi_check = (end + 1).min(t);
            if row[lo_check..hi_check].iter().any(|&obs| !obs) {
                continue;
            }
            row[start..end].iter_mut().for_each(|m| *m = false);
            missing += end - start;
        }
    }
    Ok(MissingMask {
        n,
        t,
        mask,
        scheme: MissingScheme::Block,
        requested_rate: rate,
    })
}

/// Zeroes missing entries of a standardized N × W × F window and returns the
/// matching N × W 0/1 observation channel.
pub fn apply_mask(window: &Array, mask: &[bool]) -> Result<(Array, Array), DataError> {
    let s = window.shape();
    let (n, w) = (s[0], s[1]);
    let f: usize = s[2..].iter().product();
    if mask.len() != n * w {
        return Err(DataError::Dimension(format!(
            "mask has {} entries for a {n}x{w} window",
            mask.len()
        )));
    }
    let mut masked = window.clone();
    for (i, &obs) in mask.iter().enumerate() {
        if !obs {
            masked.data_mut()[i * f..(i + 1) * f].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let channel = Array::new(vec![n, w], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
        .expect("channel shape");
    Ok((masked, channel))
}
