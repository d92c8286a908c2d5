//! Dataset ingestion, windowing, splitting, normalization and missingness.

mod adjacency;
mod io;
mod missing;
mod norm;
pub mod synthetic;
mod windows;

pub use adjacency::{load_adjacency, Adjacency, AdjacencyMode, AdjacencySource};
pub use io::{load_series, save_series_csv, save_stbin, SeriesFormat};
pub use missing::{apply_mask, gen_block, gen_mcar, MissingMask, MissingScheme};
pub use norm::{fit_norm, NormStats};
pub use windows::{make_windows, split_chrono, WindowedSample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("inconsistent dimensions: {0}")]
    Dimension(String),
    #[error("series too short: T = {t} < W + nu = {need}")]
    SeriesTooShort { t: usize, need: usize },
    #[error("split would leave the {0} partition empty")]
    EmptySplit(&'static str),
    #[error("invalid split ratios {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("feature {0} has zero variance")]
    ZeroVariance(usize),
    #[error("missing rate {0} out of range")]
    RateOutOfRange(f64),
    #[error("block missingness cannot reach rate {rate} (reached {reached})")]
    InfeasibleRate { rate: f64, reached: f64 },
    #[error("node index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// N sensors × T timesteps × F features, stored (n, t, f) row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    n: usize,
    t: usize,
    f: usize,
    data: Vec<f64>,
    pub granularity_minutes: u32,
}

impl RawSeries {
    pub fn new(n: usize, t: usize, f: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if n == 0 || t == 0 || f == 0 {
            return Err(DataError::Dimension(format!("N={n}, T={t}, F={f} must all be >= 1")));
        }
        if data.len() != n * t * f {
            return Err(DataError::Dimension(format!(
                "expected {} values for N={n}, T={t}, F={f}, got {}",
                n * t * f,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let (row, col) = ((i / f) % t, i / (t * f));
            return Err(DataError::Parse {
                row,
                col,
                msg: "non-finite value".into(),
            });
        }
        Ok(Self {
            n,
            t,
            f,
            data,
            granularity_minutes: 5,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn f(&self) -> usize {
        self.f
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, node: usize, time: usize, feature: usize) -> f64 {
        self.data[(node * self.t + time) * self.f + feature]
    }
}
