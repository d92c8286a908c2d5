use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencySource {
    EdgeList,
    DistanceKernel,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyMode {
    /// Rows `i,j,weight`.
    EdgeList,
    /// Rows `i,j,distance`, turned into a thresholded Gaussian kernel.
    Distance,
}

/// Symmetric, nonnegative N×N weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub weights: Array,
    pub source: AdjacencySource,
}

impl Adjacency {
    pub fn from_matrix(weights: Array, source: AdjacencySource) -> Result<Self, DataError> {
        let s = weights.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(DataError::Dimension(format!("adjacency must be square, got {s:?}")));
        }
        let n = s[0];
        for i in 0..n {
            for j in 0..n {
                let w = weights.get(&[i, j]);
                if !w.is_finite() {
                    return Err(DataError::Invalid(format!("non-finite weight at ({i},{j})")));
                }
                if w < 0.0 {
                    return Err(DataError::NegativeWeight(w));
                }
                if (w - weights.get(&[j, i])).abs() > 1e-12 {
                    return Err(DataError::Invalid(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { weights, source })
    }

    /// Undirected ring 0-1-…-(n-1)-0 with unit weights.
    pub fn ring(n: usize) -> Self {
        let mut w = Array::zeros(&[n, n]);
        if n > 1 {
            for i in 0..n {
                let j = (i + 1) % n;
                if i != j {
                    w.set(&[i, j], 1.0);
                    w.set(&[j, i], 1.0);
                }
            }
        }
        Self {
            weights: w,
            source: AdjacencySource::Generated,
        }
    }

    pub fn n(&self) -> usize {
        self.weights.shape()[0]
    }
}

fn parse_triples(text: &str, n: usize) -> Result<Vec<(usize, usize, f64)>, DataError> {
    let mut out = Vec::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 3 {
            if row == 0 {
                continue;
            }
            return Err(DataError::Parse {
                row,
                col: cells.len(),
                msg: "expected i,j,value".into(),
            });
        }
        let i = cells[0].parse::<usize>();
        let j = cells[1].parse::<usize>();
        let v = cells[2].parse::<f64>();
        match (i, j, v) {
            (Ok(i), Ok(j), Ok(v)) => {
                for idx in [i, j] {
                    if idx >= n {
                        return Err(DataError::IndexOutOfRange { index: idx, n });
                    }
                }
                if !v.is_finite() {
                    return Err(DataError::Parse {
                        row,
                        col: 2,
                        msg: "non-finite value".into(),
                    });
                }
                if v < 0.0 {
                    return Err(DataError::NegativeWeight(v));
                }
                out.push((i, j, v));
            }
            // header row
            _ if row == 0 => {}
            (i, j, _) => {
                let col = if i.is_err() { 0 } else if j.is_err() { 1 } else { 2 };
                return Err(DataError::Parse {
                    row,
                    col,
                    msg: format!("cannot parse {:?}", cells[col]),
                });
            }
        }
    }
    Ok(out)
}

/// Builds an adjacency from `i,j,value` rows with 0-based indices.
///
/// Edge lists are symmetrized by `max(w_ij, w_ji)`. Distances become
/// `exp(-dist² / σ²)` with σ the sample standard deviation of the listed
/// distances; weights below `threshold_kappa` are zeroed. When every distance
/// is identical (σ = 0) each listed pair gets weight 1.
pub fn load_adjacency(path: &Path, n: usize, mode: AdjacencyMode, threshold_kappa: f64) -> Result<Adjacency, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    adjacency_from_triples(&parse_triples(&text, n)?, n, mode, threshold_kappa)
}

pub(crate) fn adjacency_from_triples(
    triples: &[(usize, usize, f64)],
    n: usize,
    mode: AdjacencyMode,
    threshold_kappa: f64,
) -> Result<Adjacency, DataError> {
    let mut w = Array::zeros(&[n, n]);
    let weight_of: Box<dyn Fn(f64) -> f64> = match mode {
        AdjacencyMode::EdgeList => Box::new(|v| v),
        AdjacencyMode::Distance => {
            let m = triples.len() as f64;
            let mean = triples.iter().map(|t| t.2).sum::<f64>() / m;
            let var = if triples.len() > 1 {
                triples.iter().map(|t| (t.2 - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            let sigma2 = var;
            Box::new(move |d| {
                let k = if sigma2 > 0.0 { (-d * d / sigma2).exp() } else { 1.0 };
                if k < threshold_kappa {
                    0.0
                } else {
                    k
                }
            })
        }
    };
    for &(i, j, v) in triples {
        let x = weight_of(v);
        let cur = w.get(&[i, j]).max(x);
        w.set(&[i, j], cur);
        w.set(&[j, i], cur);
    }
    let source = match mode {
        AdjacencyMode::EdgeList => AdjacencySource::EdgeList,
        AdjacencyMode::Distance => AdjacencySource::DistanceKernel,
    };
    Adjacency::from_matrix(w, source)
}
