use serde::{Deserialize, Serialize};

use super::{DataError, WindowedSample};

/// Per-feature z-score statistics, fitted on the training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub computed_on: String,
}

/// Fits mean and population std per feature over every input-window entry of
/// the given (training) samples.
pub fn fit_norm(train: &[WindowedSample]) -> Result<NormStats, DataError> {
    let first = train.first().ok_or(DataError::EmptySplit("train"))?;
    let f = *first.input.shape().last().unwrap();
    let mut sum = vec![0.0; f];
    let mut count = 0usize;
    for s in train {
        for (i, v) in s.input.data().iter().enumerate() {
            sum[i % f] += v;
        }
        count += s.input.len() / f;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut ss = vec![0.0; f];
    for s in train {
        for (i, v) in s.input.data().iter().enumerate() {
            ss[i % f] += (v - mean[i % f]).powi(2);
        }
    }
    let std: Vec<f64> = ss.iter().map(|s| (s / count as f64).sqrt()).collect();
    if let Some(k) = std.iter().position(|&s| !(s > 1e-12)) {
        return Err(DataError::ZeroVariance(k));
    }
    Ok(NormStats {
        mean,
        std,
        computed_on: "train".into(),
    })
}

impl NormStats {
    #[inline]
    pub fn standardize(&self, x: f64, feature: usize) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    #[inline]
    pub fn destandardize(&self, z: f64, feature: usize) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }

    /// In-place over a buffer whose innermost axis is the feature axis.
    pub fn standardize_slice(&self, xs: &mut [f64]) {
        let f = self.mean.len();
        for (i, x) in xs.iter_mut().enumerate() {
            *x = self.standardize(*x, i % f);
        }
    }

    pub fn destandardize_slice(&self, xs: &mut [f64]) {
        let f = self.mean.len();
        for (i, x) in xs.iter_mut().enumerate() {
            *x = self.destandardize(*x, i % f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, RawSeries};
    use rand::{Rng, SeedableRng};

    #[test]
    fn fitted_on_simple_window() {
        let sample = WindowedSample {
            input: crate::tensor::Array::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap(),
            target: crate::tensor::Array::new(vec![1, 1, 1], vec![0.0]).unwrap(),
            anchor_t: 3,
        };
        let stats = fit_norm(&[sample]).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let z: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&x| stats.standardize(x, 0)).collect();
        assert!(z.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn standardized_training_data_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 200).map(|_| rng.random::<f64>() * 50.0 + 10.0).collect();
        let s = RawSeries::new(3, 200, 1, data).unwrap();
        let w = make_windows(&s, 12, 12).unwrap();
        let stats = fit_norm(&w).unwrap();
        let zs: Vec<f64> = w
            .iter()
            .flat_map(|s| s.input.data().iter().map(|&x| stats.standardize(x, 0)).collect::<Vec<_>>())
            .collect();
        let n = zs.len() as f64;
        let m = zs.iter().sum::<f64>() / n;
        let sd = (zs.iter().map(|z| (z - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn round_trip_error() {
        let stats = NormStats {
            mean: vec![123.4],
            std: vec![17.9],
            computed_on: "train".into(),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() * 400.0).collect();
        let mut ys = xs.clone();
        stats.standardize_slice(&mut ys);
        stats.destandardize_slice(&mut ys);
        let err = xs.iter().zip(&ys).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn constant_series_rejected() {
        let s = RawSeries::new(2, 10, 1, vec![4.0; 20]).unwrap();
        let w = make_windows(&s, 3, 1).unwrap();
        assert!(matches!(fit_norm(&w), Err(DataError::ZeroVariance(0))));
    }
}
