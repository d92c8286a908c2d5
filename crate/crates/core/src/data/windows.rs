use super::{DataError, RawSeries};
use crate::tensor::Array;

/// One sliding-window training pair anchored at `anchor_t`: the input covers
/// `[anchor_t - W, anchor_t)` and the target `[anchor_t, anchor_t + nu)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// N × W × F
    pub input: Array,
    /// N × nu × F
    pub target: Array,
    pub anchor_t: usize,
}

fn slab(series: &RawSeries, start: usize, len: usize) -> Array {
    let (n, f) = (series.n(), series.f());
    let mut data = Vec::with_capacity(n * len * f);
    for node in 0..n {
        for t in start..start + len {
            for feat in 0..f {
                data.push(series.get(node, t, feat));
            }
        }
    }
    Array::new(vec![n, len, f], data).expect("slab shape")
}

/// All stride-1 windows in chronological order: `T - W - nu + 1` samples.
pub fn make_windows(series: &RawSeries, w: usize, nu: usize) -> Result<Vec<WindowedSample>, DataError> {
    if w == 0 || nu == 0 {
        return Err(DataError::Invalid("W and nu must be >= 1".into()));
    }
    if series.t() < w + nu {
        return Err(DataError::SeriesTooShort {
            t: series.t(),
            need: w + nu,
        });
    }
    Ok((w..=series.t() - nu)
        .map(|anchor_t| WindowedSample {
            input: slab(series, anchor_t - w, w),
            target: slab(series, anchor_t, nu),
            anchor_t,
        })
        .collect())
}

/// Contiguous chronological partition. Train and validation counts are
/// floored; the remainder goes to test.
pub fn split_chrono<T>(samples: Vec<T>, ratios: (f64, f64, f64)) -> Result<(Vec<T>, Vec<T>, Vec<T>), DataError> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios));
    }
    let n = samples.len();
    let n_train = (n as f64 * a + 1e-9).floor() as usize;
    let n_val = (n as f64 * b + 1e-9).floor() as usize;
    if n_train == 0 {
        return Err(DataError::EmptySplit("train"));
    }
    if n_val == 0 {
        return Err(DataError::EmptySplit("validation"));
    }
    if n_train + n_val >= n {
        return Err(DataError::EmptySplit("test"));
    }
    let mut it = samples.into_iter();
    let train: Vec<T> = it.by_ref().take(n_train).collect();
    let val: Vec<T> = it.by_ref().take(n_val).collect();
    Ok((train, val, it.collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(n: usize, t: usize) -> RawSeries {
        RawSeries::new(n, t, 1, (0..n * t).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn enumerated_anchors() {
        let w = make_windows(&series(1, 5), 2, 1).unwrap();
        let anchors: Vec<usize> = w.iter().map(|s| s.anchor_t).collect();
        assert_eq!(anchors, vec![2, 3, 4]);
        // input [t-2, t-1], target [t]
        assert_eq!(w[0].input.data(), &[0.0, 1.0]);
        assert_eq!(w[0].target.data(), &[2.0]);
    }

    #[test]
    fn boundary_and_too_short() {
        assert_eq!(make_windows(&series(2, 7), 4, 3).unwrap().len(), 1);
        assert!(matches!(make_windows(&series(2, 6), 4, 3), Err(DataError::SeriesTooShort { .. })));
    }

    #[test]
    fn benchmark_window_shape() {
        let w = make_windows(&series(3, 40), 12, 12).unwrap();
        assert_eq!(w[0].input.shape(), &[3, 12, 1]);
        assert_eq!(w[0].target.shape(), &[3, 12, 1]);
    }

    #[test]
    fn split_counts() {
        let (a, b, c) = split_chrono((0..100).collect::<Vec<_>>(), (0.6, 0.2, 0.2)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let (a, b, c) = split_chrono((0..10).collect::<Vec<_>>(), (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        assert!(a.iter().max() < b.iter().min() && b.iter().max() < c.iter().min());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_chrono(vec![1, 2, 3], (0.5, 0.2, 0.2)), Err(DataError::BadRatios(_))));
        assert!(matches!(split_chrono(vec![1, 2, 3], (0.6, 0.2, 0.2)), Err(DataError::EmptySplit(_))));
    }

    proptest! {
        #[test]
        fn window_count_law(t in 2usize..60, w in 1usize..10, nu in 1usize..10) {
            let s = series(1, t);
            match make_windows(&s, w, nu) {
                Ok(v) => {
                    prop_assert_eq!(v.len(), t - w - nu + 1);
                    prop_assert!(v.windows(2).all(|p| p[1].anchor_t == p[0].anchor_t + 1));
                }
                Err(_) => prop_assert!(t < w + nu),
            }
        }

        #[test]
        fn split_is_ordered_partition(n in 10usize..500) {
            let (a, b, c) = split_chrono((0..n).collect::<Vec<_>>(), (0.7, 0.1, 0.2)).unwrap();
            let joined: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
            prop_assert_eq!(joined, (0..n).collect::<Vec<_>>());
        }
    }
}
