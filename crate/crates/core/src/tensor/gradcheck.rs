use super::{Array, Binder, ParamId, ParamStore, Tape, Tensor, TensorError};

/// max over coordinates of |analytic − numeric| / max(1, |numeric|).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function against central
/// differences at `point`.
pub fn finite_diff_check<F>(f: F, point: &Array, eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Tensor<'t>) -> Result<Tensor<'t>, TensorError>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = f(&tape, x)?;
    loss.backward()?;
    let analytic = x.grad().map(Array::into_data).unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: Array| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let x = tape.constant(p);
        Ok(f(&tape, x)?.item())
    };
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Finite-difference check of every listed parameter of a store against the
/// gradient the tape produces for `loss`. Returns `(name, max relative error)`
/// per parameter.
pub fn param_gradcheck<F>(
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    loss: F,
) -> Result<Vec<(String, f64)>, TensorError>
where
    F: for<'t> Fn(&Binder<'t>) -> Result<Tensor<'t>, TensorError>,
{
    let tape = Tape::new();
    let binder = Binder::new(&tape, store, true);
    loss(&binder)?.backward()?;
    let grads = binder.gradients();

    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let b = Binder::new(&tape, s, false);
        Ok(loss(&b)?.item())
    };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).len();
        let analytic = grads[id.0].clone().map(Array::into_data).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        out.push((store.get(id).name.clone(), max_relative_error(&analytic, &numeric)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let a = Array::from_vec(vec![0.5, -1.5, 2.0]);
        let err = finite_diff_check(
            |t, x| Ok(x.mul(t.constant(a.clone()))?.sum()),
            &Array::from_vec(vec![1.0, 2.0, -3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn tanh_times_coordinate() {
        let err = finite_diff_check(
            |_, x| {
                let x0 = x.slice(0, 0, 1)?.tanh();
                let x1 = x.slice(0, 1, 1)?;
                Ok(x0.mul(x1)?.sum())
            },
            &Array::from_vec(vec![0.3, -1.2]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_log_pick_chain() {
        let err = finite_diff_check(
            |_, x| Ok(x.softmax(0)?.log().pick(&[3])?.sum()),
            &Array::from_vec(vec![0.1, -0.7, 1.3, 0.4, -2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
