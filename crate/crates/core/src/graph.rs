//! Chebyshev graph convolution over a fixed sensor graph and the gated
//! fusion of attention-based and graph-based representations.

use rand::Rng;
use thiserror::Error;

use crate::data::Adjacency;
use crate::tensor::{normal_array, Array, Binder, ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {0} has zero degree")]
    IsolatedNode(usize),
    #[error("adjacency is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("negative edge weight at ({0}, {1})")]
    NegativeWeight(usize, usize),
    #[error("Chebyshev order must be at least 1")]
    ZeroOrder,
}

/// `D^{-1/2} Â D^{-1/2}` with `Â = A + I` when `add_self_loops`.
pub fn normalize(a: &Array, add_self_loops: bool) -> Result<Array, GraphError> {
    let n = a.shape()[0];
    let mut hat = a.clone();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(&[i, j]);
            if v < 0.0 {
                return Err(GraphError::NegativeWeight(i, j));
            }
            if (v - a.get(&[j, i])).abs() > 1e-12 {
                return Err(GraphError::Asymmetric(i, j));
            }
        }
        if add_self_loops {
            hat.set(&[i, i], a.get(&[i, i]) + 1.0);
        }
    }
    let mut inv_sqrt = vec![0.0; n];
    for (i, slot) in inv_sqrt.iter_mut().enumerate() {
        let deg: f64 = (0..n).map(|j| hat.get(&[i, j])).sum();
        if deg <= 0.0 {
            return Err(GraphError::IsolatedNode(i));
        }
        *slot = 1.0 / deg.sqrt();
    }
    let mut out = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let v = inv_sqrt[i] * hat.get(&[i, j]) * inv_sqrt[j];
            out.set(&[i, j], v);
            out.set(&[j, i], v);
        }
    }
    Ok(out)
}

/// `[T_0, …, T_{K-1}]` evaluated at `l_hat` by the three-term recursion.
pub fn cheb_basis(l_hat: &Array, k: usize) -> Result<Vec<Array>, GraphError> {
    if k == 0 {
        return Err(GraphError::ZeroOrder);
    }
    let n = l_hat.shape()[0];
    let mut basis = vec![Array::eye(n)];
    if k >= 2 {
        basis.push(l_hat.clone());
    }
    while basis.len() < k {
        let prev = &basis[basis.len() - 1];
        let prev2 = &basis[basis.len() - 2];
        let mut next = l_hat.matmul2(prev);
        for (v, p) in next.data_mut().iter_mut().zip(prev2.data()) {
            *v = 2.0 * *v - p;
        }
        basis.push(next);
    }
    Ok(basis)
}

/// One Chebyshev convolution layer: cached basis plus a Θ_k per order,
/// shared over window steps.
#[derive(Clone, Debug)]
pub struct ChebConv {
    pub basis: Vec<Array>,
    pub theta: Vec<ParamId>,
}

impl ChebConv {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, adjacency: &Adjacency, k: usize, d: usize, rng: &mut R) -> Result<Self, GraphError> {
        let l_hat = normalize(&adjacency.weights, true)?;
        let basis = cheb_basis(&l_hat, k)?;
        let std = (1.0 / (k * d) as f64).sqrt();
        let theta = (0..k)
            .map(|i| store.add(format!("{prefix}.theta{i}"), normal_array(rng, &[d, d], std), true))
            .collect();
        Ok(Self { basis, theta })
    }

    /// `ReLU(Σ_k T_k · X · Θ_k)` for `x: [..., N, d]`.
    pub fn forward<'t>(&self, b: &Binder<'t>, x: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        cheb_conv_with(b, x, &self.basis, &self.theta.iter().map(|&id| b.param(id)).collect::<Vec<_>>())
    }
}

/// Convolution with explicit basis and filter tensors.
pub fn cheb_conv_with<'t>(b: &Binder<'t>, x: Tensor<'t>, basis: &[Array], theta: &[Tensor<'t>]) -> Result<Tensor<'t>, TensorError> {
    if basis.len() != theta.len() {
        return Err(TensorError::InvalidArgument(format!(
            "{} basis matrices for {} filters",
            basis.len(),
            theta.len()
        )));
    }
    let mut acc = x.matmul(theta[0])?;
    for (t_k, th) in basis.iter().zip(theta).skip(1) {
        acc = acc.add(b.constant(t_k.clone()).matmul(x)?.matmul(*th)?)?;
    }
    Ok(acc.relu())
}

/// Gate `z = sigmoid([S̄ ∥ Ṡ]·W_z + b_z)` mixing the two spatial views.
#[derive(Clone, Debug)]
pub struct Gate {
    pub w_z: ParamId,
    pub b_z: ParamId,
}

impl Gate {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            w_z: store.add(format!("{prefix}.w_z"), normal_array(rng, &[2 * d, d], (1.0 / (2 * d) as f64).sqrt()), true),
            b_z: store.add(format!("{prefix}.b_z"), Array::zeros(&[d]), true),
        }
    }

    /// `z ⊙ attn + (1 − z) ⊙ graph`, both `[..., d]`.
    pub fn fuse<'t>(&self, b: &Binder<'t>, attn: Tensor<'t>, graph: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let axis = attn.shape().len() - 1;
        let z = Tensor::concat(&[attn, graph], axis)?
            .matmul(b.param(self.w_z))?
            .add(b.param(self.b_z))?
            .sigmoid();
        // graph + z ⊙ (attn − graph)
        graph.add(z.mul(attn.sub(graph)?)?)
    }
}
