//! Low-rank adapters on frozen linear maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{ensure, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Adapter factors: `A` is `r × d_in`, `B` is `d_out × r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Fresh adapter with `B = 0`, so the adapted map equals the frozen one.
    pub fn new(a: Matrix, d_out: usize, alpha: f64) -> Result<Self> {
        ensure!(a.rows() >= 1, InvalidArgument, "LoRA rank must be >= 1");
        let b = Matrix::zeros(d_out, a.rows());
        Self::from_factors(a, b, alpha)
    }

    pub fn from_factors(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        ensure!(a.rows() >= 1, InvalidArgument, "LoRA rank must be >= 1");
        ensure!(
            b.cols() == a.rows(),
            InvalidArgument,
            "LoRA factor ranks disagree: A is {:?}, B is {:?}",
            a.shape(),
            b.shape()
        );
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

/// `W·x + (α/r)·B·(A·x)` for a single input vector.
pub fn lora_apply(adapter: &LoraAdapter, w_frozen: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    let (d_out, d_in) = w_frozen.shape();
    ensure!(
        x.len() == d_in && adapter.a.cols() == d_in && adapter.b.rows() == d_out,
        InvalidArgument,
        "LoRA shapes: W {:?}, A {:?}, B {:?}, x {}",
        w_frozen.shape(),
        adapter.a.shape(),
        adapter.b.shape(),
        x.len()
    );
    let xv = Matrix::row_vector(x);
    let base = xv.matmul_bt(w_frozen)?;
    let low = xv.matmul_bt(&adapter.a)?.matmul_bt(&adapter.b)?;
    Ok(base
        .as_slice()
        .iter()
        .zip(low.as_slice())
        .map(|(w, l)| w + adapter.scale() * l)
        .collect())
}

/// Adapter factors registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterIds {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

/// Row-batched linear layer `x Wᵀ (+ bias) (+ (α/r) x Aᵀ Bᵀ)` on the tape.
pub(crate) fn linear(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    weight: ParamId,
    bias: Option<ParamId>,
    adapter: Option<&AdapterIds>,
) -> Result<NodeId> {
    let w = g.param(store, weight);
    let mut y = g.matmul_bt(x, w)?;
    if let Some(ad) = adapter {
        let a = g.param(store, ad.a);
        let b = g.param(store, ad.b);
        let down = g.matmul_bt(x, a)?;
        let up = g.matmul_bt(down, b)?;
        let up = g.scale(up, ad.scale);
        y = g.add(y, up)?;
    }
    if let Some(bias) = bias {
        let b = g.param(store, bias);
        y = g.add_tiled(y, b)?;
    }
    Ok(y)
}
