//! Pre-norm transformer block shared by the text and visual encoders.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::lora::{linear, AdapterIds};
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Gaussian matrix with standard deviation `1/sqrt(fan_in)`.
pub(crate) fn init_weight<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let std = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Trainability {
    pub attention: bool,
    pub mlp: bool,
    pub norms: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    /// Adapters on the q, k, v and output projections.
    pub adapters: Option<[AdapterIds; 4]>,
}

pub(crate) fn register_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    width: usize,
    hidden: usize,
    train: Trainability,
    lora: Option<LoraSpec>,
) -> BlockIds {
    let ln = |store: &mut ParamStore, name: &str| {
        (
            store.insert(format!("{prefix}.{name}.gain"), Matrix::filled(1, width, 1.0), train.norms, false),
            store.insert(format!("{prefix}.{name}.bias"), Matrix::zeros(1, width), train.norms, false),
        )
    };
    let ln1 = ln(store, "ln1");
    let attn = |store: &mut ParamStore, rng: &mut R, name: &str| {
        store.insert(
            format!("{prefix}.attn.{name}"),
            init_weight(rng, width, width, width),
            train.attention,
            true,
        )
    };
    let wq = attn(store, rng, "wq");
    let wk = attn(store, rng, "wk");
    let wv = attn(store, rng, "wv");
    let wo = attn(store, rng, "wo");
    let ln2 = ln(store, "ln2");
    let w1 = store.insert(format!("{prefix}.mlp.w1"), init_weight(rng, hidden, width, width), train.mlp, true);
    let b1 = store.insert(format!("{prefix}.mlp.b1"), Matrix::zeros(1, hidden), train.mlp, false);
    let w2 = store.insert(format!("{prefix}.mlp.w2"), init_weight(rng, width, hidden, hidden), train.mlp, true);
    let b2 = store.insert(format!("{prefix}.mlp.b2"), Matrix::zeros(1, width), train.mlp, false);

    let adapters = lora.map(|spec| {
        let scale = spec.alpha / spec.rank as f64;
        ["q", "k", "v", "o"].map(|t| AdapterIds {
            a: store.insert(
                format!("{prefix}.attn.lora_{t}.a"),
                init_weight(rng, spec.rank, width, width),
                true,
                true,
            ),
            b: store.insert(format!("{prefix}.attn.lora_{t}.b"), Matrix::zeros(width, spec.rank), true, true),
            scale,
        })
    });
    BlockIds {
        ln1,
        wq,
        wk,
        wv,
        wo,
        ln2,
        w1,
        b1,
        w2,
        b2,
        adapters,
    }
}

/// `h = x + Attn(LN(x)); out = h + MLP(LN(h))`, attention confined to
/// blocks of `seq_len` rows.
pub(crate) fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    ids: &BlockIds,
    x: NodeId,
    seq_len: usize,
    heads: usize,
    use_adapters: bool,
) -> Result<NodeId> {
    let ad = |i: usize| ids.adapters.as_ref().filter(|_| use_adapters).map(|a| &a[i]);
    let (g1, b1) = (g.param(store, ids.ln1.0), g.param(store, ids.ln1.1));
    let n1 = g.layer_norm(x, g1, b1)?;
    let q = linear(g, store, n1, ids.wq, None, ad(0))?;
    let k = linear(g, store, n1, ids.wk, None, ad(1))?;
    let v = linear(g, store, n1, ids.wv, None, ad(2))?;
    let att = g.attention(q, k, v, seq_len, heads)?;
    let o = linear(g, store, att, ids.wo, None, ad(3))?;
    let h = g.add(x, o)?;

    let (g2, b2) = (g.param(store, ids.ln2.0), g.param(store, ids.ln2.1));
    let n2 = g.layer_norm(h, g2, b2)?;
    let m = linear(g, store, n2, ids.w1, Some(ids.b1), None)?;
    let m = g.gelu(m);
    let m = linear(g, store, m, ids.w2, Some(ids.b2), None)?;
    g.add(h, m)
}
