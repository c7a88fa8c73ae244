//! Training objectives: the fine-grained semantic alignment loss on mid-level
//! features, the category-prototype alignment loss on high-level features,
//! softmax cross-entropy for classification, and the staged weighted total.
//!
//! Both alignment losses are one-directional InfoNCE over cosine similarity:
//!
//! ```text
//! loss_i = -log( exp(sim(q_i, k_{t_i}) / τ) / Σ_{j ∈ D_i} exp(sim(q_i, k_j) / τ) )
//! ```
//!
//! For the fine-grained loss the keys are the batch's fine-grained text
//! embeddings, `t_i = i`, and `D_i` drops other samples whose text is
//! token-identical to sample `i` (unless masking is disabled). For the
//! prototype loss the keys are all `K` category embeddings and `t_i` is the
//! label.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{dot, norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Stage1 => f.write_str("stage1"),
            Stage::Stage2 => f.write_str("stage2"),
        }
    }
}

/// Loss weights and temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_fg: f64,
    pub lambda_cp: f64,
    /// Shared temperature for both alignment losses.
    pub temperature: f64,
    /// Overrides `temperature` for the prototype loss only.
    pub cp_temperature: Option<f64>,
    /// Exclude token-identical texts of other samples from the
    /// fine-grained denominator. `false` reproduces plain in-batch InfoNCE.
    pub mask_duplicates: bool,
    /// Average the video→text fine-grained loss with its text→video mirror.
    pub symmetric: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fg: 0.5,
            lambda_cp: 0.5,
            temperature: 0.07,
            cp_temperature: None,
            mask_duplicates: true,
            symmetric: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            Config,
            "temperature must be > 0, got {}",
            self.temperature
        );
        if let Some(t) = self.cp_temperature {
            ensure!(t > 0.0 && t.is_finite(), Config, "cp_temperature must be > 0, got {t}");
        }
        ensure!(
            self.lambda_fg >= 0.0 && self.lambda_cp >= 0.0,
            Config,
            "loss weights must be non-negative (lambda_fg={}, lambda_cp={})",
            self.lambda_fg,
            self.lambda_cp
        );
        Ok(())
    }

    pub fn fg_temperature(&self) -> f64 {
        self.temperature
    }

    pub fn cp_temperature(&self) -> f64 {
        self.cp_temperature.unwrap_or(self.temperature)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_fg: f64,
    pub l_cp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_fg: f64,
    pub l_cp: f64,
    pub total: f64,
    pub stage: Stage,
}

/// `u·v / (‖u‖‖v‖)`. Zero-norm inputs are an error, never a silent 0.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    ensure!(
        u.len() == v.len(),
        InvalidArgument,
        "cosine_sim length mismatch: {} vs {}",
        u.len(),
        v.len()
    );
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "cosine similarity of zero-norm vector (|u|={nu}, |v|={nv})"
        )));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Square boolean matrix marking token-identical pairs of batch texts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DupMask {
    n: usize,
    bits: Vec<bool>,
}

impl DupMask {
    /// Marks `(i, j)` whenever `keys[i] == keys[j]`.
    pub fn from_keys<T: PartialEq>(keys: &[T]) -> Self {
        let n = keys.len();
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                bits[i * n + j] = keys[i] == keys[j];
            }
        }
        Self { n, bits }
    }

    /// No pair is a duplicate: the literal in-batch form.
    pub fn none(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        ensure!(
            rows.iter().all(|r| r.len() == n),
            InvalidArgument,
            "duplicate mask must be square"
        );
        Ok(Self {
            n,
            bits: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Denominator exclusion pattern: duplicates other than the diagonal.
    pub(crate) fn exclusions(&self) -> Vec<bool> {
        let mut out = self.bits.clone();
        for i in 0..self.n {
            out[i * self.n + i] = false;
        }
        out
    }
}

/// Forward state of one InfoNCE evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct InfoNceCache {
    pub loss: f64,
    /// Softmax weights over the allowed keys; zero where excluded.
    probs: Matrix,
    cos: Matrix,
    q_norms: Vec<f64>,
    k_norms: Vec<f64>,
    targets: Vec<usize>,
    tau: f64,
}

fn row_norms(m: &Matrix, what: &str) -> Result<Vec<f64>> {
    (0..m.rows())
        .map(|i| {
            let n = norm(m.row(i));
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::DegenerateInput(format!(
                    "{what} row {i} has norm {n}"
                )))
            }
        })
        .collect()
}

/// Softmax weights and `-log p_target` for one row of logits, restricted
/// to entries not in `excluded`.
fn masked_log_softmax_row(
    logits: &[f64],
    target: usize,
    excluded: Option<&[bool]>,
    probs_out: &mut [f64],
) -> f64 {
    let allowed = |j: usize| j == target || !excluded.is_some_and(|e| e[j]);
    let m = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| allowed(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (j, &v) in logits.iter().enumerate() {
        let e = if allowed(j) { (v - m).exp() } else { 0.0 };
        probs_out[j] = e;
        z += e;
    }
    for p in probs_out.iter_mut() {
        *p /= z;
    }
    ((m - logits[target]) + z.ln()).max(0.0)
}

pub(crate) fn info_nce_forward(
    queries: &Matrix,
    keys: &Matrix,
    targets: &[usize],
    exclusions: Option<&[bool]>,
    tau: f64,
) -> Result<InfoNceCache> {
    ensure!(
        tau > 0.0 && tau.is_finite(),
        InvalidArgument,
        "temperature must be > 0, got {tau}"
    );
    let (b, m) = (queries.rows(), keys.rows());
    ensure!(b >= 1, InvalidArgument, "contrastive loss needs at least one query");
    ensure!(m >= 1, InvalidArgument, "contrastive loss needs at least one key");
    ensure!(
        queries.cols() == keys.cols(),
        InvalidArgument,
        "embedding width mismatch: {} vs {}",
        queries.cols(),
        keys.cols()
    );
    ensure!(
        targets.len() == b,
        InvalidArgument,
        "expected {b} targets, got {}",
        targets.len()
    );
    if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
        return Err(Error::InvalidArgument(format!(
            "target index {bad} out of range [0, {m})"
        )));
    }
    if let Some(e) = exclusions {
        ensure!(e.len() == b * m, InvalidArgument, "exclusion mask must be {b}x{m}");
    }
    let q_norms = row_norms(queries, "query")?;
    let k_norms = row_norms(keys, "key")?;

    let mut cos = queries.matmul_bt(keys)?;
    for i in 0..b {
        for j in 0..m {
            cos[(i, j)] /= q_norms[i] * k_norms[j];
        }
    }
    let logits = cos.scaled(1.0 / tau);
    let mut probs = Matrix::zeros(b, m);
    let mut total = 0.0;
    for i in 0..b {
        let excl = exclusions.map(|e| &e[i * m..(i + 1) * m]);
        total += masked_log_softmax_row(logits.row(i), targets[i], excl, probs.row_mut(i));
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::DegenerateInput(format!("contrastive loss is {loss}")));
    }
    Ok(InfoNceCache {
        loss,
        probs,
        cos,
        q_norms,
        k_norms,
        targets: targets.to_vec(),
        tau,
    })
}

/// Gradients of `upstream · loss` with respect to queries and keys.
pub(crate) fn info_nce_backward(
    cache: &InfoNceCache,
    queries: &Matrix,
    keys: &Matrix,
    upstream: f64,
) -> (Matrix, Matrix) {
    let (b, m) = (queries.rows(), keys.rows());
    // dL/dcos_ij = (p_ij - [j = t_i]) / (B τ)
    let mut dcos = cache.probs.clone();
    for i in 0..b {
        dcos[(i, cache.targets[i])] -= 1.0;
    }
    dcos.scale_assign(upstream / (b as f64 * cache.tau));

    let mut dq = Matrix::zeros(b, queries.cols());
    let mut dk = Matrix::zeros(m, keys.cols());
    for i in 0..b {
        let qi = queries.row(i);
        let nq = cache.q_norms[i];
        for j in 0..m {
            let g = dcos[(i, j)];
            if g == 0.0 {
                continue;
            }
            let kj = keys.row(j);
            let nk = cache.k_norms[j];
            let c = cache.cos[(i, j)];
            let inv = 1.0 / (nq * nk);
            {
                let dqi = dq.row_mut(i);
                for d in 0..qi.len() {
                    dqi[d] += g * (kj[d] * inv - c * qi[d] / (nq * nq));
                }
            }
            let dkj = dk.row_mut(j);
            for d in 0..kj.len() {
                dkj[d] += g * (qi[d] * inv - c * kj[d] / (nk * nk));
            }
        }
    }
    (dq, dk)
}

#[derive(Clone, Debug)]
pub(crate) struct CrossEntropyCache {
    pub loss: f64,
    probs: Matrix,
    labels: Vec<usize>,
}

pub(crate) fn cross_entropy_forward(logits: &Matrix, labels: &[usize]) -> Result<CrossEntropyCache> {
    let (b, k) = logits.shape();
    ensure!(b >= 1, InvalidArgument, "cross-entropy needs at least one row");
    ensure!(
        labels.len() == b,
        InvalidArgument,
        "expected {b} labels, got {}",
        labels.len()
    );
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range [0, {k})"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::DegenerateInput("non-finite logits".into()));
    }
    let mut probs = Matrix::zeros(b, k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += masked_log_softmax_row(logits.row(i), y, None, probs.row_mut(i));
    }
    Ok(CrossEntropyCache {
        loss: total / b as f64,
        probs,
        labels: labels.to_vec(),
    })
}

pub(crate) fn cross_entropy_backward(cache: &CrossEntropyCache, upstream: f64) -> Matrix {
    let b = cache.probs.rows();
    let mut d = cache.probs.clone();
    for (i, &l) in cache.labels.iter().enumerate() {
        d[(i, l)] -= 1.0;
    }
    d.scale_assign(upstream / b as f64);
    d
}

/// Fine-grained semantic alignment loss between mid-level video features
/// and their fine-grained text embeddings.
///
/// `dup_mask = None` disables false-negative masking.
pub fn fg_sa_loss(f_mid: &Matrix, t_fg: &Matrix, tau: f64, dup_mask: Option<&DupMask>) -> Result<f64> {
    ensure!(
        f_mid.rows() == t_fg.rows(),
        InvalidArgument,
        "feature/text batch mismatch: {} vs {}",
        f_mid.rows(),
        t_fg.rows()
    );
    let targets: Vec<usize> = (0..f_mid.rows()).collect();
    let excl = match dup_mask {
        Some(mask) => {
            ensure!(
                mask.len() == f_mid.rows(),
                InvalidArgument,
                "duplicate mask is {}x{0}, batch is {}",
                mask.len(),
                f_mid.rows()
            );
            Some(mask.exclusions())
        }
        None => None,
    };
    Ok(info_nce_forward(f_mid, t_fg, &targets, excl.as_deref(), tau)?.loss)
}

/// Category-prototype alignment loss; the denominator spans all `K`
/// prototypes, not the batch.
pub fn cp_a_loss(f_high: &Matrix, prototypes: &Matrix, labels: &[usize], tau: f64) -> Result<f64> {
    Ok(info_nce_forward(f_high, prototypes, labels, None, tau)?.loss)
}

/// Mean softmax cross-entropy.
pub fn cls_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_forward(logits, labels)?.loss)
}

/// Combines the component losses; Stage1 drops the fine-grained term.
pub fn total_loss(parts: LossParts, weights: &LossWeights, stage: Stage) -> LossBreakdown {
    let fg_weight = match stage {
        Stage::Stage1 => 0.0,
        Stage::Stage2 => weights.lambda_fg,
    };
    let mut total = parts.l_cls + weights.lambda_cp * parts.l_cp;
    if fg_weight != 0.0 {
        total += fg_weight * parts.l_fg;
    }
    LossBreakdown {
        l_cls: parts.l_cls,
        l_fg: parts.l_fg,
        l_cp: parts.l_cp,
        total,
        stage,
    }
}
