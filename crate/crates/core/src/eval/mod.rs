//! Recognition and retrieval metrics, split evaluation and the ablation
//! runner.

mod ablation;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{
    run_ablation, AblationBase, AblationCell, AblationReport, CellReport, MatrixSpec, SeedResult, Verdict,
    REPORT_SCHEMA_VERSION,
};

use crate::autodiff::Graph;
use crate::encoders::Model;
use crate::error::{ensure, Result};
use crate::objectives::cosine_sim;
use crate::synth::{Sample, VideoClip};
use crate::tensor::Matrix;
use crate::trainer::{FgTextMode, TextTargets};

/// Rows per inference graph. Row results do not depend on the batch they
/// were computed in, so this only affects speed.
const EVAL_CHUNK: usize = 64;

/// Fraction of rows whose argmax equals the label; ties go to the lowest
/// index.
pub fn top1_accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    ensure!(logits.rows() >= 1, InvalidArgument, "top1_accuracy needs at least one row");
    ensure!(
        labels.len() == logits.rows(),
        InvalidArgument,
        "{} labels for {} rows",
        labels.len(),
        logits.rows()
    );
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDiag {
    pub median_rank: f64,
    pub recall_at_1: f64,
}

/// Ranks every bank row by cosine similarity to each feature row.
///
/// The rank of the true text is `1 + #rows scoring strictly higher` than
/// the best-scoring copy of it (competition ranking; token-identical bank
/// rows count as the true text).
pub fn retrieval_diag(features: &Matrix, bank: &Matrix, pairing: &[usize]) -> Result<RetrievalDiag> {
    ensure!(features.rows() >= 1, InvalidArgument, "retrieval needs at least one feature row");
    ensure!(bank.rows() >= 1, InvalidArgument, "retrieval needs a non-empty bank");
    ensure!(
        pairing.len() == features.rows() && features.cols() == bank.cols(),
        InvalidArgument,
        "retrieval shapes: features {:?}, bank {:?}, pairing {}",
        features.shape(),
        bank.shape(),
        pairing.len()
    );
    let mut ranks = Vec::with_capacity(features.rows());
    for (i, &p) in pairing.iter().enumerate() {
        ensure!(p < bank.rows(), InvalidArgument, "pairing {p} outside bank of {}", bank.rows());
        let sims = (0..bank.rows())
            .map(|j| cosine_sim(features.row(i), bank.row(j)))
            .collect::<Result<Vec<f64>>>()?;
        let truth = bank.row(p);
        let best_true = (0..bank.rows())
            .filter(|&j| bank.row(j) == truth)
            .map(|j| sims[j])
            .fold(f64::NEG_INFINITY, f64::max);
        ranks.push(1 + sims.iter().filter(|&&s| s > best_true).count());
    }
    let hits = ranks.iter().filter(|&&r| r == 1).count();
    ranks.sort_unstable();
    let n = ranks.len();
    let median_rank = if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    };
    Ok(RetrievalDiag {
        median_rank,
        recall_at_1: hits as f64 / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1: f64,
    pub median_rank: f64,
    pub recall_at_1: f64,
}

impl EvalMetrics {
    /// `{prefix}_top1`, `{prefix}_median_rank`, `{prefix}_recall_at_1`.
    pub fn keyed(&self, prefix: &str) -> BTreeMap<String, f64> {
        BTreeMap::from([
            (format!("{prefix}_top1"), self.top1),
            (format!("{prefix}_median_rank"), self.median_rank),
            (format!("{prefix}_recall_at_1"), self.recall_at_1),
        ])
    }
}

/// Logits and mid-level features of every sample, in order.
pub fn infer(model: &Model, clips: &[&VideoClip]) -> Result<(Matrix, Matrix)> {
    let parts = clips
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut g = Graph::inference();
            let n = model.visual.forward(&mut g, &model.params, chunk, true)?;
            Ok((g.value(n.logits).clone(), g.value(n.f_mid).clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<&Matrix> = parts.iter().map(|p| &p.0).collect();
    let mids: Vec<&Matrix> = parts.iter().map(|p| &p.1).collect();
    Ok((Matrix::stack_rows(&logits)?, Matrix::stack_rows(&mids)?))
}

/// Top-1 from the classification head plus mid-level retrieval against the
/// texts the fine-grained objective targets under `mode`.
pub fn evaluate_split(model: &Model, targets: &TextTargets, samples: &[Sample], mode: FgTextMode) -> Result<EvalMetrics> {
    ensure!(!samples.is_empty(), InvalidArgument, "cannot evaluate an empty split");
    let clips: Vec<&VideoClip> = samples.iter().map(|s| &s.clip).collect();
    let (logits, f_mid) = infer(model, &clips)?;
    let labels: Vec<usize> = samples.iter().map(Sample::category_id).collect();
    let top1 = top1_accuracy(&logits, &labels)?;
    let (bank, pairing) = targets.retrieval_bank(samples, mode)?;
    let diag = retrieval_diag(&f_mid, &bank, &pairing)?;
    Ok(EvalMetrics {
        top1,
        median_rank: diag.median_rank,
        recall_at_1: diag.recall_at_1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictor() {
        let k = 5;
        let labels: Vec<usize> = (0..k).collect();
        assert_eq!(top1_accuracy(&Matrix::identity(k), &labels).unwrap(), 1.0);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let logits = Matrix::filled(3, 4, 0.5);
        assert_eq!(top1_accuracy(&logits, &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn counts_three_of_four() {
        let logits = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 1.0],
            vec![0.0, 3.0],
        ])
        .unwrap();
        assert_eq!(top1_accuracy(&logits, &[0, 1, 0, 0]).unwrap(), 0.75);
    }

    #[test]
    fn top1_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..10);
            let k = rng.random_range(1..6);
            // Coarse values so ties happen.
            let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(0..3) as f64).collect();
            let logits = Matrix::from_vec(n, k, data.clone()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut correct = 0;
            for i in 0..n {
                let mut best = 0;
                for j in 1..k {
                    if data[i * k + j] > data[i * k + best] {
                        best = j;
                    }
                }
                if best == labels[i] {
                    correct += 1;
                }
            }
            assert_eq!(top1_accuracy(&logits, &labels).unwrap(), correct as f64 / n as f64);
        }
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..20 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = Matrix::from_vec(20, 6, data).unwrap();
        let pairing: Vec<usize> = (0..20).collect();
        let d = retrieval_diag(&f, &f, &pairing).unwrap();
        assert_eq!(d.recall_at_1, 1.0);
        assert_eq!(d.median_rank, 1.0);
    }

    #[test]
    fn single_item_bank() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.5]]).unwrap();
        let bank = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(retrieval_diag(&f, &bank, &[0, 0]).unwrap().recall_at_1, 1.0);
    }

    #[test]
    fn random_features_rank_near_middle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let m = 100;
            let d = 16;
            let bank = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let n = 101;
            let f = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let pairing: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let r = retrieval_diag(&f, &bank, &pairing).unwrap().median_rank;
            assert!((30.0..=70.0).contains(&r), "{r}");
        }
    }

    #[test]
    fn duplicate_true_texts_count_at_best_rank() {
        let bank = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // Feature closest to row 1 ([1,0]); true text is row 2, duplicate of row 0.
        let f = Matrix::from_rows(&[vec![1.0, 0.2]]).unwrap();
        let d = retrieval_diag(&f, &bank, &[2]).unwrap();
        assert_eq!(d.median_rank, 2.0);
        let f = Matrix::from_rows(&[vec![0.1, 1.0]]).unwrap();
        assert_eq!(retrieval_diag(&f, &bank, &[2]).unwrap().median_rank, 1.0);
    }

    #[test]
    fn exact_ties_share_a_rank() {
        let bank = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0 + 1e-300], vec![2.0, 2.0]]).unwrap();
        let f = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        // All three rows are equally similar, so the truth ranks first.
        assert_eq!(retrieval_diag(&f, &bank, &[2]).unwrap().median_rank, 1.0);
    }
}
