use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Matrix;

use super::TrainConfig;

/// Rescales all gradients so their joint L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> Result<f64> {
    if clip_norm <= 0.0 || !clip_norm.is_finite() {
        return Err(Error::InvalidArgument(format!("clip_norm must be > 0, got {clip_norm}")));
    }
    let bad: Vec<usize> = grads
        .iter()
        .filter(|(_, g)| !g.is_finite())
        .map(|(id, _)| id.0)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite gradient in parameters {bad:?}"),
        });
    }
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

/// First/second moments of one trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
    /// Number of updates applied so far (bias correction exponent).
    pub t: u64,
}

/// Decoupled-weight-decay Adam. Moments exist only for trainable
/// parameters; a parameter without a gradient this step is left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| {
                p.trainable.then(|| Moments {
                    m: Matrix::zeros(p.value.rows(), p.value.cols()),
                    v: Matrix::zeros(p.value.rows(), p.value.cols()),
                    t: 0,
                })
            })
            .collect();
        Self { moments }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (id, g) in grads.iter() {
            let Some(st) = self.moments[id.0].as_mut() else {
                continue;
            };
            let decay = store.get(id).decay;
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            let p = store.value_mut(id).as_mut_slice();
            let m = st.m.as_mut_slice();
            let v = st.v.as_mut_slice();
            for i in 0..p.len() {
                let gi = g.as_slice()[i];
                if decay {
                    p[i] -= lr * cfg.weight_decay * p[i];
                }
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(id.0).and_then(|m| m.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = Gradients::new(1);
        g.accumulate(ParamId(0), &Matrix::row_vector(&[0.3, 0.4]));
        let n = clip_gradients(&mut g, 1.0).unwrap();
        assert!((n - 0.5).abs() < 1e-15);
        assert_eq!(g.get(ParamId(0)).unwrap().as_slice(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_rescales_norm_five() {
        let mut g = Gradients::new(1);
        g.accumulate(ParamId(0), &Matrix::row_vector(&[3.0, 4.0]));
        clip_gradients(&mut g, 1.0).unwrap();
        let v = g.get(ParamId(0)).unwrap().as_slice();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut g = Gradients::new(2);
        g.accumulate(ParamId(1), &Matrix::row_vector(&[f64::NAN]));
        assert!(matches!(clip_gradients(&mut g, 1.0), Err(Error::Divergence { .. })));
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Matrix::row_vector(&[1.0, -2.0]), true, false);
        let frozen = store.insert("f", Matrix::row_vector(&[5.0]), false, true);
        let mut opt = AdamW::new(&store);
        assert!(opt.get(frozen).is_none());
        let mut g = Gradients::new(2);
        g.accumulate(w, &Matrix::row_vector(&[0.5, -3.0]));
        let cfg = TrainConfig {
            eps: 0.0,
            ..TrainConfig::default()
        };
        opt.step(&mut store, &g, 0.1, &cfg);
        let v = store.value(w).as_slice();
        assert!((v[0] - 0.9).abs() < 1e-12 && (v[1] + 1.9).abs() < 1e-12, "{v:?}");
        assert_eq!(store.value(frozen).as_slice(), &[5.0]);
    }

    #[test]
    fn zero_lr_changes_only_moments() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Matrix::row_vector(&[1.0, -2.0]), true, true);
        let mut opt = AdamW::new(&store);
        let mut g = Gradients::new(1);
        g.accumulate(w, &Matrix::row_vector(&[0.5, -3.0]));
        opt.step(&mut store, &g, 0.0, &TrainConfig::default());
        assert_eq!(store.value(w).as_slice(), &[1.0, -2.0]);
        assert!(opt.get(w).unwrap().m.as_slice()[0] != 0.0);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let mut store = ParamStore::new();
        let mat = store.insert("m", Matrix::row_vector(&[1.0]), true, true);
        let bias = store.insert("b", Matrix::row_vector(&[1.0]), true, false);
        let mut opt = AdamW::new(&store);
        let mut g = Gradients::new(2);
        g.accumulate(mat, &Matrix::row_vector(&[0.0]));
        g.accumulate(bias, &Matrix::row_vector(&[0.0]));
        opt.step(&mut store, &g, 0.1, &TrainConfig::default());
        assert!((store.value(mat).as_slice()[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-15);
        assert_eq!(store.value(bias).as_slice()[0], 1.0);
    }
}
