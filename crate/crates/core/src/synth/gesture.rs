use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attributes::{AdmissibleSet, SemanticAttributes};
use crate::error::{ensure, Error, Result};

/// Ground-truth semantics and motion parameters of one synthetic clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GestureInstance {
    pub attributes: SemanticAttributes,
    pub category_id: usize,
    /// Peak excursion of the initiator joint, in body-scale units.
    pub amplitude: f64,
    /// Radians.
    pub phase_offset: f64,
    /// Per-coordinate jitter standard deviation, in body-scale units.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Ranges that per-instance motion parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionRanges {
    pub amplitude: [f64; 2],
    pub noise_sigma: [f64; 2],
}

impl Default for MotionRanges {
    fn default() -> Self {
        Self {
            amplitude: [0.02, 0.05],
            noise_sigma: [0.002, 0.004],
        }
    }
}

impl MotionRanges {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.amplitude;
        let [n0, n1] = self.noise_sigma;
        ensure!(
            a0 > 0.0 && a0 <= a1 && a1.is_finite(),
            Config,
            "amplitude range must satisfy 0 < min <= max, got [{a0}, {a1}]"
        );
        ensure!(
            n0 >= 0.0 && n0 <= n1 && n1.is_finite(),
            Config,
            "noise_sigma range must satisfy 0 <= min <= max, got [{n0}, {n1}]"
        );
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws motion parameters for a known attribute tuple.
pub(crate) fn instance_for(
    seed: u64,
    attributes: SemanticAttributes,
    category_id: usize,
    ranges: &MotionRanges,
) -> GestureInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 is reserved for attribute selection in `sample_gesture`.
    rng.set_stream(0);
    let _choice: u64 = rng.random();
    GestureInstance {
        attributes,
        category_id,
        amplitude: uniform(&mut rng, ranges.amplitude),
        phase_offset: uniform(&mut rng, [0.0, std::f64::consts::TAU]),
        noise_sigma: uniform(&mut rng, ranges.noise_sigma),
        seed,
    }
}

/// Draws an instance whose attributes are uniform over `space`; the
/// category id is the tuple's position in `space`.
pub fn sample_gesture(seed: u64, space: &AdmissibleSet, ranges: &MotionRanges) -> Result<GestureInstance> {
    if space.is_empty() {
        return Err(Error::Config("admissible attribute set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let choice: u64 = rng.random();
    let category_id = (choice % space.len() as u64) as usize;
    let attributes = space.tuples()[category_id];
    Ok(instance_for(seed, attributes, category_id, ranges))
}
