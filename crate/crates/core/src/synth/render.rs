//! Keypoint rendering of a gesture instance.
//!
//! Coordinates are image-style: `x` grows rightward, `y` grows downward,
//! and the canonical body fits in the unit square.
//!
//! At frame `t` of `T` the initiator joint sits at
//! `rest + amplitude · w(θ)` with `θ = 2π t / T + phase_offset`, where `w` is
//! expressed in the basis `(d, p)`: `d` is the unit direction vector and
//! `p = (-d_y, d_x)` its perpendicular. The waveforms are
//!
//! | motion  | `w(θ)`                          |
//! |---------|---------------------------------|
//! | touch   | `d · sin(min(θ mod 2π, π) / 2)` |
//! | rub     | `d · ½ + p · ½ sin θ`           |
//! | scratch | `d · ½ (1 + sin 3θ)`            |
//! | tap     | `d · sin² θ`                    |
//!
//! so `|w| ≤ 1` everywhere. Every coordinate of every joint then receives
//! independent Gaussian jitter with standard deviation `noise_sigma`,
//! truncated to `±2.5 σ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::attributes::{Direction, Initiator, MotionType, Receiver};
use super::gesture::GestureInstance;
use crate::error::{ensure, Result};
use crate::tensor::Matrix;

pub const NUM_JOINTS: usize = 15;
pub const DEFAULT_FRAMES: usize = 8;
/// Jitter is resampled outside this many standard deviations.
pub const JITTER_TRUNCATION: f64 = 2.5;

/// Joint order of the canonical skeleton.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head_top",
    "nose",
    "eye",
    "eyebrow",
    "ear",
    "chin",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_hand",
    "right_hand",
    "left_hip",
    "right_hip",
];

pub const REST_POSE: [[f64; 2]; NUM_JOINTS] = [
    [0.50, 0.05],
    [0.50, 0.14],
    [0.46, 0.11],
    [0.46, 0.085],
    [0.41, 0.12],
    [0.50, 0.20],
    [0.50, 0.25],
    [0.38, 0.30],
    [0.62, 0.30],
    [0.33, 0.45],
    [0.67, 0.45],
    [0.36, 0.58],
    [0.64, 0.58],
    [0.43, 0.62],
    [0.57, 0.62],
];

pub fn initiator_joint(i: Initiator) -> usize {
    match i {
        Initiator::LeftHand => 11,
        Initiator::RightHand => 12,
        Initiator::Head => 0,
        Initiator::Shoulder => 7,
    }
}

pub fn receiver_joint(r: Receiver) -> usize {
    match r {
        Receiver::Nose => 1,
        Receiver::Eye => 2,
        Receiver::Eyebrow => 3,
        Receiver::Ear => 4,
        Receiver::Chin => 5,
        Receiver::Neck => 6,
    }
}

/// Unit direction vector for an attribute tuple's motion.
pub fn direction_vector(initiator: Initiator, receiver: Receiver, direction: Direction) -> [f64; 2] {
    let toward = || {
        let a = REST_POSE[initiator_joint(initiator)];
        let b = REST_POSE[receiver_joint(receiver)];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let n = (dx * dx + dy * dy).sqrt();
        [dx / n, dy / n]
    };
    match direction {
        Direction::Upward => [0.0, -1.0],
        Direction::Downward => [0.0, 1.0],
        Direction::Leftward => [-1.0, 0.0],
        Direction::Rightward => [1.0, 0.0],
        Direction::Toward => toward(),
        Direction::Away => {
            let [x, y] = toward();
            [-x, -y]
        }
    }
}

/// Waveform coefficients `(along d, along p)` at angle `theta`.
pub fn waveform(motion: MotionType, theta: f64) -> (f64, f64) {
    use std::f64::consts::{PI, TAU};
    match motion {
        MotionType::Touch => ((theta.rem_euclid(TAU).min(PI) / 2.0).sin(), 0.0),
        MotionType::Rub => (0.5, 0.5 * theta.sin()),
        MotionType::Scratch => (0.5 * (1.0 + (3.0 * theta).sin()), 0.0),
        MotionType::Tap => (theta.sin().powi(2), 0.0),
    }
}

/// A fixed-length sequence of 2-D keypoint frames, stored as `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    frames: usize,
    joints: usize,
    coords: Vec<f32>,
}

impl VideoClip {
    pub fn from_coords(frames: usize, joints: usize, coords: Vec<f32>) -> Result<Self> {
        ensure!(
            coords.len() == frames * joints * 2,
            InvalidArgument,
            "clip {frames}x{joints} needs {} coordinates, got {}",
            frames * joints * 2,
            coords.len()
        );
        ensure!(
            coords.iter().all(|c| c.is_finite()),
            InvalidArgument,
            "clip coordinates must be finite"
        );
        Ok(Self { frames, joints, coords })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn coords(&self) -> &[f32] {
        &self.coords
    }

    pub fn point(&self, frame: usize, joint: usize) -> [f32; 2] {
        let o = (frame * self.joints + joint) * 2;
        [self.coords[o], self.coords[o + 1]]
    }

    /// `T × 2J` matrix, one flattened frame per row.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.coords.iter().map(|&c| f64::from(c)).collect();
        Matrix::from_vec(self.frames, self.joints * 2, data).expect("clip shape")
    }

    /// Largest distance of `joint` from `origin` over all frames.
    pub fn max_displacement(&self, joint: usize, origin: [f64; 2]) -> f64 {
        (0..self.frames)
            .map(|t| {
                let [x, y] = self.point(t, joint);
                (f64::from(x) - origin[0]).hypot(f64::from(y) - origin[1])
            })
            .fold(0.0, f64::max)
    }

    /// Same clip with frames reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        ensure!(order.len() == self.frames, InvalidArgument, "permutation length mismatch");
        let w = self.joints * 2;
        let mut coords = Vec::with_capacity(self.coords.len());
        for &t in order {
            ensure!(t < self.frames, InvalidArgument, "frame index {t} out of range");
            coords.extend_from_slice(&self.coords[t * w..(t + 1) * w]);
        }
        Ok(Self { coords, ..*self })
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= JITTER_TRUNCATION {
            return z;
        }
    }
}

/// Renders `g` into `frames` keypoint frames. Deterministic in `(g, frames)`.
pub fn render_clip(g: &GestureInstance, frames: usize) -> Result<VideoClip> {
    ensure!(frames >= 2, InvalidArgument, "frame count must be >= 2, got {frames}");
    let a = &g.attributes;
    let joint = initiator_joint(a.initiator);
    let d = direction_vector(a.initiator, a.receiver, a.direction);
    let p = [-d[1], d[0]];

    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    rng.set_stream(frames as u64 + 1);
    // Burn one draw so streams of consecutive frame counts never alias.
    let _: u32 = rng.random();

    let mut coords = Vec::with_capacity(frames * NUM_JOINTS * 2);
    for t in 0..frames {
        let theta = std::f64::consts::TAU * t as f64 / frames as f64 + g.phase_offset;
        let (cd, cp) = waveform(a.motion_type, theta);
        for (j, rest) in REST_POSE.iter().enumerate() {
            let mut xy = *rest;
            if j == joint {
                xy[0] += g.amplitude * (cd * d[0] + cp * p[0]);
                xy[1] += g.amplitude * (cd * d[1] + cp * p[1]);
            }
            for c in &mut xy {
                if g.noise_sigma > 0.0 {
                    *c += g.noise_sigma * truncated_normal(&mut rng);
                }
            }
            coords.push(xy[0] as f32);
            coords.push(xy[1] as f32);
        }
    }
    VideoClip::from_coords(frames, NUM_JOINTS, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::attributes::SemanticAttributes;

    fn instance(motion: MotionType, amplitude: f64, noise: f64, phase: f64) -> GestureInstance {
        GestureInstance {
            attributes: SemanticAttributes::new(Initiator::RightHand, Receiver::Nose, Direction::Upward, motion),
            category_id: 0,
            amplitude,
            phase_offset: phase,
            noise_sigma: noise,
            seed: 99,
        }
    }

    #[test]
    fn static_case_is_the_rest_pose() {
        let clip = render_clip(&instance(MotionType::Tap, 0.0, 0.0, 1.3), 8).unwrap();
        for t in 0..8 {
            for (j, rest) in REST_POSE.iter().enumerate() {
                let got = clip.point(t, j);
                assert_eq!(got, [rest[0] as f32, rest[1] as f32]);
            }
        }
    }

    #[test]
    fn rub_quarter_frame_matches_closed_form() {
        let amp = 0.04;
        let clip = render_clip(&instance(MotionType::Rub, amp, 0.0, 0.0), 8).unwrap();
        // θ = π/2 at t = T/4: w = ½ d + ½ p, with d = up = (0, -1), p = (1, 0).
        let rest = REST_POSE[12];
        let expect = [rest[0] + amp * 0.5, rest[1] - amp * 0.5];
        let got = clip.point(2, 12);
        assert!((f64::from(got[0]) - expect[0]).abs() < 1e-7);
        assert!((f64::from(got[1]) - expect[1]).abs() < 1e-7);
    }

    #[test]
    fn rendering_is_bit_deterministic() {
        let g = instance(MotionType::Scratch, 0.03, 0.005, 0.7);
        assert_eq!(render_clip(&g, 8).unwrap(), render_clip(&g, 8).unwrap());
    }

    #[test]
    fn fewer_than_two_frames_is_rejected() {
        let g = instance(MotionType::Touch, 0.03, 0.0, 0.0);
        assert!(render_clip(&g, 1).is_err());
        assert!(render_clip(&g, 0).is_err());
    }

    #[test]
    fn only_the_initiator_moves_without_noise() {
        for &m in MotionType::ALL {
            let clip = render_clip(&instance(m, 0.05, 0.0, 0.4), 8).unwrap();
            for (j, rest) in REST_POSE.iter().enumerate() {
                let disp = clip.max_displacement(j, *rest);
                if j == 12 {
                    assert!(disp > 0.0 && disp <= 0.05 + 1e-7, "{m}: {disp}");
                } else {
                    assert!(disp < 1e-7, "joint {j} moved by {disp}");
                }
            }
        }
    }

    #[test]
    fn waveforms_stay_in_the_unit_disc() {
        for &m in MotionType::ALL {
            for k in 0..1000 {
                let (a, b) = waveform(m, k as f64 * 0.0137 - 3.0);
                assert!(a.hypot(b) <= 1.0 + 1e-12);
            }
        }
    }
}
