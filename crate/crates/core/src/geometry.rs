//! 3D box states on a planar world, ego poses, and the transforms used to
//! carry reference points between frames.
//!
//! A box is 9 parameters: center (x,y,z), size (l,w,h), yaw, and planar
//! velocity (vx,vy). Yaw is kept normalized to (-pi, pi]. All boxes within a
//! frame live in that frame's ego coordinates; only reference points are
//! re-expressed when the ego moves (velocities are deliberately left alone,
//! matching how reference points are treated downstream).

use crate::{Error, Result};
use std::f64::consts::{PI, TAU};

/// Normalize an angle to (-pi, pi].
pub fn wrap_to_pi(theta: f64) -> f64 {
    let mut t = theta % TAU;
    if t <= -PI {
        t += TAU;
    } else if t > PI {
        t -= TAU;
    }
    t
}

/// Absolute yaw difference wrapped to [0, pi].
pub fn yaw_abs_diff(a: f64, b: f64) -> f64 {
    wrap_to_pi(a - b).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxState {
    pub center: [f64; 3],
    /// Extents (l, w, h); all strictly positive.
    pub size: [f64; 3],
    /// Heading, normalized to (-pi, pi].
    pub yaw: f64,
    /// Planar velocity in the frame the box lives in.
    pub velocity: [f64; 2],
}

impl BoxState {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, velocity: [f64; 2]) -> Self {
        assert!(
            size.iter().all(|&s| s > 0.0),
            "box size must be strictly positive, got {size:?}"
        );
        Self {
            center,
            size,
            yaw: wrap_to_pi(yaw),
            velocity,
        }
    }

    /// Flat parameter order: [cx, cy, cz, l, w, h, yaw, vx, vy].
    pub fn to_vec9(&self) -> [f64; 9] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
            self.yaw,
            self.velocity[0],
            self.velocity[1],
        ]
    }

    pub fn from_vec9(v: &[f64]) -> Self {
        assert_eq!(v.len(), 9, "box vector must have 9 entries");
        Self::new(
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            v[6],
            [v[7], v[8]],
        )
    }

    /// Fallible variant for parsing external data.
    pub fn try_from_vec9(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Parse(format!("box vector needs 9 entries, got {}", v.len())));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Parse("box vector has non-finite entries".into()));
        }
        if v[3] <= 0.0 || v[4] <= 0.0 || v[5] <= 0.0 {
            return Err(Error::Parse(format!(
                "box size must be positive, got [{}, {}, {}]",
                v[3], v[4], v[5]
            )));
        }
        Ok(Self::from_vec9(v))
    }
}

/// Per-parameter absolute difference of two boxes; the yaw component is
/// wrapped to [0, pi] before taking the absolute value. Symmetric.
pub fn box_abs_diff(a: &BoxState, b: &BoxState) -> [f64; 9] {
    let va = a.to_vec9();
    let vb = b.to_vec9();
    let mut d = [0.0; 9];
    for i in 0..9 {
        d[i] = (va[i] - vb[i]).abs();
    }
    d[6] = yaw_abs_diff(a.yaw, b.yaw);
    d
}

/// Ego pose: planar translation plus altitude, and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    pub translation: [f64; 3],
    pub yaw: f64,
}

impl EgoPose {
    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            yaw: 0.0,
        }
    }

    /// Ego-frame point to world-frame point (rotation about z, then shift).
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
            p[2] + self.translation[2],
        ]
    }

    /// World-frame point to ego-frame point.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let q = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        [c * q[0] + s * q[1], -s * q[0] + c * q[1], q[2]]
    }
}

/// Constant-velocity advance of a reference point: x,y move by v * dt, z is
/// unchanged. dt must be non-negative.
pub fn propagate_reference(center: [f64; 3], velocity: [f64; 2], dt: f64) -> [f64; 3] {
    assert!(dt >= 0.0, "propagate_reference needs dt >= 0, got {dt}");
    [
        center[0] + velocity[0] * dt,
        center[1] + velocity[1] * dt,
        center[2],
    ]
}

/// Re-express a point given in `from` ego coordinates in `to` ego
/// coordinates (composition through the shared world frame).
pub fn ego_compensate(p: [f64; 3], from: &EgoPose, to: &EgoPose) -> [f64; 3] {
    to.to_local(from.to_world(p))
}

/// Planar rotation applied by `ego_compensate` for a (from, to) pose pair:
/// returns the 2x2 matrix R with p_to = R * p_from + const. Used by the
/// training backward pass, which needs the Jacobian of the compensation.
pub fn ego_compensate_rotation(from: &EgoPose, to: &EgoPose) -> [[f64; 2]; 2] {
    let (s, c) = (from.yaw - to.yaw).sin_cos();
    [[c, -s], [s, c]]
}

/// Re-express a whole box from `from` ego coordinates in `to` ego
/// coordinates: the center moves through the world frame, heading and
/// planar velocity rotate by the yaw difference, extents are unchanged.
pub fn ego_compensate_box(b: &BoxState, from: &EgoPose, to: &EgoPose) -> BoxState {
    let center = ego_compensate(b.center, from, to);
    let dyaw = from.yaw - to.yaw;
    let (s, c) = dyaw.sin_cos();
    let velocity = [
        c * b.velocity[0] - s * b.velocity[1],
        s * b.velocity[0] + c * b.velocity[1],
    ];
    BoxState::new(center, b.size, b.yaw + dyaw, velocity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    }

    #[test]
    fn yaw_wrap_three_vs_minus_three() {
        // 3.0 and -3.0 rad are 2*pi - 6 apart the short way.
        let d = yaw_abs_diff(3.0, -3.0);
        assert_close(d, TAU - 6.0, 1e-12, "wrapped yaw distance");
        assert_close(d, 0.2831853071795862, 1e-12, "wrapped yaw literal");
    }

    #[test]
    fn yaw_wrap_boundaries() {
        assert_close(wrap_to_pi(PI), PI, 0.0, "pi stays pi");
        assert_close(wrap_to_pi(-PI), PI, 0.0, "-pi maps to pi");
        assert_close(wrap_to_pi(TAU + 0.25), 0.25, 1e-12, "wraps a full turn");
    }

    #[test]
    fn box_vec9_roundtrip_exact() {
        let b = BoxState::new([1.5, -2.0, 0.75], [4.2, 1.9, 1.6], -2.8, [3.0, -0.5]);
        let v = b.to_vec9();
        let b2 = BoxState::from_vec9(&v);
        assert_eq!(b, b2);
    }

    #[test]
    fn box_rejects_non_positive_size() {
        assert!(BoxState::try_from_vec9(&[0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).is_err());
        let r = std::panic::catch_unwind(|| {
            BoxState::new([0.0; 3], [1.0, -1.0, 1.0], 0.0, [0.0; 2])
        });
        assert!(r.is_err());
    }

    #[test]
    fn box_abs_diff_symmetric_and_zero_on_self() {
        let a = BoxState::new([1.0, 2.0, 0.5], [4.0, 2.0, 1.5], 3.0, [1.0, 0.0]);
        let b = BoxState::new([-1.0, 0.0, 0.0], [3.5, 1.8, 1.4], -3.0, [0.0, 2.0]);
        let dab = box_abs_diff(&a, &b);
        let dba = box_abs_diff(&b, &a);
        assert_eq!(dab, dba, "abs diff must be symmetric");
        let daa = box_abs_diff(&a, &a);
        assert!(daa.iter().all(|&x| x == 0.0));
        assert!(dab[6] >= 0.0 && dab[6] <= PI, "yaw diff within [0, pi]");
        assert_close(dab[6], TAU - 6.0, 1e-12, "yaw wraps the short way");
    }

    #[test]
    fn propagate_reference_example() {
        let p = propagate_reference([1.0, 2.0, 0.0], [3.0, -1.0], 0.5);
        assert_eq!(p, [2.5, 1.5, 0.0]);
    }

    #[test]
    fn propagate_reference_rejects_negative_dt() {
        let r = std::panic::catch_unwind(|| propagate_reference([0.0; 3], [0.0; 2], -0.1));
        assert!(r.is_err());
    }

    #[test]
    fn identity_pose_composition_is_identity() {
        let id = EgoPose::identity();
        let p = [3.0, -4.0, 1.0];
        assert_eq!(ego_compensate(p, &id, &id), p);
    }

    #[test]
    fn quarter_turn_in_place() {
        // Ego yaws +90 degrees without moving: a point ahead-left becomes
        // ahead-right in the new frame.
        let from = EgoPose::identity();
        let to = EgoPose {
            translation: [0.0; 3],
            yaw: PI / 2.0,
        };
        let p = ego_compensate([1.0, 0.0, 0.0], &from, &to);
        assert_close(p[0], 0.0, 1e-12, "x");
        assert_close(p[1], -1.0, 1e-12, "y");
        assert_close(p[2], 0.0, 1e-12, "z");
    }

    #[test]
    fn pose_roundtrip_many_seeds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let from = EgoPose {
                translation: [
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-2.0..2.0),
                ],
                yaw: rng.gen_range(-PI..PI),
            };
            let to = EgoPose {
                translation: [
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-2.0..2.0),
                ],
                yaw: rng.gen_range(-PI..PI),
            };
            let p = [
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-3.0..3.0),
            ];
            let there = ego_compensate(p, &from, &to);
            let back = ego_compensate(there, &to, &from);
            for k in 0..3 {
                assert_close(back[k], p[k], 1e-9, "roundtrip");
            }
        }
    }

    #[test]
    fn compensation_rotation_matches_transform() {
        let from = EgoPose {
            translation: [5.0, -2.0, 0.3],
            yaw: 0.7,
        };
        let to = EgoPose {
            translation: [6.5, -1.0, 0.1],
            yaw: -0.4,
        };
        let r = ego_compensate_rotation(&from, &to);
        // The Jacobian of the planar part equals the rotation matrix.
        let p0 = [2.0, 3.0, 0.5];
        let base = ego_compensate(p0, &from, &to);
        let h = 1e-6;
        for (axis, col) in [(0usize, 0usize), (1, 1)] {
            let mut p = p0;
            p[axis] += h;
            let shifted = ego_compensate(p, &from, &to);
            assert_close((shifted[0] - base[0]) / h, r[0][col], 1e-6, "r0");
            assert_close((shifted[1] - base[1]) / h, r[1][col], 1e-6, "r1");
        }
    }

    #[test]
    fn box_compensation_rotates_heading_and_velocity() {
        let b = BoxState::new([12.0, 0.0, 0.4], [4.0, 2.0, 1.5], 0.3, [1.0, 0.0]);
        let from = EgoPose::identity();
        let to = EgoPose {
            translation: [2.0, 0.0, 0.0],
            yaw: PI / 2.0,
        };
        let out = ego_compensate_box(&b, &from, &to);
        assert_close(out.center[0], 0.0, 1e-12, "cx");
        assert_close(out.center[1], -10.0, 1e-12, "cy");
        assert_close(out.center[2], 0.4, 1e-12, "cz");
        assert_close(out.yaw, 0.3 - PI / 2.0, 1e-12, "yaw");
        assert_close(out.velocity[0], 0.0, 1e-12, "vx");
        assert_close(out.velocity[1], -1.0, 1e-12, "vy");
        assert_eq!(out.size, b.size);
    }

    #[test]
    fn box_compensation_roundtrips() {
        let b = BoxState::new([3.0, -7.0, 0.9], [4.2, 1.9, 1.6], -2.1, [0.7, -1.3]);
        let from = EgoPose {
            translation: [11.0, 4.0, 0.2],
            yaw: 1.1,
        };
        let to = EgoPose {
            translation: [-3.0, 8.0, 0.0],
            yaw: -2.6,
        };
        let there = ego_compensate_box(&b, &from, &to);
        let back = ego_compensate_box(&there, &to, &from);
        for k in 0..3 {
            assert_close(back.center[k], b.center[k], 1e-9, "center roundtrip");
        }
        assert_close(wrap_to_pi(back.yaw - b.yaw), 0.0, 1e-9, "yaw roundtrip");
        assert_close(back.velocity[0], b.velocity[0], 1e-9, "vx roundtrip");
        assert_close(back.velocity[1], b.velocity[1], 1e-9, "vy roundtrip");
    }
}
