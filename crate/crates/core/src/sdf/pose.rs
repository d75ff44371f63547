use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::math::{self, Mat3, Vec3};
use crate::error::{Error, Result};

/// Rigid placement of a primitive: axis-angle rotation (radians) and translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: [0.0; 3],
        translation: [0.0; 3],
    };

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: [0.0; 3],
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(&self.translation).all(|v| v.is_finite()) {
            return Err(Error::InvalidParams("pose has non-finite entries".into()));
        }
        if math::norm(self.rotation) > PI + 1e-12 {
            return Err(Error::InvalidParams(format!(
                "rotation angle {} exceeds pi",
                math::norm(self.rotation)
            )));
        }
        Ok(())
    }

    pub fn has_rotation(&self) -> bool {
        self.rotation != [0.0; 3]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        math::rotation_matrix(self.rotation)
    }

    /// Maps a world point into the primitive frame: `Rᵀ (p − T)`.
    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let q = math::sub(p, self.translation);
        if self.has_rotation() {
            math::mat_t_vec(&self.rotation_matrix(), q)
        } else {
            q
        }
    }

    /// Maps a primitive-frame point back to world space: `R p + T`.
    pub fn apply(&self, local: Vec3) -> Vec3 {
        let r = if self.has_rotation() {
            math::mat_vec(&self.rotation_matrix(), local)
        } else {
            local
        };
        math::add(r, self.translation)
    }

    /// The pose whose `transform_point` undoes this one's.
    pub fn inverse(&self) -> Pose {
        let neg_rot = math::scale(self.rotation, -1.0);
        let t = if self.has_rotation() {
            math::mat_t_vec(&self.rotation_matrix(), self.translation)
        } else {
            self.translation
        };
        Pose {
            rotation: neg_rot,
            translation: math::scale(t, -1.0),
        }
    }
}

/// Free-function form of [`Pose::transform_point`].
pub fn transform_point(p: Vec3, pose: &Pose) -> Vec3 {
    pose.transform_point(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_is_bitwise() {
        for p in [[1.0, 0.0, 0.0], [-0.0, 3.5, -2.25], [1e-300, -7.0, 0.1]] {
            let q = transform_point(p, &Pose::IDENTITY);
            for i in 0..3 {
                assert_eq!(q[i].to_bits(), p[i].to_bits());
            }
        }
    }

    #[test]
    fn pure_translation() {
        let pose = Pose::from_translation([1.0, 0.0, 0.0]);
        assert_eq!(transform_point([1.0, 0.0, 0.0], &pose), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn quarter_turn_about_z() {
        // R = [[0,-1,0],[1,0,0],[0,0,1]], Rᵀ (1,0,0) = (0,-1,0)
        let pose = Pose {
            rotation: [0.0, 0.0, FRAC_PI_2],
            translation: [0.0; 3],
        };
        let q = transform_point([1.0, 0.0, 0.0], &pose);
        assert!((q[0] - 0.0).abs() < 1e-15);
        assert!((q[1] + 1.0).abs() < 1e-15);
        assert!(q[2].abs() < 1e-15);
    }

    #[test]
    fn inverse_round_trip() {
        let pose = Pose {
            rotation: [0.3, -1.2, 0.7],
            translation: [0.5, -0.25, 2.0],
        };
        let p = [0.1, 0.2, -0.9];
        let back = pose.inverse().transform_point(pose.transform_point(p));
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = math::rotation_matrix([0.4, 0.1, -2.0]);
        let rtr = math::mat_mul(
            &[
                [r[0][0], r[1][0], r[2][0]],
                [r[0][1], r[1][1], r[2][1]],
                [r[0][2], r[1][2], r[2][2]],
            ],
            &r,
        );
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rtr[i][j] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rodrigues_derivative_matches_finite_differences() {
        for omega in [[0.3, -0.8, 0.5], [1e-9, 0.0, 0.0], [2.0, 1.0, -0.5]] {
            let d = math::rotation_matrix_derivatives(omega);
            for m in 0..3 {
                let h = 1e-6;
                let mut wp = omega;
                let mut wm = omega;
                wp[m] += h;
                wm[m] -= h;
                let rp = math::rotation_matrix(wp);
                let rm = math::rotation_matrix(wm);
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                        assert!((fd - d[m][i][j]).abs() < 1e-7, "m={m} i={i} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_large_angle() {
        let pose = Pose {
            rotation: [4.0, 0.0, 0.0],
            translation: [0.0; 3],
        };
        assert!(pose.validate().is_err());
    }
}
