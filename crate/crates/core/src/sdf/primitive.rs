use serde::{Deserialize, Serialize};

use super::math::{self, Vec3};
use super::pose::Pose;
use crate::error::{Error, Result};

/// Closed-form primitive families. Every primitive is centred at the origin of
/// its own frame with its axis (where it has one) along local z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Sphere,
    Cylinder,
    HollowCylinder,
    Cuboid,
}

impl PrimitiveKind {
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            PrimitiveKind::Sphere => &["radius"],
            PrimitiveKind::Cylinder => &["radius", "half_height"],
            PrimitiveKind::HollowCylinder => &["outer_radius", "thickness", "half_height"],
            PrimitiveKind::Cuboid => &["half_x", "half_y", "half_z"],
        }
    }

    pub fn param_count(self) -> usize {
        self.param_names().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Cylinder => "cylinder",
            PrimitiveKind::HollowCylinder => "hollow_cylinder",
            PrimitiveKind::Cuboid => "cuboid",
        }
    }
}

/// Shape parameters of one analytic primitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomParams {
    pub kind: PrimitiveKind,
    #[serde(rename = "params")]
    pub values: Vec<f64>,
}

impl GeomParams {
    pub fn new(kind: PrimitiveKind, values: Vec<f64>) -> Result<Self> {
        let gp = Self { kind, values };
        gp.validate()?;
        Ok(gp)
    }

    pub fn sphere(r: f64) -> Self {
        Self { kind: PrimitiveKind::Sphere, values: vec![r] }
    }

    pub fn cylinder(r: f64, half_height: f64) -> Self {
        Self { kind: PrimitiveKind::Cylinder, values: vec![r, half_height] }
    }

    pub fn hollow_cylinder(outer_radius: f64, thickness: f64, half_height: f64) -> Self {
        Self {
            kind: PrimitiveKind::HollowCylinder,
            values: vec![outer_radius, thickness, half_height],
        }
    }

    pub fn cuboid(half: Vec3) -> Self {
        Self { kind: PrimitiveKind::Cuboid, values: half.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.kind.param_count() {
            return Err(Error::InvalidParams(format!(
                "{} expects {} values, got {}",
                self.kind.name(),
                self.kind.param_count(),
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidParams(format!(
                "{} parameter {v} is not a positive finite real",
                self.kind.name()
            )));
        }
        if self.kind == PrimitiveKind::HollowCylinder && self.values[1] >= self.values[0] {
            return Err(Error::InvalidParams(format!(
                "hollow cylinder thickness {} must be below its outer radius {}",
                self.values[1], self.values[0]
            )));
        }
        Ok(())
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        sdf(self.kind, &self.values, p)
    }
}

/// Value and subgradients of an analytic SDF at one local point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfGrad {
    pub value: f64,
    pub d_point: Vec3,
    /// Only the first `kind.param_count()` entries are meaningful.
    pub d_params: [f64; 3],
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Combines per-axis slab distances `d` into an exact box-like SDF:
/// `min(max(d), 0) + ‖max(d, 0)‖`, returning the value and `∂/∂d`.
/// Ties in the interior max go to the lowest index.
#[inline]
fn extrude<const N: usize>(d: [f64; N]) -> (f64, [f64; N]) {
    let mut arg = 0;
    for i in 1..N {
        if d[i] > d[arg] {
            arg = i;
        }
    }
    let mut g = [0.0; N];
    if d[arg] <= 0.0 {
        g[arg] = 1.0;
        return (d[arg], g);
    }
    let norm = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    for i in 0..N {
        if d[i] > 0.0 {
            g[i] = d[i] / norm;
        }
    }
    (norm, g)
}

pub fn sdf_sphere(r: f64, p: Vec3) -> f64 {
    math::norm(p) - r
}

pub fn sdf_cylinder(r: f64, half_height: f64, p: Vec3) -> f64 {
    let q = (p[0] * p[0] + p[1] * p[1]).sqrt();
    extrude([q - r, p[2].abs() - half_height]).0
}

pub fn sdf_hollow_cylinder(outer: f64, thickness: f64, half_height: f64, p: Vec3) -> f64 {
    let q = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let mid = outer - 0.5 * thickness;
    extrude([(q - mid).abs() - 0.5 * thickness, p[2].abs() - half_height]).0
}

pub fn sdf_cuboid(half: Vec3, p: Vec3) -> f64 {
    extrude([
        p[0].abs() - half[0],
        p[1].abs() - half[1],
        p[2].abs() - half[2],
    ])
    .0
}

/// Signed distance of a primitive at a point given in its own frame.
pub fn sdf(kind: PrimitiveKind, v: &[f64], p: Vec3) -> f64 {
    match kind {
        PrimitiveKind::Sphere => sdf_sphere(v[0], p),
        PrimitiveKind::Cylinder => sdf_cylinder(v[0], v[1], p),
        PrimitiveKind::HollowCylinder => sdf_hollow_cylinder(v[0], v[1], v[2], p),
        PrimitiveKind::Cuboid => sdf_cuboid([v[0], v[1], v[2]], p),
    }
}

/// Like [`sdf`] but also returns gradients with respect to the local point and
/// the shape parameters.
pub fn sdf_with_grad(kind: PrimitiveKind, v: &[f64], p: Vec3) -> SdfGrad {
    match kind {
        PrimitiveKind::Sphere => {
            let n = math::norm(p);
            let d_point = if n > 0.0 { math::scale(p, 1.0 / n) } else { [0.0; 3] };
            SdfGrad { value: n - v[0], d_point, d_params: [-1.0, 0.0, 0.0] }
        }
        PrimitiveKind::Cylinder => {
            let q = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let (value, g) = extrude([q - v[0], p[2].abs() - v[1]]);
            let (ux, uy) = if q > 0.0 { (p[0] / q, p[1] / q) } else { (0.0, 0.0) };
            SdfGrad {
                value,
                d_point: [g[0] * ux, g[0] * uy, g[1] * sign(p[2])],
                d_params: [-g[0], -g[1], 0.0],
            }
        }
        PrimitiveKind::HollowCylinder => {
            let q = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let mid = v[0] - 0.5 * v[1];
            let u = q - mid;
            let (value, g) = extrude([u.abs() - 0.5 * v[1], p[2].abs() - v[2]]);
            let (ux, uy) = if q > 0.0 { (p[0] / q, p[1] / q) } else { (0.0, 0.0) };
            let su = sign(u);
            SdfGrad {
                value,
                d_point: [g[0] * su * ux, g[0] * su * uy, g[1] * sign(p[2])],
                d_params: [-g[0] * su, g[0] * (0.5 * su - 0.5), -g[1]],
            }
        }
        PrimitiveKind::Cuboid => {
            let (value, g) = extrude([
                p[0].abs() - v[0],
                p[1].abs() - v[1],
                p[2].abs() - v[2],
            ]);
            SdfGrad {
                value,
                d_point: [g[0] * sign(p[0]), g[1] * sign(p[1]), g[2] * sign(p[2])],
                d_params: [-g[0], -g[1], -g[2]],
            }
        }
    }
}

/// Membership test written independently of the distance formulas.
pub fn contains(kind: PrimitiveKind, v: &[f64], p: Vec3) -> bool {
    let q = (p[0] * p[0] + p[1] * p[1]).sqrt();
    match kind {
        PrimitiveKind::Sphere => math::norm(p) < v[0],
        PrimitiveKind::Cylinder => q < v[0] && p[2].abs() < v[1],
        PrimitiveKind::HollowCylinder => q < v[0] && q > v[0] - v[1] && p[2].abs() < v[2],
        PrimitiveKind::Cuboid => (0..3).all(|i| p[i].abs() < v[i]),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Geometric,
    Assisted,
}

/// A posed analytic primitive, either standalone (geometric) or the assisting
/// geometry of a learned part (assisted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub id: String,
    pub role: Role,
    #[serde(flatten)]
    pub params: GeomParams,
    #[serde(flatten)]
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist_latent_id: Option<String>,
}

impl PrimitiveSpec {
    pub fn geometric(id: impl Into<String>, params: GeomParams, pose: Pose) -> Self {
        Self { id: id.into(), role: Role::Geometric, params, pose, assist_latent_id: None }
    }

    pub fn assisted(
        id: impl Into<String>,
        params: GeomParams,
        pose: Pose,
        assist_latent_id: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            role: Role::Assisted,
            params,
            pose,
            assist_latent_id: Some(assist_latent_id.into()),
        }
    }

    pub fn kind(&self) -> PrimitiveKind {
        self.params.kind
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.pose.validate()?;
        match (self.role, &self.assist_latent_id) {
            (Role::Assisted, None) => Err(Error::InvalidParams(format!(
                "assisted primitive `{}` has no assist_latent_id",
                self.id
            ))),
            (Role::Geometric, Some(_)) => Err(Error::InvalidParams(format!(
                "geometric primitive `{}` carries an assist_latent_id",
                self.id
            ))),
            _ => Ok(()),
        }
    }

    /// Signed distance at a world-space point.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.params.sdf(self.pose.transform_point(p))
    }

    /// World-space axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let v = &self.params.values;
        let r = self.pose.rotation_matrix();
        let c = self.pose.translation;
        let mut ext = [0.0; 3];
        match self.kind() {
            PrimitiveKind::Sphere => ext = [v[0]; 3],
            PrimitiveKind::Cylinder | PrimitiveKind::HollowCylinder => {
                let (rad, h) = if self.kind() == PrimitiveKind::Cylinder {
                    (v[0], v[1])
                } else {
                    (v[0], v[2])
                };
                for (i, e) in ext.iter_mut().enumerate() {
                    let a = r[i][2];
                    *e = rad * (1.0 - a * a).max(0.0).sqrt() + h * a.abs();
                }
            }
            PrimitiveKind::Cuboid => {
                for (i, e) in ext.iter_mut().enumerate() {
                    *e = (0..3).map(|j| r[i][j].abs() * v[j]).sum();
                }
            }
        }
        (math::sub(c, ext), math::add(c, ext))
    }

    /// Largest distance from the world origin to any point of the solid.
    pub fn max_norm(&self) -> f64 {
        let v = &self.params.values;
        match self.kind() {
            PrimitiveKind::Sphere => math::norm(self.pose.translation) + v[0],
            PrimitiveKind::Cylinder | PrimitiveKind::HollowCylinder => {
                let (rad, h) = if self.kind() == PrimitiveKind::Cylinder {
                    (v[0], v[1])
                } else {
                    (v[0], v[2])
                };
                let r = self.pose.rotation_matrix();
                let u = [r[0][0], r[1][0], r[2][0]];
                let w = [r[0][1], r[1][1], r[2][1]];
                [-h, h]
                    .iter()
                    .map(|&z| {
                        let c = self.pose.apply([0.0, 0.0, z]);
                        let cu = math::dot(c, u);
                        let cw = math::dot(c, w);
                        (math::dot(c, c) + rad * rad + 2.0 * rad * (cu * cu + cw * cw).sqrt())
                            .sqrt()
                    })
                    .fold(0.0, f64::max)
            }
            PrimitiveKind::Cuboid => {
                let mut best: f64 = 0.0;
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        for sz in [-1.0, 1.0] {
                            let c = self.pose.apply([sx * v[0], sy * v[1], sz * v[2]]);
                            best = best.max(math::norm(c));
                        }
                    }
                }
                best
            }
        }
    }

    /// Uniform scaling about the world origin.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.params.values.iter_mut().for_each(|v| *v *= s);
        out.pose.translation = math::scale(out.pose.translation, s);
        out
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        let mut out = self.clone();
        out.pose.translation = math::add(out.pose.translation, offset);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn sphere_examples() {
        assert!(close(sdf_sphere(1.0, [0.0; 3]), -1.0));
        assert!(close(sdf_sphere(1.0, [2.0, 0.0, 0.0]), 1.0));
        assert!(close(sdf_sphere(0.5, [0.6, 0.8, 0.0]), 0.5));
    }

    #[test]
    fn cylinder_examples() {
        assert!(close(sdf_cylinder(0.5, 1.0, [0.0; 3]), -0.5));
        assert!(close(sdf_cylinder(0.5, 1.0, [1.5, 0.0, 0.0]), 1.0));
        assert!(close(sdf_cylinder(0.5, 1.0, [3.5, 0.0, 5.0]), 5.0));
    }

    #[test]
    fn hollow_cylinder_examples() {
        assert!(close(sdf_hollow_cylinder(0.5, 0.1, 1.0, [0.45, 0.0, 0.0]), -0.05));
        assert!(close(sdf_hollow_cylinder(0.5, 0.1, 1.0, [0.5, 0.0, 0.0]), 0.0));
        assert!(close(sdf_hollow_cylinder(0.5, 0.1, 1.0, [0.0, 0.0, 0.0]), 0.40));
    }

    #[test]
    fn cuboid_examples() {
        assert!(close(sdf_cuboid([1.0; 3], [0.0; 3]), -1.0));
        assert!(close(sdf_cuboid([1.0; 3], [2.0, 0.0, 0.0]), 1.0));
        assert!(close(sdf_cuboid([1.0; 3], [2.0, 2.0, 0.0]), 2f64.sqrt()));
    }

    #[test]
    fn grad_matches_value_function() {
        let cases = [
            (PrimitiveKind::Sphere, vec![0.4]),
            (PrimitiveKind::Cylinder, vec![0.3, 0.5]),
            (PrimitiveKind::HollowCylinder, vec![0.5, 0.12, 0.4]),
            (PrimitiveKind::Cuboid, vec![0.3, 0.2, 0.6]),
        ];
        let pts = [[0.13, -0.41, 0.22], [0.7, 0.1, -0.9], [0.02, 0.01, 0.05], [-0.33, 0.5, 0.61]];
        for (kind, v) in &cases {
            for p in pts {
                let g = sdf_with_grad(*kind, v, p);
                assert_eq!(g.value, sdf(*kind, v, p));
                let h = 1e-6;
                for i in 0..3 {
                    let mut a = p;
                    let mut b = p;
                    a[i] += h;
                    b[i] -= h;
                    let fd = (sdf(*kind, v, a) - sdf(*kind, v, b)) / (2.0 * h);
                    assert!((fd - g.d_point[i]).abs() < 1e-6, "{kind:?} point {i}");
                }
                for i in 0..v.len() {
                    let mut a = v.clone();
                    let mut b = v.clone();
                    a[i] += h;
                    b[i] -= h;
                    let fd = (sdf(*kind, &a, p) - sdf(*kind, &b, p)) / (2.0 * h);
                    assert!((fd - g.d_params[i]).abs() < 1e-6, "{kind:?} param {i}");
                }
            }
        }
    }

    #[test]
    fn validation() {
        assert!(GeomParams::new(PrimitiveKind::HollowCylinder, vec![0.5, 0.5, 1.0]).is_err());
        assert!(GeomParams::new(PrimitiveKind::Sphere, vec![-1.0]).is_err());
        assert!(GeomParams::new(PrimitiveKind::Cuboid, vec![1.0, 1.0]).is_err());
        assert!(GeomParams::new(PrimitiveKind::Cylinder, vec![1.0, 2.0]).is_ok());
        let p = PrimitiveSpec {
            id: "x".into(),
            role: Role::Assisted,
            params: GeomParams::sphere(1.0),
            pose: Pose::IDENTITY,
            assist_latent_id: None,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn max_norm_of_posed_cylinder() {
        let prim = PrimitiveSpec::geometric(
            "c",
            GeomParams::hollow_cylinder(0.3, 0.05, 0.1),
            Pose::from_translation([0.0, 0.0, 0.5]),
        );
        assert!(close(prim.max_norm(), (0.3f64.powi(2) + 0.6f64.powi(2)).sqrt()));
        let (lo, hi) = prim.bounding_box();
        assert!(close(lo[2], 0.4) && close(hi[2], 0.6) && close(hi[0], 0.3));
    }
}
