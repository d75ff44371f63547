//! Synthetic shape families with exact ground-truth distances, sampling and
//! dataset storage.

pub mod dataset;
pub mod families;
pub mod helix;
pub mod sampling;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdf::math::{self, Vec3};
use crate::sdf::{sdf, sdf_cuboid, CompositeSpec, PrimitiveKind, PrimitiveSpec};

pub use dataset::{
    generate_dataset, load_dataset, write_dataset, Dataset, DatasetConfig, LabelNoise, Manifest, ManifestEntry, Split,
};
pub use families::{ChairFamilyParams, FamilyParams, MixerFamilyParams};
pub use helix::Helix;
pub use sampling::{inject_label_noise, sample_sdf, sample_surface_points, SampleSet};

/// Radius all shapes are scaled into.
pub const NORMALIZED_RADIUS: f64 = 1.0 / 1.03;

/// Axis-aligned box, one piece of a box-union generic part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPart {
    pub half: Vec3,
    pub center: Vec3,
}

impl BoxPart {
    pub fn sdf(&self, p: Vec3) -> f64 {
        sdf_cuboid(self.half, math::sub(p, self.center))
    }
}

/// Analytic descriptor of the part the generic decoder learns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GenericPart {
    Helix(Helix),
    Boxes { boxes: Vec<BoxPart> },
}

impl GenericPart {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            GenericPart::Helix(h) => h.sdf(p),
            GenericPart::Boxes { boxes } => boxes.iter().map(|b| b.sdf(p)).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        match self {
            GenericPart::Helix(h) => h.bounding_box(),
            GenericPart::Boxes { boxes } => {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for b in boxes {
                    for i in 0..3 {
                        lo[i] = lo[i].min(b.center[i] - b.half[i]);
                        hi[i] = hi[i].max(b.center[i] + b.half[i]);
                    }
                }
                (lo, hi)
            }
        }
    }

    pub fn max_norm(&self) -> f64 {
        match self {
            GenericPart::Helix(h) => h.max_norm(),
            GenericPart::Boxes { boxes } => boxes
                .iter()
                .flat_map(|b| {
                    (0..8).map(move |c| {
                        let s = |bit: usize| if c >> bit & 1 == 1 { 1.0 } else { -1.0 };
                        math::norm([
                            b.center[0] + s(0) * b.half[0],
                            b.center[1] + s(1) * b.half[1],
                            b.center[2] + s(2) * b.half[2],
                        ])
                    })
                })
                .fold(0.0, f64::max),
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        match self {
            GenericPart::Helix(h) => GenericPart::Helix(h.scaled(k)),
            GenericPart::Boxes { boxes } => GenericPart::Boxes {
                boxes: boxes
                    .iter()
                    .map(|b| BoxPart { half: math::scale(b.half, k), center: math::scale(b.center, k) })
                    .collect(),
            },
        }
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        match self {
            GenericPart::Helix(h) => GenericPart::Helix(h.translated(offset)),
            GenericPart::Boxes { boxes } => GenericPart::Boxes {
                boxes: boxes
                    .iter()
                    .map(|b| BoxPart { half: b.half, center: math::add(b.center, offset) })
                    .collect(),
            },
        }
    }
}

/// Ground truth of an assisted part: its assisting primitive with edges
/// rounded by `rho`, so the two agree except near edges.
pub fn rounded_sdf(prim: &PrimitiveSpec, rho: f64, p: Vec3) -> f64 {
    let v = &prim.params.values;
    let shrunk: Vec<f64> = match prim.kind() {
        PrimitiveKind::Sphere => v.clone(),
        PrimitiveKind::Cylinder => vec![v[0] - rho, v[1] - rho],
        PrimitiveKind::HollowCylinder => vec![v[0] - rho, v[1] - 2.0 * rho, v[2] - rho],
        PrimitiveKind::Cuboid => v.iter().map(|x| x - rho).collect(),
    };
    if prim.kind() == PrimitiveKind::Sphere {
        return prim.sdf(p);
    }
    sdf(prim.kind(), &shrunk, prim.pose.transform_point(p)) - rho
}

/// One synthetic shape with its exact decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub id: String,
    pub composite: CompositeSpec,
    pub generic: GenericPart,
    pub assist_rounding: f64,
    pub has_part_labels: bool,
    pub seed: u64,
}

impl ShapeRecord {
    /// Generic, geometric, then assisted parts.
    pub fn part_count(&self) -> usize {
        1 + self.composite.n_geometric() + self.composite.n_assisted()
    }

    pub fn part_sdfs(&self, p: Vec3) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.part_count());
        out.push(self.generic.sdf(p));
        out.extend(self.composite.geometric.iter().map(|g| g.sdf(p)));
        out.extend(self.composite.assisted.iter().map(|a| rounded_sdf(a, self.assist_rounding, p)));
        out
    }

    pub fn sdf_full(&self, p: Vec3) -> f64 {
        let mut d = self.generic.sdf(p);
        for g in &self.composite.geometric {
            d = d.min(g.sdf(p));
        }
        for a in &self.composite.assisted {
            d = d.min(rounded_sdf(a, self.assist_rounding, p));
        }
        d
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let boxes = self
            .composite
            .primitives()
            .map(PrimitiveSpec::bounding_box)
            .chain(std::iter::once(self.generic.bounding_box()));
        for (a, b) in boxes {
            for i in 0..3 {
                lo[i] = lo[i].min(a[i]);
                hi[i] = hi[i].max(b[i]);
            }
        }
        (lo, hi)
    }

    pub fn max_norm(&self) -> f64 {
        self.composite
            .primitives()
            .map(PrimitiveSpec::max_norm)
            .fold(self.generic.max_norm(), f64::max)
    }

    /// Uniform scaling about the origin; distances scale by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.composite.primitives_mut().for_each(|p| *p = p.scaled(k));
        out.generic = self.generic.scaled(k);
        out.assist_rounding *= k;
        out
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        let mut out = self.clone();
        out.composite.primitives_mut().for_each(|p| *p = p.translated(offset));
        out.generic = self.generic.translated(offset);
        out
    }
}

/// Centres the bounding box at the origin and scales the farthest point to
/// [`NORMALIZED_RADIUS`].
pub fn normalize_record(rec: &ShapeRecord) -> Result<ShapeRecord> {
    let (lo, hi) = rec.bounding_box();
    if !lo.iter().chain(&hi).all(|v| v.is_finite()) {
        return Err(Error::InvalidParams(format!("shape `{}` has a non-finite extent", rec.id)));
    }
    let centre = math::scale(math::add(lo, hi), 0.5);
    let centred = rec.translated(math::scale(centre, -1.0));
    let m = centred.max_norm();
    if !(m > 1e-12) {
        return Err(Error::InvalidParams(format!("shape `{}` has zero extent", rec.id)));
    }
    Ok(centred.scaled(NORMALIZED_RADIUS / m))
}
