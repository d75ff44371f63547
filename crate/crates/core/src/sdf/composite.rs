use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use super::primitive::{PrimitiveSpec, Role};
use crate::error::{Error, Result};

/// `min(δ, max(−δ, x))`
#[inline]
pub fn clamp_delta(x: f64, delta: f64) -> f64 {
    x.max(-delta).min(delta)
}

/// Minimum of a non-empty slice.
pub fn union_min(values: &[f64]) -> Result<f64> {
    union_argmin(values).map(|(_, v)| v)
}

/// Index and value of the minimum; ties go to the lowest index.
pub fn union_argmin(values: &[f64]) -> Result<(usize, f64)> {
    let (first, rest) = values.split_first().ok_or(Error::EmptyUnion)?;
    let mut best = (0, *first);
    for (i, &v) in rest.iter().enumerate() {
        if v < best.1 {
            best = (i + 1, v);
        }
    }
    Ok(best)
}

/// Penetration depth of two SDF values: `max(−max(a, b), 0)`.
#[inline]
pub fn overlap_theta(a: f64, b: f64) -> f64 {
    (-a.max(b)).max(0.0)
}

/// Decomposition of a shape family member into one generic part plus
/// geometric and assisted primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    #[serde(default = "one")]
    pub generic_count: u32,
    pub geometric: Vec<PrimitiveSpec>,
    pub assisted: Vec<PrimitiveSpec>,
}

fn one() -> u32 {
    1
}

impl CompositeSpec {
    pub fn new(geometric: Vec<PrimitiveSpec>, assisted: Vec<PrimitiveSpec>) -> Result<Self> {
        let spec = Self { generic_count: 1, geometric, assisted };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_geometric(&self) -> usize {
        self.geometric.len()
    }

    pub fn n_assisted(&self) -> usize {
        self.assisted.len()
    }

    /// Geometric primitives followed by the assisting geometries of the
    /// assisted ones, the order used by every per-part array.
    pub fn primitives(&self) -> impl Iterator<Item = &PrimitiveSpec> {
        self.geometric.iter().chain(self.assisted.iter())
    }

    pub fn primitives_mut(&mut self) -> impl Iterator<Item = &mut PrimitiveSpec> {
        self.geometric.iter_mut().chain(self.assisted.iter_mut())
    }

    pub fn primitive(&self, id: &str) -> Option<&PrimitiveSpec> {
        self.primitives().find(|p| p.id == id)
    }

    /// Distinct assist latent ids in first-appearance order.
    pub fn assist_latent_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.assisted {
            if let Some(id) = &p.assist_latent_id {
                if !out.contains(id) {
                    out.push(id.clone());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.generic_count != 1 {
            return Err(Error::InvalidParams(format!(
                "generic_count must be 1, got {}",
                self.generic_count
            )));
        }
        let mut seen = HashSet::new();
        for p in &self.geometric {
            if p.role != Role::Geometric {
                return Err(Error::InvalidParams(format!(
                    "primitive `{}` listed as geometric has role {:?}",
                    p.id, p.role
                )));
            }
        }
        for p in &self.assisted {
            if p.role != Role::Assisted {
                return Err(Error::InvalidParams(format!(
                    "primitive `{}` listed as assisted has role {:?}",
                    p.id, p.role
                )));
            }
        }
        for p in self.primitives() {
            p.validate()?;
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidParams(format!("duplicate primitive id `{}`", p.id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Full-shape SDF from already evaluated part values. Assisting geometries are
/// never passed here; only the learned assisted parts contribute.
pub fn composite_sdf(
    spec: &CompositeSpec,
    generic_value: f64,
    geom_values: &[f64],
    assist_values: &[f64],
) -> Result<f64> {
    if geom_values.len() != spec.n_geometric() {
        return Err(Error::LengthMismatch {
            context: "composite_sdf geometric values",
            expected: spec.n_geometric(),
            actual: geom_values.len(),
        });
    }
    if assist_values.len() != spec.n_assisted() {
        return Err(Error::LengthMismatch {
            context: "composite_sdf assisted values",
            expected: spec.n_assisted(),
            actual: assist_values.len(),
        });
    }
    Ok(geom_values
        .iter()
        .chain(assist_values)
        .fold(generic_value, |acc, &v| acc.min(v)))
}
