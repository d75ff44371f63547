use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::sdf::{CompositeSpec, GeomParams, Pose, PrimitiveKind, PrimitiveSpec, Role, Vec3};

/// One primitive position in the explicit parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub id: String,
    pub role: Role,
    pub kind: PrimitiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist_latent_id: Option<String>,
    /// Used verbatim when rotations are not learned.
    pub fixed_rotation: Vec3,
}

/// Ordering and widths of everything the encoders emit: per primitive
/// `S, [R], T`, then one latent per assist id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub slots: Vec<Slot>,
    pub assist_ids: Vec<String>,
    pub assist_dim: usize,
    pub learn_rotation: bool,
    /// Raw vector of the family template, used to initialise output biases.
    pub template: Vec<f64>,
}

/// Explicit parameters of one primitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimParams {
    pub params: Vec<f64>,
    pub rotation: Vec3,
    pub translation: Vec3,
}

/// `S, R, T` of every primitive plus the assist latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub prims: Vec<PrimParams>,
    pub assist_latents: Vec<Vec<f64>>,
}

/// Tape handles of a decoded raw vector.
#[derive(Clone, Debug)]
pub struct ExplicitVars {
    pub s: Vec<Var>,
    pub rot: Vec<Option<Var>>,
    pub trans: Vec<Var>,
    pub assist: Vec<Var>,
    /// Concatenated `S, [R], T` of all primitives, the generic decoder input.
    pub geom: Var,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Layout {
    pub fn from_template(template: &CompositeSpec, assist_dim: usize, learn_rotation: bool) -> Result<Self> {
        template.validate()?;
        let slots: Vec<Slot> = template
            .primitives()
            .map(|p| Slot {
                id: p.id.clone(),
                role: p.role,
                kind: p.kind(),
                assist_latent_id: p.assist_latent_id.clone(),
                fixed_rotation: p.pose.rotation,
            })
            .collect();
        let mut layout = Self {
            slots,
            assist_ids: template.assist_latent_ids(),
            assist_dim,
            learn_rotation,
            template: Vec::new(),
        };
        let params = layout.params_from_composite(template)?;
        layout.template = layout.encode_raw(&params);
        Ok(layout)
    }

    pub fn slot_width(&self, i: usize) -> usize {
        self.slots[i].kind.param_count() + if self.learn_rotation { 6 } else { 3 }
    }

    pub fn slot_offset(&self, i: usize) -> usize {
        (0..i).map(|j| self.slot_width(j)).sum()
    }

    pub fn geom_dim(&self) -> usize {
        (0..self.slots.len()).map(|i| self.slot_width(i)).sum()
    }

    pub fn raw_width(&self) -> usize {
        self.geom_dim() + self.assist_ids.len() * self.assist_dim
    }

    /// Widths of the encoder output groups: slots first, then assist ids.
    pub fn group_widths(&self) -> Vec<usize> {
        (0..self.slots.len())
            .map(|i| self.slot_width(i))
            .chain(std::iter::repeat(self.assist_dim).take(self.assist_ids.len()))
            .collect()
    }

    pub fn n_geometric(&self) -> usize {
        self.slots.iter().filter(|s| s.role == Role::Geometric).count()
    }

    pub fn n_assisted(&self) -> usize {
        self.slots.len() - self.n_geometric()
    }

    pub fn slot_index(&self, id: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.id == id)
    }

    /// Index into `assist_ids` of the latent used by slot `i`.
    pub fn assist_index(&self, i: usize) -> Option<usize> {
        let id = self.slots[i].assist_latent_id.as_ref()?;
        self.assist_ids.iter().position(|a| a == id)
    }

    pub fn decode_raw(&self, raw: &[f64]) -> Result<ShapeParams> {
        if raw.len() != self.raw_width() {
            return Err(Error::LengthMismatch {
                context: "raw explicit vector",
                expected: self.raw_width(),
                actual: raw.len(),
            });
        }
        let mut off = 0;
        let mut prims = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let n = slot.kind.param_count();
            let params = raw[off..off + n].iter().map(|&v| softplus(v)).collect();
            off += n;
            let rotation = if self.learn_rotation {
                off += 3;
                [raw[off - 3], raw[off - 2], raw[off - 1]]
            } else {
                slot.fixed_rotation
            };
            let translation = [raw[off], raw[off + 1], raw[off + 2]];
            off += 3;
            prims.push(PrimParams { params, rotation, translation });
        }
        let assist_latents = raw[off..].chunks(self.assist_dim.max(1)).map(<[f64]>::to_vec).collect();
        Ok(ShapeParams { prims, assist_latents })
    }

    pub fn encode_raw(&self, params: &ShapeParams) -> Vec<f64> {
        let mut raw = Vec::with_capacity(self.raw_width());
        for p in &params.prims {
            raw.extend(p.params.iter().map(|&v| inverse_softplus(v)));
            if self.learn_rotation {
                raw.extend_from_slice(&p.rotation);
            }
            raw.extend_from_slice(&p.translation);
        }
        for lv in &params.assist_latents {
            raw.extend_from_slice(lv);
        }
        raw
    }

    /// Generic decoder geometry input for explicit parameters.
    pub fn geom_vector(&self, params: &ShapeParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.geom_dim());
        for p in &params.prims {
            out.extend_from_slice(&p.params);
            if self.learn_rotation {
                out.extend_from_slice(&p.rotation);
            }
            out.extend_from_slice(&p.translation);
        }
        out
    }

    /// Names of the explicit vector entries: `S, [R], T` per slot, then the
    /// assist latents, e.g. `tube.outer_radius` or `ring.latent.3`.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.geom_dim() + self.assist_ids.len() * self.assist_dim);
        for slot in &self.slots {
            out.extend(slot.kind.param_names().iter().map(|n| format!("{}.{n}", slot.id)));
            if self.learn_rotation {
                out.extend(["x", "y", "z"].map(|a| format!("{}.rotation.{a}", slot.id)));
            }
            out.extend(["x", "y", "z"].map(|a| format!("{}.translation.{a}", slot.id)));
        }
        for id in &self.assist_ids {
            out.extend((0..self.assist_dim).map(|k| format!("{id}.latent.{k}")));
        }
        out
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| n == name)
    }

    /// Geometry vector followed by the assist latents.
    pub fn explicit_vector(&self, params: &ShapeParams) -> Vec<f64> {
        let mut out = self.geom_vector(params);
        for lv in &params.assist_latents {
            out.extend_from_slice(lv);
        }
        out
    }

    /// Inverse of [`Layout::explicit_vector`].
    pub fn from_explicit_vector(&self, v: &[f64]) -> Result<ShapeParams> {
        let expected = self.geom_dim() + self.assist_ids.len() * self.assist_dim;
        if v.len() != expected {
            return Err(Error::LengthMismatch { context: "explicit vector", expected, actual: v.len() });
        }
        let mut off = 0;
        let mut prims = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let n = slot.kind.param_count();
            let params = v[off..off + n].to_vec();
            off += n;
            let rotation = if self.learn_rotation {
                off += 3;
                [v[off - 3], v[off - 2], v[off - 1]]
            } else {
                slot.fixed_rotation
            };
            let translation = [v[off], v[off + 1], v[off + 2]];
            off += 3;
            prims.push(PrimParams { params, rotation, translation });
        }
        let assist_latents = v[off..].chunks(self.assist_dim.max(1)).map(<[f64]>::to_vec).collect();
        Ok(ShapeParams { prims, assist_latents })
    }

    pub fn params_from_composite(&self, spec: &CompositeSpec) -> Result<ShapeParams> {
        let prims: Vec<&PrimitiveSpec> = spec.primitives().collect();
        if prims.len() != self.slots.len() {
            return Err(Error::LengthMismatch {
                context: "composite primitives",
                expected: self.slots.len(),
                actual: prims.len(),
            });
        }
        let mut out = Vec::with_capacity(prims.len());
        for (slot, p) in self.slots.iter().zip(prims) {
            if slot.id != p.id || slot.kind != p.kind() || slot.role != p.role {
                return Err(Error::InvalidParams(format!(
                    "primitive `{}` does not match layout slot `{}`",
                    p.id, slot.id
                )));
            }
            out.push(PrimParams {
                params: p.params.values.clone(),
                rotation: p.pose.rotation,
                translation: p.pose.translation,
            });
        }
        Ok(ShapeParams {
            prims: out,
            assist_latents: vec![vec![0.0; self.assist_dim]; self.assist_ids.len()],
        })
    }

    /// Posed primitives for explicit parameters. Not validated: learned
    /// parameters may transiently leave the valid range.
    pub fn to_composite(&self, params: &ShapeParams) -> CompositeSpec {
        let mut geometric = Vec::new();
        let mut assisted = Vec::new();
        for (slot, p) in self.slots.iter().zip(&params.prims) {
            let spec = PrimitiveSpec {
                id: slot.id.clone(),
                role: slot.role,
                params: GeomParams { kind: slot.kind, values: p.params.clone() },
                pose: Pose { rotation: p.rotation, translation: p.translation },
                assist_latent_id: slot.assist_latent_id.clone(),
            };
            match slot.role {
                Role::Geometric => geometric.push(spec),
                Role::Assisted => assisted.push(spec),
            }
        }
        CompositeSpec { generic_count: 1, geometric, assisted }
    }

    /// Splits a 1×raw_width tape row into explicit parameter handles.
    pub fn decode_vars(&self, t: &mut Tape, raw: Var) -> Result<ExplicitVars> {
        let w = t.value(raw).cols;
        if w != self.raw_width() || t.value(raw).rows != 1 {
            return Err(Error::Dimension {
                context: "decode_vars",
                detail: format!("raw row {:?}, expected 1x{}", t.value(raw).shape(), self.raw_width()),
            });
        }
        let mut off = 0;
        let (mut s, mut rot, mut trans, mut geom_parts) = (vec![], vec![], vec![], vec![]);
        for slot in &self.slots {
            let n = slot.kind.param_count();
            let sv = t.slice_cols(raw, off, n);
            let sv = t.softplus(sv);
            off += n;
            geom_parts.push(sv);
            s.push(sv);
            if self.learn_rotation {
                let r = t.slice_cols(raw, off, 3);
                off += 3;
                geom_parts.push(r);
                rot.push(Some(r));
            } else if slot.fixed_rotation != [0.0; 3] {
                let r = t.constant(Mat::row_vector(&slot.fixed_rotation));
                rot.push(Some(r));
            } else {
                rot.push(None);
            }
            let tv = t.slice_cols(raw, off, 3);
            off += 3;
            geom_parts.push(tv);
            trans.push(tv);
        }
        let mut assist = Vec::with_capacity(self.assist_ids.len());
        for _ in &self.assist_ids {
            assist.push(t.slice_cols(raw, off, self.assist_dim));
            off += self.assist_dim;
        }
        let geom = if geom_parts.is_empty() {
            t.constant(Mat::zeros(1, 0))
        } else {
            t.concat(&geom_parts)?
        };
        Ok(ExplicitVars { s, rot, trans, assist, geom })
    }

    /// Same handles for fixed explicit parameters, with nothing trainable.
    pub fn constant_vars(&self, t: &mut Tape, params: &ShapeParams) -> Result<ExplicitVars> {
        let raw = t.constant(Mat::row_vector(&self.encode_raw(params)));
        let mut vars = self.decode_vars(t, raw)?;
        // Softplus round trips are not bitwise, so S and the geometry input
        // are rebound to the exact values.
        for (i, p) in params.prims.iter().enumerate() {
            vars.s[i] = t.constant(Mat::row_vector(&p.params));
        }
        vars.geom = t.constant(Mat::row_vector(&self.geom_vector(params)));
        Ok(vars)
    }
}
