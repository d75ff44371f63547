//! All networks, per-shape tables and configuration of a trained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{Checkpoint, Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{
    ArchConfig, ExplicitVars, GenericDecoder, LatentDecoder, Layout, PartDecoder, PointEncoder, ShapeParams,
};
use crate::sdf::{CompositeSpec, Role, Vec3};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Explicit parameters from the point encoder, generic latent per shape.
    Disentangled,
    /// One latent per shape decoded into everything.
    Shared,
}

/// Architecture-level description; everything needed to rebuild the
/// parameter store before loading weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format_version: u32,
    pub variant: Variant,
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub template: CompositeSpec,
    pub use_point_encoder: bool,
    /// Cloud points the encoder sees.
    pub encoder_points: usize,
    pub shape_ids: Vec<String>,
}

/// Stored state of one training shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub id: String,
    pub latent: Vec<f64>,
    pub params: ShapeParams,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub meta: ModelMeta,
    pub layout: Layout,
    pub store: ParamStore,
    pub generic: GenericDecoder,
    pub part: PartDecoder,
    pub encoder: Option<PointEncoder>,
    pub latent_decoder: Option<LatentDecoder>,
    /// Generic latents (disentangled) or shared latents, one per shape.
    pub latents: Vec<ParamId>,
    /// Raw explicit vectors per shape when no encoder provides them.
    pub explicit: Vec<ParamId>,
    /// Explicit parameters per shape as last produced by training.
    pub shapes: Vec<ShapeEntry>,
}

/// Tape handles of every part SDF for one shape.
#[derive(Clone, Debug)]
pub struct PartOutputs {
    pub generic: Var,
    pub aux: Option<Var>,
    /// Analytic SDF of every slot (assisting geometries included).
    pub analytic: Vec<Var>,
    /// Learned SDF of every assisted slot, as `(slot, var)`.
    pub assist: Vec<(usize, Var)>,
    pub full: Var,
}

impl PartOutputs {
    /// Streams in ground-truth part order: generic, geometric, assisted.
    pub fn part_streams(&self, layout: &Layout) -> Vec<Var> {
        let mut out = vec![self.generic];
        out.extend(
            layout
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.role == Role::Geometric)
                .map(|(i, _)| self.analytic[i]),
        );
        out.extend(self.assist.iter().map(|(_, v)| *v));
        out
    }
}

/// Plain values of every part SDF at a set of points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartValues {
    pub generic: Vec<f64>,
    pub aux: Option<Vec<f64>>,
    pub analytic: Vec<Vec<f64>>,
    pub assist: Vec<Vec<f64>>,
    pub full: Vec<f64>,
}

const EVAL_CHUNK: usize = 8192;

impl ModelBundle {
    pub fn new(meta: ModelMeta, latent_std: f64, seed: u64) -> Result<Self> {
        if meta.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("model format {}", meta.format_version)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::from_template(&meta.template, meta.arch.part.assist_dim, meta.arch.learn_rotation)?;
        let mut store = ParamStore::new();
        let (geom_dim, heads) = match meta.variant {
            Variant::Disentangled => (layout.geom_dim(), 2),
            Variant::Shared => (0, 1),
        };
        let generic = GenericDecoder::new(&mut store, &meta.arch.generic, geom_dim, heads, &mut rng)?;
        let part = PartDecoder::new(&mut store, &meta.arch.part, &mut rng)?;
        let bias = meta.arch.sdf_output_bias;
        generic.mlp.set_output_bias(&mut store, &vec![bias; heads]);
        part.mlp.set_output_bias(&mut store, &[bias]);
        let encoder = (meta.variant == Variant::Disentangled && meta.use_point_encoder)
            .then(|| PointEncoder::new(&mut store, &meta.arch.encoder, &layout, &mut rng))
            .transpose()?;
        let latent_decoder = (meta.variant == Variant::Shared)
            .then(|| LatentDecoder::new(&mut store, &meta.arch.latent_decoder, generic.latent_dim, &layout, &mut rng));
        let latent_prefix = match meta.variant {
            Variant::Disentangled => "latent.generic",
            Variant::Shared => "latent.shared",
        };
        let latents = (0..meta.shape_ids.len())
            .map(|i| store.add_normal(format!("{latent_prefix}.{i}"), 1, generic.latent_dim, latent_std, &mut rng))
            .collect();
        let mut explicit = Vec::new();
        if meta.variant == Variant::Disentangled && !meta.use_point_encoder {
            for i in 0..meta.shape_ids.len() {
                let id = store.add(crate::autodiff::ParamBlock::zeros(format!("explicit.{i}"), 1, layout.raw_width()));
                store.get_mut(id).values.copy_from_slice(&layout.template);
                explicit.push(id);
            }
        }
        let template_params = layout.decode_raw(&layout.template)?;
        let shapes = meta
            .shape_ids
            .iter()
            .map(|id| ShapeEntry { id: id.clone(), latent: vec![0.0; generic.latent_dim], params: template_params.clone() })
            .collect();
        Ok(Self { meta, layout, store, generic, part, encoder, latent_decoder, latents, explicit, shapes })
    }

    pub fn variant(&self) -> Variant {
        self.meta.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.generic.latent_dim
    }

    pub fn shape_index(&self, id: &str) -> Option<usize> {
        self.meta.shape_ids.iter().position(|s| s == id)
    }

    /// Raw explicit vector of one shape on the tape.
    pub fn explicit_raw(&self, t: &mut Tape, shape: usize, cloud: Option<&[Vec3]>, trainable: bool) -> Result<Var> {
        match self.meta.variant {
            Variant::Shared => {
                let ld = self.latent_decoder.as_ref().ok_or(Error::WrongVariant { expected: "shared" })?;
                let lv = t.param(&self.store, self.latents[shape], trainable);
                ld.forward(t, &self.store, lv, trainable)
            }
            Variant::Disentangled => match &self.encoder {
                Some(enc) => {
                    let cloud = cloud.ok_or_else(|| Error::InvalidParams("point encoder needs a cloud".into()))?;
                    let c = t.constant(Mat::from_points(cloud));
                    enc.forward(t, &self.store, c, trainable)
                }
                None => Ok(t.param(&self.store, self.explicit[shape], trainable)),
            },
        }
    }

    /// Deterministic encoder input taken from a full cloud.
    pub fn encoder_input<'a>(&self, cloud: &'a [Vec3]) -> &'a [Vec3] {
        &cloud[..self.meta.encoder_points.min(cloud.len())]
    }

    /// Encoder estimate of the explicit parameters from a surface cloud.
    pub fn encode_cloud(&self, cloud: &[Vec3]) -> Result<Vec<f64>> {
        let enc = self.encoder.as_ref().ok_or(Error::WrongVariant { expected: "disentangled with point encoder" })?;
        let mut t = Tape::new();
        let c = t.constant(Mat::from_points(cloud));
        let raw = enc.forward(&mut t, &self.store, c, false)?;
        Ok(t.value(raw).data.clone())
    }

    /// Shared-variant decoding of a latent into a raw explicit vector.
    pub fn decode_shared(&self, lv: &[f64]) -> Result<Vec<f64>> {
        let ld = self.latent_decoder.as_ref().ok_or(Error::WrongVariant { expected: "shared" })?;
        let mut t = Tape::new();
        let v = t.constant(Mat::row_vector(lv));
        let raw = ld.forward(&mut t, &self.store, v, false)?;
        Ok(t.value(raw).data.clone())
    }

    /// Every part SDF at `pts` (K×3) for latent `lv` and explicit handles.
    pub fn forward_parts(
        &self,
        t: &mut Tape,
        lv: Var,
        ev: &ExplicitVars,
        pts: Var,
        trainable: bool,
    ) -> Result<PartOutputs> {
        let geom = match self.meta.variant {
            Variant::Shared => None,
            Variant::Disentangled if self.meta.arch.detach_geom_input => Some(t.detach(ev.geom)),
            Variant::Disentangled => Some(ev.geom),
        };
        let out = self.generic.forward(t, &self.store, lv, geom, pts, trainable)?;
        let (generic, aux) = if self.generic.heads == 2 {
            (t.slice_cols(out, 0, 1), Some(t.slice_cols(out, 1, 1)))
        } else {
            (out, None)
        };
        let mut analytic = Vec::with_capacity(self.layout.slots.len());
        let mut assist = Vec::new();
        for (i, slot) in self.layout.slots.iter().enumerate() {
            let local = t.transform_points(pts, ev.rot[i], ev.trans[i]);
            analytic.push(t.analytic_sdf(slot.kind, local, ev.s[i]));
            if slot.role == Role::Assisted {
                let a = self.layout.assist_index(i).ok_or_else(|| {
                    Error::InvalidParams(format!("assisted slot `{}` has no latent", slot.id))
                })?;
                let v = self.part.forward(t, &self.store, ev.assist[a], ev.s[i], local, trainable)?;
                assist.push((i, v));
            }
        }
        let mut streams = vec![generic];
        for (i, slot) in self.layout.slots.iter().enumerate() {
            if slot.role == Role::Geometric {
                streams.push(analytic[i]);
            }
        }
        streams.extend(assist.iter().map(|(_, v)| *v));
        let full = t.min(&streams)?;
        Ok(PartOutputs { generic, aux, analytic, assist, full })
    }

    /// Part values with frozen weights for a latent and explicit parameters.
    pub fn eval_parts(&self, latent: &[f64], params: &ShapeParams, points: &[Vec3]) -> Result<PartValues> {
        if latent.len() != self.latent_dim() {
            return Err(Error::LengthMismatch { context: "latent", expected: self.latent_dim(), actual: latent.len() });
        }
        let mut out = PartValues {
            aux: (self.generic.heads == 2).then(Vec::new),
            analytic: vec![Vec::with_capacity(points.len()); self.layout.slots.len()],
            assist: vec![Vec::with_capacity(points.len()); self.layout.n_assisted()],
            ..Default::default()
        };
        for chunk in points.chunks(EVAL_CHUNK) {
            let mut t = Tape::new();
            let lv = t.constant(Mat::row_vector(latent));
            let ev = self.layout.constant_vars(&mut t, params)?;
            let pts = t.constant(Mat::from_points(chunk));
            let o = self.forward_parts(&mut t, lv, &ev, pts, false)?;
            out.generic.extend_from_slice(&t.value(o.generic).data);
            if let (Some(dst), Some(v)) = (out.aux.as_mut(), o.aux) {
                dst.extend_from_slice(&t.value(v).data);
            }
            for (dst, v) in out.analytic.iter_mut().zip(&o.analytic) {
                dst.extend_from_slice(&t.value(*v).data);
            }
            for (dst, (_, v)) in out.assist.iter_mut().zip(&o.assist) {
                dst.extend_from_slice(&t.value(*v).data);
            }
            out.full.extend_from_slice(&t.value(o.full).data);
        }
        Ok(out)
    }

    pub fn eval_sdf(&self, latent: &[f64], params: &ShapeParams, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(self.eval_parts(latent, params, points)?.full)
    }

    /// Copies the current latent tables and explicit parameters into
    /// [`ModelBundle::shapes`]. `clouds` feed the encoder when present.
    pub fn refresh_shapes(&mut self, clouds: Option<&[Vec<Vec3>]>) -> Result<()> {
        for i in 0..self.meta.shape_ids.len() {
            let latent = self.store.get(self.latents[i]).values.clone();
            let raw = match (self.meta.variant, &self.encoder) {
                (Variant::Shared, _) => self.decode_shared(&latent)?,
                (Variant::Disentangled, Some(_)) => {
                    let c = clouds.ok_or_else(|| Error::InvalidParams("encoder needs clouds".into()))?;
                    self.encode_cloud(self.encoder_input(&c[i]))?
                }
                (Variant::Disentangled, None) => self.store.get(self.explicit[i]).values.clone(),
            };
            self.shapes[i] = ShapeEntry {
                id: self.meta.shape_ids[i].clone(),
                latent,
                params: self.layout.decode_raw(&raw)?,
            };
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile { meta: self.meta.clone(), shapes: self.shapes.clone(), checkpoint: self.store.to_checkpoint() };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut m = Self::new(file.meta, 0.0, 0)?;
        m.store.load_checkpoint(&file.checkpoint)?;
        if file.shapes.len() != m.meta.shape_ids.len() {
            return Err(Error::Format("shape table does not match shape ids".into()));
        }
        m.shapes = file.shapes;
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    meta: ModelMeta,
    shapes: Vec<ShapeEntry>,
    checkpoint: Checkpoint,
}
