//! The decoders and encoders of the hybrid model, built on [`crate::autodiff`].

pub mod layout;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub use layout::{inverse_softplus, softplus, ExplicitVars, Layout, PrimParams, ShapeParams, Slot};

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), fan_out, fan_in, fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), 1, fan_out, fan_in, rng);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let w = t.param(store, self.w, trainable);
        let b = t.param(store, self.b, trainable);
        t.dense(x, w, Some(b))
    }
}

/// ReLU multilayer perceptron with a linear last layer and an optional
/// concatenation of the network input before one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub skip_layer: Option<usize>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        skip_layer: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for (i, &out) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
            let fan_in = if skip_layer == Some(i) { width + input } else { width };
            layers.push(Dense::new(store, &format!("{name}.l{i}"), fan_in, out, rng));
            width = out;
        }
        Self { layers, skip_layer }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if self.skip_layer == Some(i) && i > 0 {
                h = t.concat(&[h, x])?;
            }
            h = layer.forward(t, store, h, trainable)?;
            if i < last {
                h = t.relu(h);
            }
        }
        Ok(h)
    }

    /// Sets the last bias, so an untrained network starts at `values`.
    pub fn set_output_bias(&self, store: &mut ParamStore, values: &[f64]) {
        let b = store.get_mut(self.layers[self.layers.len() - 1].b);
        b.values.copy_from_slice(values);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Dense layers including the output layer.
    pub num_layers: usize,
    pub hidden_width: usize,
    pub skip_layer: Option<usize>,
    /// Latent plus geometry width; the query point is added on top.
    pub input_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { num_layers: 8, hidden_width: 128, skip_layer: Some(4), input_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartDecoderConfig {
    pub num_layers: usize,
    pub hidden_width: usize,
    pub assist_dim: usize,
}

impl Default for PartDecoderConfig {
    fn default() -> Self {
        Self { num_layers: 3, hidden_width: 64, assist_dim: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub point_widths: Vec<usize>,
    pub head_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { point_widths: vec![64, 128, 256], head_width: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDecoderConfig {
    pub trunk_width: usize,
    pub branch_width: usize,
}

impl Default for LatentDecoderConfig {
    fn default() -> Self {
        Self { trunk_width: 128, branch_width: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default)]
    pub generic: DecoderConfig,
    #[serde(default)]
    pub part: PartDecoderConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub latent_decoder: LatentDecoderConfig,
    #[serde(default)]
    pub learn_rotation: bool,
    /// Condition the generic decoder on the explicit parameters without
    /// back-propagating into them.
    #[serde(default)]
    pub detach_geom_input: bool,
    /// Initial output bias of the learned SDF heads.
    #[serde(default)]
    pub sdf_output_bias: f64,
}

/// Trunk shared by the generic SDF head and the auxiliary geometry head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericDecoder {
    pub mlp: Mlp,
    pub latent_dim: usize,
    pub geom_dim: usize,
    pub heads: usize,
}

impl GenericDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        geom_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.input_size <= geom_dim {
            return Err(Error::Config(format!(
                "decoder input size {} leaves no room for a latent next to {} geometric inputs",
                cfg.input_size, geom_dim
            )));
        }
        if cfg.num_layers < 2 {
            return Err(Error::Config("generic decoder needs at least 2 layers".into()));
        }
        let hidden = vec![cfg.hidden_width; cfg.num_layers - 1];
        let mlp = Mlp::new(store, "generic", cfg.input_size + 3, &hidden, heads, cfg.skip_layer, rng);
        Ok(Self { mlp, latent_dim: cfg.input_size - geom_dim, geom_dim, heads })
    }

    /// `lv` is 1×latent_dim, `geom` 1×geom_dim (or `None` when geom_dim is
    /// zero) and `pts` K×3. Returns K×heads.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        lv: Var,
        geom: Option<Var>,
        pts: Var,
        trainable: bool,
    ) -> Result<Var> {
        let k = t.value(pts).rows;
        let mut parts = vec![t.broadcast_rows(lv, k)];
        if let Some(g) = geom {
            if t.value(g).cols > 0 {
                parts.push(t.broadcast_rows(g, k));
            }
        }
        parts.push(pts);
        let x = t.concat(&parts)?;
        if t.value(x).cols != self.mlp.input_width() {
            return Err(Error::Dimension {
                context: "generic decoder input",
                detail: format!("{} vs {}", t.value(x).cols, self.mlp.input_width()),
            });
        }
        self.mlp.forward(t, store, x, trainable)
    }
}

/// Small decoder for geometry-assisted parts. Shape parameters are zero
/// padded to three entries so one network serves every primitive kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartDecoder {
    pub mlp: Mlp,
    pub assist_dim: usize,
}

pub const PART_PARAM_WIDTH: usize = 3;

impl PartDecoder {
    pub fn new(store: &mut ParamStore, cfg: &PartDecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.num_layers < 1 {
            return Err(Error::Config("part decoder needs at least 1 layer".into()));
        }
        let hidden = vec![cfg.hidden_width; cfg.num_layers - 1];
        let input = cfg.assist_dim + PART_PARAM_WIDTH + 3;
        let mlp = Mlp::new(store, "part", input, &hidden, 1, None, rng);
        Ok(Self { mlp, assist_dim: cfg.assist_dim })
    }

    /// `lv` 1×assist_dim, `s` 1×n (n ≤ 3), `p_local` K×3 already in the
    /// primitive frame. Returns K×1.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        lv: Var,
        s: Var,
        p_local: Var,
        trainable: bool,
    ) -> Result<Var> {
        let k = t.value(p_local).rows;
        let n = t.value(s).cols;
        if n > PART_PARAM_WIDTH {
            return Err(Error::Dimension {
                context: "part decoder shape parameters",
                detail: format!("{n} > {PART_PARAM_WIDTH}"),
            });
        }
        let mut parts = vec![t.broadcast_rows(lv, k), t.broadcast_rows(s, k)];
        if n < PART_PARAM_WIDTH {
            parts.push(t.constant(Mat::zeros(k, PART_PARAM_WIDTH - n)));
        }
        parts.push(p_local);
        let x = t.concat(&parts)?;
        if t.value(x).cols != self.mlp.input_width() {
            return Err(Error::Dimension {
                context: "part decoder input",
                detail: format!("{} vs {}", t.value(x).cols, self.mlp.input_width()),
            });
        }
        self.mlp.forward(t, store, x, trainable)
    }
}

/// PointNet-style encoder: per-point MLP with the coordinates concatenated
/// before every hidden block, channel max-pool, one head per output group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEncoder {
    pub point_layers: Vec<Dense>,
    pub heads: Vec<Mlp>,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, layout: &Layout, rng: &mut impl Rng) -> Result<Self> {
        if cfg.point_widths.is_empty() {
            return Err(Error::Config("point encoder needs at least one point layer".into()));
        }
        let mut point_layers = Vec::new();
        let mut width = 3;
        for (i, &w) in cfg.point_widths.iter().enumerate() {
            let fan_in = if i == 0 { 3 } else { width + 3 };
            point_layers.push(Dense::new(store, &format!("encoder.p{i}"), fan_in, w, rng));
            width = w;
        }
        let heads = group_heads(store, "encoder.head", width, cfg.head_width, layout, rng);
        Ok(Self { point_layers, heads })
    }

    /// Cloud N×3 to a 1×raw_width explicit vector.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, cloud: Var, trainable: bool) -> Result<Var> {
        if t.value(cloud).rows == 0 {
            return Err(Error::InvalidParams("point encoder received an empty cloud".into()));
        }
        let mut h = cloud;
        for (i, layer) in self.point_layers.iter().enumerate() {
            if i > 0 {
                h = t.concat(&[h, cloud])?;
            }
            h = layer.forward(t, store, h, trainable)?;
            h = t.relu(h);
        }
        let feat = t.max_pool_rows(h);
        run_heads(&self.heads, t, store, feat, trainable)
    }
}

/// Shared-variant decoder from one latent to the explicit vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDecoder {
    pub trunk: Dense,
    pub heads: Vec<Mlp>,
    pub latent_dim: usize,
}

impl LatentDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &LatentDecoderConfig,
        latent_dim: usize,
        layout: &Layout,
        rng: &mut impl Rng,
    ) -> Self {
        let trunk = Dense::new(store, "latent_decoder.trunk", latent_dim, cfg.trunk_width, rng);
        let heads = group_heads(store, "latent_decoder.head", cfg.trunk_width, cfg.branch_width, layout, rng);
        Self { trunk, heads, latent_dim }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, lv: Var, trainable: bool) -> Result<Var> {
        let h = self.trunk.forward(t, store, lv, trainable)?;
        let h = t.relu(h);
        run_heads(&self.heads, t, store, h, trainable)
    }
}

fn group_heads(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    hidden: usize,
    layout: &Layout,
    rng: &mut impl Rng,
) -> Vec<Mlp> {
    let mut off = 0;
    layout
        .group_widths()
        .into_iter()
        .enumerate()
        .map(|(g, w)| {
            let head = Mlp::new(store, &format!("{name}{g}"), input, &[hidden], w, None, rng);
            head.set_output_bias(store, &layout.template[off..off + w]);
            off += w;
            head
        })
        .collect()
}

fn run_heads(heads: &[Mlp], t: &mut Tape, store: &ParamStore, feat: Var, trainable: bool) -> Result<Var> {
    let outs = heads
        .iter()
        .map(|h| h.forward(t, store, feat, trainable))
        .collect::<Result<Vec<_>>>()?;
    t.concat(&outs)
}
