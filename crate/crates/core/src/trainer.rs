//! Auto-decoder training, test-time reconstruction and latent-space
//! manipulation.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{adam_step, AdamState, Mat, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{tape as lt, LossComponents, LossWeights};
use crate::model::{ModelBundle, ModelMeta, Variant, MODEL_FORMAT_VERSION};
use crate::nets::{ArchConfig, ShapeParams};
use crate::sdf::{GeomParams, Vec3};
use crate::shapegen::{Dataset, SampleSet, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub generic_decoder: f64,
    pub latents: f64,
    pub point_encoder: f64,
    pub part_decoder: f64,
    pub latent_decoder: f64,
    pub shared_latents: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            generic_decoder: 5e-4,
            latents: 1e-3,
            point_encoder: 2e-4,
            part_decoder: 2e-4,
            latent_decoder: 2e-4,
            shared_latents: 5e-3,
        }
    }
}

/// Loss terms and modules switched off for ablations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub disable_lrp: bool,
    pub disable_lga: bool,
    pub disable_lic: bool,
    pub disable_lcs: bool,
    pub disable_point_encoder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub iterations: usize,
    pub samples_per_iteration: usize,
    pub lr_latent: f64,
    pub lr_params: f64,
    /// Also refine the explicit parameters, not only the latent.
    pub optimize_params: bool,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { iterations: 800, samples_per_iteration: 8000, lr_latent: 5e-3, lr_params: 5e-4, optimize_params: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    /// Query samples per shape per iteration.
    pub samples_per_shape: usize,
    /// Cloud points fed to the encoder per iteration.
    pub encoder_points: usize,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub arch: ArchConfig,
    pub latent_init_std: f64,
    pub seed: u64,
    /// Write `model.json` every this many epochs when an output directory is
    /// given.
    pub checkpoint_every: Option<usize>,
    pub infer: InferConfig,
    /// Fraction of epochs during which the assist loss only trains the
    /// assist decoder; afterwards it also moves the assisting geometry.
    pub ga_warmup: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Disentangled,
            epochs: 2000,
            batch_size: 32,
            samples_per_shape: 2000,
            encoder_points: 2048,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            arch: ArchConfig::default(),
            latent_init_std: 0.01,
            seed: 0,
            checkpoint_every: None,
            infer: InferConfig::default(),
            ga_warmup: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.samples_per_shape == 0 || self.encoder_points == 0 {
            return Err(Error::Config("batch size and sample counts must be positive".into()));
        }
        let lrs = [
            self.lr.generic_decoder,
            self.lr.latents,
            self.lr.point_encoder,
            self.lr.part_decoder,
            self.lr.latent_decoder,
            self.lr.shared_latents,
            self.infer.lr_latent,
            self.infer.lr_params,
        ];
        if !(0.0..=1.0).contains(&self.ga_warmup) {
            return Err(Error::Config(format!("ga_warmup {} outside [0, 1]", self.ga_warmup)));
        }
        if lrs.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean unweighted loss components over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total: f64,
    pub components: LossComponents,
    pub seconds: f64,
}

pub struct TrainOutput {
    pub model: ModelBundle,
    pub history: Vec<EpochMetrics>,
}

fn lr_for(name: &str, lr: &LearningRates) -> f64 {
    if name.starts_with("generic.") {
        lr.generic_decoder
    } else if name.starts_with("part.") {
        lr.part_decoder
    } else if name.starts_with("encoder.") {
        lr.point_encoder
    } else if name.starts_with("latent_decoder.") {
        lr.latent_decoder
    } else if name.starts_with("latent.shared.") {
        lr.shared_latents
    } else {
        lr.latents
    }
}

/// Ground truth handed to one shape's loss.
struct ShapeBatch<'a> {
    index: usize,
    points: Vec<Vec3>,
    full: Vec<f64>,
    parts: Option<Vec<Vec<f64>>>,
    cloud: Option<&'a [Vec3]>,
}

fn subsample(samples: &SampleSet, idx: &[usize], with_parts: bool) -> (Vec<Vec3>, Vec<f64>, Option<Vec<Vec<f64>>>) {
    let points = idx.iter().map(|&i| samples.points[i]).collect();
    let full = idx.iter().map(|&i| samples.sdf_full[i]).collect();
    let parts = if with_parts {
        samples.parts.as_ref().map(|ps| ps.iter().map(|s| idx.iter().map(|&i| s[i]).collect()).collect())
    } else {
        None
    };
    (points, full, parts)
}

/// Records every loss term of one shape and returns its weighted total.
fn shape_loss(
    model: &ModelBundle,
    t: &mut Tape,
    b: &ShapeBatch,
    ablation: &Ablation,
    two_sided_ga: bool,
    comps: &mut Vec<(usize, Var)>,
) -> Result<Var> {
    let w = &model.meta.weights;
    let lv = t.param(&model.store, model.latents[b.index], true);
    let raw = model.explicit_raw(t, b.index, b.cloud, true)?;
    let ev = model.layout.decode_vars(t, raw)?;
    let pts = t.constant(Mat::from_points(&b.points));
    let out = model.forward_parts(t, lv, &ev, pts, true)?;
    let mut terms = Vec::new();
    let mut push = |t: &mut Tape, slot: usize, v: Var, weight: f64| -> Result<()> {
        comps.push((slot, v));
        terms.push(if weight == 1.0 { v } else { t.scale(v, weight) });
        Ok(())
    };
    let full = lt::full_recon(t, out.full, &b.full, w.delta, w.clamp_mode)?;
    push(t, 0, full, 1.0)?;
    if let (Some(parts), false) = (&b.parts, ablation.disable_lrp) {
        let streams = out.part_streams(&model.layout);
        let gts: Vec<&[f64]> = parts.iter().map(Vec::as_slice).collect();
        if let Some(v) = lt::part_recon(t, &streams, &gts, w.gamma, w.delta, w.clamp_mode)? {
            push(t, 1, v, 1.0)?;
        }
    }
    if !ablation.disable_lga {
        let assist: Vec<Var> = out.assist.iter().map(|(_, v)| *v).collect();
        let geom: Vec<Var> = out.assist.iter().map(|(i, _)| out.analytic[*i]).collect();
        if let Some(v) = lt::geometry_assist(t, &assist, &geom, w.delta, w.clamp_mode, two_sided_ga)? {
            push(t, 2, v, w.lambda_ga)?;
        }
    }
    if !ablation.disable_lic {
        let streams = out.part_streams(&model.layout);
        if let Some(v) = lt::intersection(t, &streams)? {
            push(t, 3, v, w.lambda_ic)?;
        }
    }
    if let (Some(aux), false) = (out.aux, ablation.disable_lcs) {
        if let Some(v) = lt::consistency(t, aux, &out.analytic, w.delta, w.clamp_mode)? {
            push(t, 4, v, 1.0)?;
        }
    }
    let mut lats = vec![lv];
    lats.extend(ev.assist.iter().copied());
    if let Some(v) = lt::regularization(t, &lats)? {
        push(t, 5, v, w.lambda_reg)?;
    }
    lt::sum_all(t, &terms)?.ok_or(Error::EmptyTape)
}

fn set_component(c: &mut LossComponents, slot: usize, v: f64) {
    match slot {
        0 => c.full += v,
        1 => c.part += v,
        2 => c.assist += v,
        3 => c.intersection += v,
        4 => c.consistency += v,
        _ => c.reg += v,
    }
}

fn build_meta(data: &Dataset, cfg: &TrainConfig, train_idx: &[usize]) -> ModelMeta {
    ModelMeta {
        format_version: MODEL_FORMAT_VERSION,
        variant: cfg.variant,
        arch: cfg.arch.clone(),
        weights: cfg.weights.clone(),
        template: data.manifest.template.clone(),
        use_point_encoder: !cfg.ablation.disable_point_encoder,
        encoder_points: cfg.encoder_points,
        shape_ids: train_idx.iter().map(|&i| data.records[i].id.clone()).collect(),
    }
}

fn write_metrics_header(out: &mut impl Write) -> Result<()> {
    writeln!(out, "epoch,total,full,part,assist,intersection,consistency,reg,seconds")?;
    Ok(())
}

fn write_metrics_row(out: &mut impl Write, m: &EpochMetrics) -> Result<()> {
    let c = &m.components;
    writeln!(
        out,
        "{},{},{},{},{},{},{},{},{:.3}",
        m.epoch, m.total, c.full, c.part, c.assist, c.intersection, c.consistency, c.reg, m.seconds
    )?;
    Ok(())
}

/// Trains on the train split. With `out_dir`, writes `metrics.csv`,
/// periodic and final `model.json`, and `last_good.json` on divergence.
pub fn train(data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training shapes".into()));
    }
    let mut model = ModelBundle::new(build_meta(data, cfg, &train_idx), cfg.latent_init_std, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1e);
    let mut adam: Vec<AdamState> =
        model.store.blocks().iter().map(|b| AdamState::for_block(b, lr_for(&b.name, &cfg.lr))).collect();
    let per_shape: Vec<ParamId> = model.latents.iter().chain(&model.explicit).copied().collect();
    let shared_blocks: Vec<ParamId> = model.store.ids().filter(|id| !per_shape.contains(id)).collect();

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
            write_metrics_header(&mut f)?;
            Some(f)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.store.clone();
    let start = Instant::now();
    let n = train_idx.len();
    let ga_start = (cfg.ga_warmup * cfg.epochs as f64).ceil() as usize;
    for epoch in 0..cfg.epochs {
        let two_sided_ga = epoch >= ga_start;
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut comps = LossComponents::default();
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut t = Tape::new();
            let mut recorded = Vec::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &s in batch {
                let d = train_idx[s];
                let samples = &data.samples[d];
                let k = cfg.samples_per_shape.min(samples.len());
                let idx = index::sample(&mut rng, samples.len(), k).into_vec();
                let labelled = data.records[d].has_part_labels;
                let (points, full, parts) = subsample(samples, &idx, labelled);
                let cloud_vec: Option<Vec<Vec3>> = model.encoder.as_ref().map(|_| {
                    let c = &data.clouds[d];
                    let m = cfg.encoder_points.min(c.len());
                    index::sample(&mut rng, c.len(), m).into_iter().map(|i| c[i]).collect()
                });
                let b = ShapeBatch { index: s, points, full, parts, cloud: cloud_vec.as_deref() };
                losses.push(shape_loss(&model, &mut t, &b, &cfg.ablation, two_sided_ga, &mut recorded)?);
            }
            let sum = lt::sum_all(&mut t, &losses)?.ok_or(Error::EmptyTape)?;
            let loss = t.scale(sum, 1.0 / batch.len() as f64);
            let value = t.scalar(loss);
            if !value.is_finite() {
                if let Some(dir) = out_dir {
                    let mut good = model.clone();
                    good.store = last_good;
                    good.save(&dir.join("last_good.json"))?;
                }
                return Err(Error::NonFinite { context: format!("training loss at epoch {epoch}") });
            }
            for (slot, v) in &recorded {
                set_component(&mut comps, *slot, t.scalar(*v));
            }
            total += value * batch.len() as f64;
            model.store.zero_grads();
            t.backward(loss)?;
            t.accumulate_param_grads(&mut model.store);
            let stepped = shared_blocks.iter().copied().chain(batch.iter().flat_map(|&s| {
                std::iter::once(model.latents[s]).chain(model.explicit.get(s).copied())
            }));
            for id in stepped.collect::<Vec<_>>() {
                adam_step(model.store.get_mut(id), &mut adam[id.0])?;
            }
        }
        comps.scale(1.0 / n as f64);
        let m = EpochMetrics { epoch, total: total / n as f64, components: comps, seconds: start.elapsed().as_secs_f64() };
        if let Some(f) = csv.as_mut() {
            write_metrics_row(f, &m)?;
            f.flush()?;
        }
        history.push(m);
        last_good = model.store.clone();
        if let (Some(dir), Some(every)) = (out_dir, cfg.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                model.refresh_shapes(Some(&train_clouds(data, &train_idx)))?;
                model.save(&dir.join("model.json"))?;
            }
        }
    }
    model.refresh_shapes(Some(&train_clouds(data, &train_idx)))?;
    if let Some(dir) = out_dir {
        model.save(&dir.join("model.json"))?;
    }
    Ok(TrainOutput { model, history })
}

fn train_clouds(data: &Dataset, idx: &[usize]) -> Vec<Vec<Vec3>> {
    idx.iter().map(|&i| data.clouds[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconResult {
    pub latent: Vec<f64>,
    pub params: ShapeParams,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<f64>,
}

/// Full-shape objective plus latent prior on a fixed evaluation subset.
fn recon_objective(
    model: &ModelBundle,
    t: &mut Tape,
    lv: Var,
    raw: Var,
    points: &[Vec3],
    gt: &[f64],
) -> Result<Var> {
    let w = &model.meta.weights;
    let ev = model.layout.decode_vars(t, raw)?;
    let pts = t.constant(Mat::from_points(points));
    let out = model.forward_parts(t, lv, &ev, pts, false)?;
    let full = lt::full_recon(t, out.full, gt, w.delta, w.clamp_mode)?;
    let mut lats = vec![lv];
    lats.extend(ev.assist.iter().copied());
    match lt::regularization(t, &lats)? {
        Some(r) => {
            let r = t.scale(r, w.lambda_reg);
            t.add(full, r)
        }
        None => Ok(full),
    }
}

/// Fits a latent (and, in the disentangled variant, the explicit
/// parameters) to an unseen shape's samples with all networks frozen.
/// With zero iterations the encoder estimate is returned unchanged.
pub fn reconstruct(model: &ModelBundle, samples: &SampleSet, cloud: Option<&[Vec3]>, cfg: &InferConfig) -> Result<ReconResult> {
    if samples.is_empty() {
        return Err(Error::InvalidParams("no samples to reconstruct from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.samples_per_iteration.max(1);
    let eval_idx: Vec<usize> = (0..k.min(samples.len())).map(|_| rng.gen_range(0..samples.len())).collect();
    let (eval_pts, eval_gt, _) = subsample(samples, &eval_idx, false);

    let latent_dim = model.latent_dim();
    let mut lv = vec![0.0; latent_dim];
    let shared = model.variant() == Variant::Shared;
    let mut raw = match (&model.encoder, shared) {
        (_, true) => Vec::new(),
        (Some(_), false) => {
            let c = cloud.ok_or_else(|| Error::InvalidParams("reconstruction needs a point cloud".into()))?;
            model.encode_cloud(model.encoder_input(c))?
        }
        (None, false) => model.layout.template.clone(),
    };
    let mut lv_state = AdamState::new(latent_dim, cfg.lr_latent);
    let mut raw_state = AdamState::new(raw.len(), cfg.lr_params);

    let evaluate = |lv: &[f64], raw: &[f64], pts: &[Vec3], gt: &[f64], grads: bool| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut t = Tape::new();
        let l = t.leaf(Mat::row_vector(lv));
        let (r, raw_leaf) = if shared {
            let ld = model.latent_decoder.as_ref().ok_or(Error::WrongVariant { expected: "shared" })?;
            (ld.forward(&mut t, &model.store, l, false)?, None)
        } else {
            let r = t.leaf(Mat::row_vector(raw));
            (r, Some(r))
        };
        let loss = recon_objective(model, &mut t, l, r, pts, gt)?;
        let value = t.scalar(loss);
        if !grads {
            return Ok((value, Vec::new(), Vec::new()));
        }
        t.backward(loss)?;
        let gl = t.grad(l).map(|g| g.data.clone()).unwrap_or_else(|| vec![0.0; lv.len()]);
        let gr = raw_leaf
            .and_then(|r| t.grad(r).map(|g| g.data.clone()))
            .unwrap_or_else(|| vec![0.0; raw.len()]);
        Ok((value, gl, gr))
    };

    let initial_loss = evaluate(&lv, &raw, &eval_pts, &eval_gt, false)?.0;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut lv_block = crate::autodiff::ParamBlock::zeros("lv", 1, latent_dim);
    let mut raw_block = crate::autodiff::ParamBlock::zeros("raw", 1, raw.len());
    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..samples.len())).collect();
        let (pts, gt, _) = subsample(samples, &idx, false);
        let (value, gl, gr) = evaluate(&lv, &raw, &pts, &gt, true)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { context: format!("reconstruction loss at iteration {it}") });
        }
        history.push(value);
        lv_block.values.copy_from_slice(&lv);
        lv_block.grads = gl;
        adam_step(&mut lv_block, &mut lv_state)?;
        lv.copy_from_slice(&lv_block.values);
        if cfg.optimize_params && !shared {
            raw_block.values.copy_from_slice(&raw);
            raw_block.grads = gr;
            adam_step(&mut raw_block, &mut raw_state)?;
            raw.copy_from_slice(&raw_block.values);
        }
    }
    let final_loss = evaluate(&lv, &raw, &eval_pts, &eval_gt, false)?.0;
    if shared {
        raw = model.decode_shared(&lv)?;
    }
    Ok(ReconResult { params: model.layout.decode_raw(&raw)?, latent: lv, initial_loss, final_loss, history })
}

/// Replaces named explicit values; the latent is left untouched.
pub fn manipulate_direct(model: &ModelBundle, params: &ShapeParams, edits: &[(String, f64)]) -> Result<ShapeParams> {
    let mut v = model.layout.explicit_vector(params);
    for (name, value) in edits {
        let i = model.layout.param_index(name).ok_or_else(|| Error::UnknownKey(name.clone()))?;
        if !value.is_finite() {
            return Err(Error::InvalidParams(format!("edit value for `{name}` is not finite")));
        }
        v[i] = *value;
    }
    let out = model.layout.from_explicit_vector(&v)?;
    for (slot, p) in model.layout.slots.iter().zip(&out.prims) {
        GeomParams { kind: slot.kind, values: p.params.clone() }.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManipulateConfig {
    pub steps: usize,
    pub lr: f64,
    pub reg_weight: f64,
}

impl Default for ManipulateConfig {
    fn default() -> Self {
        Self { steps: 3000, lr: 5e-5, reg_weight: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulateResult {
    pub latent: Vec<f64>,
    pub params: ShapeParams,
    pub history: Vec<f64>,
}

/// Shared variant: moves the latent so the decoded explicit entries at
/// `targets` reach the requested values.
pub fn manipulate_shared(
    model: &ModelBundle,
    latent: &[f64],
    targets: &[(usize, f64)],
    cfg: &ManipulateConfig,
) -> Result<ManipulateResult> {
    let ld = model.latent_decoder.as_ref().ok_or(Error::WrongVariant { expected: "shared" })?;
    if latent.len() != model.latent_dim() {
        return Err(Error::LengthMismatch { context: "latent", expected: model.latent_dim(), actual: latent.len() });
    }
    let width = model.layout.param_names().len();
    for &(i, v) in targets {
        if i >= width {
            return Err(Error::OutOfRange { index: i, len: width });
        }
        if !v.is_finite() {
            return Err(Error::InvalidParams(format!("target for entry {i} is not finite")));
        }
    }
    let mut block = crate::autodiff::ParamBlock::zeros("lv", 1, latent.len());
    block.values.copy_from_slice(latent);
    let mut state = AdamState::new(latent.len(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut t = Tape::new();
        let lv = t.leaf(block.as_mat());
        let raw = ld.forward(&mut t, &model.store, lv, false)?;
        let ev = model.layout.decode_vars(&mut t, raw)?;
        let mut parts = vec![ev.geom];
        parts.extend(ev.assist.iter().copied());
        let explicit = t.concat(&parts)?;
        let mut terms = Vec::with_capacity(targets.len() + 1);
        for &(i, v) in targets {
            let e = t.slice_cols(explicit, i, 1);
            let target = t.constant(Mat::scalar(v));
            let d = t.sub(e, target)?;
            terms.push(t.abs(d));
        }
        let r = t.sum_squares(lv);
        terms.push(t.scale(r, cfg.reg_weight));
        let loss = lt::sum_all(&mut t, &terms)?.ok_or(Error::EmptyTape)?;
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { context: "latent manipulation".into() });
        }
        history.push(value);
        t.backward(loss)?;
        block.grads = t.grad(lv).map(|g| g.data.clone()).unwrap_or_else(|| vec![0.0; latent.len()]);
        adam_step(&mut block, &mut state)?;
    }
    let params = model.layout.decode_raw(&model.decode_shared(&block.values)?)?;
    Ok(ManipulateResult { latent: block.values, params, history })
}
