//! Finite-difference checks of every network and loss term, one seed at a
//! time. Each check returns its reports labelled by case.

use partsdf::autodiff::{Mat, ParamStore, Tape, Var};
use partsdf::losses::{tape as lt, ClampMode};
use partsdf::model::{ModelBundle, Variant};
use partsdf::nets::{
    DecoderConfig, EncoderConfig, GenericDecoder, LatentDecoder, LatentDecoderConfig, Layout, Mlp, PartDecoder,
    PartDecoderConfig, PointEncoder,
};
use partsdf::sdf::Vec3;
use partsdf::shapegen::FamilyParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, own_store, random_in_ball, random_mat, small_model, GradReport};

pub const SEEDS: u64 = 10;

pub type Check = fn(u64) -> Vec<(String, GradReport)>;

pub const CHECKS: &[(&str, Check)] = &[
    ("mlp", mlp),
    ("generic decoder", generic_decoder),
    ("part decoder", part_decoder),
    ("point encoder", point_encoder),
    ("latent decoder", latent_decoder),
    ("model with point encoder", model_with_encoder),
    ("auto-decoded model with rotations", model_auto_decoded),
    ("shared-latent model", model_shared),
    ("loss terms", loss_terms),
    ("stop-gradient loss terms", stop_gradient_terms),
];

fn one(name: &str, r: GradReport) -> Vec<(String, GradReport)> {
    vec![(name.to_string(), r)]
}

fn mean_square(t: &mut Tape, x: Var) -> Var {
    let n = t.value(x).len() as f64;
    let s = t.sum_squares(x);
    t.scale(s, 1.0 / n)
}

fn mixer_layout(assist_dim: usize) -> Layout {
    let template = FamilyParams::from_name("mixer").unwrap().template().unwrap();
    Layout::from_template(&template, assist_dim, true).unwrap()
}

pub fn mlp(seed: u64) -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "net", 4, &[7], 2, None, &mut rng);
    let x = random_mat(5, 4, 1.0, &mut rng);
    one("mlp", gradcheck(&mut store, own_store, &[x], |t, s, v, tr| {
        let y = mlp.forward(t, s, v[0], tr).unwrap();
        mean_square(t, y)
    }))
}

pub fn generic_decoder(seed: u64) -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = DecoderConfig { num_layers: 4, hidden_width: 10, skip_layer: Some(2), input_size: 9 };
    let dec = GenericDecoder::new(&mut store, &cfg, 4, 2, &mut rng).unwrap();
    let leaves = [random_mat(1, 5, 0.5, &mut rng), random_mat(1, 4, 0.5, &mut rng), random_mat(6, 3, 0.8, &mut rng)];
    one("generic decoder", gradcheck(&mut store, own_store, &leaves, |t, s, v, tr| {
        let y = dec.forward(t, s, v[0], Some(v[1]), v[2], tr).unwrap();
        mean_square(t, y)
    }))
}

pub fn part_decoder(seed: u64) -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = PartDecoderConfig { num_layers: 3, hidden_width: 8, assist_dim: 3 };
    let dec = PartDecoder::new(&mut store, &cfg, &mut rng).unwrap();
    let width = 1 + seed as usize % 3;
    let leaves = [random_mat(1, 3, 0.5, &mut rng), random_mat(1, width, 0.5, &mut rng), random_mat(6, 3, 0.8, &mut rng)];
    one("part decoder", gradcheck(&mut store, own_store, &leaves, |t, s, v, tr| {
        let y = dec.forward(t, s, v[0], v[1], v[2], tr).unwrap();
        mean_square(t, y)
    }))
}

pub fn point_encoder(seed: u64) -> Vec<(String, GradReport)> {
    let layout = mixer_layout(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { point_widths: vec![6, 8], head_width: 5 };
    let enc = PointEncoder::new(&mut store, &cfg, &layout, &mut rng).unwrap();
    let leaves = [random_mat(12, 3, 0.9, &mut rng)];
    one("point encoder", gradcheck(&mut store, own_store, &leaves, |t, s, v, tr| {
        let y = enc.forward(t, s, v[0], tr).unwrap();
        mean_square(t, y)
    }))
}

pub fn latent_decoder(seed: u64) -> Vec<(String, GradReport)> {
    let layout = mixer_layout(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = LatentDecoderConfig { trunk_width: 8, branch_width: 5 };
    let dec = LatentDecoder::new(&mut store, &cfg, 6, &layout, &mut rng);
    let leaves = [random_mat(1, 6, 1.0, &mut rng)];
    one("latent decoder", gradcheck(&mut store, own_store, &leaves, |t, s, v, tr| {
        let y = dec.forward(t, s, v[0], tr).unwrap();
        mean_square(t, y)
    }))
}

struct Targets {
    cloud: Vec<Vec3>,
    full: Vec<f64>,
    parts: Vec<Vec<f64>>,
}

fn targets(model: &ModelBundle, k: usize, rng: &mut impl Rng) -> Targets {
    let streams = 1 + model.layout.n_geometric() + model.layout.n_assisted();
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect::<Vec<f64>>();
    let full = v(k);
    let parts = (0..streams).map(|_| v(k)).collect();
    let cloud = (0..16).map(|_| random_in_ball(rng)).collect();
    Targets { cloud, full, parts }
}

/// Training terms on one shape, with query points as the leaf. The
/// assistance and consistency terms stop the gradient into their geometry
/// targets, so finite differences of the whole model cannot see them; they
/// are checked on their own.
fn model_objective(t: &mut Tape, m: &ModelBundle, pts: Var, trainable: bool, tg: &Targets) -> Var {
    let w = &m.meta.weights;
    let lv = t.param(&m.store, m.latents[0], trainable);
    let raw = m.explicit_raw(t, 0, Some(&tg.cloud), trainable).unwrap();
    let ev = m.layout.decode_vars(t, raw).unwrap();
    let out = m.forward_parts(t, lv, &ev, pts, trainable).unwrap();
    let mut terms = vec![lt::full_recon(t, out.full, &tg.full, w.delta, w.clamp_mode).unwrap()];
    let streams = out.part_streams(&m.layout);
    let gts: Vec<&[f64]> = tg.parts.iter().map(Vec::as_slice).collect();
    terms.extend(lt::part_recon(t, &streams, &gts, 0.75, w.delta, w.clamp_mode).unwrap());
    if let Some(v) = lt::intersection(t, &streams).unwrap() {
        terms.push(t.scale(v, w.lambda_ic));
    }
    let mut lats = vec![lv];
    lats.extend(ev.assist.iter().copied());
    let r = lt::regularization(t, &lats).unwrap().unwrap();
    terms.push(t.scale(r, w.lambda_reg));
    // A smooth readout of the raw field keeps every stream in play.
    let field = mean_square(t, out.full);
    terms.push(field);
    lt::sum_all(t, &terms).unwrap().unwrap()
}

fn model_check(name: &str, seed: u64, variant: Variant, encoder: bool, rotation: bool) -> Vec<(String, GradReport)> {
    let mut model = small_model(variant, encoder, rotation, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let tg = targets(&model, 8, &mut rng);
    let pts = Mat::from_points(&(0..8).map(|_| random_in_ball(&mut rng)).map(|p| p.map(|c| 0.6 * c)).collect::<Vec<_>>());
    one(name, gradcheck(&mut model, |m| &mut m.store, &[pts], |t, m, v, tr| model_objective(t, m, v[0], tr, &tg)))
}

pub fn model_with_encoder(seed: u64) -> Vec<(String, GradReport)> {
    model_check("model with point encoder", seed, Variant::Disentangled, true, false)
}

pub fn model_auto_decoded(seed: u64) -> Vec<(String, GradReport)> {
    model_check("auto-decoded model with rotations", seed, Variant::Disentangled, false, true)
}

pub fn model_shared(seed: u64) -> Vec<(String, GradReport)> {
    model_check("shared-latent model", seed, Variant::Shared, false, false)
}

pub fn random_col(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()
}

pub fn loss_terms(seed: u64) -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 10;
    let leaves: Vec<Mat> = (0..3).map(|_| Mat::column(&random_col(k, &mut rng))).collect();
    let gt: Vec<Vec<f64>> = (0..3).map(|_| random_col(k, &mut rng)).collect();
    let mut out = Vec::new();
    for mode in [ClampMode::Symmetric, ClampMode::TargetSide] {
        let mut none = ParamStore::new();
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
            ("full", Box::new(|t, v| lt::full_recon(t, v[0], &gt[0], 0.1, mode).unwrap())),
            (
                "part",
                Box::new(|t, v| {
                    let g: Vec<&[f64]> = gt.iter().map(Vec::as_slice).collect();
                    lt::part_recon(t, v, &g, 0.7, 0.1, mode).unwrap().unwrap()
                }),
            ),
            ("intersection", Box::new(|t, v| lt::intersection(t, v).unwrap().unwrap())),
            ("regularization", Box::new(|t, v| lt::regularization(t, v).unwrap().unwrap())),
        ];
        for (name, f) in &cases {
            out.push((format!("{name} {mode:?}"), gradcheck(&mut none, own_store, &leaves, |t, _, v, _| f(t, v))));
        }
    }
    out
}

/// Targets of the assistance and consistency terms enter as constants.
pub fn stop_gradient_terms(seed: u64) -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 10;
    let pred = [Mat::column(&random_col(k, &mut rng))];
    let geoms: Vec<Vec<f64>> = (0..2).map(|_| random_col(k, &mut rng)).collect();
    let mut out = Vec::new();
    for mode in [ClampMode::Symmetric, ClampMode::TargetSide] {
        let mut none = ParamStore::new();
        let r = gradcheck(&mut none, own_store, &pred, |t, _, v, _| {
            let g = t.constant(Mat::column(&geoms[0]));
            lt::geometry_assist(t, &[v[0]], &[g], 0.1, mode, false).unwrap().unwrap()
        });
        out.push((format!("assist {mode:?}"), r));
        let r = gradcheck(&mut none, own_store, &pred, |t, _, v, _| {
            let g: Vec<Var> = geoms.iter().map(|c| t.constant(Mat::column(c))).collect();
            lt::consistency(t, v[0], &g, 0.1, mode).unwrap().unwrap()
        });
        out.push((format!("consistency {mode:?}"), r));
    }
    out
}
