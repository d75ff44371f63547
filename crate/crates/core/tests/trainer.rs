use partsdf::model::Variant;
use partsdf::nets::{DecoderConfig, EncoderConfig, LatentDecoderConfig, PartDecoderConfig};
use partsdf::shapegen::{generate_dataset, Dataset, DatasetConfig, FamilyParams, Split};
use partsdf::trainer::{
    manipulate_direct, manipulate_shared, reconstruct, train, InferConfig, ManipulateConfig, TrainConfig,
};
use partsdf::Error;

fn dataset(seed: u64) -> Dataset {
    let mut dc = DatasetConfig::new(FamilyParams::from_name("mixer").unwrap(), 4, 2, seed);
    dc.samples_per_shape = 1500;
    dc.cloud_points = 300;
    dc.labeled_fraction = 0.5;
    generate_dataset(&dc).unwrap()
}

fn small_config(variant: Variant, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig { variant, epochs, batch_size: 2, samples_per_shape: 128, encoder_points: 64, ..Default::default() };
    cfg.arch.generic = DecoderConfig { num_layers: 3, hidden_width: 16, skip_layer: Some(1), ..cfg.arch.generic };
    cfg.arch.part = PartDecoderConfig { num_layers: 2, hidden_width: 12, ..cfg.arch.part };
    cfg.arch.encoder = EncoderConfig { point_widths: vec![16, 16], head_width: 16 };
    cfg.arch.latent_decoder = LatentDecoderConfig { trunk_width: 16, branch_width: 12 };
    cfg
}

fn without_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

#[test]
fn training_is_reproducible_under_a_seed() {
    let data = dataset(1);
    let cfg = small_config(Variant::Disentangled, 3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let a = train(&data, &cfg, Some(dirs[0].path())).unwrap();
    let b = train(&data, &cfg, Some(dirs[1].path())).unwrap();
    let log = |i: usize| std::fs::read_to_string(dirs[i].path().join("metrics.csv")).unwrap();
    assert_eq!(log(0).lines().count(), 4);
    assert_eq!(without_time(&log(0)), without_time(&log(1)));
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(a.model.shapes, b.model.shapes);
    assert!(dirs[0].path().join("model.json").exists());

    let other = train(&data, &TrainConfig { seed: 9, ..cfg }, None).unwrap();
    assert_ne!(other.model.store, a.model.store);
}

#[test]
fn saved_model_evaluates_identically() {
    let data = dataset(2);
    let out = train(&data, &small_config(Variant::Disentangled, 2), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    out.model.save(&path).unwrap();
    let back = partsdf::model::ModelBundle::load(&path).unwrap();
    let e = &out.model.shapes[0];
    let pts = &data.clouds[0][..50];
    assert_eq!(out.model.eval_sdf(&e.latent, &e.params, pts).unwrap(), back.eval_sdf(&e.latent, &e.params, pts).unwrap());
}

#[test]
fn reconstruction_freezes_networks() {
    let data = dataset(3);
    let model = train(&data, &small_config(Variant::Disentangled, 2), None).unwrap().model;
    let before = model.store.clone();
    let i = data.indices(Split::Test)[0];
    let cfg = InferConfig { iterations: 20, samples_per_iteration: 200, ..Default::default() };
    let r = reconstruct(&model, &data.samples[i], Some(&data.clouds[i]), &cfg).unwrap();
    assert_eq!(model.store, before);
    assert_eq!(r.history.len(), 20);
    assert!(r.final_loss.is_finite() && r.initial_loss.is_finite());
    assert!(r.latent.iter().any(|&v| v != 0.0));
}

#[test]
fn zero_iteration_reconstruction_returns_encoder_estimate() {
    let data = dataset(4);
    let model = train(&data, &small_config(Variant::Disentangled, 1), None).unwrap().model;
    let i = data.indices(Split::Test)[1];
    let cfg = InferConfig { iterations: 0, ..Default::default() };
    let r = reconstruct(&model, &data.samples[i], Some(&data.clouds[i]), &cfg).unwrap();
    let raw = model.encode_cloud(model.encoder_input(&data.clouds[i])).unwrap();
    assert_eq!(r.params, model.layout.decode_raw(&raw).unwrap());
    assert!(r.latent.iter().all(|&v| v == 0.0));
    assert!(r.history.is_empty());
    assert_eq!(r.initial_loss, r.final_loss);
    assert!(matches!(reconstruct(&model, &data.samples[i], None, &cfg), Err(Error::InvalidParams(_))));
}

#[test]
fn direct_manipulation_edits_only_named_entries() {
    let data = dataset(5);
    let model = train(&data, &small_config(Variant::Disentangled, 1), None).unwrap().model;
    let p = &model.shapes[0].params;
    let v = model.layout.explicit_vector(p);
    let idx = model.layout.param_index("tube.outer_radius").unwrap();
    let target = v[idx] * 1.05;
    let edited = manipulate_direct(&model, p, &[("tube.outer_radius".into(), target)]).unwrap();
    let w = model.layout.explicit_vector(&edited);
    for (k, (a, b)) in v.iter().zip(&w).enumerate() {
        if k == idx {
            assert!((b - target).abs() < 1e-12);
        } else {
            assert_eq!(a, b);
        }
    }
    assert!(matches!(manipulate_direct(&model, p, &[("nope".into(), 1.0)]), Err(Error::UnknownKey(_))));
    assert!(manipulate_direct(&model, p, &[("tube.outer_radius".into(), f64::NAN)]).is_err());
    assert!(manipulate_direct(&model, p, &[("tube.outer_radius".into(), -1.0)]).is_err());
}

#[test]
fn shared_manipulation_keeps_a_fixed_point() {
    let data = dataset(6);
    let model = train(&data, &small_config(Variant::Shared, 2), None).unwrap().model;
    let e = &model.shapes[1];
    let v = model.layout.explicit_vector(&e.params);
    let idx = model.layout.param_index("tube.thickness").unwrap();
    let cfg = ManipulateConfig { steps: 500, ..Default::default() };
    let r = manipulate_shared(&model, &e.latent, &[(idx, v[idx])], &cfg).unwrap();
    let w = model.layout.explicit_vector(&r.params);
    let drift = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-3, "drift {drift}");
    assert!(matches!(manipulate_shared(&model, &e.latent, &[(v.len(), 0.0)], &cfg), Err(Error::OutOfRange { .. })));
    assert!(matches!(manipulate_shared(&model, &e.latent[1..], &[(idx, 0.0)], &cfg), Err(Error::LengthMismatch { .. })));

    let plain = train(&data, &small_config(Variant::Disentangled, 1), None).unwrap().model;
    assert!(matches!(manipulate_shared(&plain, &e.latent, &[(idx, 0.0)], &cfg), Err(Error::WrongVariant { .. })));
}
