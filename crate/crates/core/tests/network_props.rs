mod common;

use partsdf::autodiff::{adam_step, AdamState, Mat, ParamBlock, Tape};
use partsdf::model::Variant;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encode(model: &partsdf::model::ModelBundle, cloud: &[[f64; 3]]) -> Vec<f64> {
    model.encode_cloud(cloud).unwrap()
}

#[test]
fn encoder_is_bitwise_permutation_and_duplication_invariant() {
    for seed in 0..5 {
        let model = common::small_model(Variant::Disentangled, true, false, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud: Vec<[f64; 3]> = (0..40).map(|_| common::random_in_ball(&mut rng)).collect();
        let base = encode(&model, &cloud);
        let mut shuffled = cloud.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(encode(&model, &shuffled), base);
        let mut doubled = cloud.clone();
        doubled.extend_from_slice(&cloud[..13]);
        assert_eq!(encode(&model, &doubled), base);
    }
}

#[test]
fn forward_passes_are_deterministic_and_finite_on_the_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for variant in [Variant::Disentangled, Variant::Shared] {
        let model = common::small_model(variant, true, false, 3);
        let a = common::small_model(variant, true, false, 3);
        assert_eq!(model.store, a.store);
        let latent: Vec<f64> = (0..model.latent_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let params = model.shapes[0].params.clone();
        let pts: Vec<[f64; 3]> = (0..64).map(|_| [0.0; 3].map(|_: f64| rng.gen_range(-2.0..2.0))).collect();
        let v1 = model.eval_sdf(&latent, &params, &pts).unwrap();
        let v2 = model.eval_sdf(&latent, &params, &pts).unwrap();
        assert_eq!(v1, v2);
        assert!(v1.iter().all(|v| v.is_finite()));
        if variant == Variant::Shared {
            let raw = model.decode_shared(&latent).unwrap();
            assert!(raw.iter().all(|v| v.is_finite()));
        } else {
            let cloud: Vec<[f64; 3]> = (0..32).map(|_| [0.0; 3].map(|_: f64| rng.gen_range(-2.0..2.0))).collect();
            assert!(encode(&model, &cloud).iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn encoder_sizes_pass_through_softplus() {
    let model = common::small_model(Variant::Disentangled, true, false, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud: Vec<[f64; 3]> = (0..32).map(|_| common::random_in_ball(&mut rng)).collect();
    let params = model.layout.decode_raw(&encode(&model, &cloud)).unwrap();
    assert!(params.prims.iter().all(|p| p.params.iter().all(|v| *v > 0.0)));
}

#[test]
fn adam_with_zero_gradients_is_a_no_op() {
    let mut b = ParamBlock::zeros("w", 2, 3);
    b.values = vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25];
    let before = b.values.clone();
    let mut s = AdamState::for_block(&b, 1e-3);
    for _ in 0..5 {
        adam_step(&mut b, &mut s).unwrap();
    }
    assert_eq!(b.values, before);
    b.grads[0] = f64::NAN;
    assert!(adam_step(&mut b, &mut s).is_err());
}

#[test]
fn tape_min_routes_ties_to_the_lowest_index() {
    let mut t = Tape::new();
    let a = t.leaf(Mat::column(&[0.2, 0.1]));
    let b = t.leaf(Mat::column(&[0.2, 0.3]));
    let m = t.min(&[a, b]).unwrap();
    let s = t.sum(m);
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap().data, vec![1.0, 1.0]);
    assert!(t.grad(b).is_none_or(|g| g.data == vec![0.0, 0.0]));
}
