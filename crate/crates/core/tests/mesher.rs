mod common;

use partsdf::mesher::{marching_cubes, GridSpec, Mesh};
use partsdf::sdf::math::{cross, dot, norm, sub};
use partsdf::sdf::{PrimitiveKind, PrimitiveSpec, Vec3};
use partsdf::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn field(f: impl Fn(Vec3) -> f64 + Sync) -> impl Fn(&[Vec3]) -> Result<Vec<f64>> + Sync {
    move |pts: &[Vec3]| Ok(pts.iter().map(|&p| f(p)).collect())
}

fn prim_field(s: &PrimitiveSpec) -> impl Fn(&[Vec3]) -> Result<Vec<f64>> + Sync + '_ {
    field(move |p| s.sdf(p))
}

#[test]
fn sphere_vertices_are_within_two_cells() {
    let res = 64;
    let grid = GridSpec::cube(res);
    let cell = grid.cell_size()[0];
    let m = marching_cubes(&field(|p| norm(p) - 0.5), &grid).unwrap();
    let worst = m.vertices.iter().map(|v| (norm(*v) - 0.5).abs()).fold(0.0, f64::max);
    assert!(worst < 2.0 * cell, "{worst} vs cell {cell}");
    assert!(!m.is_empty());
}

#[test]
fn two_spheres_weld_into_two_components() {
    let f = field(|p| (norm(sub(p, [-0.45, 0.0, 0.0])) - 0.3).min(norm(sub(p, [0.45, 0.0, 0.0])) - 0.3));
    let m = marching_cubes(&f, &GridSpec::cube(64)).unwrap().weld(1e-7);
    assert_eq!(m.component_count(), 2);
}

#[test]
fn primitive_meshes_lie_on_the_zero_level_and_face_outwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for res in [32, 64] {
        let grid = GridSpec::cube(res);
        let bound = 2.0 * 2.0 / res as f64;
        for spec in resolvable_primitives(res, &mut rng) {
            let m = marching_cubes(&prim_field(&spec), &grid).unwrap();
            m.validate().unwrap();
            let worst = m.vertices.iter().map(|v| spec.sdf(*v).abs()).fold(0.0, f64::max);
            assert!(worst < bound, "{} at {res}: {worst}", spec.id);
            let mut agree = 0;
            let mut counted = 0;
            for t in &m.triangles {
                let [a, b, c] = t.map(|i| m.vertices[i as usize]);
                let n = cross(sub(b, a), sub(c, a));
                if norm(n) < 1e-14 {
                    continue;
                }
                let g = centroid_gradient(&spec, [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0]);
                counted += 1;
                if dot(n, g) > 0.0 {
                    agree += 1;
                }
            }
            assert!(agree as f64 >= 0.99 * counted as f64, "{} at {res}: {agree}/{counted}", spec.id);
        }
    }
}

/// Smallest wall, radius or half-extent doubled, in world units.
fn thinnest_feature(spec: &PrimitiveSpec) -> f64 {
    let v = &spec.params.values;
    match spec.kind() {
        PrimitiveKind::Sphere => 2.0 * v[0],
        PrimitiveKind::Cylinder => 2.0 * v[0].min(v[1]),
        PrimitiveKind::HollowCylinder => v[1].min(2.0 * v[2]),
        PrimitiveKind::Cuboid => 2.0 * v[0].min(v[1]).min(v[2]),
    }
}

/// Random primitives whose thinnest feature spans at least three cells;
/// thinner walls are not resolved by the grid at all.
fn resolvable_primitives(res: usize, rng: &mut ChaCha8Rng) -> Vec<PrimitiveSpec> {
    let min = 3.0 * 2.0 / res as f64;
    let mut out: Vec<PrimitiveSpec> = Vec::new();
    while out.len() < 8 {
        for s in common::random_primitives(rng) {
            if thinnest_feature(&s) >= min && out.iter().filter(|o| o.kind() == s.kind()).count() < 2 {
                out.push(s);
            }
        }
    }
    out
}

fn centroid_gradient(spec: &PrimitiveSpec, p: Vec3) -> Vec3 {
    let h = 1e-6;
    let mut g = [0.0; 3];
    for i in 0..3 {
        let (mut a, mut b) = (p, p);
        a[i] += h;
        b[i] -= h;
        g[i] = spec.sdf(a) - spec.sdf(b);
    }
    g
}

#[test]
fn meshing_is_deterministic() {
    let f = field(|p| norm(sub(p, [0.1, -0.2, 0.05])) - 0.4);
    let a = marching_cubes(&f, &GridSpec::cube(40)).unwrap();
    let b = marching_cubes(&f, &GridSpec::cube(40)).unwrap();
    assert_eq!(a, b);
}

/// Reads `v` and `f` records with nothing but the standard library.
fn parse_obj(text: &str) -> Mesh {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|s| s.parse().unwrap()).collect();
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let c: Vec<u32> = it.map(|s| s.split('/').next().unwrap().parse::<u32>().unwrap() - 1).collect();
                triangles.push([c[0], c[1], c[2]]);
            }
            _ => {}
        }
    }
    Mesh { vertices, triangles }
}

#[test]
fn obj_export_reparses_exactly() {
    let f = field(|p| norm(p) - 0.6);
    let m = marching_cubes(&f, &GridSpec::cube(20)).unwrap().weld(1e-7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.obj");
    m.export_obj(&path).unwrap();
    let back = parse_obj(&std::fs::read_to_string(&path).unwrap());
    assert_eq!(back, m);
}

#[test]
fn bad_grids_are_rejected() {
    assert!(GridSpec::cube(1).validate().is_err());
    let g = GridSpec { resolution: 8, min: [0.0; 3], max: [0.0, 1.0, 1.0] };
    assert!(g.validate().is_err());
}
