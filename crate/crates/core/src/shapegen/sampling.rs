use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::f64::consts::{PI, TAU};

use super::{rounded_sdf, GenericPart, ShapeRecord};
use crate::sdf::math::{self, Vec3};
use crate::sdf::{PrimitiveKind, PrimitiveSpec};

/// Query points with exact full-shape and optional per-part distances.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub points: Vec<Vec3>,
    pub sdf_full: Vec<f64>,
    /// One stream per part (generic, geometric, assisted) when labelled.
    pub parts: Option<Vec<Vec<f64>>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub const SURFACE_TOLERANCE: f64 = 1e-4;
pub const NEAR_SIGMA: f64 = 0.05;
pub const CLOSE_SIGMA: f64 = 0.016;

/// One sampleable surface piece of a record.
enum Piece<'a> {
    Primitive(&'a PrimitiveSpec),
    Rounded(&'a PrimitiveSpec, f64),
    HelixStrand(&'a super::Helix, u32),
    Box(&'a super::BoxPart),
}

fn pieces(rec: &ShapeRecord) -> Vec<(usize, Piece<'_>)> {
    let mut out = Vec::new();
    match &rec.generic {
        GenericPart::Helix(h) => out.extend((0..h.strands).map(|s| (0, Piece::HelixStrand(h, s)))),
        GenericPart::Boxes { boxes } => out.extend(boxes.iter().map(|b| (0, Piece::Box(b)))),
    }
    let ng = rec.composite.n_geometric();
    out.extend(rec.composite.geometric.iter().enumerate().map(|(i, g)| (1 + i, Piece::Primitive(g))));
    out.extend(
        rec.composite
            .assisted
            .iter()
            .enumerate()
            .map(|(i, a)| (1 + ng + i, Piece::Rounded(a, rec.assist_rounding))),
    );
    out
}

/// Analytic surface area of every part, in part order.
pub fn part_areas(rec: &ShapeRecord) -> Vec<f64> {
    let mut areas = vec![0.0; rec.part_count()];
    for (part, piece) in pieces(rec) {
        areas[part] += piece.area();
    }
    areas
}

fn primitive_area(kind: PrimitiveKind, v: &[f64]) -> f64 {
    match kind {
        PrimitiveKind::Sphere => 2.0 * TAU * v[0] * v[0],
        PrimitiveKind::Cylinder => TAU * v[0] * 2.0 * v[1] + TAU * v[0] * v[0],
        PrimitiveKind::HollowCylinder => {
            let b = v[0] - v[1];
            TAU * (v[0] + b) * 2.0 * v[2] + TAU * (v[0] * v[0] - b * b)
        }
        PrimitiveKind::Cuboid => 8.0 * (v[0] * v[1] + v[1] * v[2] + v[0] * v[2]),
    }
}

/// Uniform point on the surface of a primitive in its own frame.
fn primitive_surface(kind: PrimitiveKind, v: &[f64], rng: &mut impl Rng) -> Vec3 {
    match kind {
        PrimitiveKind::Sphere => math::scale(unit_vector(rng), v[0]),
        PrimitiveKind::Cylinder => {
            let (r, h) = (v[0], v[1]);
            let side = TAU * r * 2.0 * h;
            let cap = PI * r * r;
            let t = rng.gen::<f64>() * (side + 2.0 * cap);
            let th = rng.gen::<f64>() * TAU;
            if t < side {
                [r * th.cos(), r * th.sin(), rng.gen_range(-h..h)]
            } else {
                let rr = r * rng.gen::<f64>().sqrt();
                let z = if t < side + cap { h } else { -h };
                [rr * th.cos(), rr * th.sin(), z]
            }
        }
        PrimitiveKind::HollowCylinder => {
            let (a, b, h) = (v[0], v[0] - v[1], v[2]);
            let outer = TAU * a * 2.0 * h;
            let inner = TAU * b * 2.0 * h;
            let cap = PI * (a * a - b * b);
            let t = rng.gen::<f64>() * (outer + inner + 2.0 * cap);
            let th = rng.gen::<f64>() * TAU;
            if t < outer + inner {
                let r = if t < outer { a } else { b };
                [r * th.cos(), r * th.sin(), rng.gen_range(-h..h)]
            } else {
                let rr = (b * b + rng.gen::<f64>() * (a * a - b * b)).sqrt();
                let z = if t < outer + inner + cap { h } else { -h };
                [rr * th.cos(), rr * th.sin(), z]
            }
        }
        PrimitiveKind::Cuboid => {
            let areas = [v[1] * v[2], v[0] * v[2], v[0] * v[1]];
            let total: f64 = areas.iter().sum();
            let mut t = rng.gen::<f64>() * total;
            let mut axis = 2;
            for (i, a) in areas.iter().enumerate() {
                if t < *a {
                    axis = i;
                    break;
                }
                t -= a;
            }
            let mut p = [0.0; 3];
            for i in 0..3 {
                p[i] = if i == axis {
                    if rng.gen::<bool>() {
                        v[i]
                    } else {
                        -v[i]
                    }
                } else {
                    rng.gen_range(-v[i]..v[i])
                };
            }
            p
        }
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let th = rng.gen::<f64>() * TAU;
    let s = (1.0 - z * z).sqrt();
    [s * th.cos(), s * th.sin(), z]
}

impl Piece<'_> {
    fn area(&self) -> f64 {
        match self {
            Piece::Primitive(p) | Piece::Rounded(p, _) => primitive_area(p.kind(), &p.params.values),
            Piece::HelixStrand(h, _) => h.area() / h.strands as f64,
            Piece::Box(b) => primitive_area(PrimitiveKind::Cuboid, &b.half),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        match self {
            Piece::Primitive(p) => p.pose.apply(primitive_surface(p.kind(), &p.params.values, rng)),
            Piece::Rounded(p, rho) => {
                // Project a point of the sharp primitive onto the rounded one.
                let mut x = p.pose.apply(primitive_surface(p.kind(), &p.params.values, rng));
                for _ in 0..3 {
                    let d = rounded_sdf(p, *rho, x);
                    let g = numeric_gradient(|q| rounded_sdf(p, *rho, q), x);
                    x = math::sub(x, math::scale(g, d));
                }
                x
            }
            Piece::HelixStrand(h, s) => h.surface_point(*s, rng.gen(), rng.gen(), rng.gen()),
            Piece::Box(b) => math::add(b.center, primitive_surface(PrimitiveKind::Cuboid, &b.half, rng)),
        }
    }
}

pub(crate) fn numeric_gradient(f: impl Fn(Vec3) -> f64, p: Vec3) -> Vec3 {
    let h = 1e-6;
    let mut g = [0.0; 3];
    for i in 0..3 {
        let mut a = p;
        let mut b = p;
        a[i] += h;
        b[i] -= h;
        g[i] = (f(a) - f(b)) / (2.0 * h);
    }
    g
}

/// Area-weighted surface points of the full shape, each with
/// `|sdf_full| < 1e-4`.
pub fn sample_surface_points(rec: &ShapeRecord, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    sample_surface_with_parts(rec, n, rng).into_iter().map(|(p, _)| p).collect()
}

/// Same as [`sample_surface_points`], also returning the source part index.
pub fn sample_surface_with_parts(rec: &ShapeRecord, n: usize, rng: &mut impl Rng) -> Vec<(Vec3, usize)> {
    let pieces = pieces(rec);
    let areas: Vec<f64> = pieces.iter().map(|(_, p)| p.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut t = rng.gen::<f64>() * total;
        let mut k = pieces.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if t < *a {
                k = i;
                break;
            }
            t -= a;
        }
        let p = pieces[k].1.sample(rng);
        if rec.sdf_full(p).abs() < SURFACE_TOLERANCE {
            out.push((p, pieces[k].0));
        }
    }
    out
}

/// Near-surface heavy query set: 47.5% surface points jittered with
/// σ = 0.05, 47.5% with σ = 0.016, the rest uniform in the unit ball.
pub fn sample_sdf(rec: &ShapeRecord, n: usize, rng: &mut impl Rng) -> SampleSet {
    let n_near = (0.475 * n as f64).round() as usize;
    let n_close = ((0.475 * n as f64).round() as usize).min(n - n_near);
    let n_uniform = n - n_near - n_close;
    let surface = sample_surface_points(rec, n_near + n_close, rng);
    let near = Normal::new(0.0, NEAR_SIGMA).expect("positive sigma");
    let close = Normal::new(0.0, CLOSE_SIGMA).expect("positive sigma");
    let mut points = Vec::with_capacity(n);
    for (i, s) in surface.iter().enumerate() {
        let d = if i < n_near { &near } else { &close };
        points.push([s[0] + d.sample(rng), s[1] + d.sample(rng), s[2] + d.sample(rng)]);
    }
    while points.len() < n_near + n_close + n_uniform {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if math::norm(p) <= 1.0 {
            points.push(p);
        }
    }
    label_points(rec, points)
}

/// Exact distances at given points; per-part streams only for labelled shapes.
pub fn label_points(rec: &ShapeRecord, points: Vec<Vec3>) -> SampleSet {
    let per_point: Vec<Vec<f64>> = points.par_iter().map(|p| rec.part_sdfs(*p)).collect();
    let sdf_full = per_point.iter().map(|v| v.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let parts = rec.has_part_labels.then(|| {
        (0..rec.part_count())
            .map(|j| per_point.iter().map(|v| v[j]).collect())
            .collect()
    });
    SampleSet { points, sdf_full, parts }
}

/// Perturbs exactly `⌊rate·K⌋` entries of every part stream by
/// `U(−magnitude, magnitude)`. The full-shape values are untouched.
pub fn inject_label_noise(samples: &mut SampleSet, rate: f64, magnitude: f64, rng: &mut impl Rng) {
    let Some(parts) = samples.parts.as_mut() else { return };
    if magnitude <= 0.0 || rate <= 0.0 {
        return;
    }
    let k = samples.points.len();
    let count = ((rate.min(1.0) * k as f64) + 1e-9).floor() as usize;
    for stream in parts.iter_mut() {
        for i in index::sample(rng, k, count) {
            let mut e = 0.0;
            while e == 0.0 {
                e = rng.gen_range(-magnitude..magnitude);
            }
            stream[i] += e;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapegen::FamilyParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(labelled: bool) -> ShapeRecord {
        let fam = FamilyParams::from_name("mixer").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rec = fam.sample(&mut rng, "m", 1).unwrap();
        rec.has_part_labels = labelled;
        rec
    }

    #[test]
    fn samples_are_exact_and_near_surface() {
        let rec = record(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_sdf(&rec, 2000, &mut rng);
        assert_eq!(s.len(), 2000);
        for (p, v) in s.points.iter().zip(&s.sdf_full) {
            assert_eq!(*v, rec.sdf_full(*p));
        }
        let near = s.sdf_full.iter().filter(|v| v.abs() < 0.2).count();
        assert!(near as f64 >= 0.9 * 2000.0);
        assert_eq!(s.parts.as_ref().unwrap().len(), rec.part_count());
        assert!(sample_sdf(&record(false), 10, &mut rng).parts.is_none());
    }

    #[test]
    fn surface_points_and_noise() {
        let rec = record(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_surface_points(&rec, 500, &mut rng);
        assert!(pts.iter().all(|p| rec.sdf_full(*p).abs() < SURFACE_TOLERANCE));
        assert_eq!(sample_surface_points(&rec, 1, &mut rng).len(), 1);

        let clean = sample_sdf(&rec, 100, &mut rng);
        let mut noisy = clean.clone();
        inject_label_noise(&mut noisy, 0.2, 0.3, &mut rng);
        assert_eq!(noisy.sdf_full, clean.sdf_full);
        for (a, b) in noisy.parts.as_ref().unwrap().iter().zip(clean.parts.as_ref().unwrap()) {
            assert_eq!(a.iter().zip(b).filter(|(x, y)| x != y).count(), 20);
        }
        let mut same = clean.clone();
        inject_label_noise(&mut same, 1.0, 0.0, &mut rng);
        assert_eq!(same, clean);
    }
}
