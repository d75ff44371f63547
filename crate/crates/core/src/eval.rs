//! Quantitative metrics (Chamfer, EMD, shell IoU), the circle-Hough tube
//! detector, the manipulation benchmark and per-shape diagnostics.

use std::fs;
use std::path::Path;

use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{loss_full_recon, loss_geometry_assist, loss_intersection};
use crate::mesher::{marching_cubes, GridSpec};
use crate::model::ModelBundle;
use crate::nets::ShapeParams;
use crate::sdf::composite::clamp_delta;
use crate::sdf::math::{self, Vec3};
use crate::sdf::Role;
use crate::shapegen::{sample_surface_points, Dataset, SampleSet, ShapeRecord, Split};
use crate::trainer::{manipulate_direct, reconstruct, InferConfig};

/// Batched SDF evaluator, the same shape the mesher takes.
pub trait SdfEval: Fn(&[Vec3]) -> Result<Vec<f64>> + Sync {}
impl<F: Fn(&[Vec3]) -> Result<Vec<f64>> + Sync> SdfEval for F {}

// ---------------------------------------------------------------------------
// nearest neighbours

/// Exact nearest-neighbour queries on a uniform grid of buckets.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParams("nearest-neighbour index over an empty set".into()));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        let extent = (0..3).map(|i| max[i] - min[i]).fold(0.0, f64::max).max(1e-9);
        let per_axis = (points.len() as f64 / 2.0).cbrt().ceil().clamp(1.0, 256.0);
        let cell = extent / per_axis;
        let dims = [0, 1, 2].map(|i| (((max[i] - min[i]) / cell).floor() as usize + 1).min(512));
        let mut grid = PointGrid { points, min, cell, dims, starts: Vec::new(), order: Vec::new() };
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(*p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        Ok(grid)
    }

    fn cell_of(&self, p: Vec3) -> [usize; 3] {
        [0, 1, 2].map(|i| (((p[i] - self.min[i]) / self.cell).floor().max(0.0) as usize).min(self.dims[i] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Squared distance to, and index of, the closest indexed point.
    pub fn nearest(&self, q: Vec3) -> (f64, usize) {
        let c = self.cell_of(q);
        let (mut best, mut best_i) = (f64::INFINITY, 0);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1);
        for r in 0..=max_ring {
            let lo = [0, 1, 2].map(|i| c[i].saturating_sub(r));
            let hi = [0, 1, 2].map(|i| (c[i] + r).min(self.dims[i] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let shell = [x, y, z].iter().zip(&c).any(|(&a, &b)| a.abs_diff(b) == r);
                        if !shell {
                            continue;
                        }
                        let k = self.flat([x, y, z]);
                        for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
                            let d = math::dist2(q, self.points[i]);
                            if d < best {
                                best = d;
                                best_i = i;
                            }
                        }
                    }
                }
            }
            let reach = r as f64 * self.cell;
            if best <= reach * reach {
                break;
            }
        }
        (best, best_i)
    }
}

// ---------------------------------------------------------------------------
// point-set metrics

fn directed_mean_sq(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    let grid = PointGrid::new(b)?;
    Ok(a.par_iter().map(|p| grid.nearest(*p).0).sum::<f64>() / a.len() as f64)
}

/// Mean squared nearest-neighbour distance from `a` to `b` plus the same
/// from `b` to `a`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParams("chamfer distance of an empty point set".into()));
    }
    Ok(directed_mean_sq(a, b)? + directed_mean_sq(b, a)?)
}

/// Largest set solved by exact assignment.
pub const EMD_EXACT_MAX: usize = 512;

/// Fixed-point scale of distances handed to the integer assignment solver.
const EMD_SCALE: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emd {
    /// Mean Euclidean distance between matched points.
    pub value: f64,
    /// Entropic regularisation used, `None` for the exact solver.
    pub epsilon: Option<f64>,
}

fn check_emd_sizes(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { context: "earth mover's distance", expected: a.len(), actual: b.len() });
    }
    if a.is_empty() {
        return Err(Error::InvalidParams("earth mover's distance of empty point sets".into()));
    }
    Ok(())
}

/// Exact for up to [`EMD_EXACT_MAX`] points, entropic transport above.
pub fn emd(a: &[Vec3], b: &[Vec3]) -> Result<Emd> {
    check_emd_sizes(a, b)?;
    if a.len() <= EMD_EXACT_MAX {
        Ok(Emd { value: emd_exact(a, b)?, epsilon: None })
    } else {
        let eps = default_epsilon(a, b);
        Ok(Emd { value: emd_sinkhorn(a, b, eps)?, epsilon: Some(eps) })
    }
}

/// Minimum mean matching distance by Hungarian assignment.
pub fn emd_exact(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check_emd_sizes(a, b)?;
    let n = a.len();
    let weights = Matrix::from_fn(n, n, |(i, j)| (math::dist(a[i], b[j]) * EMD_SCALE).round() as i64);
    let (_, assign) = pathfinding::kuhn_munkres::kuhn_munkres_min(&weights);
    Ok(assign.iter().enumerate().map(|(i, &j)| math::dist(a[i], b[j])).sum::<f64>() / n as f64)
}

fn default_epsilon(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in a.iter().chain(b) {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    1e-3 * math::dist(lo, hi).max(1e-9)
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Transport cost of the entropic plan at regularisation `eps`, uniform
/// weights, log-domain Sinkhorn with ε-annealing. The plan is rounded onto
/// the row marginals before its cost is taken.
pub fn emd_sinkhorn(a: &[Vec3], b: &[Vec3], eps: f64) -> Result<f64> {
    check_emd_sizes(a, b)?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("entropic regularisation {eps} must be positive")));
    }
    let n = a.len();
    let cost: Vec<f64> = (0..n * n).into_par_iter().map(|k| math::dist(a[k / n], b[k % n])).collect();
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let mut e = (0.25 * max_cost).max(eps);
    loop {
        let stage_iters = if e > eps { 20 } else { 1000 };
        for _ in 0..stage_iters {
            f = (0..n)
                .into_par_iter()
                .map(|i| -e * log_sum_exp((0..n).map(|j| (g[j] - cost[i * n + j]) / e + log_w)))
                .collect();
            g = (0..n)
                .into_par_iter()
                .map(|j| -e * log_sum_exp((0..n).map(|i| (f[i] - cost[i * n + j]) / e + log_w)))
                .collect();
            if e <= eps {
                // Column marginals are exact after the g update; check rows.
                let err = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let s: f64 = (0..n).map(|j| ((f[i] + g[j] - cost[i * n + j]) / e + 2.0 * log_w).exp()).sum();
                        (s * n as f64 - 1.0).abs()
                    })
                    .reduce(|| 0.0, f64::max);
                if err < 1e-6 {
                    break;
                }
            }
        }
        if e <= eps {
            break;
        }
        e = (e * 0.5).max(eps);
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = (0..n).map(|j| ((f[i] + g[j] - cost[i * n + j]) / e).exp()).collect();
            let mass: f64 = row.iter().sum();
            if mass == 0.0 {
                return 0.0;
            }
            row.iter().enumerate().map(|(j, w)| w * cost[i * n + j]).sum::<f64>() / mass
        })
        .sum();
    let value = total / n as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { context: "entropic transport cost".into() });
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// shell IoU

/// IoU of voxel shells, a voxel centre counting when `|sdf| < 1.5·cell`.
/// The grid spans `[lo, hi]^3` with `resolution` voxels per axis.
pub fn shell_iou_in<A: SdfEval, B: SdfEval>(a: &A, b: &B, resolution: usize, lo: f64, hi: f64) -> Result<f64> {
    if resolution < 8 {
        return Err(Error::Config(format!("shell IoU resolution {resolution} below 8")));
    }
    let cell = (hi - lo) / resolution as f64;
    let band = 1.5 * cell;
    let (mut inter, mut union) = (0usize, 0usize);
    for k in 0..resolution {
        let mut pts = Vec::with_capacity(resolution * resolution);
        for j in 0..resolution {
            for i in 0..resolution {
                let c = |n: usize| lo + (n as f64 + 0.5) * cell;
                pts.push([c(i), c(j), c(k)]);
            }
        }
        let va = a(&pts)?;
        let vb = b(&pts)?;
        if va.len() != pts.len() || vb.len() != pts.len() {
            return Err(Error::LengthMismatch { context: "shell IoU slab", expected: pts.len(), actual: va.len().min(vb.len()) });
        }
        for (x, y) in va.iter().zip(&vb) {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::NonFinite { context: format!("SDF in shell IoU slab {k}") });
            }
            let (ma, mb) = (x.abs() < band, y.abs() < band);
            inter += (ma && mb) as usize;
            union += (ma || mb) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Shell IoU over the normalised domain `[-1, 1]^3`.
pub fn shell_iou<A: SdfEval, B: SdfEval>(a: &A, b: &B, resolution: usize) -> Result<f64> {
    shell_iou_in(a, b, resolution, -1.0, 1.0)
}

// ---------------------------------------------------------------------------
// tube detection

pub const HOUGH_RASTER: usize = 512;
pub const HOUGH_BINS: usize = 512;
/// Radius range covered by the accumulator, `(0, HOUGH_MAX_RADIUS]`.
pub const HOUGH_MAX_RADIUS: f64 = 1.0;
/// Peaks below this fraction of the strongest are ignored.
const PEAK_FRACTION: f64 = 0.25;
const PEAK_WINDOW: usize = 2;

pub fn hough_bin_width() -> f64 {
    HOUGH_MAX_RADIUS / HOUGH_BINS as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeDetection {
    pub radius: f64,
    pub thickness: f64,
}

/// Radial vote histogram of the zero crossings of a planar SDF slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulator {
    pub counts: Vec<f64>,
    pub radius_sums: Vec<f64>,
}

/// Votes every sign change between raster neighbours at its linearly
/// interpolated crossing, binned by distance to `center`.
pub fn hough_accumulate<F: SdfEval>(f: &F, center: [f64; 2], z: f64) -> Result<Accumulator> {
    let n = HOUGH_RASTER;
    let h = 2.0 / (n - 1) as f64;
    let coord = |i: usize| -1.0 + i as f64 * h;
    let mut pts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            pts.push([coord(i), coord(j), z]);
        }
    }
    let v = f(&pts)?;
    if v.len() != pts.len() {
        return Err(Error::LengthMismatch { context: "Hough raster", expected: pts.len(), actual: v.len() });
    }
    if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { context: format!("SDF at raster pixel ({}, {})", bad % n, bad / n) });
    }
    let mut acc = Accumulator { counts: vec![0.0; HOUGH_BINS], radius_sums: vec![0.0; HOUGH_BINS] };
    let mut vote = |p: [f64; 2]| {
        let r = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
        if r <= 0.0 || r > HOUGH_MAX_RADIUS {
            return;
        }
        let bin = ((r / hough_bin_width()).ceil() as usize).clamp(1, HOUGH_BINS) - 1;
        acc.counts[bin] += 1.0;
        acc.radius_sums[bin] += r;
    };
    for j in 0..n {
        for i in 0..n {
            let a = v[i + n * j];
            for (di, dj) in [(1, 0), (0, 1)] {
                let (i2, j2) = (i + di, j + dj);
                if i2 >= n || j2 >= n {
                    continue;
                }
                let b = v[i2 + n * j2];
                if (a < 0.0) != (b < 0.0) {
                    let s = a / (a - b);
                    let (x0, y0) = (coord(i), coord(j));
                    let (x1, y1) = (coord(i2), coord(j2));
                    vote([x0 + s * (x1 - x0), y0 + s * (y1 - y0)]);
                }
            }
        }
    }
    Ok(acc)
}

impl Accumulator {
    /// Centroid radii of significant peaks, largest first.
    pub fn peaks(&self) -> Vec<f64> {
        let max = self.counts.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Vec::new();
        }
        let mut order: Vec<usize> = (0..self.counts.len()).filter(|&i| self.counts[i] >= PEAK_FRACTION * max).collect();
        order.sort_by(|&a, &b| self.counts[b].total_cmp(&self.counts[a]).then(a.cmp(&b)));
        let mut taken = vec![false; self.counts.len()];
        let mut out = Vec::new();
        for i in order {
            if taken[i] {
                continue;
            }
            let lo = i.saturating_sub(PEAK_WINDOW);
            let hi = (i + PEAK_WINDOW).min(self.counts.len() - 1);
            let (c, s) = (lo..=hi).filter(|&k| !taken[k]).fold((0.0, 0.0), |(c, s), k| (c + self.counts[k], s + self.radius_sums[k]));
            (lo..=hi).for_each(|k| taken[k] = true);
            out.push(s / c);
        }
        out.sort_by(|a, b| b.total_cmp(a));
        out
    }
}

/// Outer radius and wall thickness of a tube whose axis passes through
/// `center`, from the slice at height `z`.
pub fn detect_tube_at<F: SdfEval>(f: &F, center: [f64; 2], z: f64) -> Result<TubeDetection> {
    let peaks = hough_accumulate(f, center, z)?.peaks();
    match peaks.as_slice() {
        [] => Err(Error::NoDetection(format!("no zero crossings in the slice z = {z}"))),
        [r] => Err(Error::NoDetection(format!("single circle at radius {r:.4}, no concentric wall"))),
        [outer, inner, ..] => Ok(TubeDetection { radius: *outer, thickness: outer - inner }),
    }
}

/// [`detect_tube_at`] about the z axis.
pub fn detect_tube<F: SdfEval>(f: &F, z: f64) -> Result<TubeDetection> {
    detect_tube_at(f, [0.0, 0.0], z)
}

// ---------------------------------------------------------------------------
// diagnostics

/// Per-shape quality numbers, all on clamped distances (`±δ`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDiagnostics {
    /// Mean clamped L1 of the full SDF against ground truth.
    pub full_error: f64,
    /// Mean over assisted parts of the clamped `|SDF_assist − SDF_geom|`.
    pub assist_gap: f64,
    /// Mean penetration depth over unordered part pairs.
    pub overlap: f64,
    /// Mean translation error over primitives.
    pub pose_error: f64,
    /// Mean clamped L1 of every part against its exact distance.
    pub part_error: f64,
}

/// Diagnostics of a decoded shape on the sample points of its record.
/// Part errors use exact part distances, never the stored (possibly
/// noisy) labels.
pub fn shape_diagnostics(
    model: &ModelBundle,
    latent: &[f64],
    params: &ShapeParams,
    rec: &ShapeRecord,
    samples: &SampleSet,
) -> Result<ShapeDiagnostics> {
    let delta = model.meta.weights.delta;
    let layout = &model.layout;
    let v = model.eval_parts(latent, params, &samples.points)?;
    let full_error = loss_full_recon(&v.full, &samples.sdf_full, delta)?;

    let assisted: Vec<usize> = (0..layout.slots.len()).filter(|&i| layout.slots[i].role == Role::Assisted).collect();
    let assist_gap = if assisted.is_empty() {
        0.0
    } else {
        let a: Vec<&[f64]> = v.assist.iter().map(Vec::as_slice).collect();
        let g: Vec<&[f64]> = assisted.iter().map(|&i| v.analytic[i].as_slice()).collect();
        loss_geometry_assist(&a, &g, delta)? / assisted.len() as f64
    };

    let mut streams: Vec<&[f64]> = vec![&v.generic];
    streams.extend(
        layout.slots.iter().enumerate().filter(|(_, s)| s.role == Role::Geometric).map(|(i, _)| v.analytic[i].as_slice()),
    );
    streams.extend(v.assist.iter().map(Vec::as_slice));
    let pairs = streams.len() * (streams.len() - 1) / 2;
    let overlap = if pairs == 0 { 0.0 } else { loss_intersection(&streams)? / pairs as f64 };

    let gt = layout.params_from_composite(&rec.composite)?;
    let pose_error = params
        .prims
        .iter()
        .zip(&gt.prims)
        .map(|(a, b)| math::dist(a.translation, b.translation))
        .sum::<f64>()
        / params.prims.len().max(1) as f64;

    let exact: Vec<Vec<f64>> = samples.points.iter().map(|p| rec.part_sdfs(*p)).collect();
    let mut part_error = 0.0;
    for (k, s) in streams.iter().enumerate() {
        part_error += s
            .iter()
            .zip(&exact)
            .map(|(&a, e)| (clamp_delta(a, delta) - clamp_delta(e[k], delta)).abs())
            .sum::<f64>()
            / s.len().max(1) as f64;
    }
    part_error /= streams.len() as f64;

    Ok(ShapeDiagnostics { full_error, assist_gap, overlap, pose_error, part_error })
}

// ---------------------------------------------------------------------------
// manipulation benchmark

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Primitive whose radius and thickness are edited.
    pub slot: String,
    /// Targets are drawn uniformly within `±perturbation` relative to the
    /// ground truth.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { slot: "tube".into(), perturbation: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationCase {
    pub id: String,
    pub target_radius: f64,
    pub target_thickness: f64,
    pub detected: TubeDetection,
    pub radius_err: f64,
    pub thickness_err: f64,
}

/// Sets the slot's outer radius and thickness on a decoded shape, decodes
/// and measures them back on the slice through the slot's centre.
pub fn manipulation_case(
    model: &ModelBundle,
    id: &str,
    latent: &[f64],
    params: &ShapeParams,
    slot: &str,
    target_radius: f64,
    target_thickness: f64,
) -> Result<ManipulationCase> {
    let si = model.layout.slot_index(slot).ok_or_else(|| Error::UnknownKey(slot.to_string()))?;
    let edits = [(format!("{slot}.outer_radius"), target_radius), (format!("{slot}.thickness"), target_thickness)];
    let edited = manipulate_direct(model, params, &edits)?;
    let t = edited.prims[si].translation;
    let f = |pts: &[Vec3]| model.eval_sdf(latent, &edited, pts);
    let detected = detect_tube_at(&f, [t[0], t[1]], t[2])?;
    Ok(ManipulationCase {
        id: id.to_string(),
        target_radius,
        target_thickness,
        detected,
        radius_err: (detected.radius - target_radius).abs() / target_radius,
        thickness_err: (detected.thickness - target_thickness).abs() / target_thickness,
    })
}

/// Deterministic targets per shape: ground truth times `1 + U(−p, p)`.
pub fn benchmark_targets(rec: &ShapeRecord, cfg: &BenchmarkConfig, index: usize) -> Result<(f64, f64)> {
    let prim = rec.composite.primitive(&cfg.slot).ok_or_else(|| Error::UnknownKey(cfg.slot.clone()))?;
    let v = &prim.params.values;
    if v.len() < 2 {
        return Err(Error::InvalidParams(format!("`{}` has no radius and thickness", cfg.slot)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let p = cfg.perturbation.abs();
    let mut draw = || if p > 0.0 { 1.0 + rng.gen_range(-p..p) } else { 1.0 };
    let radius = v[0] * draw();
    let thickness = v[1] * draw();
    Ok((radius, thickness))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub cases: Vec<ManipulationCase>,
    pub failures: Vec<(String, String)>,
    pub mean_radius_err: f64,
    pub mean_thickness_err: f64,
}

/// Shapes are given as `(record index, latent, params)`, typically from
/// reconstruction. Shapes where detection fails are listed as failures and
/// left out of the means.
pub fn manipulation_benchmark(
    model: &ModelBundle,
    data: &Dataset,
    shapes: &[(usize, Vec<f64>, ShapeParams)],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkSummary> {
    let results: Vec<Result<ManipulationCase>> = shapes
        .par_iter()
        .map(|(i, latent, params)| {
            let rec = &data.records[*i];
            let (r, t) = benchmark_targets(rec, cfg, *i)?;
            manipulation_case(model, &rec.id, latent, params, &cfg.slot, r, t)
        })
        .collect();
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for ((i, _, _), r) in shapes.iter().zip(results) {
        match r {
            Ok(c) => cases.push(c),
            Err(Error::NoDetection(msg)) => failures.push((data.records[*i].id.clone(), msg)),
            Err(e) => return Err(e),
        }
    }
    let n = cases.len().max(1) as f64;
    Ok(BenchmarkSummary {
        mean_radius_err: cases.iter().map(|c| c.radius_err).sum::<f64>() / n,
        mean_thickness_err: cases.iter().map(|c| c.thickness_err).sum::<f64>() / n,
        cases,
        failures,
    })
}

// ---------------------------------------------------------------------------
// dataset evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cd,
    Emd,
    Siou,
    Tube,
}

impl Metric {
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',')
            .map(str::trim)
            .filter(|m| !m.is_empty())
            .map(|m| match m {
                "cd" => Ok(Metric::Cd),
                "emd" => Ok(Metric::Emd),
                "siou" => Ok(Metric::Siou),
                "tube" => Ok(Metric::Tube),
                other => Err(Error::UnknownKey(other.to_string())),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub split: Split,
    pub max_shapes: Option<usize>,
    pub infer: InferConfig,
    /// Marching-cubes cells per axis for the surface samples.
    pub mesh_resolution: usize,
    pub cd_points: usize,
    pub emd_points: usize,
    pub siou_resolution: usize,
    pub benchmark: BenchmarkConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: vec![Metric::Cd, Metric::Emd, Metric::Siou, Metric::Tube],
            split: Split::Test,
            max_shapes: None,
            infer: InferConfig { iterations: 200, samples_per_iteration: 1000, ..InferConfig::default() },
            mesh_resolution: 128,
            cd_points: 30_000,
            emd_points: 2048,
            siou_resolution: 64,
            benchmark: BenchmarkConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub id: String,
    pub cd: Option<f64>,
    pub emd: Option<f64>,
    pub siou: Option<f64>,
    pub radius_err: Option<f64>,
    pub thickness_err: Option<f64>,
    pub diagnostics: Option<ShapeDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub shapes: usize,
    pub mean_cd: Option<f64>,
    pub mean_emd: Option<f64>,
    pub emd_epsilon: Option<f64>,
    pub mean_siou: Option<f64>,
    pub mean_radius_err: Option<f64>,
    pub mean_thickness_err: Option<f64>,
    pub tube_failures: usize,
    pub mean_full_error: f64,
    pub chamfer_convention: String,
    pub config_hash: String,
    pub config: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub shapes: Vec<ShapeReport>,
    pub summary: EvalSummary,
}

pub const CHAMFER_CONVENTION: &str = "sum of the two directed mean squared nearest-neighbour distances; \
not comparable with numbers computed under other normalisations";

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Latent and parameters for a record: the stored entry for training
/// shapes, reconstruction otherwise.
pub fn decode_record(model: &ModelBundle, data: &Dataset, i: usize, infer: &InferConfig) -> Result<(Vec<f64>, ShapeParams)> {
    let rec = &data.records[i];
    if let Some(si) = model.shape_index(&rec.id) {
        let e = &model.shapes[si];
        return Ok((e.latent.clone(), e.params.clone()));
    }
    let r = reconstruct(model, &data.samples[i], Some(&data.clouds[i]), infer)?;
    Ok((r.latent, r.params))
}

/// Reconstructs (or looks up) every selected shape and computes the
/// requested metrics.
pub fn evaluate(model: &ModelBundle, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut idx = data.indices(cfg.split);
    if let Some(m) = cfg.max_shapes {
        idx.truncate(m);
    }
    let decoded: Vec<(usize, Vec<f64>, ShapeParams)> = idx
        .iter()
        .map(|&i| decode_record(model, data, i, &cfg.infer).map(|(l, p)| (i, l, p)))
        .collect::<Result<_>>()?;

    let mut emd_eps = None;
    let mut reports = Vec::with_capacity(decoded.len());
    for (i, latent, params) in &decoded {
        let rec = &data.records[*i];
        let mut r = ShapeReport { id: rec.id.clone(), ..Default::default() };
        r.diagnostics = Some(shape_diagnostics(model, latent, params, rec, &data.samples[*i])?);
        let f = |pts: &[Vec3]| model.eval_sdf(latent, params, pts);
        let truth = |pts: &[Vec3]| Ok(pts.iter().map(|p| rec.sdf_full(*p)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(*i as u64);
        let wants_points = cfg.metrics.contains(&Metric::Cd) || cfg.metrics.contains(&Metric::Emd);
        if wants_points {
            let mesh = marching_cubes(&f, &GridSpec::cube(cfg.mesh_resolution))?;
            if mesh.triangles.is_empty() {
                return Err(Error::NoDetection(format!("`{}` decodes to an empty surface", rec.id)));
            }
            if cfg.metrics.contains(&Metric::Cd) {
                let a = mesh.sample_surface(cfg.cd_points, &mut rng)?;
                let b = sample_surface_points(rec, cfg.cd_points, &mut rng);
                r.cd = Some(chamfer(&a, &b)?);
            }
            if cfg.metrics.contains(&Metric::Emd) {
                let a = mesh.sample_surface(cfg.emd_points, &mut rng)?;
                let b = sample_surface_points(rec, cfg.emd_points, &mut rng);
                let e = emd(&a, &b)?;
                emd_eps = e.epsilon.or(emd_eps);
                r.emd = Some(e.value);
            }
        }
        if cfg.metrics.contains(&Metric::Siou) {
            r.siou = Some(shell_iou(&f, &truth, cfg.siou_resolution)?);
        }
        reports.push(r);
    }

    let mut tube_failures = 0;
    if cfg.metrics.contains(&Metric::Tube) {
        let bench = manipulation_benchmark(model, data, &decoded, &cfg.benchmark)?;
        tube_failures = bench.failures.len();
        for c in bench.cases {
            if let Some(r) = reports.iter_mut().find(|r| r.id == c.id) {
                r.radius_err = Some(c.radius_err);
                r.thickness_err = Some(c.thickness_err);
            }
        }
    }

    let n = reports.len().max(1) as f64;
    let summary = EvalSummary {
        shapes: reports.len(),
        mean_cd: mean(reports.iter().map(|r| r.cd)),
        mean_emd: mean(reports.iter().map(|r| r.emd)),
        emd_epsilon: emd_eps,
        mean_siou: mean(reports.iter().map(|r| r.siou)),
        mean_radius_err: mean(reports.iter().map(|r| r.radius_err)),
        mean_thickness_err: mean(reports.iter().map(|r| r.thickness_err)),
        tube_failures,
        mean_full_error: reports.iter().filter_map(|r| r.diagnostics.as_ref()).map(|d| d.full_error).sum::<f64>() / n,
        chamfer_convention: CHAMFER_CONVENTION.into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
    };
    Ok(EvalReport { shapes: reports, summary })
}

impl EvalReport {
    /// `report.csv` (one row per shape, `# ` header comment) and
    /// `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut buf = format!("# chamfer: {CHAMFER_CONVENTION}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["id", "cd", "emd", "siou", "radius_err", "thickness_err"]).map_err(csv_err)?;
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
            for r in &self.shapes {
                w.write_record([r.id.clone(), cell(r.cd), cell(r.emd), cell(r.siou), cell(r.radius_err), cell(r.thickness_err)])
                    .map_err(csv_err)?;
            }
            w.flush()?;
        }
        fs::write(dir.join("report.csv"), buf)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::{sdf_hollow_cylinder, sdf_sphere};

    #[test]
    fn grid_nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..500).map(|_| [rng.gen(), rng.gen::<f64>() * 0.1, rng.gen()]).collect();
        let grid = PointGrid::new(&pts).unwrap();
        for _ in 0..200 {
            let q = [rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0)];
            let brute = pts.iter().map(|p| math::dist2(q, *p)).fold(f64::INFINITY, f64::min);
            assert_eq!(grid.nearest(q).0, brute);
        }
    }

    #[test]
    fn chamfer_hand_case() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert!(chamfer(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn emd_single_pair_and_mismatch() {
        let e = emd(&[[0.0; 3]], &[[0.0, 3.0, 4.0]]).unwrap();
        assert_eq!(e.value, 5.0);
        assert!(e.epsilon.is_none());
        assert!(emd(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn tube_detection_on_analytic_tube() {
        let f = |pts: &[Vec3]| Ok(pts.iter().map(|p| sdf_hollow_cylinder(0.4, 0.1, 0.5, *p)).collect());
        let d = detect_tube(&f, 0.0).unwrap();
        assert!((d.radius - 0.4).abs() <= hough_bin_width());
        assert!((d.thickness - 0.1).abs() <= hough_bin_width());
        let s = |pts: &[Vec3]| Ok(pts.iter().map(|p| sdf_sphere(0.5, *p)).collect());
        assert!(matches!(detect_tube(&s, 0.0), Err(Error::NoDetection(_))));
    }

    #[test]
    fn shell_iou_extremes() {
        let a = |pts: &[Vec3]| Ok(pts.iter().map(|p| sdf_sphere(0.3, math::sub(*p, [-0.5, 0.0, 0.0]))).collect());
        let b = |pts: &[Vec3]| Ok(pts.iter().map(|p| sdf_sphere(0.3, math::sub(*p, [0.5, 0.0, 0.0]))).collect());
        assert_eq!(shell_iou(&a, &a, 32).unwrap(), 1.0);
        assert_eq!(shell_iou(&a, &b, 32).unwrap(), 0.0);
        assert!(shell_iou(&a, &b, 4).is_err());
    }
}
