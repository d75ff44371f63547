#![allow(dead_code)]

pub mod gradsuite;

use std::f64::consts::PI;

use partsdf::autodiff::{Mat, ParamStore, Tape, Var};
use partsdf::sdf::{contains, PrimitiveKind, PrimitiveSpec, Vec3};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that near-zero gradients
/// are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub const ORACLE_SAMPLES: usize = 100_000;
pub const ORACLE_TOL: f64 = 1e-4;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central differences are only an oracle where the function is smooth
/// over the step. An entry failing at [`FD_STEP`] is retried at this step
/// and, if it then agrees, counted as straddling a kink.
pub const FD_STEP_FINE: f64 = 1e-7;
/// Largest tolerated fraction of kink-straddling entries.
pub const MAX_KINK_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub entries: usize,
    pub kinks: usize,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.worst < GRAD_TOL && (self.kinks as f64) <= MAX_KINK_FRACTION * self.entries as f64
    }
}

/// Compares tape gradients with central differences over every entry of
/// every parameter block and every leaf input.
///
/// `f` builds a scalar from `state`; it must fetch parameters with the
/// `trainable` flag it receives and treat `leaves` as inputs.
pub fn gradcheck<S, F>(state: &mut S, store: fn(&mut S) -> &mut ParamStore, leaves: &[Mat], f: F) -> GradReport
where
    F: Fn(&mut Tape, &S, &[Var], bool) -> Var,
{
    store(state).zero_grads();
    let mut t = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|m| t.leaf(m.clone())).collect();
    let out = f(&mut t, state, &vars, true);
    t.backward(out).expect("backward");
    t.accumulate_param_grads(store(state));
    let leaf_grads: Vec<Mat> = vars
        .iter()
        .zip(leaves)
        .map(|(v, m)| t.grad(*v).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
        .collect();

    let eval = |state: &S, leaves: &[Mat]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = leaves.iter().map(|m| t.constant(m.clone())).collect();
        let o = f(&mut t, state, &vs, false);
        t.scalar(o)
    };
    let mut report = GradReport::default();
    let mut record = |tape: f64, fd: &mut dyn FnMut(f64) -> f64| {
        report.entries += 1;
        let mut e = rel_error(tape, fd(FD_STEP));
        if e >= GRAD_TOL {
            let fine = rel_error(tape, fd(FD_STEP_FINE));
            if fine < GRAD_TOL {
                report.kinks += 1;
                e = fine;
            }
        }
        report.worst = report.worst.max(e);
    };

    let ids: Vec<_> = store(state).ids().collect();
    for id in ids {
        for j in 0..store(state).get(id).len() {
            let g = store(state).get(id).grads[j];
            let x = store(state).get(id).values[j];
            let mut fd = |h: f64| {
                store(state).get_mut(id).values[j] = x + h;
                let fp = eval(state, leaves);
                store(state).get_mut(id).values[j] = x - h;
                let fm = eval(state, leaves);
                store(state).get_mut(id).values[j] = x;
                (fp - fm) / (2.0 * h)
            };
            record(g, &mut fd);
        }
    }
    let mut shifted = leaves.to_vec();
    for n in 0..leaves.len() {
        for j in 0..leaves[n].len() {
            let x = leaves[n].data[j];
            let mut fd = |h: f64| {
                shifted[n].data[j] = x + h;
                let fp = eval(state, &shifted);
                shifted[n].data[j] = x - h;
                let fm = eval(state, &shifted);
                shifted[n].data[j] = x;
                (fp - fm) / (2.0 * h)
            };
            record(leaf_grads[n].data[j], &mut fd);
        }
    }
    report
}

pub fn own_store(s: &mut ParamStore) -> &mut ParamStore {
    s
}

pub fn random_mat(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

pub fn random_in_ball<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return p;
        }
    }
}

/// One parametrized surface patch `(u, v) -> point` in the primitive frame.
/// `periodic_u` marks an angular coordinate.
struct Patch {
    map: Box<dyn Fn(f64, f64) -> Vec3>,
    u: (f64, f64),
    v: (f64, f64),
    periodic_u: bool,
    /// Physical extents along u and v, for grid aspect ratios.
    extent: (f64, f64),
    area: f64,
}

fn lateral(r: f64, h: f64) -> Patch {
    Patch {
        map: Box::new(move |u, v| [r * u.cos(), r * u.sin(), v]),
        u: (0.0, 2.0 * PI),
        v: (-h, h),
        periodic_u: true,
        extent: (2.0 * PI * r, 2.0 * h),
        area: 4.0 * PI * r * h,
    }
}

/// Annulus at height `z`, uniform in area through `s = ρ²`.
fn disk(r_in: f64, r_out: f64, z: f64) -> Patch {
    Patch {
        map: Box::new(move |u, s| {
            let rho = s.max(0.0).sqrt();
            [rho * u.cos(), rho * u.sin(), z]
        }),
        u: (0.0, 2.0 * PI),
        v: (r_in * r_in, r_out * r_out),
        periodic_u: true,
        extent: (2.0 * PI * r_out, r_out - r_in),
        area: PI * (r_out * r_out - r_in * r_in),
    }
}

fn face(axis: usize, sign: f64, half: Vec3) -> Patch {
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    Patch {
        map: Box::new(move |u, v| {
            let mut p = [0.0; 3];
            p[axis] = sign * half[axis];
            p[a] = u;
            p[b] = v;
            p
        }),
        u: (-half[a], half[a]),
        v: (-half[b], half[b]),
        periodic_u: false,
        extent: (2.0 * half[a], 2.0 * half[b]),
        area: 4.0 * half[a] * half[b],
    }
}

fn patches(kind: PrimitiveKind, v: &[f64]) -> Vec<Patch> {
    match kind {
        PrimitiveKind::Sphere => {
            let r = v[0];
            vec![Patch {
                map: Box::new(move |u, z| {
                    let rho = (r * r - z * z).max(0.0).sqrt();
                    [rho * u.cos(), rho * u.sin(), z]
                }),
                u: (0.0, 2.0 * PI),
                v: (-r, r),
                periodic_u: true,
                extent: (2.0 * PI * r, PI * r),
                area: 4.0 * PI * r * r,
            }]
        }
        PrimitiveKind::Cylinder => vec![lateral(v[0], v[1]), disk(0.0, v[0], v[1]), disk(0.0, v[0], -v[1])],
        PrimitiveKind::HollowCylinder => {
            let (a, t, h) = (v[0], v[1], v[2]);
            vec![lateral(a, h), lateral(a - t, h), disk(a - t, a, h), disk(a - t, a, -h)]
        }
        PrimitiveKind::Cuboid => {
            let half = [v[0], v[1], v[2]];
            (0..3).flat_map(|ax| [face(ax, 1.0, half), face(ax, -1.0, half)]).collect()
        }
    }
}

fn d2(a: Vec3, b: Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Dense surface sampling of a primitive, for brute-force distances.
pub struct SurfaceOracle {
    spec: PrimitiveSpec,
    patches: Vec<Patch>,
    /// (patch, u, v, world point) of the dense grid.
    samples: Vec<(usize, f64, f64, Vec3)>,
    /// Grid spacing per patch in parameter units.
    steps: Vec<(f64, f64)>,
}

const REFINE_CANDIDATES: usize = 16;
const REFINE_LEVELS: usize = 10;
const REFINE_GRID: usize = 11;
const REFINE_SHRINK: f64 = 4.0;

impl SurfaceOracle {
    pub fn new(spec: &PrimitiveSpec, total: usize) -> Self {
        let patches = patches(spec.kind(), &spec.params.values);
        let area: f64 = patches.iter().map(|p| p.area).sum();
        let mut samples = Vec::with_capacity(total + patches.len() * 8);
        let mut steps = Vec::with_capacity(patches.len());
        for (k, p) in patches.iter().enumerate() {
            let n = ((total as f64) * p.area / area).max(4.0);
            let aspect = p.extent.0 / p.extent.1.max(1e-12);
            let nu = ((n * aspect).sqrt().ceil() as usize).max(2);
            let nv = ((n / nu as f64).ceil() as usize).max(2);
            let du = (p.u.1 - p.u.0) / if p.periodic_u { nu as f64 } else { (nu - 1) as f64 };
            let dv = (p.v.1 - p.v.0) / (nv - 1) as f64;
            for i in 0..nu {
                for j in 0..nv {
                    let (u, v) = (p.u.0 + i as f64 * du, p.v.0 + j as f64 * dv);
                    samples.push((k, u, v, spec.pose.apply((p.map)(u, v))));
                }
            }
            steps.push((du, dv));
        }
        Self { spec: spec.clone(), patches, samples, steps }
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Unsigned distance: nearest dense sample, then nested local grids
    /// around the closest candidates.
    pub fn distance(&self, p: Vec3) -> f64 {
        let mut scored: Vec<(f64, usize)> = self.samples.iter().enumerate().map(|(i, s)| (d2(p, s.3), i)).collect();
        let pool = (REFINE_CANDIDATES * 64).min(scored.len());
        scored.select_nth_unstable_by(pool - 1, |a, b| a.0.total_cmp(&b.0));
        scored.truncate(pool);
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Pole and disk-centre samples coincide; keep distinct points only.
        let mut picked: Vec<usize> = Vec::with_capacity(REFINE_CANDIDATES);
        for &(_, i) in &scored {
            if picked.len() == REFINE_CANDIDATES {
                break;
            }
            if picked.iter().all(|&j| d2(self.samples[i].3, self.samples[j].3) > 1e-20) {
                picked.push(i);
            }
        }
        let mut best = f64::INFINITY;
        for &i in &picked {
            let (pi, mut u, mut v, _) = self.samples[i];
            let patch = &self.patches[pi];
            let (mut du, mut dv) = self.steps[pi];
            let mut local = f64::INFINITY;
            for _ in 0..REFINE_LEVELS {
                let (mut bu, mut bv) = (u, v);
                let half = (REFINE_GRID / 2) as f64;
                for a in 0..REFINE_GRID {
                    for b in 0..REFINE_GRID {
                        let mut uu = u + (a as f64 - half) / half * du;
                        let vv = (v + (b as f64 - half) / half * dv).clamp(patch.v.0, patch.v.1);
                        if !patch.periodic_u {
                            uu = uu.clamp(patch.u.0, patch.u.1);
                        }
                        let q = self.spec.pose.apply((patch.map)(uu, vv));
                        let d = d2(p, q);
                        if d < local {
                            local = d;
                            bu = uu;
                            bv = vv;
                        }
                    }
                }
                u = bu;
                v = bv;
                du /= REFINE_SHRINK;
                dv /= REFINE_SHRINK;
            }
            best = best.min(local);
        }
        best.sqrt()
    }

    /// Signed by the membership test, never by a distance formula.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let d = self.distance(p);
        if contains(self.spec.kind(), &self.spec.params.values, self.spec.pose.transform_point(p)) {
            -d
        } else {
            d
        }
    }
}

pub struct OracleReport {
    pub max_error: f64,
    pub sign_agreement: f64,
}

/// Compares `spec.sdf` with the dense oracle at `n` random points of the
/// unit ball.
pub fn oracle_check(spec: &PrimitiveSpec, n: usize, rng: &mut impl Rng) -> OracleReport {
    let oracle = SurfaceOracle::new(spec, ORACLE_SAMPLES);
    let mut max_error = 0.0f64;
    let mut agree = 0;
    for _ in 0..n {
        let p = random_in_ball(rng);
        let analytic = spec.sdf(p);
        let brute = oracle.signed_distance(p);
        max_error = max_error.max((analytic.abs() - brute.abs()).abs());
        let inside = contains(spec.kind(), &spec.params.values, spec.pose.transform_point(p));
        if (analytic < 0.0) == inside {
            agree += 1;
        }
    }
    OracleReport { max_error, sign_agreement: agree as f64 / n as f64 }
}

/// One randomly sized and posed primitive of each kind, fitting in the
/// unit ball.
pub fn random_primitives(rng: &mut impl Rng) -> Vec<PrimitiveSpec> {
    use partsdf::sdf::{GeomParams, Pose};
    let pose = |rng: &mut dyn rand::RngCore| {
        let axis = random_in_ball(rng);
        let angle = rng.gen_range(0.0..PI);
        let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        Pose {
            rotation: [axis[0] / n * angle, axis[1] / n * angle, axis[2] / n * angle],
            translation: [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)],
        }
    };
    let outer = rng.gen_range(0.2..0.5);
    vec![
        PrimitiveSpec::geometric("sphere", GeomParams::sphere(rng.gen_range(0.1..0.6)), pose(rng)),
        PrimitiveSpec::geometric(
            "cylinder",
            GeomParams::cylinder(rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)),
            pose(rng),
        ),
        PrimitiveSpec::geometric(
            "hollow",
            GeomParams::hollow_cylinder(outer, outer * rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.5)),
            pose(rng),
        ),
        PrimitiveSpec::geometric(
            "cuboid",
            GeomParams::cuboid([rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4)]),
            pose(rng),
        ),
    ]
}

/// Deliberately tiny networks on the mixer template, so that every weight
/// can be finite-differenced.
pub fn small_model(
    variant: partsdf::model::Variant,
    use_point_encoder: bool,
    learn_rotation: bool,
    seed: u64,
) -> partsdf::model::ModelBundle {
    use partsdf::model::{ModelBundle, ModelMeta, MODEL_FORMAT_VERSION};
    use partsdf::nets::{ArchConfig, DecoderConfig, EncoderConfig, LatentDecoderConfig, Layout, PartDecoderConfig};
    use partsdf::shapegen::FamilyParams;
    let template = FamilyParams::from_name("mixer").unwrap().template().unwrap();
    let part = PartDecoderConfig { num_layers: 2, hidden_width: 6, assist_dim: 2 };
    let layout = Layout::from_template(&template, part.assist_dim, learn_rotation).unwrap();
    let arch = ArchConfig {
        generic: DecoderConfig { num_layers: 3, hidden_width: 8, skip_layer: Some(1), input_size: layout.geom_dim() + 4 },
        part,
        encoder: EncoderConfig { point_widths: vec![6, 6], head_width: 6 },
        latent_decoder: LatentDecoderConfig { trunk_width: 8, branch_width: 6 },
        learn_rotation,
        detach_geom_input: false,
        sdf_output_bias: 0.05,
    };
    let meta = ModelMeta {
        format_version: MODEL_FORMAT_VERSION,
        variant,
        arch,
        weights: Default::default(),
        template,
        use_point_encoder,
        encoder_points: 16,
        shape_ids: vec!["a".into(), "b".into()],
    };
    ModelBundle::new(meta, 0.1, seed).unwrap()
}
