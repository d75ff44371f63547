//! Marching-cubes extraction of the zero level set and mesh export.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::sdf::math::{self, Vec3};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

/// Flat arrays for JSON transport.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshJson {
    pub positions: Vec<f32>,
    pub indices: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells per axis.
    pub resolution: usize,
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::cube(128)
    }
}

impl GridSpec {
    /// `[−1, 1]³` with `resolution` cells per axis.
    pub fn cube(resolution: usize) -> Self {
        Self { resolution, min: [-1.0; 3], max: [1.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config(format!("grid resolution {} < 2", self.resolution)));
        }
        if (0..3).any(|i| !(self.max[i] > self.min[i]) || !self.min[i].is_finite() || !self.max[i].is_finite()) {
            return Err(Error::Config("grid bounds must be finite with max > min".into()));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> Vec3 {
        let r = self.resolution as f64;
        [(self.max[0] - self.min[0]) / r, (self.max[1] - self.min[1]) / r, (self.max[2] - self.min[2]) / r]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = self.cell_size();
        [self.min[0] + i as f64 * c[0], self.min[1] + j as f64 * c[1], self.min[2] + k as f64 * c[2]]
    }
}

// Corner c of a cell sits at offset (c & 1, c >> 1 & 1, c >> 2 & 1).
const EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
];

// Corners of each face in cyclic order.
const FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 3, 7, 6],
    [0, 1, 3, 2],
    [4, 5, 7, 6],
];

fn edge_index(a: usize, b: usize) -> usize {
    EDGES.iter().position(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)).expect("corners share an edge")
}

/// Polygons (as edge-index loops) for one corner sign pattern. Bit `c` of
/// `case` is set when corner `c` is inside. Ambiguous faces always keep
/// the inside corners apart, a rule local to the face, so neighbouring
/// cells agree and the surface has no cracks.
fn case_polygons(case: usize) -> Vec<Vec<usize>> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut next: HashMap<usize, Vec<usize>> = HashMap::new();
    for face in FACES {
        let crossing: Vec<usize> = (0..4)
            .filter(|&i| inside(face[i]) != inside(face[(i + 1) % 4]))
            .collect();
        let seg_edges = |i: usize| edge_index(face[i], face[(i + 1) % 4]);
        let pairs: Vec<(usize, usize)> = match crossing.len() {
            0 => vec![],
            2 => vec![(seg_edges(crossing[0]), seg_edges(crossing[1]))],
            4 => (0..4)
                .filter(|&i| inside(face[i]))
                .map(|i| (seg_edges((i + 3) % 4), seg_edges(i)))
                .collect(),
            _ => unreachable!("a face has an even number of sign changes"),
        };
        for (a, b) in pairs {
            next.entry(a).or_default().push(b);
            next.entry(b).or_default().push(a);
        }
    }
    let mut loops = Vec::new();
    let mut used = [false; 12];
    for start in 0..12 {
        if used[start] || !next.contains_key(&start) {
            continue;
        }
        let mut poly = vec![start];
        used[start] = true;
        let mut prev = usize::MAX;
        let mut cur = start;
        loop {
            let nb = &next[&cur];
            // Two faces meet at each crossing edge, so every node has
            // exactly two distinct neighbours.
            let n = if nb[0] != prev { nb[0] } else { nb[1] };
            if n == start {
                break;
            }
            used[n] = true;
            poly.push(n);
            prev = cur;
            cur = n;
        }
        loops.push(poly);
    }
    loops
}

fn case_table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..256)
            .map(|case| {
                case_polygons(case)
                    .into_iter()
                    .flat_map(|p| (1..p.len() - 1).map(move |i| [p[0], p[i], p[i + 1]]).collect::<Vec<_>>())
                    .collect()
            })
            .collect()
    })
}

/// Number of triangles per case, for inspection.
pub fn case_triangle_counts() -> Vec<usize> {
    case_table().iter().map(Vec::len).collect()
}

/// Samples `f` on the grid, in z slabs so a batch evaluator sees large
/// chunks. Values are indexed `i + (R+1)(j + (R+1)k)`.
pub fn sample_grid<F>(f: &F, grid: &GridSpec) -> Result<Vec<f64>>
where
    F: Fn(&[Vec3]) -> Result<Vec<f64>> + Sync,
{
    grid.validate()?;
    let n = grid.resolution + 1;
    let slabs: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut pts = Vec::with_capacity(n * n);
            for j in 0..n {
                for i in 0..n {
                    pts.push(grid.point(i, j, k));
                }
            }
            let v = f(&pts)?;
            if v.len() != pts.len() {
                return Err(Error::LengthMismatch { context: "grid slab values", expected: pts.len(), actual: v.len() });
            }
            if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("SDF at grid point ({}, {}, {k})", bad % n, bad / n),
                });
            }
            Ok(v)
        })
        .collect();
    let mut out = Vec::with_capacity(n * n * n);
    for s in slabs {
        out.extend(s?);
    }
    Ok(out)
}

/// Marching cubes at the zero level of `f`. Inside is negative. Vertices
/// are emitted per cell; use [`Mesh::weld`] to share them.
pub fn marching_cubes<F>(f: &F, grid: &GridSpec) -> Result<Mesh>
where
    F: Fn(&[Vec3]) -> Result<Vec<f64>> + Sync,
{
    let values = sample_grid(f, grid)?;
    Ok(mesh_from_grid(&values, grid))
}

/// Triangulates pre-sampled grid values.
pub fn mesh_from_grid(values: &[f64], grid: &GridSpec) -> Mesh {
    let r = grid.resolution;
    let n = r + 1;
    let table = case_table();
    let idx = |i: usize, j: usize, k: usize| i + n * (j + n * k);
    let per_slab: Vec<Mesh> = (0..r)
        .into_par_iter()
        .map(|k| {
            let mut m = Mesh::default();
            for j in 0..r {
                for i in 0..r {
                    let mut v = [0.0; 8];
                    let mut case = 0;
                    for (c, vc) in v.iter_mut().enumerate() {
                        *vc = values[idx(i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1))];
                        if *vc < 0.0 {
                            case |= 1 << c;
                        }
                    }
                    if case == 0 || case == 255 {
                        continue;
                    }
                    let corner = |c: usize| grid.point(i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1));
                    let mut edge_vertex = [u32::MAX; 12];
                    for tri in &table[case] {
                        let mut ids = [0u32; 3];
                        for (slot, &e) in tri.iter().enumerate() {
                            if edge_vertex[e] == u32::MAX {
                                let (a, b) = EDGES[e];
                                let t = v[a] / (v[a] - v[b]);
                                let (pa, pb) = (corner(a), corner(b));
                                let p = math::add(pa, math::scale(math::sub(pb, pa), t));
                                edge_vertex[e] = m.vertices.len() as u32;
                                m.vertices.push(p);
                            }
                            ids[slot] = edge_vertex[e];
                        }
                        let (a, b, c) = (m.vertices[ids[0] as usize], m.vertices[ids[1] as usize], m.vertices[ids[2] as usize]);
                        let normal = math::cross(math::sub(b, a), math::sub(c, a));
                        let centroid = math::scale(math::add(math::add(a, b), c), 1.0 / 3.0);
                        let o = grid.point(i, j, k);
                        let cs = grid.cell_size();
                        let local = [(centroid[0] - o[0]) / cs[0], (centroid[1] - o[1]) / cs[1], (centroid[2] - o[2]) / cs[2]];
                        let g = trilinear_gradient(&v, local);
                        if math::dot(normal, [g[0] / cs[0], g[1] / cs[1], g[2] / cs[2]]) < 0.0 {
                            ids.swap(1, 2);
                        }
                        m.triangles.push(ids);
                    }
                }
            }
            m
        })
        .collect();
    let mut out = Mesh::default();
    for m in per_slab {
        let base = out.vertices.len() as u32;
        out.vertices.extend(m.vertices);
        out.triangles.extend(m.triangles.into_iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
    }
    out
}

fn trilinear_gradient(v: &[f64; 8], p: Vec3) -> Vec3 {
    let mut g = [0.0; 3];
    for (c, vc) in v.iter().enumerate() {
        let b = [c & 1, c >> 1 & 1, c >> 2 & 1];
        let w = |axis: usize| if b[axis] == 1 { p[axis] } else { 1.0 - p[axis] };
        let dw = |axis: usize| if b[axis] == 1 { 1.0 } else { -1.0 };
        g[0] += vc * dw(0) * w(1) * w(2);
        g[1] += vc * w(0) * dw(1) * w(2);
        g[2] += vc * w(0) * w(1) * dw(2);
    }
    g
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.triangles.iter().flatten().any(|&i| i as usize >= n) {
            return Err(Error::Format("triangle index out of range".into()));
        }
        if self.vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "mesh vertex".into() });
        }
        Ok(())
    }

    /// Merges vertices closer than `tol` (per coordinate) and drops
    /// triangles that collapse. A zero `tol` merges exact duplicates only.
    pub fn weld(&self, tol: f64) -> Mesh {
        if !(tol > 0.0) {
            return self.weld_exact();
        }
        let key = |p: Vec3| [(p[0] / tol).round() as i64, (p[1] / tol).round() as i64, (p[2] / tol).round() as i64];
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut remap = Vec::with_capacity(self.vertices.len());
        let mut vertices: Vec<Vec3> = Vec::new();
        for &p in &self.vertices {
            let k = key(p);
            let mut found = None;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(list) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            if let Some(&id) = list.iter().find(|&&id| {
                                let q = vertices[id as usize];
                                (0..3).all(|a| (p[a] - q[a]).abs() <= tol)
                            }) {
                                found = Some(id);
                                break 'search;
                            }
                        }
                    }
                }
            }
            let id = found.unwrap_or_else(|| {
                let id = vertices.len() as u32;
                vertices.push(p);
                buckets.entry(k).or_default().push(id);
                id
            });
            remap.push(id);
        }
        let triangles = self
            .triangles
            .iter()
            .map(|t| t.map(|i| remap[i as usize]))
            .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
            .collect();
        Mesh { vertices, triangles }
    }

    fn weld_exact(&self) -> Mesh {
        let mut ids: HashMap<[u64; 3], u32> = HashMap::new();
        let mut vertices: Vec<Vec3> = Vec::new();
        let remap: Vec<u32> = self
            .vertices
            .iter()
            .map(|&p| {
                // -0.0 and 0.0 are the same point.
                let k = p.map(|x| if x == 0.0 { 0 } else { x.to_bits() });
                *ids.entry(k).or_insert_with(|| {
                    vertices.push(p);
                    (vertices.len() - 1) as u32
                })
            })
            .collect();
        let triangles = self
            .triangles
            .iter()
            .map(|t| t.map(|i| remap[i as usize]))
            .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
            .collect();
        Mesh { vertices, triangles }
    }

    /// Connected components over shared vertex indices.
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.triangles {
            for e in [(t[0], t[1]), (t[1], t[2])] {
                let (a, b) = (find(&mut parent, e.0 as usize), find(&mut parent, e.1 as usize));
                if a != b {
                    parent[a] = b;
                }
            }
        }
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let mut roots = std::collections::HashSet::new();
        for (i, u) in used.iter().enumerate() {
            if *u {
                roots.insert(find(&mut parent, i));
            }
        }
        roots.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        0.5 * math::norm(math::cross(math::sub(b, a), math::sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Area-weighted uniform surface samples.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
        if self.triangles.is_empty() {
            return Err(Error::InvalidParams("cannot sample an empty mesh".into()));
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::InvalidParams("mesh has zero area".into()));
        }
        Ok((0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * acc;
                let t = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
                let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                math::add(a, math::add(math::scale(math::sub(b, a), r1), math::scale(math::sub(c, a), r2)))
            })
            .collect())
    }

    pub fn to_json(&self) -> MeshJson {
        MeshJson {
            positions: self.vertices.iter().flatten().map(|&x| x as f32).collect(),
            indices: self.triangles.iter().flatten().copied().collect(),
        }
    }

    pub fn write_obj(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "# partsdf mesh: {} vertices, {} triangles", self.vertices.len(), self.triangles.len())?;
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn export_obj(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_obj(&mut f)?;
        f.flush()?;
        Ok(())
    }
}
