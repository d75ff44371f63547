use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::families::FamilyParams;
use super::sampling::{inject_label_noise, sample_sdf, sample_surface_points, SampleSet};
use super::ShapeRecord;
use crate::error::{Error, Result};
use crate::sdf::{CompositeSpec, Vec3};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const SAMPLE_MAGIC: [u8; 4] = *b"PSDF";
pub const SAMPLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    pub rate: f64,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub family: FamilyParams,
    pub train_count: usize,
    pub test_count: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub samples_per_shape: usize,
    pub cloud_points: usize,
    #[serde(default)]
    pub label_noise: Option<LabelNoise>,
}

impl DatasetConfig {
    pub fn new(family: FamilyParams, train_count: usize, test_count: usize, seed: u64) -> Self {
        Self {
            family,
            train_count,
            test_count,
            labeled_fraction: 1.0 / 15.0,
            seed,
            samples_per_shape: 50_000,
            cloud_points: 10_000,
            label_noise: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::Config(format!("labeled fraction {} outside [0, 1]", self.labeled_fraction)));
        }
        if self.samples_per_shape == 0 || self.cloud_points == 0 {
            return Err(Error::Config("sample and cloud counts must be positive".into()));
        }
        if let Some(n) = &self.label_noise {
            if !(0.0..=1.0).contains(&n.rate) || !(n.magnitude >= 0.0) {
                return Err(Error::Config(format!("label noise rate {} / magnitude {}", n.rate, n.magnitude)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub has_part_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub template: CompositeSpec,
    pub shapes: Vec<ManifestEntry>,
}

/// Records, query samples and surface clouds of one dataset, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<ShapeRecord>,
    pub samples: Vec<SampleSet>,
    pub clouds: Vec<Vec<Vec3>>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.manifest.shapes[i].split == split).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}

/// Whether training shape `i` carries part labels: evenly spread so that
/// `⌊n·fraction⌋` of the first n shapes are labelled.
pub fn is_labelled(i: usize, fraction: f64) -> bool {
    let f = |n: usize| (n as f64 * fraction + 1e-9).floor();
    f(i + 1) > f(i)
}

fn shape_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 8) | stream);
    rng
}

fn shape_record(cfg: &DatasetConfig, i: usize) -> Result<ShapeRecord> {
    let split = if i < cfg.train_count { Split::Train } else { Split::Test };
    let id = format!("{}_{i:04}", cfg.family.name());
    let mut rng = shape_rng(cfg.seed, i, 0);
    let mut rec = cfg.family.sample(&mut rng, &id, cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
    rec.has_part_labels = split == Split::Train && is_labelled(i, cfg.labeled_fraction);
    Ok(rec)
}

fn shape_cloud(cfg: &DatasetConfig, i: usize, rec: &ShapeRecord) -> Vec<Vec3> {
    sample_surface_points(rec, cfg.cloud_points, &mut shape_rng(cfg.seed, i, 2))
}

fn shape_samples(cfg: &DatasetConfig, i: usize, rec: &ShapeRecord) -> SampleSet {
    let mut s = sample_sdf(rec, cfg.samples_per_shape, &mut shape_rng(cfg.seed, i, 1));
    if let Some(n) = &cfg.label_noise {
        inject_label_noise(&mut s, n.rate, n.magnitude, &mut shape_rng(cfg.seed, i, 3));
    }
    s
}

/// Deterministic in `cfg`; shape `i` uses its own random streams.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.train_count + cfg.test_count;
    let records = (0..n).map(|i| shape_record(cfg, i)).collect::<Result<Vec<_>>>()?;
    let samples: Vec<SampleSet> = records.par_iter().enumerate().map(|(i, r)| shape_samples(cfg, i, r)).collect();
    let clouds: Vec<Vec<Vec3>> = records.par_iter().enumerate().map(|(i, r)| shape_cloud(cfg, i, r)).collect();
    let shapes = records
        .iter()
        .enumerate()
        .map(|(i, r)| ManifestEntry {
            id: r.id.clone(),
            split: if i < cfg.train_count { Split::Train } else { Split::Test },
            has_part_labels: r.has_part_labels,
        })
        .collect();
    Ok(Dataset {
        manifest: Manifest {
            format_version: DATASET_FORMAT_VERSION,
            config: cfg.clone(),
            template: cfg.family.template()?,
            shapes,
        },
        records,
        samples,
        clouds,
    })
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("shapes"))?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&data.manifest)? + "\n")?;
    for (rec, s) in data.records.iter().zip(&data.samples) {
        fs::write(dir.join("shapes").join(format!("{}.json", rec.id)), serde_json::to_string_pretty(rec)? + "\n")?;
        write_samples(&dir.join("shapes").join(format!("{}.bin", rec.id)), s)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("dataset format {} (expected {DATASET_FORMAT_VERSION})", m.format_version)));
    }
    Ok(m)
}

/// Loads records and samples; clouds are regenerated from the config.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut records = Vec::with_capacity(manifest.shapes.len());
    let mut samples = Vec::with_capacity(manifest.shapes.len());
    for e in &manifest.shapes {
        let path = dir.join("shapes").join(format!("{}.json", e.id));
        let rec: ShapeRecord = serde_json::from_str(&fs::read_to_string(&path)?)?;
        rec.composite.validate()?;
        samples.push(read_samples(&dir.join("shapes").join(format!("{}.bin", e.id)))?);
        records.push(rec);
    }
    let cfg = &manifest.config;
    let clouds = records.par_iter().enumerate().map(|(i, r)| shape_cloud(cfg, i, r)).collect();
    Ok(Dataset { manifest, records, samples, clouds })
}

/// Header `magic, version, K, part count` then little-endian f32 records
/// `x, y, z, sdf_full, part values…`.
pub fn write_samples(path: &Path, s: &SampleSet) -> Result<()> {
    let parts = s.parts.as_ref().map_or(0, Vec::len);
    let mut buf = Vec::with_capacity(16 + s.len() * (4 + parts) * 4);
    buf.extend_from_slice(&SAMPLE_MAGIC);
    buf.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(parts as u32).to_le_bytes());
    for k in 0..s.len() {
        let p = s.points[k];
        for v in [p[0], p[1], p[2], s.sdf_full[k]] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(ps) = &s.parts {
            for stream in ps {
                buf.extend_from_slice(&(stream[k] as f32).to_le_bytes());
            }
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<SampleSet> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || buf[..4] != SAMPLE_MAGIC {
        return Err(Error::Format(format!("{} is not a sample file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != SAMPLE_VERSION {
        return Err(Error::Format(format!("sample file version {}", word(4))));
    }
    let (k, parts) = (word(8) as usize, word(12) as usize);
    let stride = 4 + parts;
    if buf.len() != 16 + k * stride * 4 {
        return Err(Error::Format(format!("{}: truncated sample file", path.display())));
    }
    let f = |i: usize| f32::from_le_bytes(buf[16 + 4 * i..20 + 4 * i].try_into().expect("4 bytes")) as f64;
    let mut points = Vec::with_capacity(k);
    let mut sdf_full = Vec::with_capacity(k);
    let mut streams = vec![Vec::with_capacity(k); parts];
    for r in 0..k {
        let base = r * stride;
        points.push([f(base), f(base + 1), f(base + 2)]);
        sdf_full.push(f(base + 3));
        for (j, s) in streams.iter_mut().enumerate() {
            s.push(f(base + 4 + j));
        }
    }
    Ok(SampleSet { points, sdf_full, parts: (parts > 0).then_some(streams) })
}
