use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::helix::Helix;
use super::{normalize_record, BoxPart, GenericPart, ShapeRecord};
use crate::error::{Error, Result};
use crate::sdf::{CompositeSpec, GeomParams, Pose, PrimitiveSpec};

pub type Range = (f64, f64);

/// Raw-unit ranges of the mixer family: a central tube, a screw tube at each
/// end carrying a ring, and a helix inside the tube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerFamilyParams {
    pub outer_radius: Range,
    pub thickness: Range,
    pub half_length: Range,
    /// Rings (and screw tubes) at the top only (1) or at both ends (2).
    pub screw_ring_count: u32,
    pub screw_radius_ratio: Range,
    pub screw_thickness_ratio: Range,
    pub screw_half_length: Range,
    pub ring_thickness: Range,
    pub ring_half_height: Range,
    pub ring_position: Range,
    pub ring_rounding: f64,
    /// Fixed strand count, or `None` to draw one of 1, 2, 3 per shape.
    pub helix_type: Option<u32>,
    pub helix_turns: Range,
    pub helix_radius: Range,
    pub helix_minor_radius: Range,
    pub helix_extent: Range,
    /// Helix tangent to the tube's inner wall; `helix_radius` is then
    /// ignored.
    #[serde(default)]
    pub helix_attached: bool,
}

impl Default for MixerFamilyParams {
    fn default() -> Self {
        Self {
            outer_radius: (0.30, 0.40),
            thickness: (0.04, 0.07),
            half_length: (0.45, 0.60),
            screw_ring_count: 2,
            screw_radius_ratio: (0.55, 0.70),
            screw_thickness_ratio: (0.8, 1.0),
            screw_half_length: (0.12, 0.18),
            ring_thickness: (0.04, 0.06),
            ring_half_height: (0.03, 0.05),
            ring_position: (0.35, 0.65),
            ring_rounding: 0.008,
            helix_type: None,
            helix_turns: (1.0, 2.0),
            helix_radius: (0.10, 0.14),
            helix_minor_radius: (0.025, 0.04),
            helix_extent: (0.7, 0.85),
            helix_attached: true,
        }
    }
}

/// Four cuboid legs under a seat-and-backrest generic part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairFamilyParams {
    pub seat_half: Range,
    pub seat_thickness: Range,
    pub leg_half_width: Range,
    pub leg_half_height: Range,
    pub back_half_thickness: Range,
    pub back_half_height: Range,
    pub leg_inset: Range,
}

impl Default for ChairFamilyParams {
    fn default() -> Self {
        Self {
            seat_half: (0.35, 0.5),
            seat_thickness: (0.03, 0.05),
            leg_half_width: (0.03, 0.05),
            leg_half_height: (0.25, 0.35),
            back_half_thickness: (0.03, 0.05),
            back_half_height: (0.25, 0.35),
            leg_inset: (0.0, 0.05),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyParams {
    Mixer(MixerFamilyParams),
    ChairToy(ChairFamilyParams),
}

impl FamilyParams {
    pub fn name(&self) -> &'static str {
        match self {
            FamilyParams::Mixer(_) => "mixer",
            FamilyParams::ChairToy(_) => "chair_toy",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mixer" => Ok(FamilyParams::Mixer(MixerFamilyParams::default())),
            "chair-toy" | "chair_toy" => Ok(FamilyParams::ChairToy(ChairFamilyParams::default())),
            other => Err(Error::UnknownKey(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges: Vec<(&str, Range)> = match self {
            FamilyParams::Mixer(m) => {
                if !(1..=2).contains(&m.screw_ring_count) {
                    return Err(Error::Config(format!("screw_ring_count {} not in 1..=2", m.screw_ring_count)));
                }
                if let Some(k) = m.helix_type {
                    if !(1..=3).contains(&k) {
                        return Err(Error::Config(format!("helix_type {k} not in 1..=3")));
                    }
                }
                vec![
                    ("outer_radius", m.outer_radius),
                    ("thickness", m.thickness),
                    ("half_length", m.half_length),
                    ("screw_radius_ratio", m.screw_radius_ratio),
                    ("screw_thickness_ratio", m.screw_thickness_ratio),
                    ("screw_half_length", m.screw_half_length),
                    ("ring_thickness", m.ring_thickness),
                    ("ring_half_height", m.ring_half_height),
                    ("ring_position", m.ring_position),
                    ("helix_turns", m.helix_turns),
                    ("helix_radius", m.helix_radius),
                    ("helix_minor_radius", m.helix_minor_radius),
                    ("helix_extent", m.helix_extent),
                ]
            }
            FamilyParams::ChairToy(c) => vec![
                ("seat_half", c.seat_half),
                ("seat_thickness", c.seat_thickness),
                ("leg_half_width", c.leg_half_width),
                ("leg_half_height", c.leg_half_height),
                ("back_half_thickness", c.back_half_thickness),
                ("back_half_height", c.back_half_height),
            ],
        };
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("range {name} = ({lo}, {hi}) must be positive and ordered")));
            }
        }
        Ok(())
    }

    /// Normalised member built from the midpoint of every range.
    pub fn template(&self) -> Result<CompositeSpec> {
        Ok(self.generate(&mut Midpoint, "template", 0)?.composite)
    }

    /// Normalised random member.
    pub fn sample(&self, rng: &mut impl Rng, id: &str, seed: u64) -> Result<ShapeRecord> {
        self.generate(&mut Random(rng), id, seed)
    }

    fn generate(&self, draw: &mut impl Draw, id: &str, seed: u64) -> Result<ShapeRecord> {
        self.validate()?;
        let raw = match self {
            FamilyParams::Mixer(m) => mixer(m, draw, id, seed)?,
            FamilyParams::ChairToy(c) => chair(c, draw, id, seed)?,
        };
        let rec = normalize_record(&raw)?;
        rec.composite.validate()?;
        Ok(rec)
    }
}

trait Draw {
    fn range(&mut self, r: Range) -> f64;
    fn pick(&mut self, n: u32) -> u32;
}

struct Midpoint;

impl Draw for Midpoint {
    fn range(&mut self, r: Range) -> f64 {
        0.5 * (r.0 + r.1)
    }
    fn pick(&mut self, n: u32) -> u32 {
        n / 2
    }
}

struct Random<'a, R: Rng>(&'a mut R);

impl<R: Rng> Draw for Random<'_, R> {
    fn range(&mut self, r: Range) -> f64 {
        if r.0 == r.1 {
            r.0
        } else {
            self.0.gen_range(r.0..r.1)
        }
    }
    fn pick(&mut self, n: u32) -> u32 {
        self.0.gen_range(0..n)
    }
}

fn mixer(m: &MixerFamilyParams, d: &mut impl Draw, id: &str, seed: u64) -> Result<ShapeRecord> {
    let a = d.range(m.outer_radius);
    let t = d.range(m.thickness);
    let l = d.range(m.half_length);
    let a_s = a * d.range(m.screw_radius_ratio);
    let t_s = t * d.range(m.screw_thickness_ratio);
    let h_s = d.range(m.screw_half_length);
    let t_r = d.range(m.ring_thickness);
    let h_r = d.range(m.ring_half_height);
    let lambda = d.range(m.ring_position);
    let strands = m.helix_type.unwrap_or_else(|| 1 + d.pick(3));
    let turns = d.range(m.helix_turns);
    let r_h = d.range(m.helix_radius);
    let r_minor = d.range(m.helix_minor_radius);
    let r_h = if m.helix_attached { a - t - r_minor } else { r_h };
    let extent = d.range(m.helix_extent);
    let phase = d.range((0.0, TAU));

    if t_s >= a_s || r_h <= r_minor || (!m.helix_attached && r_h + r_minor >= a - t) {
        return Err(Error::InvalidParams(format!(
            "mixer `{id}`: inner parts do not fit (screw {a_s}/{t_s}, helix {r_h}+{r_minor} vs inner {})",
            a - t
        )));
    }
    let ring_z = l + 2.0 * h_s * lambda;
    if h_r >= 2.0 * h_s * lambda.min(1.0 - lambda) {
        return Err(Error::InvalidParams(format!("mixer `{id}`: ring overhangs its screw tube")));
    }

    let mut geometric = vec![PrimitiveSpec::geometric("tube", GeomParams::hollow_cylinder(a, t, l), Pose::IDENTITY)];
    let mut assisted = Vec::new();
    let ends: &[(&str, f64)] = if m.screw_ring_count == 2 { &[("top", 1.0), ("bottom", -1.0)] } else { &[("top", 1.0)] };
    for &(name, s) in ends {
        geometric.push(PrimitiveSpec::geometric(
            format!("screw_{name}"),
            GeomParams::hollow_cylinder(a_s, t_s, h_s),
            Pose::from_translation([0.0, 0.0, s * (l + h_s)]),
        ));
        assisted.push(PrimitiveSpec::assisted(
            format!("ring_{name}"),
            GeomParams::hollow_cylinder(a_s + t_r, t_r, h_r),
            Pose::from_translation([0.0, 0.0, s * ring_z]),
            "ring",
        ));
    }
    let helix = Helix {
        strands,
        radius: r_h,
        minor_radius: r_minor,
        turns,
        z_min: -extent * l + r_minor,
        z_max: extent * l - r_minor,
        phase,
        center: [0.0; 3],
    };
    Ok(ShapeRecord {
        id: id.to_string(),
        composite: CompositeSpec::new(geometric, assisted)?,
        generic: GenericPart::Helix(helix),
        assist_rounding: m.ring_rounding,
        has_part_labels: false,
        seed,
    })
}

fn chair(c: &ChairFamilyParams, d: &mut impl Draw, id: &str, seed: u64) -> Result<ShapeRecord> {
    let sx = d.range(c.seat_half);
    let sy = d.range(c.seat_half);
    let st = d.range(c.seat_thickness);
    let lw = d.range(c.leg_half_width);
    let lh = d.range(c.leg_half_height);
    let bt = d.range(c.back_half_thickness);
    let bh = d.range(c.back_half_height);
    let inset = d.range(c.leg_inset);
    if lw + inset >= sx.min(sy) || bt >= sy {
        return Err(Error::InvalidParams(format!("chair `{id}`: legs or back do not fit the seat")));
    }
    let seat = BoxPart { half: [sx, sy, st], center: [0.0; 3] };
    let back = BoxPart { half: [sx, bt, bh], center: [0.0, sy - bt, st + bh] };
    let mut geometric = Vec::new();
    for (name, ux, uy) in [("leg_fl", -1.0, -1.0), ("leg_fr", 1.0, -1.0), ("leg_bl", -1.0, 1.0), ("leg_br", 1.0, 1.0)] {
        geometric.push(PrimitiveSpec::geometric(
            name,
            GeomParams::cuboid([lw, lw, lh]),
            Pose::from_translation([ux * (sx - lw - inset), uy * (sy - lw - inset), -st - lh]),
        ));
    }
    Ok(ShapeRecord {
        id: id.to_string(),
        composite: CompositeSpec::new(geometric, Vec::new())?,
        generic: GenericPart::Boxes { boxes: vec![seat, back] },
        assist_rounding: 0.0,
        has_part_labels: false,
        seed,
    })
}
