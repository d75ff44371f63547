use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::sdf::math::{self, Vec3};

/// Tubular sweep of a circle of radius `minor_radius` along `strands`
/// interleaved helices around the z axis. The tube ends are hemispherical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Helix {
    pub strands: u32,
    pub radius: f64,
    pub minor_radius: f64,
    pub turns: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub phase: f64,
    pub center: Vec3,
}

const GOLDEN_ITERS: usize = 48;

impl Helix {
    /// Point at curve parameter `u ∈ [0, 1]` of strand `s`.
    pub fn curve(&self, s: u32, u: f64) -> Vec3 {
        let angle = self.phase + TAU * (self.turns * u + s as f64 / self.strands as f64);
        [
            self.center[0] + self.radius * angle.cos(),
            self.center[1] + self.radius * angle.sin(),
            self.center[2] + self.z_min + u * (self.z_max - self.z_min),
        ]
    }

    /// Unit tangent and curve speed `|dc/du|`.
    pub fn tangent(&self, s: u32, u: f64) -> (Vec3, f64) {
        let angle = self.phase + TAU * (self.turns * u + s as f64 / self.strands as f64);
        let w = TAU * self.turns * self.radius;
        let d = [-w * angle.sin(), w * angle.cos(), self.z_max - self.z_min];
        let speed = math::norm(d);
        (math::scale(d, 1.0 / speed), speed)
    }

    pub fn length(&self) -> f64 {
        self.tangent(0, 0.0).1
    }

    fn coarse_samples(&self) -> usize {
        ((self.turns * 64.0).ceil() as usize).max(32)
    }

    /// Curve parameter of the closest point on strand `s` and its squared distance.
    pub fn closest_on_strand(&self, s: u32, p: Vec3) -> (f64, f64) {
        let n = self.coarse_samples();
        let step = 1.0 / n as f64;
        let d2: Vec<f64> = (0..=n).map(|i| math::dist2(p, self.curve(s, i as f64 * step))).collect();
        let best_coarse = d2.iter().copied().fold(f64::INFINITY, f64::min);
        // A sample lies within half an arc step of the true closest point.
        let slack = 0.5 * step * self.length();
        let bound = (best_coarse.sqrt() + slack).powi(2);
        let mut best = (0.0, f64::INFINITY);
        for i in 0..=n {
            let left = if i > 0 { d2[i - 1] } else { f64::INFINITY };
            let right = if i < n { d2[i + 1] } else { f64::INFINITY };
            if d2[i] > left || d2[i] > right || d2[i] > bound {
                continue;
            }
            let lo = (i as f64 - 1.0).max(0.0) * step;
            let hi = ((i + 1) as f64).min(n as f64) * step;
            let (u, v) = self.golden(s, p, lo, hi);
            if v < best.1 {
                best = (u, v);
            }
        }
        best
    }

    fn golden(&self, s: u32, p: Vec3, mut a: f64, mut b: f64) -> (f64, f64) {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let f = |u: f64| math::dist2(p, self.curve(s, u));
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        for _ in 0..GOLDEN_ITERS {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = f(d);
            }
        }
        // Endpoints of the bracket may be the true minimiser (curve ends).
        let mut best = if fc < fd { (c, fc) } else { (d, fd) };
        for u in [a, b] {
            let v = f(u);
            if v < best.1 {
                best = (u, v);
            }
        }
        best
    }

    /// Distance to the nearest strand centreline minus the minor radius.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for s in 0..self.strands {
            best = best.min(self.closest_on_strand(s, p).1);
        }
        best.sqrt() - self.minor_radius
    }

    /// Lateral tube area plus the two hemispherical caps.
    pub fn area(&self) -> f64 {
        self.strands as f64 * (TAU * self.minor_radius * self.length() + 2.0 * TAU * self.minor_radius.powi(2))
    }

    /// Largest norm over the solid, attained at the strand ends.
    pub fn max_norm(&self) -> f64 {
        (0..self.strands)
            .flat_map(|s| [self.curve(s, 0.0), self.curve(s, 1.0)])
            .map(math::norm)
            .fold(0.0, f64::max)
            + self.minor_radius
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let e = self.radius + self.minor_radius;
        (
            [self.center[0] - e, self.center[1] - e, self.center[2] + self.z_min - self.minor_radius],
            [self.center[0] + e, self.center[1] + e, self.center[2] + self.z_max + self.minor_radius],
        )
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            radius: self.radius * k,
            minor_radius: self.minor_radius * k,
            z_min: self.z_min * k,
            z_max: self.z_max * k,
            center: math::scale(self.center, k),
            ..self.clone()
        }
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        Self { center: math::add(self.center, offset), ..self.clone() }
    }

    /// Surface point from unit random numbers: `a` picks lateral vs caps and
    /// the position along the curve, `b` the angle around it, `c` the cap
    /// elevation.
    pub fn surface_point(&self, strand: u32, a: f64, b: f64, c: f64) -> Vec3 {
        let r = self.minor_radius;
        let lateral = self.length();
        let cap = 2.0 * r;
        let t = a * (lateral + 2.0 * cap);
        let theta = TAU * b;
        if t < lateral {
            let u = t / lateral;
            let (tan, _) = self.tangent(strand, u);
            let (n1, n2) = orthonormal(tan);
            let dir = math::add(math::scale(n1, theta.cos()), math::scale(n2, theta.sin()));
            return math::add(self.curve(strand, u), math::scale(dir, r));
        }
        // Hemisphere with uniform area: the axial coordinate is uniform.
        let (u, sign) = if t < lateral + cap { (0.0, -1.0) } else { (1.0, 1.0) };
        let (tan, _) = self.tangent(strand, u);
        let (n1, n2) = orthonormal(tan);
        let h = c;
        let ring = (1.0 - h * h).max(0.0).sqrt();
        let dir = math::add(
            math::scale(tan, sign * h),
            math::add(math::scale(n1, ring * theta.cos()), math::scale(n2, ring * theta.sin())),
        );
        math::add(self.curve(strand, u), math::scale(dir, r))
    }
}

pub(crate) fn orthonormal(t: Vec3) -> (Vec3, Vec3) {
    let helper = if t[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let n1 = math::normalize(math::cross(t, helper));
    let n2 = math::cross(t, n1);
    (n1, n2)
}
