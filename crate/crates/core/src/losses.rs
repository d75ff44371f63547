//! Training objectives over K query samples, in plain form for evaluation and
//! as tape expressions for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::sdf::{clamp_delta, overlap_theta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ga: f64,
    pub lambda_ic: f64,
    pub lambda_reg: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Clamp used by the training objective.
    #[serde(default)]
    pub clamp_mode: ClampMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ga: 0.1, lambda_ic: 5.0, lambda_reg: 1e-4, gamma: 1.0, delta: 0.1, clamp_mode: ClampMode::TargetSide }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta {} must be positive", self.delta)));
        }
        if [self.lambda_ga, self.lambda_ic, self.lambda_reg].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// How the prediction side of the clamped L1 terms is clamped on the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// `|clamp(pred) − clamp(target)|` exactly.
    Symmetric,
    /// Identical while the prediction is inside the band; outside it the
    /// prediction is only clamped where the target saturates on the same
    /// side, so a saturated prediction still receives gradient.
    #[default]
    TargetSide,
}

/// Per-component values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub full: f64,
    pub part: f64,
    pub assist: f64,
    pub intersection: f64,
    pub consistency: f64,
    pub reg: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.full
            + self.part
            + w.lambda_ga * self.assist
            + w.lambda_ic * self.intersection
            + self.consistency
            + w.lambda_reg * self.reg
    }

    pub fn add(&mut self, o: &LossComponents) {
        self.full += o.full;
        self.part += o.part;
        self.assist += o.assist;
        self.intersection += o.intersection;
        self.consistency += o.consistency;
        self.reg += o.reg;
    }

    pub fn scale(&mut self, s: f64) {
        self.full *= s;
        self.part *= s;
        self.assist *= s;
        self.intersection *= s;
        self.consistency *= s;
        self.reg *= s;
    }
}

/// Number of samples kept by the trimmed part loss, `⌊γK⌋`.
pub fn kept_count(gamma: f64, k: usize) -> usize {
    ((gamma * k as f64) + 1e-9).floor().min(k as f64) as usize
}

fn check_len(context: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { context, expected: a.len(), actual: b.len() });
    }
    Ok(())
}

fn clamped_l1(pred: &[f64], gt: &[f64], delta: f64) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| (clamp_delta(p, delta) - clamp_delta(g, delta)).abs())
        .sum::<f64>()
        / pred.len() as f64
}

pub fn loss_full_recon(pred: &[f64], gt: &[f64], delta: f64) -> Result<f64> {
    check_len("full reconstruction", pred, gt)?;
    Ok(clamped_l1(pred, gt, delta))
}

/// Mean of the `⌊γK⌋` smallest values; ties keep sample order.
pub fn trimmed_mean(errors: &[f64], gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let kept = kept_count(gamma, errors.len());
    if kept == 0 {
        return Ok(0.0);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[..kept].iter().sum::<f64>() / kept as f64)
}

/// Sum over parts of the trimmed clamped L1. `None` labels give zero.
pub fn loss_part_recon(preds: &[&[f64]], gts: Option<&[&[f64]]>, gamma: f64, delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let Some(gts) = gts else { return Ok(0.0) };
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch { context: "part streams", expected: gts.len(), actual: preds.len() });
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        check_len("part reconstruction", p, g)?;
        let errs: Vec<f64> = p
            .iter()
            .zip(*g)
            .map(|(&a, &b)| (clamp_delta(a, delta) - clamp_delta(b, delta)).abs())
            .collect();
        total += trimmed_mean(&errs, gamma)?;
    }
    Ok(total)
}

pub fn loss_geometry_assist(assist: &[&[f64]], geom: &[&[f64]], delta: f64) -> Result<f64> {
    if assist.len() != geom.len() {
        return Err(Error::LengthMismatch { context: "assisted parts", expected: geom.len(), actual: assist.len() });
    }
    let mut total = 0.0;
    for (a, g) in assist.iter().zip(geom) {
        check_len("geometry assistance", a, g)?;
        total += clamped_l1(a, g, delta);
    }
    Ok(total)
}

/// Mean penetration depth summed over unordered pairs of part streams.
pub fn loss_intersection(streams: &[&[f64]]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..streams.len() {
        for j in i + 1..streams.len() {
            check_len("intersection", streams[i], streams[j])?;
            let k = streams[i].len();
            if k == 0 {
                continue;
            }
            total += streams[i].iter().zip(streams[j]).map(|(&a, &b)| overlap_theta(a, b)).sum::<f64>() / k as f64;
        }
    }
    Ok(total)
}

/// Auxiliary head against the pointwise minimum of every analytic geometry,
/// assisting geometries included.
pub fn loss_consistency(aux: &[f64], geoms: &[&[f64]], delta: f64) -> Result<f64> {
    if geoms.is_empty() {
        return Ok(0.0);
    }
    let mut min = geoms[0].to_vec();
    for g in &geoms[1..] {
        check_len("consistency", &min, g)?;
        min.iter_mut().zip(*g).for_each(|(m, &v)| *m = m.min(v));
    }
    check_len("consistency", aux, &min)?;
    Ok(clamped_l1(aux, &min, delta))
}

pub fn loss_regularization(latents: &[&[f64]]) -> f64 {
    latents.iter().flat_map(|l| l.iter()).map(|v| v * v).sum()
}

/// Tape versions. Ground truths enter as constants and are clamped here.
pub mod tape {
    use super::*;

    fn clamped_target(t: &mut Tape, gt: &[f64], delta: f64) -> Var {
        t.constant(Mat::column(&gt.iter().map(|&g| clamp_delta(g, delta)).collect::<Vec<_>>()))
    }

    /// Per-sample `|clamp(pred) − clamp(target)|` with a constant target.
    /// In [`ClampMode::TargetSide`] the prediction is only clamped on the
    /// side where the target itself saturates.
    pub fn clamped_abs_error(t: &mut Tape, pred: Var, gt: &[f64], delta: f64, mode: ClampMode) -> Result<Var> {
        let target = clamped_target(t, gt, delta);
        let c = match mode {
            ClampMode::Symmetric => t.clamp(pred, delta),
            ClampMode::TargetSide => {
                let (lo, hi) = gt
                    .iter()
                    .map(|&g| {
                        let lo = if g <= -delta { -delta } else { f64::NEG_INFINITY };
                        let hi = if g >= delta { delta } else { f64::INFINITY };
                        (lo, hi)
                    })
                    .unzip();
                t.clamp_bounds(pred, lo, hi)?
            }
        };
        let d = t.sub(c, target)?;
        Ok(t.abs(d))
    }

    /// Same with a tape target, detached first.
    fn clamped_abs_to(t: &mut Tape, a: Var, target: Var, delta: f64, mode: ClampMode) -> Result<Var> {
        let gt = t.value(target).data.clone();
        clamped_abs_error(t, a, &gt, delta, mode)
    }

    pub fn full_recon(t: &mut Tape, pred: Var, gt: &[f64], delta: f64, mode: ClampMode) -> Result<Var> {
        let e = clamped_abs_error(t, pred, gt, delta, mode)?;
        Ok(t.mean(e))
    }

    pub fn part_recon(
        t: &mut Tape,
        preds: &[Var],
        gts: &[&[f64]],
        gamma: f64,
        delta: f64,
        mode: ClampMode,
    ) -> Result<Option<Var>> {
        if preds.len() != gts.len() {
            return Err(Error::LengthMismatch { context: "part streams", expected: gts.len(), actual: preds.len() });
        }
        let mut terms = Vec::with_capacity(preds.len());
        for (p, g) in preds.iter().zip(gts) {
            let e = clamped_abs_error(t, *p, g, delta, mode)?;
            let kept = kept_count(gamma, t.value(e).len());
            terms.push(t.mean_smallest(e, kept));
        }
        sum_all(t, &terms)
    }

    /// Value is the clamped `|assist − geom|`. One-sided, only the assist
    /// stream receives gradient. Two-sided, the geometry also receives the
    /// gradient of the same error with the assist stream as its target.
    pub fn geometry_assist(
        t: &mut Tape,
        assist: &[Var],
        geom: &[Var],
        delta: f64,
        mode: ClampMode,
        two_sided: bool,
    ) -> Result<Option<Var>> {
        let mut terms = Vec::with_capacity(assist.len());
        for (a, g) in assist.iter().zip(geom) {
            let mut e = clamped_abs_to(t, *a, *g, delta, mode)?;
            if two_sided {
                let back = clamped_abs_to(t, *g, *a, delta, mode)?;
                let frozen = t.detach(back);
                let grad_only = t.sub(back, frozen)?;
                e = t.add(e, grad_only)?;
            }
            terms.push(t.mean(e));
        }
        sum_all(t, &terms)
    }

    /// `Θ(a, b) = relu(−max(a, b)) = relu(min(−a, −b))`.
    pub fn intersection(t: &mut Tape, streams: &[Var]) -> Result<Option<Var>> {
        let negs: Vec<Var> = streams.iter().map(|s| t.neg(*s)).collect();
        let mut terms = Vec::new();
        for i in 0..negs.len() {
            for j in i + 1..negs.len() {
                let m = t.min(&[negs[i], negs[j]])?;
                let th = t.relu(m);
                terms.push(t.mean(th));
            }
        }
        sum_all(t, &terms)
    }

    /// The geometry minimum is a target for the auxiliary head only.
    pub fn consistency(t: &mut Tape, aux: Var, geoms: &[Var], delta: f64, mode: ClampMode) -> Result<Option<Var>> {
        if geoms.is_empty() {
            return Ok(None);
        }
        let m = t.min(geoms)?;
        let e = clamped_abs_to(t, aux, m, delta, mode)?;
        Ok(Some(t.mean(e)))
    }

    pub fn regularization(t: &mut Tape, latents: &[Var]) -> Result<Option<Var>> {
        let terms: Vec<Var> = latents.iter().map(|l| t.sum_squares(*l)).collect();
        sum_all(t, &terms)
    }

    /// Sum of scalar nodes, `None` for an empty list.
    pub fn sum_all(t: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
        let Some((first, rest)) = terms.split_first() else { return Ok(None) };
        let mut acc = *first;
        for v in rest {
            acc = t.add(acc, *v)?;
        }
        Ok(Some(acc))
    }
}
