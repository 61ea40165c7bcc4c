//! Candidate grasp points and the four point-selection policies.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{ErrorEstimator, MassEstimator, ModelBundle, RndPair, INFERENCE_CHUNK};
use crate::patching::{crop_patch, Patch};
use crate::tray::Tray;

/// An `nx x ny` lattice with equal integer spacing per axis, centred in the
/// region that keeps `margin` cells from every edge.
pub fn candidate_grid(tray: &Tray, margin: usize, nx: usize, ny: usize) -> Result<Vec<(usize, usize)>> {
    if nx == 0 || ny == 0 {
        return Err(Error::Invalid("grid needs at least one point per axis".into()));
    }
    let axis = |len: usize, n: usize, name: &str| -> Result<Vec<usize>> {
        if len < 2 * margin + 1 {
            return Err(Error::Invalid(format!("tray {name} of {len} cells leaves no room inside the margin")));
        }
        let span = len - 1 - 2 * margin;
        if n == 1 {
            return Ok(vec![margin + span / 2]);
        }
        let step = span / (n - 1);
        if step == 0 {
            return Err(Error::Invalid(format!("{n} grid points do not fit in {} cells along {name}", span + 1)));
        }
        let start = margin + (span - step * (n - 1)) / 2;
        Ok((0..n).map(|i| start + i * step).collect())
    };
    let xs = axis(tray.width(), nx, "width")?;
    let ys = axis(tray.height(), ny, "height")?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEvaluation {
    pub x: usize,
    pub y: usize,
    pub predicted_mass_g: f64,
    pub uncertainty: Option<f64>,
}

/// Mass prediction and both uncertainty scores for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScores {
    pub x: usize,
    pub y: usize,
    pub predicted_mass_g: f64,
    pub ee: f64,
    pub rnd: f64,
}

impl CandidateScores {
    /// The view a given policy selects from.
    pub fn evaluation(&self, tag: PolicyTag) -> CandidateEvaluation {
        let uncertainty = match tag {
            PolicyTag::Ee => Some(self.ee),
            PolicyTag::Rnd => Some(self.rnd),
            PolicyTag::Random | PolicyTag::Baseline => None,
        };
        CandidateEvaluation { x: self.x, y: self.y, predicted_mass_g: self.predicted_mass_g, uncertainty }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum UncertaintySource<'a> {
    Ee(&'a ErrorEstimator),
    Rnd(&'a RndPair),
}

impl UncertaintySource<'_> {
    fn score(&self, patches: &[&Patch]) -> Result<Vec<f64>> {
        match self {
            UncertaintySource::Ee(e) => e.uncertainty_batch(patches),
            UncertaintySource::Rnd(r) => r.uncertainty_batch(patches),
        }
    }
}

fn crop_all(tray: &Tray, points: &[(usize, usize)], side: usize) -> Result<Vec<Patch>> {
    points.iter().map(|&(x, y)| crop_patch(tray, x, y, side)).collect()
}

/// Applies `f` to fixed-size chunks of `points`, in parallel or not, and
/// concatenates the results in input order.
fn chunked<T, F>(points: &[(usize, usize)], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[(usize, usize)]) -> Result<Vec<T>> + Sync,
{
    let parts: Vec<Result<Vec<T>>> = if parallel {
        points.par_chunks(INFERENCE_CHUNK).map(&f).collect()
    } else {
        points.chunks(INFERENCE_CHUNK).map(&f).collect()
    };
    let mut out = Vec::with_capacity(points.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn evaluate_impl(
    tray: &Tray,
    points: &[(usize, usize)],
    side: usize,
    mass: &MassEstimator,
    unc: Option<UncertaintySource<'_>>,
    parallel: bool,
) -> Result<Vec<CandidateEvaluation>> {
    chunked(points, parallel, |chunk| {
        let patches = crop_all(tray, chunk, side)?;
        let refs: Vec<&Patch> = patches.iter().collect();
        let pred = mass.predict_batch(&refs)?;
        let u = match unc {
            Some(s) => s.score(&refs)?.into_iter().map(Some).collect(),
            None => vec![None; refs.len()],
        };
        Ok(chunk
            .iter()
            .zip(pred.into_iter().zip(u))
            .map(|(&(x, y), (m, u))| CandidateEvaluation { x, y, predicted_mass_g: m, uncertainty: u })
            .collect())
    })
}

/// Crops, predicts and optionally scores every point. Work is spread over
/// the rayon pool in fixed-size chunks, so the result is the same as
/// [`evaluate_candidates_serial`].
pub fn evaluate_candidates(
    tray: &Tray,
    points: &[(usize, usize)],
    side: usize,
    mass: &MassEstimator,
    unc: Option<UncertaintySource<'_>>,
) -> Result<Vec<CandidateEvaluation>> {
    evaluate_impl(tray, points, side, mass, unc, true)
}

pub fn evaluate_candidates_serial(
    tray: &Tray,
    points: &[(usize, usize)],
    side: usize,
    mass: &MassEstimator,
    unc: Option<UncertaintySource<'_>>,
) -> Result<Vec<CandidateEvaluation>> {
    evaluate_impl(tray, points, side, mass, unc, false)
}

/// Mass and both uncertainty scores for every point, computed once so that
/// several policies can select from the same snapshot.
pub fn score_candidates(
    tray: &Tray,
    points: &[(usize, usize)],
    side: usize,
    bundle: &ModelBundle,
) -> Result<Vec<CandidateScores>> {
    chunked(points, true, |chunk| {
        let patches = crop_all(tray, chunk, side)?;
        let refs: Vec<&Patch> = patches.iter().collect();
        let m = bundle.mass.predict_batch(&refs)?;
        let e = bundle.ee.uncertainty_batch(&refs)?;
        let r = bundle.rnd.uncertainty_batch(&refs)?;
        Ok((0..chunk.len())
            .map(|i| CandidateScores {
                x: chunk[i].0,
                y: chunk[i].1,
                predicted_mass_g: m[i],
                ee: e[i],
                rnd: r[i],
            })
            .collect())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyTag {
    Random,
    Baseline,
    Ee,
    Rnd,
}

impl PolicyTag {
    pub const ALL: [PolicyTag; 4] = [PolicyTag::Random, PolicyTag::Baseline, PolicyTag::Ee, PolicyTag::Rnd];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::Random => "random",
            PolicyTag::Baseline => "baseline",
            PolicyTag::Ee => "ee",
            PolicyTag::Rnd => "rnd",
        }
    }

    pub fn uses_uncertainty(self) -> bool {
        matches!(self, PolicyTag::Ee | PolicyTag::Rnd)
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(PolicyTag::Random),
            "baseline" => Ok(PolicyTag::Baseline),
            "ee" => Ok(PolicyTag::Ee),
            "rnd" => Ok(PolicyTag::Rnd),
            _ => Err(Error::Config(format!("unknown policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub tag: PolicyTag,
    pub band_g: f64,
}

impl SelectionPolicy {
    pub fn new(tag: PolicyTag, band_g: f64) -> Result<Self> {
        if !(band_g > 0.0 && band_g.is_finite()) {
            return Err(Error::Config(format!("band must be > 0, got {band_g}")));
        }
        Ok(Self { tag, band_g })
    }
}

/// Lowest `(key, y, x)`.
fn argmin_by_key(evals: &[CandidateEvaluation], idx: impl Iterator<Item = usize>, key: impl Fn(&CandidateEvaluation) -> f64) -> Option<usize> {
    idx.min_by(|&a, &b| {
        let (ea, eb) = (&evals[a], &evals[b]);
        key(ea)
            .partial_cmp(&key(eb))
            .unwrap_or(Ordering::Equal)
            .then(ea.y.cmp(&eb.y))
            .then(ea.x.cmp(&eb.x))
    })
}

/// Index of the candidate `policy` picks for `target_g`.
///
/// Random draws uniformly. Baseline takes the prediction closest to the
/// target. EE and RND keep the candidates predicted within `band_g` of the
/// target and take the least uncertain one; with an empty band they act as
/// Baseline. Ties go to the lowest `(y, x)`.
pub fn select_index<R: Rng + ?Sized>(
    policy: &SelectionPolicy,
    evals: &[CandidateEvaluation],
    target_g: f64,
    rng: &mut R,
) -> Result<usize> {
    if evals.is_empty() {
        return Err(Error::Invalid("no candidates to select from".into()));
    }
    if !target_g.is_finite() {
        return Err(Error::Invalid(format!("target must be finite, got {target_g}")));
    }
    for e in evals {
        let bad_unc = e.uncertainty.is_some_and(|u| !u.is_finite());
        if !e.predicted_mass_g.is_finite() || bad_unc {
            return Err(Error::Invalid(format!("non-finite evaluation at ({}, {})", e.x, e.y)));
        }
    }
    let gap = |e: &CandidateEvaluation| (e.predicted_mass_g - target_g).abs();
    let baseline = || argmin_by_key(evals, 0..evals.len(), gap).expect("non-empty");
    match policy.tag {
        PolicyTag::Random => Ok(rng.random_range(0..evals.len())),
        PolicyTag::Baseline => Ok(baseline()),
        PolicyTag::Ee | PolicyTag::Rnd => {
            if let Some(e) = evals.iter().find(|e| e.uncertainty.is_none()) {
                return Err(Error::Invalid(format!(
                    "{} policy needs an uncertainty score at ({}, {})",
                    policy.tag, e.x, e.y
                )));
            }
            let band = (0..evals.len()).filter(|&i| gap(&evals[i]) <= policy.band_g);
            Ok(argmin_by_key(evals, band, |e| e.uncertainty.expect("checked")).unwrap_or_else(baseline))
        }
    }
}

pub fn select<R: Rng + ?Sized>(
    policy: &SelectionPolicy,
    evals: &[CandidateEvaluation],
    target_g: f64,
    rng: &mut R,
) -> Result<CandidateEvaluation> {
    select_index(policy, evals, target_g, rng).map(|i| evals[i])
}
