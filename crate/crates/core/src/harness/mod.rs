//! Evaluation campaigns: collect, train, attempt target-mass grasps with each
//! policy and tabulate success rates.

mod report;
pub mod stats;

pub use report::{read_csv, render_text, report, write_csv};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{quantize_mass, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{train_bundle, ModelBundle};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::selection::{candidate_grid, score_candidates, select_index, CandidateEvaluation, PolicyTag, SelectionPolicy};
use crate::sim::{collect, CollectionState, Simulator};

/// Whether a grasp of `grasped_g` is within `tol` (a fraction) of `target_g`.
pub fn is_success(grasped_g: f64, target_g: f64, tol: f64) -> Result<bool> {
    if !(target_g > 0.0) {
        return Err(Error::Invalid(format!("target must be > 0, got {target_g}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance must be > 0, got {tol}")));
    }
    Ok((grasped_g - target_g).abs() / target_g <= tol)
}

/// Mean - std, mean and mean + std of the labels, rounded to `resolution_g`.
pub fn default_targets(ds: &Dataset, resolution_g: f64) -> Result<Vec<f64>> {
    let masses: Vec<f64> = ds.masses().collect();
    if masses.len() < 2 {
        return Err(Error::Invalid("need at least two labels to derive targets".into()));
    }
    let m = stats::mean(&masses);
    let s = stats::sample_std(&masses);
    let targets: Vec<f64> = [m - s, m, m + s].iter().map(|&t| quantize_mass(t, resolution_g)).collect();
    if targets[0] <= 0.0 {
        return Err(Error::Invalid(format!("derived target {} g is not positive", targets[0])));
    }
    Ok(targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCampaign {
    pub material: String,
    pub sizes: Vec<usize>,
    pub policies: Vec<PolicyTag>,
    /// Empty means derived from the first seed's reference collection.
    pub targets_g: Vec<f64>,
    pub attempts: usize,
    pub small_size_attempts: usize,
    pub extended_attempt_materials: Vec<String>,
    pub tolerances: Vec<f64>,
    pub seeds: Vec<u64>,
    pub reference_size: usize,
    pub warmup_cycles: usize,
}

impl EvalCampaign {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let c = &cfg.campaign;
        let policies = c.policies.iter().map(|p| p.parse()).collect::<Result<Vec<PolicyTag>>>()?;
        let campaign = Self {
            material: c.material.clone(),
            sizes: c.sizes.clone(),
            policies,
            targets_g: c.targets_g.clone(),
            attempts: c.attempts,
            small_size_attempts: c.small_size_attempts,
            extended_attempt_materials: c.extended_attempt_materials.clone(),
            tolerances: cfg.tolerances.clone(),
            seeds: c.seeds.clone(),
            reference_size: c.reference_size,
            warmup_cycles: c.warmup_cycles,
        };
        campaign.validate()?;
        Ok(campaign)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return fail("dataset sizes must be non-empty and >= 1");
        }
        if self.policies.is_empty() {
            return fail("at least one policy is required");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if self.attempts == 0 || self.small_size_attempts == 0 {
            return fail("attempts must be >= 1");
        }
        if self.tolerances.is_empty() || self.tolerances.iter().any(|t| !(*t > 0.0)) {
            return fail("tolerances must be non-empty and > 0");
        }
        if self.targets_g.iter().any(|t| !(*t > 0.0)) {
            return fail("targets must be > 0");
        }
        if self.targets_g.is_empty() && self.reference_size < 2 {
            return fail("reference_size must be >= 2 to derive targets");
        }
        Ok(())
    }

    /// Attempts per target for a dataset size.
    pub fn attempts_for(&self, size: usize) -> usize {
        if size <= 100 && self.extended_attempt_materials.iter().any(|m| m == &self.material) {
            self.small_size_attempts
        } else {
            self.attempts
        }
    }

    fn needs_models(&self) -> bool {
        self.policies.iter().any(|p| *p != PolicyTag::Random)
    }
}

/// One aggregated cell of a [`SuccessTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub material: String,
    pub size: usize,
    pub policy: PolicyTag,
    pub target_g: f64,
    pub tol: f64,
    pub attempts: usize,
    pub successes: usize,
    pub rate: f64,
    pub mean_abs_err_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    size: usize,
    policy: PolicyTag,
    target_bits: u64,
    tol_bits: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Tally {
    attempts: usize,
    successes: usize,
    abs_err_sum: f64,
}

/// Success counts keyed by (dataset size, policy, target, tolerance).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuccessTable {
    material: String,
    cells: BTreeMap<Key, Tally>,
}

fn key(size: usize, policy: PolicyTag, target_g: f64, tol: f64) -> Key {
    // Targets and tolerances are positive, so bit order is numeric order.
    Key { size, policy, target_bits: target_g.to_bits(), tol_bits: tol.to_bits() }
}

impl SuccessTable {
    pub fn new(material: &str) -> Self {
        Self { material: material.to_string(), cells: BTreeMap::new() }
    }

    pub fn material(&self) -> &str {
        &self.material
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    /// Records one attempt under every tolerance.
    pub fn record(&mut self, size: usize, policy: PolicyTag, target_g: f64, tolerances: &[f64], grasped_g: f64) -> Result<()> {
        for &tol in tolerances {
            let ok = is_success(grasped_g, target_g, tol)?;
            let t = self.cells.entry(key(size, policy, target_g, tol)).or_default();
            t.attempts += 1;
            t.successes += ok as usize;
            t.abs_err_sum += (grasped_g - target_g).abs();
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SuccessTable) {
        for (k, t) in &other.cells {
            let mine = self.cells.entry(*k).or_default();
            mine.attempts += t.attempts;
            mine.successes += t.successes;
            mine.abs_err_sum += t.abs_err_sum;
        }
    }

    /// Rows in (size, policy, target, tolerance) order.
    pub fn rows(&self) -> Vec<SuccessRow> {
        self.cells
            .iter()
            .map(|(k, t)| SuccessRow {
                material: self.material.clone(),
                size: k.size,
                policy: k.policy,
                target_g: f64::from_bits(k.target_bits),
                tol: f64::from_bits(k.tol_bits),
                attempts: t.attempts,
                successes: t.successes,
                rate: t.successes as f64 / t.attempts as f64,
                mean_abs_err_g: t.abs_err_sum / t.attempts as f64,
            })
            .collect()
    }

    pub fn get(&self, size: usize, policy: PolicyTag, target_g: f64, tol: f64) -> Option<SuccessRow> {
        let k = key(size, policy, target_g, tol);
        self.cells.get(&k).map(|t| SuccessRow {
            material: self.material.clone(),
            size,
            policy,
            target_g,
            tol,
            attempts: t.attempts,
            successes: t.successes,
            rate: t.successes as f64 / t.attempts as f64,
            mean_abs_err_g: t.abs_err_sum / t.attempts as f64,
        })
    }

    /// Success rate pooled over every target of a (size, policy, tolerance).
    pub fn pooled_rate(&self, size: usize, policy: PolicyTag, tol: f64) -> Option<f64> {
        let (mut a, mut s) = (0, 0);
        for (k, t) in &self.cells {
            if k.size == size && k.policy == policy && k.tol_bits == tol.to_bits() {
                a += t.attempts;
                s += t.successes;
            }
        }
        (a > 0).then(|| s as f64 / a as f64)
    }

    pub(crate) fn from_rows(rows: Vec<SuccessRow>) -> Result<Self> {
        let material = rows.first().map(|r| r.material.clone()).unwrap_or_default();
        let mut table = Self::new(&material);
        for r in rows {
            if r.material != material {
                return Err(Error::Invalid("rows mix materials".into()));
            }
            if r.successes > r.attempts || r.attempts == 0 {
                return Err(Error::Invalid(format!("bad counts {}/{}", r.successes, r.attempts)));
            }
            table.cells.insert(
                key(r.size, r.policy, r.target_g, r.tol),
                Tally { attempts: r.attempts, successes: r.successes, abs_err_sum: r.mean_abs_err_g * r.attempts as f64 },
            );
        }
        Ok(table)
    }
}

/// A campaign that stopped early, with everything finished before the error.
#[derive(Debug)]
pub struct PartialRun {
    pub table: SuccessTable,
    pub error: Error,
}

/// Grasp masses of every policy on one attempt, sharing one tray snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptOutcome {
    pub policy: PolicyTag,
    pub point: (usize, usize),
    pub predicted_mass_g: f64,
    pub grasped_g: f64,
}

/// Evaluation rig for one trained bundle: an ongoing two-tray process and
/// the candidate grid.
pub struct Evaluator<'a> {
    sim: &'a Simulator,
    bundle: Option<&'a ModelBundle>,
    state: CollectionState,
    points: Vec<(usize, usize)>,
    band_g: f64,
    seed: u64,
    attempt: u64,
}

impl<'a> Evaluator<'a> {
    pub fn new(cfg: &ExperimentConfig, sim: &'a Simulator, bundle: Option<&'a ModelBundle>, material: &str, seed: u64, warmup: usize) -> Result<Self> {
        let m = cfg.material(material)?;
        let mut state = CollectionState::new(sim, m, derive_seed(seed, stream::EVAL_PROCESS))?;
        for _ in 0..warmup {
            state.step(false)?;
        }
        let points = candidate_grid(state.pick_tray(), sim.margin(), cfg.grid_nx, cfg.grid_ny)?;
        Ok(Self { sim, bundle, state, points, band_g: cfg.band_g, seed, attempt: 0 })
    }

    pub fn state(&self) -> &CollectionState {
        &self.state
    }

    /// One attempt: every policy picks a point on the same snapshot and
    /// grasps on its own copy with the same noise draws; then the process
    /// advances by one ordinary random pick-place cycle.
    pub fn attempt(&mut self, policies: &[PolicyTag], target_g: f64) -> Result<Vec<AttemptOutcome>> {
        self.state.update_direction();
        let tray = self.state.pick_tray();
        let scores = match self.bundle {
            Some(b) if policies.iter().any(|p| *p != PolicyTag::Random) => {
                Some(score_candidates(tray, &self.points, self.sim.patch_cells, b)?)
            }
            _ => None,
        };
        let salt = derive_seed(self.seed, self.attempt);
        self.attempt += 1;
        let mut out = Vec::with_capacity(policies.len());
        for &tag in policies {
            let evals: Vec<CandidateEvaluation> = match (&scores, tag) {
                (Some(s), _) => s.iter().map(|c| c.evaluation(tag)).collect(),
                (None, PolicyTag::Random) => self
                    .points
                    .iter()
                    .map(|&(x, y)| CandidateEvaluation { x, y, predicted_mass_g: 0.0, uncertainty: None })
                    .collect(),
                (None, _) => return Err(Error::Invalid(format!("{tag} policy needs trained models"))),
            };
            let policy = SelectionPolicy::new(tag, self.band_g)?;
            let i = select_index(&policy, &evals, target_g, &mut stream_rng(salt, stream::EVAL_SELECT))?;
            let chosen = evals[i];
            let mut copy = tray.clone();
            let grasped = match self.sim.grasp_at(&mut copy, chosen.x, chosen.y, &mut stream_rng(salt, stream::EVAL_ATTEMPT)) {
                Ok(o) => quantize_mass(o.mass_g, self.sim.scale_resolution_g),
                Err(Error::EmptySurface { .. }) => 0.0,
                Err(e) => return Err(e),
            };
            out.push(AttemptOutcome {
                policy: tag,
                point: (chosen.x, chosen.y),
                predicted_mass_g: chosen.predicted_mass_g,
                grasped_g: grasped,
            });
        }
        self.state.step(false)?;
        Ok(out)
    }
}

/// Evaluates one (size, seed) cell into its own table.
fn run_cell(
    campaign: &EvalCampaign,
    cfg: &ExperimentConfig,
    sim: &Simulator,
    reference: &Dataset,
    targets: &[f64],
    size: usize,
    seed: u64,
) -> Result<SuccessTable> {
    let bundle = if campaign.needs_models() {
        Some(train_bundle(&reference.prefix(size), cfg, derive_seed(seed, size as u64))?)
    } else {
        None
    };
    let eval_seed = derive_seed(seed, (size as u64) << 32 | 0xE7A1);
    let mut ev = Evaluator::new(cfg, sim, bundle.as_ref(), &campaign.material, eval_seed, campaign.warmup_cycles)?;
    let mut table = SuccessTable::new(&campaign.material);
    for &target in targets {
        for _ in 0..campaign.attempts_for(size) {
            for o in ev.attempt(&campaign.policies, target)? {
                table.record(size, o.policy, target, &campaign.tolerances, o.grasped_g)?;
            }
        }
    }
    log::info!("size {size} seed {seed}: done");
    Ok(table)
}

/// Runs every (size, seed) cell and pools the counts over seeds.
///
/// Each seed collects one reference dataset of
/// `max(largest size, reference_size)` records; smaller sizes are its
/// prefixes. On failure the cells that did finish are returned with the
/// first error.
pub fn run_campaign(campaign: &EvalCampaign, cfg: &ExperimentConfig) -> std::result::Result<SuccessTable, Box<PartialRun>> {
    let empty = || SuccessTable::new(&campaign.material);
    let fail = |error: Error| Box::new(PartialRun { table: empty(), error });
    campaign.validate().map_err(fail)?;
    cfg.validate().map_err(fail)?;
    let material = cfg.material(&campaign.material).map_err(fail)?;
    let sim = Simulator::new(cfg);
    let max_size = campaign.sizes.iter().copied().max().expect("validated");
    let n_ref = max_size.max(if campaign.targets_g.is_empty() { campaign.reference_size } else { 0 });

    let references: Vec<Result<Dataset>> =
        campaign.seeds.par_iter().map(|&seed| collect(&sim, material, n_ref, seed)).collect();
    let mut refs = Vec::with_capacity(references.len());
    for r in references {
        refs.push(r.map_err(fail)?);
    }
    let targets = if campaign.targets_g.is_empty() {
        default_targets(&refs[0].prefix(campaign.reference_size.min(n_ref)), cfg.scale_resolution_g).map_err(fail)?
    } else {
        campaign.targets_g.clone()
    };

    let cells: Vec<(usize, usize)> =
        campaign.sizes.iter().flat_map(|&s| (0..campaign.seeds.len()).map(move |i| (s, i))).collect();
    let results: Vec<Result<SuccessTable>> = cells
        .par_iter()
        .map(|&(size, i)| run_cell(campaign, cfg, &sim, &refs[i], &targets, size, campaign.seeds[i]))
        .collect();
    let mut table = empty();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(t) => table.merge(&t),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        None => Ok(table),
        Some(error) => Err(Box::new(PartialRun { table, error })),
    }
}
