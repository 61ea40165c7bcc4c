//! The autonomous two-tray collection loop.

use rand::Rng;

use super::{GraspOutcome, Simulator};
use crate::config::MaterialParams;
use crate::dataset::{quantize_mass, Dataset, GraspRecord};
use crate::error::{Error, Result};
use crate::patching::{crop_patch, Patch};
use crate::rng::{derive_seed, stream, stream_rng, SimRng};
use crate::tray::{total_mass_g, Tray};

/// Attempts at finding a non-empty grasp point before giving up.
const MAX_POINT_RETRIES: usize = 100;

/// One pick-place cycle.
#[derive(Debug, Clone)]
pub struct Cycle {
    /// Patch cropped before the grasp, if requested.
    pub patch: Option<Patch>,
    pub point: (usize, usize),
    pub outcome: GraspOutcome,
    /// Scale reading.
    pub mass_g: f64,
    pub switched: bool,
}

/// State of the two-tray rig: material moves from the pick tray to the
/// place tray until the pick tray runs low, then the direction flips.
#[derive(Debug, Clone)]
pub struct CollectionState {
    sim: Simulator,
    trays: [Tray; 2],
    pick: usize,
    iteration: usize,
    epsilon_g: f64,
    initial_total_g: f64,
    spilled_total_g: f64,
    rng: SimRng,
}

impl CollectionState {
    /// Fills tray A to the configured level and leaves tray B empty.
    pub fn new(sim: &Simulator, material: &MaterialParams, seed: u64) -> Result<Self> {
        let fill = sim.default_fill_g(material);
        let a = sim.init_tray(material, fill, derive_seed(seed, stream::TRAY_A))?;
        let b = sim.init_tray(material, 0.0, derive_seed(seed, stream::TRAY_B))?;
        Self::from_trays(sim, a, b, seed)
    }

    pub fn from_trays(sim: &Simulator, a: Tray, b: Tray, seed: u64) -> Result<Self> {
        let epsilon_g = sim.sim.epsilon_factor * a.material().capacity_g;
        let (ma, mb) = (total_mass_g(&a), total_mass_g(&b));
        if epsilon_g >= ma.max(mb) {
            return Err(Error::Config(format!(
                "tray switch threshold {epsilon_g:.1} g is not below the initial fill {:.1} g",
                ma.max(mb)
            )));
        }
        // The heavier tray is picked from first.
        let pick = if ma >= mb { 0 } else { 1 };
        Ok(Self {
            sim: sim.clone(),
            trays: [a, b],
            pick,
            iteration: 0,
            epsilon_g,
            initial_total_g: ma + mb,
            spilled_total_g: 0.0,
            rng: stream_rng(seed, stream::COLLECT),
        })
    }

    pub fn pick_tray(&self) -> &Tray {
        &self.trays[self.pick]
    }

    pub fn place_tray(&self) -> &Tray {
        &self.trays[1 - self.pick]
    }

    pub fn trays(&self) -> (&Tray, &Tray) {
        (&self.trays[0], &self.trays[1])
    }

    pub fn pick_index(&self) -> usize {
        self.pick
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn epsilon_g(&self) -> f64 {
        self.epsilon_g
    }

    pub fn initial_total_g(&self) -> f64 {
        self.initial_total_g
    }

    /// Breakage mass accumulated so far. It is redistributed inside the pick
    /// tray, so it is already part of the tray totals.
    pub fn spilled_total_g(&self) -> f64 {
        self.spilled_total_g
    }

    pub fn total_mass_g(&self) -> f64 {
        total_mass_g(&self.trays[0]) + total_mass_g(&self.trays[1])
    }

    /// Uniformly random grasp point respecting the patch margin.
    pub fn random_point<R: Rng + ?Sized>(sim: &Simulator, tray: &Tray, rng: &mut R) -> (usize, usize) {
        let m = sim.margin();
        let x = rng.random_range(m..tray.width() - m);
        let y = rng.random_range(m..tray.height() - m);
        (x, y)
    }

    /// Switches direction if the pick tray has run low. Returns whether it did.
    pub fn update_direction(&mut self) -> bool {
        if total_mass_g(&self.trays[self.pick]) < self.epsilon_g {
            self.pick = 1 - self.pick;
            true
        } else {
            false
        }
    }

    /// Runs one pick-place cycle at a random point, cropping the patch
    /// before the grasp when `record` is set.
    pub fn step(&mut self, record: bool) -> Result<Cycle> {
        let switched = self.update_direction();
        let pick = self.pick;
        let mut last_err = None;
        for _ in 0..MAX_POINT_RETRIES {
            let (x, y) = Self::random_point(&self.sim, &self.trays[pick], &mut self.rng);
            let patch = if record {
                Some(crop_patch(&self.trays[pick], x, y, self.sim.patch_cells)?)
            } else {
                None
            };
            match self.sim.grasp_at(&mut self.trays[pick], x, y, &mut self.rng) {
                Ok(outcome) => {
                    let place = &mut self.trays[1 - pick];
                    let (px, py) = (
                        self.rng.random_range(0..place.width()),
                        self.rng.random_range(0..place.height()),
                    );
                    self.sim.place_at(place, px, py, outcome.mass_g, &mut self.rng)?;
                    self.spilled_total_g += outcome.spilled_g;
                    self.iteration += 1;
                    let mass_g = quantize_mass(outcome.mass_g, self.sim.scale_resolution_g);
                    return Ok(Cycle { patch, point: (x, y), outcome, mass_g, switched });
                }
                Err(e @ Error::EmptySurface { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("retry loop ran at least once"))
    }

    /// Grasps at a chosen point and moves the material to the place tray.
    pub fn step_at(&mut self, x: usize, y: usize) -> Result<Cycle> {
        let switched = self.update_direction();
        let pick = self.pick;
        let outcome = self.sim.grasp_at(&mut self.trays[pick], x, y, &mut self.rng)?;
        let place = &mut self.trays[1 - pick];
        let (px, py) = (
            self.rng.random_range(0..place.width()),
            self.rng.random_range(0..place.height()),
        );
        self.sim.place_at(place, px, py, outcome.mass_g, &mut self.rng)?;
        self.spilled_total_g += outcome.spilled_g;
        self.iteration += 1;
        let mass_g = quantize_mass(outcome.mass_g, self.sim.scale_resolution_g);
        Ok(Cycle { patch: None, point: (x, y), outcome, mass_g, switched })
    }
}

/// Collects `n_iters` labelled grasps from a fresh pair of trays.
pub fn collect(sim: &Simulator, material: &MaterialParams, n_iters: usize, seed: u64) -> Result<Dataset> {
    if n_iters == 0 {
        return Err(Error::Invalid("n_iters must be >= 1".into()));
    }
    let mut state = CollectionState::new(sim, material, seed)?;
    let mut records = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let cycle = state.step(true)?;
        records.push(GraspRecord {
            patch: cycle.patch.expect("recording cycle"),
            mass_g: cycle.mass_g as f32,
        });
    }
    Ok(Dataset { records, material_name: material.name.clone(), seed })
}
