//! Granular heightfield simulator standing in for the physical two-tray rig.

mod collect;
mod grasp;
mod settle;

pub use collect::{collect, CollectionState, Cycle};
pub use grasp::{footprint_weights, GraspOutcome};
pub use settle::{settle, settle_region, Region, SettleReport};

use rand::{Rng, SeedableRng};

use crate::config::{ExperimentConfig, GripperConfig, MaterialParams, SimConfig, TrayConfig};
use crate::error::{Error, Result};
use crate::rng::{mix64, SimRng};
use crate::tray::{total_mass_g, Tray};

/// Simulator parameters shared by every operation.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub tray: TrayConfig,
    pub gripper: GripperConfig,
    pub sim: SimConfig,
    pub patch_cells: usize,
    pub scale_resolution_g: f64,
}

impl Simulator {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            tray: cfg.tray.clone(),
            gripper: cfg.gripper.clone(),
            sim: cfg.sim.clone(),
            patch_cells: cfg.patch_cells,
            scale_resolution_g: cfg.scale_resolution_g,
        }
    }

    pub fn margin(&self) -> usize {
        self.patch_cells / 2
    }

    /// Mass of a tray filled flat to `fill_level_mm`.
    pub fn default_fill_g(&self, material: &MaterialParams) -> f64 {
        let cells = (self.tray.width_cells * self.tray.height_cells) as f64;
        material.grams_per_mm3() * self.tray.fill_level_mm * cells * self.tray.cell_area_mm2()
    }

    /// A freshly poured tray: random mounds over a flat fill, relaxed to the
    /// repose slope and shifted so the total mass matches `fill_mass_g`.
    pub fn init_tray(&self, material: &MaterialParams, fill_mass_g: f64, seed: u64) -> Result<Tray> {
        if !(fill_mass_g >= 0.0) {
            return Err(Error::Invalid(format!("fill mass must be >= 0, got {fill_mass_g}")));
        }
        material.validate()?;
        let geom = &self.tray;
        let (w, h) = (geom.width_cells, geom.height_cells);
        let area = geom.cell_area_mm2();
        let cells = (w * h) as f64;
        let capacity_g = material.grams_per_mm3() * cells * area * geom.depth_mm;
        if fill_mass_g > capacity_g {
            return Err(Error::OverCapacity { requested_g: fill_mass_g, capacity_g });
        }
        let mut tray = Tray::empty(geom, material.clone(), mix64(seed));
        if fill_mass_g == 0.0 {
            return Ok(tray);
        }

        let mut rng = SimRng::seed_from_u64(seed);
        let level = fill_mass_g / material.grams_per_mm3() / (cells * area);
        let mut field = vec![level; w * h];
        for _ in 0..geom.mound_count {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let sigma = rng.random_range(2.0..6.0);
            let amp = rng.random_range(-1.0..1.0) * geom.roughness_mm;
            let reach = (3.0 * sigma) as isize;
            let (ix, iy) = (cx as isize, cy as isize);
            for y in (iy - reach).max(0)..=(iy + reach).min(h as isize - 1) {
                for x in (ix - reach).max(0)..=(ix + reach).min(w as isize - 1) {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    field[y as usize * w + x as usize] += amp * g;
                }
            }
        }
        for v in field.iter_mut() {
            *v = v.clamp(0.0, geom.depth_mm);
        }
        tray.heights_mut().copy_from_slice(&field);
        settle(&mut tray, self.sim.settle_max_sweeps);

        // Shifting every cell by the same offset (clamped at the floor) keeps
        // the surface repose-stable, so solve for the offset hitting the mass.
        let base: Vec<f64> = tray.heights().to_vec();
        let target_sum = fill_mass_g / material.grams_per_mm3() / area;
        let sum_at = |d: f64| base.iter().map(|&b| (b + d).max(0.0)).sum::<f64>();
        let max_h = base.iter().cloned().fold(0.0, f64::max);
        let (mut lo, mut hi) = (-max_h, level + geom.depth_mm);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if sum_at(mid) < target_sum {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let d = 0.5 * (lo + hi);
        for (v, &b) in tray.heights_mut().iter_mut().zip(&base) {
            *v = (b + d).max(0.0);
        }
        if geom.retention_amplitude > 0.0 {
            tray.set_retention(retention_field(w, h, geom.retention_amplitude, geom.retention_scale_cells, &mut rng));
        } else {
            tray.refresh_intensity();
        }
        debug_assert!((total_mass_g(&tray) - fill_mass_g).abs() < 1.0);
        Ok(tray)
    }

    /// Checks that a grasp point keeps the patch margin from every edge.
    pub fn check_grasp_point(&self, tray: &Tray, x: usize, y: usize) -> Result<()> {
        let m = self.margin();
        if x < m || y < m || x + m >= tray.width() || y + m >= tray.height() {
            return Err(Error::OutOfBounds { x, y });
        }
        Ok(())
    }

    pub fn settle(&self, tray: &mut Tray) -> SettleReport {
        settle(tray, self.sim.settle_max_sweeps)
    }
}

/// Smooth random field in `(1 - amplitude, 1 + amplitude)`: a sum of
/// Gaussian blobs, standardised and squashed with tanh.
fn retention_field<R: Rng + ?Sized>(w: usize, h: usize, amplitude: f64, scale: f64, rng: &mut R) -> Vec<f64> {
    let blobs = ((w * h) as f64 / (scale * scale)).ceil() as usize * 2;
    let mut field = vec![0.0; w * h];
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                field[y * w + x] += sign * (-(dx * dx + dy * dy) / (2.0 * scale * scale)).exp();
            }
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    field.iter().map(|v| 1.0 + amplitude * ((v - mean) / std).tanh()).collect()
}
