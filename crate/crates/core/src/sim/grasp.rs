//! Grasp extraction and placement.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::settle::{settle_region, Region};
use super::Simulator;
use crate::error::{Error, Result};
use crate::tray::Tray;

#[derive(Debug, Clone, PartialEq)]
pub struct GraspOutcome {
    /// Mass held by the gripper after any breakage loss, before quantization.
    pub mass_g: f64,
    /// Mass that broke off and fell back around the footprint.
    pub spilled_g: f64,
    /// Cells covered by the fingers, `(x, y)`.
    pub footprint: Vec<(usize, usize)>,
}

/// Coverage weights of a `w x l` cell rectangle centred on a cell centre.
///
/// Returns `(dx, dy, weight)`; weights are the covered fraction of each cell
/// and sum to `w * l`.
pub fn footprint_weights(w_cells: usize, l_cells: usize) -> Vec<(isize, isize, f64)> {
    let axis = |extent: usize| -> Vec<(isize, f64)> {
        let half = extent as f64 / 2.0;
        let reach = (half - 0.5).ceil() as isize;
        (-reach..=reach)
            .map(|d| {
                let lo = (d as f64 - 0.5).max(-half);
                let hi = (d as f64 + 0.5).min(half);
                (d, (hi - lo).max(0.0))
            })
            .filter(|&(_, wt)| wt > 0.0)
            .collect()
    };
    let xs = axis(w_cells);
    let ys = axis(l_cells);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &(dy, wy) in &ys {
        for &(dx, wx) in &xs {
            out.push((dx, dy, wx * wy));
        }
    }
    out
}

/// Cells in the one-cell ring around a footprint, clipped to the tray.
fn ring_cells(tray: &Tray, x: usize, y: usize, fp: &[(isize, isize, f64)]) -> Vec<usize> {
    let rx = fp.iter().map(|f| f.0.abs()).max().unwrap_or(0) + 1;
    let ry = fp.iter().map(|f| f.1.abs()).max().unwrap_or(0) + 1;
    let mut out = Vec::new();
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            if dx.abs() < rx && dy.abs() < ry {
                continue;
            }
            let (cx, cy) = (x as isize + dx, y as isize + dy);
            if cx >= 0 && cy >= 0 && (cx as usize) < tray.width() && (cy as usize) < tray.height() {
                out.push(tray.idx(cx as usize, cy as usize));
            }
        }
    }
    out
}

/// Adds `volume` spread uniformly over the given cells.
fn deposit_uniform(hs: &mut [f64], cells: &[usize], volume_mm3: f64, cell_area: f64) {
    if cells.is_empty() || volume_mm3 <= 0.0 {
        return;
    }
    let dh = volume_mm3 / (cells.len() as f64 * cell_area);
    for &i in cells {
        hs[i] += dh;
    }
}

impl Simulator {
    /// Executes one grasp at cell `(x, y)` and removes the grasped mass.
    ///
    /// The fingers enter `insertion_depth_mm` below the local surface (never
    /// below the tray floor) and capture everything above that plane inside
    /// the footprint, scaled by `compress_factor` and capped at `capacity_g`.
    /// Log-normal noise with the material's CV perturbs the captured mass;
    /// any shortfall falls back into the hole and any excess slides in from
    /// the surrounding ring. Breakage moves part of the held mass onto the
    /// ring. The tray loses exactly the returned `mass_g`.
    pub fn grasp_at<R: Rng + ?Sized>(
        &self,
        tray: &mut Tray,
        x: usize,
        y: usize,
        rng: &mut R,
    ) -> Result<GraspOutcome> {
        self.check_grasp_point(tray, x, y)?;
        let center_h = tray.h(x, y);
        if center_h <= 0.0 {
            return Err(Error::EmptySurface { x, y });
        }
        let material = tray.material().clone();
        let rho = material.grams_per_mm3();
        let area = tray.cell_area_mm2();
        let plane = (center_h - self.gripper.insertion_depth_mm).max(0.0);

        // Stochastic draws happen unconditionally so the stream layout does
        // not depend on the material.
        let z: f64 = StandardNormal.sample(rng);
        let breaks = rng.random::<f64>() < material.breakage_prob;
        let break_frac = rng.random::<f64>() * 0.5;

        let fp = footprint_weights(self.gripper.footprint_w_cells, self.gripper.footprint_l_cells);
        let ring = ring_cells(tray, x, y, &fp);
        let cells: Vec<(usize, usize, usize, f64)> = fp
            .iter()
            .map(|&(dx, dy, wt)| {
                let (cx, cy) = ((x as isize + dx) as usize, (y as isize + dy) as usize);
                (cx, cy, tray.idx(cx, cy), wt)
            })
            .collect();
        let reach_x = fp.iter().map(|f| f.0.unsigned_abs()).max().unwrap_or(0) + 2;
        let reach_y = fp.iter().map(|f| f.1.unsigned_abs()).max().unwrap_or(0) + 2;
        let region = Region::around(tray, x, y, reach_x, reach_y);

        let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            let h = tray.heights()[c.2];
            (lo.min(h), hi.max(h))
        });
        let relief = (hi - lo) / self.gripper.insertion_depth_mm;
        let wsum: f64 = cells.iter().map(|c| c.3).sum();
        let retention = cells.iter().map(|c| c.3 * tray.retention()[c.2]).sum::<f64>() / wsum;
        let hs = tray.heights_mut();
        let mut captured_mm3 = 0.0;
        for &(_, _, i, wt) in &cells {
            let depth = wt * (hs[i] - plane).max(0.0);
            captured_mm3 += depth * area;
            hs[i] -= depth;
        }
        let removed_g = rho * captured_mm3;
        let held_g = (removed_g * material.compress_factor * retention).min(material.capacity_g);
        let cv = material.noise_cv + material.relief_noise_cv * relief;
        let eta = if cv > 0.0 {
            let s2 = (1.0 + cv * cv).ln();
            (s2.sqrt() * z - 0.5 * s2).exp()
        } else {
            1.0
        };
        let mut mass_g = held_g * eta;

        let surplus_g = removed_g - mass_g;
        if surplus_g >= 0.0 {
            // Whatever the fingers did not hold drops back into the hole,
            // in proportion to each cell's coverage.
            let dh = surplus_g / rho / (wsum * area);
            for &(_, _, i, wt) in &cells {
                hs[i] += wt * dh;
            }
        } else {
            // Extra material slides in from the ring, from above the plane.
            let want_mm3 = -surplus_g / rho;
            let avail_mm3: f64 = ring.iter().map(|&i| (hs[i] - plane).max(0.0) * area).sum();
            let take_mm3 = want_mm3.min(avail_mm3);
            if take_mm3 > 0.0 {
                let frac = take_mm3 / avail_mm3;
                for &i in &ring {
                    hs[i] -= frac * (hs[i] - plane).max(0.0);
                }
            }
            mass_g = removed_g + rho * take_mm3;
        }

        let mut spilled_g = 0.0;
        if breaks {
            spilled_g = break_frac * mass_g;
            mass_g -= spilled_g;
            deposit_uniform(hs, &ring, spilled_g / rho, area);
        }
        // Rounding can leave -0.0-ish residue where the plane is the floor.
        for i in cells.iter().map(|c| c.2).chain(ring.iter().copied()) {
            hs[i] = hs[i].max(0.0);
        }

        settle_region(tray, region, self.sim.settle_max_sweeps);
        Ok(GraspOutcome {
            mass_g,
            spilled_g,
            footprint: cells.iter().map(|c| (c.0, c.1)).collect(),
        })
    }

    /// Drops `mass_g` onto the tray as a Gaussian mound centred on `(x, y)`,
    /// then lets it settle. The mound's spread is drawn from `rng`.
    pub fn place_at<R: Rng + ?Sized>(
        &self,
        tray: &mut Tray,
        x: usize,
        y: usize,
        mass_g: f64,
        rng: &mut R,
    ) -> Result<()> {
        if !tray.contains(x, y) {
            return Err(Error::OutOfBounds { x, y });
        }
        if !(mass_g >= 0.0) {
            return Err(Error::Invalid(format!("cannot place {mass_g} g")));
        }
        if mass_g == 0.0 {
            return Ok(());
        }
        let sigma = rng.random_range(self.sim.place_sigma_min_cells..=self.sim.place_sigma_max_cells);
        let reach = (3.0 * sigma).ceil() as usize;
        let region = Region::around(tray, x, y, reach, reach);
        let mut weights = Vec::new();
        for cy in region.y0..=region.y1 {
            for cx in region.x0..=region.x1 {
                let (dx, dy) = (cx as f64 - x as f64, cy as f64 - y as f64);
                let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                weights.push((tray.idx(cx, cy), g));
            }
        }
        let total: f64 = weights.iter().map(|w| w.1).sum();
        let volume = tray.volume_of_mass_mm3(mass_g);
        let area = tray.cell_area_mm2();
        let hs = tray.heights_mut();
        for (i, g) in weights {
            hs[i] += volume * g / total / area;
        }
        let settle_region_ = Region::around(tray, x, y, reach + 1, reach + 1);
        settle_region(tray, settle_region_, self.sim.settle_max_sweeps);
        Ok(())
    }
}
