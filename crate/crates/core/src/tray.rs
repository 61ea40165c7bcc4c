//! Heightfield tray: the simulated world state.

use crate::config::{MaterialParams, TrayConfig};
use crate::rng::mix64;

/// Height below which the tray floor starts to show through.
const COVERAGE_MM: f64 = 3.0;
const FLOOR_INTENSITY: f64 = 0.12;
const MATERIAL_INTENSITY: f64 = 0.55;
const TEXTURE_AMPLITUDE: f64 = 0.08;
/// Intensity change per mm/cell of surface gradient (light from -x, -y).
const SHADING_GAIN: f64 = 0.06;
/// Darkening per unit of extra grain retention (moist or oily grains).
const RETENTION_SHADE: f64 = 0.8;

/// A rectangular tray of granular material stored as a heightfield.
///
/// Cells are row-major with `y` indexing rows and `x` indexing columns.
/// Heights are mm above the tray floor; `intensity` is the rendered surface
/// appearance in `[0, 1]` and is refreshed after every mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tray {
    width: usize,
    height: usize,
    cell_size_mm: f64,
    heights: Vec<f64>,
    intensity: Vec<f64>,
    /// Per-cell multiplier on the mass the fingers hold, fixed to the tray.
    retention: Vec<f64>,
    material: MaterialParams,
    texture_seed: u64,
}

impl Tray {
    /// An empty tray.
    pub fn empty(geometry: &TrayConfig, material: MaterialParams, texture_seed: u64) -> Self {
        let n = geometry.width_cells * geometry.height_cells;
        let mut tray = Self {
            width: geometry.width_cells,
            height: geometry.height_cells,
            cell_size_mm: geometry.cell_size_mm,
            heights: vec![0.0; n],
            intensity: vec![0.0; n],
            retention: vec![1.0; n],
            material,
            texture_seed,
        };
        tray.refresh_intensity();
        tray
    }

    /// Builds a tray from explicit heights. Negative heights are clamped to 0.
    pub fn from_heights(
        width: usize,
        height: usize,
        cell_size_mm: f64,
        heights: Vec<f64>,
        material: MaterialParams,
    ) -> Self {
        assert_eq!(heights.len(), width * height, "heightfield size mismatch");
        let mut tray = Self {
            width,
            height,
            cell_size_mm,
            heights: heights.into_iter().map(|h| h.max(0.0)).collect(),
            intensity: vec![0.0; width * height],
            retention: vec![1.0; width * height],
            material,
            texture_seed: 0,
        };
        tray.refresh_intensity();
        tray
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size_mm(&self) -> f64 {
        self.cell_size_mm
    }

    pub fn cell_area_mm2(&self) -> f64 {
        self.cell_size_mm * self.cell_size_mm
    }

    pub fn material(&self) -> &MaterialParams {
        &self.material
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn retention(&self) -> &[f64] {
        &self.retention
    }

    /// Replaces the retention field and re-renders the appearance.
    pub fn set_retention(&mut self, retention: Vec<f64>) {
        assert_eq!(retention.len(), self.heights.len(), "retention field size mismatch");
        assert!(retention.iter().all(|r| *r > 0.0 && r.is_finite()), "retention must be positive");
        self.retention = retention;
        self.refresh_intensity();
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn h(&self, x: usize, y: usize) -> f64 {
        self.heights[y * self.width + x]
    }

    #[inline]
    pub fn intensity_at(&self, x: usize, y: usize) -> f64 {
        self.intensity[y * self.width + x]
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height
    }

    pub(crate) fn heights_mut(&mut self) -> &mut [f64] {
        &mut self.heights
    }

    /// Mass equivalent of a volume of this tray's material.
    pub fn mass_of_volume_g(&self, volume_mm3: f64) -> f64 {
        self.material.grams_per_mm3() * volume_mm3
    }

    pub fn volume_of_mass_mm3(&self, mass_g: f64) -> f64 {
        mass_g / self.material.grams_per_mm3()
    }

    /// Largest adjacent (4-neighbour) height difference.
    pub fn max_adjacent_difference(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let h = self.h(x, y);
                if x + 1 < self.width {
                    worst = worst.max((h - self.h(x + 1, y)).abs());
                }
                if y + 1 < self.height {
                    worst = worst.max((h - self.h(x, y + 1)).abs());
                }
            }
        }
        worst
    }

    /// Re-renders the appearance channel from the current heights.
    pub fn refresh_intensity(&mut self) {
        let (w, hgt) = (self.width, self.height);
        for y in 0..hgt {
            for x in 0..w {
                let i = y * w + x;
                let h = self.heights[i];
                let gx = gradient(&self.heights, w, x, y, w, true);
                let gy = gradient(&self.heights, w, x, y, hgt, false);
                let tex = (mix64(self.texture_seed ^ (i as u64)) >> 11) as f64
                    / (1u64 << 53) as f64
                    * 2.0
                    - 1.0;
                let surface = MATERIAL_INTENSITY + TEXTURE_AMPLITUDE * tex
                    - SHADING_GAIN * (gx + gy)
                    - RETENTION_SHADE * (self.retention[i] - 1.0);
                let coverage = (h / COVERAGE_MM).clamp(0.0, 1.0);
                let v = coverage * surface + (1.0 - coverage) * FLOOR_INTENSITY;
                self.intensity[i] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Central difference along one axis, one-sided at the borders.
fn gradient(hs: &[f64], w: usize, x: usize, y: usize, extent: usize, along_x: bool) -> f64 {
    let pos = if along_x { x } else { y };
    if extent < 2 {
        return 0.0;
    }
    let at = |p: usize| if along_x { hs[y * w + p] } else { hs[p * w + x] };
    let lo = pos.saturating_sub(1);
    let hi = (pos + 1).min(extent - 1);
    (at(hi) - at(lo)) / (hi - lo) as f64
}

/// Total material mass held by the tray, in grams.
pub fn total_mass_g(tray: &Tray) -> f64 {
    let sum: f64 = tray.heights.iter().sum();
    tray.mass_of_volume_g(sum * tray.cell_area_mm2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_materials;

    fn coffee() -> MaterialParams {
        default_materials()["coffee"].clone()
    }

    #[test]
    fn empty_tray_weighs_nothing() {
        let tray = Tray::empty(&TrayConfig::default(), coffee(), 1);
        assert_eq!(total_mass_g(&tray), 0.0);
    }

    #[test]
    fn uniform_tray_mass_matches_closed_form() {
        let (w, h, cell, level) = (40, 30, 5.0, 12.5);
        let m = coffee();
        let tray = Tray::from_heights(w, h, cell, vec![level; w * h], m.clone());
        let closed = m.density_scale / 1000.0 * level * (w * h) as f64 * cell * cell;
        let mut summed = 0.0;
        for y in 0..h {
            for x in 0..w {
                summed += m.density_scale / 1000.0 * tray.h(x, y) * cell * cell;
            }
        }
        let got = total_mass_g(&tray);
        assert!((got - closed).abs() <= 1e-9 * closed);
        assert!((summed - closed).abs() <= 1e-9 * closed);
    }

    #[test]
    fn intensity_stays_in_unit_range_and_shows_floor() {
        let (w, h) = (20, 10);
        let mut hs = vec![20.0; w * h];
        hs[0] = 0.0;
        let tray = Tray::from_heights(w, h, 5.0, hs, coffee());
        assert!(tray.intensity().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((tray.intensity_at(0, 0) - FLOOR_INTENSITY).abs() < 1e-12);
    }

    #[test]
    fn retention_darkens_high_retention_cells() {
        let (w, h) = (20, 10);
        let mut tray = Tray::from_heights(w, h, 5.0, vec![20.0; w * h], coffee());
        let before = tray.intensity().to_vec();
        let mut r = vec![1.0; w * h];
        r[tray.idx(5, 5)] = 1.1;
        r[tray.idx(6, 5)] = 0.9;
        tray.set_retention(r);
        assert!(tray.intensity_at(5, 5) < before[tray.idx(5, 5)]);
        assert!(tray.intensity_at(6, 5) > before[tray.idx(6, 5)]);
        assert_eq!(tray.intensity_at(9, 9), before[tray.idx(9, 9)]);
    }
}
