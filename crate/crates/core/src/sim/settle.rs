//! Angle-of-repose relaxation.

use crate::tray::Tray;

/// Pairs steeper than the repose slope are relaxed to this fraction of it,
/// which keeps the iteration from creeping asymptotically towards the limit.
const RELAX_TO: f64 = 0.999;

/// Inclusive cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn full(tray: &Tray) -> Self {
        Self { x0: 0, y0: 0, x1: tray.width() - 1, y1: tray.height() - 1 }
    }

    /// Square of the given radius around a cell, clipped to the tray.
    pub fn around(tray: &Tray, x: usize, y: usize, rx: usize, ry: usize) -> Self {
        Self {
            x0: x.saturating_sub(rx),
            y0: y.saturating_sub(ry),
            x1: (x + rx).min(tray.width() - 1),
            y1: (y + ry).min(tray.height() - 1),
        }
    }

    fn grow(self, tray: &Tray) -> Self {
        Self {
            x0: self.x0.saturating_sub(1),
            y0: self.y0.saturating_sub(1),
            x1: (self.x1 + 1).min(tray.width() - 1),
            y1: (self.y1 + 1).min(tray.height() - 1),
        }
    }

    fn include(this: &mut Option<Region>, x: usize, y: usize) {
        match this {
            None => *this = Some(Region { x0: x, y0: y, x1: x, y1: y }),
            Some(r) => {
                r.x0 = r.x0.min(x);
                r.y0 = r.y0.min(y);
                r.x1 = r.x1.max(x);
                r.y1 = r.y1.max(y);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SettleReport {
    pub sweeps: usize,
    pub converged: bool,
}

/// Relaxes the whole tray until no adjacent pair exceeds the repose slope.
pub fn settle(tray: &mut Tray, max_sweeps: usize) -> SettleReport {
    let region = Region::full(tray);
    settle_region(tray, region, max_sweeps)
}

/// Like [`settle`], assuming the tray is already stable outside `region`.
pub fn settle_region(tray: &mut Tray, region: Region, max_sweeps: usize) -> SettleReport {
    let slope = tray.material().repose_slope;
    let target = slope * RELAX_TO;
    let (w, h) = (tray.width(), tray.height());
    let mut region = region;
    let mut report = SettleReport { sweeps: 0, converged: false };

    while report.sweeps < max_sweeps {
        report.sweeps += 1;
        let forward = report.sweeps % 2 == 1;
        let mut touched: Option<Region> = None;
        let hs = tray.heights_mut();
        let mut relax = |a: usize, b: usize, touched: &mut Option<Region>| {
            let d = hs[a] - hs[b];
            let (hi, lo) = if d > slope {
                (a, b)
            } else if -d > slope {
                (b, a)
            } else {
                return;
            };
            let moved = (d.abs() - target) * 0.5;
            hs[hi] -= moved;
            hs[lo] += moved;
            Region::include(touched, hi % w, hi / w);
            Region::include(touched, lo % w, lo / w);
        };
        let ys: Vec<usize> = if forward {
            (region.y0..=region.y1).collect()
        } else {
            (region.y0..=region.y1).rev().collect()
        };
        for y in ys {
            for k in 0..=(region.x1 - region.x0) {
                let x = if forward { region.x0 + k } else { region.x1 - k };
                let i = y * w + x;
                if x + 1 < w {
                    relax(i, i + 1, &mut touched);
                }
                if y + 1 < h {
                    relax(i, i + w, &mut touched);
                }
            }
        }
        match touched {
            None => {
                report.converged = true;
                break;
            }
            Some(r) => region = r.grow(tray),
        }
    }
    if !report.converged {
        log::warn!("settle stopped after {} sweeps without converging", report.sweeps);
    }
    tray.refresh_intensity();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_materials;
    use crate::tray::total_mass_g;

    fn tray_with(hs: Vec<f64>, w: usize, h: usize) -> Tray {
        Tray::from_heights(w, h, 5.0, hs, default_materials()["coffee"].clone())
    }

    #[test]
    fn stable_tray_is_a_fixpoint() {
        let (w, h) = (30, 20);
        let hs: Vec<f64> = (0..w * h).map(|i| 10.0 + 1.0 * ((i % w) as f64)).collect();
        let mut tray = tray_with(hs, w, h);
        let before = tray.clone();
        let rep = settle(&mut tray, 1000);
        assert!(rep.converged);
        assert_eq!(rep.sweeps, 1);
        assert_eq!(tray, before);
    }

    #[test]
    fn spike_spreads_and_conserves_mass() {
        let (w, h) = (41, 41);
        let mut hs = vec![0.0; w * h];
        hs[20 * w + 20] = 400.0;
        let mut tray = tray_with(hs, w, h);
        let m0 = total_mass_g(&tray);
        let rep = settle(&mut tray, 100_000);
        assert!(rep.converged);
        let m1 = total_mass_g(&tray);
        assert!((m1 - m0).abs() <= 1e-9 * m0, "{m0} -> {m1}");
        assert!(tray.max_adjacent_difference() <= tray.material().repose_slope);
        assert!(tray.h(20, 20) < 400.0);
        assert!(tray.heights().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn random_tray_has_no_violations_after_settling() {
        use rand::Rng;
        let (w, h) = (60, 40);
        let mut rng = crate::rng::stream_rng(11, 0);
        let hs: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..40.0)).collect();
        let mut tray = tray_with(hs, w, h);
        let m0 = total_mass_g(&tray);
        assert!(settle(&mut tray, 100_000).converged);
        let slope = tray.material().repose_slope;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    assert!((tray.h(x, y) - tray.h(x + 1, y)).abs() <= slope);
                }
                if y + 1 < h {
                    assert!((tray.h(x, y) - tray.h(x, y + 1)).abs() <= slope);
                }
            }
        }
        assert!((total_mass_g(&tray) - m0).abs() <= 1e-9 * m0);
    }
}
