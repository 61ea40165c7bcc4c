//! Square patches cropped around grasp points, and flip augmentation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tray::Tray;

/// Number of channels in a patch: relative height, then intensity.
pub const CHANNELS: usize = 2;
pub const HEIGHT_CHANNEL: usize = 0;
pub const INTENSITY_CHANNEL: usize = 1;

/// A `CHANNELS x side x side` window around a grasp point.
///
/// Stored channel-major, row-major within each channel. The height channel
/// is relative to the centre cell, so it is exactly zero there.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    center: (usize, usize),
    data: Vec<f32>,
}

impl Patch {
    pub fn from_parts(side: usize, center: (usize, usize), data: Vec<f32>) -> Result<Self> {
        let expected = CHANNELS * side * side;
        if data.len() != expected {
            return Err(Error::Shape { expected, found: data.len() });
        }
        Ok(Self { side, center, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Grasp point in source-tray cell coordinates `(x, y)`.
    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.side + row) * self.side + col]
    }

    /// Reverses rows and/or columns of every channel jointly.
    pub fn flipped(&self, flip_rows: bool, flip_cols: bool) -> Patch {
        if !flip_rows && !flip_cols {
            return self.clone();
        }
        let p = self.side;
        let mut data = vec![0.0f32; self.data.len()];
        for c in 0..CHANNELS {
            for r in 0..p {
                let sr = if flip_rows { p - 1 - r } else { r };
                for col in 0..p {
                    let sc = if flip_cols { p - 1 - col } else { col };
                    data[(c * p + r) * p + col] = self.data[(c * p + sr) * p + sc];
                }
            }
        }
        Patch { side: p, center: self.center, data }
    }
}

/// Crops the `side x side` window centred on `(x, y)`.
///
/// For even sides the centre is cell `(side/2, side/2)` of the window.
pub fn crop_patch(tray: &Tray, x: usize, y: usize, side: usize) -> Result<Patch> {
    let half = side / 2;
    if x < half || y < half || x + (side - half) > tray.width() || y + (side - half) > tray.height()
    {
        return Err(Error::OutOfBounds { x, y });
    }
    let (x0, y0) = (x - half, y - half);
    let center_h = tray.h(x, y);
    let n = side * side;
    let mut data = vec![0.0f32; CHANNELS * n];
    let (height, intensity) = data.split_at_mut(n);
    for r in 0..side {
        for c in 0..side {
            let (tx, ty) = (x0 + c, y0 + r);
            height[r * side + c] = (tray.h(tx, ty) - center_h) as f32;
            intensity[r * side + c] = tray.intensity_at(tx, ty) as f32;
        }
    }
    Ok(Patch { side, center: (x, y), data })
}

/// Independently flips rows and columns with probability 0.5 each.
pub fn flip_augment<R: Rng + ?Sized>(patch: &Patch, rng: &mut R) -> Patch {
    let flip_rows = rng.random_bool(0.5);
    let flip_cols = rng.random_bool(0.5);
    patch.flipped(flip_rows, flip_cols)
}
