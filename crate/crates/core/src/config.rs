//! Experiment configuration and material presets.
//!
//! Everything tunable lives here and round-trips through a plain-text
//! `key = value` file (TOML). `ExperimentConfig::default()` is the single
//! source of defaults; `dump` prints it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Optimizer;

/// Physical behaviour of one granular material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub name: String,
    /// Grams per cm³ of captured heightfield volume.
    pub density_scale: f64,
    /// Coefficient of variation of the multiplicative grasp noise.
    pub noise_cv: f64,
    /// Extra CV per unit of surface relief under the fingers, where relief
    /// is the footprint's height range over the insertion depth. Uneven
    /// ground makes grasps less repeatable.
    #[serde(default)]
    pub relief_noise_cv: f64,
    /// Maximum stable height difference between adjacent cells, mm.
    pub repose_slope: f64,
    pub capacity_g: f64,
    pub breakage_prob: f64,
    pub compress_factor: f64,
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("material {:?}: {what}", self.name)));
        if !(self.density_scale > 0.0) {
            return bad("density_scale must be > 0");
        }
        if !(self.noise_cv >= 0.0) {
            return bad("noise_cv must be >= 0");
        }
        if !(self.relief_noise_cv >= 0.0) {
            return bad("relief_noise_cv must be >= 0");
        }
        if !(self.repose_slope > 0.0) {
            return bad("repose_slope must be > 0");
        }
        if !(self.capacity_g > 0.0) {
            return bad("capacity_g must be > 0");
        }
        if !(0.0..=1.0).contains(&self.breakage_prob) {
            return bad("breakage_prob must lie in [0, 1]");
        }
        if !(self.compress_factor > 0.0 && self.compress_factor <= 1.0) {
            return bad("compress_factor must lie in (0, 1]");
        }
        Ok(())
    }

    /// Grams per mm³.
    pub fn grams_per_mm3(&self) -> f64 {
        self.density_scale / 1000.0
    }
}

fn preset(
    name: &str,
    density_scale: f64,
    noise_cv: f64,
    relief_noise_cv: f64,
    repose_slope: f64,
    capacity_g: f64,
    breakage_prob: f64,
    compress_factor: f64,
) -> MaterialParams {
    MaterialParams {
        name: name.to_string(),
        density_scale,
        noise_cv,
        relief_noise_cv,
        repose_slope,
        capacity_g,
        breakage_prob,
        compress_factor,
    }
}

/// Built-in presets, calibrated against the reference grasp-mass
/// distributions (coffee about 22 ± 5 g, rice about 60 ± 15 g).
pub fn default_materials() -> BTreeMap<String, MaterialParams> {
    [
        preset("coffee", 8.875, 0.03, 0.05, 4.0, 60.0, 0.0, 1.0),
        preset("rice", 24.0, 0.036, 0.05, 4.8, 160.0, 0.0, 1.0),
        preset("oatmeal", 14.0, 0.03, 0.05, 5.6, 60.0, 0.0, 0.6),
        preset("peanut", 14.0, 0.036, 0.05, 3.2, 80.0, 0.15, 1.0),
    ]
    .into_iter()
    .map(|m| (m.name.clone(), m))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrayConfig {
    pub width_cells: usize,
    pub height_cells: usize,
    pub cell_size_mm: f64,
    /// Inner depth of the tray; bounds the fill volume.
    pub depth_mm: f64,
    /// Mean surface level of the initially filled tray.
    pub fill_level_mm: f64,
    /// Amplitude of the random pour mounds on a freshly filled tray.
    pub roughness_mm: f64,
    pub mound_count: usize,
    /// Amplitude of the smooth grain-retention field (0 disables it).
    pub retention_amplitude: f64,
    /// Spatial scale of the retention field, in cells.
    pub retention_scale_cells: f64,
}

impl Default for TrayConfig {
    fn default() -> Self {
        // 603 x 377 mm tray at 5 mm per cell.
        Self {
            width_cells: 120,
            height_cells: 75,
            cell_size_mm: 5.0,
            depth_mm: 145.0,
            fill_level_mm: 80.0,
            roughness_mm: 9.0,
            mound_count: 160,
            retention_amplitude: 0.15,
            retention_scale_cells: 10.0,
        }
    }
}

impl TrayConfig {
    pub fn cell_area_mm2(&self) -> f64 {
        self.cell_size_mm * self.cell_size_mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GripperConfig {
    /// Footprint extent along x, in cells. Even sizes straddle half cells.
    pub footprint_w_cells: usize,
    pub footprint_l_cells: usize,
    pub insertion_depth_mm: f64,
}

impl Default for GripperConfig {
    fn default() -> Self {
        Self {
            footprint_w_cells: 6,
            footprint_l_cells: 2,
            insertion_depth_mm: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Tray switch threshold as a multiple of the material's capacity_g.
    pub epsilon_factor: f64,
    pub place_sigma_min_cells: f64,
    pub place_sigma_max_cells: f64,
    pub settle_max_sweeps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            epsilon_factor: 5.0,
            place_sigma_min_cells: 1.5,
            place_sigma_max_cells: 3.0,
            settle_max_sweeps: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Minimum number of optimizer steps; epochs are derived from it.
    pub min_steps: usize,
    pub min_epochs: usize,
    pub optimizer: Optimizer,
    pub rnd_k: usize,
    /// Apply random vertical/horizontal flips each epoch.
    pub augment: bool,
    /// Fraction of a dataset held out to report the mass head's loss, used
    /// only when the dataset has more than `holdout_min_records` records.
    pub holdout_fraction: f64,
    pub holdout_min_records: usize,
    /// Folds used to cross-fit the error head's targets; below 2 the mass
    /// head's own training errors are used.
    pub ee_folds: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            learning_rate: 1e-3,
            batch_size: 32,
            min_steps: 1500,
            min_epochs: 30,
            optimizer: Optimizer::Adam,
            rnd_k: 16,
            augment: true,
            holdout_fraction: 0.1,
            holdout_min_records: 100,
            ee_folds: 5,
        }
    }
}

impl TrainingConfig {
    pub fn epochs_for(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size.max(1)).max(1);
        self.min_epochs.max(self.min_steps.div_ceil(per_epoch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub material: String,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub policies: Vec<String>,
    /// Explicit targets; empty means mean - std, mean, mean + std of the
    /// reference collection.
    pub targets_g: Vec<f64>,
    pub reference_size: usize,
    pub attempts: usize,
    /// Attempts used instead of `attempts` for sizes <= 100 on materials
    /// listed in `extended_attempt_materials`.
    pub small_size_attempts: usize,
    pub extended_attempt_materials: Vec<String>,
    /// Random pick-place cycles run on the evaluation trays before the first
    /// attempt.
    pub warmup_cycles: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            material: "coffee".into(),
            sizes: vec![50, 100, 200, 500, 1000],
            seeds: vec![1, 2, 3, 4, 5],
            policies: vec!["random".into(), "baseline".into(), "ee".into(), "rnd".into()],
            targets_g: Vec::new(),
            reference_size: 1000,
            attempts: 50,
            small_size_attempts: 100,
            extended_attempt_materials: vec!["rice".into()],
            warmup_cycles: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub patch_cells: usize,
    pub scale_resolution_g: f64,
    pub band_g: f64,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub tolerances: Vec<f64>,
    /// Regression output dimension. Only 1 is supported.
    pub output_dim: usize,
    pub tray: TrayConfig,
    pub gripper: GripperConfig,
    pub sim: SimConfig,
    pub training: TrainingConfig,
    pub campaign: CampaignConfig,
    pub materials: BTreeMap<String, MaterialParams>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            patch_cells: 31,
            scale_resolution_g: 1.0,
            band_g: 0.5,
            grid_nx: 45,
            grid_ny: 20,
            tolerances: vec![0.05, 0.10],
            output_dim: 1,
            tray: TrayConfig::default(),
            gripper: GripperConfig::default(),
            sim: SimConfig::default(),
            training: TrainingConfig::default(),
            campaign: CampaignConfig::default(),
            materials: default_materials(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Short stable digest of the serialized config.
    pub fn hash(&self) -> [u8; 8] {
        let digest = Sha256::digest(self.dump().as_bytes());
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }

    pub fn material(&self, name: &str) -> Result<&MaterialParams> {
        self.materials
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown material {name:?}")))
    }

    /// Distance from the tray edge a grasp point must keep.
    pub fn margin_cells(&self) -> usize {
        self.patch_cells / 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.patch_cells == 0 {
            return fail("patch_cells must be >= 1");
        }
        if self.tray.width_cells < self.patch_cells || self.tray.height_cells < self.patch_cells {
            return fail("tray must be at least one patch wide and tall");
        }
        if !(self.tray.cell_size_mm > 0.0) {
            return fail("cell_size_mm must be > 0");
        }
        if !(0.0..1.0).contains(&self.tray.retention_amplitude) || !(self.tray.retention_scale_cells > 0.0) {
            return fail("retention_amplitude must lie in [0, 1) and retention_scale_cells be > 0");
        }
        if !(self.scale_resolution_g > 0.0) {
            return fail("scale_resolution_g must be > 0");
        }
        if !(self.band_g > 0.0) {
            return fail("band_g must be > 0");
        }
        if self.grid_nx == 0 || self.grid_ny == 0 {
            return fail("grid_nx and grid_ny must be >= 1");
        }
        if self.tolerances.iter().any(|t| !(*t > 0.0)) {
            return fail("tolerances must be > 0");
        }
        if self.output_dim != 1 {
            return fail("only output_dim = 1 is supported");
        }
        if self.gripper.footprint_w_cells == 0 || self.gripper.footprint_l_cells == 0 {
            return fail("gripper footprint must be non-empty");
        }
        if self.gripper.footprint_w_cells > self.patch_cells
            || self.gripper.footprint_l_cells > self.patch_cells
        {
            return fail("gripper footprint must fit inside a patch");
        }
        if !(self.gripper.insertion_depth_mm > 0.0) {
            return fail("insertion_depth_mm must be > 0");
        }
        if !(self.training.learning_rate > 0.0) {
            return fail("learning_rate must be > 0");
        }
        if self.training.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.training.rnd_k == 0 {
            return fail("rnd_k must be >= 1");
        }
        if !(0.0..1.0).contains(&self.training.holdout_fraction) {
            return fail("holdout_fraction must be in [0, 1)");
        }
        if self.campaign.attempts == 0 || self.campaign.small_size_attempts == 0 {
            return fail("attempts must be >= 1");
        }
        if self.campaign.targets_g.iter().any(|t| !(*t > 0.0)) {
            return fail("targets must be > 0");
        }
        for m in self.materials.values() {
            m.validate()?;
        }
        Ok(())
    }
}
