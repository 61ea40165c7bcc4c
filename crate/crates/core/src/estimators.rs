//! The three learned heads: mass regression, error estimation (EE) and the
//! random-network-distillation (RND) pair.
//!
//! All heads share one [`Normalizer`] fitted on the mass head's training
//! split. Patches are flattened channel-major after per-channel
//! standardisation; flips are applied on the fly during training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, TrainingConfig};
use crate::dataset::{Dataset, GraspRecord};
use crate::error::{Error, Result};
use crate::nn::{self, read_mlp, write_mlp, Activation, Mlp, TrainConfig, TrainingData};
use crate::patching::{Patch, CHANNELS};
use crate::rng::{derive_seed, stream, stream_rng, SimRng};

/// Rows per inference batch. Fixed so results never depend on how callers
/// split their work.
pub const INFERENCE_CHUNK: usize = 64;

/// Per-channel input standardisation plus label scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub side: usize,
    pub channel_mean: [f64; CHANNELS],
    pub channel_std: [f64; CHANNELS],
    pub mass_mean: f64,
    pub mass_std: f64,
}

fn std_or_one(var: f64) -> f64 {
    let s = var.max(0.0).sqrt();
    if s > 1e-9 {
        s
    } else {
        1.0
    }
}

impl Normalizer {
    pub fn fit(records: &[GraspRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Invalid("no records to fit".into()))?;
        let side = first.patch.side();
        let cells = side * side;
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        for r in records {
            if r.patch.side() != side {
                return Err(Error::Shape { expected: side, found: r.patch.side() });
            }
            for c in 0..CHANNELS {
                for &v in r.patch.channel(c) {
                    let v = v as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (records.len() * cells) as f64;
        let mut channel_mean = [0.0; CHANNELS];
        let mut channel_std = [1.0; CHANNELS];
        for c in 0..CHANNELS {
            channel_mean[c] = sum[c] / count;
            channel_std[c] = std_or_one(sq[c] / count - channel_mean[c] * channel_mean[c]);
        }
        let n = records.len() as f64;
        let mass_mean = records.iter().map(|r| r.mass_g as f64).sum::<f64>() / n;
        let mass_var =
            records.iter().map(|r| (r.mass_g as f64 - mass_mean).powi(2)).sum::<f64>() / n;
        Ok(Self { side, channel_mean, channel_std, mass_mean, mass_std: std_or_one(mass_var) })
    }

    pub fn input_dim(&self) -> usize {
        CHANNELS * self.side * self.side
    }

    /// Writes the standardised, optionally flipped patch into `out`.
    pub fn encode_into(&self, patch: &Patch, flip_rows: bool, flip_cols: bool, out: &mut [f64]) -> Result<()> {
        if patch.side() != self.side {
            return Err(Error::Shape { expected: self.side, found: patch.side() });
        }
        let p = self.side;
        let data = patch.data();
        for c in 0..CHANNELS {
            let (m, inv) = (self.channel_mean[c], 1.0 / self.channel_std[c]);
            for r in 0..p {
                let sr = if flip_rows { p - 1 - r } else { r };
                let src = &data[(c * p + sr) * p..(c * p + sr + 1) * p];
                let dst = &mut out[(c * p + r) * p..(c * p + r + 1) * p];
                if flip_cols {
                    for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                        *d = (v as f64 - m) * inv;
                    }
                } else {
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = (v as f64 - m) * inv;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, patch: &Patch) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.input_dim()];
        self.encode_into(patch, false, false, &mut out)?;
        Ok(out)
    }

    fn encode_batch(&self, patches: &[&Patch]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((patches.len(), self.input_dim()));
        for (row, p) in x.rows_mut().into_iter().zip(patches) {
            self.encode_into(p, false, false, row.into_slice().expect("standard layout"))?;
        }
        Ok(x)
    }
}

/// Patches with per-record targets, or with targets produced by a frozen
/// network from the (possibly flipped) input.
struct PatchSet<'a> {
    patches: Vec<&'a Patch>,
    targets: Vec<f64>,
    norm: &'a Normalizer,
    augment: bool,
    target_net: Option<&'a Mlp>,
}

impl TrainingData for PatchSet<'_> {
    fn len(&self) -> usize {
        self.patches.len()
    }

    fn input_dim(&self) -> usize {
        self.norm.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.target_net.map_or(1, Mlp::output_dim)
    }

    fn fill_batch(
        &self,
        indices: &[usize],
        rng: &mut SimRng,
        inputs: &mut Array2<f64>,
        targets: &mut Array2<f64>,
    ) {
        for (row, &i) in indices.iter().enumerate() {
            let (fr, fc) = if self.augment {
                (rng.random_bool(0.5), rng.random_bool(0.5))
            } else {
                (false, false)
            };
            let mut dst = inputs.row_mut(row);
            self.norm
                .encode_into(self.patches[i], fr, fc, dst.as_slice_mut().expect("standard layout"))
                .expect("patch sides checked when the set was built");
        }
        match self.target_net {
            Some(net) => targets.assign(&net.forward_batch(inputs.view()).expect("widths checked")),
            None => {
                for (row, &i) in indices.iter().enumerate() {
                    targets[(row, 0)] = self.targets[i];
                }
            }
        }
    }
}

fn check_sides(records: &[GraspRecord], norm: &Normalizer) -> Result<()> {
    match records.iter().find(|r| r.patch.side() != norm.side) {
        Some(r) => Err(Error::Shape { expected: norm.side, found: r.patch.side() }),
        None => Ok(()),
    }
}

fn head_widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain([output]).collect()
}

fn head_activations(hidden: usize, output: Activation) -> Vec<Activation> {
    let mut acts = vec![Activation::Relu; hidden];
    acts.push(output);
    acts
}

fn train_config(cfg: &TrainingConfig, n: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs_for(n),
        optimizer: cfg.optimizer,
        seed,
    }
}

/// Runs `net` over `patches` in fixed-size chunks, returning one output row
/// per patch.
fn forward_chunks(net: &Mlp, norm: &Normalizer, patches: &[&Patch]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFERENCE_CHUNK) {
        let y = net.forward_batch(norm.encode_batch(chunk)?.view())?;
        out.extend(y.rows().into_iter().map(|r| r.to_vec()));
    }
    Ok(out)
}

/// How the mass head's recorded loss was measured.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean squared error in g².
    pub loss_g2: f64,
    /// Whether `loss_g2` was measured on held-out records.
    pub held_out: bool,
    /// Per-epoch training loss in standardised units.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassEstimator {
    pub net: Mlp,
    pub norm: Normalizer,
    /// Number of leading dataset records the head was trained on.
    pub train_records: usize,
    pub fit: FitReport,
}

impl MassEstimator {
    pub fn predict(&self, patch: &Patch) -> Result<f64> {
        let y = self.net.forward(&self.norm.encode(patch)?)?;
        Ok(self.norm.mass_mean + self.norm.mass_std * y[0])
    }

    pub fn predict_batch(&self, patches: &[&Patch]) -> Result<Vec<f64>> {
        Ok(forward_chunks(&self.net, &self.norm, patches)?
            .into_iter()
            .map(|y| self.norm.mass_mean + self.norm.mass_std * y[0])
            .collect())
    }

    /// Mean squared error in g² over `records`, without augmentation.
    pub fn mse_g2(&self, records: &[GraspRecord]) -> Result<f64> {
        if records.is_empty() {
            return Ok(0.0);
        }
        let patches: Vec<&Patch> = records.iter().map(|r| &r.patch).collect();
        let pred = self.predict_batch(&patches)?;
        Ok(pred.iter().zip(records).map(|(p, r)| (p - r.mass_g as f64).powi(2)).sum::<f64>()
            / records.len() as f64)
    }
}

/// Fits the mass head by MSE on standardised labels.
///
/// Datasets larger than `holdout_min_records` keep a trailing
/// `holdout_fraction` of records out of training and report the loss on
/// them; smaller ones report the training loss.
pub fn train_mass(ds: &Dataset, cfg: &TrainingConfig, seed: u64) -> Result<MassEstimator> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    let held = if n > cfg.holdout_min_records {
        ((n as f64 * cfg.holdout_fraction).round() as usize).min(n - 1)
    } else {
        0
    };
    let (train_recs, hold_recs) = ds.records.split_at(n - held);
    let norm = Normalizer::fit(train_recs)?;
    let (net, curve) = fit_mass_net(train_recs, &norm, cfg, seed)?;
    let mut est = MassEstimator {
        net,
        norm,
        train_records: train_recs.len(),
        fit: FitReport { loss_g2: 0.0, held_out: held > 0, curve },
    };
    est.fit.loss_g2 = est.mse_g2(if held > 0 { hold_recs } else { train_recs })?;
    Ok(est)
}

fn fit_mass_net(records: &[GraspRecord], norm: &Normalizer, cfg: &TrainingConfig, seed: u64) -> Result<(Mlp, Vec<f64>)> {
    let mut net = Mlp::new(
        &head_widths(norm.input_dim(), &cfg.hidden, 1),
        &head_activations(cfg.hidden.len(), Activation::Identity),
        &mut stream_rng(seed, stream::MASS_INIT),
    );
    let data = PatchSet {
        patches: records.iter().map(|r| &r.patch).collect(),
        targets: records.iter().map(|r| (r.mass_g as f64 - norm.mass_mean) / norm.mass_std).collect(),
        norm,
        augment: cfg.augment,
        target_net: None,
    };
    let curve = nn::train(&mut net, &data, &train_config(cfg, records.len(), derive_seed(seed, stream::MASS_TRAIN)))?;
    Ok((net, curve))
}

pub fn predict_mass(est: &MassEstimator, patch: &Patch) -> Result<f64> {
    est.predict(patch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEstimator {
    /// Softplus output, in units of `scale_g`.
    pub net: Mlp,
    pub norm: Normalizer,
    pub scale_g: f64,
}

impl ErrorEstimator {
    pub fn uncertainty(&self, patch: &Patch) -> Result<f64> {
        Ok(self.scale_g * self.net.forward(&self.norm.encode(patch)?)?[0])
    }

    pub fn uncertainty_batch(&self, patches: &[&Patch]) -> Result<Vec<f64>> {
        Ok(forward_chunks(&self.net, &self.norm, patches)?
            .into_iter()
            .map(|y| self.scale_g * y[0])
            .collect())
    }
}

/// Absolute error of the mass head on each record, in grams.
pub fn ee_targets(records: &[GraspRecord], mass: &MassEstimator) -> Result<Vec<f64>> {
    let patches: Vec<&Patch> = records.iter().map(|r| &r.patch).collect();
    let pred = mass.predict_batch(&patches)?;
    Ok(pred.iter().zip(records).map(|(p, r)| (r.mass_g as f64 - p).abs()).collect())
}

/// Out-of-fold absolute errors: each of `folds` contiguous blocks is scored
/// by a mass head trained on the other blocks, with the same normalizer.
pub fn ee_targets_cross_fitted(
    records: &[GraspRecord],
    norm: &Normalizer,
    cfg: &TrainingConfig,
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = records.len();
    if folds < 2 || folds > n {
        return Err(Error::Invalid(format!("need 2 <= folds <= {n}, got {folds}")));
    }
    let bounds: Vec<usize> = (0..=folds).map(|f| f * n / folds).collect();
    let parts: Vec<Result<Vec<f64>>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (lo, hi) = (bounds[f], bounds[f + 1]);
            let rest: Vec<GraspRecord> = records[..lo].iter().chain(&records[hi..]).cloned().collect();
            let (net, _) = fit_mass_net(&rest, norm, cfg, derive_seed(seed, stream::EE_FOLD + f as u64))?;
            let patches: Vec<&Patch> = records[lo..hi].iter().map(|r| &r.patch).collect();
            let pred = forward_chunks(&net, norm, &patches)?;
            Ok(pred
                .iter()
                .zip(&records[lo..hi])
                .map(|(y, r)| (r.mass_g as f64 - (norm.mass_mean + norm.mass_std * y[0])).abs())
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fits the error head to absolute mass errors on the records the mass head
/// was trained on. With `ee_folds >= 2` the errors come from cross-fitted
/// heads, since a head's errors on its own training records shrink as it
/// memorises them. Uses nothing but the dataset itself.
pub fn train_ee(ds: &Dataset, mass: &MassEstimator, cfg: &TrainingConfig, seed: u64) -> Result<ErrorEstimator> {
    if mass.train_records == 0 || mass.train_records > ds.len() {
        return Err(Error::Invalid(format!(
            "mass head was trained on {} records but the dataset has {}",
            mass.train_records,
            ds.len()
        )));
    }
    let records = &ds.records[..mass.train_records];
    check_sides(records, &mass.norm)?;
    let scale_g = mass.norm.mass_std;
    let raw = if cfg.ee_folds >= 2 && records.len() >= cfg.ee_folds {
        ee_targets_cross_fitted(records, &mass.norm, cfg, cfg.ee_folds, seed)?
    } else {
        ee_targets(records, mass)?
    };
    let targets = raw.into_iter().map(|t| t / scale_g).collect();
    let norm = mass.norm.clone();
    let mut net = Mlp::new(
        &head_widths(norm.input_dim(), &cfg.hidden, 1),
        &head_activations(cfg.hidden.len(), Activation::Softplus),
        &mut stream_rng(seed, stream::EE_INIT),
    );
    let data = PatchSet {
        patches: records.iter().map(|r| &r.patch).collect(),
        targets,
        norm: &norm,
        augment: cfg.augment,
        target_net: None,
    };
    nn::train(&mut net, &data, &train_config(cfg, records.len(), derive_seed(seed, stream::EE_TRAIN)))?;
    Ok(ErrorEstimator { net, norm, scale_g })
}

pub fn uncertainty_ee(est: &ErrorEstimator, patch: &Patch) -> Result<f64> {
    est.uncertainty(patch)
}

/// A frozen random target network and a predictor trained to imitate it.
#[derive(Debug, Clone, PartialEq)]
pub struct RndPair {
    pub target: Mlp,
    pub predictor: Mlp,
    pub norm: Normalizer,
}

impl RndPair {
    /// Untrained pair with independently initialised networks.
    pub fn new(norm: Normalizer, hidden: &[usize], k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("embedding size k must be >= 1".into()));
        }
        let widths = head_widths(norm.input_dim(), hidden, k);
        let acts = head_activations(hidden.len(), Activation::Identity);
        let target = Mlp::new(&widths, &acts, &mut stream_rng(seed, stream::RND_TARGET));
        let predictor = Mlp::new(&widths, &acts, &mut stream_rng(seed, stream::RND_PREDICTOR));
        Ok(Self { target, predictor, norm })
    }

    pub fn k(&self) -> usize {
        self.target.output_dim()
    }

    pub fn uncertainty(&self, patch: &Patch) -> Result<f64> {
        let x = self.norm.encode(patch)?;
        let f = self.target.forward(&x)?;
        let g = self.predictor.forward(&x)?;
        Ok(f.iter().zip(&g).map(|(a, b)| (b - a) * (b - a)).sum())
    }

    pub fn uncertainty_batch(&self, patches: &[&Patch]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFERENCE_CHUNK) {
            let x = self.norm.encode_batch(chunk)?;
            let d = self.predictor.forward_batch(x.view())? - self.target.forward_batch(x.view())?;
            out.extend(d.rows().into_iter().map(|r| r.dot(&r)));
        }
        Ok(out)
    }
}

/// Trains the predictor of a fresh pair on every record of `ds`, with the
/// same augmentation as the mass head. The target network never changes.
pub fn train_rnd(ds: &Dataset, norm: &Normalizer, cfg: &TrainingConfig, seed: u64) -> Result<RndPair> {
    if ds.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    check_sides(&ds.records, norm)?;
    let mut pair = RndPair::new(norm.clone(), &cfg.hidden, cfg.rnd_k, seed)?;
    let data = PatchSet {
        patches: ds.records.iter().map(|r| &r.patch).collect(),
        targets: Vec::new(),
        norm,
        augment: cfg.augment,
        target_net: Some(&pair.target),
    };
    let mut predictor = pair.predictor.clone();
    nn::train(&mut predictor, &data, &train_config(cfg, ds.len(), derive_seed(seed, stream::RND_TRAIN)))?;
    pair.predictor = predictor;
    Ok(pair)
}

pub fn uncertainty_rnd(pair: &RndPair, patch: &Patch) -> Result<f64> {
    pair.uncertainty(patch)
}

/// Everything needed to run the selection policies.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub mass: MassEstimator,
    pub ee: ErrorEstimator,
    pub rnd: RndPair,
    pub config_hash: [u8; 8],
}

/// Trains the mass head, then the EE and RND heads on the same records.
pub fn train_bundle(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<ModelBundle> {
    let mass = train_mass(ds, &cfg.training, seed)?;
    let train_part = ds.prefix(mass.train_records);
    let (ee, rnd) = rayon::join(
        || train_ee(ds, &mass, &cfg.training, seed),
        || train_rnd(&train_part, &mass.norm, &cfg.training, seed),
    );
    Ok(ModelBundle { ee: ee?, rnd: rnd?, mass, config_hash: cfg.hash() })
}

const BUNDLE_MAGIC: &[u8; 4] = b"GGMB";
const BUNDLE_VERSION: u16 = 1;

fn write_norm<W: Write>(w: &mut W, n: &Normalizer) -> Result<()> {
    w.write_u32::<LE>(n.side as u32)?;
    w.write_u16::<LE>(CHANNELS as u16)?;
    for c in 0..CHANNELS {
        w.write_f64::<LE>(n.channel_mean[c])?;
        w.write_f64::<LE>(n.channel_std[c])?;
    }
    w.write_f64::<LE>(n.mass_mean)?;
    w.write_f64::<LE>(n.mass_std)?;
    Ok(())
}

fn read_norm<R: Read>(r: &mut R) -> std::io::Result<std::result::Result<Normalizer, Error>> {
    let side = r.read_u32::<LE>()? as usize;
    let channels = r.read_u16::<LE>()? as usize;
    if channels != CHANNELS {
        return Ok(Err(Error::ChannelMismatch { expected: CHANNELS, found: channels }));
    }
    let mut channel_mean = [0.0; CHANNELS];
    let mut channel_std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        channel_mean[c] = r.read_f64::<LE>()?;
        channel_std[c] = r.read_f64::<LE>()?;
    }
    let mass_mean = r.read_f64::<LE>()?;
    let mass_std = r.read_f64::<LE>()?;
    Ok(Ok(Normalizer { side, channel_mean, channel_std, mass_mean, mass_std }))
}

impl ModelBundle {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BUNDLE_MAGIC)?;
        w.write_u16::<LE>(BUNDLE_VERSION)?;
        w.write_all(&self.config_hash)?;
        write_norm(w, &self.mass.norm)?;
        w.write_u64::<LE>(self.mass.train_records as u64)?;
        w.write_f64::<LE>(self.mass.fit.loss_g2)?;
        w.write_u8(self.mass.fit.held_out as u8)?;
        w.write_f64::<LE>(self.ee.scale_g)?;
        write_mlp(w, &self.mass.net)?;
        write_mlp(w, &self.ee.net)?;
        write_mlp(w, &self.rnd.target)?;
        write_mlp(w, &self.rnd.predictor)?;
        Ok(())
    }

    /// Reads a bundle; the per-epoch training curve is not stored.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let corrupt = |e: std::io::Error| Error::CorruptModel(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::CorruptModel("not a model bundle".into()));
        }
        let version = r.read_u16::<LE>().map_err(corrupt)?;
        if version != BUNDLE_VERSION {
            return Err(Error::CorruptModel(format!("unsupported bundle version {version}")));
        }
        let mut config_hash = [0u8; 8];
        r.read_exact(&mut config_hash).map_err(corrupt)?;
        let norm = read_norm(r).map_err(corrupt)??;
        let train_records = r.read_u64::<LE>().map_err(corrupt)? as usize;
        let loss_g2 = r.read_f64::<LE>().map_err(corrupt)?;
        let held_out = r.read_u8().map_err(corrupt)? != 0;
        let scale_g = r.read_f64::<LE>().map_err(corrupt)?;
        let mass_net = read_mlp(r)?;
        let ee_net = read_mlp(r)?;
        let target = read_mlp(r)?;
        let predictor = read_mlp(r)?;
        let dim = norm.input_dim();
        for net in [&mass_net, &ee_net, &target, &predictor] {
            if net.input_dim() != dim {
                return Err(Error::CorruptModel(format!(
                    "network input width {} does not match patch size {}",
                    net.input_dim(),
                    dim
                )));
            }
        }
        if mass_net.output_dim() != 1 || ee_net.output_dim() != 1 || target.widths() != predictor.widths() {
            return Err(Error::CorruptModel("inconsistent head shapes".into()));
        }
        Ok(Self {
            mass: MassEstimator {
                net: mass_net,
                norm: norm.clone(),
                train_records,
                fit: FitReport { loss_g2, held_out, curve: Vec::new() },
            },
            ee: ErrorEstimator { net: ee_net, norm: norm.clone(), scale_g },
            rnd: RndPair { target, predictor, norm },
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if path.as_os_str().is_empty() {
            return Err(Error::InvalidPath(path.to_path_buf()));
        }
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|_| Error::InvalidPath(path.to_path_buf()))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small patches whose label is a linear function of the centre row.
    fn synthetic(n: usize, side: usize, seed: u64) -> Dataset {
        let mut rng = stream_rng(seed, 0);
        let records = (0..n)
            .map(|i| {
                let level: f32 = rng.random_range(-2.0..2.0);
                let mut data = vec![0.0f32; CHANNELS * side * side];
                for (j, v) in data.iter_mut().enumerate() {
                    *v = if j < side * side { level + rng.random_range(-0.1..0.1) } else { rng.random() };
                }
                data[side * side / 2] = 0.0;
                GraspRecord {
                    patch: Patch::from_parts(side, (i, 0), data).unwrap(),
                    mass_g: (20.0 + 3.0 * level).round(),
                }
            })
            .collect();
        Dataset { records, material_name: "synthetic".into(), seed }
    }

    fn small_cfg() -> TrainingConfig {
        TrainingConfig { hidden: vec![16, 8], ..TrainingConfig::default() }
    }

    #[test]
    fn normalizer_standardises_channels() {
        let ds = synthetic(40, 5, 1);
        let norm = Normalizer::fit(&ds.records).unwrap();
        let dim = norm.input_dim();
        let mut sum = vec![0.0; CHANNELS];
        let mut sq = vec![0.0; CHANNELS];
        for r in &ds.records {
            let x = norm.encode(&r.patch).unwrap();
            for c in 0..CHANNELS {
                for &v in &x[c * dim / 2..(c + 1) * dim / 2] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (ds.len() * dim / 2) as f64;
        for c in 0..CHANNELS {
            assert!((sum[c] / count).abs() < 1e-9);
            assert!((sq[c] / count - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_applies_flips_like_patch_flipped() {
        let ds = synthetic(3, 5, 2);
        let norm = Normalizer::fit(&ds.records).unwrap();
        let p = &ds.records[1].patch;
        for (fr, fc) in [(false, true), (true, false), (true, true)] {
            let mut out = vec![0.0; norm.input_dim()];
            norm.encode_into(p, fr, fc, &mut out).unwrap();
            assert_eq!(out, norm.encode(&p.flipped(fr, fc)).unwrap());
        }
    }

    #[test]
    fn single_record_is_memorised() {
        let ds = synthetic(1, 5, 3);
        let est = train_mass(&ds, &small_cfg(), 3).unwrap();
        let pred = est.predict(&ds.records[0].patch).unwrap();
        assert!((pred - ds.records[0].mass_g as f64).abs() < 0.1, "{pred}");
        assert!(!est.fit.held_out);
    }

    #[test]
    fn constant_labels_are_reproduced() {
        let mut ds = synthetic(30, 5, 4);
        for r in &mut ds.records {
            r.mass_g = 17.0;
        }
        let est = train_mass(&ds, &small_cfg(), 4).unwrap();
        for r in &ds.records {
            let p = est.predict(&r.patch).unwrap();
            assert!((p - 17.0).abs() < 0.1, "{p} {:?}", est.fit.curve.last());
        }
    }

    #[test]
    fn mass_head_beats_the_mean_on_a_learnable_signal() {
        let ds = synthetic(200, 5, 5);
        let est = train_mass(&ds, &small_cfg(), 5).unwrap();
        assert!(est.fit.held_out);
        assert_eq!(est.train_records, 180);
        let test = synthetic(100, 5, 55);
        let mean = est.norm.mass_mean;
        let base = test.records.iter().map(|r| (r.mass_g as f64 - mean).powi(2)).sum::<f64>() / 100.0;
        assert!(est.mse_g2(&test.records).unwrap() < 0.2 * base);
    }

    #[test]
    fn ee_target_is_absolute_error() {
        let mut ds = synthetic(1, 3, 6);
        ds.records[0].mass_g = 10.0;
        let norm = Normalizer { mass_mean: 12.0, ..Normalizer::fit(&ds.records).unwrap() };
        let mass = MassEstimator {
            net: Mlp::zeros(&[norm.input_dim(), 1], &[Activation::Identity]),
            norm,
            train_records: 1,
            fit: FitReport { loss_g2: 0.0, held_out: false, curve: Vec::new() },
        };
        assert_eq!(ee_targets(&ds.records, &mass).unwrap(), vec![2.0]);
    }

    #[test]
    fn cross_fitted_errors_exceed_in_sample_errors_on_noise_labels() {
        let mut ds = synthetic(60, 5, 15);
        let mut rng = stream_rng(15, 1);
        for r in &mut ds.records {
            r.mass_g = rng.random_range(10.0f32..30.0).round();
        }
        let cfg = TrainingConfig { hidden: vec![32], holdout_fraction: 0.0, ..small_cfg() };
        let norm = Normalizer::fit(&ds.records).unwrap();
        let mass = train_mass(&ds, &cfg, 15).unwrap();
        let inside = ee_targets(&ds.records, &mass).unwrap();
        let outside = ee_targets_cross_fitted(&ds.records, &norm, &cfg, 5, 15).unwrap();
        assert_eq!(outside.len(), ds.len());
        assert_eq!(outside, ee_targets_cross_fitted(&ds.records, &norm, &cfg, 5, 15).unwrap());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&outside) > 1.5 * mean(&inside), "{} vs {}", mean(&outside), mean(&inside));
        assert!(ee_targets_cross_fitted(&ds.records, &norm, &cfg, 1, 15).is_err());
        assert!(ee_targets_cross_fitted(&ds.records, &norm, &cfg, 61, 15).is_err());
    }

    #[test]
    fn ee_learns_zero_for_a_perfect_mass_head() {
        let mut ds = synthetic(20, 5, 7);
        for r in &mut ds.records {
            r.mass_g = 22.0;
        }
        let norm = Normalizer::fit(&ds.records).unwrap();
        let mass = MassEstimator {
            net: Mlp::zeros(&[norm.input_dim(), 1], &[Activation::Identity]),
            norm,
            train_records: 20,
            fit: FitReport { loss_g2: 0.0, held_out: false, curve: Vec::new() },
        };
        assert!(ee_targets(&ds.records, &mass).unwrap().iter().all(|&t| t == 0.0));
        // same-split targets; cross-fitting would train its own fold heads
        let cfg = TrainingConfig { ee_folds: 0, ..small_cfg() };
        let ee = train_ee(&ds, &mass, &cfg, 7).unwrap();
        for r in &ds.records {
            let u = ee.uncertainty(&r.patch).unwrap();
            assert!((0.0..0.1).contains(&u), "{u}");
        }
    }

    #[test]
    fn ee_ranks_a_noisy_population_above_a_clean_one() {
        // Noisy records carry a bright intensity channel so they are
        // distinguishable from the clean ones.
        let mut ds = synthetic(120, 5, 8);
        let mut rng = stream_rng(8, 1);
        let cells = 25;
        for (i, r) in ds.records.iter_mut().enumerate() {
            if i % 2 == 1 {
                let mut data = r.patch.data().to_vec();
                for v in &mut data[cells..] {
                    *v += 2.0;
                }
                r.patch = Patch::from_parts(5, r.patch.center(), data).unwrap();
                r.mass_g = (r.mass_g + rng.random_range(-8.0f32..8.0)).round();
            }
        }
        let cfg = TrainingConfig { min_steps: 200, ..small_cfg() };
        let mass = train_mass(&ds, &cfg, 8).unwrap();
        let ee = train_ee(&ds, &mass, &cfg, 8).unwrap();
        let test = synthetic(40, 5, 88);
        let (mut clean, mut noisy) = (0.0, 0.0);
        for r in &test.records {
            clean += ee.uncertainty(&r.patch).unwrap();
            let mut data = r.patch.data().to_vec();
            for v in &mut data[cells..] {
                *v += 2.0;
            }
            noisy += ee.uncertainty(&Patch::from_parts(5, r.patch.center(), data).unwrap()).unwrap();
        }
        assert!(noisy > clean, "noisy {noisy} clean {clean}");
    }

    #[test]
    fn ee_scores_stay_finite_and_non_negative_far_out_of_distribution() {
        let ds = synthetic(30, 5, 9);
        let cfg = small_cfg();
        let mass = train_mass(&ds, &cfg, 9).unwrap();
        let ee = train_ee(&ds, &mass, &cfg, 9).unwrap();
        let max = ds.records.iter().flat_map(|r| r.patch.data().iter().map(|v| v.abs())).fold(0.0f32, f32::max);
        let wild = Patch::from_parts(5, (0, 0), vec![10.0 * max; CHANNELS * 25]).unwrap();
        let u = ee.uncertainty(&wild).unwrap();
        assert!(u.is_finite() && u >= 0.0);
        let neg = Patch::from_parts(5, (0, 0), vec![-10.0 * max; CHANNELS * 25]).unwrap();
        assert!(ee.uncertainty(&neg).unwrap() >= 0.0);
    }

    #[test]
    fn identical_rnd_networks_score_zero() {
        let ds = synthetic(10, 5, 10);
        let norm = Normalizer::fit(&ds.records).unwrap();
        let mut pair = RndPair::new(norm, &[8], 4, 10).unwrap();
        pair.predictor = pair.target.clone();
        for r in &ds.records {
            assert_eq!(pair.uncertainty(&r.patch).unwrap(), 0.0);
        }
    }

    #[test]
    fn rnd_training_leaves_the_target_untouched() {
        let ds = synthetic(30, 5, 11);
        let norm = Normalizer::fit(&ds.records).unwrap();
        let before = RndPair::new(norm.clone(), &small_cfg().hidden, 16, 11).unwrap();
        let mut bytes_before = Vec::new();
        write_mlp(&mut bytes_before, &before.target).unwrap();
        let pair = train_rnd(&ds, &norm, &small_cfg(), 11).unwrap();
        let mut bytes_after = Vec::new();
        write_mlp(&mut bytes_after, &pair.target).unwrap();
        assert_eq!(bytes_before, bytes_after);
        assert_ne!(pair.predictor, before.predictor);
    }

    fn ood_ratio(k: usize, seed: u64) -> f64 {
        let ds = synthetic(60, 5, seed);
        let norm = Normalizer::fit(&ds.records).unwrap();
        let cfg = TrainingConfig { rnd_k: k, ..small_cfg() };
        let pair = train_rnd(&ds, &norm, &cfg, seed).unwrap();
        let train_mean: f64 =
            ds.records.iter().map(|r| pair.uncertainty(&r.patch).unwrap()).sum::<f64>() / 60.0;
        let mut rng = stream_rng(seed, 99);
        let ood_mean: f64 = (0..60)
            .map(|_| {
                let data: Vec<f32> = (0..CHANNELS * 25).map(|_| rng.random_range(-6.0..6.0)).collect();
                pair.uncertainty(&Patch::from_parts(5, (0, 0), data).unwrap()).unwrap()
            })
            .sum::<f64>()
            / 60.0;
        ood_mean / train_mean
    }

    #[test]
    fn rnd_scores_unfamiliar_patches_higher_for_small_and_large_k() {
        for k in [1, 32] {
            for seed in 0..3 {
                let r = ood_ratio(k, 20 + seed);
                assert!(r > 1.0, "k {k} seed {seed}: ratio {r}");
            }
        }
    }

    #[test]
    fn batch_and_single_scores_agree() {
        let ds = synthetic(70, 5, 12);
        let cfg = small_cfg();
        let mass = train_mass(&ds, &cfg, 12).unwrap();
        let ee = train_ee(&ds, &mass, &cfg, 12).unwrap();
        let rnd = train_rnd(&ds, &mass.norm, &cfg, 12).unwrap();
        let patches: Vec<&Patch> = ds.records.iter().map(|r| &r.patch).collect();
        let m = mass.predict_batch(&patches).unwrap();
        let e = ee.uncertainty_batch(&patches).unwrap();
        let u = rnd.uncertainty_batch(&patches).unwrap();
        for (i, p) in patches.iter().enumerate() {
            assert!((m[i] - mass.predict(p).unwrap()).abs() < 1e-9);
            assert!((e[i] - ee.uncertainty(p).unwrap()).abs() < 1e-9);
            assert!((u[i] - rnd.uncertainty(p).unwrap()).abs() < 1e-9);
        }
        let mut reversed = patches.clone();
        reversed.reverse();
        let mut u_rev = rnd.uncertainty_batch(&reversed).unwrap();
        u_rev.reverse();
        assert_eq!(u, u_rev);
    }

    #[test]
    fn wrong_patch_side_is_a_shape_error() {
        let ds = synthetic(5, 5, 13);
        let cfg = small_cfg();
        let mass = train_mass(&ds, &cfg, 13).unwrap();
        let other = synthetic(1, 7, 13);
        assert!(matches!(mass.predict(&other.records[0].patch), Err(Error::Shape { .. })));
    }

    #[test]
    fn bundle_round_trip_reproduces_scores() {
        let ds = synthetic(40, 5, 14);
        let mut cfg = ExperimentConfig::default();
        cfg.training = small_cfg();
        let bundle = train_bundle(&ds, &cfg, 14).unwrap();
        let mut bytes = Vec::new();
        bundle.write_to(&mut bytes).unwrap();
        let back = ModelBundle::read_from(&mut &bytes[..]).unwrap();
        assert_eq!(back.config_hash, cfg.hash());
        let test = synthetic(100, 5, 140);
        for r in &test.records {
            assert_eq!(back.mass.predict(&r.patch).unwrap(), bundle.mass.predict(&r.patch).unwrap());
            assert_eq!(back.ee.uncertainty(&r.patch).unwrap(), bundle.ee.uncertainty(&r.patch).unwrap());
            assert_eq!(back.rnd.uncertainty(&r.patch).unwrap(), bundle.rnd.uncertainty(&r.patch).unwrap());
        }
        assert!(matches!(ModelBundle::read_from(&mut &bytes[..20]), Err(Error::CorruptModel(_))));
    }
}
