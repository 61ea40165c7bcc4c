//! Grasp records and the binary dataset format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     b"GGDS"
//! version   u16
//! channels  u16
//! side      u32
//! n         u32
//! name_len  u16, then name_len bytes of UTF-8 material name
//! seed      u64
//! n records of:
//!   x u32, y u32, channels*side*side f32, mass f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::patching::{Patch, CHANNELS};

const MAGIC: &[u8; 4] = b"GGDS";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GraspRecord {
    pub patch: Patch,
    /// Grasped mass as read off the scale.
    pub mass_g: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<GraspRecord>,
    pub material_name: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn masses(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.mass_g as f64)
    }

    /// The first `n` records, e.g. the size-50 slice of a 1000-grasp run.
    pub fn prefix(&self, n: usize) -> Dataset {
        Dataset {
            records: self.records[..n.min(self.records.len())].to_vec(),
            material_name: self.material_name.clone(),
            seed: self.seed,
        }
    }

    /// Splits into the first `n` records and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.records.len());
        let make = |records: &[GraspRecord]| Dataset {
            records: records.to_vec(),
            material_name: self.material_name.clone(),
            seed: self.seed,
        };
        (make(&self.records[..n]), make(&self.records[n..]))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let side = self.records.first().map_or(0, |r| r.patch.side());
        let name = self.material_name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Invalid("material name too long".into()));
        }
        w.write_all(MAGIC)?;
        w.write_u16::<LE>(VERSION)?;
        w.write_u16::<LE>(CHANNELS as u16)?;
        w.write_u32::<LE>(side as u32)?;
        w.write_u32::<LE>(self.records.len() as u32)?;
        w.write_u16::<LE>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u64::<LE>(self.seed)?;
        for rec in &self.records {
            if rec.patch.side() != side {
                return Err(Error::Shape { expected: side, found: rec.patch.side() });
            }
            let (x, y) = rec.patch.center();
            w.write_u32::<LE>(x as u32)?;
            w.write_u32::<LE>(y as u32)?;
            for &v in rec.patch.data() {
                w.write_f32::<LE>(v)?;
            }
            w.write_f32::<LE>(rec.mass_g)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Dataset> {
        let header = |e: io::Error| Error::CorruptHeader(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(header)?;
        if &magic != MAGIC {
            return Err(Error::CorruptHeader(format!("bad magic {magic:?}")));
        }
        let version = r.read_u16::<LE>().map_err(header)?;
        if version != VERSION {
            return Err(Error::CorruptHeader(format!("unsupported version {version}")));
        }
        let channels = r.read_u16::<LE>().map_err(header)? as usize;
        let side = r.read_u32::<LE>().map_err(header)? as usize;
        let n = r.read_u32::<LE>().map_err(header)? as usize;
        let name_len = r.read_u16::<LE>().map_err(header)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(header)?;
        let material_name = String::from_utf8(name)
            .map_err(|_| Error::CorruptHeader("material name is not UTF-8".into()))?;
        let seed = r.read_u64::<LE>().map_err(header)?;
        if channels != CHANNELS {
            return Err(Error::ChannelMismatch { expected: CHANNELS, found: channels });
        }

        let tensor_len = channels * side * side;
        let mut records = Vec::with_capacity(n);
        let mut buf = vec![0u8; 8 + 4 * tensor_len + 4];
        for record in 0..n {
            r.read_exact(&mut buf).map_err(|_| Error::TruncatedPayload { record })?;
            let mut cur = &buf[..];
            let x = cur.read_u32::<LE>()? as usize;
            let y = cur.read_u32::<LE>()? as usize;
            let mut data = vec![0f32; tensor_len];
            cur.read_f32_into::<LE>(&mut data)?;
            let mass_g = cur.read_f32::<LE>()?;
            records.push(GraspRecord { patch: Patch::from_parts(side, (x, y), data)?, mass_g });
        }
        Ok(Dataset { records, material_name, seed })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidPath(path.to_path_buf()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    ds.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidPath(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    Dataset::read_from(&mut r)
}

/// Rounds a mass to the nearest multiple of the scale resolution, ties to even.
pub fn quantize_mass(mass_g: f64, resolution_g: f64) -> f64 {
    (mass_g / resolution_g).round_ties_even() * resolution_g
}
