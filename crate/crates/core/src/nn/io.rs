//! Versioned binary encoding of networks.
//!
//! ```text
//! magic b"GGNN", version u16, layers u32, input width u32,
//! per layer: output width u32, activation u8,
//!            weights (out x in, row-major) f64, biases f64
//! ```
//! All little-endian.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use super::{Activation, Dense, Mlp};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GGNN";
const VERSION: u16 = 1;

pub fn write_mlp<W: Write>(w: &mut W, net: &Mlp) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    w.write_u32::<LE>(net.layers().len() as u32)?;
    w.write_u32::<LE>(net.input_dim() as u32)?;
    for l in net.layers() {
        w.write_u32::<LE>(l.out_dim() as u32)?;
        w.write_u8(l.activation.tag())?;
        for &v in l.weights.iter() {
            w.write_f64::<LE>(v)?;
        }
        for &v in l.bias.iter() {
            w.write_f64::<LE>(v)?;
        }
    }
    Ok(())
}

pub fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let corrupt = |e: std::io::Error| Error::CorruptModel(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != MAGIC {
        return Err(Error::CorruptModel("bad network magic".into()));
    }
    let version = r.read_u16::<LE>().map_err(corrupt)?;
    if version != VERSION {
        return Err(Error::CorruptModel(format!("unsupported network version {version}")));
    }
    let n_layers = r.read_u32::<LE>().map_err(corrupt)? as usize;
    let mut fan_in = r.read_u32::<LE>().map_err(corrupt)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::CorruptModel(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let fan_out = r.read_u32::<LE>().map_err(corrupt)? as usize;
        let tag = r.read_u8().map_err(corrupt)?;
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| Error::CorruptModel(format!("unknown activation tag {tag}")))?;
        let mut weights = vec![0.0; fan_out * fan_in];
        r.read_f64_into::<LE>(&mut weights).map_err(corrupt)?;
        let mut bias = vec![0.0; fan_out];
        r.read_f64_into::<LE>(&mut bias).map_err(corrupt)?;
        layers.push(Dense {
            weights: Array2::from_shape_vec((fan_out, fan_in), weights)
                .map_err(|e| Error::CorruptModel(e.to_string()))?,
            bias: Array1::from_vec(bias),
            activation,
        });
        fan_in = fan_out;
    }
    Mlp::from_layers(layers).map_err(|e| Error::CorruptModel(e.to_string()))
}
