//! Versioned binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!   magic "FGCK" | version u32 | layer count u32
//!   per layer: kind u8 | activation u8 | dims (u32 each)
//!              weights f64 row-major | biases f64
//! Conv2d dims are (kernel_h, kernel_w, c_in, c_out); dense dims are
//! (n_in, n_out). Round-trips are bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Activation, Layer, LayerKind, LayerSpec, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_CONV2D: u8 = 0;
const KIND_DENSE: u8 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Identity => 2,
        Activation::SoftmaxFinal => 3,
    }
}

fn activation_from_tag(t: u8) -> Result<Activation> {
    match t {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Sigmoid),
        2 => Ok(Activation::Identity),
        3 => Ok(Activation::SoftmaxFinal),
        _ => Err(Error::Format(format!("unknown activation tag {}", t))),
    }
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint while reading {}", what)))
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u8(r: &mut impl Read, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

pub(crate) fn read_f64s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_checkpoint(model: &ModelParams, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_u32(w, model.layers().len() as u32)?;
    for layer in model.layers() {
        match layer.spec.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                c_in,
                c_out,
            } => {
                w.write_all(&[KIND_CONV2D, activation_tag(layer.spec.activation)])?;
                for d in [kernel_h, kernel_w, c_in, c_out] {
                    write_u32(w, d as u32)?;
                }
            }
            LayerKind::Dense { n_in, n_out } => {
                w.write_all(&[KIND_DENSE, activation_tag(layer.spec.activation)])?;
                for d in [n_in, n_out] {
                    write_u32(w, d as u32)?;
                }
            }
        }
        write_f64s(w, layer.weights.data())?;
        write_f64s(w, &layer.bias)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"FGCK\"",
            magic
        )));
    }
    let version = read_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let n_layers = read_u32(r, "layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let kind_tag = read_u8(r, "layer kind")?;
        let act = activation_from_tag(read_u8(r, "activation")?)?;
        let spec = match kind_tag {
            KIND_CONV2D => {
                let kh = read_u32(r, "kernel_h")? as usize;
                let kw = read_u32(r, "kernel_w")? as usize;
                let ci = read_u32(r, "c_in")? as usize;
                let co = read_u32(r, "c_out")? as usize;
                LayerSpec::conv2d(kh, kw, ci, co, act)
            }
            KIND_DENSE => {
                let n_in = read_u32(r, "n_in")? as usize;
                let n_out = read_u32(r, "n_out")? as usize;
                LayerSpec::dense(n_in, n_out, act)
            }
            t => return Err(Error::Format(format!("unknown layer kind tag {}", t))),
        };
        let shape = spec.weight_shape();
        let wlen: usize = shape.iter().product();
        let weights = read_f64s(r, wlen, &format!("layer {} weights", li))?;
        let bias = read_f64s(r, spec.bias_len(), &format!("layer {} biases", li))?;
        layers.push(Layer {
            spec,
            weights: Tensor::from_vec(&shape, weights)
                .map_err(|e| Error::Format(e.to_string()))?,
            bias,
        });
    }
    ModelParams::new(layers).map_err(|e| Error::Format(e.to_string()))
}

/// Serialize to an in-memory byte vector. Handy for bit-exact comparisons.
pub fn checkpoint_bytes(model: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("in-memory write cannot fail");
    buf
}
