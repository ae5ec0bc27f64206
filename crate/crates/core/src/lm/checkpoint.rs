//! Checkpoint format: magic `RDLM`, version, config fields, then named
//! tensors (name, shape, row-major little-endian f32 data).

use std::path::Path;

use super::{LmConfig, Model, Weights};
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RDLM";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    for v in [c.n_layers, c.n_heads, c.d_model, c.d_inner, c.segment_len, c.mem_len] {
        w.u32(v as u32);
    }
    w.f64(c.dropout);
    w.u32(c.vocab_size as u32);
    w.u64(c.seed);

    let layout = Weights::layout(c);
    w.u32(layout.len() as u32);
    for ((name, shape), data) in layout.iter().zip(model.weights.tensors()) {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(shape.len() as u32);
        for &s in shape {
            w.u32(s as u32);
        }
        for &x in data {
            w.f32(x as f32);
        }
    }
    w.into_inner()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = LmConfig {
        n_layers: dims[0],
        n_heads: dims[1],
        d_model: dims[2],
        d_inner: dims[3],
        segment_len: dims[4],
        mem_len: dims[5],
        dropout: r.f64()?,
        vocab_size: r.u32()? as usize,
        seed: r.u64()?,
    };
    config.validate()?;

    let layout = Weights::layout(&config);
    let n = r.u32()? as usize;
    if n != layout.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{n} tensors, config implies {}", layout.len()),
        ));
    }
    let mut weights = Weights::zeros(&config);
    for ((name, shape), dst) in layout.iter().zip(weights.tensors_mut()) {
        let len = r.u32()? as usize;
        let got_name = r.take(len)?;
        if got_name != name.as_bytes() {
            return Err(Error::format(
                "checkpoint",
                format!("expected tensor {name}, found {}", String::from_utf8_lossy(got_name)),
            ));
        }
        let ndim = r.u32()? as usize;
        let mut got_shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            got_shape.push(r.u32()? as usize);
        }
        if &got_shape != shape {
            return Err(Error::format(
                "checkpoint",
                format!("tensor {name} has shape {got_shape:?}, expected {shape:?}"),
            ));
        }
        *dst = r.f32_vec(dst.len())?.into_iter().map(f64::from).collect();
    }
    r.finish()?;
    Model::from_weights(config, weights)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    binio::write_atomic(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&binio::read_file(path, "checkpoint")?)
}
