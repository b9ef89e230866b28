//! Flat little-endian checkpoint persistence.
//!
//! Layout: magic `CHGD`, version u32, ModelConfig (six u32 fields + f64
//! norm_eps), array count u32, then per array: name length u32, name bytes,
//! dtype tag u8, rank u32, dims u32 each, raw element data.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::config::ModelConfig;
use crate::nn::params::Params;
use crate::scalar::{Dtype, Scalar};
use crate::tape::Value;

const MAGIC: &[u8; 4] = b"CHGD";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

pub fn encode<T: Scalar>(cfg: &ModelConfig, params: &Params<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, cfg.layers as u32);
    put_u32(&mut out, cfg.d_model as u32);
    put_u32(&mut out, cfg.n_heads as u32);
    put_u32(&mut out, cfg.head_dim as u32);
    put_u32(&mut out, cfg.vocab_size as u32);
    put_u32(&mut out, cfg.max_position as u32);
    put_f64(&mut out, cfg.norm_eps);

    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, v) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        put_u32(&mut out, v.shape().len() as u32);
        for &dim in v.shape() {
            put_u32(&mut out, dim as u32);
        }
        T::write_le(v.data(), &mut out);
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, Params<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = ModelConfig {
        layers: r.u32()? as usize,
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        head_dim: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        max_position: r.u32()? as usize,
        norm_eps: r.f64()?,
    };
    cfg.validate()?;

    let count = r.u32()? as usize;
    let mut arrays: Vec<(String, Vec<usize>, Vec<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let dtype = Dtype::from_tag(r.u8()?)?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "array {name} has dtype {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = T::read_le(r.take(numel * T::DTYPE.size_bytes())?, numel)?;
        arrays.push((name, dims, data));
    }

    // Rebuild by matching the canonical tensor layout.
    let mut params = Params::<T>::init(&cfg, 0);
    let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<T>)> =
        arrays.into_iter().map(|(n, d, v)| (n, (d, v))).collect();
    for (name, v) in params.tensors_mut() {
        let (dims, data) = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        if dims != v.shape() {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {dims:?}, expected {:?}",
                v.shape()
            )));
        }
        *v = Value::leaf(data, dims);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array {extra}")));
    }
    Ok((cfg, params))
}

pub fn save<T: Scalar>(w: &mut dyn Write, cfg: &ModelConfig, params: &Params<T>) -> Result<()> {
    w.write_all(&encode(cfg, params))?;
    Ok(())
}

pub fn load<T: Scalar>(r: &mut dyn Read) -> Result<(ModelConfig, Params<T>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}
