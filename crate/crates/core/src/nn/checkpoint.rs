//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "BMPSNET\0"
//! version      u32 LE   (1)
//! kind         u32 LE   0 = plain MLP, 1 = Gaussian policy
//! activation   u32 LE   0 = tanh
//! input_dim    u32 LE
//! output_dim   u32 LE
//! n_hidden     u32 LE
//! hidden[i]    u32 LE   x n_hidden
//! per layer:   weight (fan_in x fan_out, row-major) then bias, f64 LE
//! log_std      f64 LE x output_dim   (policies only)
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::{Activation, Dense, Mlp, MlpSpec};
use super::policy::GaussianPolicy;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BMPSNET\0";
pub const VERSION: u32 = 1;

const KIND_MLP: u32 = 0;
const KIND_POLICY: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s<'a>(buf: &mut Vec<u8>, vs: impl IntoIterator<Item = &'a f64>) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(mlp: &Mlp, log_std: Option<&Array1<f64>>) -> Vec<u8> {
    let spec = mlp.spec();
    let mut buf = Vec::with_capacity(64 + 8 * spec.num_params());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, if log_std.is_some() { KIND_POLICY } else { KIND_MLP });
    put_u32(&mut buf, match spec.activation {
        Activation::Tanh => 0,
    });
    put_u32(&mut buf, spec.input_dim as u32);
    put_u32(&mut buf, spec.output_dim as u32);
    put_u32(&mut buf, spec.hidden_layers.len() as u32);
    for &h in &spec.hidden_layers {
        put_u32(&mut buf, h as u32);
    }
    for layer in mlp.layers() {
        put_f64s(&mut buf, layer.weight.iter());
        put_f64s(&mut buf, layer.bias.iter());
    }
    if let Some(ls) = log_std {
        put_f64s(&mut buf, ls.iter());
    }
    buf
}

pub fn encode_mlp(mlp: &Mlp) -> Vec<u8> {
    encode(mlp, None)
}

pub fn encode_policy(policy: &GaussianPolicy) -> Vec<u8> {
    encode(&policy.mean, Some(&policy.log_std))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn decode(buf: &[u8]) -> Result<(Mlp, Option<Array1<f64>>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = r.u32()?;
    if kind != KIND_MLP && kind != KIND_POLICY {
        return Err(Error::Format(format!("unknown kind {kind}")));
    }
    let activation = match r.u32()? {
        0 => Activation::Tanh,
        a => return Err(Error::Format(format!("unknown activation {a}"))),
    };
    let input_dim = r.u32()? as usize;
    let output_dim = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if n_hidden > 4096 {
        return Err(Error::Format("implausible layer count".into()));
    }
    let hidden_layers = (0..n_hidden).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec {
        input_dim,
        hidden_layers,
        output_dim,
        activation,
    };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut layers = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let w = r.f64s(fan_in * fan_out)?;
        let b = r.f64s(fan_out)?;
        layers.push(Dense {
            weight: Array2::from_shape_vec((fan_in, fan_out), w).expect("sized"),
            bias: Array1::from(b),
        });
    }
    let log_std = if kind == KIND_POLICY {
        Some(Array1::from(r.f64s(output_dim)?))
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok((Mlp::from_layers(spec, layers)?, log_std))
}

pub fn decode_mlp(buf: &[u8]) -> Result<Mlp> {
    match decode(buf)? {
        (mlp, None) => Ok(mlp),
        _ => Err(Error::Format("expected a plain network, found a policy".into())),
    }
}

pub fn decode_policy(buf: &[u8]) -> Result<GaussianPolicy> {
    match decode(buf)? {
        (mean, Some(log_std)) => Ok(GaussianPolicy { mean, log_std }),
        _ => Err(Error::Format("expected a policy, found a plain network".into())),
    }
}

pub fn save_policy(path: &Path, policy: &GaussianPolicy) -> Result<()> {
    std::fs::write(path, encode_policy(policy)).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<GaussianPolicy> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_policy(&buf)
}
