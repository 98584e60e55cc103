//! Binary parameter files.
//!
//! Layout, little-endian: `b"MMUN"`, version `u16`, tensor count `u32`, then
//! per tensor a `u16`-prefixed UTF-8 name, rank `u8`, `u32` extents and
//! `f32` data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::{NetworkConfig, WidthMult};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"MMUN";
const VERSION: u16 = 1;

pub fn write_checkpoint(store: &ParamStore<f32>, out: &mut impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.rank() as u8])?;
        for &e in t.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore<f32>> {
    let magic = take::<4>(r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u16::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(r)?) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| Error::Format("checkpoint is truncated".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = take::<1>(r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * numel];
        r.read_exact(&mut raw).map_err(|_| Error::Format("checkpoint is truncated".into()))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        store.push(name, t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

/// Recovers the architecture of a checkpoint from its parameter names and
/// shapes. The input resolution is not recorded and is set to `input_hw`.
pub fn infer_config(store: &ParamStore<f32>, input_hw: (usize, usize)) -> Result<NetworkConfig> {
    let shape = |name: &str| {
        store
            .find(name)
            .map(|id| store.get(id).shape().to_vec())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))
    };
    let stem = shape("stem.weight")?;
    let width_mult = WidthMult::new(stem[0], 64)?;
    let use_mmc = store.find("fusion.kernel_x").is_some();
    let use_rssg = store.find("dec4.rssg.mlp1.weight").is_some();
    let ssm_state_dim = shape("dec4.rssg.ssm.a_log").or_else(|_| shape("fusion.ssm_x.a_log")).map(|s| s[1]).unwrap_or(8);
    let mmc_kernel = if use_mmc { shape("fusion.kernel_x")?[2] } else { 3 };
    let config = NetworkConfig {
        width_mult,
        input_hw,
        use_mmc,
        use_rssg,
        ssm_state_dim,
        mmc_kernel,
        bidirectional: false,
        seed: 0,
    };
    config.validate()?;
    Ok(config)
}
