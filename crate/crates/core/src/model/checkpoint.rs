//! Checkpoint files.
//!
//! Layout (little-endian): the 8-byte magic, a `u32` version, a `u64`
//! length followed by the model config as canonical TOML, a `u32` parameter
//! count, then per parameter a `u8` role tag, a `u32` name length, the UTF-8
//! name and the parameter's tensor dump.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{ModelParams, Param, Role};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DiffTensor, Real};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MOELABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<F: Real>(params: &ModelParams<F>, out: &mut Vec<u8>) {
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = params.config().to_canonical();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.params() {
        out.push(p.role.tag());
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        p.tensor.dump_into(out);
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("checkpoint {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a checkpoint. Tensors stored at the other precision are converted.
pub fn read_checkpoint<F: Real>(r: &mut impl Read) -> Result<ModelParams<F>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    read_exact(r, &mut len, "config length")?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 20 {
        return Err(Error::Format(format!("checkpoint config length {len}")));
    }
    let mut text = vec![0u8; len as usize];
    read_exact(r, &mut text, "config")?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let config = ModelConfig::from_canonical(&text)?;
    let count = read_u32(r, "parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag, "role tag")?;
        let role = Role::from_tag(tag[0])
            .ok_or_else(|| Error::Format(format!("checkpoint role tag {}", tag[0])))?;
        let n = read_u32(r, "name length")? as usize;
        if n > 4096 {
            return Err(Error::Format(format!("checkpoint name length {n}")));
        }
        let mut name = vec![0u8; n];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let tensor = DiffTensor::load(r)?.requires_grad();
        params.push(Param { name, role, tensor });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(format!("checkpoint trailer: {e}")))? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    ModelParams::from_parts(&config, params)
}

pub fn save_checkpoint<F: Real>(params: &ModelParams<F>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ModelParams<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
