//! Versioned binary weight checkpoints.
//!
//! Layout (little-endian): magic `MSRCKPT\0`, format version u32, model
//! header (contrasts, base_channels, time_dim, total_steps as u32,
//! cosine_offset as f64), record count u32, then per parameter tensor:
//! name (u16 length + utf8), rank u8, dims u32 each, f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use super::net::{ModelConfig, TimeUnet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MSRCKPT\0";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TimeUnet) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let cfg = model.config();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(cfg.contrasts as u32).to_le_bytes())?;
    out.write_all(&(cfg.base_channels as u32).to_le_bytes())?;
    out.write_all(&(cfg.time_dim as u32).to_le_bytes())?;
    out.write_all(&(cfg.total_steps as u32).to_le_bytes())?;
    out.write_all(&cfg.cosine_offset.to_le_bytes())?;

    let layout = model.layout();
    out.write_all(&(layout.entries.len() as u32).to_le_bytes())?;
    for entry in &layout.entries {
        let name = entry.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[entry.shape.len() as u8])?;
        for &d in &entry.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &model.params()[entry.offset..entry.offset + entry.len] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TimeUnet> {
    let path = path.as_ref();
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut file)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let contrasts = read_u32(&mut file)? as usize;
    let base_channels = read_u32(&mut file)? as usize;
    let time_dim = read_u32(&mut file)? as usize;
    let total_steps = read_u32(&mut file)? as usize;
    let mut off = [0u8; 8];
    file.read_exact(&mut off)?;
    let cfg = ModelConfig {
        contrasts,
        base_channels,
        time_dim,
        total_steps,
        cosine_offset: f64::from_le_bytes(off),
    };

    let reference = TimeUnet::new(cfg, 0)?;
    let layout = reference.layout().clone();
    let mut params = vec![0f32; reference.param_count()];

    let n_records = read_u32(&mut file)? as usize;
    if n_records != layout.entries.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {n_records} records, expected {}",
            path.display(),
            layout.entries.len()
        )));
    }
    for entry in &layout.entries {
        let mut len_b = [0u8; 2];
        file.read_exact(&mut len_b)?;
        let mut name = vec![0u8; u16::from_le_bytes(len_b) as usize];
        file.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 record name", path.display())))?;
        if name != entry.name {
            return Err(Error::Checkpoint(format!(
                "{}: record `{name}` where `{}` was expected",
                path.display(),
                entry.name
            )));
        }
        let mut rank = [0u8; 1];
        file.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(&mut file)? as usize);
        }
        if dims != entry.shape {
            return Err(Error::Checkpoint(format!(
                "{}: record `{name}` has shape {dims:?}, expected {:?}",
                path.display(),
                entry.shape
            )));
        }
        let mut payload = vec![0u8; entry.len * 4];
        file.read_exact(&mut payload)?;
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            params[entry.offset + i] =
                f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    TimeUnet::from_parts(cfg, params)
}
