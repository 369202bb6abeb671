//! Checkpoint files. Layout (little-endian): magic `M2CK`, version `u16`,
//! the model config (eight `u32` sizes then `f64` dropout), block count
//! `u32`, then per block: name length `u16`, UTF-8 name, rank `u8`, extents
//! `u32 × rank`, values `f64 × product(extents)`.
//!
//! Blocks whose names start with `optim.` or `state.` carry training state
//! for resumption; all other blocks are model parameters.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::numeric::{Array, Bindings};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"M2CK";
pub const CHECKPOINT_VERSION: u16 = 1;

const STATE_PREFIXES: [&str; 2] = ["optim.", "state."];

/// Model parameters plus optional training-state blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub state: Bindings,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self { params, state: Bindings::new() }
    }

    pub fn is_state_block(name: &str) -> bool {
        STATE_PREFIXES.iter().any(|p| name.starts_with(p))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    let cfg = ckpt.params.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.segment_len,
        cfg.patch_size,
        cfg.d_enc,
        cfg.enc_depth,
        cfg.dec_width,
        cfg.dec_depth,
        cfg.heads,
        cfg.ffn_mult,
    ] {
        put_u32(&mut buf, v, "model size")?;
    }
    buf.extend_from_slice(&cfg.dropout.to_le_bytes());
    if let Some(name) = ckpt.state.names().find(|n| !Checkpoint::is_state_block(n)) {
        return Err(Error::InvalidInput(format!("state block `{name}` lacks an optim./state. prefix")));
    }
    put_u32(&mut buf, ckpt.params.bindings().len() + ckpt.state.len(), "block count")?;
    for (name, a) in ckpt.params.iter().chain(ckpt.state.iter()) {
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidInput(format!("name `{name}` too long")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(a.shape().len()).map_err(|_| Error::InvalidInput("rank exceeds u8".into()))?;
        buf.push(rank);
        for &e in a.shape() {
            put_u32(&mut buf, e, "extent")?;
        }
        for v in a.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor::new(&bytes);
    let magic = c.array::<4>("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = c.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let mut sizes = [0usize; 8];
    for s in &mut sizes {
        *s = c.u32("model config")? as usize;
    }
    let [segment_len, patch_size, d_enc, enc_depth, dec_width, dec_depth, heads, ffn_mult] = sizes;
    let dropout = c.f64("model config")?;
    let config =
        ModelConfig { segment_len, patch_size, d_enc, enc_depth, dec_width, dec_depth, heads, ffn_mult, dropout };
    let count = c.u32("block count")?;
    let (mut params, mut state) = (Bindings::new(), Bindings::new());
    for _ in 0..count {
        let len = c.u16("block name")? as usize;
        let name = std::str::from_utf8(c.take(len, "block name")?)
            .map_err(|_| Error::Malformed("block name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8("block rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("block extents")? as usize);
        }
        let n =
            shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or(Error::TruncatedFile("block data"))?;
        let raw = c.take(n.checked_mul(8).ok_or(Error::TruncatedFile("block data"))?, "block data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let array = Array::new(shape, data).map_err(|e| Error::Malformed(format!("block `{name}`: {e}")))?;
        let target = if Checkpoint::is_state_block(&name) { &mut state } else { &mut params };
        if target.insert(name.clone(), array).is_some() {
            return Err(Error::Malformed(format!("duplicate block `{name}`")));
        }
    }
    if c.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", c.remaining())));
    }
    Ok(Checkpoint { params: ModelParams::from_bindings(config, params)?, state })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(fs::File::open(path)?)
}
