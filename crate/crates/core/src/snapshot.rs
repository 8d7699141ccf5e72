//! Binary weight snapshots (`IPVT`): encoder config and tensors, optionally
//! followed by a prompt pool and its chunk table.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "IPVT"  u32 version
//! u32 image_size, patch_size, channels, embed_dim, num_heads, num_layers
//! f64 mlp_ratio
//! u32 n_prompted, u32 layer…
//! u32 frozen
//! u32 n_tensors, tensor…             (u32 ndim, u32 dim…, f64 data…)
//! u32 has_pool
//!   u32 pool_size, prompt_length, shared, n_tasks, current+1 (0 = none)
//!   u32 n_pools; per pool, per task: keys tensor, prompts tensor
//!   chunk table: per task u32 start, u32 end
//! ```

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::prompts::{LayerPool, PoolConfig, PromptPool};

pub const MAGIC: &[u8; 4] = b"IPVT";
pub const VERSION: usize = 1;

pub fn to_bytes(encoder: &Encoder, pool: Option<&PromptPool>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION)?;
    let c = encoder.config();
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.embed_dim,
        c.num_heads,
        c.num_layers,
    ] {
        w.u32(v)?;
    }
    w.f64(c.mlp_ratio);
    w.u32(c.prompted_layers.len())?;
    for &l in &c.prompted_layers {
        w.u32(l)?;
    }
    w.u32(encoder.is_frozen() as usize)?;
    let tensors = encoder.params().tensors();
    w.u32(tensors.len())?;
    for t in tensors {
        w.tensor(t)?;
    }
    match pool {
        None => w.u32(0)?,
        Some(p) => {
            w.u32(1)?;
            w.u32(p.pool_size())?;
            w.u32(p.prompt_length())?;
            w.u32(p.config().shared as usize)?;
            w.u32(p.num_tasks())?;
            w.u32(p.frozen_upto().map_or(0, |t| t + 1))?;
            w.u32(p.num_pools())?;
            for lp in p.pools() {
                for (k, pr) in lp.keys.iter().zip(&lp.prompts) {
                    w.tensor(k)?;
                    w.tensor(pr)?;
                }
            }
            for r in p.chunks() {
                w.u32(r.start)?;
                w.u32(r.end)?;
            }
        }
    }
    Ok(w.buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Encoder, Option<PromptPool>)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an IPVT snapshot (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported snapshot version {version}"
        )));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let mlp_ratio = r.f64()?;
    let n_prompted = r.u32()?;
    let prompted_layers = (0..n_prompted)
        .map(|_| r.u32())
        .collect::<Result<Vec<_>>>()?;
    let config = EncoderConfig {
        image_size: dims[0],
        patch_size: dims[1],
        channels: dims[2],
        embed_dim: dims[3],
        num_heads: dims[4],
        num_layers: dims[5],
        mlp_ratio,
        prompted_layers,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("snapshot config: {e}")))?;
    let frozen = r.u32()? != 0;
    let mut params = EncoderParams::init(&config, 0);
    let n = r.u32()?;
    if n != params.tensors().len() {
        return Err(Error::Format(format!(
            "snapshot holds {n} tensors, config needs {}",
            params.tensors().len()
        )));
    }
    for slot in params.tensors_mut() {
        let t = r.tensor()?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor shape {:?} where {:?} was expected",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    params.set_frozen(frozen);
    let encoder = Encoder::from_parts(config.clone(), params)?;

    let pool = match r.u32()? {
        0 => None,
        1 => Some(read_pool(&mut r, &config)?),
        f => return Err(Error::Format(format!("bad pool flag {f}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok((encoder, pool))
}

fn read_pool(r: &mut Reader<'_>, config: &EncoderConfig) -> Result<PromptPool> {
    let pool_size = r.u32()?;
    let prompt_length = r.u32()?;
    let shared = r.u32()? != 0;
    let tasks = r.u32()?;
    let current = r.u32()?.checked_sub(1);
    let n_pools = r.u32()?;
    if tasks == 0 || n_pools > config.prompted_layers.len().max(1) {
        return Err(Error::Format("inconsistent pool header".into()));
    }
    let mut pools = Vec::with_capacity(n_pools);
    for _ in 0..n_pools {
        let (mut keys, mut prompts) = (Vec::new(), Vec::new());
        for _ in 0..tasks {
            keys.push(r.tensor()?);
            prompts.push(r.tensor()?);
        }
        pools.push(LayerPool { keys, prompts });
    }
    let chunks = (0..tasks)
        .map(|_| Ok(r.u32()?..r.u32()?))
        .collect::<Result<Vec<_>>>()?;
    let cfg = PoolConfig {
        pool_size,
        prompt_length,
        shared,
    };
    PromptPool::from_parts(
        cfg,
        config.embed_dim,
        config.prompted_layers.clone(),
        chunks,
        pools,
        current,
    )
}

pub fn save(path: &Path, encoder: &Encoder, pool: Option<&PromptPool>) -> Result<()> {
    std::fs::write(path, to_bytes(encoder, pool)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Encoder, Option<PromptPool>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
