//! Checkpoint serialization.
//!
//! Little-endian flat layout:
//!
//! ```text
//! bytes  0..4    magic "AWCP"
//! bytes  4..8    u32 layout version (currently 1)
//! bytes  8..12   u32 base_channels
//! bytes 12..16   u32 depth
//! bytes 16..20   u32 heads
//! bytes 20..24   u32 time_embed_dim
//! bytes 24..28   u32 attention-resolution count, then that many u32
//!                (ascending), then u32 d_text, u32 d_image,
//!                u64 seed, u64 param_count,
//!                param_count f64 parameter values in layout order
//! ```

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::encoders::{D_IMAGE, D_TEXT};
use crate::error::{Error, Result};

use super::{DenoiserConfig, DenoiserState};

pub const LAYOUT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"AWCP";

pub fn save_checkpoint(state: &DenoiserState, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(64 + state.params.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&LAYOUT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(state.config.base_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(state.config.depth as u32).to_le_bytes());
    buf.extend_from_slice(&(state.config.heads as u32).to_le_bytes());
    buf.extend_from_slice(&(state.config.time_embed_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(state.config.attn_resolutions.len() as u32).to_le_bytes());
    for &r in &state.config.attn_resolutions {
        buf.extend_from_slice(&(r as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(D_TEXT as u32).to_le_bytes());
    buf.extend_from_slice(&(D_IMAGE as u32).to_le_bytes());
    buf.extend_from_slice(&state.seed.to_le_bytes());
    buf.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for &p in &state.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserState> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data: &data, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != LAYOUT_VERSION {
        return Err(Error::Checkpoint(format!(
            "layout version {version} does not match supported version {LAYOUT_VERSION}"
        )));
    }
    let base_channels = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let time_embed_dim = r.u32()? as usize;
    let n_res = r.u32()? as usize;
    let mut attn_resolutions = BTreeSet::new();
    for _ in 0..n_res {
        attn_resolutions.insert(r.u32()? as usize);
    }
    let d_text = r.u32()? as usize;
    let d_image = r.u32()? as usize;
    if d_text != D_TEXT || d_image != D_IMAGE {
        return Err(Error::Checkpoint(format!(
            "embedding widths ({d_text}, {d_image}) do not match this build ({D_TEXT}, {D_IMAGE})"
        )));
    }
    let seed = r.u64()?;
    let param_count = r.u64()? as usize;

    let config = DenoiserConfig {
        base_channels,
        depth,
        attn_resolutions,
        heads,
        time_embed_dim,
    };
    config.validate()?;
    let expected = DenoiserState::param_count_for(&config);
    if param_count != expected {
        return Err(Error::Checkpoint(format!(
            "parameter count {param_count} does not match the config's layout ({expected})"
        )));
    }
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        params.push(r.f64()?);
    }
    if r.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameters".into()));
    }
    Ok(DenoiserState {
        config,
        params,
        seed,
    })
}
