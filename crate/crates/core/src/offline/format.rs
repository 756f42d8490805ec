//! `MFDD` dataset files.
//!
//! Layout (little-endian): magic `MFDD`, `u32` version, header fields in
//! declared order (strings are `u32` length + UTF-8), then per episode a
//! source byte, `N x D` trajectory floats, `H x N` reward floats and
//! `H x summary_dim` summary floats, all `f32`. A CRC32 of every preceding
//! byte closes the file.

use std::fs;
use std::path::Path;

use super::{DatasetHeader, Episode, EpisodeSource, OfflineDataset};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFDD";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(ds: &OfflineDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let h = &ds.header;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &h.env_name);
    put_u32(&mut out, h.n_agents as u32);
    put_u32(&mut out, h.horizon as u32);
    put_u32(&mut out, h.d_s as u32);
    put_u32(&mut out, h.d_a as u32);
    put_str(&mut out, &h.split);
    put_u32(&mut out, h.summary_dim as u32);
    put_u32(&mut out, ds.episodes.len() as u32);
    for ep in &ds.episodes {
        out.push(ep.source as u8);
        put_f32s(&mut out, &ep.trajectories);
        put_f32s(&mut out, &ep.rewards);
        put_f32s(&mut out, &ep.summaries);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!("payload ends while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<OfflineDataset> {
    if bytes.len() < 12 {
        return Err(Error::Truncated("file shorter than magic, version and checksum".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an MFDD dataset".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let env_name = r.string("env name")?;
    let n_agents = r.u32("N")? as usize;
    let horizon = r.u32("H")? as usize;
    let d_s = r.u32("d_s")? as usize;
    let d_a = r.u32("d_a")? as usize;
    let split = r.string("split")?;
    let summary_dim = r.u32("summary dim")? as usize;
    let count = r.u32("episode count")? as usize;
    let header = DatasetHeader { env_name, n_agents, horizon, d_s, d_a, split, summary_dim };
    let dim = header.layout().dim();
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for e in 0..count {
        let what = format!("episode {e} of {count}");
        let source = match r.take(1, &what)?[0] {
            0 => EpisodeSource::Behavior,
            1 => EpisodeSource::Random,
            b => return Err(Error::Format(format!("unknown episode source tag {b}"))),
        };
        let trajectories = r.f32s(n_agents * dim, &what)?;
        let rewards = r.f32s(horizon * n_agents, &what)?;
        let summaries = r.f32s(horizon * summary_dim, &what)?;
        episodes.push(Episode { source, trajectories, rewards, summaries });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last episode", body.len() - r.pos)));
    }
    let ds = OfflineDataset { header, episodes };
    ds.validate()?;
    Ok(ds)
}

pub fn write(ds: &OfflineDataset, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ds)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<OfflineDataset> {
    from_bytes(&fs::read(path)?)
}
