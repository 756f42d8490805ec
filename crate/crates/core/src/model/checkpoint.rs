//! Binary checkpoints: named f32 parameter segments plus f64 metadata.
//!
//! Layout: magic `MFCK`, u32 version, u32 segment count, then per segment
//! `(name, rows u32, cols u32)`, u32 metadata count with `(name, f64)`
//! pairs, the concatenated little-endian f32 payload, and a trailing CRC32
//! over everything before it.

use std::fs;
use std::path::Path;

use super::param::{Adam, ParamVector};
use super::score::{ScoreConfig, ScoreModel};
use super::tensor::Mat;
use super::value::ValueModel;
use super::Normalizer;
use crate::env::TrajectoryLayout;
use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub segments: Vec<(String, Mat)>,
    pub meta: Vec<(String, f64)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::Truncated("checkpoint".into()))?;
        let s = self.buf.get(self.pos..end).ok_or_else(|| Error::Truncated("checkpoint".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("segment name is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, m: Mat) {
        self.segments.push((name.into(), m));
    }

    pub fn set_meta(&mut self, name: impl Into<String>, v: f64) {
        self.meta.push((name.into(), v));
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.segments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Missing(format!("checkpoint segment {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.segments.iter().any(|(n, _)| n == name)
    }

    pub fn meta(&self, name: &str) -> Result<f64> {
        self.meta
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Missing(format!("checkpoint metadata {name}")))
    }

    fn meta_usize(&self, name: &str) -> Result<usize> {
        let v = self.meta(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Format(format!("metadata {name} is not a count")));
        }
        Ok(v as usize)
    }

    /// Adds every segment of `p` under its own name.
    pub fn push_params(&mut self, p: &ParamVector) -> Result<()> {
        for s in p.segments() {
            self.push(s.name.clone(), p.mat(&s.name)?);
        }
        Ok(())
    }

    /// Fills `template`'s segments from this checkpoint.
    pub fn load_params(&self, template: &ParamVector) -> Result<ParamVector> {
        let mut p = template.clone();
        for s in template.segments() {
            let m = self.get(&s.name)?;
            if (m.rows, m.cols) != (s.rows, s.cols) {
                return Err(Error::Format(format!("segment {} has shape {}x{}", s.name, m.rows, m.cols)));
            }
            p.slice_mut(&s.name)?.copy_from_slice(&m.data);
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for (name, m) in &self.segments {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (name, v) in &self.meta {
            put_str(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (_, m) in &self.segments {
            for &v in &m.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 {
            return Err(Error::Truncated("checkpoint header".into()));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let ns = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(ns.min(1 << 16));
        for _ in 0..ns {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            shapes.push((name, rows, cols));
        }
        let nm = r.u32()? as usize;
        let mut meta = Vec::with_capacity(nm.min(1 << 16));
        for _ in 0..nm {
            let name = r.string()?;
            meta.push((name, r.f64()?));
        }
        let mut segments = Vec::with_capacity(shapes.len());
        for (name, rows, cols) in shapes {
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Truncated("checkpoint".into()))?;
            let mut data = Vec::with_capacity(n.min(body.len()));
            for _ in 0..n {
                data.push(r.f32()? as f64);
            }
            segments.push((name, Mat { rows, cols, data }));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Checkpoint { segments, meta })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Everything needed to resume training or run the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub score: ScoreModel,
    pub normalizer: Normalizer,
    pub value: Option<ValueModel>,
    pub epoch: usize,
    pub optimizer: Option<Adam>,
}

fn row(v: &[f64]) -> Mat {
    Mat { rows: 1, cols: v.len(), data: v.to_vec() }
}

impl ModelBundle {
    pub fn new(score: ScoreModel, normalizer: Normalizer) -> Self {
        ModelBundle { score, normalizer, value: None, epoch: 0, optimizer: None }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        let s = &self.score;
        ck.push_params(&s.params)?;
        let l = &s.layout;
        let c = &s.config;
        for (k, v) in [
            ("layout.d_s", l.d_s),
            ("layout.d_a", l.d_a),
            ("layout.horizon", l.horizon),
            ("score.hidden", c.hidden),
            ("score.depth", c.depth),
            ("score.time_embed", c.time_embed),
            ("score.interaction_hidden", c.interaction_hidden),
            ("score.kernel_rank", c.kernel_rank),
            ("score.knn", c.knn),
            ("score.knn_threshold", c.knn_threshold),
            ("schedule.n_steps", s.schedule.n_steps),
            ("train.epoch", self.epoch),
        ] {
            ck.set_meta(k, v as f64);
        }
        ck.set_meta("schedule.beta_min", s.schedule.beta_min);
        ck.set_meta("schedule.beta_max", s.schedule.beta_max);
        ck.set_meta("schedule.t_max", s.schedule.t_max);
        ck.set_meta("schedule.t_min", s.schedule.t_min);
        ck.push("norm.mean", row(&self.normalizer.mean));
        ck.push("norm.std", row(&self.normalizer.std));
        if let Some(v) = &self.value {
            ck.push_params(&v.params)?;
            ck.push("value.in_mean", row(&v.in_mean));
            ck.push("value.in_std", row(&v.in_std));
            ck.set_meta("value.hidden", v.hidden as f64);
            ck.set_meta("value.depth", v.depth as f64);
            ck.set_meta("value.gamma", v.gamma);
        }
        if let Some(a) = &self.optimizer {
            ck.push("adam.m", row(&a.m));
            ck.push("adam.v", row(&a.v));
            ck.set_meta("adam.t", a.t as f64);
            ck.set_meta("adam.lr", a.lr);
            ck.set_meta("adam.beta1", a.beta1);
            ck.set_meta("adam.beta2", a.beta2);
            ck.set_meta("adam.eps", a.eps);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layout = TrajectoryLayout {
            d_s: ck.meta_usize("layout.d_s")?,
            d_a: ck.meta_usize("layout.d_a")?,
            horizon: ck.meta_usize("layout.horizon")?,
        };
        let config = ScoreConfig {
            hidden: ck.meta_usize("score.hidden")?,
            depth: ck.meta_usize("score.depth")?,
            time_embed: ck.meta_usize("score.time_embed")?,
            interaction_hidden: ck.meta_usize("score.interaction_hidden")?,
            kernel_rank: ck.meta_usize("score.kernel_rank")?,
            knn: ck.meta_usize("score.knn")?,
            knn_threshold: ck.meta_usize("score.knn_threshold")?,
        };
        let schedule = DiffusionSchedule {
            beta_min: ck.meta("schedule.beta_min")?,
            beta_max: ck.meta("schedule.beta_max")?,
            t_max: ck.meta("schedule.t_max")?,
            t_min: ck.meta("schedule.t_min")?,
            n_steps: ck.meta_usize("schedule.n_steps")?,
        };
        let template = ScoreModel::new(layout, config.clone(), schedule, 0)?;
        let params = ck.load_params(&template.params)?;
        let score = ScoreModel::from_params(layout, config, schedule, params)?;
        let d = layout.dim();
        let mean = ck.get("norm.mean")?.data.clone();
        let std = ck.get("norm.std")?.data.clone();
        if mean.len() != d || std.len() != d {
            return Err(Error::Format("normaliser width does not match the layout".into()));
        }
        let normalizer = Normalizer { mean, std };
        let value = if ck.has("value.w0") {
            let hidden = ck.meta_usize("value.hidden")?;
            let depth = ck.meta_usize("value.depth")?;
            let gamma = ck.meta("value.gamma")?;
            let t = ValueModel::new(layout, gamma, hidden, depth, 0)?;
            let p = ck.load_params(&t.params)?;
            Some(ValueModel::from_params(
                layout,
                gamma,
                hidden,
                depth,
                p,
                ck.get("value.in_mean")?.data.clone(),
                ck.get("value.in_std")?.data.clone(),
            )?)
        } else {
            None
        };
        let optimizer = if ck.has("adam.m") {
            let m = ck.get("adam.m")?.data.clone();
            let v = ck.get("adam.v")?.data.clone();
            if m.len() != score.params.len() || v.len() != m.len() {
                return Err(Error::Format("optimizer state does not match the score parameters".into()));
            }
            Some(Adam {
                lr: ck.meta("adam.lr")?,
                beta1: ck.meta("adam.beta1")?,
                beta2: ck.meta("adam.beta2")?,
                eps: ck.meta("adam.eps")?,
                m,
                v,
                t: ck.meta_usize("adam.t")? as u64,
            })
        } else {
            None
        };
        Ok(ModelBundle { score, normalizer, value, epoch: ck.meta_usize("train.epoch")?, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}
