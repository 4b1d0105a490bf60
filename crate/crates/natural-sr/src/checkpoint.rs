//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian): an 8-byte magic, a format version,
//! a network kind tag, a TOML config echo, optional curriculum state,
//! the named parameter tensors, optional optimizer state, and a SHA-256
//! digest over everything before it. Loads are all-or-nothing: any
//! truncation, overrun or digest mismatch rejects the file without
//! producing a partial network.

use std::collections::VecDeque;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{Discriminator, FrlConfig, GanDiscConfig, Generator};
use crate::nmd::{CurriculumState, NmdConfig, NmdNet};
use crate::optim::{AdamState, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NSRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
/// Hard ceiling on a single tensor's rank; real tensors here are rank 4.
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkptKind {
    Nmd,
    Generator,
    GanDisc,
}

impl CkptKind {
    fn tag(self) -> u8 {
        match self {
            CkptKind::Nmd => 0,
            CkptKind::Generator => 1,
            CkptKind::GanDisc => 2,
        }
    }

    fn from_tag(t: u8) -> Result<CkptKind> {
        match t {
            0 => Ok(CkptKind::Nmd),
            1 => Ok(CkptKind::Generator),
            2 => Ok(CkptKind::GanDisc),
            _ => Err(Error::Corrupt(format!("unknown network kind tag {}", t))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CkptKind::Nmd => "nmd",
            CkptKind::Generator => "generator",
            CkptKind::GanDisc => "gan-disc",
        }
    }
}

/// Config echo for generator checkpoints; the other two kinds embed
/// their config struct directly.
#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    scale: usize,
    generator: FrlConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CkptKind,
    pub config_toml: String,
    pub curriculum: Option<CurriculumState>,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_nmd(
        net: &NmdNet,
        curriculum: Option<&CurriculumState>,
        adam: Option<&AdamState>,
    ) -> Checkpoint {
        Checkpoint {
            kind: CkptKind::Nmd,
            config_toml: toml::to_string(&net.config).expect("config serialization cannot fail"),
            curriculum: curriculum.cloned(),
            params: net.params.clone(),
            adam: adam.cloned(),
        }
    }

    pub fn from_generator(gen: &Generator, adam: Option<&AdamState>) -> Checkpoint {
        let meta = GeneratorMeta { scale: gen.scale, generator: gen.config.clone() };
        Checkpoint {
            kind: CkptKind::Generator,
            config_toml: toml::to_string(&meta).expect("config serialization cannot fail"),
            curriculum: None,
            params: gen.params.clone(),
            adam: adam.cloned(),
        }
    }

    pub fn from_discriminator(disc: &Discriminator, adam: Option<&AdamState>) -> Checkpoint {
        Checkpoint {
            kind: CkptKind::GanDisc,
            config_toml: toml::to_string(&disc.config).expect("config serialization cannot fail"),
            curriculum: None,
            params: disc.params.clone(),
            adam: adam.cloned(),
        }
    }

    fn expect_kind(&self, expected: CkptKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::KindMismatch {
                expected: expected.name().to_string(),
                found: self.kind.name().to_string(),
            });
        }
        Ok(())
    }

    /// Rebuilds the naturalness net, checking every tensor against a
    /// freshly initialized network of the same config.
    pub fn to_nmd(&self) -> Result<NmdNet> {
        self.expect_kind(CkptKind::Nmd)?;
        let config: NmdConfig =
            toml::from_str(&self.config_toml).map_err(|e| Error::Corrupt(e.to_string()))?;
        let reference = NmdNet::init(config.clone(), 0)?;
        check_layout(&self.params, &reference.params)?;
        Ok(NmdNet { config, params: self.params.clone() })
    }

    pub fn to_generator(&self) -> Result<Generator> {
        self.expect_kind(CkptKind::Generator)?;
        let meta: GeneratorMeta =
            toml::from_str(&self.config_toml).map_err(|e| Error::Corrupt(e.to_string()))?;
        let reference = Generator::init(meta.generator.clone(), meta.scale, 0)?;
        check_layout(&self.params, &reference.params)?;
        Ok(Generator { config: meta.generator, scale: meta.scale, params: self.params.clone() })
    }

    pub fn to_discriminator(&self) -> Result<Discriminator> {
        self.expect_kind(CkptKind::GanDisc)?;
        let config: GanDiscConfig =
            toml::from_str(&self.config_toml).map_err(|e| Error::Corrupt(e.to_string()))?;
        let reference = Discriminator::init(config.clone(), 0)?;
        check_layout(&self.params, &reference.params)?;
        Ok(Discriminator { config, params: self.params.clone() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        write_str(&mut out, &self.config_toml);
        match &self.curriculum {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&c.alpha.to_le_bytes());
                out.extend_from_slice(&c.sigma.to_le_bytes());
                out.extend_from_slice(&c.alpha_updates.to_le_bytes());
                out.extend_from_slice(&c.sigma_updates.to_le_bytes());
                write_f64_seq(&mut out, c.blurry_window.iter().copied());
                write_f64_seq(&mut out, c.noisy_window.iter().copied());
            }
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            write_str(&mut out, name);
            out.push((p.trainable as u8) | ((p.state as u8) << 1));
            write_tensor(&mut out, &p.value);
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.beta1.to_le_bytes());
                out.extend_from_slice(&a.beta2.to_le_bytes());
                out.extend_from_slice(&a.eps.to_le_bytes());
                out.extend_from_slice(&a.step.to_le_bytes());
                write_moments(&mut out, &a.m);
                write_moments(&mut out, &a.v);
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    /// Fully bounds-checked decode. Never panics on arbitrary input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Corrupt("file shorter than the fixed header".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expected: [u8; 32] = Sha256::digest(body).into();
        if digest != expected {
            return Err(Error::Corrupt("digest mismatch".into()));
        }
        let mut cur = Cursor { data: body, pos: 0 };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err(Error::Corrupt("bad magic; not a checkpoint file".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, supported: FORMAT_VERSION });
        }
        let kind = CkptKind::from_tag(cur.u8()?)?;
        let config_toml = cur.string()?;
        let curriculum = match cur.u8()? {
            0 => None,
            1 => Some(CurriculumState {
                alpha: cur.f64()?,
                sigma: cur.f64()?,
                alpha_updates: cur.u32()?,
                sigma_updates: cur.u32()?,
                blurry_window: VecDeque::from(cur.f64_seq()?),
                noisy_window: VecDeque::from(cur.f64_seq()?),
            }),
            other => {
                return Err(Error::Corrupt(format!("curriculum flag must be 0 or 1, got {}", other)))
            }
        };
        let n_params = cur.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let name = cur.string()?;
            let flags = cur.u8()?;
            if flags > 3 {
                return Err(Error::Corrupt(format!("bad param flags {:#x}", flags)));
            }
            let value = cur.tensor()?;
            if flags & 2 != 0 {
                params.insert_state(&name, value);
            } else {
                params.insert(&name, value, flags & 1 != 0);
            }
        }
        let adam = match cur.u8()? {
            0 => None,
            1 => Some(AdamState {
                beta1: cur.f64()?,
                beta2: cur.f64()?,
                eps: cur.f64()?,
                step: cur.u64()?,
                m: cur.moments()?,
                v: cur.moments()?,
            }),
            other => {
                return Err(Error::Corrupt(format!("optimizer flag must be 0 or 1, got {}", other)))
            }
        };
        if cur.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after the payload",
                body.len() - cur.pos
            )));
        }
        Ok(Checkpoint { kind, config_toml, curriculum, params, adam })
    }
}

/// Shape-and-name agreement with a reference layout; values are free.
fn check_layout(loaded: &ParamSet, reference: &ParamSet) -> Result<()> {
    if loaded.len() != reference.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint holds {} tensors, the config implies {}",
            loaded.len(),
            reference.len()
        )));
    }
    for (name, p) in reference.iter() {
        let got = loaded
            .get(name)
            .map_err(|_| Error::Corrupt(format!("missing tensor '{}'", name)))?;
        if got.value.shape() != p.value.shape() {
            return Err(Error::Corrupt(format!(
                "tensor '{}' has shape {:?}, the config implies {:?}",
                name,
                got.value.shape(),
                p.value.shape()
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_f64_seq(out: &mut Vec<u8>, vals: impl ExactSizeIterator<Item = f64>) {
    out.extend_from_slice(&(vals.len() as u32).to_le_bytes());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.le_bytes());
}

fn write_moments(out: &mut Vec<u8>, m: &IndexMap<String, Tensor>) {
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    for (name, t) in m {
        write_str(out, name);
        write_tensor(out, t);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Corrupt("truncated file".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Corrupt("string field is not UTF-8".into()))
    }

    fn f64_seq(&mut self) -> Result<Vec<f64>> {
        let len = self.u32()? as usize;
        // Each element needs 8 bytes; reject before allocating.
        if len > self.data.len().saturating_sub(self.pos) / 8 {
            return Err(Error::Corrupt("sequence length exceeds file size".into()));
        }
        (0..len).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Corrupt(format!("tensor rank {} exceeds {}", rank, MAX_RANK)));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = self.u64()?;
            let d = usize::try_from(d).map_err(|_| Error::Corrupt("dimension overflow".into()))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Corrupt("element count overflow".into()))?;
            shape.push(d);
        }
        if numel > self.data.len().saturating_sub(self.pos) / 8 {
            return Err(Error::Corrupt("tensor payload exceeds file size".into()));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::from_vec(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))
    }

    fn moments(&mut self) -> Result<IndexMap<String, Tensor>> {
        let len = self.u32()? as usize;
        let mut out = IndexMap::new();
        for _ in 0..len {
            let name = self.string()?;
            let t = self.tensor()?;
            out.insert(name, t);
        }
        Ok(out)
    }
}
