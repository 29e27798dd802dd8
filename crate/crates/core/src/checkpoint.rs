//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DLSRCKPT"
//! version    u32
//! header_len u64, header (JSON, sorted keys)
//! count      u32
//! count x { name_len u32, name, ndim u32, dims u64 x ndim, data f64 x prod(dims) }
//! sha256     32 bytes over everything above
//! ```
//!
//! Tensor names are `<component>/<parameter>`, components being `codec`,
//! `featnet`, `teacher`, `student_base`, `fake`, `pixel` and `semantic`.
//! Each stage writes a checkpoint holding what later stages need.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{DenoiserConfig, DenoiserRole, DenoiserWeights};
use crate::codec::{CodecConfig, CodecWeights};
use crate::error::{Error, Result};
use crate::infer::Bundle;
use crate::lora::{AdapterRole, LoraAdapter};
use crate::nn::{LayerShape, ParamTable};
use crate::perception::{FeatureNetConfig, FeatureNetWeights};
use crate::schedule::{DiffusionSchedule, ScheduleParams};
use crate::tensor::{tensor_from_vec, tensor_to_vec};

pub const MAGIC: &[u8; 8] = b"DLSRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// `v<crate version>`, or the value of `DUALSR_BUILD_TAG` at compile time
/// (for example the output of `git describe`).
pub fn build_tag() -> String {
    option_env!("DUALSR_BUILD_TAG")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub rank: usize,
    pub layers: Vec<LayerShape>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub codec: Option<CodecConfig>,
    pub featnet: Option<FeatureNetConfig>,
    pub teacher: Option<DenoiserConfig>,
    pub student_base: Option<DenoiserConfig>,
    pub fake: Option<DenoiserConfig>,
    pub pixel: Option<AdapterMeta>,
    pub semantic: Option<AdapterMeta>,
}

impl Components {
    pub fn roles(&self) -> Vec<&'static str> {
        let mut r = Vec::new();
        if self.codec.is_some() {
            r.push("codec");
        }
        if self.featnet.is_some() {
            r.push("featnet");
        }
        if self.teacher.is_some() {
            r.push("teacher");
        }
        if self.student_base.is_some() {
            r.push("student_base");
        }
        if self.fake.is_some() {
            r.push("fake");
        }
        if self.pixel.is_some() {
            r.push("pixel");
        }
        if self.semantic.is_some() {
            r.push("semantic");
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub build_tag: String,
    pub schedule: ScheduleParams,
    pub student_timestep: usize,
    /// Resolved configuration of the run that wrote the file.
    pub config: serde_json::Value,
    pub roles: Vec<String>,
    pub components: Components,
}

/// In-memory checkpoint: a header and the weight sets it describes.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub build_tag: String,
    pub schedule: ScheduleParams,
    pub student_timestep: usize,
    pub config: serde_json::Value,
    pub codec: Option<CodecWeights>,
    pub featnet: Option<FeatureNetWeights>,
    pub teacher: Option<DenoiserWeights>,
    pub student_base: Option<DenoiserWeights>,
    pub fake: Option<DenoiserWeights>,
    pub pixel: Option<LoraAdapter>,
    pub semantic: Option<LoraAdapter>,
}

impl Checkpoint {
    pub fn new(schedule: ScheduleParams, student_timestep: usize, config: serde_json::Value) -> Self {
        Self {
            build_tag: build_tag(),
            schedule,
            student_timestep,
            config,
            codec: None,
            featnet: None,
            teacher: None,
            student_base: None,
            fake: None,
            pixel: None,
            semantic: None,
        }
    }

    fn components(&self) -> Components {
        let meta = |a: &LoraAdapter| AdapterMeta {
            rank: a.rank,
            layers: a.layers().cloned().collect(),
        };
        Components {
            codec: self.codec.as_ref().map(|c| c.config().clone()),
            featnet: self.featnet.as_ref().map(|f| f.config().clone()),
            teacher: self.teacher.as_ref().map(|d| d.config().clone()),
            student_base: self.student_base.as_ref().map(|d| d.config().clone()),
            fake: self.fake.as_ref().map(|d| d.config().clone()),
            pixel: self.pixel.as_ref().map(meta),
            semantic: self.semantic.as_ref().map(meta),
        }
    }

    pub fn header(&self) -> Header {
        let components = self.components();
        Header {
            build_tag: self.build_tag.clone(),
            schedule: self.schedule,
            student_timestep: self.student_timestep,
            config: self.config.clone(),
            roles: components.roles().into_iter().map(str::to_string).collect(),
            components,
        }
    }

    fn tables(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        let mut put = |prefix: &str, t: &ParamTable| {
            for (k, v) in t {
                out.insert(format!("{prefix}/{k}"), v.clone());
            }
        };
        if let Some(c) = &self.codec {
            put("codec", c.params());
        }
        if let Some(f) = &self.featnet {
            put("featnet", f.params());
        }
        if let Some(d) = &self.teacher {
            put("teacher", d.params());
        }
        if let Some(d) = &self.student_base {
            put("student_base", d.params());
        }
        if let Some(d) = &self.fake {
            put("fake", d.params());
        }
        if let Some(a) = &self.pixel {
            put("pixel", &a.params());
        }
        if let Some(a) = &self.semantic {
            put("semantic", &a.params());
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let tables = self.tables();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(tables.len() as u32).to_le_bytes());
        for (name, t) in &tables {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for d in t.dims() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in tensor_to_vec(t)? {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("content hash mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u32()? as usize;
        let mut groups: BTreeMap<String, ParamTable> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor size".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (group, key) = name
                .split_once('/')
                .ok_or_else(|| Error::Integrity(format!("tensor name `{name}`")))?;
            groups
                .entry(group.to_string())
                .or_default()
                .insert(key.to_string(), tensor_from_vec(data, &dims)?);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes".into()));
        }
        Self::assemble(header, groups)
    }

    fn assemble(header: Header, mut groups: BTreeMap<String, ParamTable>) -> Result<Self> {
        DiffusionSchedule::new(header.schedule)?;
        let mut take = |name: &str| {
            groups
                .remove(name)
                .ok_or_else(|| Error::Integrity(format!("component `{name}` has no tensors")))
        };
        let c = header.components;
        let denoiser = |cfg: Option<DenoiserConfig>, name: &str, role, take: &mut dyn FnMut(&str) -> Result<ParamTable>| {
            cfg.map(|cfg| DenoiserWeights::from_params(cfg, role, take(name)?)).transpose()
        };
        let adapter = |meta: Option<AdapterMeta>, name: &str, role, take: &mut dyn FnMut(&str) -> Result<ParamTable>| {
            meta.map(|m| LoraAdapter::from_params(role, m.rank, &m.layers, &take(name)?))
                .transpose()
        };
        let out = Self {
            build_tag: header.build_tag,
            schedule: header.schedule,
            student_timestep: header.student_timestep,
            config: header.config,
            codec: c.codec.map(|cfg| CodecWeights::from_params(cfg, take("codec")?)).transpose()?,
            featnet: c
                .featnet
                .map(|cfg| FeatureNetWeights::from_params(cfg, take("featnet")?))
                .transpose()?,
            teacher: denoiser(c.teacher, "teacher", DenoiserRole::Teacher, &mut take)?,
            student_base: denoiser(c.student_base, "student_base", DenoiserRole::StudentBase, &mut take)?,
            fake: denoiser(c.fake, "fake", DenoiserRole::Fake, &mut take)?,
            pixel: adapter(c.pixel, "pixel", AdapterRole::Pixel, &mut take)?,
            semantic: adapter(c.semantic, "semantic", AdapterRole::Semantic, &mut take)?,
        };
        if let Some(extra) = groups.keys().next() {
            return Err(Error::Integrity(format!("tensors for undeclared component `{extra}`")));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // Write-then-rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.schedule)
    }

    fn need<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
        v.as_ref()
            .ok_or_else(|| Error::Missing(format!("checkpoint has no {what}")))
    }

    pub fn codec(&self) -> Result<&CodecWeights> {
        Self::need(&self.codec, "codec")
    }

    pub fn featnet(&self) -> Result<&FeatureNetWeights> {
        Self::need(&self.featnet, "feature network")
    }

    pub fn teacher(&self) -> Result<&DenoiserWeights> {
        Self::need(&self.teacher, "teacher")
    }

    pub fn student_base(&self) -> Result<&DenoiserWeights> {
        Self::need(&self.student_base, "student base")
    }

    pub fn pixel(&self) -> Result<&LoraAdapter> {
        Self::need(&self.pixel, "pixel adapter")
    }

    pub fn semantic(&self) -> Result<&LoraAdapter> {
        Self::need(&self.semantic, "semantic adapter")
    }

    /// Inference bundle; requires codec, student base and both adapters.
    pub fn bundle(&self) -> Result<Bundle> {
        Bundle::new(
            self.schedule()?,
            self.codec()?.clone(),
            self.student_base()?.clone(),
            self.pixel()?.clone(),
            self.semantic()?.clone(),
            self.featnet.clone(),
            self.student_timestep,
        )
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
