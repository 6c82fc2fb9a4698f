//! Named-tensor checkpoints, the `.mpc` container format, and linear
//! weight interpolation between two compatible checkpoints.
//!
//! Layout of an `.mpc` file:
//!
//! ```text
//! b"MPC1" | header_len: u64 LE | header: UTF-8 JSON | data region
//! ```
//!
//! The header is `{"tensors":[{"name","shape","dtype":"f32","offset","nbytes"}...],"meta":{...}}`.
//! Offsets are relative to the start of the data region and tensors are
//! packed back to back in header order, each as row-major little-endian `f32`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPC1";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "mpc";

pub const META_ARCH: &str = "architecture";
pub const META_EMBED_DIM: &str = "embed_dim";
pub const META_STAGE: &str = "stage";
pub const META_SEED: &str = "seed";
pub const META_ALPHA: &str = "alpha";

/// Lifecycle tag carried in checkpoint metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Zeroshot,
    Finetuned,
    Patched,
    Aligned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Zeroshot => "zeroshot",
            Stage::Finetuned => "finetuned",
            Stage::Patched => "patched",
            Stage::Aligned => "aligned",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "zeroshot" => Some(Stage::Zeroshot),
            "finetuned" => Some(Stage::Finetuned),
            "patched" => Some(Stage::Patched),
            "aligned" => Some(Stage::Aligned),
            _ => None,
        }
    }
}

/// Ordered map of named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: IndexMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(architecture: &str, embed_dim: usize) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert(META_ARCH.to_string(), architecture.to_string());
        meta.insert(META_EMBED_DIM.to_string(), embed_dim.to_string());
        Checkpoint { tensors: IndexMap::new(), meta }
    }

    /// Appends a tensor. Names must be unique.
    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    /// Replaces an existing tensor, keeping its position and shape.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named {name:?}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape(
                format!("tensor {name:?}"),
                format!("replacement {:?} vs {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn architecture(&self) -> Option<&str> {
        self.meta_value(META_ARCH)
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.meta_value(META_EMBED_DIM)?.parse().ok()
    }

    pub fn stage(&self) -> Option<Stage> {
        Stage::parse(self.meta_value(META_STAGE)?)
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.set_meta(META_STAGE, stage.as_str());
    }

    /// Errors unless the architecture id in `meta` equals `expected`.
    pub fn expect_architecture(&self, expected: &str) -> Result<()> {
        match self.architecture() {
            Some(a) if a == expected => Ok(()),
            other => Err(Error::Architecture {
                expected: expected.to_string(),
                found: other.unwrap_or("<missing>").to_string(),
            }),
        }
    }

    /// True when every tensor matches `other` bit for bit and in order.
    pub fn tensors_bit_eq(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = 4 * t.len() as u64;
            entries.push(HeaderEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".to_string(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header { tensors: entries, meta: self.meta.clone() })?;
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..3] != b"MPC" {
            return Err(Error::BadMagic { path: origin.to_path_buf() });
        }
        if bytes[3] != MAGIC[3] {
            let found = (bytes[3] as char).to_digit(10).unwrap_or(u32::MAX);
            return Err(Error::Version { found, expected: FORMAT_VERSION });
        }
        if bytes.len() < 12 {
            return Err(Error::Header("file ends before header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let header_end = 12u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Header(format!("header length {header_len} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end as usize])
            .map_err(|e| Error::Header(e.to_string()))?;
        let data = &bytes[header_end as usize..];

        let mut extents: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Header(format!("unsupported dtype {:?} for {:?}", e.dtype, e.name)));
            }
            let n: u64 = e.shape.iter().map(|&d| d as u64).product();
            if e.shape.is_empty() || e.shape.contains(&0) || e.nbytes != 4 * n {
                return Err(Error::Header(format!(
                    "tensor {:?}: shape {:?} does not match {} bytes",
                    e.name, e.shape, e.nbytes
                )));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .ok_or_else(|| Error::Header(format!("tensor {:?} extent overflows", e.name)))?;
            extents.push((e.offset, end, e.name.as_str()));
        }
        extents.sort();
        for w in extents.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Overlap { name: w[1].2.to_string() });
            }
        }
        if let Some(&(_, end, _)) = extents.last() {
            if end > data.len() as u64 {
                return Err(Error::Truncated { expected: end, found: data.len() as u64 });
            }
        }

        let mut tensors = IndexMap::with_capacity(header.tensors.len());
        for e in header.tensors {
            let raw = &data[e.offset as usize..(e.offset + e.nbytes) as usize];
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, values)?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(Error::Header(format!("duplicate tensor name {:?}", e.name)));
            }
        }
        Ok(Checkpoint { tensors, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
    meta: BTreeMap<String, String>,
}

/// Differences between two checkpoints' tensor layouts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CompatReport {
    /// Present in the first checkpoint, absent from the second.
    pub missing: Vec<String>,
    /// Present in the second checkpoint only.
    pub extra: Vec<String>,
    pub shape_conflicts: Vec<ShapeConflict>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeConflict {
    pub name: String,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

impl CompatReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.shape_conflicts.is_empty()
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "compatible");
        }
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("missing {:?}", self.missing));
        }
        if !self.extra.is_empty() {
            parts.push(format!("extra {:?}", self.extra));
        }
        for c in &self.shape_conflicts {
            parts.push(format!("{} has shape {:?} vs {:?}", c.name, c.left, c.right));
        }
        write!(f, "{}", parts.join("; "))
    }
}

/// Compares name sets and shapes of `a` and `b`.
pub fn compat_check(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    let mut report = CompatReport::default();
    for (name, ta) in &a.tensors {
        match b.tensors.get(name) {
            None => report.missing.push(name.clone()),
            Some(tb) if ta.shape() != tb.shape() => report.shape_conflicts.push(ShapeConflict {
                name: name.clone(),
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            }),
            Some(_) => {}
        }
    }
    report.extra = b.tensors.keys().filter(|n| !a.tensors.contains_key(*n)).cloned().collect();
    report
}

/// Mixing coefficient for weight interpolation, validated to lie in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Alpha(alpha))
        } else {
            Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// `(1 - alpha) * zs + alpha * ft`, elementwise, evaluated in `f64`.
///
/// The result keeps `zs`'s metadata, is tagged [`Stage::Patched`] and
/// records `alpha`. The endpoints copy their input exactly.
pub fn interpolate(zs: &Checkpoint, ft: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    let alpha = Alpha::new(alpha)?.get();
    let report = compat_check(zs, ft);
    if !report.is_ok() {
        return Err(Error::Incompatible(report));
    }
    let mut out = Checkpoint { tensors: IndexMap::with_capacity(zs.len()), meta: zs.meta.clone() };
    for (name, a) in &zs.tensors {
        let b = &ft.tensors[name];
        let t = if alpha == 0.0 {
            a.clone()
        } else if alpha == 1.0 {
            b.clone()
        } else {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| ((1.0 - alpha) * x as f64 + alpha * y as f64) as f32)
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        out.tensors.insert(name.clone(), t);
    }
    out.set_stage(Stage::Patched);
    out.set_meta(META_ALPHA, format!("{alpha}"));
    Ok(out)
}
