//! ViT configuration, named weights, and the VWTF binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VWTF" | version u32 = 1 | header_len u32 | header (UTF-8 JSON of VitConfig)
//! tensor_count u32
//! per tensor: name_len u32 | name UTF-8 | rank u32 | dims u64 × rank | f32 LE payload
//! ```
//!
//! Tensors are written sorted by name, so a model always serializes to the
//! same bytes.
//!
//! Projection weights are stored `out × in` and applied as `x · Wᵀ + b`.
//! The patch projection therefore has shape `D × (P²·3)`, the fused
//! attention input projection `3D × D` (rows ordered Q, K, V; heads are
//! contiguous `D/H` slices inside each).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VWTF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePooling {
    /// Mean over the final-norm patch rows, class token excluded.
    #[default]
    MeanPatch,
    ClassToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub has_class_token: bool,
    #[serde(default)]
    pub feature_pooling: FeaturePooling,
}

impl VitConfig {
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of image patches N.
    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Tokens placed ahead of the patches in the sequence (0 or 1).
    pub fn prefix_tokens(&self) -> usize {
        usize::from(self.has_class_token)
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + self.prefix_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Arithmetic constraints between config fields, as human-readable messages.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.patch_size > 0 && !self.image_size.is_multiple_of(self.patch_size) {
            out.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads > 0 && !self.embed_dim.is_multiple_of(self.num_heads) {
            out.push(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        let hidden = self.embed_dim as f64 * self.mlp_ratio;
        if self.mlp_ratio.is_nan()
            || self.mlp_ratio <= 0.0
            || hidden.round() < 1.0
            || (hidden - hidden.round()).abs() > 1e-6
        {
            out.push(format!(
                "mlp_ratio {} must be positive and give an integral hidden width for embed_dim {}",
                self.mlp_ratio, self.embed_dim
            ));
        }
        if self.feature_pooling == FeaturePooling::ClassToken && !self.has_class_token {
            out.push("feature_pooling class_token requires has_class_token".into());
        }
        out
    }
}

pub fn block_tensor_name(block: usize, suffix: &str) -> String {
    format!("block{block}.{suffix}")
}

/// Every tensor a model with this config must carry, with its exact shape.
pub fn required_tensors(config: &VitConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let mut out = vec![
        (
            "patch_embed.weight".to_string(),
            vec![d, config.patch_dim()],
        ),
        ("patch_embed.bias".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![config.seq_len(), d]),
        ("final_norm.gamma".to_string(), vec![d]),
        ("final_norm.beta".to_string(), vec![d]),
    ];
    if config.has_class_token {
        out.push(("cls_token".to_string(), vec![1, d]));
    }
    for b in 0..config.num_blocks {
        for (suffix, shape) in [
            ("ln1.gamma", vec![d]),
            ("ln1.beta", vec![d]),
            ("qkv.weight", vec![3 * d, d]),
            ("qkv.bias", vec![3 * d]),
            ("attn_out.weight", vec![d, d]),
            ("attn_out.bias", vec![d]),
            ("ln2.gamma", vec![d]),
            ("ln2.beta", vec![d]),
            ("mlp.fc1.weight", vec![hidden, d]),
            ("mlp.fc1.bias", vec![hidden]),
            ("mlp.fc2.weight", vec![d, hidden]),
            ("mlp.fc2.bias", vec![d]),
        ] {
            out.push((block_tensor_name(b, suffix), shape));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Config(String),
    Missing {
        name: String,
        expected: Vec<usize>,
    },
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl Violation {
    pub fn tensor_name(&self) -> Option<&str> {
        match self {
            Violation::Config(_) => None,
            Violation::Missing { name, .. } | Violation::Shape { name, .. } => Some(name),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Config(msg) => write!(f, "config: {msg}"),
            Violation::Missing { name, expected } => {
                write!(f, "{name}: missing, expected shape {expected:?}")
            }
            Violation::Shape {
                name,
                expected,
                found,
            } => write!(f, "{name}: expected shape {expected:?}, found {found:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub config: VitConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl VitModel {
    pub fn new(config: VitConfig, tensors: BTreeMap<String, Tensor>) -> Self {
        Self { config, tensors }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(vec![self.missing(name)]))
    }

    fn missing(&self, name: &str) -> Violation {
        let expected = required_tensors(&self.config)
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .unwrap_or_default();
        Violation::Missing {
            name: name.to_string(),
            expected,
        }
    }

    /// Model whose blocks are all zero with neutral layer norms (γ = 1, β = 0).
    /// Each block is then an exact identity on its input.
    pub fn neutral(config: VitConfig) -> Self {
        let tensors = required_tensors(&config)
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
                let t = Tensor::filled(&shape, value);
                (name, t)
            })
            .collect();
        Self { config, tensors }
    }

    /// Seeded Gaussian initialization: projections N(0, 1/fan_in), norm
    /// gains around 1, small biases, unit-scale positional embeddings.
    pub fn random(config: VitConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let tensors = required_tensors(&config)
            .into_iter()
            .map(|(name, shape)| {
                let (mean, std) = if name.ends_with(".gamma") {
                    (1.0, 0.1)
                } else if name.ends_with(".weight") {
                    (0.0, 1.0 / (shape[1] as f32).sqrt())
                } else if name == "pos_embed" || name == "cls_token" {
                    (0.0, 1.0)
                } else {
                    (0.0, 0.1)
                };
                let dist = Normal::new(mean, std).expect("positive std");
                let len = shape.iter().product();
                let data = (0..len).map(|_| dist.sample(&mut rng)).collect();
                (
                    name,
                    Tensor::new(shape, data).expect("shape matches length"),
                )
            })
            .collect();
        Self { config, tensors }
    }
}

/// Empty iff the config is consistent and every required tensor is present
/// with its exact shape. Extra tensors are ignored.
pub fn validate_model(model: &VitModel) -> Vec<Violation> {
    let config_problems = model.config.problems();
    if !config_problems.is_empty() {
        return config_problems.into_iter().map(Violation::Config).collect();
    }
    required_tensors(&model.config)
        .into_iter()
        .filter_map(|(name, expected)| match model.tensors.get(&name) {
            None => Some(Violation::Missing { name, expected }),
            Some(t) if t.shape() != expected.as_slice() => Some(Violation::Shape {
                name,
                found: t.shape().to_vec(),
                expected,
            }),
            Some(_) => None,
        })
        .collect()
}

pub fn encode_model(model: &VitModel) -> Vec<u8> {
    let header = serde_json::to_string(&model.config).expect("config serializes");
    let payload: usize = model
        .tensors
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.shape().len() + 4 * t.len())
        .sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(model.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &model.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Length(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|e| Error::Format(format!("{what} is not UTF-8: {e}")))
    }
}

/// Parses VWTF bytes without checking tensor shapes against the config.
pub fn decode_model(bytes: &[u8]) -> Result<VitModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"VWTF\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported VWTF version {version}")));
    }
    let header_len = cur.u32("header length")? as usize;
    let header = cur.utf8(header_len, "header")?;
    let config: VitConfig = serde_json::from_str(header)
        .map_err(|e| Error::Format(format!("invalid config header: {e}")))?;

    let count = cur.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let name_len = cur.u32("tensor name length")? as usize;
        let name = cur.utf8(name_len, "tensor name")?.to_string();
        let rank = cur.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = cur.u64("tensor dims")?;
            shape.push(
                usize::try_from(d).map_err(|_| {
                    Error::Format(format!("tensor {name}: dimension {d} too large"))
                })?,
            );
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name}: element count overflows")))?;
        let payload = cur.take(numel, &format!("payload of tensor {i} ({name})"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(VitModel { config, tensors })
}

/// Reads a VWTF file without shape validation (for inspection tools).
pub fn read_model_unchecked(path: impl AsRef<Path>) -> Result<VitModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<VitModel> {
    let model = read_model_unchecked(path)?;
    let violations = validate_model(&model);
    if violations.is_empty() {
        Ok(model)
    } else {
        Err(Error::Validation(violations))
    }
}

pub fn write_model(model: &VitModel, path: impl AsRef<Path>) -> Result<()> {
    let violations = validate_model(model);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}
