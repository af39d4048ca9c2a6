//! Named weight tensors, seeded initialisation and the `MDIT` checkpoint format.
//!
//! Every linear map is stored `out × in` and applied as `x · Wᵀ`. Tensors are
//! declared in a fixed order (see [`layout`]); tensor `i` is filled from the
//! seeded stream `WEIGHTS_BASE + i`, uniform on `[-g/√in, g/√in)` where the
//! gain `g` depends on the tensor's role.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::rng::{streams, SeededStream};
use crate::tensor::FeatureMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDIT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Embed,
    Modulation,
    Projection,
    Residual,
}

impl Role {
    fn gain(self) -> f64 {
        match self {
            Role::Embed => 1.0,
            Role::Modulation => 0.2,
            Role::Projection => 1.0,
            Role::Residual => 0.5,
        }
    }
}

pub(crate) fn stream_name(text: bool) -> &'static str {
    if text {
        "txt"
    } else {
        "img"
    }
}

/// The declared tensor order: `(layer id, out, in, role)`.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, Role)> {
    let c = cfg.channels;
    let m = cfg.mlp_hidden;
    let mut v = vec![
        ("embed.image".to_string(), c, c, Role::Embed),
        ("embed.time".to_string(), c, c, Role::Embed),
    ];
    let block = |prefix: String, v: &mut Vec<_>| {
        v.push((format!("{prefix}.mod"), 4 * c, c, Role::Modulation));
        v.push((format!("{prefix}.qkv"), 3 * c, c, Role::Projection));
        v.push((format!("{prefix}.proj"), c, c, Role::Residual));
        v.push((format!("{prefix}.fc1"), m, c, Role::Projection));
        v.push((format!("{prefix}.fc2"), c, m, Role::Residual));
    };
    for l in 0..cfg.double_blocks {
        for text in [true, false] {
            block(format!("double.{l}.{}", stream_name(text)), &mut v);
        }
    }
    for g in 0..cfg.single_blocks {
        block(format!("single.{g}"), &mut v);
    }
    v.push(("head.mod".to_string(), 2 * c, c, Role::Modulation));
    v.push(("head.out".to_string(), c, c, Role::Residual));
    v
}

/// All model parameters, addressable by layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    tensors: Vec<(String, FeatureMatrix)>,
    index: HashMap<String, usize>,
}

impl Weights {
    fn from_tensors(tensors: Vec<(String, FeatureMatrix)>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), i))
            .collect();
        Self { tensors, index }
    }

    pub fn seeded(cfg: &ModelConfig) -> Self {
        let tensors = layout(cfg)
            .into_iter()
            .enumerate()
            .map(|(i, (id, out, inp, role))| {
                let mut s = SeededStream::new(cfg.seed, streams::WEIGHTS_BASE + i as u64);
                let a = role.gain() / (inp as f64).sqrt();
                (id, FeatureMatrix::from_fn(out, inp, |_, _| s.uniform(-a, a)))
            })
            .collect();
        Self::from_tensors(tensors)
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_tensors(
            layout(cfg)
                .into_iter()
                .map(|(id, out, inp, _)| (id, FeatureMatrix::zeros(out, inp)))
                .collect(),
        )
    }

    pub fn get(&self, id: &str) -> Option<&FeatureMatrix> {
        self.index.get(id).map(|&i| &self.tensors[i].1)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut FeatureMatrix> {
        let i = *self.index.get(id)?;
        Some(&mut self.tensors[i].1)
    }

    /// Lookup for ids that are known to exist by construction.
    pub(crate) fn w(&self, id: &str) -> &FeatureMatrix {
        self.get(id)
            .unwrap_or_else(|| panic!("weight {id} missing from layout"))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(id, _)| id.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureMatrix)> {
        self.tensors.iter().map(|(id, m)| (id.as_str(), m))
    }

    /// SHA-256 over every tensor's id and value bits, in declared order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (id, m) in &self.tensors {
            h.update(id.as_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(cfg: &ModelConfig, weights: &Weights) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for v in [
        cfg.channels,
        cfg.height,
        cfg.width,
        cfg.prompt_len,
        cfg.heads,
        cfg.head_dim,
        cfg.mlp_hidden,
        cfg.double_blocks,
        cfg.single_blocks,
    ] {
        w.u32(v as u32);
    }
    w.u64(cfg.seed);
    for (_, m) in &weights.tensors {
        w.f64s(m.data());
    }
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let cfg_at = r.offset();
    let mut field = |name: &str| -> Result<usize> { Ok(r.u32(name)? as usize) };
    let channels = field("channels")?;
    let height = field("height")?;
    let width = field("width")?;
    let prompt_len = field("prompt_len")?;
    let heads = field("heads")?;
    let head_dim = field("head_dim")?;
    let mlp_hidden = field("mlp_hidden")?;
    let double_blocks = field("double_blocks")?;
    let single_blocks = field("single_blocks")?;
    let seed = r.u64("seed")?;
    let cfg = ModelConfig {
        channels,
        height,
        width,
        prompt_len,
        heads,
        head_dim,
        mlp_hidden,
        double_blocks,
        single_blocks,
        seed,
    };
    cfg.validate()
        .map_err(|e| Error::format(cfg_at, format!("invalid config block: {e}")))?;
    let mut tensors = Vec::new();
    for (id, out, inp, _) in layout(&cfg) {
        let vals = r.f64s(out * inp, &id)?;
        tensors.push((id, FeatureMatrix::from_vec(out, inp, vals)?));
    }
    r.finish("checkpoint")?;
    Ok((cfg, Weights::from_tensors(tensors)))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, weights: &Weights) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, weights))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Weights)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
