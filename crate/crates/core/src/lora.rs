//! Low-rank adapter increments `ΔW = scale · B·A` and the `LORA` file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "LORA" | version u32 = 1 | name (u32 len + UTF-8)
//! trigger u32 (0xFFFF_FFFF = none) | entry count u32
//! per entry, sorted by layer id:
//!   layer id (u32 len + UTF-8) | rank u32 | d_out u32 | k_in u32
//!   A: rank·k_in f64, row-major | B: d_out·rank f64, row-major | scale f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::mmdit::{Model, ModelConfig, PromptState, ResidualRecord, Taps, TokenState, Weights};
use crate::rng::{streams, SeededStream};
use crate::tensor::{matmul, FeatureMatrix};

pub const ADAPTER_MAGIC: &[u8; 4] = b"LORA";
pub const ADAPTER_VERSION: u32 = 1;
const NO_TRIGGER: u32 = u32::MAX;

/// Low-rank increment for one target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub target: String,
    /// `r × k_in`
    pub a: FeatureMatrix,
    /// `d_out × r`
    pub b: FeatureMatrix,
    pub scale: f64,
}

impl LoraDelta {
    pub fn new(target: impl Into<String>, a: FeatureMatrix, b: FeatureMatrix, scale: f64) -> Result<Self> {
        let d = Self {
            target: target.into(),
            a,
            b,
            scale,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn k_in(&self) -> usize {
        self.a.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.b.cols() != self.a.rows() {
            return Err(Error::shape(
                "LoraDelta",
                format!(
                    "{}: B is {:?} but A is {:?}",
                    self.target,
                    self.b.shape(),
                    self.a.shape()
                ),
            ));
        }
        if self.rank() > self.d_out().min(self.k_in()) {
            return Err(Error::param(format!(
                "{}: rank {} exceeds min({}, {})",
                self.target,
                self.rank(),
                self.d_out(),
                self.k_in()
            )));
        }
        if !self.scale.is_finite() || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::param(format!("{}: non-finite adapter values", self.target)));
        }
        Ok(())
    }

    /// `scale · B·A`.
    pub fn increment(&self) -> FeatureMatrix {
        matmul(&self.b, &self.a)
            .expect("validated shapes")
            .scale(self.scale)
    }
}

/// A named set of increments, at most one per target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub name: String,
    pub deltas: BTreeMap<String, LoraDelta>,
    /// Prompt token that triggers the adapter. Carried as metadata only.
    pub trigger_token: Option<u32>,
}

impl AdapterBundle {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            deltas: BTreeMap::new(),
            trigger_token: None,
        }
    }

    pub fn insert(&mut self, delta: LoraDelta) {
        self.deltas.insert(delta.target.clone(), delta);
    }

    /// Copy of `self` with every `B` set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for d in out.deltas.values_mut() {
            d.b = FeatureMatrix::zeros(d.b.rows(), d.b.cols());
        }
        out
    }

    /// Layers that are missing from `weights` or whose shape does not match.
    pub fn incompatible_layers(&self, weights: &Weights) -> Vec<String> {
        self.deltas
            .values()
            .filter(|d| match weights.get(&d.target) {
                Some(w) => w.shape() != (d.d_out(), d.k_in()),
                None => true,
            })
            .map(|d| d.target.clone())
            .collect()
    }

    /// Seeded random adapter over `targets`; `A ~ N(0,1)/√k_in`, `B ~ N(0,1)·gain/√r`.
    pub fn synthetic(
        cfg: &ModelConfig,
        name: impl Into<String>,
        seed: u64,
        rank: usize,
        targets: &[String],
        gain: f64,
    ) -> Result<Self> {
        let weights = Weights::zeros(cfg);
        let mut s = SeededStream::new(seed, streams::ADAPTER);
        let mut bundle = Self::new(name);
        for t in targets {
            let (d_out, k_in) = weights
                .get(t)
                .ok_or_else(|| Error::Compatibility {
                    layers: vec![t.clone()],
                })?
                .shape();
            let r = rank.min(d_out).min(k_in);
            let a_sd = 1.0 / (k_in as f64).sqrt();
            let b_sd = gain / (r as f64).sqrt();
            let a = FeatureMatrix::from_fn(r, k_in, |_, _| s.normal() * a_sd);
            let b = FeatureMatrix::from_fn(d_out, r, |_, _| s.normal() * b_sd);
            bundle.insert(LoraDelta::new(t.clone(), a, b, 1.0)?);
        }
        Ok(bundle)
    }
}

/// Attention and MLP projections of the image stream and of the single-stream blocks.
pub fn default_targets(cfg: &ModelConfig) -> Vec<String> {
    let mut v = Vec::new();
    for l in 0..cfg.double_blocks {
        for part in ["qkv", "proj", "fc1", "fc2"] {
            v.push(format!("double.{l}.img.{part}"));
        }
    }
    for g in 0..cfg.single_blocks {
        for part in ["qkv", "proj", "fc1", "fc2"] {
            v.push(format!("single.{g}.{part}"));
        }
    }
    v
}

/// `w0 + scale·B·A`. Entries whose increment is exactly zero keep `w0`'s bits.
pub fn merge_weights(w0: &FeatureMatrix, delta: &LoraDelta) -> Result<FeatureMatrix> {
    if w0.shape() != (delta.d_out(), delta.k_in()) {
        return Err(Error::shape(
            "merge_weights",
            format!(
                "{}: base {:?} vs increment ({}, {})",
                delta.target,
                w0.shape(),
                delta.d_out(),
                delta.k_in()
            ),
        ));
    }
    let inc = delta.increment();
    let mut out = w0.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(inc.data()) {
        if d != 0.0 {
            *o += d;
        }
    }
    Ok(out)
}

/// A full copy of the model weights with every targeted layer merged.
pub fn merged_weights(model: &Model, bundle: &AdapterBundle) -> Result<Weights> {
    let bad = bundle.incompatible_layers(model.weights());
    if !bad.is_empty() {
        return Err(Error::Compatibility { layers: bad });
    }
    let mut w = model.weights().clone();
    for d in bundle.deltas.values() {
        let slot = w.get_mut(&d.target).expect("checked above");
        *slot = merge_weights(slot, d)?;
    }
    Ok(w)
}

/// The base model with `bundle` merged in. `model` itself is untouched.
pub fn apply_adapter(model: &Model, bundle: &AdapterBundle) -> Result<Model> {
    Ok(model.with_weights(merged_weights(model, bundle)?))
}

/// Forward pass under merged weights, returning the tapped residuals `F^(k)`.
pub fn adapter_forward(
    model: &Model,
    bundle: &AdapterBundle,
    state: &TokenState,
    taps: &Taps,
) -> Result<Vec<ResidualRecord>> {
    Ok(apply_adapter(model, bundle)?.forward_pass(state, taps)?.residuals)
}

/// Convenience for velocity evaluation under an adapter.
pub fn adapter_velocity(
    model: &Model,
    bundle: &AdapterBundle,
    z: &FeatureMatrix,
    t: f64,
    prompt: &PromptState,
) -> Result<FeatureMatrix> {
    apply_adapter(model, bundle)?.velocity(z, t, prompt)
}

pub fn encode_adapter(bundle: &AdapterBundle) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(ADAPTER_MAGIC);
    w.u32(ADAPTER_VERSION);
    w.string(&bundle.name);
    w.u32(bundle.trigger_token.unwrap_or(NO_TRIGGER));
    w.u32(bundle.deltas.len() as u32);
    for d in bundle.deltas.values() {
        w.string(&d.target);
        w.u32(d.rank() as u32);
        w.u32(d.d_out() as u32);
        w.u32(d.k_in() as u32);
        w.f64s(d.a.data());
        w.f64s(d.b.data());
        w.f64(d.scale);
    }
    w.into_inner()
}

pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterBundle> {
    let mut r = ByteReader::new(bytes);
    r.magic(ADAPTER_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != ADAPTER_VERSION {
        return Err(Error::format(at, format!("unsupported adapter version {version}")));
    }
    let name = r.string("adapter name")?;
    let trigger = r.u32("trigger token")?;
    let count = r.u32("entry count")?;
    let mut bundle = AdapterBundle::new(name);
    bundle.trigger_token = (trigger != NO_TRIGGER).then_some(trigger);
    for _ in 0..count {
        let entry_at = r.offset();
        let target = r.string("layer id")?;
        let rank = r.u32("rank")? as usize;
        let d_out = r.u32("d_out")? as usize;
        let k_in = r.u32("k_in")? as usize;
        if rank > d_out.min(k_in) {
            return Err(Error::format(
                entry_at,
                format!("{target}: rank {rank} exceeds min({d_out}, {k_in})"),
            ));
        }
        let a = FeatureMatrix::from_vec(rank, k_in, r.f64s(rank * k_in, "A values")?)?;
        let b = FeatureMatrix::from_vec(d_out, rank, r.f64s(d_out * rank, "B values")?)?;
        let scale = r.f64("scale")?;
        let delta =
            LoraDelta::new(target.clone(), a, b, scale).map_err(|e| Error::format(entry_at, e.to_string()))?;
        if bundle.deltas.contains_key(&target) {
            return Err(Error::format(entry_at, format!("duplicate layer id {target}")));
        }
        bundle.insert(delta);
    }
    r.finish("adapter")?;
    Ok(bundle)
}

pub fn save_adapter(bundle: &AdapterBundle, path: &Path) -> Result<()> {
    std::fs::write(path, encode_adapter(bundle)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_adapter(path: &Path) -> Result<AdapterBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_adapter(&bytes)
}
