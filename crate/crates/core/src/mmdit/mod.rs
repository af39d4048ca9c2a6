//! A miniature multi-modal rectified-flow transformer.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (image). Sampling integrates
//! the predicted velocity with explicit Euler steps on a uniform grid, and
//! inversion runs the same grid backwards.

mod config;
mod forward;
mod weights;

use std::path::Path;

pub use config::ModelConfig;
pub use forward::{
    forward_with, recompose, site_residuals, AttentionCapture, BlockKind, ForwardOutput, NoHook,
    ResidualHook, ResidualRecord, ResidualTaps, Site, SiteInput, Stream, Sublayer, Taps, TokenState,
};
pub use weights::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Weights, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::rng::{streams, SeededStream};
use crate::tensor::{matmul_bt, FeatureMatrix};

/// Prompt token embeddings (`T × C`). Text encoding is out of scope, so
/// prompts are seeded synthetic vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub tokens: FeatureMatrix,
}

impl PromptState {
    pub fn synthetic(cfg: &ModelConfig, seed: u64) -> Self {
        let mut s = SeededStream::new(seed, streams::PROMPT);
        Self {
            tokens: FeatureMatrix::from_fn(cfg.prompt_len, cfg.channels, |_, _| s.normal()),
        }
    }
}

/// Standard-normal latent noise of shape `S × C`.
pub fn seeded_noise(cfg: &ModelConfig, seed: u64) -> FeatureMatrix {
    let mut s = SeededStream::new(seed, streams::NOISE);
    FeatureMatrix::from_fn(cfg.image_tokens(), cfg.channels, |_, _| s.normal())
}

/// Flow time at step `i` of an `n`-step denoising run (`1 → 0`).
pub fn denoise_time(step: usize, steps: usize) -> f64 {
    (steps - step) as f64 / steps as f64
}

/// Flow time at step `i` of an `n`-step inversion run (`0 → 1`).
pub fn invert_time(step: usize, steps: usize) -> f64 {
    step as f64 / steps as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    weights: Weights,
    positions: FeatureMatrix,
}

impl Model {
    /// Seeded model; identical configs give bit-identical weights.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::from_parts(cfg, Weights::seeded(&cfg)))
    }

    /// Every weight zero: all residuals vanish and the velocity is zero.
    pub fn zeroed(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::from_parts(cfg, Weights::zeros(&cfg)))
    }

    pub(crate) fn from_parts(cfg: ModelConfig, weights: Weights) -> Self {
        let positions = forward::position_embedding(&cfg);
        Self {
            cfg,
            weights,
            positions,
        }
    }

    /// Same model with every block parameter zeroed; embeddings and head kept.
    pub fn with_blocks_zeroed(&self) -> Self {
        let mut w = self.weights.clone();
        let ids: Vec<String> = w
            .ids()
            .filter(|id| id.starts_with("double.") || id.starts_with("single."))
            .map(str::to_owned)
            .collect();
        for id in ids {
            let m = w.get_mut(&id).expect("id from layout");
            *m = FeatureMatrix::zeros(m.rows(), m.cols());
        }
        Self::from_parts(self.cfg, w)
    }

    /// Same architecture with replacement weights.
    pub fn with_weights(&self, weights: Weights) -> Self {
        Self::from_parts(self.cfg, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn checksum(&self) -> String {
        self.weights.checksum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.cfg, &self.weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, w) = load_checkpoint(path)?;
        Ok(Self::from_parts(cfg, w))
    }

    /// Token state entering the first block for latent `z` at flow time `t`.
    pub fn embed(&self, z: &FeatureMatrix, t: f64, prompt: &PromptState) -> Result<TokenState> {
        if z.shape() != (self.cfg.image_tokens(), self.cfg.channels) {
            return Err(Error::shape(
                "embed",
                format!(
                    "latent {:?}, expected ({}, {})",
                    z.shape(),
                    self.cfg.image_tokens(),
                    self.cfg.channels
                ),
            ));
        }
        if prompt.tokens.shape() != (self.cfg.prompt_len, self.cfg.channels) {
            return Err(Error::shape(
                "embed",
                format!("prompt {:?}, expected ({}, {})", prompt.tokens.shape(), self.cfg.prompt_len, self.cfg.channels),
            ));
        }
        let image = matmul_bt(z, self.weights.w("embed.image"))?.add(&self.positions)?;
        Ok(TokenState {
            text: prompt.tokens.clone(),
            image,
            temb: forward::timestep_embedding(&self.cfg, &self.weights, t),
        })
    }

    pub fn forward_pass(&self, state: &TokenState, taps: &Taps) -> Result<ForwardOutput> {
        forward_with(&self.cfg, &self.weights, state, taps, &mut NoHook)
    }

    pub fn forward_hooked(&self, state: &TokenState, taps: &Taps, hook: &mut dyn ResidualHook) -> Result<ForwardOutput> {
        forward_with(&self.cfg, &self.weights, state, taps, hook)
    }

    pub fn velocity(&self, z: &FeatureMatrix, t: f64, prompt: &PromptState) -> Result<FeatureMatrix> {
        Ok(self.velocity_with(z, t, prompt, &Taps::none(), &mut NoHook)?.0)
    }

    /// Velocity plus whatever the forward pass was asked to tap.
    pub fn velocity_with(
        &self,
        z: &FeatureMatrix,
        t: f64,
        prompt: &PromptState,
        taps: &Taps,
        hook: &mut dyn ResidualHook,
    ) -> Result<(FeatureMatrix, ForwardOutput)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::param(format!("flow time {t} outside [0, 1]")));
        }
        let state = self.embed(z, t, prompt)?;
        let out = self.forward_hooked(&state, taps, hook)?;
        let v = forward::velocity_head(&self.cfg, &self.weights, &out.state.image, &state.temb)?;
        if !v.is_finite() {
            return Err(Error::Contract(format!("non-finite velocity at t = {t}")));
        }
        Ok((v, out))
    }

    /// Euler integration `z ← z − Δ·v(z, t)` from `t = 1` down to `t = 0`.
    /// `hook.begin_step` runs before each velocity evaluation.
    pub fn flow_denoise(
        &self,
        z1: &FeatureMatrix,
        prompt: &PromptState,
        steps: usize,
        hook: &mut dyn ResidualHook,
    ) -> Result<FeatureMatrix> {
        check_steps(steps)?;
        let dt = 1.0 / steps as f64;
        let mut z = z1.clone();
        for i in 0..steps {
            let t = denoise_time(i, steps);
            hook.begin_step(i, t)?;
            let (v, _) = self.velocity_with(&z, t, prompt, &Taps::none(), hook)?;
            euler(&mut z, &v, -dt);
        }
        Ok(z)
    }

    /// Reverse Euler `z ← z + Δ·v(z, t)` from `t = 0` up to `t = 1`.
    pub fn flow_invert(&self, z0: &FeatureMatrix, prompt: &PromptState, steps: usize) -> Result<FeatureMatrix> {
        check_steps(steps)?;
        let dt = 1.0 / steps as f64;
        let mut z = z0.clone();
        for i in 0..steps {
            let v = self.velocity(&z, invert_time(i, steps), prompt)?;
            euler(&mut z, &v, dt);
        }
        Ok(z)
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::param("step count must be at least 1"));
    }
    Ok(())
}

/// `z ← z + h·v`.
pub(crate) fn euler(z: &mut FeatureMatrix, v: &FeatureMatrix, h: f64) {
    for (a, b) in z.data_mut().iter_mut().zip(v.data()) {
        *a += h * b;
    }
}
