//! Prior-weighted substitution of adapter residuals during denoising.
//!
//! Once the gate opens, every sublayer is evaluated a second time per adapter
//! on exactly the inputs the base weights saw. Image rows claimed by some
//! prior take the weighted adapter residuals; prompt rows and unclaimed image
//! rows keep the base residual bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lora::{merged_weights, AdapterBundle};
use crate::mmdit::{site_residuals, Model, ModelConfig, PromptState, ResidualHook, ResidualRecord, Site, Weights};
use crate::prior::BinaryPrior;
use crate::tensor::FeatureMatrix;

/// Gate and normalisation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    /// Blending is active at flow times `s ≤ t`.
    pub t: f64,
    pub epsilon: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { t: 0.90, epsilon: 1e-6 }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::param(format!("blend start {} outside [0, 1]", self.t)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }

    pub fn gate_open(&self, s: f64) -> bool {
        s <= self.t
    }
}

/// Per-subject mixing weights `α_k = M_k / (Σ M + ε)` over image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaWeights {
    /// `alphas[k][p]` for subject `k` and image token `p`.
    pub alphas: Vec<Vec<f64>>,
    /// Whether any prior claims token `p`.
    pub claimed: Vec<bool>,
}

impl AlphaWeights {
    pub fn image_len(&self) -> usize {
        self.claimed.len()
    }

    pub fn claimed_count(&self) -> usize {
        self.claimed.iter().filter(|&&c| c).count()
    }
}

pub fn alpha_weights(priors: &[BinaryPrior], epsilon: f64) -> Result<AlphaWeights> {
    let first = priors.first().ok_or_else(|| Error::param("at least one prior is required"))?;
    let shape = first.mask.shape();
    if let Some(bad) = priors.iter().find(|p| p.mask.shape() != shape) {
        return Err(Error::shape("alpha_weights", format!("{:?} vs {:?}", bad.mask.shape(), shape)));
    }
    let n = shape.0 * shape.1;
    let mut total = vec![0.0; n];
    for p in priors {
        for (t, &m) in total.iter_mut().zip(p.mask.data()) {
            if m {
                *t += 1.0;
            }
        }
    }
    let alphas = priors
        .iter()
        .map(|p| {
            p.mask
                .data()
                .iter()
                .zip(&total)
                .map(|(&m, &s)| if m { 1.0 / (s + epsilon) } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(AlphaWeights {
        alphas,
        claimed: total.iter().map(|&s| s > 0.0).collect(),
    })
}

/// Blends one record. `adapters[k]` is subject `k`'s residual for the same slot.
pub fn blend_residual(
    base: &ResidualRecord,
    adapters: &[&ResidualRecord],
    alpha: &AlphaWeights,
    prompt_len: usize,
) -> Result<FeatureMatrix> {
    if adapters.len() != alpha.alphas.len() {
        return Err(Error::shape(
            "blend_residual",
            format!("{} adapter residuals for {} priors", adapters.len(), alpha.alphas.len()),
        ));
    }
    if let Some(bad) = adapters.iter().find(|f| !f.same_slot(base)) {
        return Err(Error::Contract(format!(
            "adapter record ({}, {:?}, {:?}) does not match base ({}, {:?}, {:?})",
            bad.block, bad.sublayer, bad.stream, base.block, base.sublayer, base.stream
        )));
    }
    if let Some(bad) = adapters.iter().find(|f| f.values.shape() != base.values.shape()) {
        return Err(Error::shape(
            "blend_residual",
            format!("adapter residual {:?} vs base {:?}", bad.values.shape(), base.values.shape()),
        ));
    }
    let rows = base.stream.image_rows(prompt_len, alpha.image_len());
    if rows.end > base.values.rows() {
        return Err(Error::shape(
            "blend_residual",
            format!("record has {} rows, image tokens end at {}", base.values.rows(), rows.end),
        ));
    }
    let mut out = base.values.clone();
    let c = out.cols();
    for (p, row) in rows.enumerate() {
        if !alpha.claimed[p] {
            continue;
        }
        let dst = out.row_mut(row);
        dst.fill(0.0);
        for (k, f) in adapters.iter().enumerate() {
            let a = alpha.alphas[k][p];
            let src = f.values.row(row);
            for j in 0..c {
                dst[j] += a * src[j];
            }
        }
    }
    Ok(out)
}

/// Sees every blended record next to the base record it replaced.
pub trait BlendObserver {
    fn observe(&mut self, step: usize, base: &ResidualRecord, blended: &FeatureMatrix) -> Result<()>;
}

/// Gate state at one denoising step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepGate {
    pub step: usize,
    pub t: f64,
    pub open: bool,
}

/// Counters reported after a blended run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlendStats {
    pub schedule: Vec<StepGate>,
    pub steps: usize,
    pub gated_steps: usize,
    /// Adapter forward passes (one per adapter per gated step).
    pub adapter_forwards: usize,
    pub blended_records: usize,
    /// Prompt or unclaimed rows confirmed identical to the base residual.
    pub pinned_rows_checked: usize,
}

/// A [`ResidualHook`] that performs the blending. Adapter weights are merged
/// once at construction.
pub struct BlendHook<'o> {
    cfg: ModelConfig,
    adapters: Vec<Weights>,
    alpha: AlphaWeights,
    blend: BlendConfig,
    step: usize,
    open: bool,
    stats: BlendStats,
    observer: Option<&'o mut dyn BlendObserver>,
}

impl<'o> BlendHook<'o> {
    pub fn new(model: &Model, adapters: &[AdapterBundle], priors: &[BinaryPrior], blend: BlendConfig) -> Result<Self> {
        blend.validate()?;
        let cfg = *model.config();
        if adapters.len() != priors.len() {
            return Err(Error::param(format!(
                "{} adapters for {} priors",
                adapters.len(),
                priors.len()
            )));
        }
        let alpha = alpha_weights(priors, blend.epsilon)?;
        if alpha.image_len() != cfg.image_tokens() {
            return Err(Error::shape(
                "BlendHook",
                format!("priors cover {} cells, model has {} image tokens", alpha.image_len(), cfg.image_tokens()),
            ));
        }
        let adapters = adapters
            .iter()
            .map(|a| merged_weights(model, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            adapters,
            alpha,
            blend,
            step: 0,
            open: false,
            stats: BlendStats::default(),
            observer: None,
        })
    }

    pub fn with_observer(mut self, observer: &'o mut dyn BlendObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn stats(&self) -> &BlendStats {
        &self.stats
    }

    pub fn into_stats(self) -> BlendStats {
        self.stats
    }

    pub fn alpha(&self) -> &AlphaWeights {
        &self.alpha
    }

    fn check_pinned(&mut self, base: &ResidualRecord, blended: &FeatureMatrix) -> Result<()> {
        let t = self.cfg.prompt_len;
        let img = base.stream.image_rows(t, self.alpha.image_len());
        for row in 0..base.values.rows() {
            let pinned = !img.contains(&row) || !self.alpha.claimed[row - img.start];
            if !pinned {
                continue;
            }
            let same = base
                .values
                .row(row)
                .iter()
                .zip(blended.row(row))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Contract(format!(
                    "row {row} of block {} {:?} {:?} changed outside the priors",
                    base.block, base.sublayer, base.stream
                )));
            }
            self.stats.pinned_rows_checked += 1;
        }
        Ok(())
    }
}

impl ResidualHook for BlendHook<'_> {
    fn begin_step(&mut self, step: usize, t: f64) -> Result<()> {
        self.step = step;
        self.open = self.blend.gate_open(t);
        self.stats.steps += 1;
        self.stats.schedule.push(StepGate {
            step,
            t,
            open: self.open,
        });
        if self.open {
            self.stats.gated_steps += 1;
            self.stats.adapter_forwards += self.adapters.len();
        }
        Ok(())
    }

    fn on_site(&mut self, site: &Site<'_>, records: &mut [ResidualRecord]) -> Result<()> {
        if !self.open {
            return Ok(());
        }
        let cfg = self.cfg;
        let per_adapter: Vec<Vec<ResidualRecord>> = self
            .adapters
            .par_iter()
            .map(|w| site_residuals(&cfg, w, site, None))
            .collect::<Result<_>>()?;
        for (j, rec) in records.iter_mut().enumerate() {
            let fs: Vec<&ResidualRecord> = per_adapter.iter().map(|recs| &recs[j]).collect();
            let blended = blend_residual(rec, &fs, &self.alpha, cfg.prompt_len)?;
            self.check_pinned(rec, &blended)?;
            if let Some(obs) = self.observer.as_deref_mut() {
                obs.observe(self.step, rec, &blended)?;
            }
            rec.values = blended;
            self.stats.blended_records += 1;
        }
        Ok(())
    }
}

/// Result of a blended sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendRun {
    pub latent: FeatureMatrix,
    pub stats: BlendStats,
}

/// Denoises `z1` with the base model, substituting adapter residuals inside
/// the priors whenever the gate is open.
pub fn blended_denoise(
    model: &Model,
    prompt: &PromptState,
    z1: &FeatureMatrix,
    steps: usize,
    adapters: &[AdapterBundle],
    priors: &[BinaryPrior],
    blend: BlendConfig,
) -> Result<BlendRun> {
    let mut hook = BlendHook::new(model, adapters, priors, blend)?;
    let latent = model.flow_denoise(z1, prompt, steps, &mut hook)?;
    Ok(BlendRun {
        latent,
        stats: hook.into_stats(),
    })
}
