//! End-to-end generation and editing.

use crate::blend::{blended_denoise, BlendConfig, BlendStats};
use crate::error::{Error, Result};
use crate::lora::AdapterBundle;
use crate::mmdit::{Model, NoHook, PromptState};
use crate::prior::{extract_priors, PriorExtraction, PriorParams, SubjectSpec};
use crate::tensor::FeatureMatrix;

/// Everything a run needs besides the model, prompt and starting latent.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub subjects: &'a [SubjectSpec],
    pub adapters: &'a [AdapterBundle],
    pub prior: PriorParams,
    pub blend: BlendConfig,
    pub steps: usize,
}

impl RunSpec<'_> {
    fn check(&self, model: &Model) -> Result<()> {
        if self.subjects.len() != self.adapters.len() {
            return Err(Error::param(format!(
                "{} subjects but {} adapters",
                self.subjects.len(),
                self.adapters.len()
            )));
        }
        for a in self.adapters {
            let bad = a.incompatible_layers(model.weights());
            if !bad.is_empty() {
                return Err(Error::Compatibility { layers: bad });
            }
        }
        self.prior.validate()?;
        self.blend.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub latent: FeatureMatrix,
    pub extraction: PriorExtraction,
    pub stats: BlendStats,
}

/// Priors from `z1`, then a blended denoise of the same `z1`.
pub fn generate(model: &Model, prompt: &PromptState, z1: &FeatureMatrix, spec: &RunSpec<'_>) -> Result<Generation> {
    spec.check(model)?;
    let extraction = extract_priors(model, prompt, spec.subjects, &spec.prior, z1, spec.steps)?;
    let run = blended_denoise(
        model,
        prompt,
        z1,
        spec.steps,
        spec.adapters,
        &extraction.priors,
        spec.blend,
    )?;
    Ok(Generation {
        latent: run.latent,
        extraction,
        stats: run.stats,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edit {
    pub latent: FeatureMatrix,
    /// `z1` recovered by inverting the input.
    pub recovered_noise: FeatureMatrix,
    /// RMS of `denoise(invert(z0)) − z0` under the base model.
    pub round_trip_rms: f64,
    pub extraction: PriorExtraction,
    pub stats: BlendStats,
}

/// Inverts `z0` to noise and regenerates it with the adapters blended in.
pub fn edit(model: &Model, prompt: &PromptState, z0: &FeatureMatrix, spec: &RunSpec<'_>) -> Result<Edit> {
    spec.check(model)?;
    let z1 = model.flow_invert(z0, prompt, spec.steps)?;
    let back = model.flow_denoise(&z1, prompt, spec.steps, &mut NoHook)?;
    let round_trip_rms = back.sub(z0)?.rms();
    let g = generate(model, prompt, &z1, spec)?;
    Ok(Edit {
        latent: g.latent,
        recovered_noise: z1,
        round_trip_rms,
        extraction: g.extraction,
        stats: g.stats,
    })
}
