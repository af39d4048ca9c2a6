//! Per-subject spatial priors from cross-attention at the last double-stream block.
//!
//! A short pseudo-denoising run stops at flow time `γ`, where the image queries
//! and text keys of the capture block are read. Each subject's attention map is
//! smoothed into a single blob, the blobs compete cell by cell, and each
//! winner region is intersected with the winner's own `τ`-quantile mask.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{encode_grid_f32, encode_pgm};
use crate::mmdit::{denoise_time, euler, AttentionCapture, Model, NoHook, PromptState, Taps};
use crate::tensor::{
    connected_components, conv2d_same, morph_reconstruct, quantile, renorm, softmax_in_place, BinaryGrid,
    Connectivity, FeatureMatrix, GaussianKernel, Grid2D,
};

/// A subject named by a subset of prompt tokens and bound to an adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectSpec {
    pub name: String,
    pub tokens: Vec<usize>,
    pub adapter: String,
}

/// Hyperparameters of prior extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorParams {
    /// Flow time at which attention is read.
    pub gamma: f64,
    /// Binarisation quantile.
    pub tau: f64,
    pub kernel_size: usize,
    pub sigma: f64,
    pub max_passes: usize,
    /// Double-stream block to read; `None` means the last one.
    pub capture_block: Option<usize>,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            gamma: 0.94,
            tau: 0.7,
            kernel_size: 3,
            sigma: 1.0,
            max_passes: 10,
            capture_block: None,
        }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::param(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::param(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::param(format!("sigma {} must be positive", self.sigma)));
        }
        if self.max_passes < 1 {
            return Err(Error::param("max_passes must be at least 1"));
        }
        Ok(())
    }

    pub fn capture_block_for(&self, double_blocks: usize) -> Result<usize> {
        let b = self.capture_block.unwrap_or(double_blocks - 1);
        if b >= double_blocks {
            return Err(Error::param(format!(
                "capture block {b} is not a double-stream block (D = {double_blocks})"
            )));
        }
        Ok(b)
    }
}

/// One subject's claimed cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryPrior {
    pub subject: usize,
    pub mask: BinaryGrid,
}

/// Softmax of image queries over all text keys, summed over the subject's
/// token columns, averaged over heads, reshaped to the grid and renormalised.
pub fn attention_map(capture: &AttentionCapture, tokens: &[usize], height: usize, width: usize) -> Result<Grid2D> {
    if tokens.is_empty() {
        return Err(Error::param("subject token set is empty"));
    }
    let heads = capture.image_queries.len();
    if heads == 0 || heads != capture.text_keys.len() {
        return Err(Error::shape(
            "attention_map",
            format!("{heads} query heads vs {} key heads", capture.text_keys.len()),
        ));
    }
    let s = capture.image_queries[0].rows();
    let t = capture.text_keys[0].rows();
    let d = capture.image_queries[0].cols();
    if s != height * width {
        return Err(Error::shape(
            "attention_map",
            format!("{s} image queries for a {height}x{width} grid"),
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&j| j >= t) {
        return Err(Error::param(format!("token index {bad} out of range for {t} prompt tokens")));
    }
    let inv = 1.0 / (d as f64).sqrt();
    let mut acc = vec![0.0; s];
    let mut row = vec![0.0; t];
    for (q, k) in capture.image_queries.iter().zip(&capture.text_keys) {
        if q.shape() != (s, d) || k.shape() != (t, d) {
            return Err(Error::shape("attention_map", "inconsistent head shapes"));
        }
        for (i, a) in acc.iter_mut().enumerate() {
            let qi = q.row(i);
            for (j, r) in row.iter_mut().enumerate() {
                let kj = k.row(j);
                let mut dot = 0.0;
                for e in 0..d {
                    dot += qi[e] * kj[e];
                }
                *r = dot * inv;
            }
            softmax_in_place(&mut row);
            let mut sel = 0.0;
            for &j in tokens {
                sel += row[j];
            }
            *a += sel;
        }
    }
    let inv_heads = 1.0 / heads as f64;
    let grid = Grid2D::from_vec(height, width, acc.into_iter().map(|v| v * inv_heads).collect())?;
    Ok(renorm(&grid))
}

/// Cells at or above the `τ`-quantile. Zero cells never count, so an all-zero
/// map yields an empty mask.
pub fn binarize(m: &Grid2D, tau: f64) -> Result<BinaryGrid> {
    let thr = quantile(m, tau)?;
    let data = m.data().iter().map(|&v| v > 0.0 && v >= thr).collect();
    BinaryGrid::from_vec(m.height(), m.width(), data)
}

/// Number of 8-connected components in `binarize(m, τ)`.
pub fn super_threshold_components(m: &Grid2D, tau: f64) -> Result<usize> {
    Ok(connected_components(&binarize(m, tau)?, Connectivity::Eight).count)
}

/// Outcome of blob homogenisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub map: Grid2D,
    /// Smoothing passes actually run.
    pub passes: usize,
    /// Whether the loop stopped because the super-threshold area became one
    /// component (false means every pass was used).
    pub converged: bool,
    /// Super-threshold components of the final map.
    pub components: usize,
}

/// Smooth until the super-threshold area is a single component (at most
/// `max_passes` times), then reconstruct from the global peak and renormalise.
pub fn homogeneous_blob(m: &Grid2D, params: &PriorParams) -> Result<Blob> {
    let kernel = GaussianKernel::new(params.kernel_size, params.sigma)?;
    homogeneous_blob_with(m, params, &kernel)
}

pub(crate) fn homogeneous_blob_with(m: &Grid2D, params: &PriorParams, kernel: &GaussianKernel) -> Result<Blob> {
    let mut cur = renorm(m);
    let mut passes = 0;
    let mut converged = false;
    for p in 1..=params.max_passes {
        cur = renorm(&conv2d_same(&cur, kernel)?);
        passes = p;
        if super_threshold_components(&cur, params.tau)? <= 1 {
            converged = true;
            break;
        }
    }
    let map = match cur.argmax() {
        Some(peak) if cur.data()[peak] > 0.0 => {
            let mut marker = Grid2D::zeros(cur.height(), cur.width());
            marker.set(peak / cur.width(), peak % cur.width(), cur.data()[peak]);
            renorm(&morph_reconstruct(&marker, &cur)?)
        }
        _ => Grid2D::zeros(cur.height(), cur.width()),
    };
    let components = super_threshold_components(&map, params.tau)?;
    Ok(Blob {
        map,
        passes,
        converged,
        components,
    })
}

/// Cell-wise winner over `maps` (lowest subject index on ties) as one-hot priors.
pub fn argmax_partition(maps: &[Grid2D]) -> Result<Vec<BinaryPrior>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::param("argmax_partition needs at least one map"))?;
    let (h, w) = first.shape();
    if let Some(bad) = maps.iter().find(|m| m.shape() != (h, w)) {
        return Err(Error::shape(
            "argmax_partition",
            format!("{:?} vs {:?}", bad.shape(), (h, w)),
        ));
    }
    let winners: Vec<usize> = (0..h * w)
        .map(|cell| {
            let mut best = 0;
            let mut best_v = maps[0].data()[cell];
            for (u, m) in maps.iter().enumerate().skip(1) {
                if m.data()[cell] > best_v {
                    best = u;
                    best_v = m.data()[cell];
                }
            }
            best
        })
        .collect();
    Ok((0..maps.len())
        .map(|u| BinaryPrior {
            subject: u,
            mask: BinaryGrid::from_vec(h, w, winners.iter().map(|&k| k == u).collect()).expect("shape"),
        })
        .collect())
}

/// Argmax winners restricted to each winner's own binarised blob.
pub fn compose_priors(blobs: &[Grid2D], tau: f64) -> Result<Vec<BinaryPrior>> {
    let winners = argmax_partition(blobs)?;
    winners
        .into_iter()
        .zip(blobs)
        .map(|(p, b)| {
            Ok(BinaryPrior {
                subject: p.subject,
                mask: p.mask.and(&binarize(b, tau)?),
            })
        })
        .collect()
}

/// Everything prior extraction produced, for reporting and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorExtraction {
    pub priors: Vec<BinaryPrior>,
    pub attention_maps: Vec<Grid2D>,
    pub blobs: Vec<Blob>,
    pub capture_block: usize,
    /// Denoising step whose forward pass supplied the attention.
    pub capture_step: usize,
    pub capture_time: f64,
}

impl PriorExtraction {
    /// Subjects whose smoothing loop used every pass without converging.
    pub fn exhausted(&self) -> Vec<usize> {
        self.blobs
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.converged)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Runs the base model from `z1` down the `steps`-point grid until the first
/// grid time `≤ γ`, reads attention there, and builds one prior per subject.
pub fn extract_priors(
    model: &Model,
    prompt: &PromptState,
    subjects: &[SubjectSpec],
    params: &PriorParams,
    z1: &FeatureMatrix,
    steps: usize,
) -> Result<PriorExtraction> {
    params.validate()?;
    if subjects.is_empty() {
        return Err(Error::param("at least one subject is required"));
    }
    if steps == 0 {
        return Err(Error::param("step count must be at least 1"));
    }
    let cfg = model.config();
    let block = params.capture_block_for(cfg.double_blocks)?;
    let dt = 1.0 / steps as f64;
    let mut z = z1.clone();
    let mut found = None;
    for i in 0..steps {
        let t = denoise_time(i, steps);
        if t <= params.gamma {
            let (_, out) = model.velocity_with(&z, t, prompt, &Taps::attention_at(block), &mut NoHook)?;
            let cap = out
                .captures
                .into_iter()
                .next()
                .ok_or_else(|| Error::Contract("attention capture missing".into()))?;
            found = Some((i, t, cap));
            break;
        }
        let v = model.velocity(&z, t, prompt)?;
        euler(&mut z, &v, -dt);
    }
    let (capture_step, capture_time, capture) = found.ok_or_else(|| {
        Error::param(format!(
            "gamma {} lies below every point of the {steps}-step grid",
            params.gamma
        ))
    })?;

    let mut attention_maps = Vec::with_capacity(subjects.len());
    let mut blobs = Vec::with_capacity(subjects.len());
    for s in subjects {
        let m = attention_map(&capture, &s.tokens, cfg.height, cfg.width)?;
        blobs.push(homogeneous_blob(&m, params)?);
        attention_maps.push(m);
    }
    let smoothed: Vec<Grid2D> = blobs.iter().map(|b| b.map.clone()).collect();
    let priors = compose_priors(&smoothed, params.tau)?;
    Ok(PriorExtraction {
        priors,
        attention_maps,
        blobs,
        capture_block: block,
        capture_step,
        capture_time,
    })
}

/// Writes `<stem>.pgm` (mask) and `<stem>.f32` (mask as 0/1 floats) plus
/// `<stem>_soft.f32` (smoothed blob) into `dir`.
pub fn write_prior_files(dir: &Path, stem: &str, prior: &BinaryPrior, blob: &Grid2D) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.pgm")), encode_pgm(&prior.mask))?;
    std::fs::write(dir.join(format!("{stem}.f32")), encode_grid_f32(&prior.mask.to_grid()))?;
    std::fs::write(dir.join(format!("{stem}_soft.f32")), encode_grid_f32(blob))?;
    Ok(())
}
