//! The `report.json` written by every command.
//!
//! Reports carry no wall-clock data unless `--timings` is given, so two runs
//! with the same inputs produce identical reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use lorashop::blend::{BlendStats, StepGate};
use lorashop::prior::PriorExtraction;
use lorashop::selftest::SuiteResult;

use crate::config::{ModelSection, Params, PipelineConfig};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub status: &'static str,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigEcho>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_checksum: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub priors: Option<PriorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blend: Option<BlendReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selftest: Option<Vec<SuiteReport>>,
    pub warnings: Vec<String>,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            status: "ok",
            exit_code: 0,
            error: None,
            config: None,
            model_checksum: None,
            priors: None,
            blend: None,
            latent: None,
            edit: None,
            selftest: None,
            warnings: Vec::new(),
            outputs: BTreeMap::new(),
            timings_ms: None,
        }
    }

    pub fn fail(&mut self, code: i32, message: String) {
        self.status = "error";
        self.exit_code = code;
        self.error = Some(message);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serialisable");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_FILE), self.to_json())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubjectEcho {
    pub name: String,
    pub tokens: Vec<usize>,
    pub adapter: String,
}

/// The effective configuration after overrides, minus the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub prompt_seed: u64,
    pub steps: usize,
    pub model: ModelSection,
    pub params: Params,
    pub subjects: Vec<SubjectEcho>,
}

impl From<&PipelineConfig> for ConfigEcho {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            seed: c.seed,
            prompt_seed: c.prompt_seed,
            steps: c.steps,
            model: c.model.clone(),
            params: c.params,
            subjects: c
                .subjects
                .iter()
                .map(|s| SubjectEcho {
                    name: s.name.clone(),
                    tokens: s.tokens.clone(),
                    adapter: s.adapter.display().to_string(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubjectPrior {
    pub name: String,
    pub claimed_tokens: usize,
    pub claimed_fraction: f64,
    /// Super-threshold components of the smoothed blob.
    pub components: usize,
    pub passes: usize,
    pub converged: bool,
    pub mask_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PriorReport {
    pub capture_block: usize,
    pub capture_step: usize,
    pub capture_time: f64,
    pub disjoint: bool,
    pub unclaimed_tokens: usize,
    pub subjects: Vec<SubjectPrior>,
}

impl PriorReport {
    pub fn new(x: &PriorExtraction, names: &[String], files: &[String]) -> Self {
        let cells = x.priors.first().map_or(0, |p| p.mask.data().len());
        let mut owners = vec![0usize; cells];
        for p in &x.priors {
            for (o, &m) in owners.iter_mut().zip(p.mask.data()) {
                *o += m as usize;
            }
        }
        Self {
            capture_block: x.capture_block,
            capture_step: x.capture_step,
            capture_time: x.capture_time,
            disjoint: owners.iter().all(|&o| o <= 1),
            unclaimed_tokens: owners.iter().filter(|&&o| o == 0).count(),
            subjects: x
                .priors
                .iter()
                .zip(&x.blobs)
                .zip(names.iter().zip(files))
                .map(|((p, b), (name, file))| SubjectPrior {
                    name: name.clone(),
                    claimed_tokens: p.mask.count(),
                    claimed_fraction: p.mask.count() as f64 / cells as f64,
                    components: b.components,
                    passes: b.passes,
                    converged: b.converged,
                    mask_file: file.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlendReport {
    pub schedule: Vec<GateEntry>,
    pub steps: usize,
    pub gated_steps: usize,
    pub base_forwards: usize,
    pub adapter_forwards: usize,
    pub blended_records: usize,
    /// Prompt and unclaimed rows verified bit-identical to the base residual.
    pub pinned_rows_checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GateEntry {
    pub step: usize,
    pub t: f64,
    pub open: bool,
}

impl From<&StepGate> for GateEntry {
    fn from(g: &StepGate) -> Self {
        Self {
            step: g.step,
            t: g.t,
            open: g.open,
        }
    }
}

impl From<&BlendStats> for BlendReport {
    fn from(s: &BlendStats) -> Self {
        Self {
            schedule: s.schedule.iter().map(GateEntry::from).collect(),
            steps: s.steps,
            gated_steps: s.gated_steps,
            base_forwards: s.steps,
            adapter_forwards: s.adapter_forwards,
            blended_records: s.blended_records,
            pinned_rows_checked: s.pinned_rows_checked,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatentReport {
    pub file: String,
    /// SHA-256 over the full-precision latent.
    pub checksum: String,
    pub rms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EditReport {
    pub input: String,
    pub round_trip_rms: f64,
    pub recovered_noise_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub invariant: String,
    pub cases: usize,
    pub failures: usize,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl From<&SuiteResult> for SuiteReport {
    fn from(r: &SuiteResult) -> Self {
        Self {
            name: r.name.to_string(),
            invariant: r.invariant.to_string(),
            cases: r.cases,
            failures: r.failures,
            passed: r.passed(),
            first_failure: r.first_failure.clone(),
        }
    }
}
