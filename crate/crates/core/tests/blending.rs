use lorashop::blend::{blended_denoise, BlendConfig, BlendHook, BlendObserver};
use lorashop::lora::{merged_weights, default_targets, AdapterBundle};
use lorashop::mmdit::{
    seeded_noise, site_residuals, Model, ModelConfig, NoHook, PromptState, ResidualHook, ResidualRecord, Site,
    Weights,
};
use lorashop::pipeline::{edit, generate, RunSpec};
use lorashop::prior::{extract_priors, BinaryPrior, PriorParams, SubjectSpec};
use lorashop::tensor::{BinaryGrid, FeatureMatrix};
use lorashop::Result;

fn bits(m: &[f64]) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

struct Fixture {
    model: Model,
    prompt: PromptState,
    z1: FeatureMatrix,
    subjects: Vec<SubjectSpec>,
    adapters: Vec<AdapterBundle>,
}

fn fixture() -> Fixture {
    let cfg = ModelConfig::default();
    let model = Model::init(cfg).unwrap();
    let targets = default_targets(&cfg);
    Fixture {
        prompt: PromptState::synthetic(&cfg, 1),
        z1: seeded_noise(&cfg, 2),
        subjects: vec![
            SubjectSpec {
                name: "cat".into(),
                tokens: vec![1, 2],
                adapter: "cat".into(),
            },
            SubjectSpec {
                name: "hat".into(),
                tokens: vec![5, 6],
                adapter: "hat".into(),
            },
        ],
        adapters: vec![
            AdapterBundle::synthetic(&cfg, "cat", 11, 4, &targets, 0.5).unwrap(),
            AdapterBundle::synthetic(&cfg, "hat", 12, 4, &targets, 0.5).unwrap(),
        ],
        model,
    }
}

fn priors(f: &Fixture) -> Vec<BinaryPrior> {
    extract_priors(&f.model, &f.prompt, &f.subjects, &PriorParams::default(), &f.z1, 16)
        .unwrap()
        .priors
}

fn claimed(priors: &[BinaryPrior]) -> Vec<bool> {
    (0..priors[0].mask.data().len())
        .map(|c| priors.iter().any(|p| p.mask.data()[c]))
        .collect()
}

/// Independently checks the prompt and background rows of every blended record
/// and counts claimed rows that actually changed.
struct RowAudit {
    prompt_len: usize,
    claimed: Vec<bool>,
    steps_seen: Vec<usize>,
    pinned_rows: usize,
    changed_claimed_rows: usize,
}

impl BlendObserver for RowAudit {
    fn observe(&mut self, step: usize, base: &ResidualRecord, blended: &FeatureMatrix) -> Result<()> {
        if self.steps_seen.last() != Some(&step) {
            self.steps_seen.push(step);
        }
        let img = base.stream.image_rows(self.prompt_len, self.claimed.len());
        for row in 0..base.values.rows() {
            let same = bits(base.values.row(row)) == bits(blended.row(row));
            let is_claimed = img.contains(&row) && self.claimed[row - img.start];
            if is_claimed {
                self.changed_claimed_rows += !same as usize;
            } else {
                assert!(same, "step {step} block {} {:?} row {row}", base.block, base.stream);
                self.pinned_rows += 1;
            }
        }
        Ok(())
    }
}

#[test]
fn prompt_and_background_rows_keep_base_residuals_throughout_a_run() {
    let f = fixture();
    let pr = priors(&f);
    let cl = claimed(&pr);
    assert!(cl.iter().any(|&c| c) && cl.iter().any(|&c| !c));
    let mut audit = RowAudit {
        prompt_len: f.model.config().prompt_len,
        claimed: cl,
        steps_seen: Vec::new(),
        pinned_rows: 0,
        changed_claimed_rows: 0,
    };
    let mut hook = BlendHook::new(&f.model, &f.adapters, &pr, BlendConfig::default())
        .unwrap()
        .with_observer(&mut audit);
    f.model.flow_denoise(&f.z1, &f.prompt, 16, &mut hook).unwrap();
    let stats = hook.into_stats();
    assert_eq!(audit.steps_seen, (2..16).collect::<Vec<_>>());
    assert_eq!(audit.pinned_rows, stats.pinned_rows_checked);
    assert!(audit.changed_claimed_rows > 0);
    let cfg = f.model.config();
    assert_eq!(stats.blended_records, 14 * (4 * cfg.double_blocks + 2 * cfg.single_blocks));
}

#[test]
fn gate_controls_adapter_forwards() {
    let f = fixture();
    let pr = priors(&f);
    let run = blended_denoise(&f.model, &f.prompt, &f.z1, 16, &f.adapters, &pr, BlendConfig::default()).unwrap();
    let open: Vec<bool> = run.stats.schedule.iter().map(|g| g.open).collect();
    for g in &run.stats.schedule {
        assert_eq!(g.open, g.t <= 0.90, "step {}", g.step);
    }
    assert_eq!(open.iter().filter(|&&o| o).count(), 14);
    assert_eq!(run.stats.adapter_forwards, 2 * 14);
}

#[test]
fn closed_gate_reproduces_the_base_run() {
    let f = fixture();
    let pr = priors(&f);
    let closed = BlendConfig {
        t: 0.0,
        ..BlendConfig::default()
    };
    let run = blended_denoise(&f.model, &f.prompt, &f.z1, 16, &f.adapters, &pr, closed).unwrap();
    let base = f.model.flow_denoise(&f.z1, &f.prompt, 16, &mut NoHook).unwrap();
    assert_eq!(bits(run.latent.data()), bits(base.data()));
    assert_eq!(run.stats.adapter_forwards, 0);
    assert_eq!(run.stats.blended_records, 0);
}

#[test]
fn zero_delta_adapter_stays_within_epsilon_of_base() {
    let f = fixture();
    let zero = [f.adapters[0].zeroed()];
    let all = [BinaryPrior {
        subject: 0,
        mask: BinaryGrid::full(8, 8),
    }];
    let base = f.model.flow_denoise(&f.z1, &f.prompt, 16, &mut NoHook).unwrap();
    let run = blended_denoise(&f.model, &f.prompt, &f.z1, 16, &zero, &all, BlendConfig::default()).unwrap();
    let d = run.latent.sub(&base).unwrap().max_abs();
    assert!(d > 0.0 && d < 1e-5, "deviation {d:e}");

    // Once ε is below half an ulp of one, α rounds to exactly 1.
    let exact = BlendConfig {
        epsilon: 1e-20,
        ..BlendConfig::default()
    };
    let run = blended_denoise(&f.model, &f.prompt, &f.z1, 16, &zero, &all, exact).unwrap();
    assert_eq!(bits(run.latent.data()), bits(base.data()));
}

/// Replaces image-token residuals with those of merged weights evaluated on the
/// same inputs; prompt residuals stay base.
struct MergedImageRows {
    cfg: ModelConfig,
    merged: Weights,
}

impl ResidualHook for MergedImageRows {
    fn on_site(&mut self, site: &Site<'_>, records: &mut [ResidualRecord]) -> Result<()> {
        let adapted = site_residuals(&self.cfg, &self.merged, site, None)?;
        for (r, a) in records.iter_mut().zip(adapted) {
            for row in r.stream.image_rows(self.cfg.prompt_len, self.cfg.image_tokens()) {
                r.values.row_mut(row).copy_from_slice(a.values.row(row));
            }
        }
        Ok(())
    }
}

#[test]
fn full_prior_single_adapter_equals_merged_image_residuals() {
    let f = fixture();
    let cfg = *f.model.config();
    let all = [BinaryPrior {
        subject: 0,
        mask: BinaryGrid::full(8, 8),
    }];
    let mut harness = MergedImageRows {
        cfg,
        merged: merged_weights(&f.model, &f.adapters[0]).unwrap(),
    };
    let want = f.model.flow_denoise(&f.z1, &f.prompt, 16, &mut harness).unwrap();
    let exact = BlendConfig { t: 1.0, epsilon: 1e-20 };
    let got = blended_denoise(&f.model, &f.prompt, &f.z1, 16, &f.adapters[..1], &all, exact).unwrap();
    assert_eq!(bits(got.latent.data()), bits(want.data()));
    let loose = BlendConfig { t: 1.0, ..BlendConfig::default() };
    let got = blended_denoise(&f.model, &f.prompt, &f.z1, 16, &f.adapters[..1], &all, loose).unwrap();
    assert!(got.latent.sub(&want).unwrap().max_abs() < 1e-5);
}

#[test]
fn identical_bundles_match_one_bundle_on_the_union() {
    let f = fixture();
    let pr = priors(&f);
    let same = [f.adapters[0].clone(), f.adapters[0].clone()];
    let union = [BinaryPrior {
        subject: 0,
        mask: BinaryGrid::from_vec(8, 8, claimed(&pr)).unwrap(),
    }];
    let b = BlendConfig::default();
    let two = blended_denoise(&f.model, &f.prompt, &f.z1, 16, &same, &pr, b).unwrap();
    let one = blended_denoise(&f.model, &f.prompt, &f.z1, 16, &same[..1], &union, b).unwrap();
    assert_eq!(bits(two.latent.data()), bits(one.latent.data()));
}

/// Runs the full blend and, on the same pinned inputs, the blend without
/// subject `drop`; rows may differ only where that subject's prior is set.
struct Independence<'a> {
    full: BlendHook<'a>,
    reduced: BlendHook<'a>,
    prompt_len: usize,
    dropped: Vec<bool>,
    differing_rows: usize,
}

impl ResidualHook for Independence<'_> {
    fn begin_step(&mut self, step: usize, t: f64) -> Result<()> {
        self.full.begin_step(step, t)?;
        self.reduced.begin_step(step, t)
    }

    fn on_site(&mut self, site: &Site<'_>, records: &mut [ResidualRecord]) -> Result<()> {
        let mut reduced = records.to_vec();
        self.reduced.on_site(site, &mut reduced)?;
        self.full.on_site(site, records)?;
        for (a, b) in records.iter().zip(&reduced) {
            let img = a.stream.image_rows(self.prompt_len, self.dropped.len());
            for row in 0..a.values.rows() {
                if bits(a.values.row(row)) == bits(b.values.row(row)) {
                    continue;
                }
                assert!(
                    img.contains(&row) && self.dropped[row - img.start],
                    "block {} {:?} row {row} changed outside the dropped prior",
                    a.block,
                    a.stream
                );
                self.differing_rows += 1;
            }
        }
        Ok(())
    }
}

#[test]
fn removing_a_subject_only_affects_its_own_tokens() {
    let f = fixture();
    let pr = priors(&f);
    for drop in 0..2 {
        let keep = 1 - drop;
        let reduced_prior = [BinaryPrior {
            subject: 0,
            mask: pr[keep].mask.clone(),
        }];
        let b = BlendConfig::default();
        let mut hook = Independence {
            full: BlendHook::new(&f.model, &f.adapters, &pr, b).unwrap(),
            reduced: BlendHook::new(&f.model, &f.adapters[keep..=keep], &reduced_prior, b).unwrap(),
            prompt_len: f.model.config().prompt_len,
            dropped: pr[drop].mask.data().to_vec(),
            differing_rows: 0,
        };
        f.model.flow_denoise(&f.z1, &f.prompt, 16, &mut hook).unwrap();
        assert!(hook.differing_rows > 0);
    }
}

#[test]
fn blended_runs_are_identical_at_any_thread_count() {
    let f = fixture();
    let pr = priors(&f);
    let go = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| blended_denoise(&f.model, &f.prompt, &f.z1, 16, &f.adapters, &pr, BlendConfig::default()))
            .unwrap()
    };
    let a = go(1);
    let b = go(4);
    assert_eq!(bits(a.latent.data()), bits(b.latent.data()));
    assert_eq!(a.stats, b.stats);
}

#[test]
fn no_adapters_is_rejected() {
    let f = fixture();
    assert!(blended_denoise(&f.model, &f.prompt, &f.z1, 16, &[], &[], BlendConfig::default()).is_err());
    let pr = priors(&f);
    assert!(blended_denoise(&f.model, &f.prompt, &f.z1, 16, &f.adapters[..1], &pr, BlendConfig::default()).is_err());
}

#[test]
fn generation_and_edit_pipelines() {
    let f = fixture();
    let spec = RunSpec {
        subjects: &f.subjects,
        adapters: &f.adapters,
        prior: PriorParams::default(),
        blend: BlendConfig::default(),
        steps: 16,
    };
    let g = generate(&f.model, &f.prompt, &f.z1, &spec).unwrap();
    let base = f.model.flow_denoise(&f.z1, &f.prompt, 16, &mut NoHook).unwrap();
    assert_ne!(g.latent, base);
    assert_eq!(g.stats.adapter_forwards, 28);

    let e = edit(&f.model, &f.prompt, &g.latent, &spec).unwrap();
    assert!(e.round_trip_rms < 5.0e-3, "{}", e.round_trip_rms);
    assert_eq!(e, edit(&f.model, &f.prompt, &g.latent, &spec).unwrap());

    let zero: Vec<AdapterBundle> = f.adapters.iter().map(AdapterBundle::zeroed).collect();
    let zspec = RunSpec {
        adapters: &zero,
        blend: BlendConfig {
            epsilon: 1e-20,
            ..BlendConfig::default()
        },
        ..spec.clone()
    };
    let ze = edit(&f.model, &f.prompt, &g.latent, &zspec).unwrap();
    let recon = f.model.flow_denoise(&ze.recovered_noise, &f.prompt, 16, &mut NoHook).unwrap();
    assert_eq!(bits(ze.latent.data()), bits(recon.data()));
}
