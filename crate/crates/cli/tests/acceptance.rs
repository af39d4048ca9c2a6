//! Acceptance suite. Each criterion prints one PASS/FAIL line; run with
//! `cargo test -p lorashop-cli --test acceptance -- --nocapture` to see them.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lorashop::blend::{alpha_weights, blend_residual, blended_denoise, BlendConfig, BlendHook, BlendObserver};
use lorashop::io::matrix_checksum;
use lorashop::lora::{apply_adapter, default_targets, load_adapter, merge_weights, AdapterBundle, LoraDelta};
use lorashop::mmdit::{
    seeded_noise, Model, ModelConfig, NoHook, PromptState, ResidualRecord, Stream, Sublayer,
};
use lorashop::oracle;
use lorashop::prior::{
    argmax_partition, binarize, extract_priors, homogeneous_blob, BinaryPrior, PriorParams, SubjectSpec,
};
use lorashop::rng::SeededStream;
use lorashop::tensor::{BinaryGrid, FeatureMatrix, Grid2D};
use lorashop::Result as CoreResult;
use lorashop_cli::config::{Overrides, PipelineConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn shipped_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_subjects.toml")
}

struct Shipped {
    cfg: PipelineConfig,
    model: Model,
    prompt: PromptState,
    z1: FeatureMatrix,
    subjects: Vec<SubjectSpec>,
    adapters: Vec<AdapterBundle>,
}

fn shipped() -> Shipped {
    let cfg = PipelineConfig::load(&shipped_config_path(), &Overrides::default()).unwrap();
    let mc = cfg.model.model_config();
    let model = Model::init(mc).unwrap();
    Shipped {
        prompt: PromptState::synthetic(&mc, cfg.prompt_seed),
        z1: seeded_noise(&mc, cfg.seed),
        subjects: cfg
            .subjects
            .iter()
            .map(|s| SubjectSpec {
                name: s.name.clone(),
                tokens: s.tokens.clone(),
                adapter: s.adapter.display().to_string(),
            })
            .collect(),
        adapters: cfg.subjects.iter().map(|s| load_adapter(&s.adapter).unwrap()).collect(),
        model,
        cfg,
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_tokens(s: &mut SeededStream, prompt_len: usize) -> Vec<usize> {
    let mut t: Vec<usize> = (0..prompt_len).filter(|_| s.unit() < 0.3).collect();
    if t.is_empty() {
        t.push(s.below(prompt_len));
    }
    t
}

fn partition_exactness() -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    for seed in 0..100u64 {
        let mc = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        let model = Model::init(mc).unwrap();
        let prompt = PromptState::synthetic(&mc, seed + 1000);
        let z1 = seeded_noise(&mc, seed + 2000);
        let mut s = SeededStream::new(seed, 7);
        for n in 1..=4 {
            let subjects: Vec<SubjectSpec> = (0..n)
                .map(|k| SubjectSpec {
                    name: format!("s{k}"),
                    tokens: random_tokens(&mut s, mc.prompt_len),
                    adapter: String::new(),
                })
                .collect();
            let x = extract_priors(&model, &prompt, &subjects, &PriorParams::default(), &z1, 16).unwrap();
            let maps: Vec<Grid2D> = x.blobs.iter().map(|b| b.map.clone()).collect();
            let parts = argmax_partition(&maps).unwrap();
            for c in 0..mc.image_tokens() {
                let owners: Vec<usize> = (0..n).filter(|&u| parts[u].mask.data()[c]).collect();
                ensure!(owners.len() == 1, "seed {seed} N={n} cell {c}: owners {owners:?}");
                let want = oracle::argmax_owner(&maps, c);
                ensure!(owners[0] == want, "seed {seed} N={n} cell {c}: {} vs oracle {want}", owners[0]);
            }
            runs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("{runs} runs over 100 seeds, N in 1..=4, {secs:.2} s"))
}

fn multi_bump(seed: u64) -> Grid2D {
    let mut s = SeededStream::new(seed, 1);
    let k = 2 + s.below(4);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..k)
        .map(|_| (s.uniform(0.0, 15.0), s.uniform(0.0, 15.0), s.uniform(0.3, 1.0), s.uniform(0.8, 2.5)))
        .collect();
    Grid2D::from_fn(16, 16, |y, x| {
        bumps
            .iter()
            .map(|&(cy, cx, a, w)| a * (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * w * w)).exp())
            .sum::<f64>()
            + 0.05 * s.unit()
    })
}

fn blob_guarantee() -> Outcome {
    let (mut converged, mut exhausted) = (0, 0);
    for seed in 0..200u64 {
        let params = PriorParams {
            max_passes: 1 + (seed as usize % 10),
            ..PriorParams::default()
        };
        let b = homogeneous_blob(&multi_bump(seed), &params).unwrap();
        let comps = oracle::flood_fill_count(&binarize(&b.map, params.tau).unwrap(), true);
        ensure!(comps == b.components, "seed {seed}: reported {} components, oracle {comps}", b.components);
        if b.converged {
            ensure!(b.passes <= params.max_passes, "seed {seed}: {} passes", b.passes);
            ensure!(comps <= 1, "seed {seed}: converged with {comps} components");
            converged += 1;
        } else {
            ensure!(b.passes == params.max_passes, "seed {seed}: unflagged early stop");
            exhausted += 1;
        }
    }
    Ok(format!("200 maps: {converged} converged with <= 1 component, {exhausted} flagged exhausted"))
}

fn random_record(s: &mut SeededStream, stream: Stream, rows: usize, cols: usize) -> ResidualRecord {
    ResidualRecord {
        block: 0,
        sublayer: Sublayer::Attention,
        stream,
        values: FeatureMatrix::from_fn(rows, cols, |_, _| s.normal()),
    }
}

fn blend_literal_equivalence() -> Outcome {
    let start = Instant::now();
    let mut s = SeededStream::new(42, 0);
    let mut unclaimed = 0;
    let mut overlapping = 0;
    for case in 0..1000 {
        let (h, w) = (1 + s.below(8), 1 + s.below(8));
        let img = h * w;
        let prompt_len = 1 + s.below(16);
        let cols = 1 + s.below(32);
        let n = 1 + s.below(4);
        let stream = [Stream::Image, Stream::Joint, Stream::Text][s.below(3)];
        let rows = match stream {
            Stream::Image => img,
            Stream::Text => prompt_len,
            Stream::Joint => prompt_len + img,
        };
        let density = s.uniform(0.05, 0.8);
        let masks: Vec<Vec<bool>> = (0..n).map(|_| (0..img).map(|_| s.unit() < density).collect()).collect();
        let priors: Vec<BinaryPrior> = masks
            .iter()
            .enumerate()
            .map(|(k, m)| BinaryPrior {
                subject: k,
                mask: BinaryGrid::from_vec(h, w, m.clone()).unwrap(),
            })
            .collect();
        unclaimed += (0..img).filter(|&p| masks.iter().all(|m| !m[p])).count();
        overlapping += (0..img).filter(|&p| masks.iter().filter(|m| m[p]).count() > 1).count();
        let eps = if case % 2 == 0 { 1e-6 } else { s.uniform(1e-9, 0.5) };
        let base = random_record(&mut s, stream, rows, cols);
        let adapters: Vec<ResidualRecord> = (0..n).map(|_| random_record(&mut s, stream, rows, cols)).collect();
        let refs: Vec<&ResidualRecord> = adapters.iter().collect();
        let alpha = alpha_weights(&priors, eps).unwrap();
        let got = blend_residual(&base, &refs, &alpha, prompt_len).unwrap();
        let mats: Vec<&FeatureMatrix> = adapters.iter().map(|r| &r.values).collect();
        let offset = stream.image_rows(prompt_len, img).start;
        let len = if stream == Stream::Text { 0 } else { img };
        let want = oracle::blend_rows(&base.values, &mats, &masks, offset, len, eps);
        ensure!(bits(got.data()) == bits(want.data()), "case {case} ({stream:?}, S={img}, C={cols}, N={n}) differs");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2} s");
    ensure!(unclaimed > 0 && overlapping > 0, "instances never exercised unclaimed or overlapping tokens");
    Ok(format!("1000 instances bit-exact, {secs:.2} s"))
}

struct RowAudit {
    prompt_len: usize,
    claimed: Vec<bool>,
    records: usize,
    pinned_rows: usize,
    changed_claimed: usize,
    violation: Option<String>,
}

impl BlendObserver for RowAudit {
    fn observe(&mut self, step: usize, base: &ResidualRecord, blended: &FeatureMatrix) -> CoreResult<()> {
        self.records += 1;
        let img = base.stream.image_rows(self.prompt_len, self.claimed.len());
        for row in 0..base.values.rows() {
            let same = bits(base.values.row(row)) == bits(blended.row(row));
            if img.contains(&row) && self.claimed[row - img.start] {
                self.changed_claimed += !same as usize;
            } else if same {
                self.pinned_rows += 1;
            } else if self.violation.is_none() {
                self.violation = Some(format!(
                    "step {step} block {} {:?} {:?} row {row}",
                    base.block, base.sublayer, base.stream
                ));
            }
        }
        Ok(())
    }
}

fn branch_coverage() -> Outcome {
    let sh = shipped();
    let priors = extract_priors(&sh.model, &sh.prompt, &sh.subjects, &sh.cfg.params.prior(), &sh.z1, sh.cfg.steps)
        .unwrap()
        .priors;
    let img = sh.model.config().image_tokens();
    let claimed: Vec<bool> = (0..img).map(|c| priors.iter().any(|p| p.mask.data()[c])).collect();
    let n_claimed = claimed.iter().filter(|&&c| c).count();
    ensure!(n_claimed > 0 && n_claimed < img, "run has {n_claimed} claimed tokens; both branches needed");
    let mut audit = RowAudit {
        prompt_len: sh.model.config().prompt_len,
        claimed,
        records: 0,
        pinned_rows: 0,
        changed_claimed: 0,
        violation: None,
    };
    let mut hook = BlendHook::new(&sh.model, &sh.adapters, &priors, sh.cfg.params.blend())
        .unwrap()
        .with_observer(&mut audit);
    sh.model.flow_denoise(&sh.z1, &sh.prompt, sh.cfg.steps, &mut hook).unwrap();
    let stats = hook.into_stats();
    if let Some(v) = audit.violation {
        return Err(format!("base row changed at {v}"));
    }
    ensure!(audit.records == stats.blended_records && audit.records > 0, "observer saw {} records", audit.records);
    ensure!(audit.changed_claimed > 0, "no claimed row was ever blended");
    Ok(format!(
        "{} records over {} gated steps, {} pinned rows identical",
        audit.records, stats.gated_steps, audit.pinned_rows
    ))
}

fn gate_fidelity() -> Outcome {
    let sh = shipped();
    let priors = extract_priors(&sh.model, &sh.prompt, &sh.subjects, &sh.cfg.params.prior(), &sh.z1, 16)
        .unwrap()
        .priors;
    let b = BlendConfig {
        t: 0.90,
        ..sh.cfg.params.blend()
    };
    let run = blended_denoise(&sh.model, &sh.prompt, &sh.z1, 16, &sh.adapters, &priors, b).unwrap();
    let mut open = 0;
    for g in &run.stats.schedule {
        ensure!(g.open == (g.t <= 0.90), "step {} at t={} has gate {}", g.step, g.t, g.open);
        open += g.open as usize;
    }
    ensure!(run.stats.schedule.len() == 16, "{} scheduled steps", run.stats.schedule.len());
    ensure!(
        run.stats.adapter_forwards == open * sh.adapters.len(),
        "{} adapter forwards for {open} open steps",
        run.stats.adapter_forwards
    );
    let golden = matrix_checksum(&sh.model.flow_denoise(&sh.z1, &sh.prompt, 16, &mut NoHook).unwrap());
    let closed = BlendConfig { t: 0.0, ..b };
    let run0 = blended_denoise(&sh.model, &sh.prompt, &sh.z1, 16, &sh.adapters, &priors, closed).unwrap();
    ensure!(run0.stats.adapter_forwards == 0, "t=0 ran {} adapter forwards", run0.stats.adapter_forwards);
    let got = matrix_checksum(&run0.latent);
    ensure!(got == golden, "t=0 checksum {got} vs golden {golden}");
    Ok(format!("{open}/16 steps open, {} adapter forwards; t=0 checksum matches golden", run.stats.adapter_forwards))
}

fn lora_algebra() -> Outcome {
    for seed in 0..100u64 {
        let mut s = SeededStream::new(seed, 9);
        let (d, k) = (2 + s.below(40), 2 + s.below(40));
        let r = 1 + s.below(d.min(k).min(8));
        let w0 = FeatureMatrix::from_fn(d, k, |_, _| s.normal());
        let a = FeatureMatrix::from_fn(r, k, |_, _| s.normal());
        let b = FeatureMatrix::from_fn(d, r, |_, _| s.normal());
        let delta = LoraDelta::new("w", a, b, s.uniform(0.1, 3.0)).unwrap();
        let diff = merge_weights(&w0, &delta).unwrap().sub(&w0).unwrap();
        let rank = oracle::numerical_rank(&diff, 1e-8);
        ensure!(rank <= r, "seed {seed}: rank {rank} exceeds r={r}");
    }
    let mc = ModelConfig::default();
    let model = Model::init(mc).unwrap();
    let prompt = PromptState::synthetic(&mc, 1);
    let z1 = seeded_noise(&mc, 2);
    let zero = AdapterBundle::synthetic(&mc, "z", 3, 4, &default_targets(&mc), 1.0).unwrap().zeroed();
    let adapted = apply_adapter(&model, &zero).unwrap();
    let base = model.flow_denoise(&z1, &prompt, 16, &mut NoHook).unwrap();
    let with = adapted.flow_denoise(&z1, &prompt, 16, &mut NoHook).unwrap();
    ensure!(bits(base.data()) == bits(with.data()), "zero-delta adapter run differs from base");
    Ok("100 deltas within rank r; zero-delta adapter run bitwise equal to base".into())
}

fn shipped_defaults() -> Outcome {
    let sh = shipped();
    let p = &sh.cfg.params;
    ensure!(p.t == 0.90 && p.gamma == 0.94 && p.tau == 0.7, "t={} gamma={} tau={}", p.t, p.gamma, p.tau);
    let d = sh.model.config().double_blocks;
    let x = extract_priors(&sh.model, &sh.prompt, &sh.subjects, &p.prior(), &sh.z1, sh.cfg.steps).unwrap();
    ensure!(x.capture_block == d - 1, "captured at block {} of {d}", x.capture_block);
    Ok(format!("t=0.90, gamma=0.94, tau=0.7, capture block {} of {d}", x.capture_block))
}

fn inversion_sweep() -> Outcome {
    const THRESHOLDS: [(usize, f64); 4] = [(4, 2.0e-2), (8, 1.0e-2), (16, 5.0e-3), (32, 2.5e-3)];
    let mc = ModelConfig::default();
    let model = Model::init(mc).unwrap();
    let prompt = PromptState::synthetic(&mc, 1);
    let z0 = model.flow_denoise(&seeded_noise(&mc, 2), &prompt, 64, &mut NoHook).unwrap();
    let mut errs = Vec::new();
    for (steps, limit) in THRESHOLDS {
        let z1 = model.flow_invert(&z0, &prompt, steps).unwrap();
        let err = model.flow_denoise(&z1, &prompt, steps, &mut NoHook).unwrap().sub(&z0).unwrap().rms();
        ensure!(err <= limit, "{steps} steps: rms {err:.3e} above {limit:.1e}");
        errs.push(err);
    }
    ensure!(errs.windows(2).all(|w| w[1] < w[0]), "not monotone: {errs:?}");
    let shown: Vec<String> = errs.iter().map(|e| format!("{e:.2e}")).collect();
    Ok(format!("rms over 4/8/16/32 steps: {}", shown.join(", ")))
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
    }
    out
}

fn cli(threads: usize, args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lorashop"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = shipped_config_path();
    let config = config.to_str().unwrap();
    let input = tmp.path().join("input.f32");
    let seed_dir = tmp.path().join("seed");
    cli(1, &["gen", "--config", config, "--out", seed_dir.to_str().unwrap()])?;
    std::fs::copy(seed_dir.join("latent.f32"), &input).unwrap();
    let input = input.to_str().unwrap();

    let commands: [(&str, Vec<&str>); 5] = [
        ("prior", vec!["prior", "--config", config]),
        ("gen", vec!["gen", "--config", config]),
        ("edit", vec!["edit", "--config", config, "--input", input]),
        ("selftest", vec!["selftest"]),
        ("synth-adapter", vec!["synth-adapter", "--name", "probe", "--seed", "5"]),
    ];
    let mut files = 0;
    for (name, args) in &commands {
        let mut trees = Vec::new();
        for (run, threads) in [(0, 1), (1, 1), (2, 4), (3, 4)] {
            let out = tmp.path().join(format!("{name}-{run}"));
            let mut full = args.clone();
            full.extend(["--out", out.to_str().unwrap()]);
            cli(threads, &full)?;
            trees.push(read_tree(&out));
        }
        ensure!(trees[0].contains_key("report.json"), "{name} wrote no report");
        for (i, t) in trees.iter().enumerate().skip(1) {
            ensure!(t == &trees[0], "{name}: run {i} output differs from run 0");
        }
        files += trees[0].len();
    }
    Ok(format!("5 commands x 4 runs (1 and 4 threads), {files} files byte-identical"))
}

fn cube_invariance() -> Outcome {
    let mut s = SeededStream::new(77, 0);
    for case in 0..100 {
        let n = 1 + s.below(4);
        let (h, w) = (4 + s.below(13), 4 + s.below(13));
        let maps: Vec<Grid2D> = (0..n)
            .map(|_| {
                let g = Grid2D::from_fn(h, w, |_, _| s.unit());
                lorashop::tensor::renorm(&g)
            })
            .collect();
        let cubed: Vec<Grid2D> = maps.iter().map(|m| m.map(|v| v * v * v)).collect();
        let a = argmax_partition(&maps).unwrap();
        let b = argmax_partition(&cubed).unwrap();
        ensure!(a == b, "case {case}: partition changed under cubing");
    }
    Ok("100 instances unchanged under x -> x^3".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("partition exactness", partition_exactness),
        ("blob guarantee", blob_guarantee),
        ("literal blending equivalence", blend_literal_equivalence),
        ("blend branch coverage", branch_coverage),
        ("gate fidelity", gate_fidelity),
        ("lora algebra", lora_algebra),
        ("shipped defaults", shipped_defaults),
        ("inversion sweep", inversion_sweep),
        ("determinism", determinism),
        ("monotone relabel invariance", cube_invariance),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
