//! Command implementations. Every command writes `report.json`, also on failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use lorashop::io::{encode_grid_f32, encode_matrix_f32, encode_pgm, matrix_checksum, read_matrix_f32, sha256_hex};
use lorashop::lora::{default_targets, load_adapter, save_adapter, AdapterBundle};
use lorashop::mmdit::{seeded_noise, Model, ModelConfig, PromptState};
use lorashop::pipeline::{edit, generate, RunSpec};
use lorashop::prior::{extract_priors, PriorExtraction, SubjectSpec};
use lorashop::selftest::{run_selftest, Mutation};
use lorashop::tensor::FeatureMatrix;
use lorashop::Error;

use crate::config::{Overrides, PipelineConfig};
use crate::report::{BlendReport, ConfigEcho, EditReport, LatentReport, PriorReport, RunReport, SuiteReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// A failed command: exit code plus diagnostic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn invariant(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVARIANT,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Contract(_) | Error::Shape { .. } | Error::Precondition { .. } => EXIT_INVARIANT,
            Error::Parameter(_) | Error::Format { .. } | Error::Compatibility { .. } | Error::Io(_) => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn with_path(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        Failure {
            code: f.code,
            message: format!("{}: {}", path.display(), f.message),
        }
    }
}

/// Parameters of `synth-adapter`.
#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub name: String,
    pub seed: u64,
    pub rank: usize,
    pub gain: f64,
    pub zero: bool,
}

#[derive(Debug, Clone)]
pub enum Command {
    Prior,
    Gen,
    Edit { input: PathBuf },
    Selftest { mutate: Option<Mutation> },
    SynthAdapter(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prior => "prior",
            Command::Gen => "gen",
            Command::Edit { .. } => "edit",
            Command::Selftest { .. } => "selftest",
            Command::SynthAdapter(_) => "synth-adapter",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub timings: bool,
}

struct Run {
    report: RunReport,
    out_dir: PathBuf,
    timings: BTreeMap<String, f64>,
}

impl Run {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let v = f();
        self.timings
            .insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
        v
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Failure::config(format!("{}: {e}", self.out_dir.display())))?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        self.report.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

/// Runs one command and returns its exit code.
pub fn execute(inv: &Invocation) -> i32 {
    let mut run = Run {
        report: RunReport::new(inv.command.name()),
        out_dir: inv.overrides.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        timings: BTreeMap::new(),
    };
    let outcome = dispatch(inv, &mut run);
    if let Err(f) = &outcome {
        eprintln!("error: {}", f.message);
        run.report.fail(f.code, f.message.clone());
    }
    if inv.timings {
        run.report.timings_ms = Some(run.timings.clone());
    }
    if let Err(e) = run.report.write(&run.out_dir) {
        eprintln!("error: could not write report to {}: {e}", run.out_dir.display());
        if run.report.exit_code == EXIT_OK {
            return EXIT_CONFIG;
        }
    }
    run.report.exit_code
}

fn dispatch(inv: &Invocation, run: &mut Run) -> Result<(), Failure> {
    match &inv.command {
        Command::Selftest { mutate } => selftest(run, *mutate),
        Command::SynthAdapter(args) => {
            let cfg = load_config(inv, run, false)?;
            synth_adapter(run, &cfg, args)
        }
        Command::Prior => {
            let cfg = load_config(inv, run, true)?;
            let s = Setup::new(&cfg, run)?;
            prior(run, &cfg, &s)
        }
        Command::Gen => {
            let cfg = load_config(inv, run, true)?;
            let s = Setup::new(&cfg, run)?;
            gen(run, &cfg, &s)
        }
        Command::Edit { input } => {
            let cfg = load_config(inv, run, true)?;
            let s = Setup::new(&cfg, run)?;
            edit_cmd(run, &cfg, &s, input)
        }
    }
}

fn load_config(inv: &Invocation, run: &mut Run, required: bool) -> Result<PipelineConfig, Failure> {
    let cfg = match &inv.config {
        Some(path) => PipelineConfig::load(path, &inv.overrides).map_err(|e| Failure::config(e.to_string()))?,
        None if required => return Err(Failure::config("--config is required for this command")),
        None => {
            let mut c = PipelineConfig::parse("").expect("empty config parses");
            c.apply(&inv.overrides);
            c.validate().map_err(|e| Failure::config(e.to_string()))?;
            c
        }
    };
    run.out_dir = cfg.out_dir.clone();
    run.report.config = Some(ConfigEcho::from(&cfg));
    Ok(cfg)
}

struct Setup {
    model: Model,
    prompt: PromptState,
    subjects: Vec<SubjectSpec>,
    adapters: Vec<AdapterBundle>,
}

impl Setup {
    fn new(cfg: &PipelineConfig, run: &mut Run) -> Result<Self, Failure> {
        let model = match &cfg.model.checkpoint {
            Some(path) => {
                if !path.exists() {
                    return Err(Failure::config(format!("checkpoint file not found: {}", path.display())));
                }
                Model::load(path).map_err(with_path(path))?
            }
            None => Model::init(cfg.model.model_config())?,
        };
        run.report.model_checksum = Some(model.checksum());
        let mc = *model.config();
        if cfg.subjects.is_empty() {
            return Err(Failure::config("at least one [[subjects]] entry is required"));
        }
        cfg.params
            .prior()
            .capture_block_for(mc.double_blocks)
            .map_err(|e| Failure::config(e.to_string()))?;
        let mut subjects = Vec::new();
        let mut adapters = Vec::new();
        for s in &cfg.subjects {
            if let Some(&bad) = s.tokens.iter().find(|&&j| j >= mc.prompt_len) {
                return Err(Failure::config(format!(
                    "subject '{}': token {bad} out of range for {} prompt tokens",
                    s.name, mc.prompt_len
                )));
            }
            if !s.adapter.exists() {
                return Err(Failure::config(format!("adapter file not found: {}", s.adapter.display())));
            }
            let bundle = run
                .time(&format!("load_adapter.{}", s.name), || load_adapter(&s.adapter))
                .map_err(with_path(&s.adapter))?;
            let bad = bundle.incompatible_layers(model.weights());
            if !bad.is_empty() {
                return Err(with_path(&s.adapter)(Error::Compatibility { layers: bad }));
            }
            subjects.push(SubjectSpec {
                name: s.name.clone(),
                tokens: s.tokens.clone(),
                adapter: s.adapter.display().to_string(),
            });
            adapters.push(bundle);
        }
        Ok(Self {
            prompt: PromptState::synthetic(&mc, cfg.prompt_seed),
            model,
            subjects,
            adapters,
        })
    }

    fn spec<'a>(&'a self, cfg: &PipelineConfig) -> RunSpec<'a> {
        RunSpec {
            subjects: &self.subjects,
            adapters: &self.adapters,
            prior: cfg.params.prior(),
            blend: cfg.params.blend(),
            steps: cfg.steps,
        }
    }
}

fn file_stem(k: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("prior_{k}_{clean}")
}

fn record_priors(run: &mut Run, s: &Setup, x: &PriorExtraction) -> Result<(), Failure> {
    let mut files = Vec::new();
    for (k, (p, b)) in x.priors.iter().zip(&x.blobs).enumerate() {
        let stem = file_stem(k, &s.subjects[k].name);
        run.write(&format!("{stem}.pgm"), &encode_pgm(&p.mask))?;
        run.write(&format!("{stem}.f32"), &encode_grid_f32(&p.mask.to_grid()))?;
        run.write(&format!("{stem}_soft.f32"), &encode_grid_f32(&b.map))?;
        files.push(format!("{stem}.pgm"));
    }
    for k in x.exhausted() {
        let msg = format!(
            "subject '{}': blob smoothing used all {} passes without reaching a single component ({} remain)",
            s.subjects[k].name, x.blobs[k].passes, x.blobs[k].components
        );
        warn!("{msg}");
        run.report.warnings.push(msg);
    }
    let names: Vec<String> = s.subjects.iter().map(|s| s.name.clone()).collect();
    let pr = PriorReport::new(x, &names, &files);
    let disjoint = pr.disjoint;
    run.report.priors = Some(pr);
    if !disjoint {
        return Err(Failure::invariant("subject priors overlap"));
    }
    Ok(())
}

fn record_latent(run: &mut Run, name: &str, z: &FeatureMatrix) -> Result<(), Failure> {
    run.write(name, &encode_matrix_f32(z))?;
    run.report.latent = Some(LatentReport {
        file: name.to_string(),
        checksum: matrix_checksum(z),
        rms: z.rms(),
    });
    Ok(())
}

fn prior(run: &mut Run, cfg: &PipelineConfig, s: &Setup) -> Result<(), Failure> {
    let z1 = seeded_noise(s.model.config(), cfg.seed);
    let x = run.time("extract_priors", || {
        extract_priors(&s.model, &s.prompt, &s.subjects, &cfg.params.prior(), &z1, cfg.steps)
    })?;
    info!("priors captured at step {} (t = {})", x.capture_step, x.capture_time);
    record_priors(run, s, &x)
}

fn gen(run: &mut Run, cfg: &PipelineConfig, s: &Setup) -> Result<(), Failure> {
    let z1 = seeded_noise(s.model.config(), cfg.seed);
    let g = run.time("generate", || generate(&s.model, &s.prompt, &z1, &s.spec(cfg)))?;
    record_priors(run, s, &g.extraction)?;
    run.report.blend = Some(BlendReport::from(&g.stats));
    info!("{} adapter forwards over {} gated steps", g.stats.adapter_forwards, g.stats.gated_steps);
    record_latent(run, "latent.f32", &g.latent)
}

fn edit_cmd(run: &mut Run, cfg: &PipelineConfig, s: &Setup, input: &Path) -> Result<(), Failure> {
    if !input.exists() {
        return Err(Failure::config(format!("input latent not found: {}", input.display())));
    }
    let z0 = read_matrix_f32(input).map_err(with_path(input))?;
    let mc = s.model.config();
    if z0.shape() != (mc.image_tokens(), mc.channels) {
        return Err(Failure::config(format!(
            "{}: latent is {}x{}, model expects {}x{}",
            input.display(),
            z0.rows(),
            z0.cols(),
            mc.image_tokens(),
            mc.channels
        )));
    }
    let e = run.time("edit", || edit(&s.model, &s.prompt, &z0, &s.spec(cfg)))?;
    record_priors(run, s, &e.extraction)?;
    run.report.blend = Some(BlendReport::from(&e.stats));
    run.write("recovered_noise.f32", &encode_matrix_f32(&e.recovered_noise))?;
    run.report.edit = Some(EditReport {
        input: input.display().to_string(),
        round_trip_rms: e.round_trip_rms,
        recovered_noise_file: "recovered_noise.f32".to_string(),
    });
    info!("inversion round-trip rms {:e}", e.round_trip_rms);
    record_latent(run, "latent.f32", &e.latent)
}

/// Formats suite results as a fixed-width table.
pub fn selftest_table(results: &[SuiteReport]) -> String {
    let mut s = format!("{:<16} {:>6} {:>9}  {:<6} invariant\n", "suite", "cases", "failures", "result");
    for r in results {
        s.push_str(&format!(
            "{:<16} {:>6} {:>9}  {:<6} {}\n",
            r.name,
            r.cases,
            r.failures,
            if r.passed { "PASS" } else { "FAIL" },
            r.invariant
        ));
        if let Some(f) = &r.first_failure {
            s.push_str(&format!("{:<16} first failure: {f}\n", ""));
        }
    }
    s
}

fn selftest(run: &mut Run, mutate: Option<Mutation>) -> Result<(), Failure> {
    let results = run.time("selftest", || run_selftest(mutate));
    let rows: Vec<SuiteReport> = results.iter().map(SuiteReport::from).collect();
    print!("{}", selftest_table(&rows));
    run.report.selftest = Some(rows);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({})", r.name, r.invariant))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::invariant(format!("selftest failed: {}", failed.join("; "))))
    }
}

fn synth_adapter(run: &mut Run, cfg: &PipelineConfig, args: &SynthArgs) -> Result<(), Failure> {
    let mc: ModelConfig = match &cfg.model.checkpoint {
        Some(path) => *Model::load(path).map_err(with_path(path))?.config(),
        None => cfg.model.model_config(),
    };
    if args.rank == 0 {
        return Err(Failure::config("rank must be at least 1"));
    }
    let mut bundle = AdapterBundle::synthetic(&mc, &args.name, args.seed, args.rank, &default_targets(&mc), args.gain)?;
    if args.zero {
        bundle = bundle.zeroed();
    }
    let name = format!("{}.lora", args.name);
    std::fs::create_dir_all(&run.out_dir).map_err(|e| Failure::config(format!("{}: {e}", run.out_dir.display())))?;
    let path = run.out_dir.join(&name);
    save_adapter(&bundle, &path).map_err(with_path(&path))?;
    let bytes = std::fs::read(&path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    run.report.outputs.insert(name, sha256_hex(&bytes));
    Ok(())
}
