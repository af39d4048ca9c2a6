use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_subjects.toml")
}

fn lorashop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorashop")).args(args).output().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_writes_priors_latent_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lorashop(&["gen", "--config", p(&config()), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(tmp.path());
    assert_eq!(r["status"], "ok");
    assert_eq!(r["priors"]["disjoint"], true);
    assert_eq!(r["blend"]["gated_steps"], 14);
    assert_eq!(r["blend"]["adapter_forwards"], 28);
    assert!(r.get("timings_ms").is_none());
    for name in ["latent.f32", "prior_0_cat.pgm", "prior_1_hat.pgm"] {
        assert!(tmp.path().join(name).exists(), "{name}");
        assert!(r["outputs"][name].is_string(), "{name}");
    }
}

#[test]
fn closed_gate_reproduces_the_plain_run_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("closed");
    let out = lorashop(&["gen", "--config", p(&config()), "--out", p(&a), "--t", "0"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&a)["blend"]["adapter_forwards"], 0);

    let cfg = lorashop_cli::config::PipelineConfig::load(&config(), &Default::default()).unwrap();
    let mc = cfg.model.model_config();
    let m = lorashop::mmdit::Model::init(mc).unwrap();
    let prompt = lorashop::mmdit::PromptState::synthetic(&mc, cfg.prompt_seed);
    let z1 = lorashop::mmdit::seeded_noise(&mc, cfg.seed);
    let golden = m.flow_denoise(&z1, &prompt, cfg.steps, &mut lorashop::mmdit::NoHook).unwrap();
    assert_eq!(report(&a)["latent"]["checksum"], lorashop::io::matrix_checksum(&golden));
}

#[test]
fn missing_adapter_is_a_config_error_with_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config()).unwrap().replace("adapters/hat.lora", "adapters/nope.lora");
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, text).unwrap();
    let out_dir = tmp.path().join("out");
    let out = lorashop(&["prior", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("adapter file not found"));
    let r = report(&out_dir);
    assert_eq!(r["status"], "error");
    assert_eq!(r["exit_code"], 2);
}

#[test]
fn bad_parameters_and_unknown_keys_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lorashop(&["gen", "--config", p(&config()), "--out", p(tmp.path()), "--tau", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nbogus = 3\n").unwrap();
    assert_eq!(lorashop(&["gen", "--config", p(&cfg), "--out", p(tmp.path())]).status.code(), Some(2));
    assert_eq!(lorashop(&["gen", "--config", p(&tmp.path().join("absent.toml")), "--out", p(tmp.path())]).status.code(), Some(2));
}

#[test]
fn truncated_input_latent_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("short.f32");
    std::fs::write(&input, b"F32M\x01\x00").unwrap();
    let out = lorashop(&["edit", "--config", p(&config()), "--input", p(&input), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(report(tmp.path())["status"], "error");
}

#[test]
fn edit_round_trip_improves_with_more_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("gen");
    assert_eq!(lorashop(&["gen", "--config", p(&config()), "--out", p(&g)]).status.code(), Some(0));
    let input = g.join("latent.f32");
    let rms = |steps: &str| {
        let dir = tmp.path().join(format!("edit{steps}"));
        let out = lorashop(&["edit", "--config", p(&config()), "--input", p(&input), "--out", p(&dir), "--steps", steps]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.join("recovered_noise.f32").exists());
        report(&dir)["edit"]["round_trip_rms"].as_f64().unwrap()
    };
    assert!(rms("32") < rms("8"));
}

#[test]
fn selftest_passes_and_detects_a_broken_kernel() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = lorashop(&["selftest", "--out", p(tmp.path())]);
    assert_eq!(ok.status.code(), Some(0));
    let suites = report(tmp.path())["selftest"].as_array().unwrap().len();
    assert_eq!(suites, 10);

    let bad = lorashop(&["selftest", "--out", p(tmp.path()), "--mutate", "conv-kernel"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("conv"));
}

#[test]
fn synth_adapter_writes_a_loadable_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lorashop(&["synth-adapter", "--name", "dog", "--seed", "3", "--rank", "2", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    let b = lorashop::lora::load_adapter(&tmp.path().join("dog.lora")).unwrap();
    assert_eq!(b.name, "dog");
    assert!(b.deltas.values().all(|d| d.rank() == 2));
}
