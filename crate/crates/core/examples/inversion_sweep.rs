//! Prints the invert-then-denoise round-trip error of the seeded toy model
//! for a range of step counts.

use lorashop::mmdit::{seeded_noise, Model, ModelConfig, NoHook, PromptState};

fn main() -> lorashop::Result<()> {
    let model_seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ModelConfig {
        seed: model_seed,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg)?;
    let prompt = PromptState::synthetic(&cfg, 1);
    // A reference "image" latent: denoise seeded noise with a fine grid.
    let z0 = model.flow_denoise(&seeded_noise(&cfg, 2), &prompt, 64, &mut NoHook)?;
    println!("reference latent rms {:.6}", z0.rms());
    for steps in [1, 2, 4, 8, 16, 32, 64] {
        let z1 = model.flow_invert(&z0, &prompt, steps)?;
        let back = model.flow_denoise(&z1, &prompt, steps, &mut NoHook)?;
        let err = back.sub(&z0)?.rms();
        println!("steps {steps:>3}  z1 rms {:.6}  round-trip rms error {err:.6e}", z1.rms());
    }
    Ok(())
}
