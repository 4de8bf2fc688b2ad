//! The command-line workflow driven from the library: synthesize, train both
//! stages, generate for the held-out speakers, evaluate and inspect. All
//! artifacts land in a temporary directory, which is printed.
//!
//! `cargo run --release --example end_to_end`

use listener_diffusion::pipeline::{self, RunConfig};

fn main() -> listener_diffusion::Result<()> {
    let mut config = RunConfig::desk();
    config.out_dir = std::env::temp_dir().join("listener_end_to_end");
    config.count = 32;
    config.test_count = 8;
    config.quantizer.max_epochs = 40;
    config.listener.max_epochs = 10;

    let synth = pipeline::cmd_synth(&config)?;
    println!("synth: {} train / {} test records, topics {:?}", synth.train_records, synth.test_records, synth.topics);
    let vq = pipeline::cmd_train_vqvae(&config, false)?;
    println!("{}", serde_json::to_string(&vq).unwrap_or_default());
    let diff = pipeline::cmd_train_diffusion(&config, false)?;
    println!("{}", serde_json::to_string(&diff).unwrap_or_default());
    let generated = pipeline::cmd_generate(&config, None)?;
    println!("generated {} listeners of {} frames", generated.outputs, generated.frames);
    let report = pipeline::cmd_evaluate(&config, None, None)?;
    print!("{}", listener_diffusion::metrics::table(&[report]));
    let summary = pipeline::cmd_inspect(&config.path("diffusion.ckpt"))?;
    println!("diffusion checkpoint: {} parameters, γ̄_T = {}", summary["parameters"], summary["gamma_bar_final"]);
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}
