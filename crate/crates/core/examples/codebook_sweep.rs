//! Trains the full pipeline once per codebook size on a small coupled corpus
//! and prints one comparable metric row per size.
//!
//! `cargo run --release --example codebook_sweep -- [seed]`

use listener_diffusion::metrics::table;
use listener_diffusion::pipeline::{run_codebook_sweep, RunConfig};

fn main() -> listener_diffusion::Result<()> {
    let mut config = RunConfig::sweep();
    config.seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let start = std::time::Instant::now();
    let reports = run_codebook_sweep(&config, &config.codebook_sizes)?;
    print!("{}", table(&reports));
    for r in &reports {
        println!("{:<8} codebook perplexity {:.1}", r.label, r.config["perplexity"].as_f64().unwrap_or(f64::NAN));
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
