//! Trains one generator per speaker-modality setting on strongly coupled
//! synthetic dyads and prints the metric table, with the unconditional model
//! and the shuffled-listener baseline for reference.
//!
//! `cargo run --release --example modality_ablation -- [seed]`

use listener_diffusion::conditioning::ModalitySwitches;
use listener_diffusion::metrics::table;
use listener_diffusion::pipeline::{
    ablation_variants, evaluate_corpora, run_ablation, shuffled_pairs, synthesize, RunConfig,
};

fn main() -> listener_diffusion::Result<()> {
    let mut config = RunConfig::coupled();
    config.seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);

    let mut variants = ablation_variants();
    variants.push(ModalitySwitches::none());
    let start = std::time::Instant::now();
    let mut reports = run_ablation(&config, &variants)?;

    let (_, test) = synthesize(&config)?;
    reports.push(evaluate_corpora(
        "shuffled GT",
        &shuffled_pairs(&test.samples),
        &test.samples,
        serde_json::json!({ "baseline": "shuffled" }),
    )?);
    print!("{}", table(&reports));
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
