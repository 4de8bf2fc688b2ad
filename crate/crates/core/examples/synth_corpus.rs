//! Generates a small synthetic dyad corpus, checks that the listener trails
//! the speaker by the configured lag, and round-trips it through the
//! dataset container.
//!
//! `cargo run --release --example synth_corpus -- [count]`

use listener_diffusion::synth::{read_dataset, write_dataset, Dataset, DyadConfig};

/// Mean over channels of the speaker/listener correlation at `lag`.
fn lagged_correlation(a: &listener_diffusion::Mat, b: &listener_diffusion::Mat, lag: usize) -> f64 {
    let n = a.rows() - lag;
    let mut total = 0.0;
    for c in 0..a.cols() {
        let x: Vec<f64> = (0..n).map(|t| a[(t, c)]).collect();
        let y: Vec<f64> = (0..n).map(|t| b[(t + lag, c)]).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&x), mean(&y));
        let cov: f64 = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum();
        let vx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
        total += cov / (vx * vy).sqrt().max(1e-12);
    }
    total / a.cols() as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let count = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let config = DyadConfig {
        expression_dim: 5,
        ..DyadConfig::default()
    };
    let dataset = Dataset::from_config(&config, count)?;
    let first = &dataset.samples[0];
    println!(
        "{count} dyads of {} frames, d_f = {}, waveform {} samples, text {:?}",
        first.speaker.len(),
        first.speaker.width(),
        first.waveform.len(),
        first.text_tokens
    );

    println!("lag  correlation (clip 0)");
    for lag in [0, config.lag / 2, config.lag, config.lag * 2] {
        println!(
            "{lag:>3}  {:+.3}",
            lagged_correlation(first.speaker.frames(), first.listener.frames(), lag)
        );
    }

    let path = std::env::temp_dir().join("synth_corpus_example.dlds");
    write_dataset(&dataset, &path)?;
    let back = read_dataset(&path)?;
    println!(
        "wrote and re-read {} ({} bytes): identical = {}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        back == dataset
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
