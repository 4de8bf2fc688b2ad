//! MFCC front end on a synthetic speaker waveform: framing, cepstra and
//! alignment to the motion frame rate.
//!
//! `cargo run --release --example mfcc_features`

use listener_diffusion::conditioning::{align_modalities, mfcc, AudioFeatureSequence, MfccConfig};
use listener_diffusion::synth::{generate_dyad, DyadConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn energy_track(a: &AudioFeatureSequence) -> Vec<f64> {
    // c0 follows log energy
    a.frames.iter_rows().map(|r| r[0]).collect()
}

fn main() -> listener_diffusion::Result<()> {
    let config = DyadConfig {
        expression_dim: 5,
        ..DyadConfig::default()
    };
    let dyad = generate_dyad(&config, &mut ChaCha8Rng::seed_from_u64(4))?;
    let audio = MfccConfig::default();
    let feats = mfcc(&dyad.waveform, &audio)?;
    println!(
        "{} samples at {} Hz, window {} / hop {:.3} → {} frames × {} coefficients",
        dyad.waveform.len(),
        audio.sample_rate,
        audio.window,
        audio.hop(),
        feats.len(),
        feats.frames.cols()
    );

    let (motion, aligned) = align_modalities(&dyad.speaker, &feats);
    println!("aligned to motion: {} × {} against {} × {}", aligned.rows(), aligned.cols(), motion.rows(), motion.cols());

    // the synthetic envelope follows speaker motion energy, so c0 should too
    let c0 = energy_track(&feats);
    let activity: Vec<f64> = motion.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let n = c0.len().min(activity.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&c0[..n]), mean(&activity[..n]));
    let cov: f64 = (0..n).map(|i| (c0[i] - ma) * (activity[i] - mb)).sum();
    let va: f64 = (0..n).map(|i| (c0[i] - ma).powi(2)).sum();
    let vb: f64 = (0..n).map(|i| (activity[i] - mb).powi(2)).sum();
    println!("corr(c0, speaker activity) = {:+.3}", cov / (va * vb).sqrt());
    for t in (0..feats.len()).step_by(60) {
        let row = feats.frames.row(t);
        println!("frame {t:>3}: c0 {:+.2} c1 {:+.2} c2 {:+.2}", row[0], row[1], row[2]);
    }
    Ok(())
}
