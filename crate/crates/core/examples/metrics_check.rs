//! Fréchet distance against its closed forms, and the diversity and
//! variation statistics on a few hand-made corpora.
//!
//! `cargo run --release --example metrics_check`

use listener_diffusion::metrics::{diversity, frechet_distance, variation, FeatureCloud};
use listener_diffusion::{Mat, MotionSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shifted(m: &Mat, by: &[f64]) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, s) in out.row_mut(r).iter_mut().zip(by) {
            *v += s;
        }
    }
    out
}

fn main() -> listener_diffusion::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Mat::randn(4000, 4, 1.0, &mut rng);
    let mu = [0.5, -1.0, 0.0, 2.0];
    let cloud = FeatureCloud::new(x.clone())?;
    println!("FD(X, X)        = {:.2e}", frechet_distance(&cloud, &cloud)?);
    // identical covariances: the trace term vanishes and FD = ‖μ‖²
    let moved = FeatureCloud::new(shifted(&x, &mu))?;
    let expect: f64 = mu.iter().map(|m| m * m).sum();
    println!("FD(X, X + μ)    = {:.6} (‖μ‖² = {expect:.6})", frechet_distance(&cloud, &moved)?);

    // 1-D: (μ₁ − μ₂)² + (σ₁ − σ₂)²
    let a = Mat::randn(20000, 1, 1.0, &mut rng);
    let b = shifted(&Mat::randn(20000, 1, 2.0, &mut rng), &[1.0]);
    let fd = frechet_distance(&FeatureCloud::new(a)?, &FeatureCloud::new(b)?)?;
    println!("FD(N(0,1), N(1,4)) = {fd:.4} (closed form 2.0000)");

    let still = MotionSequence::new(Mat::filled(30, 8, 0.3), 30)?;
    println!(
        "constant corpus: diversity {:.3}, variation {:.3}",
        diversity(&[still.clone(), still.clone()])?,
        variation(&[still])?
    );
    let noisy: Vec<MotionSequence> = (0..4)
        .map(|_| MotionSequence::new(Mat::randn(30, 8, 1.0, &mut rng), 30))
        .collect::<Result<_, _>>()?;
    println!(
        "white-noise corpus: diversity {:.3}, variation {:.3}",
        diversity(&noisy)?,
        variation(&noisy)?
    );
    Ok(())
}
