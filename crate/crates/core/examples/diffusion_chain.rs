//! The mask-and-replace forward chain on a short token sequence, then the
//! reverse chain driven by an oracle denoiser that knows `x_0`.
//!
//! `cargo run --release --example diffusion_chain`

use listener_diffusion::diffusion::{q_sample, sample, DiffusionConfig, OracleDenoiser};
use listener_diffusion::quantizer::TokenSequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> listener_diffusion::Result<()> {
    let k = 8;
    let sched = DiffusionConfig::default().build(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    println!("  t   γ̄_t    mask fraction");
    for t in [1, 10, 25, 50, 75, 100] {
        println!("{t:>3}  {:.3}  {:.3}", sched.gamma_bar()[t], sched.mask_fraction(t)?);
    }

    let x0 = TokenSequence::new(vec![3, 1, 4, 1, 5, 2, 6, 5, 3, 5], k)?;
    let show = |x: &TokenSequence| {
        x.tokens()
            .iter()
            .map(|&v| if v == k { "_".to_string() } else { v.to_string() })
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("\nx_0      {}", show(&x0));
    for t in [10, 50, 100] {
        println!("x_{t:<3}    {}", show(&q_sample(&x0, t, &sched, &mut rng)?));
    }

    let oracle = OracleDenoiser { x0: x0.clone() };
    let recovered = sample(&oracle, x0.len(), &sched, &mut rng)?;
    println!("\noracle reverse chain from the prior: {}", show(&recovered));
    println!("recovers x_0: {}", recovered == x0);
    Ok(())
}
