//! Fits the desk-scale motion quantizer (K = 16, d_f = 8) on 64 synthetic
//! listener clips with patience-5 early stopping, then reports the corpus
//! reconstruction, codebook perplexity and a token round trip.
//!
//! `cargo run --release --example train_quantizer -- [seed]`

use listener_diffusion::pipeline::RunConfig;
use listener_diffusion::quantizer::train_vqvae;
use listener_diffusion::synth::generate_corpus;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> listener_diffusion::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut run = RunConfig::desk();
    run.data.seed = seed;
    let clips = generate_corpus(&run.data, 64)?;
    let listeners: Vec<_> = clips.iter().map(|c| c.listener.clone()).collect();

    let start = std::time::Instant::now();
    let (model, history) = train_vqvae(&listeners, &run.quantizer, &mut ChaCha8Rng::seed_from_u64(seed))?;
    for e in history.epochs.iter().filter(|e| e.epoch % 10 == 0) {
        println!(
            "epoch {:>3}  train rec {:.4}  val rec {:.4}  val total {:.4}  perplexity {:.2}",
            e.epoch, e.train.reconstruction, e.val.reconstruction, e.val.total, e.perplexity
        );
    }
    let losses = model.corpus_losses(&listeners)?;
    println!(
        "stopped after {} epochs (best {:?})  corpus reconstruction {:.4}  perplexity {:.2}",
        history.epochs.len(),
        history.best_epoch,
        losses.reconstruction,
        model.usage_perplexity()
    );
    let tokens = model.encode_to_tokens(&listeners[0])?;
    let again = model.encode_to_tokens(&model.decode_to_motion(&tokens, run.data.fps)?)?;
    let stable = tokens.tokens().iter().zip(again.tokens()).filter(|(a, b)| a == b).count();
    println!("token round trip: {stable}/{} positions stable", tokens.len());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
