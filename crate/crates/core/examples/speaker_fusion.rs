//! Runs an untrained fusion network on one speaker clip and shows how each
//! modality switch changes the fused condition.
//!
//! `cargo run --release --example speaker_fusion`

use listener_diffusion::autograd::ParamStore;
use listener_diffusion::conditioning::{FusionConfig, FusionNetwork, ModalitySwitches, SpeakerFeatures, TextEmbedder};
use listener_diffusion::listener::raw_speaker;
use listener_diffusion::motion::NormStats;
use listener_diffusion::synth::{generate_dyad, DyadConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> listener_diffusion::Result<()> {
    let data = DyadConfig {
        expression_dim: 5,
        ..DyadConfig::default()
    };
    let dyad = generate_dyad(&data, &mut ChaCha8Rng::seed_from_u64(2))?;
    let text = TextEmbedder::default().embed(&dyad.text_tokens)?;
    let raw = raw_speaker(&dyad.speaker, &dyad.waveform, text, &data.audio)?;

    let z = |m| -> listener_diffusion::Result<_> { NormStats::fit_rows([m])?.apply(m) };
    let features = SpeakerFeatures {
        motion: z(&raw.motion)?,
        delta: z(&raw.delta)?,
        audio: z(&raw.audio)?,
        text: raw.text.vector.clone(),
    };

    let mut store = ParamStore::new();
    let config = FusionConfig::default();
    let net = FusionNetwork::new(&mut store, config, raw.motion.cols(), raw.audio.cols(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let full = net.fuse(&store, &features, ModalitySwitches::all())?.vectors;
    println!(
        "T = {} frames → {} condition vectors of width {} ({} parameters)",
        features.len(),
        full.rows(),
        full.cols(),
        store.scalar_count()
    );

    let all = ModalitySwitches::all();
    let variants = [
        ("no motion", ModalitySwitches { use_motion: false, ..all }),
        ("no audio", ModalitySwitches { use_audio: false, ..all }),
        ("no differentials", ModalitySwitches { use_differential: false, ..all }),
        ("no text", ModalitySwitches { use_text: false, ..all }),
        ("nothing", ModalitySwitches::none()),
    ];
    println!("switch             max |Δ condition|");
    for (name, s) in variants {
        let v = net.fuse(&store, &features, s)?.vectors;
        println!("{name:<18} {:.4}", v.max_abs_diff(&full));
    }
    Ok(())
}
