//! Acceptance criteria, each printed as one PASS/FAIL line with its measured
//! value and runtime. Exits non-zero if any criterion fails.
//!
//! `cargo test --release --test acceptance`

use std::time::{Duration, Instant};

use listener_diffusion::autograd::{Graph, Grads, ParamStore};
use listener_diffusion::conditioning::{
    FusionConfig, MfccConfig, ModalitySwitches, SpeakerFeatures, TextEmbedder,
};
use listener_diffusion::diffusion::{
    build_schedule, one_hot, q_posterior, sample, DenoiserConfig, DiffusionConfig, OracleDenoiser,
    ScheduleKind,
};
use listener_diffusion::listener::{ListenerConfig, ListenerModel, TrainingItem};
use listener_diffusion::metrics::{diversity, frechet_distance, variation, FeatureCloud, MetricReport};
use listener_diffusion::pipeline::{
    self, ablation_variants, evaluate_corpora, run_ablation, run_codebook_sweep, shuffled_pairs,
    synthesize, RunConfig,
};
use listener_diffusion::quantizer::{train_vqvae, TokenSequence, VqConfig, VqVae};
use listener_diffusion::synth::{generate_corpus, Dataset};
use listener_diffusion::{Error, Mat, MotionSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: whether it held, and a one-line measurement.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Result<Verdict, Error>;

fn main() {
    let criteria: [(&str, Duration, Check); 9] = [
        ("discrete-chain exactness", secs(1), chain_exactness),
        ("stochasticity and absorption", secs(1), stochasticity),
        ("oracle-denoiser inversion", secs(5), oracle_inversion),
        ("gradient fidelity", secs(30), gradient_fidelity),
        ("metric correctness", secs(5), metric_correctness),
        ("determinism and formats", secs(60), determinism_and_formats),
        ("vq-vae learning", secs(600), vq_learning),
        ("conditioning works", secs(1800), conditioning_works),
        ("codebook-size protocol", secs(2700), codebook_protocol),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = took <= budget;
        let ok = pass && in_time;
        if !ok {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1} s of {} s{}]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn chain_exactness() -> Result<Verdict, Error> {
    let (k, steps) = (3, 4);
    let sched = build_schedule(steps, k, &ScheduleKind::default())?;
    let mut worst_post: f64 = 0.0;
    let mut cases = 0;
    // at t = 1 the bound scores x_0 directly; the posterior starts at t = 2
    for t in 2..=steps {
        let qt = sched.transition_matrix(t)?;
        let prev = sched.cumulative_matrix(t - 1)?;
        let cum = sched.cumulative_matrix(t)?;
        for x0 in 0..k {
            for xt in 0..=k {
                // Bayes: q(x_{t−1} = j | x_t, x_0) ∝ Q_t[x_t][j] · Q̄_{t−1}[j][x_0]
                let evidence = cum[(xt, x0)];
                if evidence == 0.0 {
                    continue;
                }
                let seq = TokenSequence::new(vec![xt], k)?;
                let x0_seq = TokenSequence::new(vec![x0], k)?;
                let got = q_posterior(&one_hot(&x0_seq), &seq, t, &sched)?;
                for j in 0..=k {
                    let want = qt[(xt, j)] * prev[(j, x0)] / evidence;
                    worst_post = worst_post.max((got[(0, j)] - want).abs());
                }
                cases += 1;
            }
        }
    }
    let mut worst_cum: f64 = 0.0;
    let mut product = Mat::identity(k + 1);
    for t in 1..=steps {
        product = sched.transition_matrix(t)?.matmul(&product);
        worst_cum = worst_cum.max(product.max_abs_diff(&sched.cumulative_matrix(t)?));
    }
    Ok(verdict(
        worst_post <= 1e-10 && worst_cum <= 1e-8,
        format!("{cases} posterior cases, max error {worst_post:.1e}; cumulative product error {worst_cum:.1e}"),
    ))
}

fn stochasticity() -> Result<Verdict, Error> {
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut gamma_final = f64::INFINITY;
    for k in [3, 16, 256] {
        let sched = DiffusionConfig::default().build(k)?;
        let steps = sched.steps();
        for t in 0..=steps {
            let mut mats = vec![sched.cumulative_matrix(t)?];
            if t >= 1 {
                mats.push(sched.transition_matrix(t)?);
            }
            for m in mats {
                for c in 0..m.cols() {
                    let col: f64 = (0..m.rows()).map(|r| m[(r, c)]).sum();
                    worst = worst.max((col - 1.0).abs());
                    if (0..m.rows()).any(|r| m[(r, c)] < 0.0) {
                        worst = f64::INFINITY;
                    }
                }
            }
            if t >= 1 && sched.mask_fraction(t)? < sched.mask_fraction(t - 1)? {
                monotone = false;
            }
        }
        gamma_final = gamma_final.min(sched.gamma_bar()[steps]);
    }
    Ok(verdict(
        worst <= 1e-10 && monotone && gamma_final >= 0.9 - 1e-12,
        format!("column-sum error {worst:.1e}, mask fraction monotone {monotone}, γ̄_T = {gamma_final:.3}"),
    ))
}

fn oracle_inversion() -> Result<Verdict, Error> {
    let (k, n) = (8, 6);
    let sched = DiffusionConfig::default().build(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut recovered = 0;
    for _ in 0..100 {
        let x0 = TokenSequence::new((0..n).map(|_| rng.random_range(0..k)).collect(), k)?;
        let out = sample(&OracleDenoiser { x0: x0.clone() }, n, &sched, &mut rng)?;
        recovered += usize::from(out == x0);
    }
    Ok(verdict(recovered == 100, format!("{recovered}/100 sequences recovered exactly")))
}

/// Compares an analytic gradient with central differences of `loss` over
/// every scalar parameter. Relative error is taken where either side exceeds
/// `1e-4`; smaller entries must agree to `1e-8` absolutely.
fn compare_gradients(
    params: &mut ParamStore,
    analytic: &Grads,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> (f64, f64, usize) {
    let h = 1e-4;
    let (mut rel, mut abs, mut count) = (0.0f64, 0.0f64, 0);
    for id in 0..params.len() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(params);
            params.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.tensors[id].data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-4 {
                rel = rel.max((a - numeric).abs() / scale);
            } else {
                abs = abs.max((a - numeric).abs());
            }
            count += 1;
        }
    }
    (rel, abs, count)
}

fn jitter(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in 0..params.len() {
        for v in params.get_mut(id).data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
}

/// Total quantizer loss with the straight-through offset `c − z₀` frozen,
/// so the decoder sees `z + (c − z₀)`: its derivative is the
/// straight-through gradient at the base point.
fn vq_surrogate(model: &VqVae, store: &ParamStore, frames: &Mat, offset: &Mat, codes: &Mat) -> f64 {
    let mut g = Graph::new(store);
    let x = g.constant(frames.clone());
    let z = model.encode_graph(&mut g, x);
    let off = g.constant(offset.clone());
    let zq = g.add(z, off);
    let recon = model.decode_graph(&mut g, zq);
    let c = g.constant(codes.clone());
    let d = g.sub(z, c);
    let embed = g.sum_sq(d);
    let rec = g.smooth_l1(recon, x);
    let dr = g.diff_rows(recon);
    let dx = g.diff_rows(x);
    let vel = g.smooth_l1(dr, dx);
    let w = model.config.loss_weights;
    g.scalar(embed) * w.embed + g.scalar(rec) * w.reconstruction + g.scalar(vel) * w.velocity
}

fn gradient_fidelity() -> Result<Verdict, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // quantizer: widths ≤ 8
    let config = VqConfig {
        codebook_size: 4,
        code_dim: 4,
        downsample: 2,
        hidden: 8,
        motion_dim: 4,
        ..VqConfig::default()
    };
    let mut vq = VqVae::new(config, &mut rng)?;
    jitter(&mut vq.params, &mut rng);
    let frames = Mat::randn(8, 4, 0.5, &mut rng);
    let (analytic, offset, codes) = {
        let mut g = Graph::new(&vq.params);
        let (total, z, tokens, _) = vq.loss_graph(&mut g, &frames);
        let mut codes = Mat::zeros(tokens.len(), 4);
        for (r, &t) in tokens.iter().enumerate() {
            codes.row_mut(r).copy_from_slice(vq.codebook.code(t));
        }
        let offset = codes.zip_map(g.value(z), |c, z| c - z);
        (g.backward(total), offset, codes)
    };
    let mut store = vq.params.clone();
    let (vq_rel, vq_abs, vq_n) =
        compare_gradients(&mut store, &analytic, |p| vq_surrogate(&vq, p, &frames, &offset, &codes));

    // diffusion: fusion, text and denoiser widths ≤ 8
    let lc = ListenerConfig {
        fusion: FusionConfig {
            width: 8,
            heads: 2,
            cond_dim: 8,
            mlp_hidden: 8,
            text_dim: 8,
            pool_stride: 4,
        },
        diffusion: DiffusionConfig {
            steps: 10,
            denoiser: DenoiserConfig {
                width: 8,
                depth: 1,
                heads: 2,
                positions: 4,
            },
            ..DiffusionConfig::default()
        },
        text: TextEmbedder { dim: 8, seed: 1 },
        audio: MfccConfig {
            n_mels: 8,
            n_mfcc: 6,
            ..MfccConfig::default()
        },
        ..ListenerConfig::default()
    };
    let (k, frames_t) = (5, 16);
    let mut model = ListenerModel::new(lc, k, 4, frames_t, &mut rng)?;
    jitter(&mut model.params, &mut rng);
    let item = TrainingItem {
        features: SpeakerFeatures {
            motion: Mat::randn(frames_t, 4, 1.0, &mut rng),
            audio: Mat::randn(frames_t, 6, 1.0, &mut rng),
            delta: Mat::randn(frames_t, 4, 1.0, &mut rng),
            text: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        },
        tokens: TokenSequence::new(vec![0, 3, 1, 4], k)?,
    };
    let (mut d_rel, mut d_abs, mut d_n) = (0.0f64, 0.0f64, 0);
    for (t, xt) in [(1, vec![0, 2, 1, 4]), (4, vec![0, 5, 5, 4]), (10, vec![5, 5, 2, 5])] {
        let xt = TokenSequence::new(xt, k)?;
        let (_, grads) = model.loss_at(&item, t, &xt, true)?;
        let grads = grads.expect("gradients requested");
        let mut probe = model.clone();
        let mut store = std::mem::take(&mut probe.params);
        let (r, a, n) = compare_gradients(&mut store, &grads, |p| {
            probe.params = p.clone();
            probe.loss_at(&item, t, &xt, false).map(|(l, _)| l.total).unwrap_or(f64::NAN)
        });
        d_rel = d_rel.max(r);
        d_abs = d_abs.max(a);
        d_n += n;
    }
    let pass = vq_rel <= 1e-3 && vq_abs <= 1e-8 && d_rel <= 1e-3 && d_abs <= 1e-8;
    Ok(verdict(
        pass,
        format!(
            "vq-vae {vq_n} scalars, max rel {vq_rel:.1e} (abs {vq_abs:.1e}); diffusion {d_n} scalars at t = 1, 4, 10, max rel {d_rel:.1e} (abs {d_abs:.1e})"
        ),
    ))
}

fn metric_correctness() -> Result<Verdict, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Mat::randn(2000, 4, 1.0, &mut rng);
    let cloud = FeatureCloud::new(x.clone())?;
    let self_fd = frechet_distance(&cloud, &cloud)?;

    let mu = [0.5, -1.0, 0.25, 2.0];
    let mut moved = x.clone();
    for r in 0..moved.rows() {
        for (v, m) in moved.row_mut(r).iter_mut().zip(&mu) {
            *v += m;
        }
    }
    let shift_err = (frechet_distance(&cloud, &FeatureCloud::new(moved)?)? - mu.iter().map(|m| m * m).sum::<f64>()).abs();

    // 1-D: exact against the samples' own moments, and within sampling
    // error of the population value (μ₁ − μ₂)² + (σ₁ − σ₂)² = 2
    let n = 20_000;
    let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let b: Vec<f64> = (0..n).map(|_| 1.0 + 2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    };
    let fd1 = frechet_distance(
        &FeatureCloud::new(Mat::from_vec(n, 1, a.clone()))?,
        &FeatureCloud::new(Mat::from_vec(n, 1, b.clone()))?,
    )?;
    let ((ma, va), (mb, vb)) = (moments(&a), moments(&b));
    let jitter = listener_diffusion::metrics::COVARIANCE_JITTER;
    let sample_form = (ma - mb).powi(2) + ((va + jitter).sqrt() - (vb + jitter).sqrt()).powi(2);
    let sample_err = (fd1 - sample_form).abs();
    // standard errors: mean difference √(5/n), std difference √(5/(2n))
    let population_err = (fd1 - 2.0).abs();
    let population_tol = 4.0 * 2.0 * ((5.0 / n as f64).sqrt() + (2.5 / n as f64).sqrt());

    let still = MotionSequence::new(Mat::filled(30, 8, 0.4), 30)?;
    let zero_div = diversity(&[still.clone(), still.clone(), still.clone()])?;
    let zero_var = variation(&[still])?;

    let config = RunConfig {
        count: 2,
        test_count: 6,
        ..RunConfig::desk()
    };
    let (_, test) = synthesize(&config)?;
    let report = evaluate_corpora("GT", &test.samples, &test.samples, serde_json::Value::Null)?;

    let pass = self_fd < 1e-6
        && shift_err < 1e-6
        && sample_err < 1e-6
        && population_err < population_tol
        && zero_div == 0.0
        && zero_var == 0.0
        && report.l2 == 0.0;
    Ok(verdict(
        pass,
        format!(
            "FD(X,X) {self_fd:.1e}, ‖μ‖² error {shift_err:.1e}, 1-D error {sample_err:.1e} vs sample moments and {population_err:.3} vs population (tol {population_tol:.3}), constant diversity {zero_div} / variation {zero_var}, GT-vs-GT L2 {}",
            report.l2
        ),
    ))
}

fn tiny_run(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.out_dir = dir.to_path_buf();
    c.count = 6;
    c.test_count = 2;
    c.quantizer.max_epochs = 3;
    c.listener.max_epochs = 2;
    c
}

fn determinism_and_formats() -> Result<Verdict, Error> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let c = tiny_run(d.path());
        pipeline::cmd_synth(&c)?;
        pipeline::cmd_train_vqvae(&c, false)?;
        pipeline::cmd_train_diffusion(&c, false)?;
        pipeline::cmd_generate(&c, None)?;
    }
    let mut identical = Vec::new();
    for f in ["dataset.dlds", "test.dlds", "vqvae.ckpt", "diffusion.ckpt", "generated.dlds"] {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| Error::io(f, e))?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| Error::io(f, e))?;
        identical.push((f, a == b));
    }

    let config = RunConfig::desk().data;
    let data = Dataset::from_config(&config, 3)?;
    let bytes = data.to_bytes();
    let back = Dataset::from_bytes(&bytes)?;
    let bit_exact = back == data && back.to_bytes() == bytes;

    let mut corrupt = bytes.clone();
    let at = corrupt.len() - 100;
    corrupt[at] ^= 0x40;
    let crc_caught = matches!(Dataset::from_bytes(&corrupt), Err(e @ Error::Format { .. }) if e.to_string().contains("CRC"));

    let all_same = identical.iter().all(|(_, s)| *s);
    let differing: Vec<&str> = identical.iter().filter(|(_, s)| !s).map(|(f, _)| *f).collect();
    Ok(verdict(
        all_same && bit_exact && crc_caught,
        format!(
            "{} artifacts byte-identical across runs{}; round trip bit-exact {bit_exact}; corrupted payload rejected by CRC {crc_caught}",
            identical.len() - differing.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {})", differing.join(", ")) }
        ),
    ))
}

fn vq_learning() -> Result<Verdict, Error> {
    let run = RunConfig::desk();
    let clips = generate_corpus(&run.data, 64)?;
    let motion: Vec<MotionSequence> = clips.into_iter().map(|c| c.listener).collect();
    let qc = &run.quantizer;
    let setup = motion[0].len() == 240
        && motion[0].width() == 8
        && qc.codebook_size == 16
        && qc.patience == 5
        && qc.max_epochs <= 200
        && qc.loss_weights == Default::default();
    let (model, history) = train_vqvae(&motion, qc, &mut ChaCha8Rng::seed_from_u64(0))?;
    let rec = model.corpus_losses(&motion)?.reconstruction;
    Ok(verdict(
        setup && rec < 0.05,
        format!(
            "64 clips, T = 240, d_f = 8, K = 16: reconstruction {rec:.4} after {} epochs (early stop {}, best epoch {:?})",
            history.epochs.len(),
            history.stopped_early,
            history.best_epoch
        ),
    ))
}

fn conditioning_works() -> Result<Verdict, Error> {
    let seeds = [0u64, 1, 2];
    let mut variants = ablation_variants();
    variants.push(ModalitySwitches::none());
    let mut pfd_ok = true;
    let mut fd_sum = [0.0f64; 4];
    let mut lines = Vec::new();
    for &seed in &seeds {
        let mut config = RunConfig::coupled();
        config.seed = seed;
        let reports = run_ablation(&config, &variants)?;
        let (_, test) = synthesize(&config)?;
        let shuffled = evaluate_corpora("shuffled GT", &shuffled_pairs(&test.samples), &test.samples, serde_json::Value::Null)?;
        let by = |label: &str| -> &MetricReport { reports.iter().find(|r| r.label == label).expect("variant evaluated") };
        let full = by("full");
        let uncond = by("unconditional");
        let ok = full.pfd <= 0.7 * uncond.pfd && full.pfd <= 0.7 * shuffled.pfd;
        pfd_ok &= ok;
        for (slot, label) in ["full", "w/o Diff", "w/o Text", "w/o Diff & Text"].iter().enumerate() {
            fd_sum[slot] += by(label).fd;
        }
        lines.push(format!(
            "seed {seed}: P-FD {:.3} vs unconditional {:.3} / shuffled {:.3}",
            full.pfd, uncond.pfd, shuffled.pfd
        ));
    }
    let fd: Vec<f64> = fd_sum.iter().map(|s| s / seeds.len() as f64).collect();
    let direction = fd[1] > fd[0] && fd[2] > fd[0] && fd[3] >= fd[1] && fd[3] >= fd[2];
    Ok(verdict(
        pfd_ok && direction,
        format!(
            "{}; mean FD full {:.4}, w/o Diff {:.4}, w/o Text {:.4}, w/o Diff & Text {:.4}",
            lines.join("; "),
            fd[0],
            fd[1],
            fd[2],
            fd[3]
        ),
    ))
}

fn codebook_protocol() -> Result<Verdict, Error> {
    let config = RunConfig::sweep();
    let sizes = [128, 256, 512];
    let reports = run_codebook_sweep(&config, &sizes)?;
    let finite = reports.iter().all(|r| {
        [r.l2, r.fd, r.pfd, r.diversity, r.variation].iter().all(|v| v.is_finite())
    });
    let comparable = reports.len() == 3
        && reports.windows(2).all(|w| w[0].sequences == w[1].sequences && w[0].frames == w[1].frames);
    let labels: Vec<String> = reports.iter().map(|r| format!("{} P-FD {:.3}", r.label, r.pfd)).collect();
    Ok(verdict(finite && comparable, format!("{} reports: {}", reports.len(), labels.join(", "))))
}
