//! End-to-end driver behind the `listener` binary: one run configuration,
//! fixed file names under an output directory, and one function per command.
//!
//! Layout of `out_dir`:
//! `dataset.dlds` and `test.dlds` (synth), `vqvae.ckpt` + `vqvae_history.csv`,
//! `diffusion.ckpt` + `diffusion_history.csv`, `generated.dlds`,
//! `report.json` + `report.txt`, and `ablation/`, `sweep_k/` for the sweeps.
//! Every file records the run hash (a hash of the configuration without its
//! paths), so outputs of two runs with equal settings are byte-identical.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::ModalitySwitches;
use crate::container::{config_hash, write_file, TensorFile};
use crate::diffusion::{DenoiserConfig, DiffusionConfig};
use crate::error::{Error, Result};
use crate::listener::{
    continue_listener_training, train_listener, DiffusionHistory, ListenerConfig, ListenerModel,
    DIFFUSION_KIND,
};
use crate::metrics::{table, DyadPair, MetricReport};
use crate::optim::AdamConfig;
use crate::quantizer::{continue_training, train_vqvae, TrainHistory, VqConfig, VqVae, VQVAE_KIND};
use crate::synth::{read_dataset, write_dataset, Coupling, Dataset, DyadConfig, DyadSample};
use crate::conditioning::{FusionConfig, TextEmbedder};

/// Environment variable that caps the worker thread count.
pub const THREADS_ENV: &str = "LISTENER_THREADS";

/// Offset between the training and test corpus seeds.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Training clips (streams when `data.stream_frames` is set).
    pub count: usize,
    /// Held-out clips used by `generate` and `evaluate`.
    pub test_count: usize,
    pub data: DyadConfig,
    pub quantizer: VqConfig,
    pub listener: ListenerConfig,
    /// Samples drawn per speaker input by `generate`.
    pub samples_per_input: usize,
    /// Variants run by the modality ablation sweep.
    pub ablation: Vec<ModalitySwitches>,
    /// Codebook sizes run by the codebook sweep.
    pub codebook_sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            count: 64,
            test_count: 16,
            data: DyadConfig::default(),
            quantizer: VqConfig::default(),
            listener: ListenerConfig::default(),
            samples_per_input: 1,
            ablation: ablation_variants(),
            codebook_sizes: vec![128, 256, 512],
        }
    }
}

/// Full model, w/o differentials, w/o text, w/o both.
pub fn ablation_variants() -> Vec<ModalitySwitches> {
    let all = ModalitySwitches::all();
    vec![
        all,
        ModalitySwitches {
            use_differential: false,
            ..all
        },
        ModalitySwitches {
            use_text: false,
            ..all
        },
        ModalitySwitches {
            use_differential: false,
            use_text: false,
            ..all
        },
    ]
}

impl RunConfig {
    /// Small widths that train on a laptop CPU in minutes: `d_f = 8`,
    /// `K = 16`, width-64 fusion and a 2-block width-64 denoiser.
    pub fn desk() -> Self {
        let data = DyadConfig {
            expression_dim: 5,
            ..DyadConfig::default()
        };
        RunConfig {
            quantizer: VqConfig {
                codebook_size: 16,
                code_dim: 16,
                hidden: 64,
                motion_dim: data.motion_dim(),
                batch_size: 2,
                optimizer: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                ..VqConfig::default()
            },
            listener: ListenerConfig {
                fusion: FusionConfig::default(),
                diffusion: DiffusionConfig {
                    denoiser: DenoiserConfig {
                        width: 64,
                        depth: 2,
                        heads: 4,
                        positions: 30,
                    },
                    // at desk scale the tiny default barely trains the x0 head
                    lambda: 1.0,
                    ..DiffusionConfig::default()
                },
                text: TextEmbedder::default(),
                optimizer: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                ..ListenerConfig::default()
            },
            data,
            ..RunConfig::default()
        }
    }

    /// Desk widths on short (T = 64), strongly coupled dyads: the listener
    /// follows the speaker after 4 frames with little noise. Used to check
    /// that conditioning helps.
    pub fn coupled() -> Self {
        let mut config = RunConfig::desk();
        config.count = 384;
        config.test_count = 32;
        config.listener.max_epochs = 36;
        config.listener.optimizer.lr = 2e-3;
        config.data.frames = 64;
        config.data.lag = 4;
        config.data.noise_std = 0.02;
        config.data.coupling = Coupling::Scalar(0.9);
        config
    }

    /// Half the coupled corpus, so one full run per codebook size stays
    /// within minutes.
    pub fn sweep() -> Self {
        let mut config = RunConfig::coupled();
        config.count = 192;
        config.test_count = 32;
        config.quantizer.max_epochs = 40;
        config
    }

    /// Cross-stage consistency: `τ`, `d_f`, the audio front end and `T`.
    pub fn validate(&self) -> Result<()> {
        self.quantizer.validate()?;
        self.listener.validate()?;
        self.data.validate().map_err(|e| Error::config(e.to_string()))?;
        let tau = self.quantizer.downsample;
        if self.data.frames % tau != 0 {
            return Err(Error::config(format!(
                "T = {} must be divisible by the downsampling ratio τ = {tau}",
                self.data.frames
            )));
        }
        if self.data.downsample != tau || self.listener.fusion.pool_stride != tau {
            return Err(Error::config(format!(
                "τ disagrees across stages: data {}, quantizer {tau}, fusion pool_stride {}",
                self.data.downsample, self.listener.fusion.pool_stride
            )));
        }
        if self.data.motion_dim() != self.quantizer.motion_dim {
            return Err(Error::config(format!(
                "d_f disagrees: data produces {}, quantizer expects {}",
                self.data.motion_dim(),
                self.quantizer.motion_dim
            )));
        }
        if self.data.audio != self.listener.audio {
            return Err(Error::config("data.audio and listener.audio must be identical"));
        }
        if self.count == 0 || self.test_count < 2 || self.samples_per_input == 0 {
            return Err(Error::config(
                "count and samples_per_input must be ≥ 1 and test_count ≥ 2",
            ));
        }
        if self.codebook_sizes.iter().any(|&k| k < 2) {
            return Err(Error::config("every swept codebook size must be ≥ 2"));
        }
        Ok(())
    }

    /// Hash of the settings with the output directory removed.
    pub fn run_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        config_hash(&c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        RunConfig::from_json_over(text, &RunConfig::default())
    }

    /// Parses `text` with every missing field taken from `base` instead of
    /// the built-in defaults.
    pub fn from_json_over(text: &str, base: &RunConfig) -> Result<Self> {
        fn merge(into: &mut serde_json::Value, from: serde_json::Value) {
            match (into, from) {
                (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
                    for (k, v) in b {
                        match a.get_mut(&k) {
                            Some(slot) => merge(slot, v),
                            None => {
                                a.insert(k, v);
                            }
                        }
                    }
                }
                (slot, v) => *slot = v,
            }
        }
        let bad = |e: serde_json::Error| Error::config(format!("config file: {e}"));
        let user: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        if !user.is_object() {
            return Err(Error::config("config file: expected a JSON object"));
        }
        let mut merged = serde_json::to_value(base).expect("config serializes");
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(bad)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::load_over(path, &RunConfig::default())
    }

    pub fn load_over(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!(
            "cannot read config {}: {e}",
            path.display()
        )))?;
        RunConfig::from_json_over(&text, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn data_seeded(&self, seed: u64) -> DyadConfig {
        DyadConfig {
            seed,
            ..self.data.clone()
        }
    }
}

/// Configures the global rayon pool from [`THREADS_ENV`] if it is set.
pub fn init_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // a pool may already exist in this process (tests); keep it then
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

fn with_hash_column(csv: &str, hash: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        out.push_str(line);
        out.push(',');
        out.push_str(if i == 0 { "config_hash" } else { hash });
        out.push('\n');
    }
    out
}

fn stamped(mut file: TensorFile, hash: &str) -> TensorFile {
    if let Some(meta) = file.meta.as_object_mut() {
        meta.insert("run_hash".into(), hash.into());
    }
    file
}

fn dataset_echo(config: &RunConfig, data: &DyadConfig, role: &str, first_item: u64) -> serde_json::Value {
    serde_json::json!({
        "role": role,
        "data": data,
        "first_item_seed": data.seed.wrapping_add(first_item),
        "run_hash": config.run_hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub train_records: usize,
    pub test_records: usize,
    pub frames: usize,
    pub width: usize,
    pub topics: Vec<usize>,
    pub run_hash: String,
}

/// Training and test corpora in memory. Both share the corpus structure of
/// `seed`; test item `i` is drawn with seed `seed + TEST_SEED_OFFSET + i`.
pub fn synthesize(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let train_cfg = config.data_seeded(config.seed);
    let test_only = DyadConfig {
        stream_frames: None,
        ..train_cfg.clone()
    };
    let train = Dataset::new(
        crate::synth::generate_corpus(&train_cfg, config.count)?,
        config.data.fps,
        dataset_echo(config, &train_cfg, "train", 0),
    );
    let test = Dataset::new(
        crate::synth::generate_corpus_from(&test_only, config.test_count, TEST_SEED_OFFSET)?,
        config.data.fps,
        dataset_echo(config, &test_only, "test", TEST_SEED_OFFSET),
    );
    Ok((train, test))
}

pub fn cmd_synth(config: &RunConfig) -> Result<SynthSummary> {
    let (train, test) = synthesize(config)?;
    write_dataset(&train, &config.path("dataset.dlds"))?;
    write_dataset(&test, &config.path("test.dlds"))?;
    let mut topics = vec![0; config.data.topic_count];
    for s in &train.samples {
        topics[s.topic_id] += 1;
    }
    Ok(SynthSummary {
        train_records: train.len(),
        test_records: test.len(),
        frames: config.data.frames,
        width: config.data.motion_dim(),
        topics,
        run_hash: config.run_hash(),
    })
}

fn listeners(ds: &Dataset) -> Vec<crate::MotionSequence> {
    ds.samples.iter().map(|s| s.listener.clone()).collect()
}

fn read_required(path: &Path, what: &str) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::invalid(format!(
            "{what} {} not found; run the earlier stage first",
            path.display()
        )));
    }
    read_dataset(path)
}

fn load_vqvae(path: &Path) -> Result<VqVae> {
    if !path.exists() {
        return Err(Error::invalid(format!(
            "quantizer checkpoint {} not found; run train-vqvae first",
            path.display()
        )));
    }
    VqVae::load(path)
}

fn load_listener(path: &Path) -> Result<ListenerModel> {
    if !path.exists() {
        return Err(Error::invalid(format!(
            "diffusion checkpoint {} not found; run train-diffusion first",
            path.display()
        )));
    }
    ListenerModel::load(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub epochs_trained: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub final_val: f64,
    pub checkpoint: PathBuf,
    pub run_hash: String,
}

pub fn cmd_train_vqvae(config: &RunConfig, resume: bool) -> Result<TrainSummary> {
    config.validate()?;
    let data = read_required(&config.path("dataset.dlds"), "dataset")?;
    let motion = listeners(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ckpt = config.path("vqvae.ckpt");
    let (model, history) = if resume {
        continue_training(load_vqvae(&ckpt)?, &motion, false, &mut rng)?
    } else {
        train_vqvae(&motion, &config.quantizer, &mut rng)?
    };
    let hash = config.run_hash();
    stamped(model.to_tensor_file(), &hash).write(&ckpt)?;
    write_text(&config.path("vqvae_history.csv"), &with_hash_column(&history.to_csv(), &hash))?;
    Ok(vq_summary(&model, &history, ckpt, hash))
}

fn vq_summary(model: &VqVae, h: &TrainHistory, checkpoint: PathBuf, run_hash: String) -> TrainSummary {
    TrainSummary {
        epochs_run: h.epochs.len(),
        epochs_trained: model.epochs_trained,
        best_epoch: h.best_epoch,
        stopped_early: h.stopped_early,
        final_val: h.epochs.last().map_or(f64::NAN, |e| e.val.total),
        checkpoint,
        run_hash,
    }
}

fn diffusion_summary(
    model: &ListenerModel,
    h: &DiffusionHistory,
    checkpoint: PathBuf,
    run_hash: String,
) -> TrainSummary {
    TrainSummary {
        epochs_run: h.epochs.len(),
        epochs_trained: model.epochs_trained,
        best_epoch: h.best_epoch,
        stopped_early: h.stopped_early,
        final_val: h.epochs.last().map_or(f64::NAN, |e| e.val.total),
        checkpoint,
        run_hash,
    }
}

pub fn cmd_train_diffusion(config: &RunConfig, resume: bool) -> Result<TrainSummary> {
    config.validate()?;
    let data = read_required(&config.path("dataset.dlds"), "dataset")?;
    let vq = load_vqvae(&config.path("vqvae.ckpt"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let ckpt = config.path("diffusion.ckpt");
    let (model, history) = if resume {
        let model = load_listener(&ckpt)?;
        continue_listener_training(model, &data.samples, &vq, false, &mut rng)?
    } else {
        train_listener(&data.samples, &vq, config.listener.clone(), &mut rng)?
    };
    let hash = config.run_hash();
    stamped(model.to_tensor_file(), &hash).write(&ckpt)?;
    write_text(
        &config.path("diffusion_history.csv"),
        &with_hash_column(&history.to_csv(), &hash),
    )?;
    Ok(diffusion_summary(&model, &history, ckpt, hash))
}

/// `k` listeners per input record, sample `(i, j)` seeded with `seed + i·k + j`.
/// The output keeps each speaker, waveform and text; `seed` holds the sampling seed.
pub fn generate_listeners(
    model: &ListenerModel,
    vq: &VqVae,
    inputs: &[DyadSample],
    k: usize,
    seed: u64,
) -> Result<Vec<DyadSample>> {
    model.check_quantizer(vq)?;
    let jobs: Vec<(usize, usize)> = (0..inputs.len()).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    jobs.par_iter()
        .map(|&(i, j)| {
            let input = &inputs[i];
            let s = seed.wrapping_add((i * k + j) as u64);
            let features = model.features(&model.raw_of(input)?)?;
            let (_, motion) = model.generate(&features, vq, input.speaker.fps(), &mut ChaCha8Rng::seed_from_u64(s))?;
            Ok(DyadSample {
                listener: motion,
                seed: s,
                ..input.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub inputs: usize,
    pub outputs: usize,
    pub frames: usize,
    pub width: usize,
    pub path: PathBuf,
    pub run_hash: String,
}

pub fn cmd_generate(config: &RunConfig, input: Option<&Path>) -> Result<GenerateSummary> {
    config.validate()?;
    let input_path = input.map_or_else(|| config.path("test.dlds"), Path::to_path_buf);
    let inputs = read_required(&input_path, "speaker input")?;
    let vq = load_vqvae(&config.path("vqvae.ckpt"))?;
    let mut model = load_listener(&config.path("diffusion.ckpt"))?;
    model.check_quantizer(&vq)?;
    if model.config.fusion.cond_dim != config.listener.fusion.cond_dim {
        return Err(Error::Mismatch {
            field: "d_cond".into(),
            reason: format!(
                "checkpoint has {}, config asks for {}",
                model.config.fusion.cond_dim, config.listener.fusion.cond_dim
            ),
        });
    }
    // switches are an inference-time choice
    model.config.switches = config.listener.switches;
    let generated = generate_listeners(
        &model,
        &vq,
        &inputs.samples,
        config.samples_per_input,
        config.seed.wrapping_add(2),
    )?;
    let out = Dataset::new(
        generated,
        inputs.fps,
        serde_json::json!({
            "role": "generated",
            "input": inputs.config,
            "samples_per_input": config.samples_per_input,
            "switches": model.config.switches,
            "run_hash": config.run_hash(),
        }),
    );
    let path = config.path("generated.dlds");
    write_dataset(&out, &path)?;
    Ok(GenerateSummary {
        inputs: inputs.len(),
        outputs: out.len(),
        frames: out.samples.first().map_or(0, |s| s.listener.len()),
        width: out.samples.first().map_or(0, |s| s.listener.width()),
        path,
        run_hash: config.run_hash(),
    })
}

/// Scores generated records against references; with several samples per
/// input each reference is repeated to line up with its samples.
pub fn evaluate_corpora(
    label: &str,
    generated: &[DyadSample],
    reference: &[DyadSample],
    provenance: serde_json::Value,
) -> Result<MetricReport> {
    if reference.is_empty() || generated.len() % reference.len() != 0 {
        return Err(Error::invalid(format!(
            "corpus mismatch: {} generated records for {} references",
            generated.len(),
            reference.len()
        )));
    }
    let k = generated.len() / reference.len();
    let gen: Vec<DyadPair> = generated.iter().map(DyadSample::pair).collect();
    let refs: Vec<DyadPair> = (0..generated.len()).map(|i| reference[i / k].pair()).collect();
    for (i, (g, r)) in gen.iter().zip(&refs).enumerate() {
        if g.speaker != r.speaker {
            return Err(Error::invalid(format!(
                "corpus mismatch: generated record {i} was conditioned on a different speaker"
            )));
        }
    }
    MetricReport::evaluate(label, &gen, &refs, provenance)
}

pub fn cmd_evaluate(
    config: &RunConfig,
    generated: Option<&Path>,
    reference: Option<&Path>,
) -> Result<MetricReport> {
    let gen_path = generated.map_or_else(|| config.path("generated.dlds"), Path::to_path_buf);
    let ref_path = reference.map_or_else(|| config.path("test.dlds"), Path::to_path_buf);
    let gen = read_required(&gen_path, "generated corpus")?;
    let reference = read_required(&ref_path, "reference corpus")?;
    let switches = gen.config.get("switches").cloned().unwrap_or(serde_json::Value::Null);
    let label = serde_json::from_value::<ModalitySwitches>(switches.clone())
        .map(|s| s.label())
        .unwrap_or_else(|_| "generated".into());
    let report = evaluate_corpora(
        &label,
        &gen.samples,
        &reference.samples,
        serde_json::json!({
            "switches": switches,
            "generated": gen_path,
            "reference": ref_path,
            "run_hash": config.run_hash(),
        }),
    )?;
    write_text(&config.path("report.json"), &report.to_json())?;
    write_text(
        &config.path("report.txt"),
        &format!("run {}\n{}", config.run_hash(), report.to_table()),
    )?;
    Ok(report)
}

/// Reads any checkpoint and summarizes it as JSON.
pub fn cmd_inspect(path: &Path) -> Result<serde_json::Value> {
    let file = TensorFile::read(path)?;
    let params: usize = file
        .tensors
        .iter()
        .map(|(_, m)| m.len())
        .sum();
    match file.kind.as_str() {
        VQVAE_KIND => {
            let model = VqVae::from_tensor_file(&file)?;
            Ok(serde_json::json!({
                "kind": VQVAE_KIND,
                "codebook_size": model.config.codebook_size,
                "code_dim": model.config.code_dim,
                "usage": model.usage,
                "perplexity": model.usage_perplexity(),
                "parameters": model.params.scalar_count(),
                "stored_scalars": params,
                "epochs_trained": model.epochs_trained,
                "config_hash": file.meta["config_hash"],
                "run_hash": file.meta["run_hash"],
            }))
        }
        DIFFUSION_KIND => {
            let model = ListenerModel::from_tensor_file(&file)?;
            let sched = &model.schedule;
            let mask_curve: Vec<f64> = sched.gamma_bar().to_vec();
            Ok(serde_json::json!({
                "kind": DIFFUSION_KIND,
                "vocab": model.vocab,
                "positions": model.positions(),
                "steps": sched.steps(),
                "gamma_bar": mask_curve,
                "gamma_bar_final": sched.gamma_bar()[sched.steps()],
                "switches": model.config.switches,
                "parameters": model.params.scalar_count(),
                "stored_scalars": params,
                "epochs_trained": model.epochs_trained,
                "config_hash": file.meta["config_hash"],
                "run_hash": file.meta["run_hash"],
            }))
        }
        other => Err(Error::format(16, format!("unknown checkpoint kind `{other}`"))),
    }
}

/// Trains everything in memory and scores one model per switch setting
/// against the test corpus. The quantizer is shared across variants.
pub fn run_ablation(config: &RunConfig, variants: &[ModalitySwitches]) -> Result<Vec<MetricReport>> {
    let (train, test) = synthesize(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (vq, _) = train_vqvae(&listeners(&train), &config.quantizer, &mut rng)?;
    variants
        .iter()
        .map(|&switches| {
            let lc = ListenerConfig {
                switches,
                ..config.listener.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
            let (model, _) = train_listener(&train.samples, &vq, lc, &mut rng)?;
            let generated = generate_listeners(
                &model,
                &vq,
                &test.samples,
                config.samples_per_input,
                config.seed.wrapping_add(2),
            )?;
            evaluate_corpora(
                &switches.label(),
                &generated,
                &test.samples,
                serde_json::json!({
                    "switches": switches,
                    "epochs_trained": model.epochs_trained,
                    "run_hash": config.run_hash(),
                }),
            )
        })
        .collect()
}

/// One end-to-end run per codebook size.
pub fn run_codebook_sweep(config: &RunConfig, sizes: &[usize]) -> Result<Vec<MetricReport>> {
    let (train, test) = synthesize(config)?;
    sizes
        .iter()
        .map(|&k| {
            let qc = VqConfig {
                codebook_size: k,
                ..config.quantizer.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let (vq, _) = train_vqvae(&listeners(&train), &qc, &mut rng)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
            let (model, _) = train_listener(&train.samples, &vq, config.listener.clone(), &mut rng)?;
            let generated = generate_listeners(
                &model,
                &vq,
                &test.samples,
                config.samples_per_input,
                config.seed.wrapping_add(2),
            )?;
            evaluate_corpora(
                &format!("K={k}"),
                &generated,
                &test.samples,
                serde_json::json!({
                    "codebook_size": k,
                    "perplexity": vq.usage_perplexity(),
                    "epochs_trained": model.epochs_trained,
                    "run_hash": config.run_hash(),
                }),
            )
        })
        .collect()
}

/// Writes `dir/<slug>.json` per report plus a combined `dir/table.txt`.
pub fn write_reports(config: &RunConfig, dir: &str, reports: &[MetricReport]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for r in reports {
        let slug: String = r
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        let p = config.path(dir).join(format!("{slug}.json"));
        write_text(&p, &r.to_json())?;
        paths.push(p);
    }
    write_text(
        &config.path(dir).join("table.txt"),
        &format!("run {}\n{}", config.run_hash(), table(reports)),
    )?;
    Ok(paths)
}

/// Pairs each speaker with a different record's listener (cyclic shift by
/// half the corpus), the shuffled-listener baseline.
pub fn shuffled_pairs(samples: &[DyadSample]) -> Vec<DyadSample> {
    let n = samples.len();
    let shift = (n / 2).max(1);
    (0..n)
        .map(|i| DyadSample {
            listener: samples[(i + shift) % n].listener.clone(),
            ..samples[i].clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
        let partial = RunConfig::from_json(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert!(matches!(
            RunConfig::from_json(r#"{"sede": 9}"#),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn partial_config_fills_from_the_given_preset() {
        let desk = RunConfig::desk();
        let c = RunConfig::from_json_over(r#"{"seed": 4, "quantizer": {"ema_decay": 0.5}}"#, &desk).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.quantizer.ema_decay, 0.5);
        assert_eq!(c.quantizer.codebook_size, desk.quantizer.codebook_size);
        assert_eq!(c.listener, desk.listener);
        assert!(RunConfig::from_json_over(r#"{"quantizer": {"bta": 1}}"#, &desk).is_err());
        let lr = RunConfig::from_json(r#"{"listener": {"optimizer": {"lr": 0.5}}}"#).unwrap();
        assert_eq!(lr.listener.optimizer.lr, 0.5);
        assert!(RunConfig::from_json(r#"{"listener": {"optimizer": {"lrr": 1}}}"#).is_err());
        assert!(RunConfig::from_json_over("[1]", &desk).is_err());
    }

    #[test]
    fn run_hash_ignores_the_output_directory() {
        let a = RunConfig::desk();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.run_hash(), b.run_hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.run_hash(), c.run_hash());
    }

    #[test]
    fn indivisible_length_names_the_constraint() {
        let mut c = RunConfig::desk();
        c.data.frames = 244;
        let err = c.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn stage_disagreement_is_a_config_error() {
        let mut c = RunConfig::desk();
        c.listener.fusion.pool_stride = 4;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("τ")));
        let mut c = RunConfig::desk();
        c.quantizer.motion_dim = 9;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("d_f")));
    }

    #[test]
    fn hash_column_is_appended_to_every_row() {
        let csv = "a,b\n1,2\n3,4\n";
        assert_eq!(with_hash_column(csv, "h"), "a,b,config_hash\n1,2,h\n3,4,h\n");
    }

    #[test]
    fn shuffled_pairs_keep_speakers_and_move_listeners() {
        let data = DyadConfig {
            frames: 16,
            expression_dim: 3,
            ..DyadConfig::default()
        };
        let s = crate::synth::generate_corpus(&data, 4).unwrap();
        let sh = shuffled_pairs(&s);
        for i in 0..4 {
            assert_eq!(sh[i].speaker, s[i].speaker);
            assert_eq!(sh[i].listener, s[(i + 2) % 4].listener);
        }
    }
}
