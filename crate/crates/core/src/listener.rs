//! The conditional generator: the fusion network and the token denoiser
//! trained jointly on one parameter store, plus feature extraction from raw
//! speaker records, the training loop and the `diffusion` checkpoint.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Grads, Graph, ParamStore};
use crate::conditioning::{
    mfcc, resample_rows, FusedCondition, FusionConfig, FusionNetwork, MfccConfig,
    ModalitySwitches, SpeakerFeatures, TextEmbedder, TextEmbedding,
};
use crate::container::{config_hash, TensorFile};
use crate::diffusion::{
    loss_graph, q_sample, sample, DiffusionConfig, DiffusionSchedule, Denoiser, X0Predictor,
};
use crate::error::{Error, Result};
use crate::motion::{differential_of, MotionSequence, NormStats};
use crate::optim::{Adam, AdamConfig};
use crate::quantizer::{TokenSequence, VqVae};
use crate::synth::DyadSample;
use crate::tensor::Mat;
use crate::training::{item_rng, split_indices, EarlyStopping};

pub const DIFFUSION_KIND: &str = "diffusion";

const VAL_SEED: u64 = 0x7A11_DA7E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ListenerConfig {
    pub fusion: FusionConfig,
    /// `denoiser.positions` is overwritten with `T/τ` when the model is built.
    pub diffusion: DiffusionConfig,
    pub text: TextEmbedder,
    pub audio: MfccConfig,
    pub switches: ModalitySwitches,
    pub optimizer: AdamConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// Timesteps drawn per training item per epoch.
    pub draws_per_item: usize,
    /// Evenly spaced timesteps scored per validation item.
    pub val_draws: usize,
    /// Decay of a running weight average used for validation and for the
    /// returned model; 0 disables it.
    pub weight_average: f64,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        ListenerConfig {
            fusion: FusionConfig::default(),
            diffusion: DiffusionConfig::default(),
            text: TextEmbedder::default(),
            audio: MfccConfig::default(),
            switches: ModalitySwitches::all(),
            optimizer: AdamConfig::default(),
            max_epochs: 200,
            batch_size: 16,
            patience: 5,
            val_fraction: 0.1,
            draws_per_item: 1,
            val_draws: 10,
            weight_average: 0.99,
        }
    }
}

impl ListenerConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.diffusion.validate()?;
        self.audio.validate()?;
        if self.text.dim != self.fusion.text_dim {
            return Err(Error::config(format!(
                "text embedder dim {} differs from fusion text_dim {}",
                self.text.dim, self.fusion.text_dim
            )));
        }
        if self.batch_size == 0 || self.draws_per_item == 0 {
            return Err(Error::config("batch_size and draws_per_item must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.weight_average) {
            return Err(Error::config("weight_average must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Z-score statistics of the three frame-level speaker inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorms {
    pub motion: NormStats,
    pub delta: NormStats,
    pub audio: NormStats,
}

/// Unnormalized frame-aligned speaker inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSpeaker {
    pub motion: Mat,
    pub delta: Mat,
    pub audio: Mat,
    pub text: TextEmbedding,
}

/// MFCCs resampled to the motion length, differentials and the text vector.
pub fn raw_speaker(
    speaker: &MotionSequence,
    waveform: &[f64],
    text: TextEmbedding,
    audio: &MfccConfig,
) -> Result<RawSpeaker> {
    let feats = mfcc(waveform, audio)?;
    Ok(RawSpeaker {
        motion: speaker.frames().clone(),
        delta: differential_of(speaker.frames()),
        audio: resample_rows(&feats.frames, speaker.len()),
        text,
    })
}

/// One training example: conditioning inputs and the target tokens.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub features: SpeakerFeatures,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossAverages {
    pub total: f64,
    pub vlb: f64,
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEpoch {
    pub epoch: usize,
    pub train: LossAverages,
    pub val: LossAverages,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionHistory {
    pub epochs: Vec<DiffusionEpoch>,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
}

impl DiffusionHistory {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,train_total,train_vlb,train_x0,val_total,val_vlb,val_x0,grad_norm\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch, e.train.total, e.train.vlb, e.train.x0, e.val.total, e.val.vlb, e.val.x0, e.grad_norm
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ListenerModel {
    pub config: ListenerConfig,
    pub vocab: usize,
    pub motion_dim: usize,
    pub audio_dim: usize,
    /// Frames per clip, `T`.
    pub frames: usize,
    pub params: ParamStore,
    fusion: FusionNetwork,
    denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub norms: FeatureNorms,
    pub epochs_trained: usize,
}

/// Prediction of `x̃_0` under a fixed fused condition.
pub struct ConditionedDenoiser<'a> {
    model: &'a ListenerModel,
    cond: Mat,
}

impl X0Predictor for ConditionedDenoiser<'_> {
    fn predict_x0(&self, xt: &TokenSequence, t: usize) -> Result<Mat> {
        let mut g = Graph::new(&self.model.params);
        let c = g.constant(self.cond.clone());
        let logits = self.model.denoiser.logits_graph(&mut g, xt, t, c)?;
        Ok(softmax_rows(g.value(logits)))
    }
}

impl ListenerModel {
    pub fn new<R: Rng + ?Sized>(
        mut config: ListenerConfig,
        vocab: usize,
        motion_dim: usize,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let stride = config.fusion.pool_stride;
        if stride == 0 || frames == 0 || frames % stride != 0 {
            return Err(Error::config(format!(
                "T = {frames} is not divisible by the pooling stride τ = {stride}"
            )));
        }
        config.diffusion.denoiser.positions = frames / stride;
        config.validate()?;
        let schedule = config.diffusion.build(vocab)?;
        let audio_dim = config.audio.n_mfcc;
        let mut params = ParamStore::new();
        let fusion = FusionNetwork::new(&mut params, config.fusion, motion_dim, audio_dim, rng)?;
        let denoiser = Denoiser::new(
            &mut params,
            config.diffusion.denoiser,
            vocab,
            config.fusion.cond_dim,
            rng,
        )?;
        Ok(ListenerModel {
            norms: FeatureNorms {
                motion: NormStats::identity(motion_dim),
                delta: NormStats::identity(motion_dim),
                audio: NormStats::identity(audio_dim),
            },
            config,
            vocab,
            motion_dim,
            audio_dim,
            frames,
            params,
            fusion,
            denoiser,
            schedule,
            epochs_trained: 0,
        })
    }

    /// Token positions `N`.
    pub fn positions(&self) -> usize {
        self.config.diffusion.denoiser.positions
    }

    /// Fails with a `Mismatch` naming `K`, `tau` or `d_f` when `vq` cannot
    /// produce this model's targets.
    pub fn check_quantizer(&self, vq: &VqVae) -> Result<()> {
        let mismatch = |field: &str, ours: usize, theirs: usize| Error::Mismatch {
            field: field.into(),
            reason: format!("diffusion model uses {ours}, quantizer checkpoint has {theirs}"),
        };
        if vq.config.codebook_size != self.vocab {
            return Err(mismatch("K", self.vocab, vq.config.codebook_size));
        }
        if vq.config.downsample != self.config.fusion.pool_stride {
            return Err(mismatch("tau", self.config.fusion.pool_stride, vq.config.downsample));
        }
        if vq.config.motion_dim != self.motion_dim {
            return Err(mismatch("d_f", self.motion_dim, vq.config.motion_dim));
        }
        Ok(())
    }

    pub fn text_of(&self, tokens: &[u32]) -> Result<TextEmbedding> {
        self.config.text.embed(tokens)
    }

    pub fn raw_of(&self, sample: &DyadSample) -> Result<RawSpeaker> {
        raw_speaker(
            &sample.speaker,
            &sample.waveform,
            self.text_of(&sample.text_tokens)?,
            &self.config.audio,
        )
    }

    pub fn fit_norms(&mut self, raws: &[&RawSpeaker]) -> Result<()> {
        self.norms = FeatureNorms {
            motion: NormStats::fit_rows(raws.iter().map(|r| &r.motion))?,
            delta: NormStats::fit_rows(raws.iter().map(|r| &r.delta))?,
            audio: NormStats::fit_rows(raws.iter().map(|r| &r.audio))?,
        };
        Ok(())
    }

    pub fn features(&self, raw: &RawSpeaker) -> Result<SpeakerFeatures> {
        if raw.motion.rows() != self.frames {
            return Err(Error::invalid(format!(
                "speaker clip has {} frames, model expects T = {}",
                raw.motion.rows(),
                self.frames
            )));
        }
        if raw.text.dim() != self.config.fusion.text_dim {
            return Err(Error::Mismatch {
                field: "d_text".into(),
                reason: format!(
                    "text embedding has {} dims, model expects {}",
                    raw.text.dim(),
                    self.config.fusion.text_dim
                ),
            });
        }
        Ok(SpeakerFeatures {
            motion: self.norms.motion.apply(&raw.motion)?,
            delta: self.norms.delta.apply(&raw.delta)?,
            audio: self.norms.audio.apply(&raw.audio)?,
            text: raw.text.vector.clone(),
        })
    }

    pub fn condition(&self, features: &SpeakerFeatures) -> Result<FusedCondition> {
        self.fusion.fuse(&self.params, features, self.config.switches)
    }

    pub fn predictor(&self, features: &SpeakerFeatures) -> Result<ConditionedDenoiser<'_>> {
        Ok(ConditionedDenoiser {
            model: self,
            cond: self.condition(features)?.vectors,
        })
    }

    pub fn sample_tokens<R: Rng + ?Sized>(&self, features: &SpeakerFeatures, rng: &mut R) -> Result<TokenSequence> {
        let p = self.predictor(features)?;
        sample(&p, self.positions(), &self.schedule, rng)
    }

    /// Full generation: condition, sample tokens, decode and denormalize.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        features: &SpeakerFeatures,
        vq: &VqVae,
        fps: u32,
        rng: &mut R,
    ) -> Result<(TokenSequence, MotionSequence)> {
        self.check_quantizer(vq)?;
        let tokens = self.sample_tokens(features, rng)?;
        let motion = vq.decode_to_motion(&tokens, fps)?;
        Ok((tokens, motion))
    }

    pub fn prepare(&self, sample: &DyadSample, vq: &VqVae) -> Result<TrainingItem> {
        let features = self.features(&self.raw_of(sample)?)?;
        let tokens = vq.encode_to_tokens(&sample.listener)?;
        Ok(TrainingItem { features, tokens })
    }

    /// Loss (and optionally its parameter gradient) at a given `(t, x_t)`.
    pub fn loss_at(
        &self,
        item: &TrainingItem,
        t: usize,
        xt: &TokenSequence,
        with_grads: bool,
    ) -> Result<(LossAverages, Option<Grads>)> {
        let mut g = Graph::new(&self.params);
        let cond = self.fusion.forward_graph(&mut g, &item.features, self.config.switches)?;
        let logits = self.denoiser.logits_graph(&mut g, xt, t, cond)?;
        let nodes = loss_graph(
            &mut g,
            logits,
            &item.tokens,
            xt,
            t,
            &self.schedule,
            self.config.diffusion.lambda,
        )?;
        let losses = LossAverages {
            total: g.scalar(nodes.total),
            vlb: g.scalar(nodes.vlb),
            x0: g.scalar(nodes.x0),
        };
        let grads = with_grads.then(|| g.backward(nodes.total));
        Ok((losses, grads))
    }

    fn draw_loss<R: Rng + ?Sized>(
        &self,
        item: &TrainingItem,
        draws: usize,
        with_grads: bool,
        rng: &mut R,
    ) -> Result<(LossAverages, Option<Grads>)> {
        let mut sum = LossAverages::default();
        let mut grads: Option<Grads> = None;
        for _ in 0..draws {
            let t = rng.random_range(1..=self.schedule.steps());
            let xt = q_sample(&item.tokens, t, &self.schedule, rng)?;
            let (l, g) = self.loss_at(item, t, &xt, with_grads)?;
            sum.total += l.total / draws as f64;
            sum.vlb += l.vlb / draws as f64;
            sum.x0 += l.x0 / draws as f64;
            if let Some(g) = g {
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            g.scale(1.0 / draws as f64);
        }
        Ok((sum, grads))
    }

    /// Mean loss over `items` at `val_draws` evenly spaced timesteps (the
    /// same steps and corruption draws every epoch), a low-variance estimate
    /// of the bound for early stopping.
    pub fn validation_loss(&self, items: &[TrainingItem]) -> Result<LossAverages> {
        let draws = self.config.val_draws.max(1);
        let steps = self.schedule.steps();
        let losses: Vec<LossAverages> = items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let mut rng = item_rng(VAL_SEED, 0, i);
                let mut parts = Vec::with_capacity(draws);
                for j in 0..draws {
                    let t = 1 + ((j as f64 + 0.5) * steps as f64 / draws as f64) as usize;
                    let t = t.min(steps);
                    let xt = q_sample(&item.tokens, t, &self.schedule, &mut rng)?;
                    parts.push(self.loss_at(item, t, &xt, false)?.0);
                }
                Ok(mean_losses(&parts))
            })
            .collect::<Result<_>>()?;
        Ok(mean_losses(&losses))
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let tensors = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.values().iter().cloned())
            .collect();
        TensorFile {
            kind: DIFFUSION_KIND.into(),
            meta: serde_json::json!({
                "config": self.config,
                "config_hash": config_hash(&self.config),
                "vocab": self.vocab,
                "motion_dim": self.motion_dim,
                "frames": self.frames,
                "norms": self.norms,
                "epochs_trained": self.epochs_trained,
                "gamma_bar_final": self.schedule.gamma_bar()[self.schedule.steps()],
            }),
            tensors,
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        if file.kind != DIFFUSION_KIND {
            return Err(Error::format(
                16,
                format!("expected a `{DIFFUSION_KIND}` checkpoint, found `{}`", file.kind),
            ));
        }
        let field = |name: &str| -> Result<usize> {
            file.meta[name]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::format(16, format!("checkpoint meta lacks `{name}`")))
        };
        let config: ListenerConfig = serde_json::from_value(file.meta["config"].clone())
            .map_err(|e| Error::format(16, format!("bad diffusion config: {e}")))?;
        let norms: FeatureNorms = serde_json::from_value(file.meta["norms"].clone())
            .map_err(|e| Error::format(16, format!("bad feature statistics: {e}")))?;
        let mut model = ListenerModel::new(
            config,
            field("vocab")?,
            field("motion_dim")?,
            field("frames")?,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        for id in 0..model.params.len() {
            let name = model.params.name(id).to_string();
            let t = file.tensor(&name)?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Mismatch {
                    reason: format!(
                        "stored shape {:?}, config implies {:?}",
                        t.shape(),
                        model.params.get(id).shape()
                    ),
                    field: name,
                });
            }
            *model.params.get_mut(id) = t.clone();
        }
        if norms.motion.width() != model.motion_dim || norms.audio.width() != model.audio_dim {
            return Err(Error::Mismatch {
                field: "norms".into(),
                reason: "feature statistics disagree with the model widths".into(),
            });
        }
        model.norms = norms;
        model.epochs_trained = field("epochs_trained")?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ListenerModel::from_tensor_file(&TensorFile::read(path)?)
    }
}

fn mean_losses(items: &[LossAverages]) -> LossAverages {
    let n = items.len().max(1) as f64;
    let mut out = LossAverages::default();
    for l in items {
        out.total += l.total / n;
        out.vlb += l.vlb / n;
        out.x0 += l.x0 / n;
    }
    out
}

fn check_corpus(samples: &[DyadSample], motion_dim: usize, frames: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Training("empty training dataset".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.speaker.len() != frames || s.listener.len() != frames {
            return Err(Error::invalid(format!(
                "record {i} has {} frames, expected {frames}",
                s.speaker.len()
            )));
        }
        if s.speaker.width() != motion_dim || s.listener.width() != motion_dim {
            return Err(Error::invalid(format!(
                "record {i} has width {}, expected d_f = {motion_dim}",
                s.speaker.width()
            )));
        }
    }
    Ok(())
}

/// Trains a fresh generator against a frozen quantizer.
pub fn train_listener<R: Rng + ?Sized>(
    samples: &[DyadSample],
    vq: &VqVae,
    config: ListenerConfig,
    rng: &mut R,
) -> Result<(ListenerModel, DiffusionHistory)> {
    let frames = samples
        .first()
        .map(|s| s.speaker.len())
        .ok_or_else(|| Error::Training("empty training dataset".into()))?;
    let model = ListenerModel::new(config, vq.config.codebook_size, vq.config.motion_dim, frames, rng)?;
    continue_listener_training(model, samples, vq, true, rng)
}

/// Continues training; epoch numbering resumes from `model.epochs_trained`.
/// With `refit` the speaker feature statistics are fitted on the training split.
pub fn continue_listener_training<R: Rng + ?Sized>(
    mut model: ListenerModel,
    samples: &[DyadSample],
    vq: &VqVae,
    refit: bool,
    rng: &mut R,
) -> Result<(ListenerModel, DiffusionHistory)> {
    model.check_quantizer(vq)?;
    check_corpus(samples, model.motion_dim, model.frames)?;
    let config = model.config.clone();
    let (train_idx, val_idx) = split_indices(samples.len(), config.val_fraction, rng);
    let raws: Vec<RawSpeaker> = samples
        .par_iter()
        .map(|s| model.raw_of(s))
        .collect::<Result<_>>()?;
    if refit {
        let train_raws: Vec<&RawSpeaker> = train_idx.iter().map(|&i| &raws[i]).collect();
        model.fit_norms(&train_raws)?;
    }
    let items: Vec<TrainingItem> = raws
        .par_iter()
        .zip(samples.par_iter())
        .map(|(raw, s)| {
            Ok(TrainingItem {
                features: model.features(raw)?,
                tokens: vq.encode_to_tokens(&s.listener)?,
            })
        })
        .collect::<Result<_>>()?;
    let val_items: Vec<TrainingItem> = val_idx.iter().map(|&i| items[i].clone()).collect();

    let mut opt = Adam::new(config.optimizer, &model.params);
    let mut history = DiffusionHistory::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut averaged = model.params.clone();
    let mut steps = 0usize;
    let mut order = train_idx.clone();
    let run_seed: u64 = rng.random();

    for _ in 0..config.max_epochs {
        let epoch = model.epochs_trained;
        order.shuffle(rng);
        let mut batch_losses = Vec::new();
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let outs: Vec<(LossAverages, Option<Grads>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut r = item_rng(run_seed, epoch, i);
                    model.draw_loss(&items[i], config.draws_per_item, true, &mut r)
                })
                .collect::<Result<_>>()?;
            let mut grads = model.params.zero_grads();
            for (l, g) in &outs {
                if !l.total.is_finite() {
                    return Err(Error::Training(format!(
                        "diffusion loss became non-finite at epoch {epoch}"
                    )));
                }
                grads.add_assign(g.as_ref().expect("requested grads"));
                batch_losses.push(*l);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Training(format!(
                    "diffusion gradient became non-finite at epoch {epoch}"
                )));
            }
            norm_sum += opt.step(&mut model.params, &mut grads, &[]);
            batches += 1;
            if config.weight_average > 0.0 {
                let decay = config.weight_average.min((1 + steps) as f64 / (10 + steps) as f64);
                averaged.move_toward(&model.params, 1.0 - decay);
                steps += 1;
            }
        }
        model.epochs_trained += 1;
        let train = mean_losses(&batch_losses);
        let eval = if config.weight_average > 0.0 {
            let mut m = model.clone();
            m.params = averaged.clone();
            m
        } else {
            model.clone()
        };
        let val = if val_items.is_empty() {
            train
        } else {
            eval.validation_loss(&val_items)?
        };
        if !val.total.is_finite() {
            return Err(Error::Training(format!(
                "validation loss became non-finite at epoch {epoch}"
            )));
        }
        history.epochs.push(DiffusionEpoch {
            epoch,
            train,
            val,
            grad_norm: norm_sum / batches.max(1) as f64,
        });
        if stopper.observe(epoch, val.total) {
            best = eval;
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    best.epochs_trained = model.epochs_trained;
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;
    use crate::quantizer::VqConfig;
    use crate::synth::{generate_corpus, DyadConfig};

    fn tiny() -> (Vec<DyadSample>, VqVae, ListenerConfig) {
        let data = DyadConfig {
            frames: 32,
            expression_dim: 3,
            downsample: 8,
            ..DyadConfig::default()
        };
        let samples = generate_corpus(&data, 6).unwrap();
        let vq = VqVae::new(
            VqConfig {
                codebook_size: 5,
                code_dim: 4,
                hidden: 4,
                motion_dim: 6,
                ..VqConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let config = ListenerConfig {
            fusion: FusionConfig {
                width: 8,
                heads: 1,
                cond_dim: 8,
                mlp_hidden: 8,
                text_dim: 8,
                pool_stride: 8,
            },
            diffusion: DiffusionConfig {
                steps: 10,
                denoiser: DenoiserConfig {
                    width: 8,
                    depth: 1,
                    heads: 2,
                    positions: 0,
                },
                ..DiffusionConfig::default()
            },
            text: TextEmbedder { dim: 8, seed: 1 },
            max_epochs: 3,
            batch_size: 2,
            ..ListenerConfig::default()
        };
        (samples, vq, config)
    }

    #[test]
    fn training_runs_and_checkpoint_round_trips() {
        let (samples, vq, config) = tiny();
        let (model, history) =
            train_listener(&samples, &vq, config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(history.epochs.len(), 3);
        assert_eq!(history.to_csv().lines().count(), 4);
        assert_eq!(model.positions(), 4);
        let bytes = model.to_tensor_file().to_bytes();
        let back = ListenerModel::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_tensor_file().to_bytes(), bytes);

        let item = model.prepare(&samples[0], &vq).unwrap();
        let (tokens, motion) = model
            .generate(&item.features, &vq, 30, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert!(!tokens.contains_mask());
        assert_eq!(motion.frames().shape(), (32, 6));
        let again = back
            .generate(&item.features, &vq, 30, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(again.0, tokens);
    }

    #[test]
    fn resume_continues_epoch_numbering() {
        let (samples, vq, config) = tiny();
        let (model, _) = train_listener(&samples, &vq, config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, more) =
            continue_listener_training(model, &samples, &vq, false, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(more.epochs[0].epoch, 3);
    }

    #[test]
    fn quantizer_mismatch_names_the_field() {
        let (samples, _, config) = tiny();
        let other = VqVae::new(
            VqConfig {
                codebook_size: 7,
                code_dim: 4,
                hidden: 4,
                motion_dim: 6,
                ..VqConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let model = ListenerModel::new(config, 5, 6, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        match model.check_quantizer(&other) {
            Err(Error::Mismatch { field, .. }) => assert_eq!(field, "K"),
            other => panic!("expected a mismatch, got {other:?}"),
        }
        assert!(continue_listener_training(model, &samples, &other, true, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
