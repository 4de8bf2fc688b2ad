use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::VqVae;
use super::{LossBreakdown, VqConfig};
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, NormStats};
use crate::optim::Adam;
use crate::tensor::Mat;
use crate::training::{split_indices, EarlyStopping};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub perplexity: f64,
    pub reseeded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLosses>,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,train_total,train_embed,train_reconstruction,train_velocity,\
             val_total,val_embed,val_reconstruction,val_velocity,perplexity,reseeded\n",
        );
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.train.total,
                e.train.embed,
                e.train.reconstruction,
                e.train.velocity,
                e.val.total,
                e.val.embed,
                e.val.reconstruction,
                e.val.velocity,
                e.perplexity,
                e.reseeded
            ));
        }
        out
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut out = LossBreakdown {
        embed: 0.0,
        reconstruction: 0.0,
        velocity: 0.0,
        total: 0.0,
    };
    for l in items {
        out.embed += l.embed / n;
        out.reconstruction += l.reconstruction / n;
        out.velocity += l.velocity / n;
        out.total += l.total / n;
    }
    out
}

fn validate_dataset(dataset: &[MotionSequence], config: &VqConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Training("empty training dataset".into()));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.width() != config.motion_dim {
            return Err(Error::invalid(format!(
                "sequence {i} has width {}, quantizer expects d_f = {}",
                s.width(),
                config.motion_dim
            )));
        }
        config.check_length(s.len())?;
    }
    Ok(())
}

/// Trains a fresh quantizer on raw (unnormalized) listener motion.
pub fn train_vqvae<R: Rng + ?Sized>(
    dataset: &[MotionSequence],
    config: &VqConfig,
    rng: &mut R,
) -> Result<(VqVae, TrainHistory)> {
    validate_dataset(dataset, config)?;
    let model = VqVae::new(config.clone(), rng)?;
    continue_training(model, dataset, true, rng)
}

/// Continues training `model`; epoch numbering resumes from
/// `model.epochs_trained`. With `refit` the normalization statistics and
/// codebook are (re)initialized from the data.
pub fn continue_training<R: Rng + ?Sized>(
    mut model: VqVae,
    dataset: &[MotionSequence],
    refit: bool,
    rng: &mut R,
) -> Result<(VqVae, TrainHistory)> {
    let config = model.config.clone();
    validate_dataset(dataset, &config)?;
    let (train_idx, val_idx) = split_indices(dataset.len(), config.val_fraction, rng);
    if refit {
        model.norm = NormStats::fit(train_idx.iter().map(|&i| &dataset[i]))?;
    }
    let normed: Vec<Mat> = dataset
        .iter()
        .map(|s| model.norm.normalize(s).map(MotionSequence::into_frames))
        .collect::<Result<_>>()?;
    if refit {
        init_codebook_from_data(&mut model, &normed, &train_idx, rng);
    }

    let mut opt = Adam::new(config.optimizer, &model.params);
    let mut history = TrainHistory::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut averaged = model.params.clone();
    let mut steps = 0usize;
    let mut order = train_idx.clone();
    let k = config.codebook_size;

    for _ in 0..config.max_epochs {
        let epoch = model.epochs_trained;
        order.shuffle(rng);
        let mut usage = vec![0.0; k];
        let mut batch_losses = Vec::new();
        let mut pool: Vec<Vec<f64>> = Vec::new();

        for batch in order.chunks(config.batch_size) {
            let outs: Vec<_> = batch
                .par_iter()
                .map(|&i| model.forward(&normed[i], true))
                .collect();
            let mut grads = model.params.zero_grads();
            let mut counts = vec![0.0; k];
            let mut sums = Mat::zeros(k, config.code_dim);
            for out in &outs {
                if !out.losses.total.is_finite() {
                    return Err(Error::Training(format!(
                        "quantizer loss became non-finite at epoch {epoch}"
                    )));
                }
                grads.add_assign(out.grads.as_ref().expect("requested grads"));
                for (row, &t) in out.latents.iter_rows().zip(&out.tokens) {
                    counts[t] += 1.0;
                    for (s, v) in sums.row_mut(t).iter_mut().zip(row) {
                        *s += v;
                    }
                }
                batch_losses.push(out.losses);
                if let Some(row) = out.latents.iter_rows().next() {
                    pool.push(row.to_vec());
                }
                let mid = out.latents.rows() / 2;
                pool.push(out.latents.row(mid).to_vec());
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Training(format!(
                    "quantizer gradient became non-finite at epoch {epoch}"
                )));
            }
            opt.step(&mut model.params, &mut grads, &[]);
            if config.weight_average > 0.0 {
                // short warm-up so the average is not anchored to the initialization
                let decay = config.weight_average.min((1 + steps) as f64 / (10 + steps) as f64);
                averaged.move_toward(&model.params, 1.0 - decay);
                steps += 1;
            }
            ema_update(&mut model, &counts, &sums);
            for (u, c) in usage.iter_mut().zip(&counts) {
                *u += c;
            }
        }

        let mut reseeded = 0;
        if config.reseed_dead_codes && !pool.is_empty() {
            for code in 0..k {
                if usage[code] == 0.0 {
                    let pick = &pool[rng.random_range(0..pool.len())];
                    let noisy: Vec<f64> = pick
                        .iter()
                        .map(|v| v + 1e-3 * rng.random_range(-1.0..1.0))
                        .collect();
                    model.codebook.codes_mut().row_mut(code).copy_from_slice(&noisy);
                    model.ema.counts[code] = 1.0;
                    model.ema.sums.row_mut(code).copy_from_slice(&noisy);
                    reseeded += 1;
                }
            }
        }
        model.usage = usage;
        model.epochs_trained += 1;

        let train = mean_breakdown(&batch_losses);
        let eval = if config.weight_average > 0.0 {
            let mut m = model.clone();
            m.params = averaged.clone();
            m
        } else {
            model.clone()
        };
        let val = if val_idx.is_empty() {
            train
        } else {
            let vals: Vec<LossBreakdown> = val_idx
                .par_iter()
                .map(|&i| eval.forward(&normed[i], false).losses)
                .collect();
            mean_breakdown(&vals)
        };
        if !val.total.is_finite() {
            return Err(Error::Training(format!(
                "validation loss became non-finite at epoch {epoch}"
            )));
        }
        history.epochs.push(EpochLosses {
            epoch,
            train,
            val,
            perplexity: model.usage_perplexity(),
            reseeded,
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
    // the history keeps counting from the last epoch actually run
    best.epochs_trained = model.epochs_trained;
    Ok((best, history))
}

fn init_codebook_from_data<R: Rng + ?Sized>(
    model: &mut VqVae,
    normed: &[Mat],
    train_idx: &[usize],
    rng: &mut R,
) {
    let mut latents: Vec<Vec<f64>> = Vec::new();
    for &i in train_idx.iter().take(64) {
        let seq = MotionSequence::new(normed[i].clone(), 30).expect("validated sequence");
        if let Ok(z) = model.encode(&seq) {
            latents.extend(z.latents().iter_rows().map(<[f64]>::to_vec));
        }
    }
    if latents.is_empty() {
        return;
    }
    latents.shuffle(rng);
    let k = model.config.codebook_size;
    for code in 0..k {
        let base = &latents[code % latents.len()];
        let row: Vec<f64> = base
            .iter()
            .map(|v| v + 1e-3 * rng.random_range(-1.0..1.0))
            .collect();
        model.codebook.codes_mut().row_mut(code).copy_from_slice(&row);
        model.ema.sums.row_mut(code).copy_from_slice(&row);
        model.ema.counts[code] = 1.0;
    }
}

fn ema_update(model: &mut VqVae, counts: &[f64], sums: &Mat) {
    let decay = model.config.ema_decay;
    let k = counts.len();
    for code in 0..k {
        model.ema.counts[code] = decay * model.ema.counts[code] + (1.0 - decay) * counts[code];
        for (s, v) in model.ema.sums.row_mut(code).iter_mut().zip(sums.row(code)) {
            *s = decay * *s + (1.0 - decay) * v;
        }
    }
    let total: f64 = model.ema.counts.iter().sum();
    let eps = 1e-5;
    for code in 0..k {
        let smoothed = (model.ema.counts[code] + eps) / (total + k as f64 * eps) * total;
        let sums_row = model.ema.sums.row(code).to_vec();
        for (c, s) in model.codebook.codes_mut().row_mut(code).iter_mut().zip(&sums_row) {
            *c = s / smoothed;
        }
    }
}
