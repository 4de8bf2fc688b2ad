use rand::Rng;
use serde::{Deserialize, Serialize};

use super::posterior::{mean_kl, one_hot, q_posterior, q_sample, LOG_FLOOR};
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::quantizer::TokenSequence;
use crate::tensor::Mat;

/// Anything that predicts `p(x̃_0 | x_t)` as an `N×K` row-stochastic matrix.
pub trait X0Predictor {
    fn predict_x0(&self, xt: &TokenSequence, t: usize) -> Result<Mat>;
}

/// Emits the true `x_0` as one-hot rows, whatever it is shown.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub x0: TokenSequence,
}

impl X0Predictor for OracleDenoiser {
    fn predict_x0(&self, _xt: &TokenSequence, _t: usize) -> Result<Mat> {
        Ok(one_hot(&self.x0))
    }
}

/// Uniform over the K tokens at every position.
#[derive(Debug, Clone)]
pub struct UniformDenoiser {
    pub vocab: usize,
}

impl X0Predictor for UniformDenoiser {
    fn predict_x0(&self, xt: &TokenSequence, _t: usize) -> Result<Mat> {
        Ok(Mat::filled(xt.len(), self.vocab, 1.0 / self.vocab as f64))
    }
}

fn checked_prediction<P: X0Predictor + ?Sized>(
    model: &P,
    xt: &TokenSequence,
    t: usize,
    vocab: usize,
) -> Result<Mat> {
    let p = model.predict_x0(xt, t)?;
    if p.shape() != (xt.len(), vocab) {
        return Err(Error::Model(format!(
            "denoiser returned {:?}, expected {}×{vocab}",
            p.shape(),
            xt.len()
        )));
    }
    if let Some(i) = p.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Model(format!(
            "denoiser output is non-finite at position {}",
            i / vocab
        )));
    }
    Ok(p)
}

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = i;
        if u < p {
            return i;
        }
        u -= p;
    }
    last
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Reverse-step distribution `p_θ(x_{t−1} | x_t)` for `t ≥ 2`, `N×(K+1)`.
pub fn reverse_distribution<P: X0Predictor + ?Sized>(
    model: &P,
    xt: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Mat> {
    let p = checked_prediction(model, xt, t, sched.vocab())?;
    q_posterior(&p, xt, t, sched)
}

/// One reverse step. At `t = 1` the most likely `x̃_0` is returned, so the
/// output is mask-free.
pub fn p_sample<P: X0Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    xt: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    if t < 1 || t > sched.steps() {
        return Err(Error::invalid(format!(
            "step {t} outside 1..={}",
            sched.steps()
        )));
    }
    let k = sched.vocab();
    if t == 1 {
        let p = checked_prediction(model, xt, t, k)?;
        return TokenSequence::new(p.iter_rows().map(argmax).collect(), k);
    }
    let dist = reverse_distribution(model, xt, t, sched)?;
    TokenSequence::new(dist.iter_rows().map(|r| categorical(r, rng)).collect(), k)
}

/// Draws `x_{T_d}` from the prior and runs every reverse step down to 1.
pub fn sample<P: X0Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    len: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    let prior = sched.prior()?;
    let start: Vec<usize> = (0..len).map(|_| categorical(&prior, rng)).collect();
    let mut x = TokenSequence::new(start, sched.vocab())?;
    for t in (1..=sched.steps()).rev() {
        x = p_sample(model, &x, t, sched, rng)?;
    }
    Ok(x)
}

/// Per-call loss values, all averaged over positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLoss {
    pub step: usize,
    pub vlb: f64,
    pub x0: f64,
    pub prior: f64,
    pub total: f64,
}

/// Loss values for a given prediction `p̃` of `x_0` from `x_t`.
///
/// The bound term at `t = 1` is `−log p̃(x_0)`; for `t ≥ 2` it is
/// `KL[q(x_{t−1} | x_t, x_0) ‖ p_θ(x_{t−1} | x_t)]`.
pub fn loss_terms(
    p: &Mat,
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
    lambda: f64,
) -> Result<DiffusionLoss> {
    let n = x0.len() as f64;
    let x0_loss = x0
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, &x)| -p[(i, x)].max(LOG_FLOOR).ln())
        .sum::<f64>()
        / n;
    let vlb = if t == 1 {
        x0_loss
    } else {
        let q = q_posterior(&one_hot(x0), xt, t, sched)?;
        let pt = q_posterior(p, xt, t, sched)?;
        mean_kl(&q, &pt)
    };
    Ok(DiffusionLoss {
        step: t,
        vlb,
        x0: x0_loss,
        prior: super::posterior::prior_kl(sched)?,
        total: vlb + lambda * x0_loss,
    })
}

/// Samples `t ~ U{1..T_d}` and `x_t ~ q(x_t | x_0)`, then scores `model`.
pub fn diffusion_loss<P: X0Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x0: &TokenSequence,
    sched: &DiffusionSchedule,
    lambda: f64,
    rng: &mut R,
) -> Result<DiffusionLoss> {
    if x0.contains_mask() {
        return Err(Error::invalid("x_0 must not contain MASK"));
    }
    let t = rng.random_range(1..=sched.steps());
    let xt = q_sample(x0, t, sched, rng)?;
    let p = checked_prediction(model, &xt, t, sched.vocab())?;
    loss_terms(&p, x0, &xt, t, sched, lambda)
}
