use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// How the per-step keep/replace/mask probabilities are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Cumulative mask probability `γ̄_t = gamma_max·t/T_d` and cumulative
    /// replace mass `K·β̄_t = replace_max·t/T_d`, both linear in `t`. The
    /// per-step scalars are recovered from consecutive cumulatives.
    Linear { gamma_max: f64, replace_max: f64 },
    /// Explicit per-step arrays, index 0 holding step 1.
    Custom {
        alpha: Vec<f64>,
        beta: Vec<f64>,
        gamma: Vec<f64>,
    },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            gamma_max: 0.9,
            replace_max: 0.1,
        }
    }
}

/// Per-step and cumulative scalars of the mask-and-replace chain. Step
/// arrays are indexed `t − 1`; cumulative arrays are indexed `t` with
/// `t = 0` the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    vocab: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    gamma_bar: Vec<f64>,
}

const SIMPLEX_TOL: f64 = 1e-9;

fn check_unit(name: &str, t: usize, v: f64) -> Result<f64> {
    if !v.is_finite() || v < -SIMPLEX_TOL || v > 1.0 + SIMPLEX_TOL {
        return Err(Error::config(format!(
            "{name} at step {t} is {v}, outside [0, 1]"
        )));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Builds a schedule with `steps` corruption steps over `vocab` tokens.
pub fn build_schedule(steps: usize, vocab: usize, kind: &ScheduleKind) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return Err(Error::config("diffusion needs at least one step"));
    }
    if vocab < 2 {
        return Err(Error::config(format!("vocabulary size must be ≥ 2, got {vocab}")));
    }
    let k = vocab as f64;
    let (alpha, beta, gamma) = match kind {
        ScheduleKind::Linear {
            gamma_max,
            replace_max,
        } => {
            check_unit("gamma_max", steps, *gamma_max)?;
            check_unit("replace_max", steps, *replace_max)?;
            if gamma_max + replace_max > 1.0 + SIMPLEX_TOL {
                return Err(Error::config(format!(
                    "gamma_max + replace_max = {} exceeds 1",
                    gamma_max + replace_max
                )));
            }
            let frac = |t: usize| t as f64 / steps as f64;
            let gbar = |t: usize| gamma_max * frac(t);
            let abar = |t: usize| 1.0 - gamma_max * frac(t) - replace_max * frac(t);
            let mut alpha = Vec::with_capacity(steps);
            let mut beta = Vec::with_capacity(steps);
            let mut gamma = Vec::with_capacity(steps);
            for t in 1..=steps {
                let a = if abar(t - 1) > 0.0 {
                    (abar(t) / abar(t - 1)).max(0.0)
                } else {
                    0.0
                };
                let g = if 1.0 - gbar(t - 1) > 0.0 {
                    1.0 - (1.0 - gbar(t)) / (1.0 - gbar(t - 1))
                } else {
                    1.0
                };
                alpha.push(a);
                gamma.push(g);
                beta.push((1.0 - a - g) / k);
            }
            (alpha, beta, gamma)
        }
        ScheduleKind::Custom { alpha, beta, gamma } => {
            if alpha.len() != steps || beta.len() != steps || gamma.len() != steps {
                return Err(Error::config(format!(
                    "custom schedule arrays must have {steps} entries (got {}, {}, {})",
                    alpha.len(),
                    beta.len(),
                    gamma.len()
                )));
            }
            (alpha.clone(), beta.clone(), gamma.clone())
        }
    };
    DiffusionSchedule::from_steps(vocab, alpha, beta, gamma)
}

impl DiffusionSchedule {
    fn from_steps(vocab: usize, alpha: Vec<f64>, beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        let k = vocab as f64;
        let steps = alpha.len();
        let mut s = DiffusionSchedule {
            vocab,
            alpha: Vec::with_capacity(steps),
            beta: Vec::with_capacity(steps),
            gamma: Vec::with_capacity(steps),
            alpha_bar: vec![1.0],
            beta_bar: vec![0.0],
            gamma_bar: vec![0.0],
        };
        for i in 0..steps {
            let t = i + 1;
            let a = check_unit("alpha", t, alpha[i])?;
            let b = check_unit("beta", t, beta[i])?;
            let g = check_unit("gamma", t, gamma[i])?;
            let total = a + k * b + g;
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::config(format!(
                    "alpha + K·beta + gamma = {total} at step {t}, expected 1"
                )));
            }
            s.alpha.push(a);
            s.beta.push(b);
            s.gamma.push(g);
            let abar = s.alpha_bar[i] * a;
            let gbar = 1.0 - (1.0 - s.gamma_bar[i]) * (1.0 - g);
            s.alpha_bar.push(abar);
            s.gamma_bar.push(gbar);
            s.beta_bar.push(((1.0 - abar - gbar) / k).max(0.0));
        }
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mask(&self) -> usize {
        self.vocab
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::invalid(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `(α_t, β_t, γ_t)` for `1 ≤ t ≤ T_d`.
    pub fn step(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        Ok((self.alpha[t - 1], self.beta[t - 1], self.gamma[t - 1]))
    }

    /// `(ᾱ_t, β̄_t, γ̄_t)` for `0 ≤ t ≤ T_d`.
    pub fn cumulative(&self, t: usize) -> Result<(f64, f64, f64)> {
        if t > self.steps() {
            return Err(Error::invalid(format!(
                "step {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok((self.alpha_bar[t], self.beta_bar[t], self.gamma_bar[t]))
    }

    pub fn gamma_bar(&self) -> &[f64] {
        &self.gamma_bar
    }

    /// Expected fraction of MASK tokens in `x_t` for a mask-free `x_0`.
    pub fn mask_fraction(&self, t: usize) -> Result<f64> {
        Ok(self.cumulative(t)?.2)
    }

    /// Single-step matrix, `Q_t[to][from]`.
    pub fn transition_matrix(&self, t: usize) -> Result<Mat> {
        let (a, b, g) = self.step(t)?;
        Ok(self.structured(a, b, g))
    }

    /// Closed-form `Q̄_t = Q_t ⋯ Q_1` (identity at `t = 0`).
    pub fn cumulative_matrix(&self, t: usize) -> Result<Mat> {
        let (a, b, g) = self.cumulative(t)?;
        Ok(self.structured(a, b, g))
    }

    fn structured(&self, a: f64, b: f64, g: f64) -> Mat {
        let k = self.vocab;
        let mut q = Mat::zeros(k + 1, k + 1);
        for from in 0..k {
            for to in 0..k {
                q[(to, from)] = if to == from { a + b } else { b };
            }
            q[(k, from)] = g;
        }
        q[(k, k)] = 1.0;
        q
    }

    /// Probability of token `to` in `x_t` given `x_0 = from` (cumulative).
    pub fn marginal(&self, t: usize, to: usize, from: usize) -> Result<f64> {
        let (a, b, g) = self.cumulative(t)?;
        let k = self.vocab;
        Ok(if from == k {
            if to == k {
                1.0
            } else {
                0.0
            }
        } else if to == k {
            g
        } else if to == from {
            a + b
        } else {
            b
        })
    }

    /// Stationary-style prior over `x_{T_d}`: `γ̄_{T_d}` on MASK and `β̄_{T_d}`
    /// on each token, renormalized when `ᾱ_{T_d} > 0`.
    pub fn prior(&self) -> Result<Vec<f64>> {
        let (_, b, g) = self.cumulative(self.steps())?;
        let total = g + self.vocab as f64 * b;
        if total <= 0.0 {
            return Err(Error::config(
                "schedule never corrupts tokens, so the terminal prior is empty",
            ));
        }
        let mut p = vec![b / total; self.vocab + 1];
        p[self.vocab] = g / total;
        Ok(p)
    }
}
