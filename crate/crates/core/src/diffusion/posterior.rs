use rand::Rng;

use super::schedule::DiffusionSchedule;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::quantizer::TokenSequence;
use crate::tensor::Mat;

/// Floor applied inside every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-30;

/// Draws `x_t ~ q(x_t | x_0)` position by position from the cumulative chain.
pub fn q_sample<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    check_vocab(x0, sched)?;
    if x0.contains_mask() {
        return Err(Error::invalid("x_0 must not contain MASK"));
    }
    let (a, b, g) = sched.cumulative(t)?;
    let k = sched.vocab();
    let tokens = x0
        .tokens()
        .iter()
        .map(|&x| {
            let u: f64 = rng.random();
            if u < a {
                x
            } else if u < a + g {
                k
            } else {
                // uniform replacement over K tokens (may coincide with x)
                let r = ((u - a - g) / (k as f64 * b).max(f64::MIN_POSITIVE) * k as f64) as usize;
                r.min(k - 1)
            }
        })
        .collect();
    TokenSequence::new(tokens, k)
}

/// One single-step draw `x_t ~ q(x_t | x_{t−1})`; MASK stays MASK.
pub fn q_step<R: Rng + ?Sized>(
    prev: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    check_vocab(prev, sched)?;
    let (a, b, g) = sched.step(t)?;
    let k = sched.vocab();
    let tokens = prev
        .tokens()
        .iter()
        .map(|&x| {
            if x == k {
                return k;
            }
            let u: f64 = rng.random();
            if u < a {
                x
            } else if u < a + g {
                k
            } else {
                let r = ((u - a - g) / (k as f64 * b).max(f64::MIN_POSITIVE) * k as f64) as usize;
                r.min(k - 1)
            }
        })
        .collect();
    TokenSequence::new(tokens, k)
}

fn check_vocab(x: &TokenSequence, sched: &DiffusionSchedule) -> Result<()> {
    if x.vocab() != sched.vocab() {
        return Err(Error::Mismatch {
            field: "K".into(),
            reason: format!(
                "tokens use K = {}, schedule has K = {}",
                x.vocab(),
                sched.vocab()
            ),
        });
    }
    Ok(())
}

/// Coefficients that make the posterior an affine function of the `x_0`
/// distribution `p` for fixed `x_t` and `t`:
///
/// `post[:, :K] = c1 ⊙ p + c2 ⊙ (Σ_j u_j p_j) + c3`, `post[:, K] = mask`.
///
/// This is the marginal `Σ_j p_j q(x_{t−1} | x_t, x_0 = j)` written without
/// materializing a `(K+1)×K` matrix per position.
pub(crate) struct PosteriorCoeffs {
    c1: Mat,
    u: Mat,
    c2: Mat,
    c3: Mat,
    mask: Mat,
    /// `(position, token)` pairs where `q(x_t | x_0 = token)` is zero.
    impossible: Vec<(usize, usize)>,
}

pub(crate) fn posterior_coeffs(
    xt: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<PosteriorCoeffs> {
    check_vocab(xt, sched)?;
    if t < 2 || t > sched.steps() {
        return Err(Error::invalid(format!(
            "posterior needs 2 ≤ t ≤ {}, got {t}",
            sched.steps()
        )));
    }
    let k = sched.vocab();
    let n = xt.len();
    let (alpha, beta, gamma) = sched.step(t)?;
    let (a_prev, b_prev, g_prev) = sched.cumulative(t - 1)?;
    let (a_now, b_now, g_now) = sched.cumulative(t)?;
    let mut c = PosteriorCoeffs {
        c1: Mat::zeros(n, k),
        u: Mat::zeros(n, k),
        c2: Mat::zeros(n, k),
        c3: Mat::zeros(n, k),
        mask: Mat::zeros(n, 1),
        impossible: Vec::new(),
    };
    for (pos, &x) in xt.tokens().iter().enumerate() {
        if x == k {
            if g_now <= 0.0 {
                return Err(Error::DegenerateState {
                    position: pos,
                    reason: format!("x_t is MASK but the mask probability at step {t} is zero"),
                });
            }
            for j in 0..k {
                c.c1[(pos, j)] = gamma * a_prev / g_now;
                c.c3[(pos, j)] = gamma * b_prev / g_now;
            }
            c.mask[(pos, 0)] = g_prev / g_now;
        } else {
            for j in 0..k {
                let denom = if j == x { a_now + b_now } else { b_now };
                let keep = if j == x { alpha + beta } else { beta };
                if denom > 0.0 {
                    c.u[(pos, j)] = 1.0 / denom;
                    c.c1[(pos, j)] = keep * a_prev / denom;
                } else {
                    c.impossible.push((pos, j));
                }
                c.c2[(pos, j)] = keep * b_prev;
            }
        }
    }
    Ok(c)
}

impl PosteriorCoeffs {
    fn check_support(&self, p: &Mat) -> Result<()> {
        for &(pos, j) in &self.impossible {
            if p[(pos, j)] > 0.0 {
                return Err(Error::DegenerateState {
                    position: pos,
                    reason: format!("x_0 = {j} has mass but cannot produce the observed x_t"),
                });
            }
        }
        Ok(())
    }

    fn apply(&self, p: &Mat) -> Result<Mat> {
        self.check_support(p)?;
        let (n, k) = p.shape();
        let mut out = Mat::zeros(n, k + 1);
        for i in 0..n {
            let s: f64 = (0..k).map(|j| self.u[(i, j)] * p[(i, j)]).sum();
            for j in 0..k {
                out[(i, j)] = self.c1[(i, j)] * p[(i, j)] + self.c2[(i, j)] * s + self.c3[(i, j)];
            }
            out[(i, k)] = self.mask[(i, 0)];
        }
        Ok(out)
    }

    fn apply_graph(&self, g: &mut Graph, p: Var) -> Result<Var> {
        if let Some(&(pos, j)) = self.impossible.first() {
            // a softmax output puts mass on every token
            return Err(Error::DegenerateState {
                position: pos,
                reason: format!("x_0 = {j} cannot produce the observed x_t"),
            });
        }
        let k = self.c1.cols();
        let c1 = g.constant(self.c1.clone());
        let u = g.constant(self.u.clone());
        let c2 = g.constant(self.c2.clone());
        let c3 = g.constant(self.c3.clone());
        let ones_col = g.constant(Mat::filled(k, 1, 1.0));
        let ones_row = g.constant(Mat::filled(1, k, 1.0));
        let direct = g.mul(p, c1);
        let weighted = g.mul(p, u);
        let s = g.matmul(weighted, ones_col);
        let spread = g.matmul(s, ones_row);
        let shared = g.mul(spread, c2);
        let sum = g.add(direct, shared);
        let tokens = g.add(sum, c3);
        let mask = g.constant(self.mask.clone());
        Ok(g.concat_cols(&[tokens, mask]))
    }
}

fn check_distribution(p: &Mat, k: usize, n: usize) -> Result<()> {
    if p.shape() != (n, k) {
        return Err(Error::invalid(format!(
            "x_0 distribution must be {n}×{k}, got {:?}",
            p.shape()
        )));
    }
    for (i, row) in p.iter_rows().enumerate() {
        if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid(format!("x_0 distribution row {i} is not a probability vector")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::invalid(format!("x_0 distribution row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// `q(x_{t−1} | x_t, x_0)` marginalized over a per-position `x_0`
/// distribution (`N×K`). Returns `N×(K+1)` rows over `x_{t−1}`.
pub fn q_posterior(
    x0_dist: &Mat,
    xt: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Mat> {
    check_distribution(x0_dist, sched.vocab(), xt.len())?;
    posterior_coeffs(xt, t, sched)?.apply(x0_dist)
}

/// Graph version of [`q_posterior`] for a softmax output `p`.
pub(crate) fn q_posterior_graph(
    g: &mut Graph,
    p: Var,
    xt: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    posterior_coeffs(xt, t, sched)?.apply_graph(g, p)
}

pub fn one_hot(x0: &TokenSequence) -> Mat {
    let k = x0.vocab();
    let mut m = Mat::zeros(x0.len(), k);
    for (i, &x) in x0.tokens().iter().enumerate() {
        m[(i, x)] = 1.0;
    }
    m
}

/// Per-position mean of `KL[q ‖ p]` where `q` is exact and `p` may contain zeros.
pub fn mean_kl(q: &Mat, p: &Mat) -> f64 {
    let mut total = 0.0;
    for (qr, pr) in q.iter_rows().zip(p.iter_rows()) {
        for (&a, &b) in qr.iter().zip(pr) {
            if a > 0.0 {
                total += a * (a.ln() - b.max(LOG_FLOOR).ln());
            }
        }
    }
    total / q.rows() as f64
}

/// `KL[q(x_{T_d} | x_0) ‖ p(x_{T_d})]`, identical for every mask-free position.
pub fn prior_kl(sched: &DiffusionSchedule) -> Result<f64> {
    let prior = sched.prior()?;
    let steps = sched.steps();
    let k = sched.vocab();
    let mut kl = 0.0;
    for to in 0..=k {
        let q = sched.marginal(steps, to, 0)?;
        if q > 0.0 {
            kl += q * (q.ln() - prior[to].max(LOG_FLOOR).ln());
        }
    }
    Ok(kl)
}
