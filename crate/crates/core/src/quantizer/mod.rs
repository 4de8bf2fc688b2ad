//! Motion VQ-VAE: a strided temporal-convolution encoder, a nearest-neighbour
//! codebook with straight-through gradients, and a mirrored decoder.
//!
//! Training minimizes `w_e·L_embed + w_r·L_rec + w_v·L_vel`, where
//! `L_embed = Σ_t ‖z_t − sg[c]‖²` only pulls encoder outputs toward their
//! (stopped) codes; the codebook itself follows an exponential moving average
//! of the latents assigned to it.

mod checkpoint;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::smooth_l1;
use crate::optim::AdamConfig;
use crate::tensor::Mat;

pub use checkpoint::VQVAE_KIND;
pub use model::{EmaState, VqVae};
pub use train::{continue_training, train_vqvae, EpochLosses, TrainHistory};

/// `K×d_z` code table. Index `K` is reserved for MASK and never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Mat,
}

impl Codebook {
    pub fn new(codes: Mat) -> Result<Self> {
        if codes.rows() < 2 {
            return Err(Error::invalid(format!(
                "codebook needs at least 2 codes, got {}",
                codes.rows()
            )));
        }
        if !codes.is_finite() {
            return Err(Error::invalid("codebook has non-finite entries"));
        }
        Ok(Codebook { codes })
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    /// The reserved MASK index, one past the last code.
    pub fn mask_index(&self) -> usize {
        self.size()
    }

    pub fn codes(&self) -> &Mat {
        &self.codes
    }

    pub(crate) fn codes_mut(&mut self) -> &mut Mat {
        &mut self.codes
    }

    pub fn code(&self, k: usize) -> &[f64] {
        self.codes.row(k)
    }

    /// `argmin_k ‖z − c_k‖²`, lowest index on ties. Returns the squared distance.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.codes.iter_rows().enumerate() {
            let d: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }
}

/// Nearest codebook entry for a single latent vector.
pub fn nearest_code<'a>(z: &[f64], cb: &'a Codebook) -> Result<(usize, &'a [f64])> {
    if z.len() != cb.dim() {
        return Err(Error::invalid(format!(
            "latent width {} does not match code width {}",
            z.len(),
            cb.dim()
        )));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("latent has non-finite entries"));
    }
    let (k, _) = cb.nearest(z);
    Ok((k, cb.code(k)))
}

/// `N×d_z` encoder output, `N = T/τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    latents: Mat,
}

impl LatentSequence {
    pub fn new(latents: Mat) -> Self {
        LatentSequence { latents }
    }

    pub fn latents(&self) -> &Mat {
        &self.latents
    }

    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.rows() == 0
    }
}

/// Codebook indices in `[0, K]`; `K` is MASK.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    vocab: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t > vocab) {
            return Err(Error::invalid(format!(
                "token {bad} exceeds MASK index {vocab}"
            )));
        }
        Ok(TokenSequence { tokens, vocab })
    }

    pub fn all_masked(len: usize, vocab: usize) -> Self {
        TokenSequence {
            tokens: vec![vocab; len],
            vocab,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mask(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains_mask(&self) -> bool {
        self.tokens.contains(&self.vocab)
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.vocab).count()
    }
}

/// Per-row nearest-code assignment; returns tokens and the quantized latents.
pub fn quantize_sequence(z: &LatentSequence, cb: &Codebook) -> Result<(TokenSequence, LatentSequence)> {
    if z.latents.cols() != cb.dim() {
        return Err(Error::invalid(format!(
            "latent width {} does not match code width {}",
            z.latents.cols(),
            cb.dim()
        )));
    }
    let mut tokens = Vec::with_capacity(z.len());
    let mut quantized = Mat::zeros(z.len(), cb.dim());
    for (i, row) in z.latents.iter_rows().enumerate() {
        let (k, _) = cb.nearest(row);
        tokens.push(k);
        quantized.row_mut(i).copy_from_slice(cb.code(k));
    }
    Ok((
        TokenSequence::new(tokens, cb.size())?,
        LatentSequence::new(quantized),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub embed: f64,
    pub reconstruction: f64,
    pub velocity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            embed: 0.02,
            reconstruction: 1.0,
            velocity: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub embed: f64,
    pub reconstruction: f64,
    pub velocity: f64,
    pub total: f64,
}

/// The three quantizer objectives evaluated on plain values.
pub fn vq_losses(
    target: &Mat,
    recon: &Mat,
    latents: &Mat,
    quantized: &Mat,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if latents.shape() != quantized.shape() {
        return Err(Error::invalid(format!(
            "latent shape {:?} does not match quantized shape {:?}",
            latents.shape(),
            quantized.shape()
        )));
    }
    let embed: f64 = latents
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(z, c)| (z - c) * (z - c))
        .sum();
    let reconstruction = smooth_l1(recon, target)?;
    let velocity = smooth_l1(
        &crate::motion::differential_of(recon).slice_rows(1, recon.rows().saturating_sub(1)),
        &crate::motion::differential_of(target).slice_rows(1, target.rows().saturating_sub(1)),
    )?;
    Ok(LossBreakdown {
        embed,
        reconstruction,
        velocity,
        total: weights.embed * embed
            + weights.reconstruction * reconstruction
            + weights.velocity * velocity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    /// K
    pub codebook_size: usize,
    /// d_z
    pub code_dim: usize,
    /// τ, a power of two; the encoder halves time log2(τ) times.
    pub downsample: usize,
    pub hidden: usize,
    /// Residual conv blocks per resampling stage, in both encoder and decoder.
    pub res_blocks: usize,
    /// d_f, expression plus rotation.
    pub motion_dim: usize,
    pub loss_weights: LossWeights,
    pub ema_decay: f64,
    pub reseed_dead_codes: bool,
    pub optimizer: AdamConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// Decay of a running average of the weights used for validation and
    /// for the returned model; 0 disables averaging.
    pub weight_average: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            codebook_size: 256,
            code_dim: 512,
            downsample: 8,
            hidden: 256,
            res_blocks: 1,
            motion_dim: crate::motion::DEFAULT_EXPRESSION_DIM + crate::motion::ROTATION_DIM,
            loss_weights: LossWeights::default(),
            ema_decay: 0.99,
            reseed_dead_codes: true,
            optimizer: AdamConfig::default(),
            max_epochs: 200,
            batch_size: 256,
            patience: 5,
            val_fraction: 0.1,
            weight_average: 0.99,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::config("codebook_size must be at least 2"));
        }
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return Err(Error::config(format!(
                "downsample τ = {} must be a power of two",
                self.downsample
            )));
        }
        if self.code_dim == 0 || self.hidden == 0 {
            return Err(Error::config("code_dim and hidden must be positive"));
        }
        if self.motion_dim <= crate::motion::ROTATION_DIM {
            return Err(Error::config("motion_dim must exceed the 3 rotation channels"));
        }
        if !(0.0..1.0).contains(&self.weight_average) {
            return Err(Error::config("weight_average must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    /// Frames must divide evenly into τ-frame windows.
    pub fn check_length(&self, frames: usize) -> Result<()> {
        if frames == 0 || frames % self.downsample != 0 {
            return Err(Error::invalid(format!(
                "sequence length {frames} is not divisible by the downsampling ratio τ = {}",
                self.downsample
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_codebook(k: usize, d: usize, seed: u64) -> Codebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Codebook::new(Mat::randn(k, d, 1.0, &mut rng)).unwrap()
    }

    fn brute_force_argmin(z: &[f64], cb: &Codebook) -> usize {
        let dists: Vec<f64> = (0..cb.size())
            .map(|k| {
                let mut s = 0.0;
                for i in 0..z.len() {
                    s += (z[i] - cb.code(k)[i]).powi(2);
                }
                s
            })
            .collect();
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&d| d == min).unwrap()
    }

    #[test]
    fn exact_member_maps_to_itself() {
        let cb = random_codebook(8, 4, 1);
        let z = cb.code(3).to_vec();
        let (k, code) = nearest_code(&z, &cb).unwrap();
        assert_eq!(k, 3);
        assert_eq!(code, z.as_slice());
        assert_eq!(cb.nearest(&z).1, 0.0);
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let cb = random_codebook(16, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z = Mat::randn(1, 6, 1.5, &mut rng);
            let (k, _) = nearest_code(z.row(0), &cb).unwrap();
            assert_eq!(k, brute_force_argmin(z.row(0), &cb));
            // quantization never increases distance
            let d = cb.nearest(z.row(0)).1;
            for j in 0..16 {
                let dj: f64 = cb.code(j).iter().zip(z.row(0)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d <= dj);
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let cb = Codebook::new(Mat::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![5.0, 5.0]])).unwrap();
        assert_eq!(nearest_code(&[0.0, 0.0], &cb).unwrap().0, 0);
    }

    #[test]
    fn quantize_sequence_rows_are_independent() {
        let cb = random_codebook(8, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Mat::randn(5, 3, 1.0, &mut rng);
        let (tokens, q) = quantize_sequence(&LatentSequence::new(z.clone()), &cb).unwrap();
        assert!(!tokens.contains_mask());
        for i in 0..5 {
            assert_eq!(tokens.tokens()[i], brute_force_argmin(z.row(i), &cb));
            assert_eq!(q.latents().row(i), cb.code(tokens.tokens()[i]));
        }
        let perm = [3, 0, 4, 1, 2];
        let zp = Mat::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
        let (tp, _) = quantize_sequence(&LatentSequence::new(zp), &cb).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(tp.tokens()[j], tokens.tokens()[i]);
        }

        let all_c0 = Mat::from_rows(&vec![cb.code(0).to_vec(); 4]);
        let (t0, _) = quantize_sequence(&LatentSequence::new(all_c0), &cb).unwrap();
        assert_eq!(t0.tokens(), &[0, 0, 0, 0]);
    }

    #[test]
    fn losses_vanish_on_perfect_reconstruction() {
        let cb = random_codebook(4, 3, 6);
        let seq = Mat::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.4], vec![1.0, 2.0]]);
        let z = Mat::from_rows(&[cb.code(1).to_vec(), cb.code(2).to_vec()]);
        let l = vq_losses(&seq, &seq, &z, &z, &LossWeights::default()).unwrap();
        assert_eq!((l.embed, l.reconstruction, l.velocity, l.total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn default_loss_weights() {
        let w = LossWeights::default();
        assert_eq!((w.embed, w.reconstruction, w.velocity), (0.02, 1.0, 0.05));
    }

    #[test]
    fn two_frame_toy_losses() {
        // seq = (0, 1), recon = (0, 0.5): residuals (0, −0.5) -> mean huber = 0.125/2
        // velocity: target diff 1, recon diff 0.5 -> residual −0.5 -> 0.125
        let seq = Mat::from_vec(2, 1, vec![0.0, 1.0]);
        let recon = Mat::from_vec(2, 1, vec![0.0, 0.5]);
        let z = Mat::zeros(1, 1);
        let l = vq_losses(&seq, &recon, &z, &z, &LossWeights::default()).unwrap();
        assert!((l.reconstruction - 0.0625).abs() < 1e-15);
        assert!((l.velocity - 0.125).abs() < 1e-15);
        assert!((l.total - (0.0625 + 0.05 * 0.125)).abs() < 1e-15);
        assert!(vq_losses(&seq, &Mat::zeros(3, 1), &z, &z, &LossWeights::default()).is_err());
    }

    #[test]
    fn embed_loss_is_invariant_to_codebook_permutation() {
        let cb = random_codebook(6, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Mat::randn(4, 3, 1.0, &mut rng);
        let (_, q) = quantize_sequence(&LatentSequence::new(z.clone()), &cb).unwrap();
        let perm = [5, 3, 1, 0, 2, 4];
        let permuted = Codebook::new(Mat::from_rows(
            &perm.iter().map(|&i| cb.code(i).to_vec()).collect::<Vec<_>>(),
        ))
        .unwrap();
        let (_, qp) = quantize_sequence(&LatentSequence::new(z.clone()), &permuted).unwrap();
        let w = LossWeights::default();
        let a = vq_losses(&z, &z, &z, q.latents(), &w).unwrap().embed;
        let b = vq_losses(&z, &z, &z, qp.latents(), &w).unwrap().embed;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mask_index_is_reserved() {
        let cb = random_codebook(4, 2, 10);
        assert_eq!(cb.mask_index(), 4);
        assert!(TokenSequence::new(vec![0, 4, 3], 4).unwrap().contains_mask());
        assert!(TokenSequence::new(vec![5], 4).is_err());
        assert!(Codebook::new(Mat::zeros(1, 2)).is_err());
    }
}
