//! Pieces shared by the quantizer and diffusion training loops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Patience-based early stopping on a monitored loss (lower is better).
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records an epoch's validation loss. Returns `true` when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Shuffled train/validation index split. At least one item is held out
/// whenever there are two or more items and `val_fraction > 0`.
pub fn split_indices<R: Rng + ?Sized>(n: usize, val_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Independent stream for work item `index` of `epoch`, so parallel workers
/// draw the same numbers regardless of scheduling.
pub fn item_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mix = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    ChaCha8Rng::seed_from_u64(mix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience_epochs_without_improvement() {
        let mut es = EarlyStopping::new(5);
        assert!(es.observe(0, 1.0));
        assert!(es.observe(1, 0.5));
        for e in 2..6 {
            assert!(!es.observe(e, 0.6));
            assert!(!es.should_stop());
        }
        assert!(!es.observe(6, 0.5));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch(), Some(1));
    }

    #[test]
    fn split_is_a_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, val) = split_indices(20, 0.1, &mut rng);
        assert_eq!(val.len(), 2);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        let (t, v) = split_indices(1, 0.1, &mut rng);
        assert_eq!((t.len(), v.len()), (1, 0));
    }
}
