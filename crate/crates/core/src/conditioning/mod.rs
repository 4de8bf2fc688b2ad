//! Speaker-side features and their fusion into the condition sequence:
//! MFCC audio features, hashed or ingested text embeddings, cross-modal
//! attention, and the fusion network.

mod fusion;
mod mfcc;
mod text;

pub use fusion::{
    FusedCondition, FusionConfig, FusionNetwork, ModalitySwitches, SpeakerFeatures,
};
pub use mfcc::{
    dct2, hann, hz_to_mel, mel_energies, mel_filterbank, mel_to_hz, mfcc, AudioFeatureSequence,
    MfccConfig, MFCC_LOG_FLOOR,
};
pub use text::{ingest_embedding, EmbeddingRecord, Provenance, TextEmbedder, TextEmbedding};

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::nn::Attention;
use crate::tensor::Mat;

/// Scaled dot-product attention of `queries` over `kv` with the projections
/// in `attn` (softmax over kv positions, scale `1/√head_dim`).
pub fn cross_attention(store: &ParamStore, attn: &Attention, queries: &Mat, kv: &Mat) -> Result<Mat> {
    if queries.cols() != attn.query.in_dim {
        return Err(Error::invalid(format!(
            "query width {} does not match projection input {}",
            queries.cols(),
            attn.query.in_dim
        )));
    }
    if kv.cols() != attn.key.in_dim {
        return Err(Error::invalid(format!(
            "key/value width {} does not match projection input {}",
            kv.cols(),
            attn.key.in_dim
        )));
    }
    if queries.rows() == 0 || kv.rows() == 0 {
        return Err(Error::invalid("attention needs at least one query and one key"));
    }
    let mut g = Graph::new(store);
    let q = g.constant(queries.clone());
    let k = g.constant(kv.clone());
    let out = attn.forward(&mut g, q, k);
    Ok(g.value(out).clone())
}

/// Linearly resamples audio features to the motion length (endpoints kept).
pub fn align_modalities(motion: &MotionSequence, audio: &AudioFeatureSequence) -> (Mat, Mat) {
    (motion.frames().clone(), resample_rows(&audio.frames, motion.len()))
}

pub fn resample_rows(src: &Mat, rows: usize) -> Mat {
    let (n, d) = src.shape();
    if n == rows {
        return src.clone();
    }
    let mut out = Mat::zeros(rows, d);
    for i in 0..rows {
        let pos = if rows == 1 || n == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (rows - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let w = pos - lo as f64;
        for c in 0..d {
            out[(i, c)] = (1.0 - w) * src[(lo, c)] + w * src[(hi, c)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention(width: usize, heads: usize) -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Attention::new(&mut store, "x", 4, 4, width, heads, &mut rng);
        (store, a)
    }

    fn project(store: &ParamStore, l: &crate::nn::Linear, x: &Mat) -> Mat {
        let mut y = x.matmul(store.get(l.weight));
        if let Some(b) = l.bias {
            for r in 0..y.rows() {
                for (v, bb) in y.row_mut(r).iter_mut().zip(store.get(b).row(0)) {
                    *v += bb;
                }
            }
        }
        y
    }

    #[test]
    fn matches_explicit_loop() {
        let (store, a) = attention(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q_src = Mat::randn(2, 4, 1.0, &mut rng);
        let kv_src = Mat::randn(3, 4, 1.0, &mut rng);
        let q = project(&store, &a.query, &q_src);
        let k = project(&store, &a.key, &kv_src);
        let v = project(&store, &a.value, &kv_src);
        let mut mixed = Mat::zeros(2, 4);
        for i in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / 2.0)
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..3 {
                let w = (scores[j] - mx).exp() / z;
                for c in 0..4 {
                    mixed[(i, c)] += w * v[(j, c)];
                }
            }
        }
        let expected = project(&store, &a.out, &mixed);
        let got = cross_attention(&store, &a, &q_src, &kv_src).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn single_key_and_uniform_scores() {
        let (mut store, a) = attention(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kv = Mat::randn(1, 4, 1.0, &mut rng);
        let out = cross_attention(&store, &a, &Mat::randn(3, 4, 1.0, &mut rng), &kv).unwrap();
        let expected = project(&store, &a.out, &project(&store, &a.value, &kv));
        for r in 0..3 {
            for c in 0..4 {
                assert!((out[(r, c)] - expected[(0, c)]).abs() < 1e-12);
            }
        }
        // zero query projection: uniform weights over keys
        *store.get_mut(a.query.weight) = Mat::zeros(4, 4);
        let kv = Mat::randn(5, 4, 1.0, &mut rng);
        let out = cross_attention(&store, &a, &Mat::randn(2, 4, 1.0, &mut rng), &kv).unwrap();
        let v = project(&store, &a.value, &kv);
        let mut mean = Mat::zeros(1, 4);
        for r in 0..5 {
            for c in 0..4 {
                mean[(0, c)] += v[(r, c)] / 5.0;
            }
        }
        let expected = project(&store, &a.out, &mean);
        for c in 0..4 {
            assert!((out[(1, c)] - expected[(0, c)]).abs() < 1e-12);
        }
        assert!(cross_attention(&store, &a, &Mat::zeros(2, 3), &kv).is_err());
    }

    #[test]
    fn resampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = Mat::randn(10, 2, 1.0, &mut rng);
        assert_eq!(resample_rows(&src, 10), src);
        let down = resample_rows(&Mat::randn(20, 2, 1.0, &mut rng), 10);
        assert_eq!(down.rows(), 10);
        let two_t = Mat::randn(20, 3, 1.0, &mut rng);
        let out = resample_rows(&two_t, 10);
        assert_eq!(out.row(0), two_t.row(0));
        assert_eq!(out.row(9), two_t.row(19));
        for i in 0..10 {
            let pos = i as f64 * 19.0 / 9.0;
            let lo = pos.floor() as usize;
            let w = pos - lo as f64;
            for c in 0..3 {
                let hi = (lo + 1).min(19);
                let e = (1.0 - w) * two_t[(lo, c)] + w * two_t[(hi, c)];
                assert!((out[(i, c)] - e).abs() < 1e-12);
            }
        }
        let constant = resample_rows(&Mat::filled(7, 2, 1.5), 30);
        assert!(constant.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }
}
