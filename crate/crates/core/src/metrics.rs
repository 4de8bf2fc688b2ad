//! Evaluation suite: L2, Fréchet distance, paired Fréchet distance,
//! diversity and variation over motion corpora.
//!
//! Definitions used throughout the crate:
//! - FD fits a Gaussian (unbiased covariance, `1e-6` diagonal jitter) to the
//!   per-frame feature clouds of two corpora.
//! - P-FD does the same on per-frame `[speaker ; listener]` concatenations, so
//!   it is sensitive to speaker/listener synchrony.
//! - Diversity is the mean over unordered sample pairs of the mean per-frame
//!   Euclidean distance.
//! - Variation is the per-dimension temporal (population) standard deviation,
//!   averaged over dimensions and sequences.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::tensor::Mat;

pub const COVARIANCE_JITTER: f64 = 1e-6;

/// `S×d` per-frame feature vectors pooled over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    rows: Mat,
}

impl FeatureCloud {
    pub fn new(rows: Mat) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(Error::invalid(format!(
                "feature cloud needs at least 2 rows, got {}",
                rows.rows()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::invalid("feature cloud has non-finite entries"));
        }
        Ok(FeatureCloud { rows })
    }

    /// Every frame of every sequence.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut data = Vec::new();
        let mut width = None;
        let mut count = 0;
        for s in seqs {
            match width {
                None => width = Some(s.width()),
                Some(w) if w != s.width() => {
                    return Err(Error::invalid("sequences have differing widths"));
                }
                _ => {}
            }
            data.extend_from_slice(s.frames().data());
            count += s.len();
        }
        FeatureCloud::new(Mat::from_vec(count, width.unwrap_or(0), data))
    }

    pub fn rows(&self) -> &Mat {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Mean and unbiased covariance (with diagonal jitter).
    pub fn gaussian(&self) -> (Vec<f64>, DMatrix<f64>) {
        let (n, d) = self.rows.shape();
        let mut mean = vec![0.0; d];
        for row in self.rows.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut centered = Mat::zeros(n, d);
        for (i, row) in self.rows.iter_rows().enumerate() {
            for (c, (v, m)) in row.iter().zip(&mean).enumerate() {
                centered[(i, c)] = v - m;
            }
        }
        let cov = centered.t_matmul(&centered);
        let mut sigma = DMatrix::from_row_slice(d, d, cov.data());
        sigma /= (n - 1) as f64;
        for i in 0..d {
            sigma[(i, i)] += COVARIANCE_JITTER;
        }
        (mean, sigma)
    }
}

/// Principal square root of a symmetric positive semi-definite matrix.
/// Eigenvalues down to `−1e-8` are clamped to zero.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::invalid("matrix square root needs a square matrix"));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-8 * (1.0 + a[(i, j)].abs()) {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-8 * (1.0 + eig.eigenvalues.amax()) {
        return Err(Error::invalid(format!(
            "matrix is not positive semi-definite (eigenvalue {min})"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// `‖μ_X − μ_Y‖² + Tr(Σ_X + Σ_Y − 2(Σ_X Σ_Y)^{1/2})`, clamped at zero.
pub fn frechet_distance(x: &FeatureCloud, y: &FeatureCloud) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let (mx, sx) = x.gaussian();
    let (my, sy) = y.gaussian();
    let mean_term: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b) * (a - b)).sum();
    // Tr (Σ_X Σ_Y)^{1/2} = Tr (Σ_X^{1/2} Σ_Y Σ_X^{1/2})^{1/2}, which stays symmetric.
    let root_x = matrix_sqrt_psd(&sx)?;
    let inner = &root_x * &sy * &root_x;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    let fd = mean_term + sx.trace() + sy.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

fn check_pair(a: &MotionSequence, b: &MotionSequence) -> Result<()> {
    if a.len() != b.len() || a.width() != b.width() {
        return Err(Error::invalid(format!(
            "shape mismatch: {}×{} vs {}×{}",
            a.len(),
            a.width(),
            b.len(),
            b.width()
        )));
    }
    Ok(())
}

fn mean_frame_distance(a: &Mat, b: &Mat) -> f64 {
    let t = a.rows();
    let total: f64 = a
        .iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / t as f64
}

/// Mean over sequences of the mean per-frame Euclidean distance.
pub fn l2_metric(generated: &[MotionSequence], reference: &[MotionSequence]) -> Result<f64> {
    if generated.len() != reference.len() {
        return Err(Error::invalid(format!(
            "corpus sizes differ: {} generated vs {} reference",
            generated.len(),
            reference.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::invalid("l2 metric needs at least one sequence"));
    }
    let mut total = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        check_pair(g, r)?;
        total += mean_frame_distance(g.frames(), r.frames());
    }
    Ok(total / generated.len() as f64)
}

/// A speaker sequence with its (real or generated) listener.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadPair {
    pub speaker: MotionSequence,
    pub listener: MotionSequence,
}

fn paired_cloud(pairs: &[DyadPair]) -> Result<FeatureCloud> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut width = None;
    for (i, p) in pairs.iter().enumerate() {
        if p.speaker.len() != p.listener.len() {
            return Err(Error::invalid(format!(
                "pair {i}: speaker has {} frames, listener {}",
                p.speaker.len(),
                p.listener.len()
            )));
        }
        let w = p.speaker.width() + p.listener.width();
        if *width.get_or_insert(w) != w {
            return Err(Error::invalid(format!("pair {i} has a different width")));
        }
        for (s, l) in p.speaker.frames().iter_rows().zip(p.listener.frames().iter_rows()) {
            data.extend_from_slice(s);
            data.extend_from_slice(l);
        }
        count += p.speaker.len();
    }
    FeatureCloud::new(Mat::from_vec(count, width.unwrap_or(0), data))
}

/// FD between per-frame `[speaker ; listener]` clouds of two corpora.
pub fn paired_fd(generated: &[DyadPair], reference: &[DyadPair]) -> Result<f64> {
    frechet_distance(&paired_cloud(generated)?, &paired_cloud(reference)?)
}

pub fn diversity(samples: &[MotionSequence]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("diversity needs at least 2 samples"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            check_pair(&samples[i], &samples[j])?;
            total += mean_frame_distance(samples[i].frames(), samples[j].frames());
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn variation(samples: &[MotionSequence]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("variation needs at least one sample"));
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::invalid(format!(
                "sample {i} has {} frames; variation needs at least 2",
                s.len()
            )));
        }
        let (t, d) = s.frames().shape();
        let mut per_dim = 0.0;
        for c in 0..d {
            // shifted by the first frame so a constant channel is exactly 0
            let x0 = s.frames()[(0, c)];
            let dev = |r: usize| s.frames()[(r, c)] - x0;
            let mean = (0..t).map(dev).sum::<f64>() / t as f64;
            let var = (0..t).map(|r| (dev(r) - mean).powi(2)).sum::<f64>() / t as f64;
            per_dim += var.sqrt();
        }
        total += per_dim / d as f64;
    }
    Ok(total / samples.len() as f64)
}

/// `exp(entropy)` of a usage histogram; 0 for an all-zero histogram.
pub fn perplexity(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub l2: f64,
    pub fd: f64,
    pub pfd: f64,
    pub diversity: f64,
    pub variation: f64,
    pub gt_diversity: f64,
    pub gt_variation: f64,
    pub diversity_gap: f64,
    pub variation_gap: f64,
    pub sequences: usize,
    pub frames: usize,
    /// Free-form provenance (switches, K, seeds, config hash).
    pub config: serde_json::Value,
}

impl MetricReport {
    /// Scores generated listeners against their ground-truth pairs.
    pub fn evaluate(
        label: impl Into<String>,
        generated: &[DyadPair],
        reference: &[DyadPair],
        config: serde_json::Value,
    ) -> Result<Self> {
        if generated.len() != reference.len() {
            return Err(Error::invalid(format!(
                "corpus mismatch: {} generated vs {} reference records",
                generated.len(),
                reference.len()
            )));
        }
        let gen_l: Vec<MotionSequence> = generated.iter().map(|p| p.listener.clone()).collect();
        let ref_l: Vec<MotionSequence> = reference.iter().map(|p| p.listener.clone()).collect();
        let l2 = l2_metric(&gen_l, &ref_l)?;
        let fd = frechet_distance(
            &FeatureCloud::from_sequences(&gen_l)?,
            &FeatureCloud::from_sequences(&ref_l)?,
        )?;
        let pfd = paired_fd(generated, reference)?;
        let diversity_gen = diversity(&gen_l)?;
        let variation_gen = variation(&gen_l)?;
        let gt_diversity = diversity(&ref_l)?;
        let gt_variation = variation(&ref_l)?;
        Ok(MetricReport {
            label: label.into(),
            l2,
            fd,
            pfd,
            diversity: diversity_gen,
            variation: variation_gen,
            gt_diversity,
            gt_variation,
            diversity_gap: (diversity_gen - gt_diversity).abs(),
            variation_gap: (variation_gen - gt_variation).abs(),
            sequences: gen_l.len(),
            frames: gen_l.iter().map(MotionSequence::len).sum(),
            config,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: a GT row with diversity/variation, the model row,
    /// and the distance of each from GT.
    pub fn to_table(&self) -> String {
        table(std::slice::from_ref(self))
    }
}

/// Renders several reports under one GT row (taken from the first report).
pub fn table(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<24} {:>10} {:>10} {:>10} {:>10} {:>10} {:>12} {:>12}\n",
        "Model", "L2", "FD", "P-FD", "Diversity", "Variation", "|ΔDiv|", "|ΔVar|"
    );
    if let Some(first) = reports.first() {
        out.push_str(&format!(
            "{:<24} {:>10} {:>10} {:>10} {:>10.4} {:>10.4} {:>12} {:>12}\n",
            "GT", "", "", "", first.gt_diversity, first.gt_variation, "", ""
        ));
    }
    for r in reports {
        out.push_str(&format!(
            "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>12.4} {:>12.4}\n",
            r.label, r.l2, r.fd, r.pfd, r.diversity, r.variation, r.diversity_gap, r.variation_gap
        ));
    }
    out
}
