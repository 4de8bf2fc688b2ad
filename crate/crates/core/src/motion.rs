//! Facial-motion sequences: per-frame expression + head-rotation coefficients,
//! their first differences, z-score normalization, and the smooth-L1 loss
//! shared by the quantizer objectives.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::huber;
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Expression dimensionality used when nothing else is configured.
pub const DEFAULT_EXPRESSION_DIM: usize = 50;
/// Axis-angle head rotation.
pub const ROTATION_DIM: usize = 3;
/// Lower clamp for normalization standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// One frame `f_t = [β_t, R_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame {
    pub expression: Vec<f64>,
    pub rotation: [f64; ROTATION_DIM],
}

impl MotionFrame {
    pub fn new(expression: Vec<f64>, rotation: [f64; ROTATION_DIM]) -> Result<Self> {
        let frame = MotionFrame {
            expression,
            rotation: rotation.map(wrap_angle),
        };
        if !frame.expression.iter().chain(&frame.rotation).all(|v| v.is_finite()) {
            return Err(Error::invalid("motion frame has non-finite coefficients"));
        }
        Ok(frame)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.expression.clone();
        v.extend_from_slice(&self.rotation);
        v
    }
}

/// Wraps an angle into `[−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) {
        return a;
    }
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// `T×d_f` facial coefficients at a fixed frame rate. The last three columns
/// are the rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Mat,
    fps: u32,
}

impl MotionSequence {
    pub fn new(frames: Mat, fps: u32) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::invalid("motion sequence has no frames"));
        }
        if frames.cols() < ROTATION_DIM {
            return Err(Error::invalid(format!(
                "motion width {} is smaller than the rotation block",
                frames.cols()
            )));
        }
        if fps == 0 {
            return Err(Error::invalid("fps must be positive"));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("motion sequence has non-finite coefficients"));
        }
        Ok(MotionSequence { frames, fps })
    }

    pub fn from_frames(frames: &[MotionFrame], fps: u32) -> Result<Self> {
        let rows: Vec<Vec<f64>> = frames.iter().map(MotionFrame::to_vec).collect();
        if rows.is_empty() {
            return Err(Error::invalid("motion sequence has no frames"));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("frames have differing expression widths"));
        }
        MotionSequence::new(Mat::from_rows(&rows), fps)
    }

    pub fn frames(&self) -> &Mat {
        &self.frames
    }

    pub fn into_frames(self) -> Mat {
        self.frames
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.cols()
    }

    pub fn expression_dim(&self) -> usize {
        self.width() - ROTATION_DIM
    }

    pub fn frame(&self, t: usize) -> MotionFrame {
        let row = self.frames.row(t);
        let d_m = self.expression_dim();
        MotionFrame {
            expression: row[..d_m].to_vec(),
            rotation: [row[d_m], row[d_m + 1], row[d_m + 2]],
        }
    }

    /// Wraps the rotation columns into `[−π, π]`.
    pub fn canonicalize(mut self) -> Self {
        let d_m = self.expression_dim();
        for t in 0..self.len() {
            for v in &mut self.frames.row_mut(t)[d_m..] {
                *v = wrap_angle(*v);
            }
        }
        self
    }
}

/// `F_Δ`: row 0 is zero, row `x` is `f_x − f_{x−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialSequence {
    deltas: Mat,
}

impl DifferentialSequence {
    pub fn deltas(&self) -> &Mat {
        &self.deltas
    }

    pub fn into_deltas(self) -> Mat {
        self.deltas
    }

    /// Cumulative sum starting from `first`; inverts [`compute_differential`].
    pub fn integrate(&self, first: &[f64]) -> Mat {
        let (t, d) = self.deltas.shape();
        let mut out = Mat::zeros(t, d);
        out.row_mut(0).copy_from_slice(first);
        for x in 1..t {
            for c in 0..d {
                out[(x, c)] = out[(x - 1, c)] + self.deltas[(x, c)];
            }
        }
        out
    }
}

pub fn compute_differential(seq: &MotionSequence) -> DifferentialSequence {
    DifferentialSequence {
        deltas: differential_of(seq.frames()),
    }
}

pub(crate) fn differential_of(frames: &Mat) -> Mat {
    let (t, d) = frames.shape();
    let mut deltas = Mat::zeros(t, d);
    for x in 1..t {
        for c in 0..d {
            deltas[(x, c)] = frames[(x, c)] - frames[(x - 1, c)];
        }
    }
    deltas
}

/// Mean smooth-L1 of `pred − target`.
pub fn smooth_l1(pred: &Mat, target: &Mat) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "smooth_l1 shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| huber(p - t))
        .sum();
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(width: usize) -> Self {
        NormStats {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Per-dimension mean and population std over every frame of every sequence.
    pub fn fit<'a>(dataset: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        NormStats::fit_rows(dataset.into_iter().map(MotionSequence::frames))
    }

    /// Same statistics over the rows of arbitrary feature matrices.
    pub fn fit_rows<'a>(mats: impl IntoIterator<Item = &'a Mat>) -> Result<Self> {
        let mats: Vec<&Mat> = mats.into_iter().collect();
        let first = mats
            .first()
            .ok_or_else(|| Error::invalid("cannot fit normalization on an empty dataset"))?;
        let width = first.cols();
        if mats.iter().any(|m| m.cols() != width) {
            return Err(Error::invalid("sequences have differing widths"));
        }
        let count: usize = mats.iter().map(|m| m.rows()).sum();
        if count == 0 {
            return Err(Error::invalid("cannot fit normalization on zero frames"));
        }
        let mut mean = vec![0.0; width];
        for m in &mats {
            for row in m.iter_rows() {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; width];
        for m in &mats {
            for row in m.iter_rows() {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu).powi(2);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    /// Z-scores the rows of `m` (width must match).
    pub fn apply(&self, m: &Mat) -> Result<Mat> {
        if m.cols() != self.width() {
            return Err(Error::invalid(format!(
                "normalization width {} does not match feature width {}",
                self.width(),
                m.cols()
            )));
        }
        let mut out = m.clone();
        for t in 0..out.rows() {
            for ((v, mu), s) in out.row_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / s;
            }
        }
        Ok(out)
    }

    fn check(&self, seq: &MotionSequence) -> Result<()> {
        if seq.width() != self.width() {
            return Err(Error::invalid(format!(
                "normalization width {} does not match sequence width {}",
                self.width(),
                seq.width()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        self.check(seq)?;
        let mut frames = seq.frames().clone();
        for t in 0..frames.rows() {
            for ((v, m), s) in frames.row_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        MotionSequence::new(frames, seq.fps())
    }

    pub fn denormalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        self.check(seq)?;
        let mut frames = seq.frames().clone();
        for t in 0..frames.rows() {
            for ((v, m), s) in frames.row_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        MotionSequence::new(frames, seq.fps())
    }
}
