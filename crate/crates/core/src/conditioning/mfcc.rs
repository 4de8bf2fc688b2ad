use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MFCC_LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub sample_rate: u32,
    /// Analysis window length in samples.
    pub window: usize,
    /// Hop in samples; `None` means `sample_rate / fps`, which may be
    /// fractional (frame `i` then starts at `floor(i·hop)`).
    pub hop: Option<f64>,
    /// Video frame rate used for the default hop.
    pub fps: u32,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub pre_emphasis: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16_000,
            window: 400,
            hop: None,
            fps: 30,
            n_mels: 40,
            n_mfcc: 13,
            pre_emphasis: 0.97,
        }
    }
}

impl MfccConfig {
    pub fn hop(&self) -> f64 {
        self.hop
            .unwrap_or(self.sample_rate as f64 / self.fps.max(1) as f64)
    }

    pub fn fft_size(&self) -> usize {
        self.window.next_power_of_two()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.window == 0 || self.fps == 0 {
            return Err(Error::config("sample rate, window and fps must be positive"));
        }
        if !(self.hop() >= 1.0) {
            return Err(Error::config(format!("hop must be ≥ 1 sample, got {}", self.hop())));
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::config(format!(
                "need 1 ≤ n_mfcc ({}) ≤ n_mels ({})",
                self.n_mfcc, self.n_mels
            )));
        }
        Ok(())
    }

    /// `floor((L − window)/hop) + 1`, or 0 when the signal is shorter than a window.
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window {
            return 0;
        }
        ((samples - self.window) as f64 / self.hop() + 1e-9).floor() as usize + 1
    }

    /// Waveform length that yields exactly `frames` analysis frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        if frames == 0 {
            return 0;
        }
        ((frames - 1) as f64 * self.hop()).ceil() as usize + self.window
    }

    fn frame_start(&self, i: usize) -> usize {
        (i as f64 * self.hop() + 1e-9).floor() as usize
    }
}

/// `T_a×n_mfcc` cepstral features plus the framing that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub frames: Mat,
    pub hop: f64,
    pub window: usize,
    pub sample_rate: u32,
}

impl AudioFeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, `n_mels × (fft/2 + 1)`. Filter `m`
/// rises from centre `m−1` to centre `m` and falls to centre `m+1`, with
/// centres evenly spaced in mel between 0 Hz and Nyquist.
pub fn mel_filterbank(config: &MfccConfig) -> Mat {
    let n_fft = config.fft_size();
    let bins = n_fft / 2 + 1;
    let nyquist = config.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let centres: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let mut bank = Mat::zeros(config.n_mels, bins);
    for m in 0..config.n_mels {
        let (lo, mid, hi) = (centres[m], centres[m + 1], centres[m + 2]);
        for b in 0..bins {
            let f = b as f64 * config.sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            bank[(m, b)] = w;
        }
    }
    bank
}

pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Orthonormal type-II DCT, first `keep` coefficients.
pub fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum::<f64>()
        })
        .collect()
}

fn pre_emphasize(waveform: &[f64], coef: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(waveform.len());
    out.push(waveform[0]);
    for w in waveform.windows(2) {
        out.push(w[1] - coef * w[0]);
    }
    out
}

struct Frontend {
    config: MfccConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: Mat,
}

impl Frontend {
    fn new(config: &MfccConfig) -> Result<Self> {
        config.validate()?;
        let n_fft = config.fft_size();
        Ok(Frontend {
            config: *config,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            window: hann(config.window),
            bank: mel_filterbank(config),
        })
    }

    /// Log mel energies, `T_a × n_mels`.
    fn log_mel(&self, waveform: &[f64]) -> Result<Mat> {
        let c = &self.config;
        if waveform.len() < c.window {
            return Err(Error::invalid(format!(
                "waveform has {} samples, shorter than one {}-sample window",
                waveform.len(),
                c.window
            )));
        }
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("waveform has non-finite samples"));
        }
        let signal = pre_emphasize(waveform, c.pre_emphasis);
        let frames = c.frame_count(signal.len());
        let n_fft = c.fft_size();
        let bins = n_fft / 2 + 1;
        let mut out = Mat::zeros(frames, c.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut magnitude = vec![0.0; bins];
        for i in 0..frames {
            let start = c.frame_start(i);
            buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
            for (n, w) in self.window.iter().enumerate() {
                buf[n].re = signal[start + n] * w;
            }
            self.fft.process(&mut buf);
            for (m, z) in magnitude.iter_mut().zip(&buf) {
                *m = z.norm();
            }
            for m in 0..c.n_mels {
                let e: f64 = self.bank.row(m).iter().zip(&magnitude).map(|(a, b)| a * b).sum();
                out[(i, m)] = e.max(MFCC_LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }
}

/// Filterbank energies before the log, `T_a × n_mels`.
pub fn mel_energies(waveform: &[f64], config: &MfccConfig) -> Result<Mat> {
    Ok(Frontend::new(config)?.log_mel(waveform)?.map(f64::exp))
}

/// Pre-emphasis, Hann window, magnitude spectrum, mel filterbank, log, DCT-II.
pub fn mfcc(waveform: &[f64], config: &MfccConfig) -> Result<AudioFeatureSequence> {
    if waveform.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    let front = Frontend::new(config)?;
    let log_mel = front.log_mel(waveform)?;
    let mut frames = Mat::zeros(log_mel.rows(), config.n_mfcc);
    for (i, row) in log_mel.iter_rows().enumerate() {
        frames.row_mut(i).copy_from_slice(&dct2(row, config.n_mfcc));
    }
    Ok(AudioFeatureSequence {
        frames,
        hop: config.hop(),
        window: config.window,
        sample_rate: config.sample_rate,
    })
}
