//! Synthetic speaker/listener dyads with a known lagged-linear coupling,
//! a speech-like waveform and topic-keyed text, plus the `DLDS` dataset file.
//!
//! Speaker motion mixes three random-phase low-frequency sinusoids through a
//! corpus-wide weight matrix and adds an AR(1) walk. Its amplitude is set by
//! the topic. The listener copies the speaker through `coupling` after `lag`
//! frames, adds a rest pose (`identity_bias` plus a per-topic offset) and
//! Gaussian noise. All values are rounded to `f32` so files round-trip exactly.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::MfccConfig;
use crate::container::{config_hash, push_f32s, read_f32s, read_file, write_file, CONTAINER_VERSION};
use crate::error::{Error, Result};
use crate::metrics::DyadPair;
use crate::motion::{MotionSequence, ROTATION_DIM};
use crate::tensor::Mat;

pub const DATASET_MAGIC: [u8; 4] = *b"DLDS";

/// Listener gain applied to the lagged speaker frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coupling {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DyadConfig {
    pub frames: usize,
    pub fps: u32,
    pub expression_dim: usize,
    pub lag: usize,
    pub coupling: Coupling,
    pub noise_std: f64,
    /// Listener rest pose; `None` means zeros.
    pub identity_bias: Option<Vec<f64>>,
    pub topic_count: usize,
    /// Scale of the per-topic listener offset (0 disables it).
    pub topic_offset: f64,
    pub amplitude_ceiling: f64,
    pub components: usize,
    pub ar_coef: f64,
    pub ar_std: f64,
    /// Frames per token in the downstream quantizer; `frames` must divide by it.
    pub downsample: usize,
    pub carrier_hz: f64,
    pub audio_noise: f64,
    pub audio: MfccConfig,
    /// When set, each corpus item is a stream of this many frames cut into
    /// windows of `frames` with the given stride.
    pub stream_frames: Option<usize>,
    pub stride: usize,
    pub seed: u64,
}

impl Default for DyadConfig {
    fn default() -> Self {
        DyadConfig {
            frames: 240,
            fps: 30,
            expression_dim: 50,
            lag: 12,
            coupling: Coupling::Scalar(0.8),
            noise_std: 0.05,
            identity_bias: None,
            topic_count: 4,
            topic_offset: 0.5,
            amplitude_ceiling: 3.0,
            components: 3,
            ar_coef: 0.95,
            ar_std: 0.02,
            downsample: 8,
            carrier_hz: 220.0,
            audio_noise: 0.01,
            audio: MfccConfig::default(),
            stream_frames: None,
            stride: 80,
            seed: 0,
        }
    }
}

impl DyadConfig {
    pub fn motion_dim(&self) -> usize {
        self.expression_dim + ROTATION_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.motion_dim();
        if self.frames == 0 || self.fps == 0 {
            return Err(Error::invalid("frames and fps must be positive"));
        }
        if self.downsample == 0 || self.frames % self.downsample != 0 {
            return Err(Error::invalid(format!(
                "T = {} must be divisible by the downsampling ratio τ = {}",
                self.frames, self.downsample
            )));
        }
        if self.lag >= self.frames {
            return Err(Error::invalid(format!(
                "lag {} must be smaller than T = {}",
                self.lag, self.frames
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.ar_std >= 0.0) || !(self.audio_noise >= 0.0) {
            return Err(Error::invalid("noise levels must be ≥ 0"));
        }
        if self.topic_count == 0 || self.components == 0 {
            return Err(Error::invalid("topic_count and components must be positive"));
        }
        if !(self.amplitude_ceiling > 0.0) {
            return Err(Error::invalid("amplitude ceiling must be positive"));
        }
        if let Some(b) = &self.identity_bias {
            if b.len() != d {
                return Err(Error::invalid(format!(
                    "identity_bias has {} entries, expected d_f = {d}",
                    b.len()
                )));
            }
        }
        if let Coupling::Matrix(m) = &self.coupling {
            if m.len() != d || m.iter().any(|r| r.len() != d) {
                return Err(Error::invalid(format!("coupling matrix must be {d}×{d}")));
            }
        }
        if self.fps != self.audio.fps {
            return Err(Error::invalid(format!(
                "audio fps {} differs from motion fps {}",
                self.audio.fps, self.fps
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be ≥ 1"));
        }
        if let Some(len) = self.stream_frames {
            if len < self.frames {
                return Err(Error::invalid(format!(
                    "stream of {len} frames is shorter than one {}-frame window",
                    self.frames
                )));
            }
        }
        self.audio.validate().map_err(|e| Error::invalid(e.to_string()))
    }

    /// Corpus-wide structure: mixing weights and per-topic listener offsets.
    fn world(&self) -> World {
        let d = self.motion_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xD1A1_0600_5EED_0001);
        let mut weights = Mat::randn(self.components, d, 1.0, &mut rng);
        for c in 0..d {
            let l1: f64 = (0..self.components).map(|k| weights[(k, c)].abs()).sum();
            for k in 0..self.components {
                weights[(k, c)] /= l1.max(1e-12);
            }
        }
        let offsets = Mat::randn(self.topic_count, d, self.topic_offset, &mut rng);
        World { weights, offsets }
    }
}

struct World {
    weights: Mat,
    offsets: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DyadSample {
    pub speaker: MotionSequence,
    pub listener: MotionSequence,
    pub waveform: Vec<f64>,
    pub text_tokens: Vec<u32>,
    pub topic_id: usize,
    /// Seed of the stream that produced this record.
    pub seed: u64,
}

impl DyadSample {
    pub fn pair(&self) -> DyadPair {
        DyadPair {
            speaker: self.speaker.clone(),
            listener: self.listener.clone(),
        }
    }
}

/// Fixed token template for a topic: five topic words and two shared fillers.
pub fn topic_tokens(topic: usize) -> Vec<u32> {
    let base = 100 + 8 * topic as u32;
    let mut t: Vec<u32> = (0..5).map(|j| base + j).collect();
    t.extend([1, 2]);
    t
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

fn generate_with_len<R: Rng + ?Sized>(
    config: &DyadConfig,
    world: &World,
    frames: usize,
    seed: u64,
    rng: &mut R,
) -> Result<DyadSample> {
    let d = config.motion_dim();
    let ceiling = config.amplitude_ceiling;
    let topic = rng.random_range(0..config.topic_count);
    let amp = if config.topic_count == 1 {
        1.0
    } else {
        0.4 + 0.6 * topic as f64 / (config.topic_count - 1) as f64
    };
    let freqs: Vec<f64> = (0..config.components)
        .map(|_| rng.random_range(0.15..0.6))
        .collect();
    let phases: Vec<f64> = (0..config.components)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let ar_noise = Normal::new(0.0, config.ar_std.max(0.0)).expect("finite std");
    let mut speaker = Mat::zeros(frames, d);
    let mut walk = vec![0.0; d];
    for t in 0..frames {
        let time = t as f64 / config.fps as f64;
        let waves: Vec<f64> = freqs
            .iter()
            .zip(&phases)
            .map(|(f, p)| (2.0 * PI * f * time + p).sin())
            .collect();
        for c in 0..d {
            walk[c] = config.ar_coef * walk[c] + ar_noise.sample(rng);
            let v: f64 = waves
                .iter()
                .enumerate()
                .map(|(k, w)| world.weights[(k, c)] * w)
                .sum::<f64>()
                * amp
                + walk[c];
            speaker[(t, c)] = round32(v.clamp(-ceiling, ceiling));
        }
    }

    let bias = config.identity_bias.clone().unwrap_or_else(|| vec![0.0; d]);
    let rest: Vec<f64> = (0..d).map(|c| bias[c] + world.offsets[(topic, c)]).collect();
    let noise = Normal::new(0.0, config.noise_std).expect("finite std");
    let mut listener = Mat::zeros(frames, d);
    for t in 0..frames {
        if t < config.lag {
            for c in 0..d {
                listener[(t, c)] = round32(rest[c].clamp(-ceiling, ceiling));
            }
            continue;
        }
        let src = speaker.row(t - config.lag);
        for c in 0..d {
            let driven = match &config.coupling {
                Coupling::Scalar(g) => g * src[c],
                Coupling::Matrix(m) => m[c].iter().zip(src).map(|(a, b)| a * b).sum(),
            };
            let e = if config.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            listener[(t, c)] = round32((driven + rest[c] + e).clamp(-ceiling, ceiling));
        }
    }

    // speech-like carrier whose envelope follows the speaker's expression energy
    let audio = &config.audio;
    let samples = audio.samples_for_frames(frames);
    let hop = audio.hop();
    let energy: Vec<f64> = speaker
        .iter_rows()
        .map(|r| {
            let e = &r[..config.expression_dim];
            0.2 + (e.iter().map(|v| v * v).sum::<f64>() / e.len().max(1) as f64).sqrt()
        })
        .collect();
    let audio_noise = Normal::new(0.0, config.audio_noise).expect("finite std");
    let waveform: Vec<f64> = (0..samples)
        .map(|n| {
            let pos = ((n as f64 - audio.window as f64 / 2.0) / hop).max(0.0);
            let lo = (pos.floor() as usize).min(frames - 1);
            let hi = (lo + 1).min(frames - 1);
            let w = (pos - lo as f64).min(1.0);
            let env = (1.0 - w) * energy[lo] + w * energy[hi];
            let carrier = (2.0 * PI * config.carrier_hz * n as f64 / audio.sample_rate as f64).sin();
            let e = if config.audio_noise > 0.0 {
                audio_noise.sample(rng)
            } else {
                0.0
            };
            round32(env * carrier + e)
        })
        .collect();

    Ok(DyadSample {
        speaker: MotionSequence::new(speaker, config.fps)?,
        listener: MotionSequence::new(listener, config.fps)?,
        waveform,
        text_tokens: topic_tokens(topic),
        topic_id: topic,
        seed,
    })
}

/// One `frames`-long dyad; randomness comes from `rng`, corpus structure from `config.seed`.
pub fn generate_dyad<R: Rng + ?Sized>(config: &DyadConfig, rng: &mut R) -> Result<DyadSample> {
    config.validate()?;
    generate_with_len(config, &config.world(), config.frames, config.seed, rng)
}

/// A long dyad of `frames` frames for sliding-window cutting.
pub fn generate_stream<R: Rng + ?Sized>(config: &DyadConfig, frames: usize, rng: &mut R) -> Result<DyadSample> {
    config.validate()?;
    if frames == 0 {
        return Err(Error::invalid("stream needs at least one frame"));
    }
    generate_with_len(config, &config.world(), frames, config.seed, rng)
}

/// Windows of `window` frames every `stride` frames; the waveform is cut to
/// the matching sample range.
pub fn sliding_window(stream: &DyadSample, window: usize, stride: usize, audio: &MfccConfig) -> Result<Vec<DyadSample>> {
    if stride == 0 || window == 0 {
        return Err(Error::invalid("window and stride must be ≥ 1"));
    }
    let len = stream.speaker.len();
    if len < window {
        return Err(Error::invalid(format!(
            "stream of {len} frames is shorter than one {window}-frame window"
        )));
    }
    let count = (len - window) / stride + 1;
    let wave_len = audio.samples_for_frames(window);
    let hop = audio.hop();
    let fps = stream.speaker.fps();
    (0..count)
        .map(|w| {
            let start = w * stride;
            let s0 = (start as f64 * hop + 1e-9).floor() as usize;
            let s1 = (s0 + wave_len).min(stream.waveform.len());
            Ok(DyadSample {
                speaker: MotionSequence::new(stream.speaker.frames().slice_rows(start, window), fps)?,
                listener: MotionSequence::new(stream.listener.frames().slice_rows(start, window), fps)?,
                waveform: stream.waveform[s0..s1].to_vec(),
                text_tokens: stream.text_tokens.clone(),
                topic_id: stream.topic_id,
                seed: stream.seed,
            })
        })
        .collect()
}

/// `count` items generated in parallel; item `i` uses seed `config.seed + i`.
/// With `stream_frames` set, every item is a stream cut into windows.
pub fn generate_corpus(config: &DyadConfig, count: usize) -> Result<Vec<DyadSample>> {
    generate_corpus_from(config, count, 0)
}

/// Like [`generate_corpus`] but item `i` uses seed `config.seed + first + i`.
/// The corpus structure (topic offsets, mixing weights) still comes from
/// `config.seed`, so a held-out set drawn this way shares the training
/// distribution.
pub fn generate_corpus_from(config: &DyadConfig, count: usize, first: u64) -> Result<Vec<DyadSample>> {
    config.validate()?;
    let world = config.world();
    let per_item: Vec<Result<Vec<DyadSample>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed.wrapping_add(first).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match config.stream_frames {
                None => Ok(vec![generate_with_len(config, &world, config.frames, seed, &mut rng)?]),
                Some(len) => {
                    let stream = generate_with_len(config, &world, len, seed, &mut rng)?;
                    sliding_window(&stream, config.frames, config.stride, &config.audio)
                }
            }
        })
        .collect();
    let mut out = Vec::new();
    for item in per_item {
        out.extend(item?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordEntry {
    /// Byte offset relative to the start of the payload section.
    offset: u64,
    frames: usize,
    width: usize,
    waveform: usize,
    text: usize,
    topic: usize,
    seed: u64,
}

/// Records plus the configuration (and its hash) that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<DyadSample>,
    pub fps: u32,
    pub config: serde_json::Value,
}

impl Dataset {
    pub fn new(samples: Vec<DyadSample>, fps: u32, config: serde_json::Value) -> Self {
        Dataset { samples, fps, config }
    }

    pub fn from_config(config: &DyadConfig, count: usize) -> Result<Self> {
        Ok(Dataset {
            samples: generate_corpus(config, count)?,
            fps: config.fps,
            config: serde_json::to_value(config)?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pairs(&self) -> Vec<DyadPair> {
        self.samples.iter().map(DyadSample::pair).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut records = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let start = payload.len();
            records.push(RecordEntry {
                offset: start as u64,
                frames: s.speaker.len(),
                width: s.speaker.width(),
                waveform: s.waveform.len(),
                text: s.text_tokens.len(),
                topic: s.topic_id,
                seed: s.seed,
            });
            push_f32s(&mut payload, s.speaker.frames().data());
            push_f32s(&mut payload, s.listener.frames().data());
            push_f32s(&mut payload, &s.waveform);
            let tokens: Vec<f64> = s.text_tokens.iter().map(|&t| t as f64).collect();
            push_f32s(&mut payload, &tokens);
            let crc = crc32fast::hash(&payload[start..]);
            payload.extend_from_slice(&crc.to_le_bytes());
        }
        let manifest = serde_json::json!({
            "count": self.samples.len(),
            "fps": self.fps,
            "records": records,
            "config": self.config,
            "config_hash": config_hash(&self.config),
        });
        let mut out = crate::container::frame_header(DATASET_MAGIC, &manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, base) = crate::container::parse_header(bytes, DATASET_MAGIC)?;
        let count = manifest["count"]
            .as_u64()
            .ok_or_else(|| Error::format(16, "manifest lacks `count`"))? as usize;
        let fps = manifest["fps"]
            .as_u64()
            .ok_or_else(|| Error::format(16, "manifest lacks `fps`"))? as u32;
        let records: Vec<RecordEntry> = serde_json::from_value(manifest["records"].clone())
            .map_err(|e| Error::format(16, format!("bad record index: {e}")))?;
        if records.len() != count {
            return Err(Error::format(
                16,
                format!("manifest lists {} records but count is {count}", records.len()),
            ));
        }
        let mut pos = base;
        let mut samples = Vec::with_capacity(count);
        for (i, r) in records.iter().enumerate() {
            let start = pos as u64;
            if base as u64 + r.offset != start {
                return Err(Error::format(start, format!("record {i} offset disagrees with manifest")));
            }
            let motion = r.frames * r.width;
            let floats = 2 * motion + r.waveform + r.text;
            let end = pos + floats * 4;
            if end + 4 > bytes.len() {
                return Err(Error::format(
                    bytes.len() as u64,
                    format!("record {i} truncated: needs {} bytes from offset {start}", floats * 4 + 4),
                ));
            }
            let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
            if crc32fast::hash(&bytes[pos..end]) != stored {
                return Err(Error::format(start, format!("record {i} fails its CRC32 check")));
            }
            let values = read_f32s(&bytes[pos..end], start, floats)?;
            let speaker = Mat::from_vec(r.frames, r.width, values[..motion].to_vec());
            let listener = Mat::from_vec(r.frames, r.width, values[motion..2 * motion].to_vec());
            let waveform = values[2 * motion..2 * motion + r.waveform].to_vec();
            let text_tokens = values[2 * motion + r.waveform..].iter().map(|&v| v as u32).collect();
            let wrap = |m: Mat| {
                MotionSequence::new(m, fps).map_err(|e| Error::format(start, format!("record {i}: {e}")))
            };
            samples.push(DyadSample {
                speaker: wrap(speaker)?,
                listener: wrap(listener)?,
                waveform,
                text_tokens,
                topic_id: r.topic,
                seed: r.seed,
            });
            pos = end + 4;
        }
        if pos != bytes.len() {
            return Err(Error::format(
                pos as u64,
                format!("{} trailing bytes after the last record", bytes.len() - pos),
            ));
        }
        Ok(Dataset {
            samples,
            fps,
            config: manifest["config"].clone(),
        })
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &dataset.to_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&read_file(path)?)
}

/// Header version written into every dataset file.
pub fn dataset_version() -> u32 {
    CONTAINER_VERSION
}
