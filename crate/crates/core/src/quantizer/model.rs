use rand::Rng;

use super::{quantize_sequence, Codebook, LatentSequence, LossBreakdown, TokenSequence, VqConfig};
use crate::autograd::{Graph, Grads, ParamStore, Var};
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, NormStats};
use crate::nn::Conv1d;
use crate::tensor::Mat;

/// `x + conv(silu(conv(x)))` at constant width and length.
#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv1d,
    b: Conv1d,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(params: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        ResBlock {
            a: Conv1d::new(params, &format!("{name}.a"), width, width, 3, 1, 1, rng),
            b: Conv1d::new(params, &format!("{name}.b"), width, width, 3, 1, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.a.forward(g, x);
        let h = g.silu(h);
        let h = self.b.forward(g, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    input: Conv1d,
    down: Vec<(Conv1d, Vec<ResBlock>)>,
    output: Conv1d,
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Conv1d,
    up: Vec<(Conv1d, Vec<ResBlock>)>,
    output: Conv1d,
}

/// Moving-average state for the codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub counts: Vec<f64>,
    pub sums: Mat,
}

/// A trained (or freshly initialized) quantizer with everything needed to
/// encode, decode and resume: weights, codebook, EMA state, usage counts and
/// the normalization statistics of its training split.
#[derive(Debug, Clone)]
pub struct VqVae {
    pub config: VqConfig,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    pub codebook: Codebook,
    pub ema: EmaState,
    /// Assignment counts from the most recent training epoch.
    pub usage: Vec<f64>,
    pub norm: NormStats,
    pub epochs_trained: usize,
}

/// Values from one training forward/backward pass.
pub(crate) struct ForwardOutput {
    pub losses: LossBreakdown,
    pub grads: Option<Grads>,
    pub latents: Mat,
    pub tokens: Vec<usize>,
}

impl VqVae {
    pub fn new<R: Rng + ?Sized>(config: VqConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let h = config.hidden;
        let stages = config.downsample.trailing_zeros() as usize;
        let encoder = Encoder {
            input: Conv1d::new(&mut params, "enc.in", config.motion_dim, h, 3, 1, 1, rng),
            down: (0..stages)
                .map(|i| {
                    let conv = Conv1d::new(&mut params, &format!("enc.down{i}"), h, h, 4, 2, 1, rng);
                    let res = (0..config.res_blocks)
                        .map(|j| ResBlock::new(&mut params, &format!("enc.res{i}.{j}"), h, rng))
                        .collect();
                    (conv, res)
                })
                .collect(),
            output: Conv1d::new(&mut params, "enc.out", h, config.code_dim, 1, 1, 0, rng),
        };
        let decoder = Decoder {
            input: Conv1d::new(&mut params, "dec.in", config.code_dim, h, 3, 1, 1, rng),
            up: (0..stages)
                .map(|i| {
                    let res = (0..config.res_blocks)
                        .map(|j| ResBlock::new(&mut params, &format!("dec.res{i}.{j}"), h, rng))
                        .collect();
                    let conv = Conv1d::new(&mut params, &format!("dec.up{i}"), h, h, 3, 1, 1, rng);
                    (conv, res)
                })
                .collect(),
            output: Conv1d::new(&mut params, "dec.out", h, config.motion_dim, 3, 1, 1, rng),
        };
        let k = config.codebook_size;
        let d = config.code_dim;
        let codebook = Codebook::new(Mat::randn(k, d, 1.0 / (d as f64).sqrt(), rng))?;
        let ema = EmaState {
            counts: vec![1.0; k],
            sums: codebook.codes().clone(),
        };
        Ok(VqVae {
            norm: NormStats::identity(config.motion_dim),
            config,
            params,
            encoder,
            decoder,
            codebook,
            ema,
            usage: vec![0.0; k],
            epochs_trained: 0,
        })
    }

    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = self.encoder.input.forward(g, x);
        h = g.silu(h);
        for (conv, res) in &self.encoder.down {
            h = conv.forward(g, h);
            h = g.silu(h);
            for block in res {
                h = block.forward(g, h);
            }
        }
        self.encoder.output.forward(g, h)
    }

    pub fn decode_graph(&self, g: &mut Graph, q: Var) -> Var {
        let mut h = self.decoder.input.forward(g, q);
        h = g.silu(h);
        for (conv, res) in &self.decoder.up {
            for block in res {
                h = block.forward(g, h);
            }
            h = g.repeat_rows(h, 2);
            h = conv.forward(g, h);
            h = g.silu(h);
        }
        self.decoder.output.forward(g, h)
    }

    fn check_width(&self, frames: &Mat) -> Result<()> {
        if frames.cols() != self.config.motion_dim {
            return Err(Error::invalid(format!(
                "motion width {} does not match the quantizer's d_f = {}",
                frames.cols(),
                self.config.motion_dim
            )));
        }
        self.config.check_length(frames.rows())
    }

    /// Encoder output for an already-normalized sequence.
    pub fn encode(&self, seq: &MotionSequence) -> Result<LatentSequence> {
        self.check_width(seq.frames())?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(seq.frames().clone());
        let z = self.encode_graph(&mut g, x);
        Ok(LatentSequence::new(g.value(z).clone()))
    }

    /// Decoder output (normalized space) for a mask-free token sequence.
    pub fn decode(&self, tokens: &TokenSequence, fps: u32) -> Result<MotionSequence> {
        if tokens.contains_mask() {
            return Err(Error::invalid("cannot decode a token sequence containing MASK"));
        }
        if tokens.vocab() != self.codebook.size() {
            return Err(Error::Mismatch {
                field: "K".into(),
                reason: format!(
                    "tokens use K = {}, codebook has {}",
                    tokens.vocab(),
                    self.codebook.size()
                ),
            });
        }
        if tokens.is_empty() {
            return Err(Error::invalid("cannot decode an empty token sequence"));
        }
        let mut q = Mat::zeros(tokens.len(), self.codebook.dim());
        for (i, &t) in tokens.tokens().iter().enumerate() {
            q.row_mut(i).copy_from_slice(self.codebook.code(t));
        }
        let mut g = Graph::new(&self.params);
        let qv = g.constant(q);
        let out = self.decode_graph(&mut g, qv);
        MotionSequence::new(g.value(out).clone(), fps)
    }

    /// Encode then quantize (normalized input).
    pub fn tokens_of_normalized(&self, seq: &MotionSequence) -> Result<TokenSequence> {
        let z = self.encode(seq)?;
        Ok(quantize_sequence(&z, &self.codebook)?.0)
    }

    /// Raw motion → diffusion target tokens, applying the stored normalization.
    pub fn encode_to_tokens(&self, seq: &MotionSequence) -> Result<TokenSequence> {
        let normed = self.norm.normalize(seq)?;
        self.tokens_of_normalized(&normed)
    }

    /// Tokens → raw (denormalized) motion.
    pub fn decode_to_motion(&self, tokens: &TokenSequence, fps: u32) -> Result<MotionSequence> {
        let normed = self.decode(tokens, fps)?;
        self.norm.denormalize(&normed)
    }

    /// Builds the training loss on the tape. Returns `(total, latent node,
    /// tokens, [embed, rec, vel])`.
    pub fn loss_graph(&self, g: &mut Graph, frames: &Mat) -> (Var, Var, Vec<usize>, [Var; 3]) {
        let x = g.constant(frames.clone());
        let z = self.encode_graph(g, x);
        let (tokens, q) = quantize_sequence(&LatentSequence::new(g.value(z).clone()), &self.codebook)
            .expect("latent width matches codebook");
        let zq = g.straight_through(z, q.latents().clone());
        let recon = self.decode_graph(g, zq);

        let codes = g.constant(q.latents().clone());
        let offset = g.sub(z, codes);
        let embed = g.sum_sq(offset);
        let rec = g.smooth_l1(recon, x);
        let dr = g.diff_rows(recon);
        let dx = g.diff_rows(x);
        let vel = g.smooth_l1(dr, dx);

        let w = self.config.loss_weights;
        let a = g.scale(embed, w.embed);
        let b = g.scale(rec, w.reconstruction);
        let c = g.scale(vel, w.velocity);
        let ab = g.add(a, b);
        let total = g.add(ab, c);
        (total, z, tokens.tokens().to_vec(), [embed, rec, vel])
    }

    pub(crate) fn forward(&self, frames: &Mat, with_grads: bool) -> ForwardOutput {
        let mut g = Graph::new(&self.params);
        let (total, z, tokens, [e, r, v]) = self.loss_graph(&mut g, frames);
        let losses = LossBreakdown {
            embed: g.scalar(e),
            reconstruction: g.scalar(r),
            velocity: g.scalar(v),
            total: g.scalar(total),
        };
        let grads = with_grads.then(|| g.backward(total));
        ForwardOutput {
            losses,
            grads,
            latents: g.value(z).clone(),
            tokens,
        }
    }

    /// Loss breakdown on a normalized sequence without gradients.
    pub fn evaluate(&self, seq: &MotionSequence) -> Result<LossBreakdown> {
        self.check_width(seq.frames())?;
        Ok(self.forward(seq.frames(), false).losses)
    }

    /// Mean losses over raw (unnormalized) sequences, using the model's own
    /// normalization statistics.
    pub fn corpus_losses(&self, seqs: &[MotionSequence]) -> Result<LossBreakdown> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        let n = seqs.len() as f64;
        let mut mean = LossBreakdown::default();
        for seq in seqs {
            let l = self.evaluate(&self.norm.normalize(seq)?)?;
            mean.total += l.total / n;
            mean.embed += l.embed / n;
            mean.reconstruction += l.reconstruction / n;
            mean.velocity += l.velocity / n;
        }
        Ok(mean)
    }

    /// Perplexity of the stored usage histogram (K for uniform usage, 0 when unused).
    pub fn usage_perplexity(&self) -> f64 {
        crate::metrics::perplexity(&self.usage)
    }
}
