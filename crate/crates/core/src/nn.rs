//! Layers assembled on the autograd tape.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Mat::uniform(in_dim, out_dim, bound, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros(1, out_dim)));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Mat::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, 1e-5);
        let gain = g.param(self.gain);
        let n = g.mul_row(n, gain);
        let b = g.param(self.bias);
        g.add_row(n, b)
    }
}

/// Temporal convolution over a `T×C` sequence.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub proj: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Conv1d {
            proj: Linear::new(store, name, kernel * in_ch, out_ch, true, rng),
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x
        } else {
            g.unfold(x, self.kernel, self.stride, self.pad)
        };
        self.proj.forward(g, cols)
    }
}

/// Multi-head scaled dot-product attention; queries and keys/values may come
/// from sources of different widths.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "heads must divide width");
        Attention {
            query: Linear::new(store, &format!("{name}.q"), query_dim, width, false, rng),
            key: Linear::new(store, &format!("{name}.k"), kv_dim, width, false, rng),
            value: Linear::new(store, &format!("{name}.v"), kv_dim, width, false, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            heads,
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, kv: Var) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, kv);
        let v = self.value.forward(g, kv);
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            outs.push(g.matmul(weights, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.out.forward(g, merged)
    }
}

/// Two-layer perceptron with a SiLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Fixed sinusoidal encodings, one row per position.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(positions, dim);
    for p in 0..positions {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 * freq;
            m[(p, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

/// Sinusoidal embedding of a single scalar step.
pub fn sinusoidal_embedding(step: f64, dim: usize) -> Mat {
    let mut m = Mat::zeros(1, dim);
    let half = dim / 2;
    for i in 0..dim {
        let k = (i % half.max(1)) as f64;
        let freq = (-(10000f64.ln()) * k / half.max(1) as f64).exp();
        m[(0, i)] = if i < half {
            (step * freq).sin()
        } else {
            (step * freq).cos()
        };
    }
    m
}
