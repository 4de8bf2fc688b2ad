use rand::Rng;
use serde::{Deserialize, Serialize};

use super::posterior::{one_hot, q_posterior, q_posterior_graph, LOG_FLOOR};
use super::schedule::DiffusionSchedule;
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Attention, LayerNorm, Linear, Mlp};
use crate::quantizer::TokenSequence;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Token positions `N = T/τ`.
    pub positions: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            width: 512,
            depth: 4,
            heads: 8,
            positions: 30,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.positions == 0 {
            return Err(Error::config("denoiser width, depth and positions must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "denoiser heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

/// Transformer over token positions: token + position + timestep embeddings,
/// then blocks of self-attention, cross-attention into the condition
/// sequence and an MLP (pre-norm, residual). The head emits K logits per
/// position, so MASK never receives probability in `x̃_0`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub vocab: usize,
    token_embed: ParamId,
    position_embed: ParamId,
    time_mlp: Mlp,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    head: Linear,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: DenoiserConfig,
        vocab: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let token_embed = store.add("den.token", Mat::randn(vocab + 1, w, 0.02, rng));
        let position_embed = store.add("den.position", Mat::randn(config.positions, w, 0.02, rng));
        let time_mlp = Mlp::new(store, "den.time", w, w, w, rng);
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("den.block{i}");
                Block {
                    norm_self: LayerNorm::new(store, &format!("{p}.ln1"), w),
                    self_attn: Attention::new(store, &format!("{p}.self"), w, w, w, config.heads, rng),
                    norm_cross: LayerNorm::new(store, &format!("{p}.ln2"), w),
                    cross_attn: Attention::new(
                        store,
                        &format!("{p}.cross"),
                        w,
                        cond_dim,
                        w,
                        config.heads,
                        rng,
                    ),
                    norm_mlp: LayerNorm::new(store, &format!("{p}.ln3"), w),
                    mlp: Mlp::new(store, &format!("{p}.mlp"), w, 2 * w, w, rng),
                }
            })
            .collect();
        Ok(Denoiser {
            config,
            vocab,
            token_embed,
            position_embed,
            time_mlp,
            blocks,
            norm_out: LayerNorm::new(store, "den.ln_out", w),
            head: Linear::new(store, "den.head", w, vocab, true, rng),
        })
    }

    /// `N×K` logits of `x̃_0` given `x_t`, the step and an `M×d_cond` condition.
    pub fn logits_graph(&self, g: &mut Graph, xt: &TokenSequence, t: usize, cond: Var) -> Result<Var> {
        if xt.vocab() != self.vocab {
            return Err(Error::Mismatch {
                field: "K".into(),
                reason: format!("tokens use K = {}, denoiser has {}", xt.vocab(), self.vocab),
            });
        }
        if xt.len() != self.config.positions {
            return Err(Error::Mismatch {
                field: "N".into(),
                reason: format!(
                    "sequence has {} tokens, denoiser expects {}",
                    xt.len(),
                    self.config.positions
                ),
            });
        }
        let table = g.param(self.token_embed);
        let tokens = g.gather_rows(table, xt.tokens());
        let pos = g.param(self.position_embed);
        let mut h = g.add(tokens, pos);
        let temb = g.constant(sinusoidal_embedding(t as f64, self.config.width));
        let temb = self.time_mlp.forward(g, temb);
        h = g.add_row(h, temb);
        for b in &self.blocks {
            let n = b.norm_self.forward(g, h);
            let a = b.self_attn.forward(g, n, n);
            h = g.add(h, a);
            let n = b.norm_cross.forward(g, h);
            let c = b.cross_attn.forward(g, n, cond);
            h = g.add(h, c);
            let n = b.norm_mlp.forward(g, h);
            let m = b.mlp.forward(g, n);
            h = g.add(h, m);
        }
        let h = self.norm_out.forward(g, h);
        Ok(self.head.forward(g, h))
    }
}

/// Loss nodes built on a tape for logits of `x̃_0`.
pub struct LossNodes {
    pub total: Var,
    pub vlb: Var,
    pub x0: Var,
}

/// Same quantities as [`super::loss_terms`], recorded for backpropagation.
pub fn loss_graph(
    g: &mut Graph,
    logits: Var,
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: usize,
    sched: &DiffusionSchedule,
    lambda: f64,
) -> Result<LossNodes> {
    let n = x0.len() as f64;
    let p = g.softmax_rows(logits);
    let log_p = g.log_floor(p, LOG_FLOOR);
    let target = one_hot(x0).map(|v| -v / n);
    let x0_loss = g.dot_const(log_p, target);
    let vlb = if t == 1 {
        x0_loss
    } else {
        let q = q_posterior(&one_hot(x0), xt, t, sched)?;
        let entropy_part: f64 = q
            .data()
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
            / n;
        let post = q_posterior_graph(g, p, xt, t, sched)?;
        let log_post = g.log_floor(post, LOG_FLOOR);
        let cross = g.dot_const(log_post, q.map(|v| -v / n));
        let c = g.constant(Mat::filled(1, 1, entropy_part));
        g.add(cross, c)
    };
    let weighted = g.scale(x0_loss, lambda);
    let total = g.add(vlb, weighted);
    Ok(LossNodes {
        total,
        vlb,
        x0: x0_loss,
    })
}
