use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, Attention, Linear, Mlp};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub width: usize,
    pub heads: usize,
    pub cond_dim: usize,
    pub mlp_hidden: usize,
    pub text_dim: usize,
    /// Average-pooling stride; equals the quantizer's τ so that condition
    /// positions line up with token positions.
    pub pool_stride: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            width: 64,
            heads: 1,
            cond_dim: 64,
            mlp_hidden: 128,
            text_dim: 64,
            pool_stride: 8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.cond_dim == 0 || self.mlp_hidden == 0 || self.pool_stride == 0 {
            return Err(Error::config("fusion widths and pool stride must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "fusion heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        Ok(())
    }
}

/// Which speaker inputs reach the fusion network. A disabled modality is
/// replaced by zeros of the same shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalitySwitches {
    pub use_motion: bool,
    pub use_audio: bool,
    pub use_differential: bool,
    pub use_text: bool,
}

impl Default for ModalitySwitches {
    fn default() -> Self {
        ModalitySwitches::all()
    }
}

impl ModalitySwitches {
    pub fn all() -> Self {
        ModalitySwitches {
            use_motion: true,
            use_audio: true,
            use_differential: true,
            use_text: true,
        }
    }

    pub fn none() -> Self {
        ModalitySwitches {
            use_motion: false,
            use_audio: false,
            use_differential: false,
            use_text: false,
        }
    }

    pub fn label(&self) -> String {
        match (self.use_motion && self.use_audio, self.use_differential, self.use_text) {
            (true, true, true) => "full".into(),
            (true, false, true) => "w/o Diff".into(),
            (true, true, false) => "w/o Text".into(),
            (true, false, false) => "w/o Diff & Text".into(),
            _ if *self == ModalitySwitches::none() => "unconditional".into(),
            _ => format!(
                "motion={} audio={} diff={} text={}",
                self.use_motion, self.use_audio, self.use_differential, self.use_text
            ),
        }
    }
}

/// Speaker inputs aligned to a common length `T` (already normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerFeatures {
    pub motion: Mat,
    pub audio: Mat,
    pub delta: Mat,
    pub text: Vec<f64>,
}

impl SpeakerFeatures {
    pub fn len(&self) -> usize {
        self.motion.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.rows() == 0
    }

    fn masked(&self, s: ModalitySwitches) -> SpeakerFeatures {
        let keep = |on: bool, m: &Mat| if on { m.clone() } else { Mat::zeros(m.rows(), m.cols()) };
        SpeakerFeatures {
            motion: keep(s.use_motion, &self.motion),
            audio: keep(s.use_audio, &self.audio),
            delta: keep(s.use_differential, &self.delta),
            text: if s.use_text {
                self.text.clone()
            } else {
                vec![0.0; self.text.len()]
            },
        }
    }
}

/// `M×d_cond` speaker representation consumed by the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCondition {
    pub vectors: Mat,
}

/// Two cross-modal attention streams (audio attending to motion, motion
/// differentials attending to audio), each with a residual from its query
/// source, pooled to `T/stride` positions, joined with the text vector and
/// mapped to `d_cond` by an MLP.
#[derive(Debug, Clone)]
pub struct FusionNetwork {
    pub config: FusionConfig,
    pub motion_dim: usize,
    pub audio_dim: usize,
    proj_motion: Linear,
    proj_audio: Linear,
    proj_delta: Linear,
    audio_to_motion: Attention,
    delta_to_audio: Attention,
    mlp: Mlp,
}

impl FusionNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: FusionConfig,
        motion_dim: usize,
        audio_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        Ok(FusionNetwork {
            config,
            motion_dim,
            audio_dim,
            proj_motion: Linear::new(store, "fuse.proj_motion", motion_dim, w, true, rng),
            proj_audio: Linear::new(store, "fuse.proj_audio", audio_dim, w, true, rng),
            proj_delta: Linear::new(store, "fuse.proj_delta", motion_dim, w, true, rng),
            audio_to_motion: Attention::new(store, "fuse.attn_af", w, w, w, config.heads, rng),
            delta_to_audio: Attention::new(store, "fuse.attn_da", w, w, w, config.heads, rng),
            mlp: Mlp::new(
                store,
                "fuse.mlp",
                2 * w + config.text_dim,
                config.mlp_hidden,
                config.cond_dim,
                rng,
            ),
        })
    }

    pub fn positions(&self, frames: usize) -> usize {
        frames / self.config.pool_stride
    }

    fn check(&self, f: &SpeakerFeatures) -> Result<()> {
        let t = f.motion.rows();
        if t == 0 {
            return Err(Error::invalid("speaker features are empty"));
        }
        if f.motion.cols() != self.motion_dim || f.delta.cols() != self.motion_dim {
            return Err(Error::invalid(format!(
                "speaker motion width {} / delta width {} do not match d_f = {}",
                f.motion.cols(),
                f.delta.cols(),
                self.motion_dim
            )));
        }
        if f.audio.cols() != self.audio_dim {
            return Err(Error::invalid(format!(
                "audio width {} does not match {}",
                f.audio.cols(),
                self.audio_dim
            )));
        }
        if f.audio.rows() != t || f.delta.rows() != t {
            return Err(Error::invalid(format!(
                "modalities are not aligned: motion {t}, audio {}, delta {} frames",
                f.audio.rows(),
                f.delta.rows()
            )));
        }
        if f.text.len() != self.config.text_dim {
            return Err(Error::invalid(format!(
                "text embedding has {} dims, expected {}",
                f.text.len(),
                self.config.text_dim
            )));
        }
        if t % self.config.pool_stride != 0 {
            return Err(Error::invalid(format!(
                "T = {t} is not divisible by the pooling stride {}",
                self.config.pool_stride
            )));
        }
        Ok(())
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        features: &SpeakerFeatures,
        switches: ModalitySwitches,
    ) -> Result<Var> {
        self.check(features)?;
        let f = features.masked(switches);
        let t = f.motion.rows();
        let pe = g.constant(sinusoidal_table(t, self.config.width));

        let a_in = g.constant(f.audio);
        let a = self.proj_audio.forward(g, a_in);
        let a = g.add(a, pe);
        let m_in = g.constant(f.motion);
        let m = self.proj_motion.forward(g, m_in);
        let m = g.add(m, pe);
        let d_in = g.constant(f.delta);
        let d = self.proj_delta.forward(g, d_in);
        let d = g.add(d, pe);

        let s1 = self.audio_to_motion.forward(g, a, m);
        let s1 = g.add(a, s1);
        let s2 = self.delta_to_audio.forward(g, d, a);
        let s2 = g.add(d, s2);

        let joined = g.concat_cols(&[s1, s2]);
        let pooled = g.avg_pool_rows(joined, self.config.pool_stride);
        let text = g.constant(Mat::row_vector(&f.text));
        let text = g.broadcast_rows(text, t / self.config.pool_stride);
        let all = g.concat_cols(&[pooled, text]);
        Ok(self.mlp.forward(g, all))
    }

    pub fn fuse(
        &self,
        store: &ParamStore,
        features: &SpeakerFeatures,
        switches: ModalitySwitches,
    ) -> Result<FusedCondition> {
        let mut g = Graph::new(store);
        let out = self.forward_graph(&mut g, features, switches)?;
        let vectors = g.value(out).clone();
        if !vectors.is_finite() {
            return Err(Error::Model("fused condition is not finite".into()));
        }
        Ok(FusedCondition { vectors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, FusionNetwork, SpeakerFeatures) {
        let mut store = ParamStore::new();
        let config = FusionConfig {
            width: 8,
            heads: 2,
            cond_dim: 6,
            mlp_hidden: 10,
            text_dim: 5,
            pool_stride: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = FusionNetwork::new(&mut store, config, 4, 3, &mut rng).unwrap();
        let motion = Mat::randn(16, 4, 1.0, &mut rng);
        let features = SpeakerFeatures {
            delta: crate::motion::differential_of(&motion),
            motion,
            audio: Mat::randn(16, 3, 1.0, &mut rng),
            text: Mat::randn(1, 5, 1.0, &mut rng).into_vec(),
        };
        (store, net, features)
    }

    #[test]
    fn output_shape_is_positions_by_cond_dim() {
        let (store, net, f) = setup();
        let out = net.fuse(&store, &f, ModalitySwitches::all()).unwrap();
        assert_eq!(out.vectors.shape(), (4, 6));
        let again = net.fuse(&store, &f, ModalitySwitches::all()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn differentials_and_text_both_matter() {
        let (store, net, f) = setup();
        let full = net.fuse(&store, &f, ModalitySwitches::all()).unwrap();
        let no_diff = ModalitySwitches {
            use_differential: false,
            ..ModalitySwitches::all()
        };
        assert!(full.vectors.max_abs_diff(&net.fuse(&store, &f, no_diff).unwrap().vectors) > 1e-9);
        let mut other_text = f.clone();
        other_text.text[0] += 1.0;
        let changed = net.fuse(&store, &other_text, ModalitySwitches::all()).unwrap();
        assert!(full.vectors.max_abs_diff(&changed.vectors) > 1e-9);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let (store, net, mut f) = setup();
        f.audio = Mat::zeros(15, 3);
        assert!(matches!(
            net.fuse(&store, &f, ModalitySwitches::all()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn switch_labels() {
        assert_eq!(ModalitySwitches::all().label(), "full");
        assert_eq!(ModalitySwitches::none().label(), "unconditional");
        let both = ModalitySwitches {
            use_differential: false,
            use_text: false,
            ..ModalitySwitches::all()
        };
        assert_eq!(both.label(), "w/o Diff & Text");
    }
}
