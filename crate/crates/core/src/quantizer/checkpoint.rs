use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::VqVae;
use super::{Codebook, VqConfig};
use crate::container::{config_hash, TensorFile};
use crate::error::{Error, Result};
use crate::motion::NormStats;
use crate::tensor::Mat;

pub const VQVAE_KIND: &str = "vqvae";

impl VqVae {
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tensors: Vec<(String, Mat)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.values().iter().cloned())
            .collect();
        tensors.push(("codebook".into(), self.codebook.codes().clone()));
        tensors.push(("ema.counts".into(), Mat::row_vector(&self.ema.counts)));
        tensors.push(("ema.sums".into(), self.ema.sums.clone()));
        tensors.push(("usage".into(), Mat::row_vector(&self.usage)));
        TensorFile {
            kind: VQVAE_KIND.into(),
            meta: serde_json::json!({
                "config": self.config,
                "config_hash": config_hash(&self.config),
                "norm": self.norm,
                "epochs_trained": self.epochs_trained,
            }),
            tensors,
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        if file.kind != VQVAE_KIND {
            return Err(Error::format(
                16,
                format!("expected a `{VQVAE_KIND}` checkpoint, found `{}`", file.kind),
            ));
        }
        let config: VqConfig = serde_json::from_value(file.meta["config"].clone())
            .map_err(|e| Error::format(16, format!("bad quantizer config: {e}")))?;
        let norm: NormStats = serde_json::from_value(file.meta["norm"].clone())
            .map_err(|e| Error::format(16, format!("bad normalization stats: {e}")))?;
        let mut model = VqVae::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        for id in 0..model.params.len() {
            let name = model.params.name(id).to_string();
            let t = file.tensor(&name)?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Mismatch {
                    field: name,
                    reason: format!(
                        "stored shape {:?}, config implies {:?}",
                        t.shape(),
                        model.params.get(id).shape()
                    ),
                });
            }
            *model.params.get_mut(id) = t.clone();
        }
        model.codebook = Codebook::new(file.tensor("codebook")?.clone())?;
        if model.codebook.size() != model.config.codebook_size
            || model.codebook.dim() != model.config.code_dim
        {
            return Err(Error::Mismatch {
                field: "codebook".into(),
                reason: "codebook shape disagrees with config".into(),
            });
        }
        model.ema.counts = file.tensor("ema.counts")?.data().to_vec();
        model.ema.sums = file.tensor("ema.sums")?.clone();
        model.usage = file.tensor("usage")?.data().to_vec();
        if norm.width() != model.config.motion_dim {
            return Err(Error::Mismatch {
                field: "norm".into(),
                reason: "normalization width disagrees with d_f".into(),
            });
        }
        model.norm = norm;
        model.epochs_trained = file.meta["epochs_trained"].as_u64().unwrap_or(0) as usize;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        VqVae::from_tensor_file(&TensorFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_rewrite_is_byte_identical() {
        let config = VqConfig {
            codebook_size: 4,
            code_dim: 3,
            hidden: 4,
            motion_dim: 5,
            ..VqConfig::default()
        };
        let model = VqVae::new(config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let bytes = model.to_tensor_file().to_bytes();
        let loaded = VqVae::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(loaded.to_tensor_file().to_bytes(), bytes);
        assert_eq!(loaded.config, model.config);
        // freshly initialized: nothing assigned yet
        assert!(loaded.usage.iter().all(|&u| u == 0.0));
    }
}
