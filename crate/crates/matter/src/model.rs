//! Model assembly: the patch encoder plus the cluster bank, with one switch
//! deciding whether the contrastive representation is the normalized
//! cumulative residual or the raw descriptor (the residual-encoder ablation).

use crate::backbone::{encode_patch, init_backbone, BackboneConfig, BackboneParams};
use crate::error::Result;
use crate::num::Tensor;
use crate::resenc::{cumulative_residual, init_bank, word_assign, ClusterBank};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub clusters: usize,
    /// When false the contrastive space is the raw descriptor z and the
    /// bank is left untouched by training.
    pub residual_encoder: bool,
}

impl ModelConfig {
    pub fn for_bands(bands: usize) -> Self {
        Self {
            backbone: BackboneConfig::for_bands(bands),
            clusters: 64,
            residual_encoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.clusters == 0 {
            return Err(crate::Error::data("cluster count must be positive"));
        }
        Ok(())
    }
}

/// One patch, fully described.
#[derive(Clone, Debug)]
pub struct PatchDescriptor {
    /// Unit-norm backbone descriptor.
    pub z: Tensor<f32>,
    /// The contrastive representation: normalized cumulative residual, or z
    /// itself when the residual encoder is disabled.
    pub f: Tensor<f32>,
    /// Visual word index into the cluster bank.
    pub word: usize,
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: BackboneParams<f32>,
    pub bank: ClusterBank<f32>,
}

impl Model {
    /// Fresh model; backbone and bank draw from independent substreams of
    /// the same root seed.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_backbone(&cfg.backbone, seed)?;
        let bank = init_bank(cfg.clusters, cfg.backbone.descriptor_dim, seed)?;
        Ok(Self { cfg, params, bank })
    }

    pub fn from_parts(cfg: ModelConfig, params: BackboneParams<f32>, bank: ClusterBank<f32>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params, bank })
    }

    pub fn descriptor(&self, patch: &Tensor<f32>) -> Result<PatchDescriptor> {
        let z = encode_patch(&self.params, &self.cfg.backbone, patch)?;
        if self.cfg.residual_encoder {
            let desc = cumulative_residual(&z, &self.bank)?;
            Ok(PatchDescriptor { z, f: desc.f, word: desc.word, degenerate: desc.degenerate })
        } else {
            let word = word_assign(&z, &self.bank)?;
            Ok(PatchDescriptor { f: z.clone(), z, word, degenerate: false })
        }
    }

    /// Just the contrastive-space vector of one patch.
    pub fn representation(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.descriptor(patch)?.f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tern::TernConfig;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                bands: 2,
                stem_channels: 4,
                block_channels: vec![4, 6],
                descriptor_dim: 8,
                tern: TernConfig {
                    blocks: 1,
                    layers_per_block: 2,
                    dilations: vec![1, 2],
                    ..TernConfig::default()
                },
            },
            clusters: 5,
            residual_encoder: true,
        }
    }

    fn random_patch(name: &str) -> Tensor<f32> {
        let mut rng = substream(83, name);
        Tensor::new(vec![2, 7, 7], (0..98).map(|_| rng.gen_range(0.05f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::init(small_cfg(), 3).unwrap();
        let b = Model::init(small_cfg(), 3).unwrap();
        let c = Model::init(small_cfg(), 4).unwrap();
        assert_eq!(a.params.stem.data(), b.params.stem.data());
        assert_eq!(a.bank.centers.data(), b.bank.centers.data());
        assert_ne!(a.params.stem.data(), c.params.stem.data());
        assert_ne!(a.bank.centers.data(), c.bank.centers.data());
    }

    #[test]
    fn descriptor_exposes_unit_representation_and_word() {
        let model = Model::init(small_cfg(), 7).unwrap();
        let desc = model.descriptor(&random_patch("desc")).unwrap();
        assert!(desc.word < 5);
        if !desc.degenerate {
            let norm: f32 = desc.f.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
        let znorm: f32 = desc.z.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((znorm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn disabled_residual_encoder_passes_z_through() {
        let mut cfg = small_cfg();
        cfg.residual_encoder = false;
        let model = Model::init(cfg, 7).unwrap();
        let desc = model.descriptor(&random_patch("ablate")).unwrap();
        assert_eq!(desc.f.data(), desc.z.data());
        assert!(!desc.degenerate);
    }

    #[test]
    fn zero_clusters_rejected() {
        let mut cfg = small_cfg();
        cfg.clusters = 0;
        assert!(Model::init(cfg, 1).is_err());
    }
}
