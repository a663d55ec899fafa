//! Receptive-field sweep: retrain at each training patch size, then score
//! change detection at each inference window size. Cells run sequentially
//! and reuse the same root seed, so the patch sizes are the only thing that
//! varies across the grid.

use crate::data::patches::LoadedCatalog;
use crate::data::synth::ChangePair;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tasks::change::evaluate_pairs;
use crate::train::{pretrain, TrainConfig, TrainState};

#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub train_sizes: Vec<usize>,
    pub infer_sizes: Vec<usize>,
    /// f1[i][j] is the F-1 percentage for train_sizes[i] at infer_sizes[j].
    pub f1: Vec<Vec<f64>>,
}

impl SweepGrid {
    /// Tab-separated grid with a header row of inference sizes and a header
    /// column of training sizes.
    pub fn text(&self) -> String {
        let mut out = String::from("train\\infer");
        for s in &self.infer_sizes {
            out.push_str(&format!("\t{s}"));
        }
        out.push('\n');
        for (i, t) in self.train_sizes.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in &self.f1[i] {
                out.push_str(&format!("\t{v:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn rf_sweep(
    catalog: &LoadedCatalog,
    pairs: &[ChangePair],
    train_sizes: &[usize],
    infer_sizes: &[usize],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
) -> Result<SweepGrid> {
    if train_sizes.is_empty() || infer_sizes.is_empty() {
        return Err(Error::data("sweep needs at least one train size and one inference size"));
    }
    for &s in train_sizes.iter().chain(infer_sizes) {
        if s % 2 == 0 || s == 0 {
            return Err(Error::data(format!("sweep sizes must be odd, got {s}")));
        }
    }

    let mut f1 = Vec::with_capacity(train_sizes.len());
    for &ts in train_sizes {
        let cfg = TrainConfig { train_patch: ts, ..base.clone() };
        let model = Model::init(model_cfg.clone(), cfg.seed)?;
        let mut state = TrainState::new(model, &cfg)?;
        pretrain(catalog, &mut state, &cfg, |_| Ok(()))?;

        let mut row = Vec::with_capacity(infer_sizes.len());
        for &is in infer_sizes {
            row.push(evaluate_pairs(&state.model, pairs, is)?.f1);
        }
        f1.push(row);
    }
    Ok(SweepGrid { train_sizes: train_sizes.to_vec(), infer_sizes: infer_sizes.to_vec(), f1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::catalog::CatalogEntry;
    use crate::data::raster::MultiSpectralImage;
    use crate::data::synth::ChangePair;
    use crate::rng::substream;
    use crate::tern::TernConfig;
    use rand::Rng;
    use std::path::PathBuf;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            backbone: crate::backbone::BackboneConfig {
                bands: 2,
                stem_channels: 3,
                block_channels: vec![3],
                descriptor_dim: 4,
                tern: TernConfig {
                    blocks: 1,
                    layers_per_block: 1,
                    dilations: vec![1],
                    ..TernConfig::default()
                },
            },
            clusters: 3,
            residual_encoder: true,
        }
    }

    fn tiny_catalog() -> LoadedCatalog {
        let mut entries = Vec::new();
        let mut images = Vec::new();
        let mut rng = substream(73, "sweepcat");
        for r in 0..2 {
            for t in 0..2 {
                entries.push(CatalogEntry {
                    region_id: format!("r{r:02}"),
                    timestamp: t,
                    cloud: 0.0,
                    coverage: 1.0,
                    path: PathBuf::from(format!("mem_{r}_{t}")),
                });
                let data = (0..2 * 12 * 12).map(|_| rng.gen_range(0.05..1.0)).collect();
                images.push(MultiSpectralImage::new(2, 12, 12, data).unwrap());
            }
        }
        LoadedCatalog::from_images(entries, images).unwrap()
    }

    fn tiny_pairs() -> Vec<ChangePair> {
        let mut rng = substream(79, "sweeppair");
        (0..2)
            .map(|_| {
                let before: Vec<f32> =
                    (0..2 * 12 * 12).map(|_| rng.gen_range(0.05..1.0)).collect();
                let mut after = before.clone();
                let mut ground_truth = vec![false; 12 * 12];
                for y in 0..6 {
                    for x in 0..6 {
                        for b in 0..2 {
                            after[b * 144 + y * 12 + x] = rng.gen_range(0.05..1.0);
                        }
                        ground_truth[y * 12 + x] = true;
                    }
                }
                ChangePair {
                    before: MultiSpectralImage::new(2, 12, 12, before).unwrap(),
                    after: MultiSpectralImage::new(2, 12, 12, after).unwrap(),
                    ground_truth,
                }
            })
            .collect()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_size: 4,
            seed: 5,
            checkpoint_every: 100,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn grid_has_one_cell_per_size_combination() {
        let grid = rf_sweep(
            &tiny_catalog(),
            &tiny_pairs(),
            &[5, 7],
            &[5, 7, 9],
            &tiny_model_cfg(),
            &tiny_train_cfg(),
        )
        .unwrap();
        assert_eq!(grid.f1.len(), 2);
        assert!(grid.f1.iter().all(|row| row.len() == 3));
        let text = grid.text();
        assert!(text.starts_with("train\\infer\t5\t7\t9\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn single_cell_reproduces_the_standalone_pipeline() {
        let catalog = tiny_catalog();
        let pairs = tiny_pairs();
        let model_cfg = tiny_model_cfg();
        let train_cfg = tiny_train_cfg();

        let grid = rf_sweep(&catalog, &pairs, &[5], &[7], &model_cfg, &train_cfg).unwrap();

        let cfg = TrainConfig { train_patch: 5, ..train_cfg };
        let model = Model::init(model_cfg, cfg.seed).unwrap();
        let mut state = TrainState::new(model, &cfg).unwrap();
        pretrain(&catalog, &mut state, &cfg, |_| Ok(())).unwrap();
        let standalone = evaluate_pairs(&state.model, &pairs, 7).unwrap();

        assert_eq!(grid.f1[0][0].to_bits(), standalone.f1.to_bits());
    }

    #[test]
    fn even_sizes_are_rejected() {
        let err = rf_sweep(
            &tiny_catalog(),
            &tiny_pairs(),
            &[6],
            &[7],
            &tiny_model_cfg(),
            &tiny_train_cfg(),
        );
        assert!(err.is_err());
    }
}
