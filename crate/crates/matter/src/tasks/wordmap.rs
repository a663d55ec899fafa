//! Visual word maps: the per-pixel cluster assignment of dense window
//! descriptors, the crate's texton-map analogue.

use crate::data::raster::MultiSpectralImage;
use crate::error::Result;
use crate::model::Model;
use crate::tasks::change::dense_descriptors;

#[derive(Clone, Debug)]
pub struct WordMap {
    /// Row-major cluster index per pixel, each < `clusters`.
    pub words: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub clusters: usize,
}

impl WordMap {
    /// The word indices as a single-band raster for MSR1 export.
    pub fn to_image(&self) -> Result<MultiSpectralImage> {
        let data: Vec<f32> = self.words.iter().map(|&w| w as f32).collect();
        MultiSpectralImage::new(1, self.height, self.width, data)
    }
}

pub fn word_map(img: &MultiSpectralImage, model: &Model, win: usize) -> Result<WordMap> {
    let descriptors = dense_descriptors(img, model, win)?;
    Ok(WordMap {
        words: descriptors.iter().map(|d| d.word).collect(),
        height: img.height(),
        width: img.width(),
        clusters: model.cfg.clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::rng::substream;
    use crate::tern::TernConfig;
    use rand::Rng;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
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
            clusters: 5,
            residual_encoder: true,
        };
        Model::init(cfg, 67).unwrap()
    }

    #[test]
    fn constant_image_maps_to_a_single_word() {
        let model = tiny_model();
        let img = MultiSpectralImage::new(2, 6, 6, vec![0.4; 2 * 36]).unwrap();
        let map = word_map(&img, &model, 5).unwrap();
        assert_eq!(map.words.len(), 36);
        assert!(map.words.iter().all(|&w| w == map.words[0]));
    }

    #[test]
    fn words_stay_in_vocabulary_range_and_repeat_exactly() {
        let model = tiny_model();
        let mut rng = substream(71, "wordmap");
        let data: Vec<f32> = (0..2 * 8 * 8).map(|_| rng.gen_range(0.05..1.0)).collect();
        let img = MultiSpectralImage::new(2, 8, 8, data).unwrap();
        let first = word_map(&img, &model, 5).unwrap();
        assert!(first.words.iter().all(|&w| w < first.clusters));
        let second = word_map(&img, &model, 5).unwrap();
        assert_eq!(first.words, second.words);
    }
}
