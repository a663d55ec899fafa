//! PNG renderings of score maps, change masks, and word maps. MSR1 rasters
//! are the exact-value exports; these are the human-viewable ones.

use std::path::Path;

use image::ExtendedColorType;
use rand::Rng;

use crate::error::{Error, Result};
use crate::num::Tensor;
use crate::rng;
use crate::tasks::WordMap;

fn png_error(path: &Path, e: image::ImageError) -> Error {
    Error::data(format!("cannot write {}: {e}", path.display()))
}

/// Grayscale heatmap, min-max normalized; a flat map renders black.
pub fn write_score_png(score: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = score.dims2()?;
    let min = score.data().iter().copied().fold(f32::INFINITY, f32::min);
    let max = score.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max - min;
    let bytes: Vec<u8> = score
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (((v - min) / span) * 255.0).round() as u8 } else { 0 })
        .collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| png_error(path, e))
}

/// Binary mask: changed pixels white, unchanged black.
pub fn write_mask_png(mask: &[bool], height: usize, width: usize, path: &Path) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::data(format!(
            "mask has {} pixels, dimensions say {}",
            mask.len(),
            height * width
        )));
    }
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| png_error(path, e))
}

/// Word map with one random color per cluster, drawn from the palette
/// substream of the given seed so recolorings are reproducible.
pub fn write_word_png(map: &WordMap, seed: u64, path: &Path) -> Result<()> {
    let mut rng = rng::palette(seed);
    let colors: Vec<[u8; 3]> = (0..map.clusters).map(|_| rng.gen()).collect();
    let mut bytes = Vec::with_capacity(map.words.len() * 3);
    for &w in &map.words {
        let c = colors.get(w).ok_or_else(|| {
            Error::data(format!("word {w} outside the {}-cluster vocabulary", map.clusters))
        })?;
        bytes.extend_from_slice(c);
    }
    image::save_buffer(path, &bytes, map.width as u32, map.height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| png_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_png_round_trips_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("score.png");
        let score = Tensor::new(vec![2, 2], vec![0.0f32, 0.5, 0.25, 1.0]).unwrap();
        write_score_png(&score, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (2, 2));
        assert_eq!(img.get_pixel(0, 0).0, [0]);
        assert_eq!(img.get_pixel(1, 1).0, [255]);
        assert_eq!(img.get_pixel(1, 0).0, [128]);
    }

    #[test]
    fn flat_score_map_renders_black() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.png");
        let score = Tensor::new(vec![2, 2], vec![0.7f32; 4]).unwrap();
        write_score_png(&score, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0 == [0]));
    }

    #[test]
    fn mask_png_is_black_and_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        write_mask_png(&[true, false, false, true], 2, 2, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.get_pixel(0, 0).0, [255]);
        assert_eq!(img.get_pixel(1, 0).0, [0]);
    }

    #[test]
    fn word_png_palette_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let map = WordMap { words: vec![0, 1, 2, 1], height: 2, width: 2, clusters: 3 };
        let a = dir.path().join("wa.png");
        let b = dir.path().join("wb.png");
        write_word_png(&map, 5, &a).unwrap();
        write_word_png(&map, 5, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let c = dir.path().join("wc.png");
        write_word_png(&map, 6, &c).unwrap();
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

        let img = image::open(&a).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(1, 0), img.get_pixel(1, 1));
    }

    #[test]
    fn out_of_vocabulary_word_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let map = WordMap { words: vec![7], height: 1, width: 1, clusters: 3 };
        assert!(write_word_png(&map, 5, &dir.path().join("bad.png")).is_err());
    }
}
