//! Unsupervised change detection: every pixel is represented by the
//! descriptor of the window centered on it, change strength is the Euclidean
//! distance between the two dates' descriptors, and the binary mask comes
//! from Otsu thresholding of the score map.

use rayon::prelude::*;

use crate::data::patches::extract_window;
use crate::data::raster::MultiSpectralImage;
use crate::data::synth::ChangePair;
use crate::error::{Error, Result};
use crate::model::{Model, PatchDescriptor};
use crate::num::Tensor;
use crate::tasks::metrics::PrfReport;
use crate::tasks::otsu::{otsu_threshold, OTSU_BINS};

pub const DEFAULT_INFER_WINDOW: usize = 9;

/// Descriptor of the win x win window centered on every pixel, row-major.
pub(crate) fn dense_descriptors(
    img: &MultiSpectralImage,
    model: &Model,
    win: usize,
) -> Result<Vec<PatchDescriptor>> {
    let (h, w) = (img.height(), img.width());
    (0..h * w)
        .into_par_iter()
        .map(|i| {
            let window = extract_window(img, i / w, i % w, win)?;
            model.descriptor(&window)
        })
        .collect()
}

fn check_aligned(img1: &MultiSpectralImage, img2: &MultiSpectralImage) -> Result<()> {
    if img1.bands() != img2.bands()
        || img1.height() != img2.height()
        || img1.width() != img2.width()
    {
        return Err(Error::data(format!(
            "images disagree in shape: {}x{}x{} vs {}x{}x{}",
            img1.bands(),
            img1.height(),
            img1.width(),
            img2.bands(),
            img2.height(),
            img2.width()
        )));
    }
    Ok(())
}

/// Per-pixel descriptor distance between two aligned captures.
pub fn change_scores(
    img1: &MultiSpectralImage,
    img2: &MultiSpectralImage,
    model: &Model,
    win: usize,
) -> Result<Tensor<f32>> {
    check_aligned(img1, img2)?;
    let d1 = dense_descriptors(img1, model, win)?;
    let d2 = dense_descriptors(img2, model, win)?;
    let scores: Vec<f32> = d1
        .iter()
        .zip(&d2)
        .map(|(a, b)| {
            let sum: f64 = a
                .f
                .data()
                .iter()
                .zip(b.f.data())
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum();
            sum.sqrt() as f32
        })
        .collect();
    Tensor::new(vec![img1.height(), img1.width()], scores)
}

#[derive(Clone, Debug)]
pub struct ChangeMap {
    /// H x W descriptor distances.
    pub score: Tensor<f32>,
    /// Row-major change mask; true means changed.
    pub mask: Vec<bool>,
    pub threshold: f32,
    /// True when the score map had no spread and the mask was forced to
    /// all-unchanged.
    pub degenerate: bool,
}

impl ChangeMap {
    /// The mask as a single-band 0/1 raster for MSR1 export.
    pub fn mask_image(&self) -> Result<MultiSpectralImage> {
        let (h, w) = self.score.dims2()?;
        let data: Vec<f32> = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        MultiSpectralImage::new(1, h, w, data)
    }

    pub fn score_image(&self) -> Result<MultiSpectralImage> {
        let (h, w) = self.score.dims2()?;
        MultiSpectralImage::new(1, h, w, self.score.data().to_vec())
    }
}

/// Scores, thresholds, and masks a pair of aligned captures.
pub fn detect_change(
    img1: &MultiSpectralImage,
    img2: &MultiSpectralImage,
    model: &Model,
    win: usize,
) -> Result<ChangeMap> {
    let score = change_scores(img1, img2, model, win)?;
    let split = otsu_threshold(score.data(), OTSU_BINS)?;
    let mask = if split.degenerate {
        vec![false; score.len()]
    } else {
        score.data().iter().map(|&s| s > split.threshold).collect()
    };
    Ok(ChangeMap { score, mask, threshold: split.threshold, degenerate: split.degenerate })
}

/// Micro-aggregated precision/recall/F-1 of `detect_change` over a set of
/// generated change pairs: one confusion matrix across all pixels of all
/// pairs.
pub fn evaluate_pairs(model: &Model, pairs: &[ChangePair], win: usize) -> Result<PrfReport> {
    if pairs.is_empty() {
        return Err(Error::data("no change pairs to evaluate"));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_count = 0u64;
    for pair in pairs {
        let map = detect_change(&pair.before, &pair.after, model, win)?;
        for (&p, &t) in map.mask.iter().zip(&pair.ground_truth) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_count += 1,
                (false, false) => {}
            }
        }
    }
    Ok(PrfReport::from_counts(tp, fp, fn_count))
}
