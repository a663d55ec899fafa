//! Seeded synthetic corpus: regions are fixed mosaics of texture classes,
//! timesteps of one region differ only by a global illumination gain and
//! additive sensor noise. Ground truth (per-pixel class labels, change masks
//! for swapped-texture pairs) comes straight from the generator, so
//! downstream metrics have an exact oracle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::catalog::{read_manifest, write_manifest, CatalogEntry};
use crate::data::raster::{write_msr1, MultiSpectralImage};
use crate::error::{Error, Result};
use crate::num::reflect_index;
use crate::rng::substream_indexed;

/// Multiplicative contrast of the checkerboard and sinusoid patterns.
const WAVE_CONTRAST: f32 = 0.45;
/// Contrast of the static band-correlated noise texture.
const NOISE_TEXTURE_CONTRAST: f32 = 0.40;
/// Patterns never drop below this factor, keeping pixel values positive.
const PATTERN_FLOOR: f32 = 0.05;
/// First synthetic timestamp, one day between captures.
const EPOCH: i64 = 1_700_000_000;
const DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub regions: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub texture_classes: usize,
    pub gain_low: f32,
    pub gain_high: f32,
    pub noise_sigma: f32,
    /// Swapped-texture evaluation pairs emitted per region.
    pub pairs_per_region: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            regions: 4,
            timesteps: 8,
            height: 64,
            width: 64,
            bands: 4,
            texture_classes: 3,
            gain_low: 0.7,
            gain_high: 1.3,
            noise_sigma: 0.02,
            pairs_per_region: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.regions < 2 {
            return Err(Error::data("synthesis needs at least 2 regions"));
        }
        if self.timesteps < 2 {
            return Err(Error::data("synthesis needs at least 2 timesteps per region"));
        }
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::data("synthetic image dimensions must be positive"));
        }
        if self.texture_classes < 2 {
            return Err(Error::data("synthesis needs at least 2 texture classes"));
        }
        if !(self.gain_low > 0.0 && self.gain_high >= self.gain_low && self.gain_high.is_finite()) {
            return Err(Error::data(format!(
                "gain range must satisfy 0 < low <= high, got [{}, {}]",
                self.gain_low, self.gain_high
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::data("noise sigma must be finite and >= 0"));
        }
        if self.pairs_per_region == 0 {
            return Err(Error::data("pairs_per_region must be >= 1"));
        }
        Ok(())
    }
}

/// Spectral signature of a texture class. Classes 0 and 1 are nearly
/// metameric (signature cosine ~0.99) so telling them apart takes texture,
/// not mean color; class 2 and beyond are spectrally distinct.
pub fn band_signature(class: usize, band: usize) -> f32 {
    let hue = match class {
        0 => 0.0f32,
        1 => 0.35,
        2 => 2.4,
        k => 0.9 * k as f32,
    };
    0.55 + 0.35 * (hue + 1.9 * band as f32 + 0.6).sin()
}

pub fn region_name(region: usize) -> String {
    format!("r{region:02}")
}

/// Static per-region structure: the class mosaic and one spatial pattern per
/// class. Both are frozen across timesteps; captures differ only by gain and
/// additive noise.
#[derive(Clone)]
pub struct RegionLayout {
    pub classmap: Vec<u8>,
    patterns: Vec<Vec<f32>>,
    height: usize,
    width: usize,
}

impl RegionLayout {
    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.classmap[y * self.width + x]
    }
}

fn checker_pattern(h: usize, w: usize, cell: usize, oy: usize, ox: usize) -> Vec<f32> {
    let mut p = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let parity = ((y + oy) / cell + (x + ox) / cell) % 2;
            p.push(if parity == 0 { 1.0 + WAVE_CONTRAST } else { 1.0 - WAVE_CONTRAST });
        }
    }
    p
}

fn sine_pattern(h: usize, w: usize, fx: f32, fy: f32, phase: f32) -> Vec<f32> {
    let tau = std::f32::consts::TAU;
    let mut p = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = 1.0 + WAVE_CONTRAST * (tau * (fx * x as f32 + fy * y as f32) + phase).sin();
            p.push(v.max(PATTERN_FLOOR));
        }
    }
    p
}

/// Band-correlated noise texture: one static unit-variance noise field,
/// 3x3 box smoothed, shared by every band of the class.
fn noise_pattern(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f32> {
    let raw: Vec<f32> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut smooth = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let sy = reflect_index(y as isize + dy, h);
                    let sx = reflect_index(x as isize + dx, w);
                    acc += raw[sy * w + sx];
                }
            }
            smooth[y * w + x] = acc / 9.0;
        }
    }
    let mean = smooth.iter().sum::<f32>() / smooth.len() as f32;
    let var = smooth.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / smooth.len() as f32;
    let std = var.sqrt().max(1e-6);
    smooth
        .iter()
        .map(|v| (1.0 + NOISE_TEXTURE_CONTRAST * (v - mean) / std).max(PATTERN_FLOOR))
        .collect()
}

fn build_patterns(
    classes: usize,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<f32>> {
    let mut patterns = Vec::with_capacity(classes);
    for k in 0..classes {
        let generation = (k / 3) as f32;
        let pattern = match k % 3 {
            0 => {
                let cell = 3 + k / 3;
                let oy = rng.gen_range(0..2 * cell);
                let ox = rng.gen_range(0..2 * cell);
                checker_pattern(h, w, cell, oy, ox)
            }
            1 => {
                let phase = rng.gen_range(0.0..std::f32::consts::TAU);
                let scale = 1.0 + 0.5 * generation;
                sine_pattern(h, w, 0.17 / scale, 0.11 / scale, phase)
            }
            _ => noise_pattern(h, w, rng),
        };
        patterns.push(pattern);
    }
    patterns
}

/// Mosaic grid: smallest square grid with at least `classes` cells (at least
/// 2x2), every class present, extras drawn at random.
fn build_classmap(
    classes: usize,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Vec<u8> {
    let mut grid = 2usize;
    while grid * grid < classes {
        grid += 1;
    }
    let cells = grid * grid;
    let mut assignment: Vec<u8> = (0..classes as u8).collect();
    while assignment.len() < cells {
        assignment.push(rng.gen_range(0..classes) as u8);
    }
    assignment.shuffle(rng);

    let mut map = vec![0u8; h * w];
    for y in 0..h {
        let gy = (y * grid / h).min(grid - 1);
        for x in 0..w {
            let gx = (x * grid / w).min(grid - 1);
            map[y * w + x] = assignment[gy * grid + gx];
        }
    }
    map
}

pub fn region_layout(spec: &SynthSpec, seed: u64, region: usize) -> RegionLayout {
    let mut rng = substream_indexed(seed, "synth.layout", region as u64);
    let classmap = build_classmap(spec.texture_classes, spec.height, spec.width, &mut rng);
    let patterns = build_patterns(spec.texture_classes, spec.height, spec.width, &mut rng);
    RegionLayout { classmap, patterns, height: spec.height, width: spec.width }
}

/// Renders one capture: pixel = gain * signature(class, band) * pattern +
/// additive Gaussian noise, clamped non-negative.
pub fn render(
    spec: &SynthSpec,
    layout: &RegionLayout,
    gain: f32,
    rng: &mut impl Rng,
) -> MultiSpectralImage {
    let (h, w) = (layout.height, layout.width);
    let mut data = Vec::with_capacity(spec.bands * h * w);
    for b in 0..spec.bands {
        for i in 0..h * w {
            let class = layout.classmap[i] as usize;
            let base = gain * band_signature(class, b) * layout.patterns[class][i];
            let noise: f32 = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng)
            } else {
                0.0
            };
            data.push((base + noise).max(0.0));
        }
    }
    MultiSpectralImage::new(spec.bands, h, w, data).expect("generated values are finite and non-negative")
}

fn draw_gain(spec: &SynthSpec, rng: &mut impl Rng) -> f32 {
    if spec.gain_high > spec.gain_low {
        rng.gen_range(spec.gain_low..spec.gain_high)
    } else {
        spec.gain_low
    }
}

/// A swapped-texture change case: same layout except one mosaic cell's class,
/// rendered at two independent gains with fresh noise.
pub struct ChangePair {
    pub before: MultiSpectralImage,
    pub after: MultiSpectralImage,
    pub ground_truth: Vec<bool>,
}

pub fn change_pair(spec: &SynthSpec, seed: u64, region: usize, pair: u64) -> ChangePair {
    let layout = region_layout(spec, seed, region);
    let mut rng = substream_indexed(seed, "synth.pair", ((region as u64) << 32) | pair);

    // Cell bounds recompute the same grid geometry the layout was built with.
    let mut grid = 2usize;
    while grid * grid < spec.texture_classes {
        grid += 1;
    }
    let gy = rng.gen_range(0..grid);
    let gx = rng.gen_range(0..grid);
    let y0 = (gy * spec.height).div_ceil(grid);
    let y1 = ((gy + 1) * spec.height).div_ceil(grid).min(spec.height);
    let x0 = (gx * spec.width).div_ceil(grid);
    let x1 = ((gx + 1) * spec.width).div_ceil(grid).min(spec.width);

    let old_class = layout.class_at(y0, x0);
    let mut new_class = rng.gen_range(0..spec.texture_classes) as u8;
    while new_class == old_class {
        new_class = rng.gen_range(0..spec.texture_classes) as u8;
    }

    let mut swapped = layout.clone();
    let mut ground_truth = vec![false; spec.height * spec.width];
    for y in y0..y1 {
        for x in x0..x1 {
            if swapped.classmap[y * spec.width + x] == old_class {
                swapped.classmap[y * spec.width + x] = new_class;
                ground_truth[y * spec.width + x] = true;
            }
        }
    }

    let gain_a = draw_gain(spec, &mut rng);
    let gain_b = draw_gain(spec, &mut rng);
    let before = render(spec, &layout, gain_a, &mut rng);
    let after = render(spec, &swapped, gain_b, &mut rng);
    ChangePair { before, after, ground_truth }
}

#[derive(Debug)]
pub struct SynthPairFiles {
    pub region: String,
    pub before: PathBuf,
    pub after: PathBuf,
    pub ground_truth: PathBuf,
}

#[derive(Debug)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub entries: Vec<CatalogEntry>,
    pub label_maps: Vec<PathBuf>,
    pub pairs: Vec<SynthPairFiles>,
}

/// Writes the corpus: per-region captures plus a catalog manifest, per-region
/// class label maps, and swapped-texture evaluation pairs with ground truth.
/// Byte-identical for identical (spec, seed).
pub fn synth_generate(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let pair_dir = out_dir.join("pairs");
    fs::create_dir_all(&pair_dir)?;

    let mut rel_entries = Vec::new();
    let mut label_maps = Vec::new();
    for r in 0..spec.regions {
        let layout = region_layout(spec, seed, r);
        for t in 0..spec.timesteps {
            let mut rng = substream_indexed(seed, "synth.step", ((r as u64) << 32) | t as u64);
            let gain = draw_gain(spec, &mut rng);
            let img = render(spec, &layout, gain, &mut rng);
            let name = format!("{}_t{t:02}.msr1", region_name(r));
            write_msr1(&out_dir.join(&name), &img)?;
            rel_entries.push(CatalogEntry {
                region_id: region_name(r),
                timestamp: EPOCH + t as i64 * DAY,
                cloud: 0.0,
                coverage: 1.0,
                path: PathBuf::from(name),
            });
        }
        let labels: Vec<f32> = layout.classmap.iter().map(|&c| c as f32).collect();
        let label_img = MultiSpectralImage::new(1, spec.height, spec.width, labels)?;
        let label_path = out_dir.join(format!("labels_{}.msr1", region_name(r)));
        write_msr1(&label_path, &label_img)?;
        label_maps.push(label_path);
    }

    let mut pairs = Vec::new();
    for r in 0..spec.regions {
        for j in 0..spec.pairs_per_region {
            let case = change_pair(spec, seed, r, j as u64);
            let stem = format!("pair_{}_{j}", region_name(r));
            let before = pair_dir.join(format!("{stem}_a.msr1"));
            let after = pair_dir.join(format!("{stem}_b.msr1"));
            let gt_path = pair_dir.join(format!("{stem}_gt.msr1"));
            write_msr1(&before, &case.before)?;
            write_msr1(&after, &case.after)?;
            let gt: Vec<f32> = case.ground_truth.iter().map(|&c| c as u8 as f32).collect();
            write_msr1(
                &gt_path,
                &MultiSpectralImage::new(1, spec.height, spec.width, gt)?,
            )?;
            pairs.push(SynthPairFiles {
                region: region_name(r),
                before,
                after,
                ground_truth: gt_path,
            });
        }
    }

    let manifest = out_dir.join("catalog.tsv");
    write_manifest(&manifest, &rel_entries)?;
    // Re-read so returned entries carry resolved paths, same as any consumer.
    let entries = read_manifest(&manifest)?;
    Ok(SynthOutput { manifest, entries, label_maps, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        SynthSpec::default().validate().unwrap();
    }

    #[test]
    fn layout_contains_every_class() {
        let spec = SynthSpec::default();
        for region in 0..spec.regions {
            let layout = region_layout(&spec, 11, region);
            for class in 0..spec.texture_classes as u8 {
                assert!(
                    layout.classmap.contains(&class),
                    "region {region} lacks class {class}"
                );
            }
        }
    }

    #[test]
    fn timesteps_share_layout_and_differ_by_gain_and_noise() {
        let spec = SynthSpec { noise_sigma: 0.0, ..SynthSpec::default() };
        let layout = region_layout(&spec, 5, 0);
        let a = render(&spec, &layout, 1.0, &mut substream_indexed(5, "t", 0));
        let b = render(&spec, &layout, 1.25, &mut substream_indexed(5, "t", 1));
        // Noise-free captures at different gains are exact scalar multiples.
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - 1.25 * x).abs() < 1e-5);
        }
    }

    #[test]
    fn change_pair_ground_truth_marks_exactly_the_swapped_cell() {
        let spec = SynthSpec::default();
        let case = change_pair(&spec, 7, 1, 0);
        let changed: usize = case.ground_truth.iter().filter(|&&c| c).count();
        assert!(changed > 0, "a pair must change something");
        assert!(changed <= spec.height * spec.width / 2, "swap is one cell, not the image");
        assert_eq!(case.before.bands(), spec.bands);
        assert_eq!(case.after.height(), spec.height);
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let spec = SynthSpec {
            regions: 2,
            timesteps: 2,
            height: 16,
            width: 16,
            pairs_per_region: 1,
            ..SynthSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let o1 = synth_generate(&spec, 99, d1.path()).unwrap();
        let o2 = synth_generate(&spec, 99, d2.path()).unwrap();
        assert_eq!(o1.entries.len(), o2.entries.len());
        for (a, b) in o1.entries.iter().zip(&o2.entries) {
            let ba = std::fs::read(&a.path).unwrap();
            let bb = std::fs::read(&b.path).unwrap();
            assert_eq!(ba, bb, "capture {} differs between runs", a.path.display());
        }
        for (a, b) in o1.pairs.iter().zip(&o2.pairs) {
            assert_eq!(std::fs::read(&a.before).unwrap(), std::fs::read(&b.before).unwrap());
            assert_eq!(std::fs::read(&a.after).unwrap(), std::fs::read(&b.after).unwrap());
            assert_eq!(
                std::fs::read(&a.ground_truth).unwrap(),
                std::fs::read(&b.ground_truth).unwrap()
            );
        }
    }

    #[test]
    fn different_seeds_differ() {
        let spec = SynthSpec { regions: 2, timesteps: 2, height: 16, width: 16, ..SynthSpec::default() };
        let a = render(&spec, &region_layout(&spec, 1, 0), 1.0, &mut substream_indexed(1, "t", 0));
        let b = render(&spec, &region_layout(&spec, 2, 0), 1.0, &mut substream_indexed(2, "t", 0));
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn near_metameric_signatures_for_classes_0_and_1() {
        let bands = 4;
        let dot = |a: usize, b: usize| -> f32 {
            (0..bands).map(|k| band_signature(a, k) * band_signature(b, k)).sum()
        };
        let cos01 = dot(0, 1) / (dot(0, 0).sqrt() * dot(1, 1).sqrt());
        let cos02 = dot(0, 2) / (dot(0, 0).sqrt() * dot(2, 2).sqrt());
        assert!(cos01 > 0.97, "classes 0/1 should be spectrally close, cos {cos01}");
        assert!(cos02 < 0.95, "class 2 should be spectrally distinct, cos {cos02}");
    }
}
