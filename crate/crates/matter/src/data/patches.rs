//! Patch extraction: non-overlapping tiles for training triplets and dense
//! reflect-padded windows for per-pixel inference.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::catalog::CatalogEntry;
use crate::data::raster::{read_msr1, MultiSpectralImage};
use crate::error::{Error, Result};
use crate::num::{reflect_index, Tensor};

/// Non-overlapping h x w tiles in row-major order; partial tiles at the
/// right/bottom borders are dropped.
pub fn tile_image(img: &MultiSpectralImage, h: usize, w: usize) -> Result<Vec<Tensor>> {
    if h == 0 || w == 0 {
        return Err(Error::data("tile size must be positive"));
    }
    let (b, ih, iw) = (img.bands(), img.height(), img.width());
    let ty = ih / h;
    let tx = iw / w;
    let mut tiles = Vec::with_capacity(ty * tx);
    for gy in 0..ty {
        for gx in 0..tx {
            let mut data = Vec::with_capacity(b * h * w);
            for band in 0..b {
                for y in 0..h {
                    let src = img.band(band);
                    let row = (gy * h + y) * iw + gx * w;
                    data.extend_from_slice(&src[row..row + w]);
                }
            }
            tiles.push(Tensor::new(vec![b, h, w], data)?);
        }
    }
    Ok(tiles)
}

/// Reflect-padded win x win window centered on (cy, cx); win must be odd.
pub fn extract_window(img: &MultiSpectralImage, cy: usize, cx: usize, win: usize) -> Result<Tensor> {
    if win % 2 == 0 || win == 0 {
        return Err(Error::data(format!("window size must be odd, got {win}")));
    }
    let (b, h, w) = (img.bands(), img.height(), img.width());
    if cy >= h || cx >= w {
        return Err(Error::data(format!(
            "window center ({cy},{cx}) outside {h}x{w} image"
        )));
    }
    let r = (win / 2) as isize;
    let mut data = Vec::with_capacity(b * win * win);
    for band in 0..b {
        let src = img.band(band);
        for dy in -r..=r {
            let y = reflect_index(cy as isize + dy, h);
            for dx in -r..=r {
                let x = reflect_index(cx as isize + dx, w);
                data.push(src[y * w + x]);
            }
        }
    }
    Tensor::new(vec![b, win, win], data)
}

/// One window per pixel in row-major order, paired with its center.
pub fn dense_windows<'a>(
    img: &'a MultiSpectralImage,
    win: usize,
) -> Result<impl Iterator<Item = ((usize, usize), Tensor)> + 'a> {
    if win % 2 == 0 || win == 0 {
        return Err(Error::data(format!("window size must be odd, got {win}")));
    }
    let (h, w) = (img.height(), img.width());
    Ok((0..h * w).map(move |i| {
        let (cy, cx) = (i / w, i % w);
        let window = extract_window(img, cy, cx, win).expect("center in range, odd window");
        ((cy, cx), window)
    }))
}

/// Anchor and positive are the same region at consecutive timestamps, tiled
/// into aligned patches; negatives come from a different region, shuffled so
/// patch k is not spatially aligned with anchor k in general.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub anchor: Vec<Tensor>,
    pub positive: Vec<Tensor>,
    pub negative: Vec<Tensor>,
    pub anchor_region: String,
    pub negative_region: String,
    pub anchor_timestamp: i64,
    pub positive_timestamp: i64,
}

impl Triplet {
    pub fn patch_count(&self) -> usize {
        self.anchor.len()
    }
}

/// A catalog with every raster loaded once, grouped by region and sorted by
/// timestamp within each region.
pub struct LoadedCatalog {
    entries: Vec<CatalogEntry>,
    images: Vec<MultiSpectralImage>,
    /// (region_id, indices into entries sorted by timestamp)
    regions: Vec<(String, Vec<usize>)>,
}

impl LoadedCatalog {
    pub fn load(entries: Vec<CatalogEntry>) -> Result<Self> {
        let mut images = Vec::with_capacity(entries.len());
        for e in &entries {
            images.push(read_msr1(&e.path)?);
        }
        Self::from_images(entries, images)
    }

    pub fn from_images(
        entries: Vec<CatalogEntry>,
        images: Vec<MultiSpectralImage>,
    ) -> Result<Self> {
        if entries.len() != images.len() {
            return Err(Error::data("catalog entries and images must pair up"));
        }
        let mut regions: Vec<(String, Vec<usize>)> = Vec::new();
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by(|&a, &b| {
            (&entries[a].region_id, entries[a].timestamp)
                .cmp(&(&entries[b].region_id, entries[b].timestamp))
        });
        for i in order {
            match regions.last_mut() {
                Some((id, idxs)) if *id == entries[i].region_id => idxs.push(i),
                _ => regions.push((entries[i].region_id.clone(), vec![i])),
            }
        }
        Ok(Self { entries, images, regions })
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn images(&self) -> &[MultiSpectralImage] {
        &self.images
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn bands(&self) -> Option<usize> {
        self.images.first().map(|i| i.bands())
    }
}

/// Draws one training triplet. The anchor is uniform over entries that have a
/// same-region temporal successor; the positive is that successor; the
/// negative is uniform over the other regions, then uniform within the chosen
/// region. All three are tiled at `patch` and the negative tiles shuffled.
pub fn sample_triplet(
    catalog: &LoadedCatalog,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<Triplet> {
    if catalog.regions.len() < 2 {
        return Err(Error::data(format!(
            "triplet sampling needs at least 2 regions, catalog has {}",
            catalog.regions.len()
        )));
    }
    // (anchor entry, positive entry) candidates: every entry with a successor.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (_, idxs) in &catalog.regions {
        for win in idxs.windows(2) {
            pairs.push((win[0], win[1]));
        }
    }
    if pairs.is_empty() {
        return Err(Error::data(
            "triplet sampling needs a region with two timestamps (a temporal successor)",
        ));
    }
    let (a_idx, p_idx) = pairs[rng.gen_range(0..pairs.len())];
    let anchor_region = catalog.entries[a_idx].region_id.clone();

    let other_regions: Vec<usize> = (0..catalog.regions.len())
        .filter(|&r| catalog.regions[r].0 != anchor_region)
        .collect();
    let neg_region = other_regions[rng.gen_range(0..other_regions.len())];
    let neg_idxs = &catalog.regions[neg_region].1;
    let n_idx = neg_idxs[rng.gen_range(0..neg_idxs.len())];

    let anchor = tile_image(&catalog.images[a_idx], patch, patch)?;
    let positive = tile_image(&catalog.images[p_idx], patch, patch)?;
    let mut negative = tile_image(&catalog.images[n_idx], patch, patch)?;
    if anchor.is_empty() {
        return Err(Error::data(format!(
            "anchor image smaller than the {patch}x{patch} patch"
        )));
    }
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::data(format!(
            "catalog images tile to different patch counts ({}, {}, {}); images must share extents",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    negative.shuffle(rng);

    Ok(Triplet {
        anchor,
        positive,
        negative,
        anchor_region,
        negative_region: catalog.regions[neg_region].0.clone(),
        anchor_timestamp: catalog.entries[a_idx].timestamp,
        positive_timestamp: catalog.entries[p_idx].timestamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn img(bands: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> MultiSpectralImage {
        let mut data = Vec::with_capacity(bands * h * w);
        for b in 0..bands {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(b, y, x));
                }
            }
        }
        MultiSpectralImage::new(bands, h, w, data).unwrap()
    }

    #[test]
    fn tiling_drops_partial_tiles_row_major() {
        let image = img(1, 5, 7, |_, y, x| (y * 7 + x) as f32);
        let tiles = tile_image(&image, 2, 3).unwrap();
        assert_eq!(tiles.len(), 2 * 2);
        // First tile holds rows 0..2, cols 0..3.
        assert_eq!(tiles[0].data(), &[0.0, 1.0, 2.0, 7.0, 8.0, 9.0]);
        // Second tile starts at col 3.
        assert_eq!(tiles[1].data(), &[3.0, 4.0, 5.0, 10.0, 11.0, 12.0]);
        // Third tile starts at row 2.
        assert_eq!(tiles[2].data(), &[14.0, 15.0, 16.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn tiling_an_exact_multiple_covers_every_pixel_once() {
        let image = img(2, 6, 6, |b, y, x| (b * 36 + y * 6 + x) as f32);
        let tiles = tile_image(&image, 3, 3).unwrap();
        assert_eq!(tiles.len(), 4);
        let total: f32 = tiles.iter().flat_map(|t| t.data()).sum();
        let expect: f32 = image.data().iter().sum();
        assert_eq!(total, expect);
    }

    #[test]
    fn image_smaller_than_tile_yields_no_tiles() {
        let image = img(1, 4, 4, |_, _, _| 1.0);
        assert!(tile_image(&image, 5, 5).unwrap().is_empty());
    }

    #[test]
    fn window_interior_is_a_plain_crop() {
        let image = img(1, 6, 6, |_, y, x| (y * 6 + x) as f32);
        let win = extract_window(&image, 2, 3, 3).unwrap();
        assert_eq!(win.shape(), &[1, 3, 3]);
        assert_eq!(win.data(), &[8.0, 9.0, 10.0, 14.0, 15.0, 16.0, 20.0, 21.0, 22.0]);
    }

    #[test]
    fn corner_window_matches_reflect_pad_oracle() {
        // Standalone oracle: materialize the reflect-padded image, then crop.
        let image = img(2, 4, 5, |b, y, x| (b * 100 + y * 10 + x) as f32);
        let win = 5;
        let r = win / 2;
        let (h, w) = (image.height(), image.width());
        let padded = |b: usize, y: isize, x: isize| -> f32 {
            image.pixel(b, reflect_index(y, h), reflect_index(x, w))
        };
        for &(cy, cx) in &[(0usize, 0usize), (0, 4), (3, 0), (3, 4), (1, 2)] {
            let got = extract_window(&image, cy, cx, win).unwrap();
            for b in 0..2 {
                for dy in 0..win {
                    for dx in 0..win {
                        let want = padded(
                            b,
                            cy as isize + dy as isize - r as isize,
                            cx as isize + dx as isize - r as isize,
                        );
                        assert_eq!(got.get(&[b, dy, dx]), want, "center ({cy},{cx})");
                    }
                }
            }
        }
    }

    #[test]
    fn dense_windows_cover_every_pixel_in_order() {
        let image = img(1, 3, 4, |_, y, x| (y * 4 + x) as f32);
        let centers: Vec<(usize, usize)> =
            dense_windows(&image, 3).unwrap().map(|(c, _)| c).collect();
        assert_eq!(centers.len(), 12);
        assert_eq!(centers[0], (0, 0));
        assert_eq!(centers[4], (1, 0));
        assert_eq!(centers[11], (2, 3));
        assert!(dense_windows(&image, 4).is_err());
    }

    fn toy_catalog() -> LoadedCatalog {
        // Two regions, two timestamps each, 6x6 single-band images whose
        // constant value encodes (region, timestep) for easy assertions.
        let mut entries = Vec::new();
        let mut images = Vec::new();
        for (r, region) in ["ra", "rb"].iter().enumerate() {
            for t in 0..2i64 {
                entries.push(CatalogEntry {
                    region_id: region.to_string(),
                    timestamp: 100 + t,
                    cloud: 0.0,
                    coverage: 1.0,
                    path: PathBuf::from(format!("{region}_{t}")),
                });
                images.push(img(1, 6, 6, |_, _, _| (r * 10 + t as usize) as f32));
            }
        }
        LoadedCatalog::from_images(entries, images).unwrap()
    }

    #[test]
    fn triplet_pairs_consecutive_timestamps_and_foreign_negative() {
        let catalog = toy_catalog();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = sample_triplet(&catalog, 3, &mut rng).unwrap();
            assert_eq!(t.patch_count(), 4);
            assert_eq!(t.positive_timestamp, t.anchor_timestamp + 1);
            assert_ne!(t.anchor_region, t.negative_region);
            // Anchor and positive patches are spatially aligned; with the
            // constant toy images the positive differs only by the timestep
            // code, and every negative patch carries the other region's code.
            let a = t.anchor[0].data()[0];
            let p = t.positive[0].data()[0];
            assert_eq!(p, a + 1.0);
            for n in &t.negative {
                assert_ne!(n.data()[0] as usize / 10, a as usize / 10);
            }
        }
    }

    #[test]
    fn triplet_sampling_is_deterministic_in_the_seed() {
        let catalog = toy_catalog();
        let t1 = sample_triplet(&catalog, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let t2 = sample_triplet(&catalog, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(t1.anchor_region, t2.anchor_region);
        assert_eq!(t1.anchor_timestamp, t2.anchor_timestamp);
        assert_eq!(t1.negative_region, t2.negative_region);
        for (a, b) in t1.negative.iter().zip(&t2.negative) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn triplet_needs_two_regions_and_a_successor() {
        let one_region = LoadedCatalog::from_images(
            vec![
                CatalogEntry {
                    region_id: "solo".into(),
                    timestamp: 0,
                    cloud: 0.0,
                    coverage: 1.0,
                    path: PathBuf::from("x"),
                },
                CatalogEntry {
                    region_id: "solo".into(),
                    timestamp: 1,
                    cloud: 0.0,
                    coverage: 1.0,
                    path: PathBuf::from("y"),
                },
            ],
            vec![img(1, 4, 4, |_, _, _| 0.0), img(1, 4, 4, |_, _, _| 0.0)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triplet(&one_region, 3, &mut rng).is_err());

        let no_successor = LoadedCatalog::from_images(
            vec![
                CatalogEntry {
                    region_id: "a".into(),
                    timestamp: 0,
                    cloud: 0.0,
                    coverage: 1.0,
                    path: PathBuf::from("x"),
                },
                CatalogEntry {
                    region_id: "b".into(),
                    timestamp: 0,
                    cloud: 0.0,
                    coverage: 1.0,
                    path: PathBuf::from("y"),
                },
            ],
            vec![img(1, 4, 4, |_, _, _| 0.0), img(1, 4, 4, |_, _, _| 0.0)],
        )
        .unwrap();
        assert!(sample_triplet(&no_successor, 3, &mut rng).is_err());
    }
}
