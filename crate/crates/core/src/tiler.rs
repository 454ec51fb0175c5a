//! Tissue detection and patch grid generation.
//!
//! Tissue is found by Otsu thresholding the HSV saturation of a block-averaged
//! thumbnail. The patch grid is non-overlapping, anchored at the origin, and
//! drops the right and bottom remainders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub const RESNET_PATCH_SIZE: u32 = 224;
pub const TRANSFORMER_PATCH_SIZE: u32 = 256;
pub const DEFAULT_MIN_TISSUE_FRAC: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchCoord {
    pub x: u32,
    pub y: u32,
    pub patch_size: u32,
}

impl PatchCoord {
    pub fn new(x: u32, y: u32, patch_size: u32) -> Self {
        PatchCoord { x, y, patch_size }
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.patch_size > 0
            && self.x as u64 + self.patch_size as u64 <= width as u64
            && self.y as u64 + self.patch_size as u64 <= height as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    /// Full-resolution pixels per mask pixel along each axis.
    pub scale: u32,
    pub bits: Vec<bool>,
    /// Saturation threshold; mask pixels strictly above it are tissue.
    pub threshold: u8,
    /// Set when the saturation histogram has a single occupied bin.
    pub degenerate: bool,
}

impl TissueMask {
    /// A mask of constant value, mostly useful when tissue detection is skipped.
    pub fn uniform(image_w: u32, image_h: u32, scale: u32, value: bool) -> Self {
        let width = image_w.div_ceil(scale);
        let height = image_h.div_ceil(scale);
        TissueMask {
            width,
            height,
            scale,
            bits: vec![value; width as usize * height as usize],
            threshold: 0,
            degenerate: false,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// HSV saturation scaled to 0..=255, rounded to nearest.
#[inline]
pub fn saturation(rgb: [u8; 3]) -> u8 {
    let max = rgb.iter().copied().max().unwrap_or(0) as u32;
    let min = rgb.iter().copied().min().unwrap_or(0) as u32;
    (255 * (max - min) + max / 2).checked_div(max).unwrap_or(0) as u8
}

/// Block-averaged saturation, one value per mask pixel. Edge blocks average
/// over the pixels they actually cover.
pub fn downsampled_saturation(image: &RasterImage, scale: u32) -> (u32, u32, Vec<u8>) {
    let mw = image.width().div_ceil(scale);
    let mh = image.height().div_ceil(scale);
    let mut sums = vec![0u64; mw as usize * mh as usize];
    let mut counts = vec![0u64; mw as usize * mh as usize];
    for y in 0..image.height() {
        let row = (y / scale) as usize * mw as usize;
        for x in 0..image.width() {
            let i = row + (x / scale) as usize;
            sums[i] += saturation(image.pixel(x, y)) as u64;
            counts[i] += 1;
        }
    }
    let values = sums.iter().zip(&counts).map(|(s, c)| ((s + c / 2) / c) as u8).collect();
    (mw, mh, values)
}

/// Otsu threshold over a 256-bin histogram: the smallest `t` maximizing the
/// between-class variance of `{v <= t}` and `{v > t}`. `None` when fewer than
/// two bins are occupied.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Option<u8> {
    if histogram.iter().filter(|c| **c > 0).count() < 2 {
        return None;
    }
    let total: u64 = histogram.iter().sum();
    let total_sum: f64 = histogram.iter().enumerate().map(|(v, c)| v as f64 * *c as f64).sum();
    let mut best = (f64::NEG_INFINITY, 0u8);
    let mut w0 = 0u64;
    let mut sum0 = 0.0;
    for (t, &count) in histogram.iter().enumerate().take(255) {
        w0 += count;
        sum0 += t as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (total_sum - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

pub fn build_tissue_mask(image: &RasterImage, scale: u32) -> Result<TissueMask> {
    if scale == 0 || scale > image.width().min(image.height()) {
        return Err(Error::invalid(format!("mask scale {scale} must be in 1..={}", image.width().min(image.height()))));
    }
    let (width, height, sat) = downsampled_saturation(image, scale);
    let mut histogram = [0u64; 256];
    for v in &sat {
        histogram[*v as usize] += 1;
    }
    match otsu_threshold(&histogram) {
        Some(threshold) => Ok(TissueMask {
            width,
            height,
            scale,
            bits: sat.iter().map(|v| *v > threshold).collect(),
            threshold,
            degenerate: false,
        }),
        None => {
            log::warn!("saturation histogram is degenerate; no tissue detected");
            Ok(TissueMask { width, height, scale, bits: vec![false; sat.len()], threshold: 255, degenerate: true })
        }
    }
}

/// Fraction of tissue among the mask pixels that intersect a full-resolution cell.
fn cell_tissue_fraction(mask: &TissueMask, coord: &PatchCoord) -> f64 {
    let s = mask.scale;
    let x0 = coord.x / s;
    let y0 = coord.y / s;
    let x1 = (coord.x + coord.patch_size).div_ceil(s).min(mask.width);
    let y1 = (coord.y + coord.patch_size).div_ceil(s).min(mask.height);
    let mut hits = 0usize;
    let mut total = 0usize;
    for my in y0..y1 {
        for mx in x0..x1 {
            total += 1;
            hits += mask.get(mx, my) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn tile_grid(
    image_w: u32,
    image_h: u32,
    patch_size: u32,
    mask: &TissueMask,
    min_tissue_frac: f64,
) -> Result<Vec<PatchCoord>> {
    if patch_size == 0 || patch_size > image_w.min(image_h) {
        return Err(Error::invalid(format!("patch size {patch_size} must be in 1..={}", image_w.min(image_h))));
    }
    if !(0.0..=1.0).contains(&min_tissue_frac) {
        return Err(Error::invalid(format!("min_tissue_frac {min_tissue_frac} outside [0, 1]")));
    }
    if mask.scale == 0 || mask.width != image_w.div_ceil(mask.scale) || mask.height != image_h.div_ceil(mask.scale) {
        return Err(Error::Shape(format!(
            "mask {}x{} at scale {} does not match image {image_w}x{image_h}",
            mask.width, mask.height, mask.scale
        )));
    }
    let mut coords = Vec::new();
    for gy in 0..image_h / patch_size {
        for gx in 0..image_w / patch_size {
            let coord = PatchCoord::new(gx * patch_size, gy * patch_size, patch_size);
            if cell_tissue_fraction(mask, &coord) >= min_tissue_frac {
                coords.push(coord);
            }
        }
    }
    Ok(coords)
}

pub fn crop_patch(image: &RasterImage, coord: &PatchCoord) -> Result<RasterImage> {
    if !coord.fits(image.width(), image.height()) {
        return Err(Error::invalid(format!("patch {coord:?} outside {}x{} image", image.width(), image.height())));
    }
    let p = coord.patch_size as usize;
    let stride = image.width() as usize * 3;
    let mut pixels = Vec::with_capacity(p * p * 3);
    for row in 0..p {
        let start = (coord.y as usize + row) * stride + coord.x as usize * 3;
        pixels.extend_from_slice(&image.pixels()[start..start + p * 3]);
    }
    RasterImage::new(coord.patch_size, coord.patch_size, pixels)
}

pub fn format_coords(coords: &[PatchCoord]) -> String {
    coords.iter().map(|c| format!("{},{},{}\n", c.x, c.y, c.patch_size)).collect()
}

pub fn parse_coords(text: &str) -> Result<Vec<PatchCoord>> {
    let mut coords = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let parse =
            |s: &str| s.trim().parse::<u32>().map_err(|e| Error::invalid(format!("coords line {}: {e}", i + 1)));
        if parts.len() != 3 {
            return Err(Error::invalid(format!("coords line {}: expected x,y,patch_size", i + 1)));
        }
        coords.push(PatchCoord::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
    }
    Ok(coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PINK: [u8; 3] = [230, 120, 190];
    const WHITE: [u8; 3] = [255, 255, 255];

    fn half_tissue(w: u32, h: u32) -> RasterImage {
        RasterImage::from_fn(w, h, |x, _| if x < w / 2 { PINK } else { WHITE }).unwrap()
    }

    /// Oracle: minimize within-class variance by direct summation over every split.
    fn brute_force_otsu(values: &[u8]) -> Option<u8> {
        let var = |xs: &[f64]| {
            if xs.is_empty() {
                return 0.0;
            }
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        };
        let mut best: Option<(f64, u8)> = None;
        for t in 0..=254u8 {
            let lo: Vec<f64> = values.iter().filter(|v| **v <= t).map(|v| *v as f64).collect();
            let hi: Vec<f64> = values.iter().filter(|v| **v > t).map(|v| *v as f64).collect();
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let within = var(&lo) + var(&hi);
            if best.is_none_or(|(b, _)| within < b - 1e-9) {
                best = Some((within, t));
            }
        }
        best.map(|(_, t)| t)
    }

    #[test]
    fn saturation_extremes() {
        assert_eq!(saturation([255, 255, 255]), 0);
        assert_eq!(saturation([0, 0, 0]), 0);
        assert_eq!(saturation([255, 0, 0]), 255);
        assert_eq!(saturation([128, 128, 128]), 0);
    }

    #[test]
    fn white_image_has_no_tissue() {
        let img = RasterImage::filled(512, 512, WHITE).unwrap();
        let mask = build_tissue_mask(&img, 8).unwrap();
        assert_eq!((mask.width, mask.height), (64, 64));
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn gray_image_is_degenerate() {
        let img = RasterImage::filled(64, 64, [128, 128, 128]).unwrap();
        let mask = build_tissue_mask(&img, 4).unwrap();
        assert!(mask.degenerate);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn half_tissue_mask_matches_brute_force_threshold() {
        let img = half_tissue(512, 512);
        let mask = build_tissue_mask(&img, 8).unwrap();
        let (_, _, sat) = downsampled_saturation(&img, 8);
        assert_eq!(Some(mask.threshold), brute_force_otsu(&sat));
        for y in 0..mask.height {
            for x in 0..mask.width {
                assert_eq!(mask.get(x, y), x < 32, "mask pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn otsu_agrees_with_brute_force_on_mixed_histograms() {
        let mut state = 12345u64;
        for _ in 0..20 {
            let values: Vec<u8> = (0..300)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let r = (state >> 33) as u32;
                    if r.is_multiple_of(3) {
                        (r % 60) as u8
                    } else {
                        120 + (r % 100) as u8
                    }
                })
                .collect();
            let mut hist = [0u64; 256];
            for v in &values {
                hist[*v as usize] += 1;
            }
            let t = otsu_threshold(&hist).unwrap();
            let oracle = brute_force_otsu(&values).unwrap();
            // Ties between thresholds with equal criterion are possible in both
            // directions; compare the criterion instead of the index when they differ.
            if t != oracle {
                let between = |t: u8| {
                    let lo: Vec<f64> = values.iter().filter(|v| **v <= t).map(|v| *v as f64).collect();
                    let hi: Vec<f64> = values.iter().filter(|v| **v > t).map(|v| *v as f64).collect();
                    let m = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
                    lo.len() as f64 * hi.len() as f64 * (m(&lo) - m(&hi)).powi(2)
                };
                assert!((between(t) - between(oracle)).abs() <= 1e-9 * between(t));
            }
        }
    }

    #[test]
    fn exact_grid() {
        let mask = TissueMask::uniform(448, 448, 1, true);
        let coords = tile_grid(448, 448, 224, &mask, 0.5).unwrap();
        let expect: Vec<_> =
            [(0, 0), (224, 0), (0, 224), (224, 224)].iter().map(|(x, y)| PatchCoord::new(*x, *y, 224)).collect();
        assert_eq!(coords, expect);
    }

    #[test]
    fn remainder_is_discarded() {
        let mask = TissueMask::uniform(500, 500, 4, true);
        let coords = tile_grid(500, 500, 224, &mask, 0.5).unwrap();
        assert_eq!(coords.len(), 4);
        assert!(coords.iter().all(|c| c.x <= 224 && c.y <= 224));
    }

    #[test]
    fn half_tissue_keeps_left_column() {
        let img = half_tissue(512, 512);
        let mask = build_tissue_mask(&img, 8).unwrap();
        let coords = tile_grid(512, 512, 256, &mask, 0.5).unwrap();
        assert_eq!(coords, vec![PatchCoord::new(0, 0, 256), PatchCoord::new(0, 256, 256)]);
    }

    #[test]
    fn bad_inputs() {
        let mask = TissueMask::uniform(100, 100, 1, true);
        assert!(tile_grid(100, 100, 101, &mask, 0.5).is_err());
        assert!(tile_grid(100, 100, 10, &mask, 1.5).is_err());
        assert!(tile_grid(200, 100, 10, &mask, 0.5).is_err());
        let img = RasterImage::filled(4, 4, WHITE).unwrap();
        assert!(build_tissue_mask(&img, 5).is_err());
        assert!(crop_patch(&img, &PatchCoord::new(2, 2, 3)).is_err());
    }

    #[test]
    fn crop_identity_and_single_pixel() {
        let img = RasterImage::new(2, 2, (0..12).collect()).unwrap();
        assert_eq!(crop_patch(&img, &PatchCoord::new(0, 0, 2)).unwrap(), img);
        let img = RasterImage::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(crop_patch(&img, &PatchCoord::new(1, 0, 1)).unwrap().pixels(), &[4, 5, 6]);
    }

    #[test]
    fn tiles_reassemble_bit_exact() {
        let img =
            RasterImage::from_fn(448, 448, |x, y| [(x % 251) as u8, (y % 241) as u8, ((x * y) % 256) as u8]).unwrap();
        let mask = TissueMask::uniform(448, 448, 1, true);
        let coords = tile_grid(448, 448, 224, &mask, 0.0).unwrap();
        let mut out = RasterImage::filled(448, 448, [0, 0, 0]).unwrap();
        for c in &coords {
            let patch = crop_patch(&img, c).unwrap();
            for y in 0..224 {
                for x in 0..224 {
                    out.put_pixel(c.x + x, c.y + y, patch.pixel(x, y));
                }
            }
        }
        assert_eq!(out, img);
    }

    #[test]
    fn coords_text_round_trip() {
        let coords = vec![PatchCoord::new(0, 0, 224), PatchCoord::new(224, 448, 224)];
        assert_eq!(parse_coords(&format_coords(&coords)).unwrap(), coords);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mask_strategy() -> impl Strategy<Value = (u32, u32, u32, TissueMask)> {
            (8u32..80, 8u32..80, 1u32..5, 2u32..9).prop_flat_map(|(w, h, scale, p)| {
                let mw = w.div_ceil(scale);
                let mh = h.div_ceil(scale);
                proptest::collection::vec(any::<bool>(), (mw * mh) as usize).prop_map(move |bits| {
                    (w, h, p, TissueMask { width: mw, height: mh, scale, bits, threshold: 0, degenerate: false })
                })
            })
        }

        proptest! {
            #[test]
            fn grid_is_disjoint_sorted_and_monotone((w, h, p, mask) in mask_strategy(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                let loose = tile_grid(w, h, p, &mask, lo).unwrap();
                let strict = tile_grid(w, h, p, &mask, hi).unwrap();
                prop_assert!(strict.iter().all(|c| loose.contains(c)));
                for pair in loose.windows(2) {
                    prop_assert!((pair[0].y, pair[0].x) < (pair[1].y, pair[1].x));
                }
                for c in &loose {
                    prop_assert!(c.fits(w, h));
                    prop_assert_eq!(c.x % p, 0);
                    prop_assert_eq!(c.y % p, 0);
                }
                let all = tile_grid(w, h, p, &TissueMask::uniform(w, h, mask.scale, true), 0.0).unwrap();
                prop_assert_eq!(all.len() as u32, (w / p) * (h / p));
            }
        }
    }
}
