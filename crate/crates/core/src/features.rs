//! Deterministic handcrafted patch descriptor, used in place of a neural
//! backbone so the whole pipeline runs without external weights.
//!
//! Layout of the 32 values:
//! - `0..24`: 8-bin normalized histograms of R, G, B (bin width 32)
//! - `24..30`: mean and population std of R, G, B, divided by 255
//! - `30..32`: mean and population std of grayscale central-difference
//!   gradient magnitude, divided by 255

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fbag::FeatureBag;
use crate::raster::RasterImage;
use crate::tiler::{crop_patch, PatchCoord};

pub const HANDCRAFTED_DIM: usize = 32;
const BINS: usize = 8;

pub fn extract_handcrafted(patch: &RasterImage) -> Result<[f64; HANDCRAFTED_DIM]> {
    let (w, h) = (patch.width() as usize, patch.height() as usize);
    if w != h {
        return Err(Error::Shape(format!("patch must be square, got {w}x{h}")));
    }
    let total = (w * h) as f64;
    let mut out = [0.0; HANDCRAFTED_DIM];

    let mut hist = [[0u64; BINS]; 3];
    let mut sum = [0.0f64; 3];
    for px in patch.pixels().chunks_exact(3) {
        for c in 0..3 {
            hist[c][(px[c] >> 5) as usize] += 1;
            sum[c] += px[c] as f64;
        }
    }
    let mean = sum.map(|s| s / total);
    let mut var = [0.0f64; 3];
    for px in patch.pixels().chunks_exact(3) {
        for c in 0..3 {
            let d = px[c] as f64 - mean[c];
            var[c] += d * d;
        }
    }
    for c in 0..3 {
        for b in 0..BINS {
            out[c * BINS + b] = hist[c][b] as f64 / total;
        }
        out[24 + 2 * c] = mean[c] / 255.0;
        out[25 + 2 * c] = (var[c] / total).sqrt() / 255.0;
    }

    let gray: Vec<f64> =
        patch.pixels().chunks_exact(3).map(|px| (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0).collect();
    let at = |x: usize, y: usize| gray[y * w + x];
    let mut mags = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let gx = (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            let gy = (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            mags.push(gx.hypot(gy) / 255.0);
        }
    }
    let gmean = mags.iter().sum::<f64>() / total;
    let gvar = mags.iter().map(|m| (m - gmean) * (m - gmean)).sum::<f64>() / total;
    out[30] = gmean;
    out[31] = gvar.sqrt();
    Ok(out)
}

/// Crops every coordinate from `image` and stacks the descriptors into a bag.
pub fn extract_bag(slide_id: &str, image: &RasterImage, coords: &[PatchCoord]) -> Result<FeatureBag> {
    let patch_size = coords
        .first()
        .map(|c| c.patch_size)
        .ok_or_else(|| Error::invalid(format!("slide {slide_id:?} has no patches")))?;
    let mut features = Array2::zeros((coords.len(), HANDCRAFTED_DIM));
    for (i, coord) in coords.iter().enumerate() {
        if coord.patch_size != patch_size {
            return Err(Error::invalid("patches within a bag must share one size"));
        }
        let row = extract_handcrafted(&crop_patch(image, coord)?)?;
        features.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    FeatureBag::new(slide_id, patch_size, coords.to_vec(), features)
}
