//! Red alpha overlay of per-patch attention on a slide thumbnail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::tiler::PatchCoord;

pub const OVERLAY_RGB: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapParams {
    /// Lower clipping percentile, nearest-rank, in [0, 100].
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub max_alpha: f64,
    /// Full-resolution pixels per thumbnail pixel.
    pub thumbnail_scale: u32,
}

impl Default for HeatmapParams {
    fn default() -> Self {
        HeatmapParams { clip_lo: 1.0, clip_hi: 99.0, max_alpha: 0.6, thumbnail_scale: 1 }
    }
}

impl HeatmapParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.clip_lo)
            || !(0.0..=100.0).contains(&self.clip_hi)
            || self.clip_lo >= self.clip_hi
        {
            return Err(Error::invalid(format!(
                "clip percentiles must satisfy 0 <= lo < hi <= 100, got {} and {}",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.max_alpha) {
            return Err(Error::invalid(format!("max_alpha {} outside [0, 1]", self.max_alpha)));
        }
        if self.thumbnail_scale == 0 {
            return Err(Error::invalid("thumbnail_scale must be positive"));
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p / 100 * n)`, with rank 0 promoted to 1.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Percentile clipping followed by min-max scaling. A degenerate clipped range
/// maps every value to 0.5.
pub fn normalize_attention(attention: &[f64], params: &HeatmapParams) -> Result<Vec<f64>> {
    params.validate()?;
    if attention.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(v) = attention.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::invalid(format!("attention value {v} is not a finite non-negative number")));
    }
    let mut sorted = attention.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = nearest_rank(&sorted, params.clip_lo);
    let hi = nearest_rank(&sorted, params.clip_hi);
    if hi <= lo {
        return Ok(vec![0.5; attention.len()]);
    }
    Ok(attention.iter().map(|v| (v.clamp(lo, hi) - lo) / (hi - lo)).collect())
}

/// Thumbnail rectangle `[x0, x1) × [y0, y1)` covered by a full-resolution patch.
pub fn thumbnail_rect(coord: &PatchCoord, scale: u32) -> (u32, u32, u32, u32) {
    let x0 = coord.x / scale;
    let y0 = coord.y / scale;
    let x1 = ((coord.x + coord.patch_size) / scale).max(x0 + 1);
    let y1 = ((coord.y + coord.patch_size) / scale).max(y0 + 1);
    (x0, y0, x1, y1)
}

pub fn blend_channel(c: u8, overlay: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * c as f64 + alpha * overlay as f64).round().clamp(0.0, 255.0) as u8
}

pub fn render_heatmap(
    thumbnail: &RasterImage,
    coords: &[PatchCoord],
    values: &[f64],
    params: &HeatmapParams,
) -> Result<RasterImage> {
    params.validate()?;
    if coords.len() != values.len() {
        return Err(Error::Shape(format!("{} coords for {} values", coords.len(), values.len())));
    }
    let mut out = thumbnail.clone();
    for (coord, &value) in coords.iter().zip(values) {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("normalized value {value} outside [0, 1]")));
        }
        let (x0, y0, x1, y1) = thumbnail_rect(coord, params.thumbnail_scale);
        if x1 > thumbnail.width() || y1 > thumbnail.height() {
            return Err(Error::invalid(format!(
                "patch {coord:?} at scale {} exceeds {}x{} thumbnail",
                params.thumbnail_scale,
                thumbnail.width(),
                thumbnail.height()
            )));
        }
        let alpha = value * params.max_alpha;
        for y in y0..y1 {
            for x in x0..x1 {
                let px = thumbnail.pixel(x, y);
                out.put_pixel(x, y, std::array::from_fn(|c| blend_channel(px[c], OVERLAY_RGB[c], alpha)));
            }
        }
    }
    Ok(out)
}

/// Smallest integer scale at which every patch fits inside the thumbnail.
pub fn infer_thumbnail_scale(coords: &[PatchCoord], thumb_w: u32, thumb_h: u32) -> u32 {
    coords
        .iter()
        .map(|c| ((c.x + c.patch_size).div_ceil(thumb_w)).max((c.y + c.patch_size).div_ceil(thumb_h)))
        .max()
        .unwrap_or(1)
        .max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(lo: f64, hi: f64) -> HeatmapParams {
        HeatmapParams { clip_lo: lo, clip_hi: hi, ..HeatmapParams::default() }
    }

    #[test]
    fn uniform_attention_is_half() {
        assert_eq!(normalize_attention(&[0.25; 4], &HeatmapParams::default()).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn two_values_hit_endpoints() {
        assert_eq!(normalize_attention(&[0.9, 0.1], &params(0.0, 100.0)).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn outlier_is_clipped_to_99th_percentile() {
        let mut att: Vec<f64> = (0..100).map(|i| 0.001 + i as f64 * 1e-5).collect();
        att[37] = 0.5;
        let out = normalize_attention(&att, &HeatmapParams::default()).unwrap();

        // oracle: sort, take ranks ceil(0.01*100)=1 and ceil(0.99*100)=99
        let mut sorted = att.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[0];
        let hi = sorted[98];
        assert_eq!(out[37], 1.0);
        for (i, v) in att.iter().enumerate() {
            let expect = (v.min(hi).max(lo) - lo) / (hi - lo);
            assert!((out[i] - expect).abs() < 1e-12);
        }
        // the runner-up sets the scale and also maps to 1
        let second = att.iter().enumerate().filter(|(i, _)| *i != 37).max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(out[second], 1.0);
    }

    #[test]
    fn empty_coords_are_noop() {
        let thumb = RasterImage::from_fn(5, 4, |x, y| [x as u8, y as u8, 7]).unwrap();
        assert_eq!(render_heatmap(&thumb, &[], &[], &HeatmapParams::default()).unwrap(), thumb);
    }

    #[test]
    fn full_blend_is_pure_red() {
        let thumb = RasterImage::filled(8, 8, [255; 3]).unwrap();
        let p = HeatmapParams { max_alpha: 1.0, thumbnail_scale: 4, ..HeatmapParams::default() };
        let out = render_heatmap(&thumb, &[PatchCoord::new(8, 0, 16)], &[1.0], &p).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if (2..6).contains(&x) && y < 4 { [255, 0, 0] } else { [255; 3] };
                assert_eq!(out.pixel(x, y), expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn partial_blend_on_white() {
        // alpha = 0.5 * 0.6 = 0.3; green = round(0.7 * 255) = round(178.5) = 179
        let thumb = RasterImage::filled(4, 4, [255; 3]).unwrap();
        let p = HeatmapParams { max_alpha: 0.6, thumbnail_scale: 1, ..HeatmapParams::default() };
        let out = render_heatmap(&thumb, &[PatchCoord::new(0, 0, 2)], &[0.5], &p).unwrap();
        assert_eq!(out.pixel(0, 0), [255, 179, 179]);
        assert_eq!(out.pixel(3, 3), [255, 255, 255]);
    }

    #[test]
    fn out_of_extent_rejected() {
        let thumb = RasterImage::filled(4, 4, [0; 3]).unwrap();
        let p = HeatmapParams { thumbnail_scale: 2, ..HeatmapParams::default() };
        assert!(render_heatmap(&thumb, &[PatchCoord::new(6, 0, 4)], &[1.0], &p).is_err());
        assert!(render_heatmap(&thumb, &[PatchCoord::new(0, 0, 4)], &[1.0, 0.0], &p).is_err());
    }

    #[test]
    fn scale_inference() {
        let coords = [PatchCoord::new(0, 0, 256), PatchCoord::new(256, 512, 256)];
        assert_eq!(infer_thumbnail_scale(&coords, 32, 48), 16);
    }

    #[test]
    fn higher_value_never_brightens() {
        let thumb = RasterImage::filled(2, 2, [200, 150, 90]).unwrap();
        let p = HeatmapParams { max_alpha: 0.8, ..HeatmapParams::default() };
        let mut prev = [255u8; 3];
        for i in 0..=20 {
            let v = i as f64 / 20.0;
            let px = render_heatmap(&thumb, &[PatchCoord::new(0, 0, 1)], &[v], &p).unwrap().pixel(0, 0);
            assert!(px[1] <= prev[1] && px[2] <= prev[2]);
            prev = px;
        }
    }
}
