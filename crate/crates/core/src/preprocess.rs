//! Tissue detection, morphology, tile planning and tile quality control.
//!
//! Tissue is segmented by Otsu thresholding the HSV saturation channel of a
//! low-resolution level, cleaned with a closing followed by an opening and
//! small-component removal. Tiles are planned on a fixed grid per profile and
//! each tile is accepted only if it covers enough tissue and is sharp enough
//! (variance of the 3×3 Laplacian of its grayscale).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::domain::TileRef;
use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProfileName {
    T0,
    T1,
    T2,
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileName::T0 => "T0",
            ProfileName::T1 => "T1",
            ProfileName::T2 => "T2",
        })
    }
}

impl FromStr for ProfileName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T0" => Ok(ProfileName::T0),
            "T1" => Ok(ProfileName::T1),
            "T2" => Ok(ProfileName::T2),
            _ => Err(Error::Invalid(format!("unknown tiling profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilingProfile {
    pub name: ProfileName,
    pub level: u32,
    pub microns_per_pixel: f64,
    pub tile_size: u32,
    pub overlap: u32,
}

impl TilingProfile {
    pub fn get(name: ProfileName) -> Self {
        let (level, microns_per_pixel, tile_size, overlap) = match name {
            ProfileName::T0 => (0, 0.17, 320, 0),
            ProfileName::T1 => (1, 0.52, 224, 112),
            ProfileName::T2 => (2, 1.55, 224, 112),
        };
        TilingProfile {
            name,
            level,
            microns_per_pixel,
            tile_size,
            overlap,
        }
    }

    pub fn stride(&self) -> u32 {
        self.tile_size - self.overlap
    }
}

/// Standard hexcone RGB → HSV with `h` in degrees `[0, 360)` and `s`, `v` in `[0, 1]`.
/// Achromatic pixels get `h = 0`, `s = 0`.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (if h >= 360.0 { h - 360.0 } else { h }, s, v)
}

/// Saturation scaled to `0..=255`.
pub fn saturation_u8(r: u8, g: u8, b: u8) -> u8 {
    let max = r.max(g).max(b) as u32;
    let min = r.min(g).min(b) as u32;
    if max == 0 {
        0
    } else {
        ((max - min) * 255 + max / 2).checked_div(max).unwrap_or(0).min(255) as u8
    }
}

/// Otsu's threshold: the `t` maximizing the between-class variance of the
/// split `[0..=t] | [t+1..=255]`. The lowest maximizer wins. If every count
/// sits in one bin, that bin is returned.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("Otsu threshold of an empty histogram".into()));
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| histogram[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(occupied[0] as u8);
    }
    let total_f = total as f64;
    let sum_all: f64 = histogram.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..256 {
        w0 += histogram[t] as f64;
        sum0 += t as f64 * histogram[t] as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// Binary tissue mask at the resolution of the image it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub mask_level: u32,
    /// Mask pixels per pixel of the tiling level, per axis.
    pub scale: (f64, f64),
    bits: Vec<bool>,
}

impl TissueMask {
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != (width as usize) * (height as usize) {
            return Err(Error::Shape {
                context: "mask bits",
                expected: (width as usize) * (height as usize),
                actual: bits.len(),
            });
        }
        Ok(TissueMask {
            width,
            height,
            mask_level: 0,
            scale: (1.0, 1.0),
            bits,
        })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        TissueMask {
            width,
            height,
            mask_level: 0,
            scale: (1.0, 1.0),
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Records the ratio between mask pixels and pixels of a level of size
    /// `level_width x level_height`.
    pub fn with_level_scale(mut self, mask_level: u32, level_width: u32, level_height: u32) -> Self {
        self.mask_level = mask_level;
        self.scale = (
            self.width as f64 / level_width as f64,
            self.height as f64 / level_height as f64,
        );
        self
    }

    /// Fraction of mask pixels set inside a rectangle given in tiling-level
    /// pixels. Every mask pixel whose center lies inside the rectangle counts;
    /// a rectangle covering less than one mask pixel samples the pixel under
    /// its center.
    pub fn fraction_in(&self, x: u32, y: u32, width: u32, height: u32) -> f64 {
        let (sx, sy) = self.scale;
        let x0 = x as f64 * sx;
        let y0 = y as f64 * sy;
        let x1 = (x + width) as f64 * sx;
        let y1 = (y + height) as f64 * sy;
        let lo = |a: f64| (a - 0.5).ceil().max(0.0) as u32;
        let hi = |b: f64, lim: u32| ((b - 0.5).ceil().max(0.0) as u32).min(lim);
        let (cx0, cx1) = (lo(x0), hi(x1, self.width));
        let (cy0, cy1) = (lo(y0), hi(y1, self.height));
        if cx0 >= cx1 || cy0 >= cy1 {
            let cx = (((x0 + x1) / 2.0) as u32).min(self.width.saturating_sub(1));
            let cy = (((y0 + y1) / 2.0) as u32).min(self.height.saturating_sub(1));
            return if self.width > 0 && self.height > 0 && self.get(cx, cy) {
                1.0
            } else {
                0.0
            };
        }
        let mut hits = 0usize;
        for yy in cy0..cy1 {
            for xx in cx0..cx1 {
                hits += self.get(xx, yy) as usize;
            }
        }
        hits as f64 / ((cx1 - cx0) as usize * (cy1 - cy0) as usize) as f64
    }
}

/// Saturation histogram of an RGB image (saturation scaled to 0..=255).
pub fn saturation_histogram(image: &RgbImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for p in image.pixels() {
        hist[saturation_u8(p[0], p[1], p[2]) as usize] += 1;
    }
    hist
}

/// Tissue = saturation strictly above the Otsu threshold.
pub fn detect_tissue(image: &RgbImage) -> Result<TissueMask> {
    let threshold = otsu_threshold(&saturation_histogram(image))?;
    let bits = image
        .pixels()
        .map(|p| saturation_u8(p[0], p[1], p[2]) > threshold)
        .collect();
    TissueMask::from_bits(image.width(), image.height(), bits)
}

/// Offsets of a digital disc of radius `r` (`dx² + dy² ≤ r²`).
pub fn disc(radius: u32) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

// Out-of-bounds neighbours are skipped: erosion and dilation only look at
// pixels inside the image, so a solid mask stays solid.
fn morph(mask: &TissueMask, se: &[(i32, i32)], dilate: bool) -> TissueMask {
    let (w, h) = (mask.width as i32, mask.height as i32);
    let mut bits = Vec::with_capacity(mask.bits.len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for &(dx, dy) in se {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let v = mask.bits[(ny * w + nx) as usize];
                if dilate && v {
                    acc = true;
                    break;
                }
                if !dilate && !v {
                    acc = false;
                    break;
                }
            }
            bits.push(acc);
        }
    }
    TissueMask { bits, ..mask.clone() }
}

pub fn dilate(mask: &TissueMask, radius: u32) -> TissueMask {
    morph(mask, &disc(radius), true)
}

pub fn erode(mask: &TissueMask, radius: u32) -> TissueMask {
    morph(mask, &disc(radius), false)
}

/// Clears 8-connected components with fewer than `min_area` pixels.
pub fn remove_small_components(mask: &TissueMask, min_area: usize) -> TissueMask {
    if min_area <= 1 {
        return mask.clone();
    }
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut out = mask.clone();
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        component.clear();
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (px, py) = ((p % w) as i64, (p / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (px + dx, py + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if component.len() < min_area {
            for &p in &component {
                out.bits[p] = false;
            }
        }
    }
    out
}

/// Closing then opening with a disc of `radius`, then small-component removal.
pub fn morph_cleanup(mask: &TissueMask, radius: u32, min_component_area: usize) -> TissueMask {
    let closed = erode(&dilate(mask, radius), radius);
    let opened = dilate(&erode(&closed, radius), radius);
    remove_small_components(&opened, min_component_area)
}

/// Row-major grid of fully contained tiles with stride `tile_size - overlap`.
pub fn plan_tiles(slide_id: &str, width: u32, height: u32, profile: &TilingProfile) -> Vec<TileRef> {
    let axis = |dim: u32| -> u32 {
        if dim < profile.tile_size {
            0
        } else {
            (dim - profile.tile_size) / profile.stride() + 1
        }
    };
    let (nx, ny) = (axis(width), axis(height));
    let mut tiles = Vec::with_capacity((nx * ny) as usize);
    for j in 0..ny {
        for i in 0..nx {
            tiles.push(TileRef {
                slide_id: slide_id.to_string(),
                level: profile.level,
                x: i * profile.stride(),
                y: j * profile.stride(),
                width: profile.tile_size,
                height: profile.tile_size,
                microns_per_pixel: profile.microns_per_pixel,
            });
        }
    }
    tiles
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcThresholds {
    pub min_tissue: f64,
    pub min_sharpness: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            min_tissue: 0.25,
            min_sharpness: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcReason {
    Ok,
    LowTissue,
    Blurry,
}

impl fmt::Display for QcReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QcReason::Ok => "ok",
            QcReason::LowTissue => "low_tissue",
            QcReason::Blurry => "blurry",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRecord {
    pub tile: TileRef,
    pub tissue_fraction: f64,
    pub sharpness: f64,
    pub reason: QcReason,
}

impl QcRecord {
    pub fn accepted(&self) -> bool {
        self.reason == QcReason::Ok
    }
}

/// Luma (BT.601 weights) on the `[0, 255]` scale.
pub fn grayscale(image: &RgbImage) -> Vec<f64> {
    image
        .pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
/// Images narrower or shorter than 3 pixels have sharpness 0.
pub fn laplacian_variance(gray: &[f64], width: usize, height: usize) -> f64 {
    if width < 3 || height < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let c = gray[y * width + x];
            let l = gray[(y - 1) * width + x]
                + gray[(y + 1) * width + x]
                + gray[y * width + x - 1]
                + gray[y * width + x + 1]
                - 4.0 * c;
            sum += l;
            sum_sq += l * l;
        }
    }
    let n = ((width - 2) * (height - 2)) as f64;
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

/// QC for one tile. Low tissue is checked before blur.
pub fn qc_filter(tile: &TileRef, pixels: &RgbImage, mask: &TissueMask, thresholds: &QcThresholds) -> QcRecord {
    let tissue_fraction = mask.fraction_in(tile.x, tile.y, tile.width, tile.height);
    let sharpness = laplacian_variance(&grayscale(pixels), pixels.width() as usize, pixels.height() as usize);
    let reason = if tissue_fraction < thresholds.min_tissue {
        QcReason::LowTissue
    } else if sharpness < thresholds.min_sharpness {
        QcReason::Blurry
    } else {
        QcReason::Ok
    };
    QcRecord {
        tile: tile.clone(),
        tissue_fraction,
        sharpness,
        reason,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphConfig {
    pub radius: u32,
    pub min_component_area: usize,
}

impl Default for MorphConfig {
    fn default() -> Self {
        MorphConfig {
            radius: 2,
            min_component_area: 64,
        }
    }
}

/// Output of [`tile_slide`]: the cleaned mask and one QC row per planned tile.
#[derive(Debug, Clone)]
pub struct TilingResult {
    pub mask: TissueMask,
    pub records: Vec<QcRecord>,
}

impl TilingResult {
    pub fn accepted(&self) -> impl Iterator<Item = &QcRecord> {
        self.records.iter().filter(|r| r.accepted())
    }
}

/// Mask → plan → per-tile QC for one slide. `level_image` is the image at the
/// profile's level; `mask_image` is a (usually lower-resolution) image of the
/// same slide used for tissue detection. Records come back in row-major tile
/// order regardless of `exec`.
#[allow(clippy::too_many_arguments)]
pub fn tile_slide(
    slide_id: &str,
    level_image: &RgbImage,
    mask_image: &RgbImage,
    mask_level: u32,
    profile: &TilingProfile,
    morph_cfg: &MorphConfig,
    thresholds: &QcThresholds,
    exec: Exec,
) -> Result<TilingResult> {
    let raw = detect_tissue(mask_image)?;
    let mask = morph_cleanup(&raw, morph_cfg.radius, morph_cfg.min_component_area).with_level_scale(
        mask_level,
        level_image.width(),
        level_image.height(),
    );
    let tiles = plan_tiles(slide_id, level_image.width(), level_image.height(), profile);
    let records = exec.map(&tiles, |t| {
        let crop = image::imageops::crop_imm(level_image, t.x, t.y, t.width, t.height).to_image();
        qc_filter(t, &crop, &mask, thresholds)
    });
    Ok(TilingResult { mask, records })
}
