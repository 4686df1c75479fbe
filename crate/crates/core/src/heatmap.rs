//! Tile score export and raster rendering for attention / instance overlays
//! and confusion matrices.
//!
//! Scores are min–max normalized per slide before colouring. The colormap
//! (`nhi-jet`, version 1) interpolates linearly between five stops:
//! 0.0 blue `(0,0,255)`, 0.25 cyan `(0,255,255)`, 0.5 green `(0,255,0)`,
//! 0.75 yellow `(255,255,0)`, 1.0 red `(255,0,0)`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingBag, TaskClass, TileRef};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::mil::{self, BagView, MilModel};

pub const COLORMAP: &str = "nhi-jet";
pub const SCORE_FORMAT_VERSION: u32 = 1;
const BACKGROUND: Rgb<u8> = Rgb([240, 240, 240]);

const STOPS: [(f64, [u8; 3]); 5] = [
    (0.0, [0, 0, 255]),
    (0.25, [0, 255, 255]),
    (0.5, [0, 255, 0]),
    (0.75, [255, 255, 0]),
    (1.0, [255, 0, 0]),
];

pub fn colormap(value: f64) -> Rgb<u8> {
    let v = if value.is_finite() { value.clamp(0.0, 1.0) } else { 0.0 };
    for w in STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if v <= b {
            let t = (v - a) / (b - a);
            let mix = |i: usize| (ca[i] as f64 + t * (cb[i] as f64 - ca[i] as f64)).round() as u8;
            return Rgb([mix(0), mix(1), mix(2)]);
        }
    }
    Rgb(STOPS[4].1)
}

/// Per-slide min–max scaling to `[0, 1]`; a constant slide maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values
        .iter()
        .map(|v| if range > 0.0 { (v - min) / range } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapMode {
    Attention,
    Instance,
}

impl fmt::Display for HeatmapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeatmapMode::Attention => "attention",
            HeatmapMode::Instance => "instance",
        })
    }
}

impl FromStr for HeatmapMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(HeatmapMode::Attention),
            "instance" => Ok(HeatmapMode::Instance),
            _ => Err(Error::Invalid(format!("unknown heatmap mode {s:?}"))),
        }
    }
}

/// Scores per tile: one column (`attention`) or one per task class (`p_<class>`).
#[derive(Debug, Clone, PartialEq)]
pub struct TileScores {
    pub slide_id: String,
    pub mode: HeatmapMode,
    pub columns: Vec<String>,
    pub tiles: Vec<TileRef>,
    /// `scores[i][c]` for tile `i`, column `c`.
    pub scores: Vec<Vec<f64>>,
}

pub fn tile_scores(model: &MilModel, bag: &EmbeddingBag, mode: HeatmapMode) -> Result<TileScores> {
    let data = bag.to_f64();
    let view = BagView::new(&data, bag.dim)?;
    let trace = mil::predict(model, &view)?;
    let (columns, scores) = match mode {
        HeatmapMode::Attention => (
            vec!["attention".to_string()],
            trace.attention.iter().map(|&a| vec![a]).collect(),
        ),
        HeatmapMode::Instance => (
            model.task.class_names().into_iter().map(|c| format!("p_{c}")).collect(),
            mil::tile_probabilities(&trace, &model.task),
        ),
    };
    Ok(TileScores {
        slide_id: bag.slide_id.clone(),
        mode,
        columns,
        tiles: bag.tiles.clone(),
        scores,
    })
}

impl TileScores {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.scores.iter().map(|row| row[c]).collect())
    }

    /// Column rendered by default: attention, or the last class's probability
    /// (Hi for neutrophil and Nancy-low, grade 4 for Nancy-high).
    pub fn default_column(&self) -> &str {
        self.columns.last().map(String::as_str).unwrap_or("attention")
    }

    /// Column for a class name in instance mode (`Hi`, `3`, ...).
    pub fn class_column(&self, class: &str) -> Result<String> {
        if self.mode != HeatmapMode::Instance {
            return Err(Error::Invalid("class selection applies to instance mode only".into()));
        }
        class.parse::<TaskClass>()?;
        let name = format!("p_{class}");
        if self.columns.contains(&name) {
            Ok(name)
        } else {
            Err(Error::Invalid(format!(
                "class {class} is not an output of this model (columns: {})",
                self.columns.join(", ")
            )))
        }
    }

    /// Tab-separated, with `#` metadata lines (format version, mode,
    /// colormap, normalization) before the header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# nhi-tile-scores version={SCORE_FORMAT_VERSION}");
        let _ = writeln!(out, "# slide_id={} mode={}", self.slide_id, self.mode);
        let _ = writeln!(out, "# colormap={COLORMAP} normalization=per-slide-min-max");
        out.push_str("slide_id\tlevel\tx\ty\twidth\theight");
        for c in &self.columns {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
        for (t, row) in self.tiles.iter().zip(&self.scores) {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                t.slide_id, t.level, t.x, t.y, t.width, t.height
            );
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Paint normalized tile values at their geometry, downsampled by `downsample`.
/// Where tiles overlap the larger value wins.
pub fn render_tiles(tiles: &[TileRef], values: &[f64], downsample: u32) -> Result<RgbImage> {
    if tiles.len() != values.len() {
        return Err(Error::Shape {
            context: "tiles vs values",
            expected: tiles.len(),
            actual: values.len(),
        });
    }
    let ds = downsample.max(1);
    let width = tiles
        .iter()
        .map(|t| (t.x + t.width).div_ceil(ds))
        .max()
        .unwrap_or(1)
        .max(1);
    let height = tiles
        .iter()
        .map(|t| (t.y + t.height).div_ceil(ds))
        .max()
        .unwrap_or(1)
        .max(1);
    let mut best = vec![f64::NEG_INFINITY; (width * height) as usize];
    for (t, &v) in tiles.iter().zip(values) {
        for y in t.y / ds..(t.y + t.height).div_ceil(ds) {
            for x in t.x / ds..(t.x + t.width).div_ceil(ds) {
                let p = &mut best[(y * width + x) as usize];
                *p = p.max(v);
            }
        }
    }
    Ok(RgbImage::from_fn(width, height, |x, y| {
        let v = best[(y * width + x) as usize];
        if v == f64::NEG_INFINITY {
            BACKGROUND
        } else {
            colormap(v)
        }
    }))
}

/// Row-normalized confusion matrix as a grid, `cell` pixels per entry.
pub fn render_confusion(cm: &ConfusionMatrix, cell: u32) -> RgbImage {
    let k = cm.k() as u32;
    let norm = cm.row_normalized();
    let cell = cell.max(1);
    RgbImage::from_fn(k * cell, k * cell, |x, y| {
        let (i, j) = ((y / cell) as usize, (x / cell) as usize);
        if x % cell == 0 || y % cell == 0 {
            Rgb([255, 255, 255])
        } else {
            colormap(norm[i][j])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_stops() {
        assert_eq!(colormap(0.0), Rgb([0, 0, 255]));
        assert_eq!(colormap(0.5), Rgb([0, 255, 0]));
        assert_eq!(colormap(1.0), Rgb([255, 0, 0]));
        assert_eq!(colormap(7.0), Rgb([255, 0, 0]));
        assert_eq!(colormap(0.125), Rgb([0, 128, 255]));
    }

    #[test]
    fn normalization() {
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max_normalize(&[0.25; 4]), vec![0.0; 4]);
    }

    #[test]
    fn renders_tile_geometry() {
        let t = |x, y| TileRef {
            slide_id: "s".into(),
            level: 0,
            x,
            y,
            width: 4,
            height: 4,
            microns_per_pixel: 1.0,
        };
        let img = render_tiles(&[t(0, 0), t(4, 0)], &[0.0, 1.0], 2).unwrap();
        assert_eq!(img.dimensions(), (4, 2));
        assert_eq!(*img.get_pixel(0, 0), Rgb([0, 0, 255]));
        assert_eq!(*img.get_pixel(3, 1), Rgb([255, 0, 0]));
    }

    #[test]
    fn confusion_grid_size() {
        let cm = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![3, 1], vec![0, 2]]).unwrap();
        let img = render_confusion(&cm, 10);
        assert_eq!(img.dimensions(), (20, 20));
        assert_eq!(*img.get_pixel(15, 15), colormap(1.0));
    }
}
