//! Frozen tile encoders and the persistent embedding store.
//!
//! # Store layout
//!
//! A store is three files sharing a stem:
//!
//! * `<stem>.json`: manifest with format version, `dim`, the payload and tile
//!   table file names, the payload size and one entry per slide
//!   (`slide_id`, `case_id`, `label`, `center`, `profile`, `tile_count`,
//!   `dim`, byte `offset` and `length` into the payload).
//! * `<stem>.bin`: per slide, tiles in row-major order, each vector `dim`
//!   consecutive little-endian `f32` values.
//! * `<stem>.tiles.tsv`: tab-separated tile table in payload order with
//!   header `slide_id level x y width height microns_per_pixel`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingBag, NhiGrade, TileRef};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::par::Exec;
use crate::preprocess::{grayscale, laplacian_variance};

/// A frozen tile encoder `f: tile → ℝ^d`. Implementations must be
/// deterministic and callable from several threads at once.
pub trait EncoderProvider: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    /// Required tile size in pixels, if the encoder has one.
    fn tile_size(&self) -> Option<(u32, u32)> {
        None
    }
    fn encode(&self, tile: &TileRef, pixels: &RgbImage) -> Result<Vec<f32>>;
}

/// Encode a bag's tiles, preserving order.
pub fn encode_bag(tiles: &[(TileRef, RgbImage)], provider: &dyn EncoderProvider, exec: Exec) -> Result<Vec<Vec<f32>>> {
    if let Some((w, h)) = provider.tile_size() {
        if let Some((t, img)) = tiles.iter().find(|(_, img)| img.dimensions() != (w, h)) {
            return Err(Error::Invalid(format!(
                "encoder {} expects {w}x{h} tiles, tile at ({}, {}) of {} is {}x{}",
                provider.name(),
                t.x,
                t.y,
                t.slide_id,
                img.width(),
                img.height()
            )));
        }
    }
    let out = exec.map(tiles, |(t, img)| provider.encode(t, img));
    let mut vectors = Vec::with_capacity(out.len());
    for (v, (t, _)) in out.into_iter().zip(tiles) {
        let v = v?;
        if v.len() != provider.dim() {
            return Err(Error::Shape {
                context: "encoder output",
                expected: provider.dim(),
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "encoder {} output for tile ({}, {}) of {}",
                provider.name(),
                t.x,
                t.y,
                t.slide_id
            )));
        }
        vectors.push(v);
    }
    Ok(vectors)
}

/// Number of summary statistics fed to the synthetic projection.
pub const SYNTHETIC_FEATURES: usize = 8;

/// Deterministic stand-in encoder.
///
/// For a tile with channels scaled to `[0, 1]` the feature vector is
///
/// ```text
/// φ = [1, mean_r, mean_g, mean_b, std_r, std_g, std_b, sqrt(lap_var) / 255]
/// ```
///
/// (population std; `lap_var` is [`laplacian_variance`] of the BT.601
/// grayscale on the 0..255 scale). The projection `P` is `d x 8`, filled
/// row-major with `rng.random_range(-1.0..1.0)` from
/// `ChaCha8Rng::seed_from_u64(seed)`. The output is `Pφ / ‖Pφ‖` computed in
/// `f64` and rounded to `f32`.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    seed: u64,
    dim: usize,
    tile_size: Option<(u32, u32)>,
    projection: Vec<f64>,
}

impl SyntheticEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("synthetic encoder needs d > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * SYNTHETIC_FEATURES)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Ok(SyntheticEncoder {
            seed,
            dim,
            tile_size: None,
            projection,
        })
    }

    pub fn with_tile_size(mut self, width: u32, height: u32) -> Self {
        self.tile_size = Some((width, height));
        self
    }

    pub fn features(pixels: &RgbImage) -> [f64; SYNTHETIC_FEATURES] {
        let n = (pixels.width() as f64 * pixels.height() as f64).max(1.0);
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        for p in pixels.pixels() {
            for c in 0..3 {
                let v = p[c] as f64 / 255.0;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        let mut phi = [0.0; SYNTHETIC_FEATURES];
        phi[0] = 1.0;
        for c in 0..3 {
            let mean = sum[c] / n;
            phi[1 + c] = mean;
            phi[4 + c] = (sum_sq[c] / n - mean * mean).max(0.0).sqrt();
        }
        let lap = laplacian_variance(&grayscale(pixels), pixels.width() as usize, pixels.height() as usize);
        phi[7] = lap.sqrt() / 255.0;
        phi
    }
}

impl EncoderProvider for SyntheticEncoder {
    fn name(&self) -> String {
        format!("synthetic:seed={}:d={}", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn tile_size(&self) -> Option<(u32, u32)> {
        self.tile_size
    }

    fn encode(&self, _tile: &TileRef, pixels: &RgbImage) -> Result<Vec<f32>> {
        let phi = Self::features(pixels);
        let v: Vec<f64> = self
            .projection
            .chunks(SYNTHETIC_FEATURES)
            .map(|row| row.iter().zip(&phi).map(|(a, b)| a * b).sum())
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NonFinite(format!("{} projection norm", self.name())));
        }
        Ok(v.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Looks tiles up by `(slide_id, level, x, y)` in a precomputed store, so
/// embeddings from an external encoder can replace the built-in one.
pub struct StoreEncoder {
    name: String,
    dim: usize,
    index: HashMap<(String, u32, u32, u32), Vec<f32>>,
}

impl StoreEncoder {
    pub fn new(name: impl Into<String>, store: &EmbeddingStore) -> Self {
        let mut index = HashMap::new();
        for bag in &store.bags {
            for (i, t) in bag.tiles.iter().enumerate() {
                index.insert((t.slide_id.clone(), t.level, t.x, t.y), bag.row(i).to_vec());
            }
        }
        StoreEncoder {
            name: name.into(),
            dim: store.dim,
            index,
        }
    }
}

impl EncoderProvider for StoreEncoder {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tile: &TileRef, _pixels: &RgbImage) -> Result<Vec<f32>> {
        self.index
            .get(&(tile.slide_id.clone(), tile.level, tile.x, tile.y))
            .cloned()
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "{} has no embedding for tile ({}, {}) level {} of {}",
                    self.name, tile.x, tile.y, tile.level, tile.slide_id
                ))
            })
    }
}

/// Resolve a provider spec: `synthetic:seed=<u64>:d=<usize>[:size=<px>]` or
/// `file:<store manifest path>`.
pub fn parse_provider(spec: &str) -> Result<Box<dyn EncoderProvider>> {
    if let Some(path) = spec.strip_prefix("file:") {
        let store = EmbeddingStore::load(Path::new(path))?;
        return Ok(Box::new(StoreEncoder::new(spec, &store)));
    }
    let Some(rest) = spec.strip_prefix("synthetic") else {
        return Err(Error::Invalid(format!("unknown provider {spec:?}")));
    };
    let (mut seed, mut dim, mut size) = (0u64, 64usize, None);
    for part in rest.split(':').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("bad provider option {part:?}")))?;
        let bad = || Error::Invalid(format!("bad value for {key} in {spec:?}"));
        match key {
            "seed" => seed = value.parse().map_err(|_| bad())?,
            "d" => dim = value.parse().map_err(|_| bad())?,
            "size" => size = Some(value.parse::<u32>().map_err(|_| bad())?),
            _ => return Err(Error::Invalid(format!("unknown provider option {key:?}"))),
        }
    }
    let mut enc = SyntheticEncoder::new(seed, dim)?;
    if let Some(s) = size {
        enc = enc.with_tile_size(s, s);
    }
    Ok(Box::new(enc))
}

pub const STORE_FORMAT: &str = "nhi-embedding-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub case_id: String,
    pub label: NhiGrade,
    pub center: String,
    pub profile: String,
    pub tile_count: usize,
    pub dim: usize,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub payload: String,
    pub tile_table: String,
    pub payload_bytes: u64,
    pub slides: Vec<SlideEntry>,
}

/// In-memory embedding store; one bag per slide, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub bags: Vec<EmbeddingBag>,
}

pub const TILE_TABLE_HEADER: &str = "slide_id\tlevel\tx\ty\twidth\theight\tmicrons_per_pixel";

/// Companion file paths for a store manifest path.
pub fn store_paths(manifest: &Path) -> (PathBuf, PathBuf) {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "store".into());
    (
        manifest.with_file_name(format!("{stem}.bin")),
        manifest.with_file_name(format!("{stem}.tiles.tsv")),
    )
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore { dim, bags: Vec::new() }
    }

    pub fn push(&mut self, bag: EmbeddingBag) -> Result<()> {
        bag.validate()?;
        if bag.dim != self.dim {
            return Err(Error::Shape {
                context: "bag dimension vs store",
                expected: self.dim,
                actual: bag.dim,
            });
        }
        if self.bags.iter().any(|b| b.slide_id == bag.slide_id) {
            return Err(Error::Invalid(format!("duplicate slide id {}", bag.slide_id)));
        }
        self.bags.push(bag);
        Ok(())
    }

    pub fn get(&self, slide_id: &str) -> Option<&EmbeddingBag> {
        self.bags.iter().find(|b| b.slide_id == slide_id)
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Serialize to `(manifest json, payload, tile table)`.
    pub fn to_parts(&self, payload_name: &str, tile_table_name: &str) -> (String, Vec<u8>, String) {
        let mut payload = Vec::new();
        let mut table = String::from(TILE_TABLE_HEADER);
        table.push('\n');
        let mut slides = Vec::with_capacity(self.bags.len());
        for bag in &self.bags {
            let offset = payload.len() as u64;
            for v in &bag.embeddings {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            for t in &bag.tiles {
                let _ = writeln!(
                    table,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    t.slide_id, t.level, t.x, t.y, t.width, t.height, t.microns_per_pixel
                );
            }
            slides.push(SlideEntry {
                slide_id: bag.slide_id.clone(),
                case_id: bag.case_id.clone(),
                label: bag.label,
                center: bag.center.clone(),
                profile: bag.profile.clone(),
                tile_count: bag.tiles.len(),
                dim: bag.dim,
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let manifest = StoreManifest {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            dim: self.dim,
            payload: payload_name.into(),
            tile_table: tile_table_name.into(),
            payload_bytes: payload.len() as u64,
            slides,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        (json, payload, table)
    }

    /// Writes the three store files, each atomically.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let (payload_path, table_path) = store_paths(manifest_path);
        let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
        let (json, payload, table) = self.to_parts(&name(&payload_path), &name(&table_path));
        fsutil::write_atomic(&payload_path, &payload)?;
        fsutil::write_atomic(&table_path, table.as_bytes())?;
        fsutil::write_atomic(manifest_path, json.as_bytes())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let json = fsutil::read_string(manifest_path)?;
        let manifest: StoreManifest =
            serde_json::from_str(&json).map_err(|e| Error::format(manifest_path, e.to_string()))?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let payload = fsutil::read(&dir.join(&manifest.payload))?;
        let table = fsutil::read_string(&dir.join(&manifest.tile_table))?;
        Self::from_parts(&manifest, &payload, &table, manifest_path)
    }

    /// Validate and assemble a store from its three parts. `origin` is used in
    /// diagnostics only.
    pub fn from_parts(manifest: &StoreManifest, payload: &[u8], tile_table: &str, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if manifest.format != STORE_FORMAT || manifest.version != STORE_VERSION {
            return Err(bad(format!(
                "unsupported store format {} v{}",
                manifest.format, manifest.version
            )));
        }
        if let Some(s) = manifest.slides.iter().find(|s| s.dim != manifest.dim) {
            return Err(bad(format!(
                "dimension mismatch: slide {} has d = {} but the store has d = {}",
                s.slide_id, s.dim, manifest.dim
            )));
        }
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(bad(format!(
                "payload size mismatch: expected {} bytes, found {} bytes",
                manifest.payload_bytes,
                payload.len()
            )));
        }

        let mut lines = tile_table.lines();
        if lines.next().map(str::trim_end) != Some(TILE_TABLE_HEADER) {
            return Err(bad("tile table header missing or wrong".into()));
        }
        let mut rows = lines.enumerate().filter(|(_, l)| !l.trim().is_empty());

        let mut store = EmbeddingStore::new(manifest.dim);
        for s in &manifest.slides {
            let expected = (s.tile_count * s.dim * 4) as u64;
            if s.length != expected {
                return Err(bad(format!(
                    "slide {}: {} tiles x d {} needs {expected} bytes, entry says {}",
                    s.slide_id, s.tile_count, s.dim, s.length
                )));
            }
            let end = s.offset + s.length;
            if end > payload.len() as u64 {
                return Err(bad(format!(
                    "truncated payload: slide {} needs bytes {}..{} but payload has {} bytes",
                    s.slide_id,
                    s.offset,
                    end,
                    payload.len()
                )));
            }
            let embeddings: Vec<f32> = payload[s.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mut tiles = Vec::with_capacity(s.tile_count);
            for _ in 0..s.tile_count {
                let (lineno, line) = rows
                    .next()
                    .ok_or_else(|| bad(format!("tile table ends before slide {}'s tiles", s.slide_id)))?;
                let tile = parse_tile_row(line).map_err(|m| bad(format!("tile table line {}: {m}", lineno + 2)))?;
                if tile.slide_id != s.slide_id {
                    return Err(bad(format!(
                        "tile table line {} belongs to {} but {} was expected",
                        lineno + 2,
                        tile.slide_id,
                        s.slide_id
                    )));
                }
                tiles.push(tile);
            }
            let bag = EmbeddingBag {
                slide_id: s.slide_id.clone(),
                case_id: s.case_id.clone(),
                center: s.center.clone(),
                label: s.label,
                profile: s.profile.clone(),
                dim: s.dim,
                tiles,
                embeddings,
            };
            store.push(bag).map_err(|e| bad(e.to_string()))?;
        }
        if rows.next().is_some() {
            return Err(bad("tile table has rows beyond the manifest's tiles".into()));
        }
        Ok(store)
    }
}

fn parse_tile_row(line: &str) -> std::result::Result<TileRef, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 7 {
        return Err(format!("expected 7 columns, found {}", f.len()));
    }
    let num = |i: usize| f[i].parse::<u32>().map_err(|_| format!("bad integer {:?}", f[i]));
    let tile = TileRef {
        slide_id: f[0].to_string(),
        level: num(1)?,
        x: num(2)?,
        y: num(3)?,
        width: num(4)?,
        height: num(5)?,
        microns_per_pixel: f[6].parse().map_err(|_| format!("bad resolution {:?}", f[6]))?,
    };
    tile.validate().map_err(|e| e.to_string())?;
    Ok(tile)
}
