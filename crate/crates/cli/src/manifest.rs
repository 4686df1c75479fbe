use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use nhi_core::{NhiGrade, TileRef};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One pyramid level of a slide: a plain raster image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub level: u32,
    pub path: PathBuf,
    pub mpp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slide {
    pub slide_id: String,
    pub case_id: String,
    pub label: NhiGrade,
    #[serde(default)]
    pub center: String,
    pub levels: Vec<Level>,
}

impl Slide {
    pub fn level(&self, level: u32) -> Option<&Level> {
        self.levels.iter().find(|l| l.level == level)
    }

    /// Coarsest level at or below the resolution of `level`, for tissue detection.
    pub fn mask_level(&self, level: u32) -> Option<&Level> {
        self.levels.iter().filter(|l| l.level >= level).max_by_key(|l| l.level)
    }
}

/// Slide manifest (TOML):
///
/// ```toml
/// [[slide]]
/// slide_id = "s1"
/// case_id = "c1"
/// label = 3
/// center = "A"
/// levels = [{ level = 0, path = "s1_l0.png", mpp = 0.17 }]
/// ```
///
/// Relative image paths are resolved against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideManifest {
    #[serde(default, rename = "slide")]
    pub slides: Vec<Slide>,
}

impl SlideManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading slide manifest {}", path.display()))?;
        let mut m: SlideManifest = toml::from_str(&text)
            .map_err(|e| nhi_core::Error::Invalid(format!("slide manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut seen = BTreeMap::new();
        for s in &mut m.slides {
            if seen.insert(s.slide_id.clone(), ()).is_some() {
                bail!(nhi_core::Error::Invalid(format!("duplicate slide_id {}", s.slide_id)));
            }
            for l in &mut s.levels {
                if l.path.is_relative() {
                    l.path = base.join(&l.path);
                }
            }
        }
        m.slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        Ok(m)
    }

    pub fn get(&self, slide_id: &str) -> Option<&Slide> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Accepted-tile table. Columns: slide_id, level, x, y, width, height,
/// tissue_fraction, sharpness. A `# profile=<name> microns_per_pixel=<mpp>`
/// line precedes the header.
pub const TILES_HEADER: &str = "slide_id\tlevel\tx\ty\twidth\theight\ttissue_fraction\tsharpness";

pub struct TileTable {
    pub profile: String,
    pub tiles: Vec<TileRef>,
}

pub fn parse_tile_table(text: &str, origin: &Path) -> Result<TileTable> {
    let bad = |m: String| nhi_core::Error::Invalid(format!("{}: {m}", origin.display()));
    let mut profile = None;
    let mut mpp = None;
    let mut tiles = Vec::new();
    let mut header = false;
    for (n, line) in text.lines().enumerate() {
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("profile", v)) => profile = Some(v.to_string()),
                    Some(("microns_per_pixel", v)) => {
                        mpp = Some(v.parse::<f64>().map_err(|_| bad(format!("bad resolution {v:?}")))?)
                    }
                    _ => {}
                }
            }
            continue;
        }
        if !header {
            if line != TILES_HEADER {
                bail!(bad(format!("unexpected header {line:?}")));
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            bail!(bad(format!("line {}: expected 8 fields, got {}", n + 1, f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<u32>()
                .map_err(|_| bad(format!("line {}: bad number {:?}", n + 1, f[i])))
        };
        tiles.push(TileRef {
            slide_id: f[0].to_string(),
            level: num(1)?,
            x: num(2)?,
            y: num(3)?,
            width: num(4)?,
            height: num(5)?,
            microns_per_pixel: mpp.ok_or_else(|| bad("missing microns_per_pixel metadata".into()))?,
        });
    }
    if !header {
        bail!(bad("empty tile table".into()));
    }
    Ok(TileTable {
        profile: profile.ok_or_else(|| bad("missing profile metadata".into()))?,
        tiles,
    })
}

/// Tab-separated table with a header row, looked up by column name.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| nhi_core::Error::Invalid(format!("{} is empty", origin.display())))?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row: Vec<String> = line.split('\t').map(str::to_string).collect();
            if row.len() != columns.len() {
                bail!(nhi_core::Error::Invalid(format!(
                    "{} row {}: expected {} fields, got {}",
                    origin.display(),
                    n + 1,
                    columns.len(),
                    row.len()
                )));
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Artifact {
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            sha256: sha256_hex(&data),
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Record of one command invocation, written as `run.json` next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub const RUN_MANIFEST: &str = "run.json";

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self)?;
        nhi_core::fsutil::write_atomic(&out_dir.join(RUN_MANIFEST), text.as_bytes())?;
        Ok(())
    }
}
